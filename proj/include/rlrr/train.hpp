#pragma once

// Fine-tuning loop over a (possibly adapted) ViT: AdamW, epoch-granular
// cosine schedule with linear warmup, grid search and synthetic tasks.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "rlrr/autodiff.hpp"
#include "rlrr/peft.hpp"
#include "rlrr/random.hpp"
#include "rlrr/vit.hpp"

namespace rlrr::train {

enum class Precision { f32, f64 };

const char* precision_name(Precision p);

struct TrainingConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double dropout = 0.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 10;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  /// Stop after this many optimizer steps; 0 means no cap.
  std::size_t max_steps = 0;

  /// ConfigError listing every violated constraint.
  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

struct AdamWHyper {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct Moments {
  Tensor<T> m;
  Tensor<T> v;
  std::size_t step = 0;
};

template <typename T>
using AdamState = std::map<std::string, Moments<T>>;

/// p ← p·(1 − lr·wd), then the bias-corrected Adam update.
template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, Moments<T>& state, const AdamWHyper& h);

/// Steps every trainable tensor that has a gradient; frozen ones are skipped.
template <typename T>
void adamw_step(std::vector<vit::NamedTensor<T>>& params, const ad::Gradients<T>& grads,
                AdamState<T>& state, const AdamWHyper& h);

/// Linear ramp 0 → peak over the warmup, then peak·½(1 + cos(π·t)).
double cosine_warmup_lr(double epoch, const TrainingConfig& cfg);

// Data.

struct Dataset {
  Tensor<double> images;  // [n × H·W·C]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Dataset subset(const std::vector<std::size_t>& rows) const;
};

struct Task {
  Dataset train;
  Dataset val;
  Dataset test;
  std::size_t classes = 0;
};

struct SyntheticTaskSpec {
  std::uint64_t seed = 0;
  std::size_t classes = 4;
  std::size_t train_per_class = 32;
  std::size_t val_per_class = 16;
  std::size_t test_per_class = 16;
  std::size_t image_h = 8;
  std::size_t image_w = 8;
  std::size_t channels = 3;
  double noise = 0.5;
  /// 0 keeps the downstream prototypes equal to the pretrain ones; 1 replaces
  /// them with unrelated patterns.
  double shift = 1.0;

  void validate() const;
  bool operator==(const SyntheticTaskSpec&) const = default;
};

struct SyntheticTask {
  Task pretrain;
  Task downstream;
};

/// Class prototypes plus Gaussian pixel noise. Both distributions reuse the
/// same noise draws, so shift = 0 makes them bitwise equal.
SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec);

// Training.

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct Metrics {
  std::vector<EpochMetrics> history;
  std::size_t steps = 0;
  std::size_t trainable = 0;
  /// Loss of the first batch before any update, NaN when nothing ran.
  double initial_loss = 0.0;

  double final_val_acc() const { return history.empty() ? 0.0 : history.back().val_acc; }
  double final_train_loss() const { return history.empty() ? 0.0 : history.back().train_loss; }
};

/// Header and one row per epoch: epoch,lr,train_loss,train_acc,val_acc.
void write_metrics_csv(std::ostream& out, const Metrics& metrics);

template <typename T>
double accuracy(const vit::Model<T>& model, const peft::AdapterSet<T>& set, const Dataset& data,
                std::size_t batch = 256);

/// Cross-entropy training of every trainable tensor of the model and the
/// adapter set. NumericalError on a non-finite loss, naming epoch and step.
template <typename T>
Metrics train(vit::Model<T>& model, peft::AdapterSet<T>& set, const Task& task,
              const TrainingConfig& cfg);

/// Zeroes the classification head.
template <typename T>
void reset_head(vit::Model<T>& model);

/// Attaches `spec` (fresh head) and trains. The model is left attached.
template <typename T>
Metrics fine_tune(vit::Model<T>& model, peft::AdapterSet<T>& set, const peft::MethodSpec& spec,
                  const Task& task, const TrainingConfig& cfg);

template <typename T>
Metrics linear_probe(vit::Model<T>& model, const Task& task, const TrainingConfig& cfg);
template <typename T>
Metrics full_finetune(vit::Model<T>& model, const Task& task, const TrainingConfig& cfg);

/// Trains a freshly initialized backbone on the task with every tensor
/// trainable, then freezes it.
template <typename T>
vit::Model<T> pretrain(const vit::ViTConfig& cfg, const Task& task, const TrainingConfig& tc);

// Grid search.

struct GridSearchSpace {
  std::vector<double> learning_rates;
  std::vector<double> weight_decays;
  std::vector<double> dropouts = {0.0};
  std::vector<std::size_t> batch_sizes = {32};

  void validate() const;
  std::size_t size() const;
  bool operator==(const GridSearchSpace&) const = default;
};

/// lr {0.2 … 0.0001}, wd {0.05 … 0}, dropout {0 … 0.7}, batch {256, 128, 32}.
GridSearchSpace full_grid();

struct GridEntry {
  std::size_t index = 0;  // declaration order in the cartesian sweep
  TrainingConfig config;
  double val_acc = 0.0;
  bool diverged = false;
  std::string diagnostic;
  Metrics metrics;
};

struct GridResult {
  std::vector<GridEntry> leaderboard;  // best first
  const GridEntry& best() const { return leaderboard.front(); }
};

/// Trains one candidate and returns its metrics.
using GridRunner = std::function<Metrics(const TrainingConfig&)>;

/// Exhaustive sweep over `space` on top of `base`. Ranked by validation
/// accuracy; ties go to the lower learning rate, then the lower weight decay,
/// then declaration order. Diverged candidates rank last; NumericalError when
/// every candidate diverged.
GridResult grid_search(const GridSearchSpace& space, const TrainingConfig& base,
                       const GridRunner& run);

}  // namespace rlrr::train
