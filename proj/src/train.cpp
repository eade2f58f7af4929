#include "rlrr/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

#include "rlrr/error.hpp"

namespace rlrr::train {

const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

void TrainingConfig::validate() const {
  std::vector<std::string> errs;
  if (!(learning_rate >= 0.0)) errs.push_back("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) errs.push_back("weight_decay must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) errs.push_back("dropout must lie in [0, 1)");
  if (batch_size == 0) errs.push_back("batch_size must be positive");
  if (epochs > 0 && warmup_epochs >= epochs) errs.push_back("warmup_epochs must be < epochs");
  if (errs.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, Moments<T>& state, const AdamWHyper& h) {
  if (grad.shape() != param.shape()) {
    throw DimensionError("adamw_step: gradient " + shape_str(grad.shape()) + " for parameter " +
                         shape_str(param.shape()));
  }
  if (state.m.shape() != param.shape() || state.m.size() != param.size()) {
    state.m = Tensor<T>(param.shape());
    state.v = Tensor<T>(param.shape());
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, double(state.step));
  const double decay = 1.0 - h.lr * h.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    double p = double(param[i]) * decay;
    const double m = h.beta1 * double(state.m[i]) + (1.0 - h.beta1) * g;
    const double v = h.beta2 * double(state.v[i]) + (1.0 - h.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    p -= h.lr * (m / c1) / (std::sqrt(v / c2) + h.eps);
    param[i] = static_cast<T>(p);
  }
}

template <typename T>
void adamw_step(std::vector<vit::NamedTensor<T>>& params, const ad::Gradients<T>& grads,
                AdamState<T>& state, const AdamWHyper& h) {
  for (auto& p : params) {
    if (!p.trainable || !grads.has(p.name)) continue;
    adamw_step(*p.value, grads[p.name], state[p.name], h);
  }
}

double cosine_warmup_lr(double epoch, const TrainingConfig& cfg) {
  const double peak = cfg.learning_rate;
  const double warm = double(cfg.warmup_epochs), total = double(cfg.epochs);
  if (epoch < warm) return peak * epoch / warm;
  if (total <= warm) return peak;
  const double t = std::clamp((epoch - warm) / (total - warm), 0.0, 1.0);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Data

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  const std::size_t n = images.cols();
  Dataset out;
  out.images = Tensor<double>(Shape{rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * n), n,
                out.images.data().begin() + static_cast<std::ptrdiff_t>(r * n));
    out.labels.push_back(labels[rows[r]]);
  }
  return out;
}

void SyntheticTaskSpec::validate() const {
  std::vector<std::string> errs;
  if (classes < 2) errs.push_back("classes must be >= 2");
  if (train_per_class == 0) errs.push_back("train_per_class must be positive");
  if (image_h == 0 || image_w == 0 || channels == 0) errs.push_back("image dims must be positive");
  if (!(noise >= 0.0)) errs.push_back("noise must be >= 0");
  if (!(shift >= 0.0 && shift <= 1.0)) errs.push_back("shift must lie in [0, 1]");
  if (errs.empty()) return;
  std::string msg = "invalid task spec:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t pixels = spec.image_h * spec.image_w * spec.channels;
  Rng root(spec.seed);
  Rng proto_rng = root.split();
  Rng alt_rng = root.split();
  auto protos = proto_rng.normal_tensor<double>({spec.classes, pixels}, 1.0);
  auto alts = alt_rng.normal_tensor<double>({spec.classes, pixels}, 1.0);
  const double theta = spec.shift * std::numbers::pi / 2.0;
  const double a = spec.shift == 0.0 ? 1.0 : std::cos(theta);
  const double b = spec.shift == 0.0 ? 0.0 : std::sin(theta);
  Tensor<double> down(protos.shape());
  for (std::size_t i = 0; i < down.size(); ++i) down[i] = a * protos[i] + b * alts[i];

  SyntheticTask out;
  out.pretrain.classes = out.downstream.classes = spec.classes;
  auto fill = [&](std::size_t per_class, Dataset& pre, Dataset& dst) {
    Rng noise_rng = root.split();
    const std::size_t n = per_class * spec.classes;
    pre.images = Tensor<double>(Shape{n, pixels});
    dst.images = Tensor<double>(Shape{n, pixels});
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t c = s % spec.classes;
      pre.labels.push_back(int(c));
      dst.labels.push_back(int(c));
      for (std::size_t p = 0; p < pixels; ++p) {
        const double e = spec.noise * noise_rng.normal();
        pre.images[s * pixels + p] = protos[c * pixels + p] + e;
        dst.images[s * pixels + p] = down[c * pixels + p] + e;
      }
    }
  };
  fill(spec.train_per_class, out.pretrain.train, out.downstream.train);
  fill(spec.val_per_class, out.pretrain.val, out.downstream.val);
  fill(spec.test_per_class, out.pretrain.test, out.downstream.test);
  return out;
}

// ---------------------------------------------------------------------------
// Training

void write_metrics_csv(std::ostream& out, const Metrics& metrics) {
  out << "epoch,lr,train_loss,train_acc,val_acc\n";
  const auto old = out.precision(17);
  for (const auto& e : metrics.history)
    out << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_acc
        << '\n';
  out.precision(old);
}

namespace {

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, const std::vector<int>& labels,
                          std::size_t offset = 0) {
  std::size_t correct = 0;
  const std::size_t c = logits.cols();
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const T* row = logits.data().data() + i * c;
    const auto best = std::max_element(row, row + c) - row;
    correct += best == labels[offset + i];
  }
  return correct;
}

Dataset rows_of(const Dataset& d, const std::vector<std::size_t>& order, std::size_t lo,
                std::size_t hi) {
  return d.subset(std::vector<std::size_t>(order.begin() + std::ptrdiff_t(lo),
                                           order.begin() + std::ptrdiff_t(hi)));
}

}  // namespace

template <typename T>
double accuracy(const vit::Model<T>& model, const peft::AdapterSet<T>& set, const Dataset& data,
                std::size_t batch) {
  if (data.size() == 0) return 0.0;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < data.size(); lo += batch) {
    const std::size_t hi = std::min(data.size(), lo + batch);
    const Dataset part = rows_of(data, order, lo, hi);
    correct += count_correct(peft::predict(model, set, part.images.template cast<T>()), part.labels);
  }
  return double(correct) / double(data.size());
}

template <typename T>
Metrics train(vit::Model<T>& model, peft::AdapterSet<T>& set, const Task& task,
              const TrainingConfig& cfg) {
  cfg.validate();
  if (task.train.size() == 0) throw ContractError("train: empty training split");
  Metrics metrics;
  metrics.initial_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<vit::NamedTensor<T>> params = set.named();
  for (auto& nt : model.tensors()) params.push_back(nt);
  for (const auto& p : params)
    if (p.trainable) metrics.trainable += p.value->size();

  Rng rng(cfg.seed);
  AdamState<T> state;
  std::vector<std::size_t> order(task.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps != 0 && metrics.steps >= cfg.max_steps) break;
    const double lr = cosine_warmup_lr(double(epoch), cfg);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      if (cfg.max_steps != 0 && metrics.steps >= cfg.max_steps) break;
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const Dataset batch = rows_of(task.train, order, lo, hi);

      ad::Tape<T> tape;
      vit::ForwardContext<T> ctx(tape);
      ctx.training = true;
      ctx.dropout = cfg.dropout;
      ctx.rng = &rng;
      peft::PeftHooks<T> hooks(set);
      auto logits = vit::logits(ctx, model, batch.images.template cast<T>(), hooks);
      auto loss = ad::cross_entropy(logits, batch.labels);
      const double lv = double(loss.value()[0]);
      if (!std::isfinite(lv)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(metrics.steps) + " (lr " +
                                 std::to_string(lr) + ")",
                             lv);
      }
      if (metrics.steps == 0) metrics.initial_loss = lv;
      loss_sum += lv * double(hi - lo);
      correct += count_correct(logits.value(), batch.labels);
      seen += hi - lo;

      auto grads = tape.backward(loss);
      adamw_step(params, grads, state, AdamWHyper{lr, cfg.weight_decay});
      ++metrics.steps;
    }
    if (seen == 0) break;
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = loss_sum / double(seen);
    em.train_acc = double(correct) / double(seen);
    em.val_acc = accuracy(model, set, task.val);
    metrics.history.push_back(em);
  }
  return metrics;
}

template <typename T>
void reset_head(vit::Model<T>& model) {
  auto& head = model.at(vit::WeightSlot::global(vit::SlotKind::head));
  head.w = Tensor<T>(head.w.shape());
  head.b = Tensor<T>(head.b.shape());
}

template <typename T>
Metrics fine_tune(vit::Model<T>& model, peft::AdapterSet<T>& set, const peft::MethodSpec& spec,
                  const Task& task, const TrainingConfig& cfg) {
  if (task.classes != 0 && task.classes != model.config().classes) {
    throw ConfigError("task has " + std::to_string(task.classes) + " classes, model head has " +
                      std::to_string(model.config().classes));
  }
  Rng rng(cfg.seed ^ 0xA5A5A5A5ULL);
  reset_head(model);
  set = peft::attach(spec, model, rng);
  return train(model, set, task, cfg);
}

template <typename T>
Metrics linear_probe(vit::Model<T>& model, const Task& task, const TrainingConfig& cfg) {
  peft::MethodSpec spec;
  spec.method = peft::Method::linear_probe;
  peft::AdapterSet<T> set;
  return fine_tune(model, set, spec, task, cfg);
}

template <typename T>
Metrics full_finetune(vit::Model<T>& model, const Task& task, const TrainingConfig& cfg) {
  peft::MethodSpec spec;
  spec.method = peft::Method::full;
  peft::AdapterSet<T> set;
  return fine_tune(model, set, spec, task, cfg);
}

template <typename T>
vit::Model<T> pretrain(const vit::ViTConfig& cfg, const Task& task, const TrainingConfig& tc) {
  Rng rng(tc.seed);
  vit::Model<T> model = vit::init_random<T>(cfg, rng);
  model.set_frozen(false);
  peft::MethodSpec spec;
  spec.method = peft::Method::full;
  peft::AdapterSet<T> none(spec);
  train(model, none, task, tc);
  model.set_frozen(true);
  return model;
}

// ---------------------------------------------------------------------------
// Grid search

void GridSearchSpace::validate() const {
  std::vector<std::string> errs;
  if (learning_rates.empty()) errs.push_back("learning_rates is empty");
  if (weight_decays.empty()) errs.push_back("weight_decays is empty");
  if (dropouts.empty()) errs.push_back("dropouts is empty");
  if (batch_sizes.empty()) errs.push_back("batch_sizes is empty");
  if (errs.empty()) return;
  std::string msg = "invalid grid:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::size_t GridSearchSpace::size() const {
  return learning_rates.size() * weight_decays.size() * dropouts.size() * batch_sizes.size();
}

GridSearchSpace full_grid() {
  return {{0.2, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0001},
          {0.05, 0.01, 0.005, 0.001, 0.0},
          {0.0, 0.1, 0.3, 0.5, 0.7},
          {256, 128, 32}};
}

GridResult grid_search(const GridSearchSpace& space, const TrainingConfig& base,
                       const GridRunner& run) {
  space.validate();
  GridResult result;
  std::size_t index = 0;
  for (double lr : space.learning_rates)
    for (double wd : space.weight_decays)
      for (double dr : space.dropouts)
        for (std::size_t bs : space.batch_sizes) {
          GridEntry e;
          e.index = index++;
          e.config = base;
          e.config.learning_rate = lr;
          e.config.weight_decay = wd;
          e.config.dropout = dr;
          e.config.batch_size = bs;
          try {
            e.metrics = run(e.config);
            e.val_acc = e.metrics.final_val_acc();
            if (!std::isfinite(e.val_acc)) throw NumericalError("non-finite validation accuracy", e.val_acc);
          } catch (const NumericalError& err) {
            e.diverged = true;
            e.diagnostic = err.what();
            e.val_acc = 0.0;
          }
          result.leaderboard.push_back(std::move(e));
        }
  std::sort(result.leaderboard.begin(), result.leaderboard.end(),
            [](const GridEntry& a, const GridEntry& b) {
              if (a.diverged != b.diverged) return !a.diverged;
              if (a.val_acc != b.val_acc) return a.val_acc > b.val_acc;
              if (a.config.learning_rate != b.config.learning_rate)
                return a.config.learning_rate < b.config.learning_rate;
              if (a.config.weight_decay != b.config.weight_decay)
                return a.config.weight_decay < b.config.weight_decay;
              return a.index < b.index;
            });
  if (result.leaderboard.front().diverged) {
    throw NumericalError("grid_search: every candidate diverged; first: " +
                             result.leaderboard.front().diagnostic,
                         0.0);
  }
  return result;
}

#define RLRR_TRAIN_INSTANTIATE(T)                                                                \
  template void adamw_step(Tensor<T>&, const Tensor<T>&, Moments<T>&, const AdamWHyper&);        \
  template void adamw_step(std::vector<vit::NamedTensor<T>>&, const ad::Gradients<T>&,           \
                           AdamState<T>&, const AdamWHyper&);                                    \
  template double accuracy(const vit::Model<T>&, const peft::AdapterSet<T>&, const Dataset&,     \
                           std::size_t);                                                         \
  template Metrics train(vit::Model<T>&, peft::AdapterSet<T>&, const Task&, const TrainingConfig&); \
  template void reset_head(vit::Model<T>&);                                                      \
  template Metrics fine_tune(vit::Model<T>&, peft::AdapterSet<T>&, const peft::MethodSpec&,      \
                             const Task&, const TrainingConfig&);                                \
  template Metrics linear_probe(vit::Model<T>&, const Task&, const TrainingConfig&);             \
  template Metrics full_finetune(vit::Model<T>&, const Task&, const TrainingConfig&);            \
  template vit::Model<T> pretrain(const vit::ViTConfig&, const Task&, const TrainingConfig&);

RLRR_TRAIN_INSTANTIATE(float)
RLRR_TRAIN_INSTANTIATE(double)

}  // namespace rlrr::train
