#pragma once

// Command-line front end. Every command reads an experiment config, applies
// flag overrides and writes its machine outputs under --out.
//
//   pretrain-toy  train  eval  merge  analyze  count-params  combine
//   gradcheck  ablate
//
// Exit codes: 0 success, 1 domain error (bad config, shapes, failed check),
// 2 I/O error (missing, unwritable or corrupt files).

#include <iosfwd>
#include <string>
#include <vector>

#include "rlrr/config.hpp"
#include "rlrr/gradcheck.hpp"
#include "rlrr/linalg.hpp"
#include "rlrr/train.hpp"

namespace rlrr::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// Folds the top-level seed into the stage seeds; seed 0 leaves them as set.
io::ExperimentConfig resolve_seeds(io::ExperimentConfig cfg);

/// Finite-difference check of every trainable tensor of the configured
/// method on a random model of the configured geometry.
GradCheckReport check_method_gradients(const io::ExperimentConfig& cfg);

// Ablation.

struct AblationCell {
  std::string name;
  peft::MethodSpec spec;
};

/// Axes: dual, left-only, right-only, residual-off, layers-prefix,
/// module-subset. Cells come out in axis order.
std::vector<AblationCell> ablation_cells(const peft::MethodSpec& base, const vit::ViTConfig& cfg,
                                         const std::vector<std::string>& axes);

struct AblationRow {
  std::size_t cell = 0;
  std::string name;
  bool left = true;
  bool right = true;
  bool residual = true;
  std::string modules;
  std::string layers;
  std::size_t params = 0;
  double val_acc = 0.0;
  double test_acc = 0.0;
};

/// One seeded fine-tune per cell from `backbone`; `jobs` worker threads,
/// rows ordered by cell index.
template <typename T>
std::vector<AblationRow> ablate(const io::ExperimentConfig& cfg, const vit::Model<T>& backbone,
                                const train::Task& task, const std::vector<AblationCell>& cells,
                                std::size_t jobs = 1);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

/// index,sigma_before,sigma_after,alignment
void write_spectral_csv(std::ostream& out, const linalg::SpectralReport& report);
void print_spectral_table(std::ostream& out, const linalg::SpectralReport& report);

}  // namespace rlrr::cli
