#pragma once

// Experiment config: one `key = value` per line, `#` starts a comment.
// Keys are grouped by prefix (vit., method., train., pretrain., task., grid.).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rlrr/peft.hpp"
#include "rlrr/train.hpp"
#include "rlrr/vit.hpp"

namespace rlrr::io {

struct ExperimentConfig {
  vit::ViTConfig vit;
  peft::MethodSpec method;
  train::TrainingConfig training;
  train::TrainingConfig pretraining;
  /// Image dims and classes always follow `vit`.
  train::SyntheticTaskSpec task;
  train::GridSearchSpace grid;
  /// Seeds backbone initialization and adapter draws.
  std::uint64_t seed = 0;

  bool operator==(const ExperimentConfig&) const = default;
};

struct ConfigIssue {
  std::size_t line = 0;  // 0 when the issue has no single line
  std::string message;
};

/// Every issue found, not only the first.
struct ConfigParse {
  ExperimentConfig config;
  std::vector<ConfigIssue> issues;
  bool ok() const { return issues.empty(); }
};

/// Keys every config must set.
const std::vector<std::string>& required_keys();
/// All recognised keys.
const std::vector<std::string>& known_keys();

/// `overrides` (key → value) replace or add entries after the text is read.
ConfigParse try_parse_config(const std::string& text,
                             const std::map<std::string, std::string>& overrides = {});
/// ConfigError carrying every issue, one per line, with line numbers.
ExperimentConfig parse_config(const std::string& text,
                              const std::map<std::string, std::string>& overrides = {});

/// Canonical text: every key that applies to the method, in known_keys()
/// order, doubles printed round-trip exact.
std::string print_config(const ExperimentConfig& cfg);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

/// Task spec with image dims and classes taken from the ViT config.
train::SyntheticTaskSpec task_for(const ExperimentConfig& cfg);

}  // namespace rlrr::io
