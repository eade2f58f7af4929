#include "rlrr/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "rlrr/error.hpp"

namespace rlrr::io {

using peft::Method;

namespace {

struct Field {
  std::string key;
  std::function<bool(Method)> applies;
  // Returns an error message, empty on success.
  std::function<std::string(const std::string&, ExperimentConfig&)> parse;
  std::function<std::string(const ExperimentConfig&)> print;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

bool parse_u64(const std::string& v, std::uint64_t& out) {
  if (v.empty() || v[0] == '-' || v[0] == '+') return false;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && p == v.data() + v.size();
}

bool parse_double(const std::string& v, double& out) {
  if (v.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtod(v.c_str(), &end);
  return errno == 0 && end == v.c_str() + v.size();
}

std::string fmt(double v) { return format_double(v); }

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
  return s;
}

template <typename Get>
Field size_field(std::string key, Get get, std::function<bool(Method)> applies = nullptr) {
  return {key, applies,
          [get, key](const std::string& v, ExperimentConfig& c) -> std::string {
            std::uint64_t x;
            if (!parse_u64(v, x)) return "expected a non-negative integer, got '" + v + "'";
            get(c) = static_cast<std::remove_reference_t<decltype(get(c))>>(x);
            return {};
          },
          [get](const ExperimentConfig& c) {
            auto copy = c;
            return std::to_string(get(copy));
          }};
}

template <typename Get>
Field double_field(std::string key, Get get, std::function<bool(Method)> applies = nullptr) {
  return {key, applies,
          [get](const std::string& v, ExperimentConfig& c) -> std::string {
            double x;
            if (!parse_double(v, x)) return "expected a number, got '" + v + "'";
            get(c) = x;
            return {};
          },
          [get](const ExperimentConfig& c) {
            auto copy = c;
            return fmt(get(copy));
          }};
}

template <typename Get>
Field bool_field(std::string key, Get get, std::function<bool(Method)> applies = nullptr) {
  return {key, applies,
          [get](const std::string& v, ExperimentConfig& c) -> std::string {
            if (v == "true") get(c) = true;
            else if (v == "false") get(c) = false;
            else return "expected true or false, got '" + v + "'";
            return {};
          },
          [get](const ExperimentConfig& c) {
            auto copy = c;
            return std::string(get(copy) ? "true" : "false");
          }};
}

template <typename Get>
Field double_list_field(std::string key, Get get) {
  return {key, nullptr,
          [get](const std::string& v, ExperimentConfig& c) -> std::string {
            std::vector<double> out;
            for (const auto& item : split_list(v)) {
              double x;
              if (!parse_double(item, x)) return "expected a list of numbers, got '" + v + "'";
              out.push_back(x);
            }
            get(c) = out;
            return {};
          },
          [get](const ExperimentConfig& c) {
            auto copy = c;
            return fmt_list(get(copy));
          }};
}

bool rlrr_family(Method m) {
  return m == Method::rlrr || m == Method::rankr_rlrr || m == Method::rlrr_no_residual;
}

void add_training(std::vector<Field>& fs, const std::string& prefix,
                  train::TrainingConfig& (*get)(ExperimentConfig&)) {
  fs.push_back(double_field(prefix + ".learning_rate", [get](ExperimentConfig& c) -> double& { return get(c).learning_rate; }));
  fs.push_back(double_field(prefix + ".weight_decay", [get](ExperimentConfig& c) -> double& { return get(c).weight_decay; }));
  fs.push_back(double_field(prefix + ".dropout", [get](ExperimentConfig& c) -> double& { return get(c).dropout; }));
  fs.push_back(size_field(prefix + ".batch_size", [get](ExperimentConfig& c) -> std::size_t& { return get(c).batch_size; }));
  fs.push_back(size_field(prefix + ".epochs", [get](ExperimentConfig& c) -> std::size_t& { return get(c).epochs; }));
  fs.push_back(size_field(prefix + ".warmup_epochs", [get](ExperimentConfig& c) -> std::size_t& { return get(c).warmup_epochs; }));
  fs.push_back(size_field(prefix + ".max_steps", [get](ExperimentConfig& c) -> std::size_t& { return get(c).max_steps; }));
  fs.push_back(size_field(prefix + ".seed", [get](ExperimentConfig& c) -> std::uint64_t& { return get(c).seed; }));
  fs.push_back({prefix + ".precision", nullptr,
                [get](const std::string& v, ExperimentConfig& c) -> std::string {
                  if (v == "f32") get(c).precision = train::Precision::f32;
                  else if (v == "f64") get(c).precision = train::Precision::f64;
                  else return "expected f32 or f64, got '" + v + "'";
                  return {};
                },
                [get](const ExperimentConfig& c) {
                  auto copy = c;
                  return std::string(train::precision_name(get(copy).precision));
                }});
}

const std::vector<Field>& fields() {
  static const std::vector<Field> fs = [] {
    std::vector<Field> f;
    f.push_back(size_field("seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; }));

    f.push_back(size_field("vit.image_h", [](ExperimentConfig& c) -> std::size_t& { return c.vit.image_h; }));
    f.push_back(size_field("vit.image_w", [](ExperimentConfig& c) -> std::size_t& { return c.vit.image_w; }));
    f.push_back(size_field("vit.channels", [](ExperimentConfig& c) -> std::size_t& { return c.vit.channels; }));
    f.push_back(size_field("vit.patch", [](ExperimentConfig& c) -> std::size_t& { return c.vit.patch; }));
    f.push_back(size_field("vit.dim", [](ExperimentConfig& c) -> std::size_t& { return c.vit.dim; }));
    f.push_back(size_field("vit.layers", [](ExperimentConfig& c) -> std::size_t& { return c.vit.layers; }));
    f.push_back(size_field("vit.heads", [](ExperimentConfig& c) -> std::size_t& { return c.vit.heads; }));
    f.push_back(size_field("vit.classes", [](ExperimentConfig& c) -> std::size_t& { return c.vit.classes; }));

    f.push_back({"method.name", nullptr,
                 [](const std::string& v, ExperimentConfig& c) -> std::string {
                   auto m = peft::parse_method(v);
                   if (!m) return "unknown method '" + v + "'";
                   c.method.method = *m;
                   return {};
                 },
                 [](const ExperimentConfig& c) { return std::string(peft::method_name(c.method.method)); }});
    f.push_back({"method.modules",
                 [](Method m) { return rlrr_family(m) || m == Method::lora || m == Method::ssf; },
                 [](const std::string& v, ExperimentConfig& c) -> std::string {
                   c.method.modules.clear();
                   if (v == "default") return {};
                   for (const auto& item : split_list(v)) {
                     auto k = vit::parse_kind(item);
                     if (!k) return "unknown slot kind '" + item + "'";
                     c.method.modules.push_back(*k);
                   }
                   return {};
                 },
                 [](const ExperimentConfig& c) {
                   if (c.method.modules.empty()) return std::string("default");
                   std::string s;
                   for (std::size_t i = 0; i < c.method.modules.size(); ++i)
                     s += (i ? ", " : "") + std::string(vit::kind_name(c.method.modules[i]));
                   return s;
                 }});
    f.push_back({"method.layers",
                 [](Method m) {
                   return m != Method::linear_probe && m != Method::full && m != Method::vpt_shallow;
                 },
                 [](const std::string& v, ExperimentConfig& c) -> std::string {
                   c.method.layers.clear();
                   if (v == "all") return {};
                   for (const auto& item : split_list(v)) {
                     const auto dash = item.find('-');
                     std::uint64_t lo, hi;
                     if (dash == std::string::npos) {
                       if (!parse_u64(item, lo)) return "bad layer '" + item + "'";
                       hi = lo;
                     } else if (!parse_u64(trim(item.substr(0, dash)), lo) ||
                                !parse_u64(trim(item.substr(dash + 1)), hi) || hi < lo) {
                       return "bad layer range '" + item + "'";
                     }
                     for (auto l = lo; l <= hi; ++l) c.method.layers.push_back(l);
                   }
                   return {};
                 },
                 [](const ExperimentConfig& c) {
                   if (c.method.layers.empty()) return std::string("all");
                   std::string s;
                   for (std::size_t i = 0; i < c.method.layers.size(); ++i)
                     s += (i ? ", " : "") + std::to_string(c.method.layers[i]);
                   return s;
                 }});
    f.push_back(size_field("method.rank", [](ExperimentConfig& c) -> std::size_t& { return c.method.rank; },
                           [](Method m) {
                             return m == Method::rankr_rlrr || m == Method::rlrr_no_residual || m == Method::lora;
                           }));
    f.push_back(size_field("method.bottleneck", [](ExperimentConfig& c) -> std::size_t& { return c.method.bottleneck; },
                           [](Method m) { return m == Method::adapter; }));
    f.push_back({"method.adapter_positions", [](Method m) { return m == Method::adapter; },
                 [](const std::string& v, ExperimentConfig& c) -> std::string {
                   c.method.adapter_positions.clear();
                   for (const auto& item : split_list(v)) {
                     if (item == "mha") c.method.adapter_positions.push_back(vit::Block::mha);
                     else if (item == "ffn") c.method.adapter_positions.push_back(vit::Block::ffn);
                     else return "unknown adapter position '" + item + "' (mha, ffn)";
                   }
                   return {};
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.method.adapter_positions.size(); ++i)
                     s += std::string(i ? ", " : "") +
                          (c.method.adapter_positions[i] == vit::Block::mha ? "mha" : "ffn");
                   return s;
                 }});
    f.push_back(size_field("method.prompts", [](ExperimentConfig& c) -> std::size_t& { return c.method.prompts; },
                           [](Method m) { return m == Method::vpt_shallow || m == Method::vpt_deep; }));
    f.push_back({"method.init", rlrr_family,
                 [](const std::string& v, ExperimentConfig& c) -> std::string {
                   auto s = peft::parse_init(v);
                   if (!s) return "unknown init scheme '" + v + "'";
                   c.method.init = *s;
                   return {};
                 },
                 [](const ExperimentConfig& c) { return std::string(peft::init_name(c.method.init)); }});
    f.push_back(double_field("method.init_scale", [](ExperimentConfig& c) -> double& { return c.method.init_scale; },
                             rlrr_family));
    f.push_back(bool_field("method.train_left", [](ExperimentConfig& c) -> bool& { return c.method.train_left; },
                           [](Method m) { return m == Method::rlrr; }));
    f.push_back(bool_field("method.train_right", [](ExperimentConfig& c) -> bool& { return c.method.train_right; },
                           [](Method m) { return m == Method::rlrr; }));
    f.push_back(bool_field("method.residual", [](ExperimentConfig& c) -> bool& { return c.method.residual; },
                           [](Method m) { return m == Method::rlrr; }));
    f.push_back(bool_field("method.norm_scaling", [](ExperimentConfig& c) -> bool& { return c.method.norm_scaling; },
                           [](Method m) { return rlrr_family(m) || m == Method::ssf; }));
    f.push_back(bool_field("method.train_head", [](ExperimentConfig& c) -> bool& { return c.method.train_head; },
                           [](Method m) { return m != Method::full; }));

    add_training(f, "train", [](ExperimentConfig& c) -> train::TrainingConfig& { return c.training; });
    add_training(f, "pretrain", [](ExperimentConfig& c) -> train::TrainingConfig& { return c.pretraining; });

    f.push_back(size_field("task.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.task.seed; }));
    f.push_back(size_field("task.train_per_class", [](ExperimentConfig& c) -> std::size_t& { return c.task.train_per_class; }));
    f.push_back(size_field("task.val_per_class", [](ExperimentConfig& c) -> std::size_t& { return c.task.val_per_class; }));
    f.push_back(size_field("task.test_per_class", [](ExperimentConfig& c) -> std::size_t& { return c.task.test_per_class; }));
    f.push_back(double_field("task.noise", [](ExperimentConfig& c) -> double& { return c.task.noise; }));
    f.push_back(double_field("task.shift", [](ExperimentConfig& c) -> double& { return c.task.shift; }));

    f.push_back(double_list_field("grid.learning_rates", [](ExperimentConfig& c) -> std::vector<double>& { return c.grid.learning_rates; }));
    f.push_back(double_list_field("grid.weight_decays", [](ExperimentConfig& c) -> std::vector<double>& { return c.grid.weight_decays; }));
    f.push_back(double_list_field("grid.dropouts", [](ExperimentConfig& c) -> std::vector<double>& { return c.grid.dropouts; }));
    f.push_back({"grid.batch_sizes", nullptr,
                 [](const std::string& v, ExperimentConfig& c) -> std::string {
                   c.grid.batch_sizes.clear();
                   for (const auto& item : split_list(v)) {
                     std::uint64_t x;
                     if (!parse_u64(item, x)) return "expected a list of integers, got '" + v + "'";
                     c.grid.batch_sizes.push_back(x);
                   }
                   return {};
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.grid.batch_sizes.size(); ++i)
                     s += (i ? ", " : "") + std::to_string(c.grid.batch_sizes[i]);
                   return s;
                 }});
    return f;
  }();
  return fs;
}

ExperimentConfig defaults() {
  ExperimentConfig c;
  c.pretraining.learning_rate = 1e-3;
  c.pretraining.epochs = 30;
  c.pretraining.warmup_epochs = 3;
  c.pretraining.seed = 1;
  c.grid.learning_rates = {0.01, 0.005, 0.001};
  c.grid.weight_decays = {0.001, 0.0};
  return c;
}

void add_validation(std::vector<ConfigIssue>& out, std::size_t line, const std::string& what,
                    const std::function<void()>& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    std::stringstream ss(e.what());
    std::string l;
    bool first = true;
    while (std::getline(ss, l)) {
      const auto t = trim(l);
      if (first && !t.empty() && t.back() == ':') {
        first = false;
        continue;
      }
      first = false;
      if (!t.empty()) out.push_back({line, what + ": " + t});
    }
  }
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

const std::vector<std::string>& required_keys() {
  static const std::vector<std::string> keys = {"method.name"};
  return keys;
}

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

train::SyntheticTaskSpec task_for(const ExperimentConfig& cfg) {
  auto t = cfg.task;
  t.classes = cfg.vit.classes;
  t.image_h = cfg.vit.image_h;
  t.image_w = cfg.vit.image_w;
  t.channels = cfg.vit.channels;
  return t;
}

ConfigParse try_parse_config(const std::string& text,
                             const std::map<std::string, std::string>& overrides) {
  ConfigParse result;
  result.config = defaults();
  auto& issues = result.issues;

  struct Entry {
    std::string value;
    std::size_t line;
  };
  std::map<std::string, Entry> entries;
  std::stringstream ss(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(ss, raw)) {
    ++lineno;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      issues.push_back({lineno, "expected 'key = value', got '" + line + "'"});
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      issues.push_back({lineno, "missing key before '='"});
      continue;
    }
    if (auto it = entries.find(key); it != entries.end()) {
      issues.push_back({lineno, "duplicate key '" + key + "' (first set on line " +
                                    std::to_string(it->second.line) + ", again on line " +
                                    std::to_string(lineno) + ")"});
      continue;
    }
    entries[key] = {value, lineno};
  }
  for (const auto& [k, v] : overrides) entries[k] = {v, 0};

  const auto& fs = fields();
  for (const auto& [key, e] : entries) {
    if (std::none_of(fs.begin(), fs.end(), [&](const Field& f) { return f.key == key; }))
      issues.push_back({e.line, "unknown key '" + key + "'"});
  }
  for (const auto& key : required_keys())
    if (!entries.count(key)) issues.push_back({0, "missing required key '" + key + "'"});

  // method.name first: applicability depends on it.
  std::size_t method_line = 0;
  if (auto it = entries.find("method.name"); it != entries.end()) {
    method_line = it->second.line;
    const Field& f = *std::find_if(fs.begin(), fs.end(), [](const Field& x) { return x.key == "method.name"; });
    if (auto err = f.parse(it->second.value, result.config); !err.empty())
      issues.push_back({it->second.line, "method.name: " + err});
  }
  const Method method = result.config.method.method;
  for (const auto& f : fs) {
    if (f.key == "method.name") continue;
    auto it = entries.find(f.key);
    if (it == entries.end()) continue;
    if (f.applies && !f.applies(method)) {
      std::string msg = f.key + " does not apply to method " + peft::method_name(method);
      if (f.key == "method.rank" && method == Method::rlrr) msg += " (rlrr takes no rank; rankr_rlrr does)";
      issues.push_back({it->second.line, msg});
      continue;
    }
    if (auto err = f.parse(it->second.value, result.config); !err.empty())
      issues.push_back({it->second.line, f.key + ": " + err});
  }
  if (!issues.empty()) return result;

  const auto& c = result.config;
  add_validation(issues, 0, "vit", [&] { c.vit.validate(); });
  add_validation(issues, 0, "train", [&] { c.training.validate(); });
  add_validation(issues, 0, "pretrain", [&] { c.pretraining.validate(); });
  add_validation(issues, 0, "task", [&] { task_for(c).validate(); });
  add_validation(issues, 0, "grid", [&] { c.grid.validate(); });
  if (issues.empty())
    add_validation(issues, method_line, "method", [&] { peft::plan_attachment(c.method, c.vit); });
  return result;
}

ExperimentConfig parse_config(const std::string& text,
                              const std::map<std::string, std::string>& overrides) {
  auto r = try_parse_config(text, overrides);
  if (r.ok()) return r.config;
  std::string msg = "config has " + std::to_string(r.issues.size()) + " error(s):";
  for (const auto& i : r.issues)
    msg += "\n  " + (i.line ? "line " + std::to_string(i.line) + ": " : std::string()) + i.message;
  throw ConfigError(msg);
}

std::string print_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string group;
  for (const auto& f : fields()) {
    if (f.applies && !f.applies(cfg.method.method)) continue;
    const std::string g = f.key.substr(0, f.key.find('.'));
    if (!group.empty() && g != group) out += "\n";
    group = g;
    out += f.key + " = " + f.print(cfg) + "\n";
  }
  return out;
}

}  // namespace rlrr::io
