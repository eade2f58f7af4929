#include "rlrr/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "rlrr/checkpoint.hpp"
#include "rlrr/error.hpp"
#include "rlrr/peft.hpp"

namespace rlrr::cli {

namespace fs = std::filesystem;
using io::Checkpoint;
using io::ExperimentConfig;
using io::format_double;
using peft::Method;

io::ExperimentConfig resolve_seeds(io::ExperimentConfig cfg) {
  if (cfg.seed == 0) return cfg;
  const std::uint64_t mix = cfg.seed * 0x9E3779B97F4A7C15ULL;
  cfg.training.seed ^= mix;
  cfg.pretraining.seed ^= mix;
  return cfg;
}

GradCheckReport check_method_gradients(const ExperimentConfig& cfg) {
  const auto& c = cfg.vit;
  Rng rng(cfg.seed);
  auto model = vit::init_random<double>(c, rng);
  auto& head = model.at(vit::WeightSlot::global(vit::SlotKind::head));
  head.w = rng.normal_tensor<double>(head.w.shape(), 0.5);
  head.b = rng.normal_tensor<double>(head.b.shape(), 0.5);
  auto set = peft::attach(cfg.method, model, rng);
  for (auto& nt : set.named())
    if (nt.trainable) *nt.value = rng.uniform_tensor<double>(nt.value->shape(), -0.3, 0.3);
  auto images = rng.uniform_tensor<double>({2, c.image_size()}, 0.0, 1.0);
  const std::vector<int> labels = {0, static_cast<int>(1 % c.classes)};

  std::vector<CheckedParam> params;
  for (auto& nt : set.named()) params.push_back({nt.name, *nt.value, nt.trainable});
  for (auto& nt : model.tensors()) params.push_back({nt.name, *nt.value, nt.trainable});
  auto loss = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& leaves) {
    peft::AdapterSet<double> local(set.spec());
    for (const auto& p : params)
      if (set.has(p.name)) local.put(p.name, p.value, p.trainable);
    vit::ForwardContext<double> ctx(tape);
    for (std::size_t i = 0; i < leaves.size(); ++i) ctx.provide(params[i].name, leaves[i]);
    peft::PeftHooks<double> hooks(local);
    return ad::cross_entropy(vit::logits(ctx, model, images, hooks), labels);
  };
  return finite_diff_check(loss, params, 1e-5, 1e-4);
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

std::string join_modules(const std::vector<vit::SlotKind>& ks) {
  std::string s;
  for (std::size_t i = 0; i < ks.size(); ++i) s += (i ? " " : "") + std::string(vit::kind_name(ks[i]));
  return s;
}

std::string join_layers(const std::vector<std::size_t>& ls) {
  std::string s;
  for (std::size_t i = 0; i < ls.size(); ++i) s += (i ? " " : "") + std::to_string(ls[i]);
  return s;
}

}  // namespace

std::vector<AblationCell> ablation_cells(const peft::MethodSpec& base, const vit::ViTConfig& cfg,
                                         const std::vector<std::string>& axes) {
  if (base.method != Method::rlrr) throw ConfigError("ablation runs over rlrr, config has " +
                                                     std::string(peft::method_name(base.method)));
  using vit::SlotKind;
  std::vector<AblationCell> cells;
  for (const auto& axis : axes) {
    if (axis == "dual") {
      cells.push_back({"dual", base});
    } else if (axis == "left-only") {
      auto s = base;
      s.train_right = false;
      cells.push_back({"left-only", s});
    } else if (axis == "right-only") {
      auto s = base;
      s.train_left = false;
      cells.push_back({"right-only", s});
    } else if (axis == "residual-off") {
      auto s = base;
      s.residual = false;
      cells.push_back({"residual-off", s});
    } else if (axis == "layers-prefix") {
      for (std::size_t k = 1; k <= cfg.layers; ++k) {
        auto s = base;
        s.layers.clear();
        for (std::size_t l = 0; l < k; ++l) s.layers.push_back(l);
        cells.push_back({"layers-0-" + std::to_string(k - 1), s});
      }
    } else if (axis == "module-subset") {
      const std::vector<std::pair<std::string, std::vector<SlotKind>>> subsets = {
          {"qkv", {SlotKind::q, SlotKind::k, SlotKind::v}},
          {"attn", {SlotKind::q, SlotKind::k, SlotKind::v, SlotKind::o}},
          {"ffn", {SlotKind::fc1, SlotKind::fc2}},
          {"all", {SlotKind::q, SlotKind::k, SlotKind::v, SlotKind::o, SlotKind::fc1, SlotKind::fc2}}};
      for (const auto& [label, mods] : subsets) {
        auto s = base;
        s.modules = mods;
        cells.push_back({"modules-" + label, s});
      }
    } else {
      throw ConfigError("unknown ablation axis '" + axis +
                        "' (dual, left-only, right-only, residual-off, layers-prefix, module-subset)");
    }
  }
  for (const auto& c : cells) peft::plan_attachment(c.spec, cfg);
  return cells;
}

template <typename T>
std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const vit::Model<T>& backbone,
                                const train::Task& task, const std::vector<AblationCell>& cells,
                                std::size_t jobs) {
  std::vector<AblationRow> rows(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        const auto& cell = cells[i];
        auto model = backbone;
        peft::AdapterSet<T> set;
        auto metrics = train::fine_tune(model, set, cell.spec, task, cfg.training);
        auto& r = rows[i];
        r.cell = i;
        r.name = cell.name;
        r.left = cell.spec.train_left;
        r.right = cell.spec.train_right;
        r.residual = cell.spec.residual;
        r.modules = join_modules(peft::effective_modules(cell.spec));
        r.layers = join_layers(peft::effective_layers(cell.spec, cfg.vit));
        r.params = metrics.trainable;
        r.val_acc = train::accuracy(model, set, task.val);
        r.test_acc = train::accuracy(model, set, task.test);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

template std::vector<AblationRow> ablate(const ExperimentConfig&, const vit::Model<float>&,
                                         const train::Task&, const std::vector<AblationCell>&, std::size_t);
template std::vector<AblationRow> ablate(const ExperimentConfig&, const vit::Model<double>&,
                                         const train::Task&, const std::vector<AblationCell>&, std::size_t);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "cell,name,left,right,residual,modules,layers,params,val_acc,test_acc\n";
  for (const auto& r : rows) {
    out << r.cell << ',' << r.name << ',' << int(r.left) << ',' << int(r.right) << ','
        << int(r.residual) << ',' << r.modules << ',' << r.layers << ',' << r.params << ','
        << format_double(r.val_acc) << ',' << format_double(r.test_acc) << '\n';
  }
}

void write_spectral_csv(std::ostream& out, const linalg::SpectralReport& r) {
  out << "index,sigma_before,sigma_after,alignment\n";
  for (std::size_t i = 0; i < r.spectrum_before.size(); ++i) {
    out << i << ',' << format_double(r.spectrum_before[i]) << ',' << format_double(r.spectrum_after[i])
        << ',' << format_double(r.subspace_alignment[i]) << '\n';
  }
}

void print_spectral_table(std::ostream& out, const linalg::SpectralReport& r) {
  char line[128];
  std::snprintf(line, sizeof line, "%6s  %14s  %14s  %10s\n", "index", "sigma_before", "sigma_after",
                "alignment");
  out << line;
  for (std::size_t i = 0; i < r.spectrum_before.size(); ++i) {
    std::snprintf(line, sizeof line, "%6zu  %14.8g  %14.8g  %10.6f\n", i, r.spectrum_before[i],
                  r.spectrum_after[i], r.subspace_alignment[i]);
    out << line;
  }
  out << "delta effective rank: " << r.delta_effective_rank << "\n";
  out << "orthogonality defect: " << format_double(r.orthogonality_defect) << "\n";
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> sets;
  std::map<std::string, std::string> extra;  // command flags mapped to config keys
};

std::string read_text(const fs::path& path) {
  auto bytes = io::read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

ExperimentConfig load_config(const Common& c) {
  std::map<std::string, std::string> overrides = c.extra;
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  if (c.seed_set) overrides["seed"] = std::to_string(c.seed);
  const std::string text = c.config.empty() ? std::string() : read_text(c.config);
  return resolve_seeds(io::parse_config(text, overrides));
}

fs::path out_dir(const Common& c) {
  if (c.out.empty()) throw ConfigError("this command needs --out DIR");
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create output directory '" + c.out + "': " + ec.message());
  return c.out;
}

void write_text(const fs::path& path, const std::string& text) { io::write_file_atomic(path, text); }

bool has_adapters(const Checkpoint& ckpt) {
  return std::any_of(ckpt.begin(), ckpt.end(), [](const auto& kv) {
    return kv.first.rfind(io::kAdapterPrefix, 0) == 0;
  });
}

template <typename T>
vit::Model<T> load_model(const Checkpoint& ckpt, const vit::ViTConfig& cfg, bool narrowing) {
  vit::Model<T> m(cfg);
  io::bind_model(ckpt, m, narrowing);
  m.set_frozen(true);
  return m;
}

template <typename T>
std::string metrics_csv(const train::Metrics& m) {
  std::ostringstream s;
  train::write_metrics_csv(s, m);
  return s.str();
}

std::string logits_csv(const Tensor<double>& logits, const train::Dataset& data) {
  std::ostringstream s;
  s << "index,label,pred";
  for (std::size_t j = 0; j < logits.cols(); ++j) s << ",logit" << j;
  s << '\n';
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    s << i << ',' << data.labels[i] << ',' << best;
    for (std::size_t j = 0; j < logits.cols(); ++j) s << ',' << format_double(logits.at(i, j));
    s << '\n';
  }
  return s.str();
}

double logits_accuracy(const Tensor<double>& logits, const train::Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    hit += static_cast<int>(best) == data.labels[i];
  }
  return double(hit) / double(data.size());
}

const train::Dataset& split_of(const train::Task& t, const std::string& split) {
  if (split == "train") return t.train;
  if (split == "val") return t.val;
  if (split == "test") return t.test;
  throw ConfigError("unknown split '" + split + "' (train, val, test)");
}

template <typename T>
vit::Model<T> pretrain_backbone(const ExperimentConfig& cfg, const train::Task& task,
                                train::Metrics* metrics) {
  Rng rng(cfg.pretraining.seed);
  auto model = vit::init_random<T>(cfg.vit, rng);
  model.set_frozen(false);
  peft::MethodSpec spec;
  spec.method = Method::full;
  peft::AdapterSet<T> none(spec);
  auto m = train::train(model, none, task, cfg.pretraining);
  model.set_frozen(true);
  if (metrics) *metrics = m;
  return model;
}

template <typename T>
vit::Model<T> backbone_for(const ExperimentConfig& cfg, const std::string& path,
                           const train::SyntheticTask& tasks, bool narrowing, std::ostream& out) {
  if (!path.empty()) return load_model<T>(io::load_checkpoint(path), cfg.vit, narrowing);
  out << "no --backbone given, pretraining one from the config\n";
  return pretrain_backbone<T>(cfg, tasks.pretrain, nullptr);
}

struct Flags {
  Common common;
  std::string backbone, checkpoint, before, after, slot, split = "val", method, mode = "weighted";
  std::vector<std::string> inputs, axes = {"dual", "left-only", "right-only", "residual-off"};
  std::vector<double> weights;
  std::size_t head_from = 0, jobs = 1;
  bool narrowing = false, grid = false;
};

// --- pretrain-toy

template <typename T>
int cmd_pretrain(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  auto dir = out_dir(f.common);
  auto tasks = train::make_synthetic_task(io::task_for(cfg));
  train::Metrics m;
  auto model = pretrain_backbone<T>(cfg, tasks.pretrain, &m);
  io::save_checkpoint(io::model_checkpoint(model), dir / "backbone.ckpt");
  write_text(dir / "pretrain_metrics.csv", metrics_csv<T>(m));
  peft::AdapterSet<T> none;
  out << "pretrained " << model.parameter_count() << " parameters in " << m.steps << " steps\n";
  out << "pretrain val accuracy " << format_double(train::accuracy(model, none, tasks.pretrain.val)) << "\n";
  out << "wrote " << (dir / "backbone.ckpt").string() << "\n";
  return 0;
}

// --- train

template <typename T>
int cmd_train(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  auto dir = out_dir(f.common);
  auto tasks = train::make_synthetic_task(io::task_for(cfg));
  const auto& task = tasks.downstream;
  auto backbone = backbone_for<T>(cfg, f.backbone, tasks, f.narrowing, out);

  if (f.grid) {
    auto result = train::grid_search(cfg.grid, cfg.training, [&](const train::TrainingConfig& tc) {
      auto model = backbone;
      peft::AdapterSet<T> set;
      return train::fine_tune(model, set, cfg.method, task, tc);
    });
    std::ostringstream g;
    g << "rank,index,learning_rate,weight_decay,dropout,batch_size,val_acc,diverged\n";
    for (std::size_t i = 0; i < result.leaderboard.size(); ++i) {
      const auto& e = result.leaderboard[i];
      g << i << ',' << e.index << ',' << format_double(e.config.learning_rate) << ','
        << format_double(e.config.weight_decay) << ',' << format_double(e.config.dropout) << ','
        << e.config.batch_size << ',' << format_double(e.val_acc) << ',' << int(e.diverged) << '\n';
    }
    write_text(dir / "grid.csv", g.str());
    cfg.training = result.best().config;
    out << "grid search over " << result.leaderboard.size() << " candidates, best lr "
        << format_double(cfg.training.learning_rate) << " wd " << format_double(cfg.training.weight_decay)
        << "\n";
  }

  auto model = backbone;
  peft::AdapterSet<T> set;
  auto m = train::fine_tune(model, set, cfg.method, task, cfg.training);
  auto ckpt = io::model_checkpoint(model);
  auto adapters = io::adapter_checkpoint(set);
  ckpt.insert(adapters.begin(), adapters.end());
  io::save_checkpoint(ckpt, dir / "tuned.ckpt");
  write_text(dir / "metrics.csv", metrics_csv<T>(m));
  write_text(dir / "config.cfg", io::print_config(cfg));
  out << "method " << peft::method_name(cfg.method.method) << ", " << m.trainable
      << " trainable parameters, " << m.steps << " steps\n";
  out << "val accuracy " << format_double(m.final_val_acc()) << "\n";
  out << "wrote " << (dir / "tuned.ckpt").string() << "\n";
  return 0;
}

// --- eval

template <typename T>
Tensor<double> logits_of(const Checkpoint& ckpt, const ExperimentConfig& cfg, const Tensor<double>& images,
                         bool narrowing) {
  auto model = load_model<T>(ckpt, cfg.vit, narrowing);
  auto x = images.template cast<T>();
  if (!has_adapters(ckpt)) return vit::predict(model, x).template cast<double>();
  auto set = io::bind_adapters<T>(ckpt, cfg.method, cfg.vit, narrowing);
  return peft::predict(model, set, x).template cast<double>();
}

template <typename T>
int cmd_eval(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  if (f.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  auto ckpt = io::load_checkpoint(f.checkpoint);
  auto tasks = train::make_synthetic_task(io::task_for(cfg));
  const auto& data = split_of(tasks.downstream, f.split);
  auto logits = logits_of<T>(ckpt, cfg, data.images, f.narrowing);
  const double acc = logits_accuracy(logits, data);
  out << f.split << " accuracy " << format_double(acc) << " over " << data.size() << " images\n";
  if (!f.common.out.empty()) {
    auto dir = out_dir(f.common);
    write_text(dir / "logits.csv", logits_csv(logits, data));
    write_text(dir / "eval.csv", "split,accuracy,count\n" + f.split + "," + format_double(acc) + "," +
                                     std::to_string(data.size()) + "\n");
  }
  return 0;
}

// --- merge

template <typename T>
int cmd_merge(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  if (f.checkpoint.empty()) throw ConfigError("merge needs --checkpoint");
  auto dir = out_dir(f.common);
  auto ckpt = io::load_checkpoint(f.checkpoint);
  auto model = load_model<T>(ckpt, cfg.vit, f.narrowing);
  auto set = io::bind_adapters<T>(ckpt, cfg.method, cfg.vit, f.narrowing);
  auto merged = peft::merge(model, set);
  io::save_checkpoint(io::model_checkpoint(merged), dir / "merged.ckpt");
  out << "folded " << set.tensors().size() << " adapter tensors into " << (dir / "merged.ckpt").string()
      << "\n";
  return 0;
}

// --- analyze

Tensor<double> effective_weight(const std::string& path, const vit::WeightSlot& slot,
                                const Common& common, bool narrowing) {
  auto ckpt = io::load_checkpoint(path);
  const std::string key = slot.name() + ".w";
  auto it = ckpt.find(key);
  if (it == ckpt.end()) throw BindingError(path + " holds no slot " + slot.name());
  if (!has_adapters(ckpt)) return it->second.as<double>(key);

  // Adapters need the method spec they were trained with.
  Common c = common;
  if (c.config.empty()) {
    auto sidecar = fs::path(path).parent_path() / "config.cfg";
    if (!fs::exists(sidecar)) {
      throw ConfigError(path + " carries adapters; pass --config or keep config.cfg beside it");
    }
    c.config = sidecar.string();
  }
  auto cfg = load_config(c);
  vit::Model<double> model(cfg.vit);
  io::bind_model(ckpt, model, narrowing);
  auto set = io::bind_adapters<double>(ckpt, cfg.method, cfg.vit, narrowing);
  return peft::merge(model, set).at(slot).w;
}

int cmd_analyze(const Flags& f, std::ostream& out) {
  if (f.before.empty() || f.after.empty() || f.slot.empty())
    throw ConfigError("analyze needs --before, --after and --slot");
  const auto slot = vit::WeightSlot::parse(f.slot);
  auto w0 = effective_weight(f.before, slot, f.common, f.narrowing);
  auto w1 = effective_weight(f.after, slot, f.common, f.narrowing);
  if (w0.shape() != w1.shape()) throw DimensionError("slot " + f.slot + " differs in shape between files");
  if (w0.rank() != 2) throw DimensionError("slot " + f.slot + " is not a matrix");
  auto report = linalg::spectral_perturbation_report(w0, sub(w1, w0));
  out << "slot " << f.slot << " " << shape_str(w0.shape()) << "\n";
  print_spectral_table(out, report);
  if (!f.common.out.empty()) {
    auto dir = out_dir(f.common);
    std::ostringstream s;
    write_spectral_csv(s, report);
    write_text(dir / ("spectrum_" + f.slot + ".csv"), s.str());
  }
  return 0;
}

// --- count-params

int cmd_count(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  auto count = peft::count_trainable(cfg.method, cfg.vit);
  std::size_t enumerated = 0, enumerated_ln = 0;
  for (const auto& p : peft::plan_attachment(cfg.method, cfg.vit)) {
    if (!p.trainable) continue;
    std::size_t n = 1;
    for (auto e : p.shape) n *= e;
    (p.group == peft::CountGroup::method ? enumerated : enumerated_ln) += n;
  }
  if (cfg.method.method == Method::full) {
    vit::Model<double> m(cfg.vit);
    enumerated = m.parameter_count() - count.head;
  }
  const auto& v = cfg.vit;
  out << "method " << peft::method_name(cfg.method.method) << " on D=" << v.dim << " L=" << v.layers
      << " N=" << v.tokens() << " classes=" << v.classes << "\n";
  for (const auto& item : count.items) out << "  " << item.label << ": " << item.count << "\n";
  out << "method tensors: " << count.method << " (enumerated " << enumerated << ")\n";
  out << "layer norm: " << count.layer_norm << "\n";
  out << "head: " << count.head << "\n";
  out << "adapted total: " << count.adapted() << "\n";
  out << "trainable total: " << count.total() << "\n";
  if (count.closed_form_applies) {
    out << "closed form " << count.formula << " = " << count.closed_form
        << (count.closed_form == enumerated ? " (matches enumeration)" : " (DOES NOT match enumeration)")
        << "\n";
  } else {
    out << "closed form " << count.formula << " does not describe this selection\n";
  }
  if (!f.common.out.empty()) {
    auto dir = out_dir(f.common);
    std::ostringstream s;
    s << "label,count\n";
    for (const auto& item : count.items) s << item.label << ',' << item.count << '\n';
    s << "method," << count.method << "\nlayer_norm," << count.layer_norm << "\nhead," << count.head
      << "\nclosed_form," << (count.closed_form_applies ? std::to_string(count.closed_form) : "") << '\n';
    write_text(dir / "params.csv", s.str());
  }
  return count.closed_form_applies && count.closed_form != enumerated ? 1 : 0;
}

// --- combine

template <typename T>
int cmd_combine(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  auto dir = out_dir(f.common);
  if (f.inputs.empty()) throw ConfigError("combine needs --inputs");
  if (f.head_from >= f.inputs.size()) throw ConfigError("--head-from is past the last input");
  auto weights = f.weights;
  if (weights.empty()) weights.assign(f.inputs.size(), 1.0 / double(f.inputs.size()));
  peft::CombineMode mode;
  if (f.mode == "weighted") mode = peft::CombineMode::weighted;
  else if (f.mode == "sum_of_products") mode = peft::CombineMode::sum_of_products;
  else throw ConfigError("unknown combine mode '" + f.mode + "' (weighted, sum_of_products)");

  std::vector<peft::AdapterSet<T>> sets;
  std::vector<Checkpoint> ckpts;
  for (const auto& in : f.inputs) {
    ckpts.push_back(io::load_checkpoint(in));
    sets.push_back(io::bind_adapters<T>(ckpts.back(), cfg.method, cfg.vit, f.narrowing));
  }
  const std::string head = vit::kind_name(vit::SlotKind::head);
  for (std::size_t i = 1; i < ckpts.size(); ++i)
    for (const auto& [name, t] : ckpts[i]) {
      if (name.rfind(io::kAdapterPrefix, 0) == 0 || name.rfind(head + ".", 0) == 0) continue;
      auto it = ckpts[0].find(name);
      if (it == ckpts[0].end() || !(it->second == t))
        throw BindingError("inputs " + f.inputs[0] + " and " + f.inputs[i] + " differ in backbone tensor " + name);
    }

  auto combined = peft::combine(sets, weights, mode);
  auto model = load_model<T>(ckpts[f.head_from], cfg.vit, f.narrowing);
  auto ckpt = io::model_checkpoint(model);
  auto adapters = io::adapter_checkpoint(combined);
  ckpt.insert(adapters.begin(), adapters.end());
  io::save_checkpoint(ckpt, dir / "combined.ckpt");
  auto out_cfg = cfg;
  out_cfg.method = combined.spec();
  write_text(dir / "config.cfg", io::print_config(out_cfg));
  out << "combined " << sets.size() << " adapter sets as " << peft::method_name(combined.spec().method)
      << " into " << (dir / "combined.ckpt").string() << "\n";
  return 0;
}

// --- gradcheck

int cmd_gradcheck(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  auto report = check_method_gradients(cfg);
  std::ostringstream s;
  s << "name,max_rel_error,worst_index,analytic,numeric,passed\n";
  for (const auto& p : report.params) {
    s << p.name << ',' << format_double(p.max_rel_error) << ',' << p.worst_index << ','
      << format_double(p.analytic) << ',' << format_double(p.numeric) << ',' << int(p.passed) << '\n';
  }
  out << "checked " << report.params.size() << " tensors of " << peft::method_name(cfg.method.method)
      << ", max relative error " << format_double(report.max_rel_error()) << " (tolerance "
      << format_double(report.tolerance) << ")\n";
  for (const auto& p : report.params)
    if (!p.passed) out << "  FAILED " << p.name << " at " << p.worst_index << "\n";
  if (!f.common.out.empty()) write_text(out_dir(f.common) / "gradcheck.csv", s.str());
  if (!report.passed()) throw NumericalError("gradient check failed", report.max_rel_error());
  return 0;
}

// --- ablate

template <typename T>
int cmd_ablate(const Flags& f, std::ostream& out) {
  auto cfg = load_config(f.common);
  auto dir = out_dir(f.common);
  auto cells = ablation_cells(cfg.method, cfg.vit, f.axes);
  auto tasks = train::make_synthetic_task(io::task_for(cfg));
  auto backbone = backbone_for<T>(cfg, f.backbone, tasks, f.narrowing, out);
  auto rows = ablate(cfg, backbone, tasks.downstream, cells, f.jobs);
  std::ostringstream s;
  write_ablation_csv(s, rows);
  write_text(dir / "ablation.csv", s.str());
  for (const auto& r : rows) {
    out << "  " << r.name << ": params " << r.params << ", val " << format_double(r.val_acc) << ", test "
        << format_double(r.test_acc) << "\n";
  }
  return 0;
}

template <typename Fn>
int dispatch(const Common& c, Fn&& fn) {
  auto cfg = load_config(c);
  return cfg.training.precision == train::Precision::f32 ? fn(float{}) : fn(double{});
}

void add_common(CLI::App* sub, Common& c, bool needs_out) {
  sub->add_option("--config", c.config, "experiment config file");
  auto* o = sub->add_option("--out", c.out, "output directory");
  if (needs_out) o->required();
  sub->add_option("--seed", c.seed, "top-level seed, overrides the config")->each([&c](const std::string&) {
    c.seed_set = true;
  });
  sub->add_option("--set", c.sets, "config override key=value, repeatable");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Re-parameterizable PEFT experiments on a small vision transformer", "rlrr"};
  app.require_subcommand(1, 1);
  Flags f;
  auto& c = f.common;

  auto* pre = app.add_subcommand("pretrain-toy", "pretrain a backbone on the synthetic source task");
  add_common(pre, c, true);

  auto* tr = app.add_subcommand("train", "fine-tune a backbone with the configured method");
  add_common(tr, c, true);
  tr->add_option("--backbone", f.backbone, "backbone checkpoint; pretrained from the config when absent");
  tr->add_option("--method", f.method, "overrides method.name");
  tr->add_flag("--grid", f.grid, "grid-search the grid.* space first and train with the best entry");
  tr->add_flag("--allow-narrowing", f.narrowing, "accept f64 checkpoints at f32 precision");

  auto* ev = app.add_subcommand("eval", "accuracy and logits of a checkpoint on a split");
  add_common(ev, c, false);
  ev->add_option("--checkpoint", f.checkpoint, "model checkpoint, with or without adapters")->required();
  ev->add_option("--split", f.split, "train, val or test");
  ev->add_flag("--allow-narrowing", f.narrowing, "accept f64 checkpoints at f32 precision");

  auto* mg = app.add_subcommand("merge", "fold adapters into the backbone weights");
  add_common(mg, c, true);
  mg->add_option("--checkpoint", f.checkpoint, "tuned checkpoint")->required();
  mg->add_flag("--allow-narrowing", f.narrowing, "accept f64 checkpoints at f32 precision");

  auto* an = app.add_subcommand("analyze", "spectrum of one weight slot before and after tuning");
  add_common(an, c, false);
  an->add_option("--before", f.before, "reference checkpoint")->required();
  an->add_option("--after", f.after, "tuned or merged checkpoint")->required();
  an->add_option("--slot", f.slot, "weight slot, e.g. l3.fc1")->required();
  an->add_flag("--allow-narrowing", f.narrowing, "accept f32 checkpoints narrowed from f64");

  auto* cp = app.add_subcommand("count-params", "itemized trainable parameters and the closed form");
  add_common(cp, c, false);
  cp->add_option("--method", f.method, "overrides method.name");

  auto* cb = app.add_subcommand("combine", "combine rlrr adapter checkpoints");
  add_common(cb, c, true);
  cb->add_option("--inputs", f.inputs, "tuned checkpoints")->required()->delimiter(',');
  cb->add_option("--weights", f.weights, "one weight per input, uniform by default")->delimiter(',');
  cb->add_option("--mode", f.mode, "weighted or sum_of_products");
  cb->add_option("--head-from", f.head_from, "input whose head the result keeps");
  cb->add_flag("--allow-narrowing", f.narrowing, "accept f64 checkpoints at f32 precision");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the method's gradients");
  add_common(gc, c, false);
  gc->add_option("--method", f.method, "overrides method.name");

  auto* ab = app.add_subcommand("ablate", "rlrr ablation table");
  add_common(ab, c, true);
  ab->add_option("--backbone", f.backbone, "backbone checkpoint; pretrained from the config when absent");
  ab->add_option("--axes", f.axes,
                 "dual, left-only, right-only, residual-off, layers-prefix, module-subset")
      ->delimiter(',');
  ab->add_option("--jobs", f.jobs, "worker threads");
  ab->add_flag("--allow-narrowing", f.narrowing, "accept f64 checkpoints at f32 precision");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (!app.get_subcommands().empty()) err << app.get_subcommands().front()->help();
    return 1;
  }
  if (!f.method.empty()) c.extra["method.name"] = f.method;

  try {
    if (pre->parsed()) return dispatch(c, [&](auto t) { return cmd_pretrain<decltype(t)>(f, out); });
    if (tr->parsed()) return dispatch(c, [&](auto t) { return cmd_train<decltype(t)>(f, out); });
    if (ev->parsed()) return dispatch(c, [&](auto t) { return cmd_eval<decltype(t)>(f, out); });
    if (mg->parsed()) return dispatch(c, [&](auto t) { return cmd_merge<decltype(t)>(f, out); });
    if (an->parsed()) return cmd_analyze(f, out);
    if (cp->parsed()) return cmd_count(f, out);
    if (cb->parsed()) return dispatch(c, [&](auto t) { return cmd_combine<decltype(t)>(f, out); });
    if (gc->parsed()) return cmd_gradcheck(f, out);
    if (ab->parsed()) return dispatch(c, [&](auto t) { return cmd_ablate<decltype(t)>(f, out); });
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const VersionError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.is_io() ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace rlrr::cli
