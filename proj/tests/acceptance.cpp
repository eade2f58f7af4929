// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "rlrr/checkpoint.hpp"
#include "rlrr/cli.hpp"
#include "rlrr/config.hpp"
#include "rlrr/error.hpp"
#include "rlrr/linalg.hpp"
#include "rlrr/peft.hpp"
#include "rlrr/train.hpp"

using namespace rlrr;
using peft::Method;
using peft::MethodSpec;
using vit::SlotKind;
using vit::ViTConfig;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ViTConfig toy(std::size_t dim, std::size_t layers, std::size_t heads, std::size_t classes) {
  ViTConfig c;
  c.dim = dim;
  c.layers = layers;
  c.heads = heads;
  c.classes = classes;
  return c;
}

vit::Model<double> random_model(const ViTConfig& c, Rng& rng) {
  auto m = vit::init_random<double>(c, rng);
  auto& head = m.at(vit::WeightSlot::global(SlotKind::head));
  head.w = rng.normal_tensor<double>(head.w.shape(), 0.5);
  head.b = rng.normal_tensor<double>(head.b.shape(), 0.5);
  return m;
}

void randomize(peft::AdapterSet<double>& set, Rng& rng, double scale) {
  for (auto& nt : set.named())
    if (nt.trainable) *nt.value = rng.uniform_tensor<double>(nt.value->shape(), -scale, scale);
}

const std::vector<Method> kPeft = {Method::rlrr, Method::rankr_rlrr, Method::rlrr_no_residual,
                                   Method::lora, Method::ssf,        Method::adapter,
                                   Method::vpt_shallow, Method::vpt_deep};

// 1 ---------------------------------------------------------------------------

Outcome merge_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  auto c = toy(32, 4, 4, 10);
  Rng rng(101);
  auto base = random_model(c, rng);
  double worst = 0.0;
  std::string per;
  for (Method m : {Method::rlrr, Method::ssf, Method::lora}) {
    MethodSpec s;
    s.method = m;
    s.rank = 4;
    auto model = base;
    auto set = peft::attach(s, model, rng);
    randomize(set, rng, 0.5);
    auto merged = peft::merge(model, set);
    double d = 0.0;
    for (int i = 0; i < 100; ++i) {
      auto x = rng.uniform_tensor<double>({1, c.image_size()}, -1.0, 1.0);
      d = std::max(d, max_abs_diff(peft::predict(model, set, x), vit::predict(merged, x)));
    }
    worst = std::max(worst, d);
    per += fmt(" %s %.2e", peft::method_name(m), d);
  }
  const double t = seconds_since(t0);
  return {worst < 1e-10 && t < 60.0,
          fmt("max |Δlogit| %.2e (tol 1e-10) over 100 inputs, D=32 L=4;", worst) + per +
              fmt("; %.1f s (limit 60 s)", t)};
}

// 2 ---------------------------------------------------------------------------

Outcome singular_item_identity() {
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16);
    auto w = rng.uniform_tensor<double>({m, n}, -1.0, 1.0);
    auto sl = rng.uniform_tensor<double>({m}, -1.0, 1.0);
    auto sr = rng.uniform_tensor<double>({n}, -1.0, 1.0);
    worst = std::max(worst, linalg::verify_singular_item_identity(w, sl, sr));
  }
  // Scalar scales: the rescaled matrix is (1 + a·b)·W. Dyadic values keep
  // every product exact, so equality is bitwise.
  bool scalar_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16);
    const double a = double(int(rng.below(17)) - 8) / 8.0, b = double(int(rng.below(17)) - 8) / 4.0;
    Tensor<double> w({m, n});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = double(int(rng.below(33)) - 16) / 4.0;
    vit::ParamMatrix<double> host;
    host.slot = vit::WeightSlot::at(0, SlotKind::q);
    host.w = w;
    host.b = Tensor<double>({n});
    auto merged = peft::merge_rlrr(host, {Tensor<double>({m}, a), Tensor<double>({n}, b), Tensor<double>({n})});
    for (std::size_t i = 0; i < w.size(); ++i) scalar_exact = scalar_exact && merged.w[i] == (1.0 + a * b) * w[i];
  }
  return {worst < 1e-8 && scalar_exact,
          fmt("max identity residual %.2e (tol 1e-8) on 100 instances up to 16x16; scalar case %s", worst,
              scalar_exact ? "exact" : "NOT exact")};
}

// 3 ---------------------------------------------------------------------------

Outcome identity_at_init() {
  const auto t0 = std::chrono::steady_clock::now();
  auto c = toy(16, 2, 2, 5);
  Rng rng(303);
  auto base = random_model(c, rng);
  auto images = rng.uniform_tensor<double>({8, c.image_size()}, 0.0, 1.0);
  auto frozen = vit::predict(base, images);
  auto base32 = base.cast<float>();
  auto images32 = images.cast<float>();
  auto frozen32 = vit::predict(base32, images32);
  std::vector<std::string> failed;
  std::size_t checked = 0;
  std::vector<Method> all = kPeft;
  all.push_back(Method::linear_probe);
  all.push_back(Method::full);
  for (Method m : all) {
    MethodSpec s;
    s.method = m;
    s.rank = 2;
    s.prompts = 0;
    auto model = base;
    auto set = peft::attach(s, model, rng);
    auto model32 = base32;
    auto set32 = peft::attach(s, model32, rng);
    ++checked;
    if (!peft::predict(model, set, images).identical(frozen) ||
        !peft::predict(model32, set32, images32).identical(frozen32))
      failed.push_back(peft::method_name(m));
  }
  const double t = seconds_since(t0);
  std::string f;
  for (const auto& s : failed) f += " " + s;
  return {failed.empty() && t < 10.0,
          fmt("%zu methods bitwise equal to the frozen model at f64 and f32", checked - failed.size()) +
              (failed.empty() ? "" : "; differs:" + f) + fmt("; %.2f s (limit 10 s)", t)};
}

// 4 ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  io::ExperimentConfig cfg;
  cfg.vit = toy(4, 2, 2, 3);
  cfg.seed = 404;
  double worst = 0.0;
  std::size_t tensors = 0;
  std::string failed;
  for (Method m : kPeft) {
    cfg.method = MethodSpec{};
    cfg.method.method = m;
    cfg.method.rank = 2;
    cfg.method.bottleneck = 2;
    cfg.method.prompts = 2;
    cfg.method.adapter_positions = {vit::Block::mha, vit::Block::ffn};
    auto report = cli::check_method_gradients(cfg);
    worst = std::max(worst, report.max_rel_error());
    tensors += report.params.size();
    if (!report.passed()) failed += std::string(" ") + peft::method_name(m);
  }
  const double t = seconds_since(t0);
  return {failed.empty() && worst < 1e-4 && t < 120.0,
          fmt("max relative error %.2e (tol 1e-4) over %zu tensors of 8 methods, 2-layer toy", worst, tensors) +
              (failed.empty() ? "" : "; failed:" + failed) + fmt("; %.1f s (limit 120 s)", t)};
}

// 5 ---------------------------------------------------------------------------

std::size_t enumerate(const MethodSpec& s, const ViTConfig& c) {
  peft::AdapterSet<double> set;
  Rng rng(1);
  auto model = vit::init_random<double>(c, rng);
  set = peft::attach(s, model, rng);
  std::size_t n = 0;
  for (const auto& p : peft::plan_attachment(s, c))
    if (p.trainable && p.group == peft::CountGroup::method) n += set.get(p.name).size();
  return n;
}

Outcome parameter_counts() {
  std::vector<ViTConfig> configs;
  for (std::size_t d : {8, 12, 16, 24})
    for (std::size_t l : {1, 2, 3})
      configs.push_back(toy(d, l, 4, 3 + l));
  std::size_t pairs = 0, mismatched = 0;
  std::set<std::string> covered;
  for (const auto& c : configs) {
    for (Method m : {Method::adapter, Method::vpt_shallow, Method::vpt_deep, Method::lora, Method::ssf,
                     Method::rlrr}) {
      MethodSpec s;
      s.method = m;
      s.rank = 2;
      s.bottleneck = 3;
      s.prompts = 5;
      auto count = peft::count_trainable(s, c);
      const std::size_t enumerated = enumerate(s, c);
      ++pairs;
      if (!count.closed_form_applies || count.closed_form != enumerated || count.method != enumerated) ++mismatched;
      covered.insert(peft::method_name(m));
    }
  }
  ViTConfig b;
  b.image_h = b.image_w = 224;
  b.patch = 16;
  b.dim = 768;
  b.layers = 12;
  b.heads = 12;
  b.classes = 100;
  MethodSpec r;
  auto vitb = peft::count_trainable(r, b);
  // Reported 0.33 M includes a classification head. Mean VTAB-1k class count
  // over the 19 tasks is 940/19.
  const double mean_classes = 940.0 / 19.0;
  const double mean_head = (b.dim + 1) * mean_classes;
  const double with_head = double(vitb.adapted()) + mean_head;
  const bool ok = mismatched == 0 && configs.size() >= 10 && vitb.adapted() == 287232;
  return {ok, fmt("%zu method/config pairs on %zu configs, %zu mismatches; ViT-B/16 rlrr backbone %zu "
                  "(method %zu + LayerNorm %zu, expect 287232); gap to 0.33 M: head 769 x %.2f mean "
                  "classes = %.0f, total %.0f = %.3f M, remainder within the two-digit rounding",
                  pairs, configs.size(), mismatched, vitb.adapted(), vitb.method, vitb.layer_norm,
                  mean_classes, mean_head, with_head, with_head / 1e6)};
}

// 6 ---------------------------------------------------------------------------

Outcome svd_suite() {
  Rng rng(606);
  double recon = 0.0, orth = 0.0, eig_err = 0.0;
  std::size_t order_violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16);
    auto w = rng.uniform_tensor<double>({m, n}, -2.0, 2.0);
    auto f = linalg::svd(w);
    auto rw = linalg::reconstruct(f);
    recon = std::max(recon, frobenius(sub(rw, w)) / std::max(frobenius(w), 1e-300));
    for (const auto* q : {&f.u, &f.v}) {
      auto g = matmul(transpose(*q), *q);
      for (std::size_t i = 0; i < g.rows(); ++i) g.at(i, i) -= 1.0;
      orth = std::max(orth, frobenius(g));
    }
    for (std::size_t d = 0; d < f.sigma.size(); ++d) {
      if (f.sigma[d] < 0.0 || (d > 0 && f.sigma[d] > f.sigma[d - 1])) ++order_violations;
    }
    auto eig = oracle::symmetric_eigenvalues(oracle::gram(w));
    for (std::size_t d = 0; d < f.sigma.size(); ++d)
      eig_err = std::max(eig_err, std::abs(f.sigma[d] * f.sigma[d] - eig[d]));
  }
  return {recon < 1e-8 && orth < 1e-8 && order_violations == 0 && eig_err < 1e-8,
          fmt("1000 matrices up to 16x16: reconstruction %.2e (tol 1e-8), orthogonality %.2e, %zu "
              "ordering violations, |σ² − eig(WᵀW)| %.2e (tol 1e-8, Sturm bisection oracle)",
              recon, orth, order_violations, eig_err)};
}

// 7 ---------------------------------------------------------------------------

Outcome rank_invariants() {
  Rng rng(707);
  std::size_t violations = 0, trials = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t m = 2 + rng.below(15), n = 2 + rng.below(15);
    const std::size_t r = 1 + rng.below(std::min(m, n));
    auto down = rng.uniform_tensor<double>({m, r}, -1.0, 1.0);
    auto up = rng.uniform_tensor<double>({r, n}, -1.0, 1.0);
    vit::ParamMatrix<double> host;
    host.slot = vit::WeightSlot::at(0, SlotKind::q);
    host.w = rng.uniform_tensor<double>({m, n}, -1.0, 1.0);
    host.b = Tensor<double>({n});
    auto lora = peft::merge_lora(host, {down, up});
    if (linalg::effective_rank(sub(lora.w, host.w)) > r) ++violations;
    peft::RankRRlrrParams<double> p{down, up, Tensor<double>({n})};
    if (linalg::effective_rank(matmul(p.s_left, p.s_right)) > r) ++violations;
    trials += 2;
  }
  return {violations == 0, fmt("%zu randomized deltas and scales, %zu exceed their rank bound", trials, violations)};
}

// 8 ---------------------------------------------------------------------------

Outcome frozen_immutability() {
  auto c = toy(16, 2, 2, 4);
  train::SyntheticTaskSpec ts;
  ts.seed = 8;
  ts.classes = 4;
  ts.train_per_class = 8;
  auto task = train::make_synthetic_task(ts).downstream;
  train::TrainingConfig tc;
  tc.batch_size = 4;
  tc.epochs = 100;
  tc.warmup_epochs = 1;
  tc.learning_rate = 1e-2;
  tc.max_steps = 500;
  Rng rng(808);
  auto base = random_model(c, rng);
  std::size_t changed = 0, frozen_tensors = 0, methods = 0;
  std::string short_runs;
  for (Method m : kPeft) {
    MethodSpec s;
    s.method = m;
    s.rank = 2;
    s.init = peft::InitScheme::normal;
    auto model = base;
    peft::AdapterSet<double> set;
    auto metrics = train::fine_tune(model, set, s, task, tc);
    if (metrics.steps != 500) short_runs += fmt(" %s:%zu", peft::method_name(m), metrics.steps);
    for (std::size_t i = 0; i < model.slots().size(); ++i) {
      const auto& now = model.slots()[i];
      const auto& was = base.slots()[i];
      if (!now.frozen) continue;
      ++frozen_tensors;
      if (!now.w.identical(was.w) || !now.b.identical(was.b)) ++changed;
    }
    ++methods;
  }
  return {changed == 0 && short_runs.empty(),
          fmt("%zu methods x 500 steps: %zu of %zu frozen slots changed", methods, changed, frozen_tensors) +
              (short_runs.empty() ? "" : "; wrong step count:" + short_runs)};
}

// 9 ---------------------------------------------------------------------------

// Recorded on the first verified run at this seed.
constexpr double kGoldenLinearProbe = 0.75;
constexpr double kGoldenRlrr = 0.92;
constexpr double kGoldenTolerance = 0.025;

Outcome adaptation_smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  train::SyntheticTaskSpec ts;
  ts.seed = 7;
  ts.classes = 10;
  ts.train_per_class = 32;
  ts.val_per_class = 20;
  ts.noise = 1.0;
  ts.shift = 1.0;
  auto task = train::make_synthetic_task(ts);
  auto vc = toy(64, 4, 4, 10);
  train::TrainingConfig pre;
  pre.learning_rate = 1e-3;
  pre.weight_decay = 1e-4;
  pre.epochs = 30;
  pre.warmup_epochs = 3;
  pre.seed = 1;
  auto base = train::pretrain<double>(vc, task.pretrain, pre);

  train::TrainingConfig ft = pre;
  ft.epochs = 50;
  ft.warmup_epochs = 5;
  ft.learning_rate = 1e-2;
  ft.max_steps = 500;
  auto lp_model = base;
  auto lp = train::linear_probe(lp_model, task.downstream, ft);
  auto rl_model = base;
  peft::AdapterSet<double> set;
  MethodSpec spec;
  auto rl = train::fine_tune(rl_model, set, spec, task.downstream, ft);
  MethodSpec full;
  full.method = Method::full;
  const std::size_t full_params = peft::count_trainable(full, vc).total();
  const double t = seconds_since(t0);

  const double lp_acc = lp.final_val_acc(), rl_acc = rl.final_val_acc();
  const double ratio = double(rl.trainable) / double(full_params);
  const bool golden = std::abs(lp_acc - kGoldenLinearProbe) <= kGoldenTolerance &&
                      std::abs(rl_acc - kGoldenRlrr) <= kGoldenTolerance;
  const bool ok = rl_acc >= lp_acc + 0.05 && ratio <= 0.05 && rl.steps <= 500 && lp.steps <= 500 && golden &&
                  t < 300.0;
  return {ok, fmt("rlrr val %.3f vs linear probe %.3f (need +0.050); params %zu / full %zu = %.2f%% "
                  "(limit 5%%); %zu steps; golden %.3f/%.3f ±%.3f %s; %.1f s (limit 300 s)",
                  rl_acc, lp_acc, rl.trainable, full_params, 100.0 * ratio, rl.steps, kGoldenRlrr,
                  kGoldenLinearProbe, kGoldenTolerance, golden ? "match" : "DRIFTED", t)};
}

// 10 --------------------------------------------------------------------------

Outcome combination() {
  Rng rng(1010);
  bool onehot_exact = true;
  double sop = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(12), n = 1 + rng.below(12);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>({m, n, 5}));
    std::vector<peft::RlrrParams<double>> ad;
    std::vector<double> w;
    for (std::size_t i = 0; i < k; ++i) {
      ad.push_back({rng.uniform_tensor<double>({m}, -1, 1), rng.uniform_tensor<double>({n}, -1, 1),
                    rng.uniform_tensor<double>({n}, -1, 1)});
      w.push_back(rng.uniform(-1.0, 1.0));
    }
    const std::size_t pick = rng.below(k);
    std::vector<double> onehot(k, 0.0);
    onehot[pick] = 1.0;
    auto c = peft::combine_rlrr(ad, onehot, peft::CombineMode::weighted);
    onehot_exact = onehot_exact && c.single && c.single->s_left.identical(ad[pick].s_left) &&
                   c.single->s_right.identical(ad[pick].s_right) && c.single->f.identical(ad[pick].f);

    // Dense oracle: W + (Σ_i w_i·s_l_i·s_r_iᵀ) ⊙ W, b + Σ_i w_i·f_i.
    vit::ParamMatrix<double> host;
    host.slot = vit::WeightSlot::at(0, SlotKind::q);
    host.w = rng.uniform_tensor<double>({m, n}, -1, 1);
    host.b = rng.uniform_tensor<double>({n}, -1, 1);
    auto s = peft::combine_rlrr(ad, w, peft::CombineMode::sum_of_products);
    auto merged = peft::merge_rankr_rlrr(host, *s.ranked, true);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double scale = 0.0;
        for (std::size_t a = 0; a < k; ++a) scale += w[a] * ad[a].s_left[i] * ad[a].s_right[j];
        sop = std::max(sop, std::abs(merged.w.at(i, j) - (host.w.at(i, j) + scale * host.w.at(i, j))));
      }
    for (std::size_t j = 0; j < n; ++j) {
      double f = host.b[j];
      for (std::size_t a = 0; a < k; ++a) f += w[a] * ad[a].f[j];
      sop = std::max(sop, std::abs(merged.b[j] - f));
    }
  }
  return {onehot_exact && sop < 1e-10, fmt("one-hot weighted combine %s; sum-of-products vs dense rank-k oracle "
                                           "%.2e (tol 1e-10) over 50 trials",
                                           onehot_exact ? "exact" : "NOT exact", sop)};
}

// 11 --------------------------------------------------------------------------

template <typename E>
bool throws(const std::function<void()>& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome checkpoint_and_config() {
  Rng rng(1111);
  auto c = toy(8, 2, 2, 4);
  auto model = random_model(c, rng);
  MethodSpec s;
  s.method = Method::rankr_rlrr;
  s.rank = 2;
  auto set = peft::attach(s, model, rng);
  randomize(set, rng, 0.5);
  auto ckpt = io::model_checkpoint(model);
  auto ad = io::adapter_checkpoint(set);
  ckpt.insert(ad.begin(), ad.end());
  ckpt["f32.sample"] = io::StoredTensor::from(rng.normal_tensor<double>({3, 2, 2}, 1.0).cast<float>());
  auto path = std::filesystem::temp_directory_path() / "rlrr_acceptance.ckpt";
  io::save_checkpoint(ckpt, path);
  auto back = io::load_checkpoint(path);
  auto bytes = io::read_file(path);
  const bool roundtrip = back == ckpt && io::encode(back) == bytes && bytes.size() == io::encoded_size(ckpt);

  back.erase("f32.sample");
  vit::Model<double> m2(c);
  io::bind_model(back, m2);
  auto set2 = io::bind_adapters<double>(back, s, c);
  auto x = rng.uniform_tensor<double>({3, c.image_size()}, 0, 1);
  const bool rebinds = peft::predict(m2, set2, x).identical(peft::predict(model, set, x));

  std::size_t fixpoints = 0, configs = 0;
  for (const char* name : {"linear", "full", "rlrr", "rankr_rlrr", "rlrr_no_residual", "lora", "ssf", "adapter",
                           "vpt_shallow", "vpt_deep"}) {
    auto cfg = io::parse_config(std::string("method.name = ") + name + "\ntrain.learning_rate = 0.003\n");
    cfg.training.weight_decay = rng.uniform(0.0, 0.1);
    auto text = io::print_config(cfg);
    ++configs;
    fixpoints += io::parse_config(text) == cfg && io::print_config(io::parse_config(text)) == text;
  }

  std::size_t paths = 0, caught = 0;
  auto expect = [&](bool ok) {
    ++paths;
    caught += ok;
  };
  for (std::size_t cut : {std::size_t(0), std::size_t(5), std::size_t(19), bytes.size() / 2, bytes.size() - 1}) {
    std::vector<unsigned char> t(bytes.begin(), bytes.begin() + cut);
    expect(throws<FormatError>([&] { io::decode(t); }));
  }
  auto bad = bytes;
  bad[3] ^= 0xff;
  expect(throws<FormatError>([&] { io::decode(bad); }));
  auto newer = bytes;
  newer[8] = io::kVersion + 1;
  expect(throws<VersionError>([&] { io::decode(newer); }));
  auto trailing = bytes;
  trailing.push_back(1);
  expect(throws<FormatError>([&] { io::decode(trailing); }));
  auto missing = back;
  missing.erase("l0.q.w");
  expect(throws<BindingError>([&] { vit::Model<double> m3(c); io::bind_model(missing, m3); }));
  expect(throws<BindingError>([&] { vit::Model<float> m3(c); io::bind_model(back, m3); }));
  expect(throws<IoError>([&] { io::load_checkpoint("/nonexistent/dir/x.ckpt"); }));
  expect(throws<ConfigError>([&] { io::parse_config("method.name = rlrr\nmethod.rank = 3\n"); }));
  std::filesystem::remove(path);

  const bool ok = roundtrip && rebinds && fixpoints == configs && caught == paths;
  return {ok, fmt("checkpoint round trip %s, rebinding %s; config fixpoint %zu/%zu; error paths %zu/%zu",
                  roundtrip ? "bitwise" : "NOT bitwise", rebinds ? "identical" : "differs", fixpoints, configs,
                  caught, paths)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"merge equivalence", merge_equivalence},
      {"singular item identity", singular_item_identity},
      {"identity at init", identity_at_init},
      {"gradient correctness", gradient_correctness},
      {"parameter counts", parameter_counts},
      {"svd suite", svd_suite},
      {"rank invariants", rank_invariants},
      {"frozen immutability", frozen_immutability},
      {"adaptation smoke test", adaptation_smoke},
      {"combination", combination},
      {"checkpoint and config", checkpoint_and_config},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::strtoul(argv[i], nullptr, 10));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed;
}
