#include "rlrr/peft.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace rlrr::peft {

namespace {

constexpr std::array<const char*, 10> kMethodNames = {
    "linear", "full", "rlrr", "rankr_rlrr", "rlrr_no_residual",
    "lora", "ssf", "adapter", "vpt_shallow", "vpt_deep"};

constexpr std::array<const char*, 5> kInitNames = {"zero", "normal", "uniform", "constant",
                                                   "left_zero"};

bool rlrr_family(Method m) {
  return m == Method::rlrr || m == Method::rankr_rlrr || m == Method::rlrr_no_residual;
}

bool matrix_form(Method m) { return m == Method::rankr_rlrr || m == Method::rlrr_no_residual; }

std::string slot_param(const WeightSlot& slot, const char* param) {
  return slot.name() + "." + param;
}

std::size_t slot_rows(SlotKind k, const ViTConfig& cfg) {
  return k == SlotKind::fc2 ? cfg.hidden() : cfg.dim;
}
std::size_t slot_cols(SlotKind k, const ViTConfig& cfg) {
  return k == SlotKind::fc1 ? cfg.hidden() : cfg.dim;
}

const char* block_name(Block b) { return b == Block::mha ? "adapter_mha" : "adapter_ffn"; }

template <typename T>
void require_vector(const Tensor<T>& v, std::size_t n, const std::string& what,
                    const ParamMatrix<T>& host) {
  if (v.size() != n) {
    throw BindingError(what + " " + shape_str(v.shape()) + " does not bind to slot " +
                       host.slot.name() + " " + shape_str(host.w.shape()));
  }
}

template <typename T>
Tensor<T> row_bias(Tensor<T> y, const Tensor<T>& b) {
  const std::size_t n = y.cols();
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = y[i * n + j] + b[j];
  return y;
}

template <typename T>
Tensor<T> plain_forward(const Tensor<T>& x, const Tensor<T>& w, const ParamMatrix<T>& host) {
  Tensor<T> y = matmul(x, w);
  return host.has_bias() ? row_bias(std::move(y), host.b) : y;
}

template <typename T>
void check_rankr(const ParamMatrix<T>& host, const RankRRlrrParams<T>& p) {
  const std::size_t m = host.w.rows(), n = host.w.cols(), r = p.s_left.cols();
  if (r == 0 || r > std::min(m, n)) {
    throw ConfigError("rank " + std::to_string(r) + " exceeds min dims of slot " + host.slot.name());
  }
  if (p.s_left.rows() != m || p.s_right.rows() != r || p.s_right.cols() != n) {
    throw BindingError("rank-r scales " + shape_str(p.s_left.shape()) + "/" +
                       shape_str(p.s_right.shape()) + " do not bind to slot " + host.slot.name());
  }
  require_vector(p.f, n, "shift", host);
}

}  // namespace

const char* method_name(Method m) { return kMethodNames[static_cast<std::size_t>(m)]; }

std::optional<Method> parse_method(const std::string& name) {
  for (std::size_t i = 0; i < kMethodNames.size(); ++i)
    if (name == kMethodNames[i]) return static_cast<Method>(i);
  return std::nullopt;
}

bool is_mergeable(Method m) {
  return m != Method::adapter && m != Method::vpt_shallow && m != Method::vpt_deep;
}

const char* init_name(InitScheme s) { return kInitNames[static_cast<std::size_t>(s)]; }

std::optional<InitScheme> parse_init(const std::string& name) {
  for (std::size_t i = 0; i < kInitNames.size(); ++i)
    if (name == kInitNames[i]) return static_cast<InitScheme>(i);
  return std::nullopt;
}

std::vector<SlotKind> default_modules(Method m) {
  using K = SlotKind;
  switch (m) {
    case Method::rlrr:
    case Method::rankr_rlrr:
    case Method::rlrr_no_residual:
      return {K::q, K::k, K::v, K::o, K::fc1, K::fc2};
    case Method::ssf:
      return {K::q, K::k, K::v, K::o, K::fc1, K::fc2, K::ln1, K::ln2};
    case Method::lora:
      return {K::q, K::v};
    default:
      return {};
  }
}

std::vector<SlotKind> effective_modules(const MethodSpec& spec) {
  std::vector<SlotKind> mods = spec.modules.empty() ? default_modules(spec.method) : spec.modules;
  std::sort(mods.begin(), mods.end());
  mods.erase(std::unique(mods.begin(), mods.end()), mods.end());
  return mods;
}

std::vector<std::size_t> effective_layers(const MethodSpec& spec, const ViTConfig& cfg) {
  std::vector<std::size_t> layers = spec.layers;
  if (layers.empty()) {
    for (std::size_t l = 0; l < cfg.layers; ++l) layers.push_back(l);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (std::size_t l : layers)
    if (l >= cfg.layers)
      throw ConfigError("layer " + std::to_string(l) + " out of range for " +
                        std::to_string(cfg.layers) + " layers");
  return layers;
}

// ---------------------------------------------------------------------------
// Eager forms

template <typename T>
Tensor<T> rlrr_delta(const Tensor<T>& w, const RlrrParams<T>& p) {
  const std::size_t m = w.rows(), n = w.cols();
  if (p.s_left.size() != m || p.s_right.size() != n) {
    throw BindingError("rlrr scales " + shape_str(p.s_left.shape()) + "/" +
                       shape_str(p.s_right.shape()) + " do not bind to " + shape_str(w.shape()));
  }
  Tensor<T> d(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] = w[i * n + j] * p.s_left[i] * p.s_right[j];
  return d;
}

template <typename T>
Tensor<T> rlrr_forward(const Tensor<T>& x, const ParamMatrix<T>& host, const RlrrParams<T>& p) {
  require_vector(p.f, host.w.cols(), "shift", host);
  Tensor<T> w = add(host.w, rlrr_delta(host.w, p)).reshaped(host.w.shape());
  return row_bias(plain_forward(x, w, host), p.f);
}

template <typename T>
Tensor<T> rankr_rlrr_forward(const Tensor<T>& x, const ParamMatrix<T>& host,
                             const RankRRlrrParams<T>& p) {
  check_rankr(host, p);
  Tensor<T> scale = matmul(p.s_left, p.s_right);
  Tensor<T> w = add(host.w, hadamard(scale, host.w)).reshaped(host.w.shape());
  return row_bias(plain_forward(x, w, host), p.f);
}

template <typename T>
Tensor<T> rlrr_no_residual_forward(const Tensor<T>& x, const ParamMatrix<T>& host,
                                   const RankRRlrrParams<T>& p) {
  check_rankr(host, p);
  Tensor<T> w = add(host.w, matmul(p.s_left, p.s_right)).reshaped(host.w.shape());
  return row_bias(plain_forward(x, w, host), p.f);
}

template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const ParamMatrix<T>& host, const LoraParams<T>& p) {
  if (p.w_down.rows() != host.w.rows() || p.w_up.cols() != host.w.cols() ||
      p.w_down.cols() != p.w_up.rows()) {
    throw BindingError("lora factors " + shape_str(p.w_down.shape()) + "/" +
                       shape_str(p.w_up.shape()) + " do not bind to slot " + host.slot.name());
  }
  Tensor<T> w = add(host.w, matmul(p.w_down, p.w_up)).reshaped(host.w.shape());
  return plain_forward(x, w, host);
}

template <typename T>
Tensor<T> ssf_forward(const Tensor<T>& x, const ParamMatrix<T>& host, const SsfParams<T>& p) {
  const std::size_t n = host.w.cols();
  require_vector(p.s, n, "scale", host);
  require_vector(p.f, n, "shift", host);
  Tensor<T> y = plain_forward(x, host.w, host);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = y[i * n + j] * p.s[j] + p.f[j];
  return y;
}

template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& y, const AdapterParams<T>& p) {
  if (p.w_down.rows() != y.cols() || p.w_up.rows() != p.w_down.cols() ||
      p.w_up.cols() != y.cols()) {
    throw BindingError("adapter " + shape_str(p.w_down.shape()) + "/" + shape_str(p.w_up.shape()) +
                       " does not bind to block output " + shape_str(y.shape()));
  }
  Tensor<T> h = matmul(y, p.w_down);
  for (T& v : h.storage()) v = ad::gelu_value(v);
  return matmul(h, p.w_up);
}

template <typename T>
Tensor<T> prompt_forward(const Tensor<T>& x, const PromptParams<T>& p, const vit::Model<T>& model,
                         std::size_t l) {
  ad::Tape<T> tape;
  vit::ForwardContext<T> ctx(tape);
  vit::ForwardHooks<T> hooks;
  ad::Var<T> xv = tape.constant(x);
  std::size_t tokens = x.rows();
  if (!p.theta.empty()) {
    if (p.theta.cols() != x.cols()) {
      throw BindingError("prompts " + shape_str(p.theta.shape()) + " do not match tokens " +
                         shape_str(x.shape()));
    }
    xv = ad::append_tokens(xv, tape.constant(p.theta), tokens);
    tokens += p.theta.rows();
  }
  return vit::layer(ctx, model, l, xv, tokens, hooks).value();
}

// ---------------------------------------------------------------------------
// Merges

template <typename T>
ParamMatrix<T> merge_rlrr(const ParamMatrix<T>& host, const RlrrParams<T>& p) {
  require_vector(p.f, host.w.cols(), "shift", host);
  ParamMatrix<T> out = host;
  out.w = add(host.w, rlrr_delta(host.w, p)).reshaped(host.w.shape());
  if (host.has_bias()) out.b = add(host.b, p.f);
  out.frozen = true;
  return out;
}

template <typename T>
ParamMatrix<T> merge_rankr_rlrr(const ParamMatrix<T>& host, const RankRRlrrParams<T>& p,
                                bool residual) {
  check_rankr(host, p);
  ParamMatrix<T> out = host;
  Tensor<T> scale = matmul(p.s_left, p.s_right);
  out.w = add(host.w, residual ? hadamard(scale, host.w) : scale).reshaped(host.w.shape());
  if (host.has_bias()) out.b = add(host.b, p.f);
  out.frozen = true;
  return out;
}

template <typename T>
ParamMatrix<T> merge_ssf(const ParamMatrix<T>& host, const SsfParams<T>& p) {
  const std::size_t n = host.w.cols();
  require_vector(p.s, n, "scale", host);
  require_vector(p.f, n, "shift", host);
  ParamMatrix<T> out = host;
  for (std::size_t i = 0; i < host.w.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.w[i * n + j] = host.w[i * n + j] * p.s[j];
  for (std::size_t j = 0; j < n; ++j) out.b[j] = host.b[j] * p.s[j] + p.f[j];
  out.frozen = true;
  return out;
}

template <typename T>
ParamMatrix<T> merge_lora(const ParamMatrix<T>& host, const LoraParams<T>& p) {
  if (p.w_down.rows() != host.w.rows() || p.w_up.cols() != host.w.cols()) {
    throw BindingError("lora factors do not bind to slot " + host.slot.name());
  }
  ParamMatrix<T> out = host;
  out.w = add(host.w, matmul(p.w_down, p.w_up)).reshaped(host.w.shape());
  out.frozen = true;
  return out;
}

// ---------------------------------------------------------------------------
// Combination

namespace {

// Σ w_i·t_i over the non-zero weights, so a one-hot weight returns its term
// unchanged.
template <typename T>
Tensor<T> weighted_sum(const std::vector<const Tensor<T>*>& terms, const std::vector<double>& w) {
  Tensor<T> out(terms.front()->shape());
  bool first = true;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i]->shape() != out.shape()) {
      throw DimensionError("combine: adapter shapes differ " + shape_str(terms[i]->shape()) +
                           " vs " + shape_str(out.shape()));
    }
    if (w[i] == 0.0) continue;
    const T wi = static_cast<T>(w[i]);
    for (std::size_t q = 0; q < out.size(); ++q) {
      const T term = wi == T(1) ? (*terms[i])[q] : wi * (*terms[i])[q];
      out[q] = first ? term : out[q] + term;
    }
    first = false;
  }
  return out;
}

}  // namespace

template <typename T>
CombinedRlrr<T> combine_rlrr(const std::vector<RlrrParams<T>>& adapters,
                             const std::vector<double>& weights, CombineMode mode) {
  if (adapters.empty()) throw ContractError("combine_rlrr: no adapters given");
  if (weights.size() != adapters.size()) {
    throw ContractError("combine_rlrr: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(adapters.size()) + " adapters");
  }
  std::vector<const Tensor<T>*> left, right, shift;
  for (const auto& a : adapters) {
    left.push_back(&a.s_left);
    right.push_back(&a.s_right);
    shift.push_back(&a.f);
  }
  CombinedRlrr<T> out;
  if (mode == CombineMode::weighted) {
    out.single = RlrrParams<T>{weighted_sum(left, weights), weighted_sum(right, weights),
                               weighted_sum(shift, weights)};
    return out;
  }
  const std::size_t m = adapters.front().s_left.size(), n = adapters.front().s_right.size();
  const std::size_t k = adapters.size();
  RankRRlrrParams<T> r{Tensor<T>(Shape{m, k}), Tensor<T>(Shape{k, n}), weighted_sum(shift, weights)};
  for (std::size_t i = 0; i < k; ++i) {
    if (adapters[i].s_left.size() != m || adapters[i].s_right.size() != n) {
      throw DimensionError("combine_rlrr: adapter " + std::to_string(i) + " has different shapes");
    }
    const T wi = static_cast<T>(weights[i]);
    for (std::size_t a = 0; a < m; ++a) r.s_left[a * k + i] = wi * adapters[i].s_left[a];
    for (std::size_t b = 0; b < n; ++b) r.s_right[i * n + b] = adapters[i].s_right[b];
  }
  out.ranked = std::move(r);
  return out;
}

// ---------------------------------------------------------------------------
// Planning and attachment

std::vector<PlannedTensor> plan_attachment(const MethodSpec& spec, const ViTConfig& cfg) {
  cfg.validate();
  std::vector<PlannedTensor> plan;
  const auto layers = effective_layers(spec, cfg);
  const auto mods = effective_modules(spec);
  const std::size_t d = cfg.dim;
  auto add = [&](const WeightSlot& slot, const char* param, Shape shape, bool trainable,
                 CountGroup group) {
    plan.push_back({slot_param(slot, param), std::move(shape), trainable, group, slot});
  };
  auto norm_pair = [&](const WeightSlot& slot, CountGroup group) {
    add(slot, "s", {d}, true, group);
    add(slot, "f", {d}, true, group);
  };

  for (SlotKind k : mods) {
    const bool ok = (rlrr_family(spec.method) || spec.method == Method::lora)
                        ? vit::is_matrix_kind(k)
                        : spec.method == Method::ssf &&
                              (vit::is_matrix_kind(k) || k == SlotKind::ln1 || k == SlotKind::ln2);
    if (!ok) {
      throw ConfigError(std::string("slot kind '") + vit::kind_name(k) + "' cannot carry method " +
                        method_name(spec.method));
    }
  }

  switch (spec.method) {
    case Method::linear_probe:
    case Method::full:
      break;
    case Method::rlrr:
    case Method::rankr_rlrr:
    case Method::rlrr_no_residual: {
      for (std::size_t l : layers) {
        for (SlotKind k : mods) {
          const auto slot = WeightSlot::at(l, k);
          const std::size_t m = slot_rows(k, cfg), n = slot_cols(k, cfg);
          if (matrix_form(spec.method)) {
            if (spec.rank == 0 || spec.rank > std::min(m, n)) {
              throw ConfigError("rank " + std::to_string(spec.rank) + " exceeds min dims of " +
                                slot.name());
            }
            add(slot, "s_left", {m, spec.rank}, true, CountGroup::method);
            add(slot, "s_right", {spec.rank, n}, true, CountGroup::method);
          } else {
            add(slot, "s_left", {m}, spec.train_left, CountGroup::method);
            add(slot, "s_right", {n}, spec.train_right, CountGroup::method);
          }
          add(slot, "f", {n}, true, CountGroup::method);
        }
        if (spec.norm_scaling) {
          norm_pair(WeightSlot::at(l, SlotKind::ln1), CountGroup::layer_norm);
          norm_pair(WeightSlot::at(l, SlotKind::ln2), CountGroup::layer_norm);
        }
      }
      if (spec.norm_scaling) norm_pair(WeightSlot::global(SlotKind::final_ln), CountGroup::layer_norm);
      break;
    }
    case Method::lora:
      for (std::size_t l : layers)
        for (SlotKind k : mods) {
          const auto slot = WeightSlot::at(l, k);
          const std::size_t m = slot_rows(k, cfg), n = slot_cols(k, cfg);
          if (spec.rank == 0 || spec.rank > std::min(m, n)) {
            throw ConfigError("lora rank " + std::to_string(spec.rank) + " exceeds min dims of " +
                              slot.name());
          }
          add(slot, "w_down", {m, spec.rank}, true, CountGroup::method);
          add(slot, "w_up", {spec.rank, n}, true, CountGroup::method);
        }
      break;
    case Method::ssf:
      for (std::size_t l : layers)
        for (SlotKind k : mods) {
          const auto slot = WeightSlot::at(l, k);
          const std::size_t n = vit::is_norm_kind(k) ? d : slot_cols(k, cfg);
          add(slot, "s", {n}, true, CountGroup::method);
          add(slot, "f", {n}, true, CountGroup::method);
        }
      if (spec.norm_scaling) norm_pair(WeightSlot::global(SlotKind::final_ln), CountGroup::layer_norm);
      break;
    case Method::adapter: {
      if (spec.bottleneck == 0 || spec.bottleneck >= d) {
        throw ConfigError("adapter bottleneck " + std::to_string(spec.bottleneck) +
                          " must lie in [1, D)");
      }
      if (spec.adapter_positions.empty()) throw ConfigError("adapter needs at least one position");
      auto positions = spec.adapter_positions;
      std::sort(positions.begin(), positions.end());
      positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
      for (std::size_t l : layers)
        for (Block b : positions) {
          const std::string base = "l" + std::to_string(l) + "." + block_name(b);
          plan.push_back({base + ".w_down", {d, spec.bottleneck}, true, CountGroup::method,
                          WeightSlot::at(l, b == Block::mha ? SlotKind::o : SlotKind::fc2)});
          plan.push_back({base + ".w_up", {spec.bottleneck, d}, true, CountGroup::method,
                          WeightSlot::at(l, b == Block::mha ? SlotKind::o : SlotKind::fc2)});
        }
      break;
    }
    case Method::vpt_shallow:
      if (spec.prompts > 0)
        plan.push_back({"prompt.theta", {spec.prompts, d}, true, CountGroup::method,
                        WeightSlot::at(0, SlotKind::ln1)});
      break;
    case Method::vpt_deep:
      if (spec.prompts > 0)
        for (std::size_t l : layers)
          plan.push_back({"l" + std::to_string(l) + ".prompt.theta", {spec.prompts, d}, true,
                          CountGroup::method, WeightSlot::at(l, SlotKind::ln1)});
      break;
  }
  std::sort(plan.begin(), plan.end(),
            [](const PlannedTensor& a, const PlannedTensor& b) { return a.name < b.name; });
  return plan;
}

template <typename T>
const Tensor<T>& AdapterSet<T>::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw BindingError("adapter set has no tensor '" + name + "'");
  return it->second;
}

template <typename T>
Tensor<T>& AdapterSet<T>::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw BindingError("adapter set has no tensor '" + name + "'");
  return it->second;
}

template <typename T>
void AdapterSet<T>::put(const std::string& name, Tensor<T> value, bool trainable) {
  tensors_[name] = std::move(value);
  if (trainable) fixed_.erase(name); else fixed_.insert(name);
}

template <typename T>
std::vector<vit::NamedTensor<T>> AdapterSet<T>::named() {
  std::vector<vit::NamedTensor<T>> out;
  for (auto& [name, t] : tensors_) out.push_back({name, &t, trainable(name)});
  return out;
}

template <typename T>
std::size_t AdapterSet<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_)
    if (trainable(name)) n += t.size();
  return n;
}

template <typename T>
RlrrParams<T> AdapterSet<T>::rlrr(const WeightSlot& slot) const {
  return {get(slot_param(slot, "s_left")), get(slot_param(slot, "s_right")),
          get(slot_param(slot, "f"))};
}

template <typename T>
RankRRlrrParams<T> AdapterSet<T>::rankr(const WeightSlot& slot) const {
  return {get(slot_param(slot, "s_left")), get(slot_param(slot, "s_right")),
          get(slot_param(slot, "f"))};
}

template <typename T>
LoraParams<T> AdapterSet<T>::lora(const WeightSlot& slot) const {
  return {get(slot_param(slot, "w_down")), get(slot_param(slot, "w_up"))};
}

template <typename T>
SsfParams<T> AdapterSet<T>::ssf(const WeightSlot& slot) const {
  return {get(slot_param(slot, "s")), get(slot_param(slot, "f"))};
}

template <typename T>
AdapterSet<T> make_adapters(const MethodSpec& spec, const ViTConfig& cfg, Rng& rng) {
  AdapterSet<T> set(spec);
  const double scale = spec.init_scale;
  auto draw = [&](const Shape& shape, bool left) -> Tensor<T> {
    switch (spec.init) {
      case InitScheme::zero:
        return Tensor<T>(shape);
      case InitScheme::normal:
        return rng.normal_tensor<T>(shape, scale);
      case InitScheme::uniform:
        return rng.uniform_tensor<T>(shape, -scale, scale);
      case InitScheme::constant:
        return Tensor<T>(shape, static_cast<T>(scale));
      case InitScheme::left_zero:
        return left ? Tensor<T>(shape) : rng.normal_tensor<T>(shape, scale);
    }
    return Tensor<T>(shape);
  };
  for (const auto& p : plan_attachment(spec, cfg)) {
    const std::string param = p.name.substr(p.name.rfind('.') + 1);
    Tensor<T> value;
    if (param == "s_left" || param == "s_right") {
      value = p.trainable ? draw(p.shape, param == "s_left") : Tensor<T>(p.shape, T(1));
    } else if (param == "s") {
      value = Tensor<T>(p.shape, T(1));
    } else if (param == "f") {
      value = Tensor<T>(p.shape);
    } else if (param == "w_down") {
      // LoRA starts from a zero down-projection, adapters from a zero up-projection.
      value = spec.method == Method::lora
                  ? Tensor<T>(p.shape)
                  : rng.normal_tensor<T>(p.shape, 1.0 / std::sqrt(double(p.shape[0])));
    } else if (param == "w_up") {
      value = spec.method == Method::lora
                  ? rng.normal_tensor<T>(p.shape, 1.0 / std::sqrt(double(p.shape[0])))
                  : Tensor<T>(p.shape);
    } else if (param == "theta") {
      value = rng.normal_tensor<T>(p.shape, 1.0 / std::sqrt(double(cfg.dim)));
    }
    set.put(p.name, std::move(value), p.trainable);
  }
  return set;
}

template <typename T>
AdapterSet<T> attach(const MethodSpec& spec, vit::Model<T>& model, Rng& rng) {
  AdapterSet<T> set = make_adapters<T>(spec, model.config(), rng);
  model.set_frozen(spec.method != Method::full);
  model.at(WeightSlot::global(SlotKind::head)).frozen =
      !(spec.train_head || spec.method == Method::full);
  return set;
}

template <typename T>
void validate_adapters(const AdapterSet<T>& set, const ViTConfig& cfg) {
  const auto plan = plan_attachment(set.spec(), cfg);
  for (const auto& p : plan) {
    if (!set.has(p.name)) {
      throw BindingError("adapter set lacks '" + p.name + "' for slot " + p.slot.name());
    }
    if (set.get(p.name).shape() != p.shape) {
      throw BindingError("adapter '" + p.name + "' has shape " + shape_str(set.get(p.name).shape()) +
                         ", slot " + p.slot.name() + " expects " + shape_str(p.shape));
    }
  }
  if (set.tensors().size() != plan.size()) {
    for (const auto& [name, t] : set.tensors()) {
      bool known = std::any_of(plan.begin(), plan.end(),
                               [&](const PlannedTensor& p) { return p.name == name; });
      if (!known) {
        throw BindingError("adapter tensor '" + name + "' does not belong to method " +
                           method_name(set.spec().method));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Hooks

template <typename T>
ad::Var<T> PeftHooks<T>::param(vit::ForwardContext<T>& ctx, const std::string& name) {
  return ctx.bind(name, set_->get(name), set_->trainable(name));
}

template <typename T>
ad::Var<T> PeftHooks<T>::linear(vit::ForwardContext<T>& ctx, const ParamMatrix<T>& host,
                                ad::Var<T> x) {
  const MethodSpec& spec = set_->spec();
  const std::string base = host.slot.name() + ".";
  if (rlrr_family(spec.method) && set_->has(base + "s_left")) {
    auto w = ctx.weight(host);
    auto sl = param(ctx, base + "s_left");
    auto sr = param(ctx, base + "s_right");
    ad::Var<T> delta;
    if (spec.method == Method::rlrr) {
      if (spec.residual) {
        delta = ad::mul_row(ad::mul_col(w, sl), sr);
      } else {
        const std::size_t m = host.w.rows(), n = host.w.cols();
        delta = ad::matmul(ad::reshape(sl, {m, 1}), ad::reshape(sr, {1, n}));
      }
    } else {
      auto prod = ad::matmul(sl, sr);
      delta = spec.method == Method::rankr_rlrr ? ad::mul(prod, w) : prod;
    }
    auto y = ad::add_row(ad::matmul(x, ad::add(w, delta)), ctx.bias(host));
    return ad::add_row(y, param(ctx, base + "f"));
  }
  if (spec.method == Method::lora && set_->has(base + "w_down")) {
    auto w = ctx.weight(host);
    auto delta = ad::matmul(param(ctx, base + "w_down"), param(ctx, base + "w_up"));
    return ad::add_row(ad::matmul(x, ad::add(w, delta)), ctx.bias(host));
  }
  if (spec.method == Method::ssf && set_->has(base + "s")) {
    auto y = vit::ForwardHooks<T>::linear(ctx, host, x);
    return ad::add_row(ad::mul_row(y, param(ctx, base + "s")), param(ctx, base + "f"));
  }
  return vit::ForwardHooks<T>::linear(ctx, host, x);
}

template <typename T>
ad::Var<T> PeftHooks<T>::norm(vit::ForwardContext<T>& ctx, const ParamMatrix<T>& host,
                              ad::Var<T> x) {
  auto y = vit::ForwardHooks<T>::norm(ctx, host, x);
  const std::string base = host.slot.name() + ".";
  if (!set_->has(base + "s")) return y;
  return ad::add_row(ad::mul_row(y, param(ctx, base + "s")), param(ctx, base + "f"));
}

template <typename T>
ad::Var<T> PeftHooks<T>::block_output(vit::ForwardContext<T>& ctx, std::size_t layer, Block block,
                                      ad::Var<T> y) {
  if (set_->spec().method != Method::adapter) return y;
  const std::string base = "l" + std::to_string(layer) + "." + block_name(block) + ".";
  if (!set_->has(base + "w_down")) return y;
  auto h = ad::gelu(ad::matmul(y, param(ctx, base + "w_down")));
  return ad::add(y, ad::matmul(h, param(ctx, base + "w_up")));
}

template <typename T>
ad::Var<T> PeftHooks<T>::enter_layer(vit::ForwardContext<T>& ctx, std::size_t layer, ad::Var<T> x,
                                     std::size_t& tokens) {
  const Method m = set_->spec().method;
  std::string name;
  if (m == Method::vpt_deep) name = "l" + std::to_string(layer) + ".prompt.theta";
  if (m == Method::vpt_shallow && layer == 0) name = "prompt.theta";
  if (name.empty() || !set_->has(name)) return x;
  auto theta = param(ctx, name);
  x = ad::append_tokens(x, theta, tokens);
  tokens += theta.value().rows();
  return x;
}

template <typename T>
ad::Var<T> PeftHooks<T>::leave_layer(vit::ForwardContext<T>&, std::size_t layer, ad::Var<T> x,
                                     std::size_t& tokens) {
  if (set_->spec().method != Method::vpt_deep) return x;
  const std::string name = "l" + std::to_string(layer) + ".prompt.theta";
  if (!set_->has(name)) return x;
  const std::size_t prompts = set_->get(name).rows();
  x = ad::keep_tokens(x, tokens, tokens - prompts);
  tokens -= prompts;
  return x;
}

template <typename T>
Tensor<T> predict(const vit::Model<T>& model, const AdapterSet<T>& set, const Tensor<T>& images) {
  PeftHooks<T> hooks(set);
  return vit::predict(model, images, hooks);
}

template <typename T>
vit::Model<T> merge(const vit::Model<T>& model, const AdapterSet<T>& set) {
  const MethodSpec& spec = set.spec();
  if (!is_mergeable(spec.method)) {
    throw ContractError(std::string("method ") + method_name(spec.method) +
                        " has no linear re-parameterization");
  }
  validate_adapters(set, model.config());
  vit::Model<T> out = model;
  for (auto& host : out.slots()) {
    const std::string base = host.slot.name() + ".";
    if (set.has(base + "s_left")) {
      if (spec.method == Method::rlrr && spec.residual) {
        host = merge_rlrr(host, set.rlrr(host.slot));
      } else if (spec.method == Method::rlrr) {
        RlrrParams<T> p = set.rlrr(host.slot);
        RankRRlrrParams<T> r{p.s_left.reshaped({host.w.rows(), 1}),
                             p.s_right.reshaped({1, host.w.cols()}), p.f};
        host = merge_rankr_rlrr(host, r, false);
      } else {
        host = merge_rankr_rlrr(host, set.rankr(host.slot), spec.method == Method::rankr_rlrr);
      }
    } else if (set.has(base + "w_down")) {
      host = merge_lora(host, set.lora(host.slot));
    } else if (set.has(base + "s")) {
      host = merge_ssf(host, set.ssf(host.slot));
    }
  }
  return out;
}

template <typename T>
AdapterSet<T> combine(const std::vector<AdapterSet<T>>& sets, const std::vector<double>& weights,
                      CombineMode mode) {
  if (sets.empty()) throw ContractError("combine: no adapter sets given");
  if (weights.size() != sets.size()) {
    throw ContractError("combine: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(sets.size()) + " adapter sets");
  }
  const MethodSpec& first = sets.front().spec();
  for (const auto& s : sets) {
    if (s.spec().method != Method::rlrr) throw ContractError("combine: only rlrr sets combine");
    if (s.tensors().size() != sets.front().tensors().size()) {
      throw BindingError("combine: adapter sets cover different slots");
    }
  }
  MethodSpec spec = first;
  if (mode == CombineMode::sum_of_products) {
    spec.method = first.residual ? Method::rankr_rlrr : Method::rlrr_no_residual;
    spec.rank = sets.size();
  }
  AdapterSet<T> out(spec);
  for (const auto& [name, t] : sets.front().tensors()) {
    const std::string param = name.substr(name.rfind('.') + 1);
    if (mode == CombineMode::sum_of_products && (param == "s_left" || param == "s_right")) continue;
    std::vector<const Tensor<T>*> terms;
    for (const auto& s : sets) terms.push_back(&s.get(name));
    out.put(name, weighted_sum(terms, weights), sets.front().trainable(name));
  }
  if (mode == CombineMode::sum_of_products) {
    for (const auto& [name, t] : sets.front().tensors()) {
      if (name.size() < 7 || name.substr(name.size() - 7) != ".s_left") continue;
      const std::string base = name.substr(0, name.size() - 6);
      std::vector<RlrrParams<T>> per;
      for (const auto& s : sets)
        per.push_back({s.get(base + "s_left"), s.get(base + "s_right"), s.get(base + "f")});
      auto combined = combine_rlrr(per, weights, mode);
      out.put(base + "s_left", std::move(combined.ranked->s_left));
      out.put(base + "s_right", std::move(combined.ranked->s_right));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Counting

ParamCount count_trainable(const MethodSpec& spec, const ViTConfig& cfg) {
  ParamCount c;
  const auto plan = plan_attachment(spec, cfg);
  const auto layers = effective_layers(spec, cfg);
  const auto mods = effective_modules(spec);
  const std::size_t d = cfg.dim, big_l = layers.size();

  std::map<std::string, std::size_t> by_label;
  std::vector<std::string> order;
  auto bump = [&](const std::string& label, std::size_t n) {
    if (!by_label.count(label)) order.push_back(label);
    by_label[label] += n;
  };
  for (const auto& p : plan) {
    if (!p.trainable) continue;
    const std::size_t n = numel(p.shape);
    std::string label = vit::kind_name(p.slot.kind);
    if (p.name.find("prompt") != std::string::npos) label = "prompts";
    if (p.name.find("adapter_") != std::string::npos) label = "adapters";
    bump(label, n);
    (p.group == CountGroup::method ? c.method : c.layer_norm) += n;
  }

  if (spec.method == Method::full) {
    const std::size_t per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    c.method = cfg.patch_dim() * d + d + d + (cfg.tokens() + 1) * d + cfg.layers * per_layer + 2 * d;
    bump("backbone", c.method);
  }
  if (spec.train_head || spec.method == Method::full || spec.method == Method::linear_probe) {
    c.head = d * cfg.classes + cfg.classes;
    bump("head", c.head);
  }
  for (const auto& label : order) c.items.push_back({label, by_label[label]});

  auto d_star = [&](SlotKind k) { return k == SlotKind::fc1 ? 4 * d : d; };
  const bool has_fc1 = std::count(mods.begin(), mods.end(), SlotKind::fc1) > 0;
  const bool has_fc2 = std::count(mods.begin(), mods.end(), SlotKind::fc2) > 0;
  switch (spec.method) {
    case Method::linear_probe:
      c.formula = "0";
      c.closed_form = 0;
      c.closed_form_applies = true;
      break;
    case Method::full:
      c.formula = "P²C·D + D + (N+2)·D + L·(12D² + 13D) + 2D";
      c.closed_form = cfg.patch_dim() * d + d + (cfg.tokens() + 2) * d +
                      cfg.layers * (12 * d * d + 13 * d) + 2 * d;
      c.closed_form_applies = true;
      break;
    case Method::adapter: {
      std::size_t positions = spec.adapter_positions.size();
      c.formula = positions == 1 ? "2·D·D'·L" : "positions·2·D·D'·L";
      c.closed_form = positions * 2 * d * spec.bottleneck * big_l;
      c.closed_form_applies = true;
      break;
    }
    case Method::vpt_shallow:
      c.formula = "m·D";
      c.closed_form = spec.prompts * d;
      c.closed_form_applies = true;
      break;
    case Method::vpt_deep:
      c.formula = "m·D·L";
      c.closed_form = spec.prompts * d * big_l;
      c.closed_form_applies = true;
      break;
    case Method::lora: {
      std::size_t w = 0;
      for (SlotKind k : mods) w += (k == SlotKind::q || k == SlotKind::k || k == SlotKind::v || k == SlotKind::o);
      c.formula = "2·w·D·D'·L";
      c.closed_form = 2 * w * d * spec.rank * big_l;
      c.closed_form_applies = w == mods.size();
      break;
    }
    case Method::ssf: {
      std::size_t sum_dstar = 0;
      for (SlotKind k : mods) sum_dstar += d_star(k);
      c.formula = "2·o·D*·L";
      c.closed_form = 2 * sum_dstar * big_l;
      c.closed_form_applies = true;
      break;
    }
    case Method::rlrr: {
      std::size_t sum_dstar = 0;
      for (SlotKind k : mods) sum_dstar += d_star(k);
      c.formula = "3·o·D*·L";
      c.closed_form = 3 * sum_dstar * big_l;
      // The per-matrix count is rows + 2·cols; summing to 3·ΣD* needs fc1 and
      // fc2 together (9D + 6D = 3·(4D + D)).
      c.closed_form_applies = has_fc1 == has_fc2 && spec.train_left && spec.train_right;
      break;
    }
    case Method::rankr_rlrr:
    case Method::rlrr_no_residual: {
      std::size_t per = 0;
      for (SlotKind k : mods) per += spec.rank * (slot_rows(k, cfg) + slot_cols(k, cfg)) + slot_cols(k, cfg);
      c.formula = "L·Σ(r·(rows+cols) + cols)";
      c.closed_form = per * big_l;
      c.closed_form_applies = true;
      break;
    }
  }
  return c;
}

#define RLRR_PEFT_INSTANTIATE(T)                                                                  \
  template Tensor<T> rlrr_delta(const Tensor<T>&, const RlrrParams<T>&);                          \
  template Tensor<T> rlrr_forward(const Tensor<T>&, const ParamMatrix<T>&, const RlrrParams<T>&); \
  template Tensor<T> rankr_rlrr_forward(const Tensor<T>&, const ParamMatrix<T>&,                  \
                                        const RankRRlrrParams<T>&);                               \
  template Tensor<T> rlrr_no_residual_forward(const Tensor<T>&, const ParamMatrix<T>&,            \
                                              const RankRRlrrParams<T>&);                         \
  template Tensor<T> lora_forward(const Tensor<T>&, const ParamMatrix<T>&, const LoraParams<T>&); \
  template Tensor<T> ssf_forward(const Tensor<T>&, const ParamMatrix<T>&, const SsfParams<T>&);   \
  template Tensor<T> adapter_forward(const Tensor<T>&, const AdapterParams<T>&);                  \
  template Tensor<T> prompt_forward(const Tensor<T>&, const PromptParams<T>&,                     \
                                    const vit::Model<T>&, std::size_t);                           \
  template ParamMatrix<T> merge_rlrr(const ParamMatrix<T>&, const RlrrParams<T>&);                \
  template ParamMatrix<T> merge_rankr_rlrr(const ParamMatrix<T>&, const RankRRlrrParams<T>&,      \
                                           bool);                                                 \
  template ParamMatrix<T> merge_ssf(const ParamMatrix<T>&, const SsfParams<T>&);                  \
  template ParamMatrix<T> merge_lora(const ParamMatrix<T>&, const LoraParams<T>&);                \
  template CombinedRlrr<T> combine_rlrr(const std::vector<RlrrParams<T>>&,                        \
                                        const std::vector<double>&, CombineMode);                 \
  template class AdapterSet<T>;                                                                   \
  template AdapterSet<T> make_adapters(const MethodSpec&, const ViTConfig&, Rng&);                \
  template AdapterSet<T> attach(const MethodSpec&, vit::Model<T>&, Rng&);                         \
  template void validate_adapters(const AdapterSet<T>&, const ViTConfig&);                        \
  template class PeftHooks<T>;                                                                    \
  template Tensor<T> predict(const vit::Model<T>&, const AdapterSet<T>&, const Tensor<T>&);       \
  template vit::Model<T> merge(const vit::Model<T>&, const AdapterSet<T>&);                       \
  template AdapterSet<T> combine(const std::vector<AdapterSet<T>>&, const std::vector<double>&,   \
                                 CombineMode);

RLRR_PEFT_INSTANTIATE(float)
RLRR_PEFT_INSTANTIATE(double)

}  // namespace rlrr::peft
