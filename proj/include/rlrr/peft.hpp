#pragma once

// Parameter-efficient fine-tuning methods as hooks over a frozen ViT: RLRR
// and its variants, LoRA, SSF, sequential adapters and visual prompts. Each
// method owns an AdapterSet of named tensors "<slot>.<param>".

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rlrr/random.hpp"
#include "rlrr/tensor.hpp"
#include "rlrr/vit.hpp"

namespace rlrr::peft {

using vit::Block;
using vit::ParamMatrix;
using vit::SlotKind;
using vit::ViTConfig;
using vit::WeightSlot;

enum class Method {
  linear_probe,
  full,
  rlrr,
  rankr_rlrr,
  rlrr_no_residual,
  lora,
  ssf,
  adapter,
  vpt_shallow,
  vpt_deep,
};

const char* method_name(Method m);
std::optional<Method> parse_method(const std::string& name);
/// Methods whose update folds into the backbone weights.
bool is_mergeable(Method m);

enum class InitScheme {
  zero,       // scales 0: exact identity, but ΔW's scales start at a saddle
  normal,     // N(0, init_scale²)
  uniform,    // U(−init_scale, init_scale)
  constant,   // init_scale
  left_zero,  // left factor 0, right factor N(0, init_scale²): identity, non-saddle
};

const char* init_name(InitScheme s);
std::optional<InitScheme> parse_init(const std::string& name);

struct MethodSpec {
  Method method = Method::rlrr;
  /// Adapted slot kinds; empty selects the method's default coverage.
  std::vector<SlotKind> modules;
  /// Adapted layers; empty selects every layer.
  std::vector<std::size_t> layers;
  std::size_t rank = 1;        // rankr_rlrr, rlrr_no_residual, lora (D')
  std::size_t bottleneck = 8;  // adapter D'
  std::size_t prompts = 4;     // vpt T
  std::vector<Block> adapter_positions = {Block::ffn};
  InitScheme init = InitScheme::zero;
  double init_scale = 0.02;
  bool train_left = true;    // rlrr: false pins s_left at 1
  bool train_right = true;   // rlrr: false pins s_right at 1
  bool residual = true;      // rlrr: false gives ΔW = s_left·s_rightᵀ
  bool norm_scaling = true;  // rlrr family: SSF-style (s, f) on LayerNorms
  bool train_head = true;

  bool operator==(const MethodSpec&) const = default;
};

std::vector<SlotKind> default_modules(Method m);
std::vector<SlotKind> effective_modules(const MethodSpec& spec);
std::vector<std::size_t> effective_layers(const MethodSpec& spec, const ViTConfig& cfg);

// Per-slot parameter groups.

template <typename T>
struct RlrrParams {
  Tensor<T> s_left;   // rows(W)
  Tensor<T> s_right;  // cols(W)
  Tensor<T> f;        // cols(W)
};

template <typename T>
struct RankRRlrrParams {
  Tensor<T> s_left;   // rows × r
  Tensor<T> s_right;  // r × cols
  Tensor<T> f;        // cols
  std::size_t rank() const { return s_left.cols(); }
};

template <typename T>
struct LoraParams {
  Tensor<T> w_down;  // rows × D'
  Tensor<T> w_up;    // D' × cols
};

template <typename T>
struct SsfParams {
  Tensor<T> s;
  Tensor<T> f;
};

template <typename T>
struct AdapterParams {
  Tensor<T> w_down;  // D × D'
  Tensor<T> w_up;    // D' × D
};

template <typename T>
struct PromptParams {
  Tensor<T> theta;  // T × D
};

// Eager forms. Host and parameters must bind (BindingError otherwise).

/// ΔW[i,j] = s_left[i]·W[i,j]·s_right[j]
template <typename T>
Tensor<T> rlrr_delta(const Tensor<T>& w, const RlrrParams<T>& p);
/// x·(W + ΔW) + b + f
template <typename T>
Tensor<T> rlrr_forward(const Tensor<T>& x, const ParamMatrix<T>& host, const RlrrParams<T>& p);
/// x·(W + (S_left·S_right)⊙W) + b + f
template <typename T>
Tensor<T> rankr_rlrr_forward(const Tensor<T>& x, const ParamMatrix<T>& host,
                             const RankRRlrrParams<T>& p);
/// x·(W + S_left·S_right) + b + f
template <typename T>
Tensor<T> rlrr_no_residual_forward(const Tensor<T>& x, const ParamMatrix<T>& host,
                                   const RankRRlrrParams<T>& p);
/// x·(W + W_down·W_up) + b
template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const ParamMatrix<T>& host, const LoraParams<T>& p);
/// (x·W + b) ⊙ s + f
template <typename T>
Tensor<T> ssf_forward(const Tensor<T>& x, const ParamMatrix<T>& host, const SsfParams<T>& p);
/// GELU(y·W_down)·W_up for a block output y (the branch the adapter adds).
template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& y, const AdapterParams<T>& p);
/// Encoder layer l over [x; Θ]; returns all N+1+T output rows.
template <typename T>
Tensor<T> prompt_forward(const Tensor<T>& x, const PromptParams<T>& p, const vit::Model<T>& model,
                         std::size_t l);

// Re-parameterization. Results are frozen.

/// W_re[i,j] = W[i,j] + s_left[i]·W[i,j]·s_right[j], b_re = b + f
template <typename T>
ParamMatrix<T> merge_rlrr(const ParamMatrix<T>& host, const RlrrParams<T>& p);
template <typename T>
ParamMatrix<T> merge_rankr_rlrr(const ParamMatrix<T>& host, const RankRRlrrParams<T>& p,
                                bool residual = true);
/// W_re = W ⊙ (1·sᵀ), b_re = b ⊙ s + f
template <typename T>
ParamMatrix<T> merge_ssf(const ParamMatrix<T>& host, const SsfParams<T>& p);
/// W_re = W + W_down·W_up
template <typename T>
ParamMatrix<T> merge_lora(const ParamMatrix<T>& host, const LoraParams<T>& p);

enum class CombineMode { weighted, sum_of_products };

template <typename T>
struct CombinedRlrr {
  std::optional<RlrrParams<T>> single;       // weighted mode
  std::optional<RankRRlrrParams<T>> ranked;  // sum-of-products mode
};

/// weighted: Ŝ = Σ w_i·s_i per side. sum-of-products: column i of S_left is
/// w_i·s_left_i and row i of S_right is s_right_i, so S_left·S_right =
/// Σ w_i·s_left_i·s_right_iᵀ. f̂ = Σ w_i·f_i in both modes.
template <typename T>
CombinedRlrr<T> combine_rlrr(const std::vector<RlrrParams<T>>& adapters,
                             const std::vector<double>& weights, CombineMode mode);

// Attachment.

/// Which closed-form term a tensor belongs to.
enum class CountGroup { method, layer_norm };

struct PlannedTensor {
  std::string name;
  Shape shape;
  bool trainable = true;
  CountGroup group = CountGroup::method;
  WeightSlot slot;
};

/// The tensors attach() would create for this spec, in name order.
std::vector<PlannedTensor> plan_attachment(const MethodSpec& spec, const ViTConfig& cfg);

template <typename T>
class AdapterSet {
 public:
  AdapterSet() = default;
  explicit AdapterSet(MethodSpec spec) : spec_(std::move(spec)) {}

  const MethodSpec& spec() const { return spec_; }
  void set_spec(MethodSpec spec) { spec_ = std::move(spec); }

  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  void put(const std::string& name, Tensor<T> value, bool trainable = true);
  bool trainable(const std::string& name) const { return fixed_.count(name) == 0; }

  const std::map<std::string, Tensor<T>>& tensors() const { return tensors_; }
  std::vector<vit::NamedTensor<T>> named();
  std::size_t trainable_count() const;
  bool empty() const { return tensors_.empty(); }

  RlrrParams<T> rlrr(const WeightSlot& slot) const;
  RankRRlrrParams<T> rankr(const WeightSlot& slot) const;
  LoraParams<T> lora(const WeightSlot& slot) const;
  SsfParams<T> ssf(const WeightSlot& slot) const;

 private:
  MethodSpec spec_;
  std::map<std::string, Tensor<T>> tensors_;
  std::set<std::string> fixed_;
};

/// Creates the method's tensors for a model geometry.
template <typename T>
AdapterSet<T> make_adapters(const MethodSpec& spec, const ViTConfig& cfg, Rng& rng);

/// Creates adapters and sets the model's frozen flags for the method: every
/// host tensor frozen except the head (when train_head); full fine-tuning
/// freezes nothing.
template <typename T>
AdapterSet<T> attach(const MethodSpec& spec, vit::Model<T>& model, Rng& rng);

/// Checks names and shapes against the plan; BindingError names the slot.
template <typename T>
void validate_adapters(const AdapterSet<T>& set, const ViTConfig& cfg);

/// Forward hooks that apply an adapter set.
template <typename T>
class PeftHooks : public vit::ForwardHooks<T> {
 public:
  explicit PeftHooks(const AdapterSet<T>& set) : set_(&set) {}

  ad::Var<T> linear(vit::ForwardContext<T>& ctx, const ParamMatrix<T>& host,
                    ad::Var<T> x) override;
  ad::Var<T> norm(vit::ForwardContext<T>& ctx, const ParamMatrix<T>& host,
                  ad::Var<T> x) override;
  ad::Var<T> block_output(vit::ForwardContext<T>& ctx, std::size_t layer, Block block,
                          ad::Var<T> y) override;
  ad::Var<T> enter_layer(vit::ForwardContext<T>& ctx, std::size_t layer, ad::Var<T> x,
                         std::size_t& tokens) override;
  ad::Var<T> leave_layer(vit::ForwardContext<T>& ctx, std::size_t layer, ad::Var<T> x,
                         std::size_t& tokens) override;

 private:
  ad::Var<T> param(vit::ForwardContext<T>& ctx, const std::string& name);
  const AdapterSet<T>* set_;
};

/// Logits of the adapted model.
template <typename T>
Tensor<T> predict(const vit::Model<T>& model, const AdapterSet<T>& set, const Tensor<T>& images);

/// Folds the adapter set into a copy of the model. ContractError for methods
/// with no linear re-parameterization (adapter, prompts).
template <typename T>
vit::Model<T> merge(const vit::Model<T>& model, const AdapterSet<T>& set);

/// Slot-wise combination of RLRR adapter sets (see combine_rlrr).
template <typename T>
AdapterSet<T> combine(const std::vector<AdapterSet<T>>& sets, const std::vector<double>& weights,
                      CombineMode mode);

// Counting.

struct CountItem {
  std::string label;
  std::size_t count = 0;
};

struct ParamCount {
  std::vector<CountItem> items;  // itemized by slot kind, then LN and head
  std::size_t method = 0;  // tensors the closed form describes; all non-head for full
  std::size_t layer_norm = 0;
  std::size_t head = 0;
  std::string formula;
  std::size_t closed_form = 0;
  bool closed_form_applies = false;

  std::size_t adapted() const { return method + layer_norm; }
  std::size_t total() const { return method + layer_norm + head; }
};

/// Closed-form and itemized trainable-parameter counts.
ParamCount count_trainable(const MethodSpec& spec, const ViTConfig& cfg);

}  // namespace rlrr::peft
