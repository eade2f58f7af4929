#pragma once

// Toy Vision Transformer: patch embedding, pre-norm encoder layers, class
// token head. Every tensor lives in a named ParamMatrix slot so PEFT methods
// can freeze, wrap and merge them.

#include <compare>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rlrr/autodiff.hpp"
#include "rlrr/random.hpp"
#include "rlrr/tensor.hpp"

namespace rlrr::vit {

struct ViTConfig {
  std::size_t image_h = 8;
  std::size_t image_w = 8;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t classes = 10;

  std::size_t head_dim() const { return dim / heads; }
  /// N = H·W/P²
  std::size_t tokens() const { return (image_h / patch) * (image_w / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t image_size() const { return image_h * image_w * channels; }
  std::size_t hidden() const { return 4 * dim; }

  /// Throws ConfigError listing every violated constraint.
  void validate() const;

  bool operator==(const ViTConfig&) const = default;
};

enum class SlotKind {
  q, k, v, o, fc1, fc2, ln1, ln2, patch_proj, pos_embed, cls_token, final_ln, head
};

const char* kind_name(SlotKind kind);
std::optional<SlotKind> parse_kind(const std::string& name);
bool is_layer_kind(SlotKind kind);
bool is_norm_kind(SlotKind kind);
/// q, k, v, o, fc1, fc2: the per-layer weight matrices.
bool is_matrix_kind(SlotKind kind);

struct WeightSlot {
  static constexpr std::size_t kGlobal = std::numeric_limits<std::size_t>::max();

  std::size_t layer = kGlobal;
  SlotKind kind = SlotKind::head;

  static WeightSlot at(std::size_t layer, SlotKind kind) { return {layer, kind}; }
  static WeightSlot global(SlotKind kind) { return {kGlobal, kind}; }

  /// "l3.fc1" for per-layer slots, "head" for global ones.
  std::string name() const;
  /// Inverse of name(); throws ConfigError on unknown text.
  static WeightSlot parse(const std::string& text);

  auto operator<=>(const WeightSlot&) const = default;
};

/// One weight matrix (or norm/embedding tensor) with its bias. Norm slots hold
/// gamma in w and beta in b; embeddings have no bias (empty b).
template <typename T>
struct ParamMatrix {
  WeightSlot slot;
  Tensor<T> w;
  Tensor<T> b;
  bool frozen = false;

  bool has_bias() const { return !b.empty(); }
  std::size_t count() const { return w.size() + b.size(); }
};

/// Reference to one named tensor of a model or adapter set.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* value;
  bool trainable;
};

template <typename T>
class Model {
 public:
  /// All tensors zero except LayerNorm gammas (one).
  explicit Model(ViTConfig cfg);

  const ViTConfig& config() const { return cfg_; }

  std::vector<ParamMatrix<T>>& slots() { return slots_; }
  const std::vector<ParamMatrix<T>>& slots() const { return slots_; }

  bool has(const WeightSlot& slot) const { return index_.count(slot) > 0; }
  /// Throws BindingError naming the slot when absent.
  ParamMatrix<T>& at(const WeightSlot& slot);
  const ParamMatrix<T>& at(const WeightSlot& slot) const;

  void set_frozen(bool frozen);

  /// "<slot>.w" / "<slot>.b" views in canonical slot order.
  std::vector<NamedTensor<T>> tensors();
  std::size_t parameter_count() const;

  template <typename U>
  Model<U> cast() const {
    Model<U> out(cfg_);
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      out.slots()[i].w = slots_[i].w.template cast<U>();
      out.slots()[i].b = slots_[i].b.template cast<U>();
      out.slots()[i].frozen = slots_[i].frozen;
    }
    return out;
  }

 private:
  ViTConfig cfg_;
  std::vector<ParamMatrix<T>> slots_;
  std::map<WeightSlot, std::size_t> index_;
};

/// Seeded stand-in for pretrained weights: matrices ~ N(0, 1/fan_in), biases
/// zero, LayerNorm (1, 0), class token and positions ~ N(0, 0.02²), head zero.
template <typename T>
Model<T> init_random(const ViTConfig& cfg, Rng& rng);

enum class Block { mha, ffn };

/// Per-forward state: the tape, leaf bindings and train-time switches.
template <typename T>
class ForwardContext {
 public:
  explicit ForwardContext(ad::Tape<T>& tape) : tape_(&tape) {}

  ad::Tape<T>& tape() { return *tape_; }

  /// Leaf for a named tensor, created once per context.
  ad::Var<T> bind(const std::string& name, const Tensor<T>& value, bool trainable);
  /// Pre-binds a name to an existing node, e.g. a gradient checker's leaf.
  void provide(const std::string& name, ad::Var<T> v) { bound_[name] = v; }
  ad::Var<T> weight(const ParamMatrix<T>& m) {
    return bind(m.slot.name() + ".w", m.w, !m.frozen);
  }
  ad::Var<T> bias(const ParamMatrix<T>& m) {
    return bind(m.slot.name() + ".b", m.b, !m.frozen);
  }

  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  ad::Var<T> maybe_dropout(ad::Var<T> x);

 private:
  ad::Tape<T>* tape_;
  std::map<std::string, ad::Var<T>> bound_;
};

/// Interception points for PEFT methods. The defaults compute the plain
/// frozen-backbone forward.
template <typename T>
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;

  /// x·W + b for a matrix slot.
  virtual ad::Var<T> linear(ForwardContext<T>& ctx, const ParamMatrix<T>& host, ad::Var<T> x);
  /// LayerNorm with the slot's gamma and beta.
  virtual ad::Var<T> norm(ForwardContext<T>& ctx, const ParamMatrix<T>& host, ad::Var<T> x);
  /// Branch output of a block, before the residual add.
  virtual ad::Var<T> block_output(ForwardContext<T>&, std::size_t /*layer*/, Block,
                                  ad::Var<T> y) {
    return y;
  }
  /// Token rewrites around each layer; `tokens` is the per-sample row count.
  virtual ad::Var<T> enter_layer(ForwardContext<T>&, std::size_t /*layer*/, ad::Var<T> x,
                                 std::size_t& /*tokens*/) {
    return x;
  }
  virtual ad::Var<T> leave_layer(ForwardContext<T>&, std::size_t /*layer*/, ad::Var<T> x,
                                 std::size_t& /*tokens*/) {
    return x;
  }
};

/// Rows of `images` are samples laid out H×W×C row-major. Returns
/// [B·N × P²C] with patches in row-major patch order, each flattened the same
/// way.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const ViTConfig& cfg);

// Graph builders over a batch of stacked samples.

template <typename T>
ad::Var<T> embed(ForwardContext<T>& ctx, const Model<T>& model, const Tensor<T>& images,
                 ForwardHooks<T>& hooks);
template <typename T>
ad::Var<T> layer(ForwardContext<T>& ctx, const Model<T>& model, std::size_t l, ad::Var<T> x,
                 std::size_t& tokens, ForwardHooks<T>& hooks);
/// Final-LN'd class tokens, [B × D].
template <typename T>
ad::Var<T> features(ForwardContext<T>& ctx, const Model<T>& model, const Tensor<T>& images,
                    ForwardHooks<T>& hooks);
/// [B × classes]
template <typename T>
ad::Var<T> logits(ForwardContext<T>& ctx, const Model<T>& model, const Tensor<T>& images,
                  ForwardHooks<T>& hooks);

/// Inference logits of a batch with default hooks, [B × classes].
template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& images);
template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& images, ForwardHooks<T>& hooks);

// Eager single-sample forms of the building blocks.

/// image is H×W×C (any shape with that many elements). Returns (N+1)×D.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const Model<T>& model);

/// softmax((XWq)(XWk)ᵀ/√D_h)·XWv
template <typename T>
Tensor<T> attention_head(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
                         const Tensor<T>& wv);

template <typename T>
Tensor<T> mha(const Tensor<T>& x, const Model<T>& model, std::size_t l);
template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const Model<T>& model, std::size_t l);
/// x' = MHA(LN(x)) + x; out = FFN(LN(x')) + x'
template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& x, const Model<T>& model, std::size_t l);
/// Logits of one image, [classes].
template <typename T>
Tensor<T> forward(const Tensor<T>& image, const Model<T>& model);

}  // namespace rlrr::vit
