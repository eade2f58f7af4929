#include "rlrr/vit.hpp"

#include <array>
#include <cmath>

namespace rlrr::vit {

void ViTConfig::validate() const {
  std::vector<std::string> errs;
  if (image_h == 0 || image_w == 0 || channels == 0) errs.push_back("image dims must be positive");
  if (patch == 0) {
    errs.push_back("patch must be positive");
  } else if (image_h % patch != 0 || image_w % patch != 0) {
    errs.push_back("patch " + std::to_string(patch) + " does not divide image " +
                   std::to_string(image_h) + "x" + std::to_string(image_w));
  }
  if (dim == 0 || heads == 0) {
    errs.push_back("dim and heads must be positive");
  } else if (dim % heads != 0) {
    errs.push_back("heads " + std::to_string(heads) + " does not divide dim " + std::to_string(dim));
  }
  if (dim < 2) errs.push_back("dim must be at least 2 for LayerNorm");
  if (layers == 0) errs.push_back("layers must be positive");
  if (classes == 0) errs.push_back("classes must be positive");
  if (patch != 0 && image_h >= patch && image_w >= patch && tokens() == 0) errs.push_back("no tokens");
  if (errs.empty()) return;
  std::string msg = "invalid ViT config:";
  for (const auto& e : errs) msg += " " + e + ";";
  throw ConfigError(msg);
}

namespace {

constexpr std::array<const char*, 13> kKindNames = {
    "q", "k", "v", "o", "fc1", "fc2", "ln1", "ln2",
    "patch_proj", "pos_embed", "cls_token", "final_ln", "head"};

}  // namespace

const char* kind_name(SlotKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<SlotKind> parse_kind(const std::string& name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (name == kKindNames[i]) return static_cast<SlotKind>(i);
  return std::nullopt;
}

bool is_layer_kind(SlotKind kind) { return static_cast<int>(kind) <= static_cast<int>(SlotKind::ln2); }
bool is_norm_kind(SlotKind kind) {
  return kind == SlotKind::ln1 || kind == SlotKind::ln2 || kind == SlotKind::final_ln;
}
bool is_matrix_kind(SlotKind kind) { return static_cast<int>(kind) <= static_cast<int>(SlotKind::fc2); }

std::string WeightSlot::name() const {
  if (layer == kGlobal) return kind_name(kind);
  return "l" + std::to_string(layer) + "." + kind_name(kind);
}

WeightSlot WeightSlot::parse(const std::string& text) {
  const auto dot = text.find('.');
  if (dot == std::string::npos) {
    auto k = parse_kind(text);
    if (!k || is_layer_kind(*k)) throw ConfigError("unknown weight slot '" + text + "'");
    return global(*k);
  }
  const std::string head = text.substr(0, dot), tail = text.substr(dot + 1);
  auto k = parse_kind(tail);
  if (head.size() < 2 || head[0] != 'l' || !k || !is_layer_kind(*k) ||
      head.find_first_not_of("0123456789", 1) != std::string::npos) {
    throw ConfigError("unknown weight slot '" + text + "'");
  }
  return at(std::stoul(head.substr(1)), *k);
}

template <typename T>
Model<T>::Model(ViTConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.dim, h = cfg_.hidden();
  auto add = [&](WeightSlot slot, Shape w, Shape b, T fill = T(0)) {
    ParamMatrix<T> m{slot, Tensor<T>(std::move(w), fill), b.empty() ? Tensor<T>() : Tensor<T>(std::move(b))};
    index_[slot] = slots_.size();
    slots_.push_back(std::move(m));
  };
  add(WeightSlot::global(SlotKind::patch_proj), {cfg_.patch_dim(), d}, {d});
  add(WeightSlot::global(SlotKind::cls_token), {1, d}, {});
  add(WeightSlot::global(SlotKind::pos_embed), {cfg_.tokens() + 1, d}, {});
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    add(WeightSlot::at(l, SlotKind::ln1), {d}, {d}, T(1));
    for (SlotKind k : {SlotKind::q, SlotKind::k, SlotKind::v, SlotKind::o})
      add(WeightSlot::at(l, k), {d, d}, {d});
    add(WeightSlot::at(l, SlotKind::ln2), {d}, {d}, T(1));
    add(WeightSlot::at(l, SlotKind::fc1), {d, h}, {h});
    add(WeightSlot::at(l, SlotKind::fc2), {h, d}, {d});
  }
  add(WeightSlot::global(SlotKind::final_ln), {d}, {d}, T(1));
  add(WeightSlot::global(SlotKind::head), {d, cfg_.classes}, {cfg_.classes});
}

template <typename T>
ParamMatrix<T>& Model<T>::at(const WeightSlot& slot) {
  auto it = index_.find(slot);
  if (it == index_.end()) throw BindingError("model has no slot '" + slot.name() + "'");
  return slots_[it->second];
}

template <typename T>
const ParamMatrix<T>& Model<T>::at(const WeightSlot& slot) const {
  return const_cast<Model*>(this)->at(slot);
}

template <typename T>
void Model<T>::set_frozen(bool frozen) {
  for (auto& s : slots_) s.frozen = frozen;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::tensors() {
  std::vector<NamedTensor<T>> out;
  for (auto& s : slots_) {
    out.push_back({s.slot.name() + ".w", &s.w, !s.frozen});
    if (s.has_bias()) out.push_back({s.slot.name() + ".b", &s.b, !s.frozen});
  }
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.count();
  return n;
}

template <typename T>
Model<T> init_random(const ViTConfig& cfg, Rng& rng) {
  Model<T> m(cfg);
  for (auto& s : m.slots()) {
    switch (s.slot.kind) {
      case SlotKind::cls_token:
      case SlotKind::pos_embed:
        s.w = rng.normal_tensor<T>(s.w.shape(), 0.02);
        break;
      case SlotKind::ln1:
      case SlotKind::ln2:
      case SlotKind::final_ln:
      case SlotKind::head:
        break;
      default:
        s.w = rng.normal_tensor<T>(s.w.shape(), 1.0 / std::sqrt(double(s.w.rows())));
        break;
    }
  }
  return m;
}

template <typename T>
ad::Var<T> ForwardContext<T>::bind(const std::string& name, const Tensor<T>& value, bool trainable) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ad::Var<T> v = tape_->leaf(value, trainable, name);
  bound_.emplace(name, v);
  return v;
}

template <typename T>
ad::Var<T> ForwardContext<T>::maybe_dropout(ad::Var<T> x) {
  if (!training || dropout == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout requested without a generator");
  return ad::dropout(x, dropout, *rng);
}

template <typename T>
ad::Var<T> ForwardHooks<T>::linear(ForwardContext<T>& ctx, const ParamMatrix<T>& host,
                                   ad::Var<T> x) {
  return ad::add_row(ad::matmul(x, ctx.weight(host)), ctx.bias(host));
}

template <typename T>
ad::Var<T> ForwardHooks<T>::norm(ForwardContext<T>& ctx, const ParamMatrix<T>& host, ad::Var<T> x) {
  return ad::layer_norm(x, ctx.weight(host), ctx.bias(host));
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const ViTConfig& cfg) {
  const std::size_t per = cfg.image_size();
  if (images.size() == 0 || images.size() % per != 0) {
    throw ConfigError("images " + shape_str(images.shape()) + " do not hold whole " +
                      std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                      std::to_string(cfg.channels) + " images");
  }
  if (images.rank() >= 2 && images.rank() != 3 && images.size() / images.shape()[0] != per) {
    throw ConfigError("image rows " + shape_str(images.shape()) + " do not match config");
  }
  const std::size_t batch = images.size() / per, p = cfg.patch, c = cfg.channels;
  const std::size_t gw = cfg.image_w / p, n = cfg.tokens(), pd = cfg.patch_dim();
  Tensor<T> out(Shape{batch * n, pd});
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t py = t / gw, px = t % gw;
      T* dst = &out.at(s * n + t, 0);
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t row = py * p + y, col = px * p + x;
            *dst++ = images[s * per + (row * cfg.image_w + col) * c + ch];
          }
    }
  return out;
}

template <typename T>
ad::Var<T> embed(ForwardContext<T>& ctx, const Model<T>& model, const Tensor<T>& images,
                 ForwardHooks<T>& hooks) {
  const ViTConfig& cfg = model.config();
  auto patches = ctx.tape().constant(patchify(images, cfg));
  auto proj = hooks.linear(ctx, model.at(WeightSlot::global(SlotKind::patch_proj)), patches);
  const auto& cls = model.at(WeightSlot::global(SlotKind::cls_token));
  const auto& pos = model.at(WeightSlot::global(SlotKind::pos_embed));
  auto with_cls = ad::insert_tokens(proj, ctx.weight(cls), cfg.tokens(), 0);
  return ad::add_tiled(with_cls, ctx.weight(pos), cfg.tokens() + 1);
}

template <typename T>
ad::Var<T> layer(ForwardContext<T>& ctx, const Model<T>& model, std::size_t l, ad::Var<T> x,
                 std::size_t& tokens, ForwardHooks<T>& hooks) {
  const ViTConfig& cfg = model.config();
  auto slot = [&](SlotKind k) -> const ParamMatrix<T>& { return model.at(WeightSlot::at(l, k)); };
  x = hooks.enter_layer(ctx, l, x, tokens);

  auto h = hooks.norm(ctx, slot(SlotKind::ln1), x);
  auto q = hooks.linear(ctx, slot(SlotKind::q), h);
  auto k = hooks.linear(ctx, slot(SlotKind::k), h);
  auto v = hooks.linear(ctx, slot(SlotKind::v), h);
  auto a = ad::attention(q, k, v, tokens, cfg.heads);
  auto o = ctx.maybe_dropout(hooks.linear(ctx, slot(SlotKind::o), a));
  x = ad::add(x, hooks.block_output(ctx, l, Block::mha, o));

  auto h2 = hooks.norm(ctx, slot(SlotKind::ln2), x);
  auto f1 = ctx.maybe_dropout(ad::gelu(hooks.linear(ctx, slot(SlotKind::fc1), h2)));
  auto f2 = hooks.linear(ctx, slot(SlotKind::fc2), f1);
  x = ad::add(x, hooks.block_output(ctx, l, Block::ffn, f2));

  return hooks.leave_layer(ctx, l, x, tokens);
}

template <typename T>
ad::Var<T> features(ForwardContext<T>& ctx, const Model<T>& model, const Tensor<T>& images,
                    ForwardHooks<T>& hooks) {
  auto x = embed(ctx, model, images, hooks);
  std::size_t tokens = model.config().tokens() + 1;
  for (std::size_t l = 0; l < model.config().layers; ++l) x = layer(ctx, model, l, x, tokens, hooks);
  auto cls = ad::strided_rows(x, tokens, 0);
  return hooks.norm(ctx, model.at(WeightSlot::global(SlotKind::final_ln)), cls);
}

template <typename T>
ad::Var<T> logits(ForwardContext<T>& ctx, const Model<T>& model, const Tensor<T>& images,
                  ForwardHooks<T>& hooks) {
  auto f = features(ctx, model, images, hooks);
  return hooks.linear(ctx, model.at(WeightSlot::global(SlotKind::head)), f);
}

template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& images, ForwardHooks<T>& hooks) {
  ad::Tape<T> tape;
  ForwardContext<T> ctx(tape);
  return logits(ctx, model, images, hooks).value();
}

template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& images) {
  ForwardHooks<T> hooks;
  return predict(model, images, hooks);
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const Model<T>& model) {
  if (image.size() != model.config().image_size()) {
    throw ConfigError("patch_embed: image " + shape_str(image.shape()) + " does not match " +
                      std::to_string(model.config().image_h) + "x" +
                      std::to_string(model.config().image_w) + "x" +
                      std::to_string(model.config().channels));
  }
  ad::Tape<T> tape;
  ForwardContext<T> ctx(tape);
  ForwardHooks<T> hooks;
  return embed(ctx, model, image, hooks).value();
}

template <typename T>
Tensor<T> attention_head(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
                         const Tensor<T>& wv) {
  ad::Tape<T> tape;
  auto xv = tape.constant(x);
  auto q = ad::matmul(xv, tape.constant(wq));
  auto k = ad::matmul(xv, tape.constant(wk));
  auto v = ad::matmul(xv, tape.constant(wv));
  return ad::attention(q, k, v, x.rows(), 1).value();
}

template <typename T>
Tensor<T> mha(const Tensor<T>& x, const Model<T>& model, std::size_t l) {
  ad::Tape<T> tape;
  ForwardContext<T> ctx(tape);
  ForwardHooks<T> hooks;
  auto xv = tape.constant(x);
  auto slot = [&](SlotKind k) -> const ParamMatrix<T>& { return model.at(WeightSlot::at(l, k)); };
  auto q = hooks.linear(ctx, slot(SlotKind::q), xv);
  auto k = hooks.linear(ctx, slot(SlotKind::k), xv);
  auto v = hooks.linear(ctx, slot(SlotKind::v), xv);
  auto a = ad::attention(q, k, v, x.rows(), model.config().heads);
  return hooks.linear(ctx, slot(SlotKind::o), a).value();
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const Model<T>& model, std::size_t l) {
  ad::Tape<T> tape;
  ForwardContext<T> ctx(tape);
  ForwardHooks<T> hooks;
  auto h = ad::gelu(hooks.linear(ctx, model.at(WeightSlot::at(l, SlotKind::fc1)), tape.constant(x)));
  return hooks.linear(ctx, model.at(WeightSlot::at(l, SlotKind::fc2)), h).value();
}

template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& x, const Model<T>& model, std::size_t l) {
  ad::Tape<T> tape;
  ForwardContext<T> ctx(tape);
  ForwardHooks<T> hooks;
  std::size_t tokens = x.rows();
  return layer(ctx, model, l, tape.constant(x), tokens, hooks).value();
}

template <typename T>
Tensor<T> forward(const Tensor<T>& image, const Model<T>& model) {
  if (image.size() != model.config().image_size()) {
    throw ConfigError("forward: image " + shape_str(image.shape()) + " does not match config");
  }
  Tensor<T> out = predict(model, image);
  return out.reshaped({model.config().classes});
}

#define RLRR_VIT_INSTANTIATE(T)                                                                 \
  template class Model<T>;                                                                      \
  template class ForwardContext<T>;                                                             \
  template class ForwardHooks<T>;                                                               \
  template Model<T> init_random(const ViTConfig&, Rng&);                                        \
  template Tensor<T> patchify(const Tensor<T>&, const ViTConfig&);                              \
  template ad::Var<T> embed(ForwardContext<T>&, const Model<T>&, const Tensor<T>&,              \
                            ForwardHooks<T>&);                                                  \
  template ad::Var<T> layer(ForwardContext<T>&, const Model<T>&, std::size_t, ad::Var<T>,       \
                            std::size_t&, ForwardHooks<T>&);                                    \
  template ad::Var<T> features(ForwardContext<T>&, const Model<T>&, const Tensor<T>&,           \
                               ForwardHooks<T>&);                                               \
  template ad::Var<T> logits(ForwardContext<T>&, const Model<T>&, const Tensor<T>&,             \
                             ForwardHooks<T>&);                                                 \
  template Tensor<T> predict(const Model<T>&, const Tensor<T>&);                                \
  template Tensor<T> predict(const Model<T>&, const Tensor<T>&, ForwardHooks<T>&);              \
  template Tensor<T> patch_embed(const Tensor<T>&, const Model<T>&);                            \
  template Tensor<T> attention_head(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                    const Tensor<T>&);                                          \
  template Tensor<T> mha(const Tensor<T>&, const Model<T>&, std::size_t);                       \
  template Tensor<T> ffn(const Tensor<T>&, const Model<T>&, std::size_t);                       \
  template Tensor<T> encoder_layer(const Tensor<T>&, const Model<T>&, std::size_t);             \
  template Tensor<T> forward(const Tensor<T>&, const Model<T>&);

RLRR_VIT_INSTANTIATE(float)
RLRR_VIT_INSTANTIATE(double)

}  // namespace rlrr::vit
