#pragma once

// Reverse-mode differentiation over a per-forward tape. A Tape owns every
// intermediate value; Var is a cheap handle into it. Nodes are appended in
// execution order, so the tape is topologically sorted by construction.
// Tapes share no state and may run on separate threads.

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rlrr/random.hpp"
#include "rlrr/tensor.hpp"

namespace rlrr::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
};

/// Gradients of one backward pass, keyed by leaf name and by leaf id.
template <typename T>
class Gradients {
 public:
  bool has(const std::string& name) const { return by_name_.count(name) > 0; }
  const Tensor<T>& operator[](const std::string& name) const;
  const Tensor<T>& of(const Var<T>& leaf) const;
  const std::map<std::string, Tensor<T>>& named() const { return by_name_; }

 private:
  friend class Tape<T>;
  std::map<std::string, Tensor<T>> by_name_;
  std::map<std::size_t, Tensor<T>> by_id_;
};

template <typename T>
class Tape {
 public:
  /// Backward rule of one node: reads the node's upstream gradient and
  /// parent values through the tape, accumulates into parents.
  using Rule = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad, std::string name = {});
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends a computed node. The rule is dropped when no parent needs grad.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> parents, Rule rule);

  const Tensor<T>& value(std::size_t id) const;
  const Tensor<T>& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const;
  const std::vector<std::size_t>& parents(std::size_t id) const;

  /// grad(id) += g, when id requires grad.
  void accumulate(std::size_t id, const Tensor<T>& g);
  void accumulate(std::size_t id, Tensor<T>&& g);

  /// Runs the single backward pass of this tape from a scalar loss, returns
  /// gradients for every requires_grad leaf (zeros when uninfluenced) and
  /// clears the tape.
  Gradients<T> backward(const Var<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> parents;
    Rule rule;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
  };
  Node& node(std::size_t id);
  const Node& node(std::size_t id) const;

  std::vector<Node> nodes_;
};

// Primitive operations. All inputs must live on the same tape.

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
/// a[m×n] + r broadcast over rows; r has n elements.
template <typename T> Var<T> add_row(Var<T> a, Var<T> r);
/// a[m×n] ⊙ (1·rᵀ): column j scaled by r[j].
template <typename T> Var<T> mul_row(Var<T> a, Var<T> r);
/// a[m×n] ⊙ (c·1ᵀ): row i scaled by c[i].
template <typename T> Var<T> mul_col(Var<T> a, Var<T> c);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> transpose(Var<T> a);

template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> softmax_rows(Var<T> x);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6));

template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_rows(Var<T> a, std::size_t r0, std::size_t r1);
template <typename T> Var<T> slice_cols(Var<T> a, std::size_t c0, std::size_t c1);

/// Rows offset, offset+stride, offset+2·stride, ... of a.
template <typename T>
Var<T> strided_rows(Var<T> a, std::size_t stride, std::size_t offset);

/// x holds samples of `tokens` rows each; appends the rows of `extra` after
/// every sample, giving samples of tokens + rows(extra) rows.
template <typename T>
Var<T> append_tokens(Var<T> x, Var<T> extra, std::size_t tokens);

/// Inserts the rows of `extra` at row `at` of every `tokens`-row sample.
template <typename T>
Var<T> insert_tokens(Var<T> x, Var<T> extra, std::size_t tokens, std::size_t at);

/// x holds samples of `tokens` rows; adds tile[tokens×D] to every sample.
template <typename T>
Var<T> add_tiled(Var<T> x, Var<T> tile, std::size_t tokens);

/// Keeps the first `keep` rows of every `tokens`-row sample.
template <typename T>
Var<T> keep_tokens(Var<T> x, std::size_t tokens, std::size_t keep);

/// Multi-head scaled dot-product attention over stacked samples. q, k, v are
/// [B·tokens × heads·head_dim]; head h uses columns [h·head_dim, (h+1)·head_dim)
/// and attention never crosses sample boundaries. Output has q's shape.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t tokens,
                 std::size_t heads);

/// Attention probabilities softmax(q kᵀ/√dh) for one sample and one head.
template <typename T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k);

/// Inverted dropout; identity when p == 0.
template <typename T> Var<T> dropout(Var<T> x, double p, Rng& rng);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);

/// Mean softmax cross-entropy of logits[B×C] against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels);

// Eager value helpers shared with tests and non-tape code.
template <typename T> T gelu_value(T x);
template <typename T> Tensor<T> softmax_rows_value(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm_value(const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, T eps = T(1e-6));

}  // namespace rlrr::ad
