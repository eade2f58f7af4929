#include "rlrr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rlrr/kernels.hpp"

namespace rlrr::ad {

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(id);
}

template <typename T>
const Tensor<T>& Gradients<T>::operator[](const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ContractError("no gradient for '" + name + "'");
  return it->second;
}

template <typename T>
const Tensor<T>& Gradients<T>::of(const Var<T>& leaf) const {
  auto it = by_id_.find(leaf.id);
  if (it == by_id_.end()) throw ContractError("no gradient for leaf");
  return it->second;
}

template <typename T>
typename Tape<T>::Node& Tape<T>::node(std::size_t id) {
  if (id >= nodes_.size()) throw ContractError("variable is not on this tape");
  return nodes_[id];
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(std::size_t id) const {
  if (id >= nodes_.size()) throw ContractError("variable is not on this tape");
  return nodes_[id];
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad, std::string name) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<std::size_t> parents,
                       Rule rule) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                [&](std::size_t p) { return node(p).requires_grad; });
  if (n.requires_grad) n.rule = std::move(rule);
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  return node(id).value;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(std::size_t id) const {
  return node(id).grad;
}

template <typename T>
bool Tape<T>::requires_grad(std::size_t id) const {
  return node(id).requires_grad;
}

template <typename T>
const std::vector<std::size_t>& Tape<T>::parents(std::size_t id) const {
  return node(id).parents;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  Node& n = node(id);
  if (!n.requires_grad) return;
  if (n.grad.empty() && n.grad.shape().empty()) {
    n.grad = Tensor<T>(n.value.shape(), std::vector<T>(g.data().begin(), g.data().end()));
    return;
  }
  if (g.size() != n.grad.size()) {
    throw DimensionError("gradient shape " + shape_str(g.shape()) +
                         " does not match " + shape_str(n.value.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, Tensor<T>&& g) {
  Node& n = node(id);
  if (!n.requires_grad) return;
  if (n.grad.empty() && n.grad.shape().empty() && g.size() == n.value.size()) {
    n.grad = std::move(g).reshaped(n.value.shape());
    return;
  }
  accumulate(id, static_cast<const Tensor<T>&>(g));
}

template <typename T>
Gradients<T> Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape != this) throw ContractError("loss is not on this tape");
  Node& root = node(loss.id);
  if (root.value.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(root.value.shape()));
  }
  if (root.requires_grad) root.grad = Tensor<T>(root.value.shape(), T(1));
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.rule || n.grad.size() == 0) continue;
    n.rule(*this, id);
  }
  Gradients<T> out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (!n.is_leaf || !n.requires_grad) continue;
    Tensor<T> g = n.grad.size() == n.value.size() ? std::move(n.grad)
                                                  : Tensor<T>(n.value.shape());
    if (!n.name.empty()) out.by_name_[n.name] = g;
    out.by_id_.emplace(id, std::move(g));
  }
  clear();
  return out;
}

namespace {

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (!a.tape || a.tape != b.tape) throw ContractError("operands on different tapes");
  return *a.tape;
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
T normal_cdf(T x) {
  return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T normal_pdf(T x) {
  return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = same_tape(a, b);
  Tensor<T> out = rlrr::matmul(a.value(), b.value());
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (t.requires_grad(a)) {
      Tensor<T> da(av.shape());
      kernels::ops<T>().gemm_nt(m, n, k, g.data().data(), bv.data().data(),
                                da.data().data());
      t.accumulate(a, std::move(da));
    }
    if (t.requires_grad(b)) {
      Tensor<T> db = rlrr::matmul(rlrr::transpose(av), g.reshaped({m, n}));
      t.accumulate(b, std::move(db));
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = same_tape(a, b);
  require_same_shape(a, b, "add");
  return t.record(rlrr::add(a.value(), b.value()), {a.id, b.id},
                  [a = a.id, b = b.id](Tape<T>& t, std::size_t self) {
                    t.accumulate(a, t.grad(self));
                    t.accumulate(b, t.grad(self));
                  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& t = same_tape(a, b);
  require_same_shape(a, b, "sub");
  return t.record(rlrr::sub(a.value(), b.value()), {a.id, b.id},
                  [a = a.id, b = b.id](Tape<T>& t, std::size_t self) {
                    t.accumulate(a, t.grad(self));
                    if (t.requires_grad(b)) t.accumulate(b, rlrr::scaled(t.grad(self), T(-1)));
                  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& t = same_tape(a, b);
  require_same_shape(a, b, "mul");
  return t.record(rlrr::hadamard(a.value(), b.value()), {a.id, b.id},
                  [a = a.id, b = b.id](Tape<T>& t, std::size_t self) {
                    const Tensor<T>& g = t.grad(self);
                    if (t.requires_grad(a)) t.accumulate(a, rlrr::hadamard(g, t.value(b)));
                    if (t.requires_grad(b)) t.accumulate(b, rlrr::hadamard(g, t.value(a)));
                  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> r) {
  Tape<T>& t = same_tape(a, r);
  const Tensor<T>& av = a.value();
  const Tensor<T>& rv = r.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (rv.size() != n) {
    throw DimensionError("add_row: row vector " + shape_str(rv.shape()) +
                         " does not broadcast over " + shape_str(av.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = out[i * n + j] + rv[j];
  return t.record(std::move(out), {a.id, r.id},
                  [a = a.id, r = r.id, m, n](Tape<T>& t, std::size_t self) {
                    const Tensor<T>& g = t.grad(self);
                    t.accumulate(a, g);
                    if (t.requires_grad(r)) {
                      Tensor<T> dr(t.value(r).shape());
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dr[j] += g[i * n + j];
                      t.accumulate(r, std::move(dr));
                    }
                  });
}

template <typename T>
Var<T> mul_row(Var<T> a, Var<T> r) {
  Tape<T>& t = same_tape(a, r);
  const Tensor<T>& av = a.value();
  const Tensor<T>& rv = r.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (rv.size() != n) {
    throw DimensionError("mul_row: row vector " + shape_str(rv.shape()) +
                         " does not broadcast over " + shape_str(av.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= rv[j];
  return t.record(std::move(out), {a.id, r.id},
                  [a = a.id, r = r.id, m, n](Tape<T>& t, std::size_t self) {
                    const Tensor<T>& g = t.grad(self);
                    const Tensor<T>& av = t.value(a);
                    const Tensor<T>& rv = t.value(r);
                    if (t.requires_grad(a)) {
                      Tensor<T> da(av.shape());
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[i * n + j] * rv[j];
                      t.accumulate(a, std::move(da));
                    }
                    if (t.requires_grad(r)) {
                      Tensor<T> dr(rv.shape());
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dr[j] += g[i * n + j] * av[i * n + j];
                      t.accumulate(r, std::move(dr));
                    }
                  });
}

template <typename T>
Var<T> mul_col(Var<T> a, Var<T> c) {
  Tape<T>& t = same_tape(a, c);
  const Tensor<T>& av = a.value();
  const Tensor<T>& cv = c.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (cv.size() != m) {
    throw DimensionError("mul_col: column vector " + shape_str(cv.shape()) +
                         " does not broadcast over " + shape_str(av.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= cv[i];
  return t.record(std::move(out), {a.id, c.id},
                  [a = a.id, c = c.id, m, n](Tape<T>& t, std::size_t self) {
                    const Tensor<T>& g = t.grad(self);
                    const Tensor<T>& av = t.value(a);
                    const Tensor<T>& cv = t.value(c);
                    if (t.requires_grad(a)) {
                      Tensor<T> da(av.shape());
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[i * n + j] * cv[i];
                      t.accumulate(a, std::move(da));
                    }
                    if (t.requires_grad(c)) {
                      Tensor<T> dc(cv.shape());
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dc[i] += g[i * n + j] * av[i * n + j];
                      t.accumulate(c, std::move(dc));
                    }
                  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return a.tape->record(rlrr::scaled(a.value(), s), {a.id},
                        [a = a.id, s](Tape<T>& t, std::size_t self) {
                          t.accumulate(a, rlrr::scaled(t.grad(self), s));
                        });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  return a.tape->record(a.value().reshaped(std::move(shape)), {a.id},
                        [a = a.id](Tape<T>& t, std::size_t self) {
                          t.accumulate(a, t.grad(self).reshaped(t.value(a).shape()));
                        });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  return a.tape->record(rlrr::transpose(a.value()), {a.id},
                        [a = a.id](Tape<T>& t, std::size_t self) {
                          t.accumulate(a, rlrr::transpose(t.grad(self)).reshaped(t.value(a).shape()));
                        });
}

template <typename T>
T gelu_value(T x) {
  return x * normal_cdf(x);
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v = gelu_value(v);
  return x.tape->record(std::move(out), {x.id}, [x = x.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(x);
    Tensor<T> dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T z = xv[i];
      dx[i] = g[i] * (normal_cdf(z) + z * normal_pdf(z));
    }
    t.accumulate(x, std::move(dx));
  });
}

template <typename T>
Tensor<T> softmax_rows_value(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T* out = y.data().data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - mx);
      s += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= s;
  }
  return y;
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  return x.tape->record(softmax_rows_value(x.value()), {x.id},
                        [x = x.id](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& g = t.grad(self);
                          const Tensor<T>& y = t.value(self);
                          const std::size_t m = y.rows(), n = y.cols();
                          Tensor<T> dx(y.shape());
                          for (std::size_t i = 0; i < m; ++i) {
                            T dotp = 0;
                            for (std::size_t j = 0; j < n; ++j) dotp += g[i * n + j] * y[i * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                              dx[i * n + j] = y[i * n + j] * (g[i * n + j] - dotp);
                          }
                          t.accumulate(x, std::move(dx));
                        });
}

namespace {

template <typename T>
void layer_norm_check(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, T eps) {
  const std::size_t d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: feature width must be at least 2");
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) +
                         "/" + shape_str(beta.shape()) + " do not match width " +
                         std::to_string(d));
  }
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
}

// Normalized rows and per-row inverse std.
template <typename T>
std::pair<Tensor<T>, std::vector<T>> normalize_rows(const Tensor<T>& x, T eps) {
  const std::size_t m = x.rows(), d = x.cols();
  Tensor<T> xhat(x.shape());
  std::vector<T> inv(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    inv[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) xhat[i * d + j] = (row[j] - mu) * inv[i];
  }
  return {std::move(xhat), std::move(inv)};
}

}  // namespace

template <typename T>
Tensor<T> layer_norm_value(const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, T eps) {
  layer_norm_check(x, gamma, beta, eps);
  auto [y, inv] = normalize_rows(x, eps);
  const std::size_t m = x.rows(), d = x.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = y[i * d + j] * gamma[j] + beta[j];
  return y;
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Tape<T>& t = same_tape(x, gamma);
  layer_norm_check(x.value(), gamma.value(), beta.value(), eps);
  auto [xhat, inv] = normalize_rows(x.value(), eps);
  const std::size_t m = xhat.rows(), d = xhat.cols();
  Tensor<T> y(xhat.shape());
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
  return t.record(
      std::move(y), {x.id, gamma.id, beta.id},
      [x = x.id, gm = gamma.id, bt = beta.id, xhat = std::move(xhat),
       inv = std::move(inv), m, d](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gv = t.value(gm);
        if (t.requires_grad(x)) {
          Tensor<T> dx(t.value(x).shape());
          std::vector<T> dxh(d);
          for (std::size_t i = 0; i < m; ++i) {
            T s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dxh[j] = g[i * d + j] * gv[j];
              s1 += dxh[j];
              s2 += dxh[j] * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              dx[i * d + j] = inv[i] / T(d) *
                              (T(d) * dxh[j] - s1 - xhat[i * d + j] * s2);
            }
          }
          t.accumulate(x, std::move(dx));
        }
        if (t.requires_grad(gm)) {
          Tensor<T> dg(gv.shape());
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xhat[i * d + j];
          t.accumulate(gm, std::move(dg));
        }
        if (t.requires_grad(bt)) {
          Tensor<T> db(t.value(bt).shape());
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
          t.accumulate(bt, std::move(db));
        }
      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape<T>& t = *parts.front().tape;
  const std::size_t n = parts.front().value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ContractError("concat_rows: operands on different tapes");
    if (p.value().cols() != n) {
      throw DimensionError("concat_rows: column counts differ (" + std::to_string(n) +
                           " vs " + shape_str(p.shape()) + ")");
    }
    ids.push_back(p.id);
    offsets.push_back(rows);
    rows += p.value().rows();
  }
  Tensor<T> out(Shape{rows, n});
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(offsets[&p - parts.data()] * n));
  }
  return t.record(std::move(out), ids, [ids, offsets, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t q = 0; q < ids.size(); ++q) {
      if (!t.requires_grad(ids[q])) continue;
      const Tensor<T>& pv = t.value(ids[q]);
      auto first = g.data().begin() + static_cast<std::ptrdiff_t>(offsets[q] * n);
      Tensor<T> dp(pv.shape(), std::vector<T>(first, first + static_cast<std::ptrdiff_t>(pv.size())));
      t.accumulate(ids[q], std::move(dp));
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape<T>& t = *parts.front().tape;
  const std::size_t m = parts.front().value().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ContractError("concat_cols: operands on different tapes");
    if (p.value().rows() != m) {
      throw DimensionError("concat_cols: row counts differ (" + std::to_string(m) +
                           " vs " + shape_str(p.shape()) + ")");
    }
    ids.push_back(p.id);
    offsets.push_back(cols);
    cols += p.value().cols();
  }
  Tensor<T> out(Shape{m, cols});
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const Tensor<T>& pv = parts[q].value();
    const std::size_t w = pv.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * cols + offsets[q] + j] = pv[i * w + j];
  }
  return t.record(std::move(out), ids, [ids, offsets, m, cols](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t q = 0; q < ids.size(); ++q) {
      if (!t.requires_grad(ids[q])) continue;
      const Tensor<T>& pv = t.value(ids[q]);
      const std::size_t w = pv.cols();
      Tensor<T> dp(pv.shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) dp[i * w + j] = g[i * cols + offsets[q] + j];
      t.accumulate(ids[q], std::move(dp));
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t r0, std::size_t r1) {
  const Tensor<T>& av = a.value();
  const std::size_t n = av.cols();
  if (r0 > r1 || r1 > av.rows()) {
    throw DimensionError("slice_rows: range out of bounds for " + shape_str(av.shape()));
  }
  auto first = av.data().begin() + static_cast<std::ptrdiff_t>(r0 * n);
  Tensor<T> out(Shape{r1 - r0, n},
                std::vector<T>(first, first + static_cast<std::ptrdiff_t>((r1 - r0) * n)));
  return a.tape->record(std::move(out), {a.id}, [a = a.id, r0, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T> da(t.value(a).shape());
    std::copy(g.data().begin(), g.data().end(),
              da.data().begin() + static_cast<std::ptrdiff_t>(r0 * n));
    t.accumulate(a, std::move(da));
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t c0, std::size_t c1) {
  Tensor<T> out = rlrr::slice_cols(a.value(), c0, c1);
  return a.tape->record(std::move(out), {a.id}, [a = a.id, c0, c1](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& av = t.value(a);
    const std::size_t m = av.rows(), n = av.cols(), w = c1 - c0;
    Tensor<T> da(av.shape());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) da[i * n + c0 + j] = g[i * w + j];
    t.accumulate(a, std::move(da));
  });
}

template <typename T>
Var<T> strided_rows(Var<T> a, std::size_t stride, std::size_t offset) {
  const Tensor<T>& av = a.value();
  const std::size_t n = av.cols();
  if (stride == 0 || av.rows() % stride != 0 || offset >= stride) {
    throw DimensionError("strided_rows: stride " + std::to_string(stride) +
                         " does not tile " + shape_str(av.shape()));
  }
  const std::size_t count = av.rows() / stride;
  Tensor<T> out(Shape{count, n});
  for (std::size_t s = 0; s < count; ++s)
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] = av[(s * stride + offset) * n + j];
  return a.tape->record(std::move(out), {a.id},
                        [a = a.id, stride, offset, count, n](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& g = t.grad(self);
                          Tensor<T> da(t.value(a).shape());
                          for (std::size_t s = 0; s < count; ++s)
                            for (std::size_t j = 0; j < n; ++j)
                              da[(s * stride + offset) * n + j] = g[s * n + j];
                          t.accumulate(a, std::move(da));
                        });
}

template <typename T>
Var<T> insert_tokens(Var<T> x, Var<T> extra, std::size_t tokens, std::size_t at) {
  Tape<T>& t = same_tape(x, extra);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& ev = extra.value();
  const std::size_t d = xv.cols();
  if (ev.cols() != d || tokens == 0 || at > tokens || xv.rows() % tokens != 0) {
    throw DimensionError("insert_tokens: cannot insert " + shape_str(ev.shape()) + " at row " +
                         std::to_string(at) + " of samples of " + std::to_string(tokens) +
                         " rows in " + shape_str(xv.shape()));
  }
  const std::size_t batch = xv.rows() / tokens, e = ev.rows(), total = tokens + e;
  Tensor<T> out(Shape{batch * total, d});
  auto src = [&](std::size_t row) { return xv.data().begin() + static_cast<std::ptrdiff_t>(row * d); };
  auto dst = [&](std::size_t row) { return out.data().begin() + static_cast<std::ptrdiff_t>(row * d); };
  for (std::size_t s = 0; s < batch; ++s) {
    std::copy_n(src(s * tokens), at * d, dst(s * total));
    std::copy_n(ev.data().begin(), e * d, dst(s * total + at));
    std::copy_n(src(s * tokens + at), (tokens - at) * d, dst(s * total + at + e));
  }
  return t.record(std::move(out), {x.id, extra.id},
                  [x = x.id, ex = extra.id, batch, tokens, at, e, d](Tape<T>& t, std::size_t self) {
                    const Tensor<T>& g = t.grad(self);
                    const std::size_t total = tokens + e;
                    auto gr = [&](std::size_t row) {
                      return g.data().begin() + static_cast<std::ptrdiff_t>(row * d);
                    };
                    if (t.requires_grad(x)) {
                      Tensor<T> dx(t.value(x).shape());
                      for (std::size_t s = 0; s < batch; ++s) {
                        auto out = dx.data().begin() + static_cast<std::ptrdiff_t>(s * tokens * d);
                        std::copy_n(gr(s * total), at * d, out);
                        std::copy_n(gr(s * total + at + e), (tokens - at) * d,
                                    out + static_cast<std::ptrdiff_t>(at * d));
                      }
                      t.accumulate(x, std::move(dx));
                    }
                    if (t.requires_grad(ex)) {
                      Tensor<T> de(t.value(ex).shape());
                      for (std::size_t s = 0; s < batch; ++s)
                        for (std::size_t q = 0; q < e * d; ++q) de[q] += g[(s * total + at) * d + q];
                      t.accumulate(ex, std::move(de));
                    }
                  });
}

template <typename T>
Var<T> append_tokens(Var<T> x, Var<T> extra, std::size_t tokens) {
  return insert_tokens(x, extra, tokens, tokens);
}

template <typename T>
Var<T> add_tiled(Var<T> x, Var<T> tile, std::size_t tokens) {
  Tape<T>& t = same_tape(x, tile);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& tv = tile.value();
  const std::size_t d = xv.cols();
  if (tv.rows() != tokens || tv.cols() != d || tokens == 0 || xv.rows() % tokens != 0) {
    throw DimensionError("add_tiled: tile " + shape_str(tv.shape()) + " does not fit samples of " +
                         std::to_string(tokens) + " rows in " + shape_str(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t per = tokens * d;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tv[i % per];
  return t.record(std::move(out), {x.id, tile.id},
                  [x = x.id, tl = tile.id, per](Tape<T>& t, std::size_t self) {
                    const Tensor<T>& g = t.grad(self);
                    if (t.requires_grad(x)) t.accumulate(x, g);
                    if (t.requires_grad(tl)) {
                      Tensor<T> dt(t.value(tl).shape());
                      for (std::size_t i = 0; i < g.size(); ++i) dt[i % per] += g[i];
                      t.accumulate(tl, std::move(dt));
                    }
                  });
}

template <typename T>
Var<T> keep_tokens(Var<T> x, std::size_t tokens, std::size_t keep) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.cols();
  if (tokens == 0 || keep > tokens || xv.rows() % tokens != 0) {
    throw DimensionError("keep_tokens: invalid token layout for " + shape_str(xv.shape()));
  }
  const std::size_t batch = xv.rows() / tokens;
  Tensor<T> out(Shape{batch * keep, d});
  for (std::size_t s = 0; s < batch; ++s)
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(s * tokens * d), keep * d,
                out.data().begin() + static_cast<std::ptrdiff_t>(s * keep * d));
  return x.tape->record(std::move(out), {x.id},
                        [x = x.id, batch, tokens, keep, d](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& g = t.grad(self);
                          Tensor<T> dx(t.value(x).shape());
                          for (std::size_t s = 0; s < batch; ++s)
                            std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(s * keep * d),
                                        keep * d,
                                        dx.data().begin() + static_cast<std::ptrdiff_t>(s * tokens * d));
                          t.accumulate(x, std::move(dx));
                        });
}

namespace {

// Gathers the [tokens × dh] block of sample s, head h.
template <typename T>
void gather_block(const Tensor<T>& src, std::size_t s, std::size_t h, std::size_t tokens,
                  std::size_t dh, std::vector<T>& dst) {
  const std::size_t width = src.cols();
  dst.resize(tokens * dh);
  for (std::size_t i = 0; i < tokens; ++i)
    std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>((s * tokens + i) * width + h * dh),
                dh, dst.begin() + static_cast<std::ptrdiff_t>(i * dh));
}

template <typename T>
void scatter_add_block(Tensor<T>& dst, std::size_t s, std::size_t h, std::size_t tokens,
                       std::size_t dh, const std::vector<T>& src) {
  const std::size_t width = dst.cols();
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j < dh; ++j) dst[(s * tokens + i) * width + h * dh + j] += src[i * dh + j];
}

template <typename T>
void softmax_inplace(std::vector<T>& p, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* row = p.data() + i * cols;
    const T mx = *std::max_element(row, row + cols);
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= s;
  }
}

}  // namespace

template <typename T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k) {
  if (q.cols() != k.cols()) {
    throw DimensionError("attention_probs: head widths differ " + shape_str(q.shape()) +
                         " vs " + shape_str(k.shape()));
  }
  const std::size_t n = q.rows(), m = k.rows(), dh = q.cols();
  std::vector<T> p(n * m);
  kernels::ops<T>().gemm_nt(n, dh, m, q.data().data(), k.data().data(), p.data());
  const T c = T(1) / std::sqrt(T(dh));
  for (T& v : p) v *= c;
  softmax_inplace(p, n, m);
  return Tensor<T>(Shape{n, m}, std::move(p));
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t tokens, std::size_t heads) {
  Tape<T>& t = same_tape(q, k);
  same_tape(q, v);
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const Tensor<T>& qv = q.value();
  const std::size_t width = qv.cols();
  if (tokens == 0 || qv.rows() % tokens != 0 || heads == 0 || width % heads != 0) {
    throw DimensionError("attention: " + shape_str(qv.shape()) + " does not split into " +
                         std::to_string(tokens) + "-token samples and " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t batch = qv.rows() / tokens, dh = width / heads;
  const T c = T(1) / std::sqrt(T(dh));
  const auto& ops = kernels::ops<T>();

  // Probabilities are kept for the backward pass: [batch·heads][tokens×tokens].
  std::vector<T> probs(batch * heads * tokens * tokens);
  Tensor<T> out(qv.shape());
  std::vector<T> qb, kb, vb, ob(tokens * dh);
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      gather_block(qv, s, h, tokens, dh, qb);
      gather_block(k.value(), s, h, tokens, dh, kb);
      gather_block(v.value(), s, h, tokens, dh, vb);
      T* p = probs.data() + (s * heads + h) * tokens * tokens;
      ops.gemm_nt(tokens, dh, tokens, qb.data(), kb.data(), p);
      for (std::size_t i = 0; i < tokens * tokens; ++i) p[i] *= c;
      std::vector<T> pv(p, p + tokens * tokens);
      softmax_inplace(pv, tokens, tokens);
      std::copy(pv.begin(), pv.end(), p);
      ops.gemm(tokens, tokens, dh, p, vb.data(), ob.data());
      scatter_add_block(out, s, h, tokens, dh, ob);
    }
  }
  return t.record(
      std::move(out), {q.id, k.id, v.id},
      [qi = q.id, ki = k.id, vi = v.id, probs = std::move(probs), batch, heads, tokens, dh,
       c](Tape<T>& t, std::size_t self) {
        const auto& ops = kernels::ops<T>();
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& qv = t.value(qi);
        Tensor<T> dq(qv.shape()), dk(qv.shape()), dv(qv.shape());
        std::vector<T> qb, kb, vb, gb, pt(tokens * tokens), dp(tokens * tokens),
            tmp(tokens * dh), dst(tokens * tokens);
        for (std::size_t s = 0; s < batch; ++s) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + (s * heads + h) * tokens * tokens;
            gather_block(qv, s, h, tokens, dh, qb);
            gather_block(t.value(ki), s, h, tokens, dh, kb);
            gather_block(t.value(vi), s, h, tokens, dh, vb);
            gather_block(g, s, h, tokens, dh, gb);
            // dV = Pᵀ dO
            for (std::size_t i = 0; i < tokens; ++i)
              for (std::size_t j = 0; j < tokens; ++j) pt[j * tokens + i] = p[i * tokens + j];
            ops.gemm(tokens, tokens, dh, pt.data(), gb.data(), tmp.data());
            scatter_add_block(dv, s, h, tokens, dh, tmp);
            // dP = dO Vᵀ ; dS = P ⊙ (dP − rowsum(dP ⊙ P)) · c
            ops.gemm_nt(tokens, dh, tokens, gb.data(), vb.data(), dp.data());
            for (std::size_t i = 0; i < tokens; ++i) {
              T rs = 0;
              for (std::size_t j = 0; j < tokens; ++j) rs += dp[i * tokens + j] * p[i * tokens + j];
              for (std::size_t j = 0; j < tokens; ++j)
                dp[i * tokens + j] = p[i * tokens + j] * (dp[i * tokens + j] - rs) * c;
            }
            // dQ = dS K ; dK = dSᵀ Q
            ops.gemm(tokens, tokens, dh, dp.data(), kb.data(), tmp.data());
            scatter_add_block(dq, s, h, tokens, dh, tmp);
            for (std::size_t i = 0; i < tokens; ++i)
              for (std::size_t j = 0; j < tokens; ++j) dst[j * tokens + i] = dp[i * tokens + j];
            ops.gemm(tokens, tokens, dh, dst.data(), qb.data(), tmp.data());
            scatter_add_block(dk, s, h, tokens, dh, tmp);
          }
        }
        t.accumulate(qi, std::move(dq));
        t.accumulate(ki, std::move(dk));
        t.accumulate(vi, std::move(dv));
      });
}

template <typename T>
Var<T> dropout(Var<T> x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout rate must lie in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  Tensor<T> mask(x.shape());
  for (T& m : mask.storage()) m = rng.uniform() >= p ? keep_scale : T(0);
  Tensor<T> out = rlrr::hadamard(x.value(), mask);
  return x.tape->record(std::move(out), {x.id},
                        [x = x.id, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
                          t.accumulate(x, rlrr::hadamard(t.grad(self), mask));
                        });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  return x.tape->record(Tensor<T>::scalar(s), {x.id}, [x = x.id](Tape<T>& t, std::size_t self) {
    t.accumulate(x, Tensor<T>(t.value(x).shape(), t.grad(self)[0]));
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const T n = T(x.value().size());
  return scale(sum(x), T(1) / n);
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  const Tensor<T>& lv = logits.value();
  const std::size_t b = lv.rows(), c = lv.cols();
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(lv.shape()));
  }
  Tensor<T> probs = softmax_rows_value(lv);
  T loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range");
    }
    const T* row = lv.data().data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    loss += std::log(s) + mx - row[y];
  }
  loss /= T(b);
  return logits.tape->record(
      Tensor<T>::scalar(loss), {logits.id},
      [l = logits.id, probs = std::move(probs), labels, b, c](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / T(b);
        Tensor<T> dl = probs;
        for (std::size_t i = 0; i < b; ++i) dl[i * c + static_cast<std::size_t>(labels[i])] -= T(1);
        for (T& v : dl.storage()) v *= g;
        t.accumulate(l, std::move(dl));
      });
}

#define RLRR_AD_INSTANTIATE(T)                                                        \
  template struct Var<T>;                                                             \
  template class Gradients<T>;                                                        \
  template class Tape<T>;                                                             \
  template Var<T> matmul(Var<T>, Var<T>);                                             \
  template Var<T> add(Var<T>, Var<T>);                                                \
  template Var<T> sub(Var<T>, Var<T>);                                                \
  template Var<T> mul(Var<T>, Var<T>);                                                \
  template Var<T> add_row(Var<T>, Var<T>);                                            \
  template Var<T> mul_row(Var<T>, Var<T>);                                            \
  template Var<T> mul_col(Var<T>, Var<T>);                                            \
  template Var<T> scale(Var<T>, T);                                                   \
  template Var<T> reshape(Var<T>, Shape);                                             \
  template Var<T> transpose(Var<T>);                                                  \
  template Var<T> gelu(Var<T>);                                                       \
  template Var<T> softmax_rows(Var<T>);                                               \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                              \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                            \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                            \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                       \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                       \
  template Var<T> strided_rows(Var<T>, std::size_t, std::size_t);                     \
  template Var<T> insert_tokens(Var<T>, Var<T>, std::size_t, std::size_t);            \
  template Var<T> append_tokens(Var<T>, Var<T>, std::size_t);                         \
  template Var<T> add_tiled(Var<T>, Var<T>, std::size_t);                             \
  template Var<T> keep_tokens(Var<T>, std::size_t, std::size_t);                      \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);        \
  template Tensor<T> attention_probs(const Tensor<T>&, const Tensor<T>&);             \
  template Var<T> dropout(Var<T>, double, Rng&);                                      \
  template Var<T> sum(Var<T>);                                                        \
  template Var<T> mean(Var<T>);                                                       \
  template Var<T> cross_entropy(Var<T>, const std::vector<int>&);                     \
  template T gelu_value(T);                                                           \
  template Tensor<T> softmax_rows_value(const Tensor<T>&);                            \
  template Tensor<T> layer_norm_value(const Tensor<T>&, const Tensor<T>&,             \
                                      const Tensor<T>&, T);

RLRR_AD_INSTANTIATE(float)
RLRR_AD_INSTANTIATE(double)

}  // namespace rlrr::ad
