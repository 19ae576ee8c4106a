#include "mmgpt/numerics/autograd.hpp"

#include <array>
#include <cmath>
#include <sstream>

namespace mmgpt::nn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  node.value.grad.reset();
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(Tensor<T>& parameter) {
  if (auto it = leaves_.find(&parameter); it != leaves_.end()) return {this, it->second};
  Node node;
  node.value = Tensor<T>(parameter.shape, parameter.data);
  node.parameter = &parameter;
  node.needs_grad = track_ && parameter.requires_grad;
  nodes_.push_back(std::move(node));
  leaves_.emplace(&parameter, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  if (track_) {
    for (std::size_t in : inputs) node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
    if (node.needs_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
std::vector<T>& Tape<T>::grad(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (root.tape != this) throw Error("backward called with a value from another tape");
  if (value(root.id).size() != 1)
    throw DimensionError("backward needs a scalar root, got shape " + shape_str(value(root.id).shape));
  if (!nodes_[root.id].needs_grad) return;
  grad(root.id)[0] += T(1);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.grad.empty() || !node.needs_grad) continue;
    if (node.backward) node.backward(*this, i);
    if (node.parameter != nullptr) {
      Tensor<T>& p = *node.parameter;
      if (!p.grad) p.grad.emplace(p.size(), T(0));
      auto& dst = *p.grad;
      const auto& src = nodes_[i].grad;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Ops

namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.shape.size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape));
}

template <typename T>
std::array<std::size_t, 2> ids(Var<T> a, Var<T> b) {
  return {a.id, b.id};
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

constexpr double kGeluCoeff = 0.7978845608;

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.shape[1] != bv.shape[0])
    throw DimensionError("matmul: inner extents differ for " + shape_str(av.shape) + " and " + shape_str(bv.shape));
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  auto out = Tensor<T>::zeros({m, n});
  gemm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const auto in = ids(a, b);
  return a.tape->record(std::move(out), in, [ai = a.id, bi = b.id, m, k, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    if (t.needs_grad(ai)) gemm_nt(g.data(), t.value(bi).data.data(), t.grad(ai).data(), m, n, k);
    if (t.needs_grad(bi)) gemm_tn(t.value(ai).data.data(), g.data(), t.grad(bi).data(), m, k, n);
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  if (av.shape[1] != bv.shape[1])
    throw DimensionError("matmul_nt: inner extents differ for " + shape_str(av.shape) + " and " +
                         shape_str(bv.shape) + "^T");
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[0];
  auto out = Tensor<T>::zeros({m, n});
  gemm_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const auto in = ids(a, b);
  return a.tape->record(std::move(out), in, [ai = a.id, bi = b.id, m, k, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    // dA[m x k] = g[m x n] * B[n x k]; dB[n x k] = g^T * A
    if (t.needs_grad(ai)) gemm_nn(g.data(), t.value(bi).data.data(), t.grad(ai).data(), m, n, k);
    if (t.needs_grad(bi)) gemm_tn(g.data(), t.value(ai).data.data(), t.grad(bi).data(), m, n, k);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape != bv.shape)
    throw DimensionError("add: shapes differ, " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out(av.shape, av.data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  const auto in = ids(a, b);
  return a.tape->record(std::move(out), in, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    for (std::size_t which : {ai, bi}) {
      if (!t.needs_grad(which)) continue;
      auto& d = t.grad(which);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> add_row(Var<T> x, Var<T> b) {
  require_same_tape(x, b);
  const auto& xv = x.value();
  const auto& bv = b.value();
  require_matrix(xv, "add_row");
  if (bv.size() != xv.cols())
    throw DimensionError("add_row: bias " + shape_str(bv.shape) + " does not match columns of " + shape_str(xv.shape));
  Tensor<T> out(xv.shape, xv.data);
  const std::size_t m = xv.rows(), n = xv.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += bv.data[j];
  const auto in = ids(x, b);
  return x.tape->record(std::move(out), in, [xi = x.id, bi = b.id, m, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    if (t.needs_grad(xi)) {
      auto& d = t.grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      auto& d = t.grad(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape != bv.shape)
    throw DimensionError("mul: shapes differ, " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out(av.shape, av.data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  const auto in = ids(a, b);
  return a.tape->record(std::move(out), in, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    if (t.needs_grad(ai)) {
      auto& d = t.grad(ai);
      const auto& o = t.value(bi).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * o[i];
    }
    if (t.needs_grad(bi)) {
      auto& d = t.grad(bi);
      const auto& o = t.value(ai).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * o[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape, xv.data);
  for (T& v : out.data) v *= factor;
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in, [xi = x.id, factor](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    auto& d = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> mul_scalar(Var<T> s, Var<T> x) {
  require_same_tape(s, x);
  const auto& sv = s.value();
  if (sv.size() != 1) throw DimensionError("mul_scalar: scale must hold one element, got " + shape_str(sv.shape));
  const auto& xv = x.value();
  Tensor<T> out(xv.shape, xv.data);
  const T factor = sv.data[0];
  for (T& v : out.data) v *= factor;
  const auto in = ids(s, x);
  return x.tape->record(std::move(out), in, [si = s.id, xi = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    if (t.needs_grad(si)) {
      const auto& xd = t.value(xi).data;
      T acc = T(0);
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
      t.grad(si)[0] += acc;
    }
    if (t.needs_grad(xi)) {
      const T factor = t.value(si).data[0];
      auto& d = t.grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape, xv.data);
  for (T& v : out.data) v = std::tanh(v);
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in, [xi = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    const auto& y = t.value(self).data;
    auto& d = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape, xv.data);
  const T c = T(kGeluCoeff);
  const T k = T(0.044715);
  for (T& v : out.data) v = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in, [xi = x.id, c, k](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    const auto& xd = t.value(xi).data;
    auto& d = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xd[i];
      const T th = std::tanh(c * (v + k * v * v * v));
      const T dv = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * k * v * v);
      d[i] += g[i] * dv;
    }
  });
}

namespace {

// Softmax over the first `width` entries of each row; the rest become 0.
template <typename T, typename WidthFn>
Tensor<T> softmax_rows(const Tensor<T>& x, WidthFn width) {
  auto out = Tensor<T>::zeros(x.shape);
  const std::size_t n = x.cols();
  const std::size_t m = x.size() / n;
  for (std::size_t i = 0; i < m; ++i) {
    const T* src = x.data.data() + i * n;
    T* dst = out.data.data() + i * n;
    const std::size_t w = width(i);
    T mx = src[0];
    for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, src[j]);
    T total = T(0);
    for (std::size_t j = 0; j < w; ++j) {
      dst[j] = std::exp(src[j] - mx);
      total += dst[j];
    }
    for (std::size_t j = 0; j < w; ++j) dst[j] /= total;
  }
  return out;
}

template <typename T>
void softmax_backward(Tape<T>& t, std::size_t self, std::size_t xi) {
  const auto& g = t.grad_view(self);
  const auto& y = t.value(self);
  auto& d = t.grad(xi);
  const std::size_t n = y.cols();
  const std::size_t m = y.size() / n;
  for (std::size_t i = 0; i < m; ++i) {
    const T* yr = y.data.data() + i * n;
    const T* gr = g.data() + i * n;
    T dot = T(0);
    for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
    T* dr = d.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
  }
}

}  // namespace

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const auto& xv = x.value();
  check_finite(xv, "softmax_lastdim");
  const std::size_t n = xv.cols();
  auto out = softmax_rows(xv, [n](std::size_t) { return n; });
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in,
                        [xi = x.id](Tape<T>& t, std::size_t self) { softmax_backward(t, self, xi); });
}

template <typename T>
Var<T> causal_softmax(Var<T> x) {
  const auto& xv = x.value();
  require_matrix(xv, "causal_softmax");
  check_finite(xv, "causal_softmax");
  const std::size_t n = xv.cols();
  auto out = softmax_rows(xv, [n](std::size_t i) { return std::min(i + 1, n); });
  const std::array<std::size_t, 1> in{x.id};
  // Masked entries are exactly zero in y, so the generic backward yields zero there.
  return x.tape->record(std::move(out), in,
                        [xi = x.id](Tape<T>& t, std::size_t self) { softmax_backward(t, self, xi); });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.value().size() != n || bias.value().size() != n)
    throw DimensionError("layer_norm: gain " + shape_str(gain.value().shape) + " / bias " +
                         shape_str(bias.value().shape) + " must match last extent of " + shape_str(xv.shape));
  const std::size_t m = xv.size() / n;
  auto out = Tensor<T>::zeros(xv.shape);
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(m);
  const auto& gd = gain.value().data;
  const auto& bd = bias.value().data;
  for (std::size_t i = 0; i < m; ++i) {
    const T* src = xv.data.data() + i * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += src[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= T(n);
    const T rs = T(1) / std::sqrt(var + eps);
    inv_std[i] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (src[j] - mean) * rs;
      xhat[i * n + j] = h;
      out.data[i * n + j] = h * gd[j] + bd[j];
    }
  }
  const std::array<std::size_t, 3> in{x.id, gain.id, bias.id};
  return x.tape->record(
      std::move(out), in,
      [xi = x.id, gi = gain.id, bi = bias.id, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_view(self);
        if (t.needs_grad(gi)) {
          auto& d = t.grad(gi);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (t.needs_grad(bi)) {
          auto& d = t.grad(bi);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
        }
        if (t.needs_grad(xi)) {
          const auto& gd = t.value(gi).data;
          auto& d = t.grad(xi);
          std::vector<T> dh(n);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              dh[j] = g[i * n + j] * gd[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * xhat[i * n + j];
            }
            mean_dh /= T(n);
            mean_dh_h /= T(n);
            for (std::size_t j = 0; j < n; ++j)
              d[i * n + j] += inv_std[i] * (dh[j] - mean_dh - xhat[i * n + j] * mean_dh_h);
          }
        }
      });
}

template <typename T>
Var<T> cross_entropy_masked(Var<T> logits, std::span<const std::int32_t> targets, std::span<const bool> mask) {
  const auto& lv = logits.value();
  require_matrix(lv, "cross_entropy_masked");
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows || mask.size() != rows)
    throw DimensionError("cross_entropy_masked: logits " + shape_str(lv.shape) + " vs " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  std::size_t count = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    ++count;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
      throw DimensionError("cross_entropy_masked: target " + std::to_string(targets[i]) + " outside vocabulary of " +
                           std::to_string(vocab));
  }
  if (count == 0) throw EmptyLossError("cross_entropy_masked: mask selects no positions");

  // Softmax rows are kept for the backward pass; unmasked rows are never read.
  std::vector<T> probs(rows * vocab, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    const T* src = lv.data.data() + i * vocab;
    T mx = src[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, src[j]);
    T z = T(0);
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(src[j] - mx);
    const T log_z = std::log(z) + mx;
    total += log_z - src[targets[i]];
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(src[j] - log_z);
  }
  const T inv_count = T(1) / T(count);
  if (!std::isfinite(total)) throw NumericError("cross_entropy_masked: non-finite loss");
  auto out = Tensor<T>({1}, {total * inv_count});
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<bool> msk(mask.begin(), mask.end());
  const std::array<std::size_t, 1> in{logits.id};
  return logits.tape->record(std::move(out), in,
                             [li = logits.id, rows, vocab, inv_count, probs = std::move(probs), tgt = std::move(tgt),
                              msk = std::move(msk)](Tape<T>& t, std::size_t self) {
                               const T g = t.grad_view(self)[0] * inv_count;
                               auto& d = t.grad(li);
                               for (std::size_t i = 0; i < rows; ++i) {
                                 if (!msk[i]) continue;
                                 for (std::size_t j = 0; j < vocab; ++j) d[i * vocab + j] += g * probs[i * vocab + j];
                                 d[i * vocab + static_cast<std::size_t>(tgt[i])] -= g;
                               }
                             });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids_in) {
  const auto& tv = table.value();
  require_matrix(tv, "gather_rows");
  if (ids_in.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t n = tv.cols();
  auto out = Tensor<T>::zeros({ids_in.size(), n});
  for (std::size_t i = 0; i < ids_in.size(); ++i) {
    if (ids_in[i] < 0 || static_cast<std::size_t>(ids_in[i]) >= tv.rows())
      throw DimensionError("gather_rows: index " + std::to_string(ids_in[i]) + " outside table " + shape_str(tv.shape));
    std::copy_n(tv.data.data() + ids_in[i] * n, n, out.data.data() + i * n);
  }
  std::vector<std::int32_t> idx(ids_in.begin(), ids_in.end());
  const std::array<std::size_t, 1> in{table.id};
  return table.tape->record(std::move(out), in, [ti = table.id, n, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    auto& d = t.grad(ti);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) d[static_cast<std::size_t>(idx[i]) * n + j] += g[i * n + j];
  });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  require_matrix(xv, "slice_rows");
  if (begin >= end || end > xv.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(xv.shape));
  const std::size_t n = xv.cols();
  Tensor<T> out({end - begin, n}, std::vector<T>(xv.data.begin() + begin * n, xv.data.begin() + end * n));
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in, [xi = x.id, begin, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    auto& d = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) d[begin * n + i] += g[i];
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  require_matrix(xv, "slice_cols");
  if (begin >= end || end > xv.cols())
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(xv.shape));
  const std::size_t m = xv.rows(), n = xv.cols(), w = end - begin;
  auto out = Tensor<T>::zeros({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data.data() + i * n + begin, w, out.data.data() + i * w);
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in, [xi = x.id, begin, m, n, w](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    auto& d = t.grad(xi);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) d[i * n + begin + j] += g[i * w + j];
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].value().cols();
  std::size_t m = 0;
  std::vector<std::size_t> in;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != n)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].value().shape) + " vs " +
                           shape_str(p.value().shape));
    m += p.value().rows();
    in.push_back(p.id);
  }
  std::vector<T> data;
  data.reserve(m * n);
  for (const auto& p : parts) data.insert(data.end(), p.value().data.begin(), p.value().data.end());
  Tensor<T> out({m, n}, std::move(data));
  return parts[0].tape->record(std::move(out), in, [in](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    std::size_t offset = 0;
    for (std::size_t id : in) {
      const std::size_t len = t.value(id).size();
      if (t.needs_grad(id)) {
        auto& d = t.grad(id);
        for (std::size_t i = 0; i < len; ++i) d[i] += g[offset + i];
      }
      offset += len;
    }
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().rows();
  std::size_t n = 0;
  std::vector<std::size_t> in;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].value().shape) + " vs " +
                           shape_str(p.value().shape));
    n += p.value().cols();
    in.push_back(p.id);
  }
  auto out = Tensor<T>::zeros({m, n});
  std::size_t col = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    const std::size_t w = pv.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(pv.data.data() + i * w, w, out.data.data() + i * n + col);
    col += w;
  }
  return parts[0].tape->record(std::move(out), in, [in, m, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    std::size_t col = 0;
    for (std::size_t id : in) {
      const std::size_t w = t.value(id).cols();
      if (t.needs_grad(id)) {
        auto& d = t.grad(id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) d[i * w + j] += g[i * n + col + j];
      }
      col += w;
    }
  });
}

template <typename T>
Var<T> mask_rows(Var<T> x, std::span<const bool> keep) {
  const auto& xv = x.value();
  require_matrix(xv, "mask_rows");
  if (keep.size() != xv.rows())
    throw DimensionError("mask_rows: " + std::to_string(keep.size()) + " flags for " + shape_str(xv.shape));
  const std::size_t n = xv.cols();
  Tensor<T> out(xv.shape, xv.data);
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) std::fill_n(out.data.begin() + i * n, n, T(0));
  std::vector<bool> flags(keep.begin(), keep.end());
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in, [xi = x.id, n, flags = std::move(flags)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_view(self);
    auto& d = t.grad(xi);
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (flags[i])
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += g[i * n + j];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  T total = T(0);
  for (T v : xv.data) total += v;
  Tensor<T> out({1}, {total});
  const std::array<std::size_t, 1> in{x.id};
  return x.tape->record(std::move(out), in, [xi = x.id](Tape<T>& t, std::size_t self) {
    const T g = t.grad_view(self)[0];
    for (T& v : t.grad(xi)) v += g;
  });
}

#define MMGPT_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> matmul(Var<T>, Var<T>);                                                          \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                       \
  template Var<T> add(Var<T>, Var<T>);                                                             \
  template Var<T> add_row(Var<T>, Var<T>);                                                         \
  template Var<T> mul(Var<T>, Var<T>);                                                             \
  template Var<T> scale(Var<T>, T);                                                                \
  template Var<T> mul_scalar(Var<T>, Var<T>);                                                      \
  template Var<T> tanh(Var<T>);                                                                    \
  template Var<T> gelu(Var<T>);                                                                    \
  template Var<T> softmax_lastdim(Var<T>);                                                         \
  template Var<T> causal_softmax(Var<T>);                                                          \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                           \
  template Var<T> cross_entropy_masked(Var<T>, std::span<const std::int32_t>, std::span<const bool>); \
  template Var<T> gather_rows(Var<T>, std::span<const std::int32_t>);                              \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                                    \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                    \
  template Var<T> concat_rows(std::span<const Var<T>>);                                            \
  template Var<T> concat_cols(std::span<const Var<T>>);                                            \
  template Var<T> mask_rows(Var<T>, std::span<const bool>);                                        \
  template Var<T> sum(Var<T>);

MMGPT_INSTANTIATE_OPS(float)
MMGPT_INSTANTIATE_OPS(double)

#undef MMGPT_INSTANTIATE_OPS

}  // namespace mmgpt::nn
