#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "lesionfuse/tensor.hpp"

namespace lesionfuse {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap cmap(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MutMap mmap(double* p, std::size_t rows, std::size_t cols) {
  return MutMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  if (axis < -r || axis >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// True when `small` equals `big` or a trailing suffix of it: the broadcast of a vector
/// (or sub-tensor) over leading batch axes.
inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct AxisSplit {
  std::size_t outer, axis, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

enum class Binary { add, mul };

inline Tensor binary(Binary kind, const Tensor& x, const Tensor& y) {
  // Put the full-shape operand first; the other is broadcast over leading axes.
  bool swapped = x.size() < y.size();
  const Tensor& a = swapped ? y : x;
  const Tensor& b = swapped ? x : y;
  if (!is_suffix(a.shape(), b.shape()))
    throw ShapeError(std::string(kind == Binary::add ? "add" : "mul") + ": cannot broadcast " +
                     to_string(y.shape()) + " against " + to_string(x.shape()) +
                     " (only equal shapes or a trailing-axes broadcast are supported)");
  const std::size_t n = a.size(), m = b.size();
  std::vector<double> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = kind == Binary::add ? ad[i] + bd[i % m] : ad[i] * bd[i % m];
  auto ah = a.handle(), bh = b.handle();
  return make_result(kind == Binary::add ? "add" : "mul", a.shape(), std::move(out), {&a, &b},
                     [ah, bh, kind, n, m](const std::vector<double>& g, const std::vector<double>&) {
                       if (ah->requires_grad) {
                         auto& ga = grad_buffer(*ah);
                         for (std::size_t i = 0; i < n; ++i)
                           ga[i] += kind == Binary::add ? g[i] : g[i] * bh->data[i % m];
                       }
                       if (bh->requires_grad) {
                         auto& gb = grad_buffer(*bh);
                         for (std::size_t i = 0; i < n; ++i)
                           gb[i % m] += kind == Binary::add ? g[i] : g[i] * ah->data[i];
                       }
                     });
}

template <class F, class DF>
Tensor unary(const char* name, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  auto xh = x.handle();
  // df(input, output) is the local derivative.
  return make_result(name, x.shape(), std::move(out), {&x},
                     [xh, df](const std::vector<double>& g, const std::vector<double>& y) {
                       auto& gx = grad_buffer(*xh);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xh->data[i], y[i]);
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Matrix product of a [m x k] and b [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::mmap(out.data(), m, n).noalias() =
      detail::cmap(a.data().data(), m, k) * detail::cmap(b.data().data(), k, n);
  auto ah = a.handle(), bh = b.handle();
  return detail::make_result("matmul", {m, n}, std::move(out), {&a, &b},
                             [ah, bh, m, k, n](const std::vector<double>& g, const std::vector<double>&) {
                               auto G = detail::cmap(g.data(), m, n);
                               if (ah->requires_grad)
                                 detail::mmap(detail::grad_buffer(*ah).data(), m, k).noalias() +=
                                     G * detail::cmap(bh->data.data(), k, n).transpose();
                               if (bh->requires_grad)
                                 detail::mmap(detail::grad_buffer(*bh).data(), k, n).noalias() +=
                                     detail::cmap(ah->data.data(), m, k).transpose() * G;
                             });
}

/// Batched matrix product: a [B x m x k], b [B x k x n] -> [B x m x n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(B * m * n);
  for (std::size_t i = 0; i < B; ++i)
    detail::mmap(out.data() + i * m * n, m, n).noalias() =
        detail::cmap(a.data().data() + i * m * k, m, k) * detail::cmap(b.data().data() + i * k * n, k, n);
  auto ah = a.handle(), bh = b.handle();
  return detail::make_result(
      "bmm", {B, m, n}, std::move(out), {&a, &b}, [ah, bh, B, m, k, n](const std::vector<double>& g, const std::vector<double>&) {
        for (std::size_t i = 0; i < B; ++i) {
          auto G = detail::cmap(g.data() + i * m * n, m, n);
          if (ah->requires_grad)
            detail::mmap(detail::grad_buffer(*ah).data() + i * m * k, m, k).noalias() +=
                G * detail::cmap(bh->data.data() + i * k * n, k, n).transpose();
          if (bh->requires_grad)
            detail::mmap(detail::grad_buffer(*bh).data() + i * k * n, k, n).noalias() +=
                detail::cmap(ah->data.data() + i * m * k, m, k).transpose() * G;
        }
      });
}

/// Affine map over the last axis: y = x W^T + bias, with weight [out x in] and bias [out].
/// `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.shape().back() != weight.dim(1))
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  const std::size_t in = weight.dim(1), outd = weight.dim(0), rows = x.size() / in;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd))
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match " +
                     std::to_string(outd) + " outputs");
  Shape shape = x.shape();
  shape.back() = outd;
  std::vector<double> out(rows * outd);
  auto Y = detail::mmap(out.data(), rows, outd);
  Y.noalias() = detail::cmap(x.data().data(), rows, in) * detail::cmap(weight.data().data(), outd, in).transpose();
  if (bias.defined()) Y.rowwise() += detail::cmap(bias.data().data(), 1, outd).row(0);
  auto xh = x.handle(), wh = weight.handle();
  std::shared_ptr<detail::TensorImpl> bh = bias.defined() ? bias.handle() : nullptr;
  const Tensor& bref = bias.defined() ? bias : x;
  return detail::make_result(
      "linear", std::move(shape), std::move(out), {&x, &weight, &bref},
      [xh, wh, bh, rows, in, outd](const std::vector<double>& g, const std::vector<double>&) {
        auto G = detail::cmap(g.data(), rows, outd);
        if (xh->requires_grad)
          detail::mmap(detail::grad_buffer(*xh).data(), rows, in).noalias() +=
              G * detail::cmap(wh->data.data(), outd, in);
        if (wh->requires_grad)
          detail::mmap(detail::grad_buffer(*wh).data(), outd, in).noalias() +=
              G.transpose() * detail::cmap(xh->data.data(), rows, in);
        if (bh && bh->requires_grad) {
          auto& gb = detail::grad_buffer(*bh);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::add, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::mul, a, b); }

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0 || std::isnan(v) ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// Identity in the forward pass whose backward multiplies the gradient by `factor`.
/// Used only to inject a known-wrong backward rule when validating the gradient checker.
inline Tensor corrupt_gradient(const Tensor& x, double factor) {
  return detail::unary(
      "corrupt_gradient", x, [](double v) { return v; }, [factor](double, double) { return factor; });
}

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  auto xh = x.handle();
  return detail::make_result("sum", {1}, {s}, {&x}, [xh](const std::vector<double>& g, const std::vector<double>&) {
    auto& gx = detail::grad_buffer(*xh);
    for (auto& v : gx) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Softmax along `axis`, computed with max subtraction.
inline Tensor softmax(const Tensor& x, long axis = -1) {
  auto ax = detail::normalize_axis(axis, x.rank());
  auto [outer, len, inner] = detail::split_at(x.shape(), ax);
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0;
      for (std::size_t j = 0; j < len; ++j) z += out[base + j * inner] = std::exp(xd[base + j * inner] - mx);
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  auto xh = x.handle();
  return detail::make_result("softmax", x.shape(), std::move(out), {&x},
                             [xh, outer, len, inner](const std::vector<double>& g, const std::vector<double>& yv) {
                               auto& gx = detail::grad_buffer(*xh);
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * len * inner + in;
                                   double dot = 0;
                                   for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * yv[base + j * inner];
                                   for (std::size_t j = 0; j < len; ++j)
                                     gx[base + j * inner] += yv[base + j * inner] * (g[base + j * inner] - dot);
                                 }
                             });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  for (std::size_t b = 0; b < B; ++b)
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[b]) + " at row " +
                              std::to_string(b) + " outside [0," + std::to_string(K) + ")");
  auto xd = logits.data();
  std::vector<double> probs(B * K);
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = xd.data() + b * K;
    double mx = *std::max_element(row, row + K);
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += probs[b * K + k] = std::exp(row[k] - mx);
    for (std::size_t k = 0; k < K; ++k) probs[b * K + k] /= z;
    loss += mx + std::log(z) - row[labels[b]];
  }
  loss /= static_cast<double>(B);
  auto xh = logits.handle();
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result("cross_entropy", {1}, {loss}, {&logits},
                             [xh, probs = std::move(probs), lab = std::move(lab), B, K](const std::vector<double>& g, const std::vector<double>&) {
                               auto& gx = detail::grad_buffer(*xh);
                               const double s = g[0] / static_cast<double>(B);
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t k = 0; k < K; ++k)
                                   gx[b * K + k] += s * (probs[b * K + k] - (static_cast<int>(k) == lab[b] ? 1.0 : 0.0));
                             });
}

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  return cross_entropy(logits, std::span<const int>(labels));
}

/// Normalizes over the last axis, then applies per-feature gain and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || shift.size() != d)
    throw ShapeError("layer_norm: gain/shift length must equal last axis of " + to_string(x.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
  auto xd = x.data();
  auto gd = gain.data();
  auto sd = shift.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gd[j] + sd[j];
    }
  }
  auto xh = x.handle(), gh = gain.handle(), sh = shift.handle();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &shift},
      [xh, gh, sh, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](const std::vector<double>& g, const std::vector<double>&) {
        if (gh->requires_grad) {
          auto& gg = detail::grad_buffer(*gh);
          for (std::size_t i = 0; i < rows * d; ++i) gg[i % d] += g[i] * xhat[i];
        }
        if (sh->requires_grad) {
          auto& gs = detail::grad_buffer(*sh);
          for (std::size_t i = 0; i < rows * d; ++i) gs[i % d] += g[i];
        }
        if (xh->requires_grad) {
          auto& gx = detail::grad_buffer(*xh);
          std::vector<double> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g[r * d + j] * gh->data[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat[r * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  auto xh = x.handle();
  std::vector<double> data(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(data), {&x}, [xh](const std::vector<double>& g, const std::vector<double>&) {
    auto& gx = detail::grad_buffer(*xh);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// General axis permutation: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation length does not match rank");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  const Shape& in = x.shape();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  // map[j] = input offset of output element j
  std::vector<std::size_t> map(x.size());
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t j = 0; j < map.size(); ++j) {
    map[j] = off;
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < out_shape[a]) {
        off += stride[a];
        break;
      }
      off -= stride[a] * (out_shape[a] - 1);
      idx[a] = 0;
    }
  }
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = xd[map[j]];
  auto xh = x.handle();
  return detail::make_result("permute", std::move(out_shape), std::move(out), {&x},
                             [xh, map = std::move(map)](const std::vector<double>& g, const std::vector<double>&) {
                               auto& gx = detail::grad_buffer(*xh);
                               for (std::size_t j = 0; j < g.size(); ++j) gx[map[j]] += g[j];
                             });
}

/// Concatenates tensors that agree on every axis except `axis`.
inline Tensor concat(const std::vector<Tensor>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].rank());
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < probe.size(); ++i)
      if (i != ax && probe[i] != parts[0].dim(i))
        throw ShapeError("concat: " + to_string(probe) + " incompatible with " + to_string(parts[0].shape()) +
                         " along axis " + std::to_string(ax));
    shape[ax] += probe[ax];
  }
  auto [outer, total, inner] = detail::split_at(shape, ax);
  std::vector<double> out(numel(shape));
  std::vector<std::shared_ptr<detail::TensorImpl>> handles;
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(ax) * inner;
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * w, w, out.data() + o * total * inner + offset);
    offset += w;
    handles.push_back(p.handle());
    widths.push_back(w);
  }
  Tensor result(shape, std::move(out));
  bool needs = false;
  if (Tape::grad_mode())
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    result.set_requires_grad(true);
    const std::size_t row = total * inner;
    Tape::current().record("concat", result.handle(),
                           [handles, widths, outer, row](const std::vector<double>& g, const std::vector<double>&) {
                             std::size_t off = 0;
                             for (std::size_t i = 0; i < handles.size(); ++i) {
                               if (handles[i]->requires_grad) {
                                 auto& gp = detail::grad_buffer(*handles[i]);
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t j = 0; j < widths[i]; ++j)
                                     gp[o * widths[i] + j] += g[o * row + off + j];
                               }
                               off += widths[i];
                             }
                           });
  }
  return result;
}

/// Elements [start, start+length) along `axis`.
inline Tensor slice(const Tensor& x, long axis, std::size_t start, std::size_t length) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  if (length == 0 || start + length > x.dim(ax))
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") outside axis " + std::to_string(ax) + " of " + to_string(x.shape()));
  auto [outer, len, inner] = detail::split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = length;
  std::vector<double> out(outer * length * inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xd.data() + (o * len + start) * inner, length * inner, out.data() + o * length * inner);
  auto xh = x.handle();
  return detail::make_result("slice", std::move(shape), std::move(out), {&x},
                             [xh, outer, len, inner, start, length](const std::vector<double>& g, const std::vector<double>&) {
                               auto& gx = detail::grad_buffer(*xh);
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t j = 0; j < length * inner; ++j)
                                   gx[(o * len + start) * inner + j] += g[o * length * inner + j];
                             });
}

/// Repeats x along a new leading batch axis: shape S -> [batch, S...].
inline Tensor broadcast_batch(const Tensor& x, std::size_t batch) {
  Shape shape{batch};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  std::vector<double> out;
  out.reserve(batch * x.size());
  for (std::size_t b = 0; b < batch; ++b) out.insert(out.end(), x.data().begin(), x.data().end());
  auto xh = x.handle();
  const std::size_t n = x.size();
  return detail::make_result("broadcast_batch", std::move(shape), std::move(out), {&x},
                             [xh, n](const std::vector<double>& g, const std::vector<double>&) {
                               auto& gx = detail::grad_buffer(*xh);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i % n] += g[i];
                             });
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

/// 2D cross-correlation. x [B x Cin x H x W], weight [Cout x Cin x k x k], bias [Cout] or
/// undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3))
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be at least 1");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = weight.dim(0), k = weight.dim(2);
  if (k > H + 2 * padding || k > W + 2 * padding)
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + to_string(x.shape()) +
                     " with padding " + std::to_string(padding));
  if (bias.defined() && bias.size() != Co) throw ShapeError("conv2d: bias length must equal output channels");
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1, Wo = (W + 2 * padding - k) / stride + 1;
  const std::size_t ckk = C * k * k, hw = Ho * Wo;

  // im2col: cols[b] is [C*k*k x Ho*Wo]; src[b][r][p] is the input offset or -1 for padding.
  std::vector<long> src(ckk * hw);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const std::size_t r = (c * k + ki) * k + kj;
        for (std::size_t oi = 0; oi < Ho; ++oi)
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(padding);
            long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(padding);
            bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(H) && jj < static_cast<long>(W);
            src[r * hw + oi * Wo + oj] = inside ? static_cast<long>((c * H + ii) * W + jj) : -1;
          }
      }
  auto xd = x.data();
  std::vector<double> cols(B * ckk * hw);
  for (std::size_t b = 0; b < B; ++b) {
    const double* img = xd.data() + b * C * H * W;
    double* col = cols.data() + b * ckk * hw;
    for (std::size_t i = 0; i < ckk * hw; ++i) col[i] = src[i] >= 0 ? img[src[i]] : 0.0;
  }
  std::vector<double> out(B * Co * hw);
  auto Wm = detail::cmap(weight.data().data(), Co, ckk);
  for (std::size_t b = 0; b < B; ++b) {
    auto O = detail::mmap(out.data() + b * Co * hw, Co, hw);
    O.noalias() = Wm * detail::cmap(cols.data() + b * ckk * hw, ckk, hw);
    if (bias.defined()) O.colwise() += detail::cmap(bias.data().data(), Co, 1).col(0);
  }
  auto xh = x.handle(), wh = weight.handle();
  std::shared_ptr<detail::TensorImpl> bh = bias.defined() ? bias.handle() : nullptr;
  const Tensor& bref = bias.defined() ? bias : x;
  return detail::make_result(
      "conv2d", {B, Co, Ho, Wo}, std::move(out), {&x, &weight, &bref},
      [xh, wh, bh, cols = std::move(cols), src = std::move(src), B, C, H, W, Co, ckk, hw](const std::vector<double>& g, const std::vector<double>&) {
        auto Wm = detail::cmap(wh->data.data(), Co, ckk);
        std::vector<double> dcol(ckk * hw);
        for (std::size_t b = 0; b < B; ++b) {
          auto G = detail::cmap(g.data() + b * Co * hw, Co, hw);
          if (wh->requires_grad)
            detail::mmap(detail::grad_buffer(*wh).data(), Co, ckk).noalias() +=
                G * detail::cmap(cols.data() + b * ckk * hw, ckk, hw).transpose();
          if (bh && bh->requires_grad) {
            auto& gb = detail::grad_buffer(*bh);
            const double* gp = g.data() + b * Co * hw;
            for (std::size_t c = 0; c < Co; ++c) {
              double s = 0;
              for (std::size_t i = 0; i < hw; ++i) s += gp[c * hw + i];
              gb[c] += s;
            }
          }
          if (xh->requires_grad) {
            detail::mmap(dcol.data(), ckk, hw).noalias() = Wm.transpose() * G;
            double* gx = detail::grad_buffer(*xh).data() + b * C * H * W;
            for (std::size_t i = 0; i < ckk * hw; ++i)
              if (src[i] >= 0) gx[src[i]] += dcol[i];
          }
        }
      });
}

/// Adaptive average pooling to 1x1, flattened: [B x C x H x W] -> [B x C].
inline Tensor adaptive_avg_pool_1x1(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("adaptive_avg_pool_1x1: expected [B,C,H,W], got " + to_string(x.shape()));
  const std::size_t BC = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(BC);
  auto xd = x.data();
  for (std::size_t i = 0; i < BC; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += xd[i * hw + j];
    out[i] = s / static_cast<double>(hw);
  }
  auto xh = x.handle();
  return detail::make_result("adaptive_avg_pool_1x1", {x.dim(0), x.dim(1)}, std::move(out), {&x},
                             [xh, BC, hw](const std::vector<double>& g, const std::vector<double>&) {
                               auto& gx = detail::grad_buffer(*xh);
                               const double inv = 1.0 / static_cast<double>(hw);
                               for (std::size_t i = 0; i < BC; ++i)
                                 for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g[i] * inv;
                             });
}

}  // namespace lesionfuse
