#pragma once

// Differentiable ops over nn::Tensor. Images are NCHW, contiguous.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "udanas/tensor.hpp"

namespace udanas::nn {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using LabelMap = Eigen::ArrayXi;

/// (offset, count) ranges of input channels selected from a wider stored weight.
using ChannelSegments = std::vector<std::pair<Index, Index>>;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename Scalar>
void im2col(const Scalar* img, Index channels, Index height, Index width, Index kernel,
            Index stride, Index pad, Index out_h, Index out_w, Scalar* col) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx) {
        Scalar* row = col + ((c * kernel + ky) * kernel + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          Scalar* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, Scalar(0));
            continue;
          }
          const Scalar* src = img + (c * height + iy) * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < width) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, Index channels, Index height, Index width, Index kernel,
                Index stride, Index pad, Index out_h, Index out_w, Scalar* img) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx) {
        const Scalar* row = col + ((c * kernel + ky) * kernel + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          Scalar* dst = img + (c * height + iy) * width;
          const Scalar* src = row + oy * out_w;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  return make_result<Scalar>(a.shape(), a.value() + b.value(), {a, b}, [](Node<Scalar>& out) {
    for (auto& p : out.parents)
      if (p->requires_grad) p->grad_buffer() += out.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  return make_result<Scalar>(a.shape(), a.value() - b.value(), {a, b}, [](Node<Scalar>& out) {
    if (out.parents[0]->requires_grad) out.parents[0]->grad_buffer() += out.grad;
    if (out.parents[1]->requires_grad) out.parents[1]->grad_buffer() -= out.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  return make_result<Scalar>(a.shape(), a.value() * b.value(), {a, b}, [](Node<Scalar>& out) {
    auto& x = *out.parents[0];
    auto& y = *out.parents[1];
    if (x.requires_grad) x.grad_buffer() += out.grad * y.value;
    if (y.requires_grad) y.grad_buffer() += out.grad * x.value;
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return make_result<Scalar>(a.shape(), a.value() * s, {a}, [s](Node<Scalar>& out) {
    if (out.parents[0]->requires_grad) out.parents[0]->grad_buffer() += out.grad * s;
  });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) { return scale(a, s); }

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  typename Tensor<Scalar>::Array v(1);
  v[0] = a.value().sum();
  return make_result<Scalar>({1}, std::move(v), {a}, [](Node<Scalar>& out) {
    auto& in = *out.parents[0];
    if (in.requires_grad) in.grad_buffer() += out.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return make_result<Scalar>(a.shape(), a.value().max(Scalar(0)), {a}, [](Node<Scalar>& out) {
    auto& in = *out.parents[0];
    if (in.requires_grad) in.grad_buffer() += (in.value > Scalar(0)).select(out.grad, Scalar(0));
  });
}

// ---------------------------------------------------------------------------
// Small vector ops used by the relaxed MRF sampler

/// softmax(v / temperature) over a 1-D tensor, max-shifted.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& v, Scalar temperature = Scalar(1)) {
  detail::require(v.rank() == 1, "softmax expects a vector");
  if (!(temperature > Scalar(0))) throw DomainError("softmax temperature must be positive");
  typename Tensor<Scalar>::Array z = v.value() / temperature;
  z = (z - z.maxCoeff()).exp();
  z /= z.sum();
  return make_result<Scalar>(v.shape(), std::move(z), {v}, [temperature](Node<Scalar>& out) {
    auto& in = *out.parents[0];
    if (!in.requires_grad) return;
    const Scalar gy = (out.grad * out.value).sum();
    in.grad_buffer() += out.value * (out.grad - gy) / temperature;
  });
}

/// M v for M of shape (rows, cols) and v of shape (cols).
template <typename Scalar>
Tensor<Scalar> matvec(const Tensor<Scalar>& m, const Tensor<Scalar>& v) {
  detail::require(m.rank() == 2 && v.rank() == 1 && m.dim(1) == v.dim(0),
                  "matvec: incompatible shapes " + to_string(m.shape()) + " x " + to_string(v.shape()));
  const Index rows = m.dim(0), cols = m.dim(1);
  Eigen::Map<const RowMatrix<Scalar>> mm(m.data(), rows, cols);
  typename Tensor<Scalar>::Array out = (mm * v.value().matrix()).array();
  return make_result<Scalar>({rows}, std::move(out), {m, v}, [rows, cols](Node<Scalar>& o) {
    auto& mn = *o.parents[0];
    auto& vn = *o.parents[1];
    if (mn.requires_grad) {
      Eigen::Map<RowMatrix<Scalar>> dm(mn.grad_buffer().data(), rows, cols);
      dm.noalias() += o.grad.matrix() * vn.value.matrix().transpose();
    }
    if (vn.requires_grad) {
      Eigen::Map<const RowMatrix<Scalar>> mv(mn.value.data(), rows, cols);
      vn.grad_buffer().matrix().noalias() += mv.transpose() * o.grad.matrix();
    }
  });
}

/// Mᵀ v for M of shape (rows, cols) and v of shape (rows).
template <typename Scalar>
Tensor<Scalar> matvec_transposed(const Tensor<Scalar>& m, const Tensor<Scalar>& v) {
  detail::require(m.rank() == 2 && v.rank() == 1 && m.dim(0) == v.dim(0),
                  "matvec_transposed: incompatible shapes " + to_string(m.shape()) + " x " +
                      to_string(v.shape()));
  const Index rows = m.dim(0), cols = m.dim(1);
  Eigen::Map<const RowMatrix<Scalar>> mm(m.data(), rows, cols);
  typename Tensor<Scalar>::Array out = (mm.transpose() * v.value().matrix()).array();
  return make_result<Scalar>({cols}, std::move(out), {m, v}, [rows, cols](Node<Scalar>& o) {
    auto& mn = *o.parents[0];
    auto& vn = *o.parents[1];
    if (mn.requires_grad) {
      Eigen::Map<RowMatrix<Scalar>> dm(mn.grad_buffer().data(), rows, cols);
      dm.noalias() += vn.value.matrix() * o.grad.matrix().transpose();
    }
    if (vn.requires_grad) {
      Eigen::Map<const RowMatrix<Scalar>> mv(mn.value.data(), rows, cols);
      vn.grad_buffer().matrix().noalias() += mv * o.grad.matrix();
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

/// Cross-correlation of x (N, Cin, H, W) with w (Cout, Cin, K, K); b (Cout) may be undefined.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b,
                      Index stride, Index pad) {
  detail::require(x.rank() == 4 && w.rank() == 4, "conv2d expects 4-D input and weight");
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == cin && w.dim(3) == k,
                  "conv2d: weight " + to_string(w.shape()) + " incompatible with input " +
                      to_string(x.shape()));
  detail::require(!b.defined() || (b.rank() == 1 && b.dim(0) == cout), "conv2d: bad bias shape");
  detail::require(stride >= 1 && h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: bad geometry");
  const Index ho = (h + 2 * pad - k) / stride + 1;
  const Index wo = (wd + 2 * pad - k) / stride + 1;
  const Index plane = ho * wo, rows = cin * k * k;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  typename Tensor<Scalar>::Array out(n * cout * plane);
  Eigen::Map<const RowMatrix<Scalar>> wm(w.data(), cout, rows);
  RowMatrix<Scalar> col(direct ? 0 : rows, direct ? 0 : plane);
  for (Index s = 0; s < n; ++s) {
    const Scalar* img = x.data() + s * cin * h * wd;
    Eigen::Map<RowMatrix<Scalar>> o(out.data() + s * cout * plane, cout, plane);
    if (direct) {
      o.noalias() = wm * Eigen::Map<const RowMatrix<Scalar>>(img, rows, plane);
    } else {
      detail::im2col(img, cin, h, wd, k, stride, pad, ho, wo, col.data());
      o.noalias() = wm * col;
    }
    if (b.defined()) o.colwise() += b.value().matrix();
  }

  std::vector<Tensor<Scalar>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<Scalar>(
      {n, cout, ho, wo}, std::move(out), std::move(parents),
      [=](Node<Scalar>& o) {
        auto& xn = *o.parents[0];
        auto& wn = *o.parents[1];
        Node<Scalar>* bn = o.parents.size() > 2 ? o.parents[2].get() : nullptr;
        Eigen::Map<const RowMatrix<Scalar>> wv(wn.value.data(), cout, rows);
        RowMatrix<Scalar> colb(direct ? 0 : rows, direct ? 0 : plane);
        RowMatrix<Scalar> dcol;
        for (Index s = 0; s < n; ++s) {
          Eigen::Map<const RowMatrix<Scalar>> g(o.grad.data() + s * cout * plane, cout, plane);
          const Scalar* img = xn.value.data() + s * cin * h * wd;
          if (wn.requires_grad) {
            Eigen::Map<RowMatrix<Scalar>> dw(wn.grad_buffer().data(), cout, rows);
            if (direct) {
              dw.noalias() += g * Eigen::Map<const RowMatrix<Scalar>>(img, rows, plane).transpose();
            } else {
              detail::im2col(img, cin, h, wd, k, stride, pad, ho, wo, colb.data());
              dw.noalias() += g * colb.transpose();
            }
          }
          if (bn && bn->requires_grad) bn->grad_buffer().matrix() += g.rowwise().sum();
          if (xn.requires_grad) {
            Scalar* dimg = xn.grad_buffer().data() + s * cin * h * wd;
            if (direct) {
              Eigen::Map<RowMatrix<Scalar>>(dimg, rows, plane).noalias() += wv.transpose() * g;
            } else {
              dcol.noalias() = wv.transpose() * g;
              detail::col2im_add(dcol.data(), cin, h, wd, k, stride, pad, ho, wo, dimg);
            }
          }
        }
      });
}

/// Transposed convolution with kernel 2 and stride 2: (N, Cin, H, W) -> (N, Cout, 2H, 2W).
/// The weight is stored (Cout, Cin, 2, 2) so it slices like an ordinary conv weight.
template <typename Scalar>
Tensor<Scalar> conv_transpose2x2(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                 const Tensor<Scalar>& b) {
  detail::require(x.rank() == 4 && w.rank() == 4 && w.dim(2) == 2 && w.dim(3) == 2,
                  "conv_transpose2x2 expects 4-D input and a (Cout, Cin, 2, 2) weight");
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0);
  detail::require(w.dim(1) == cin, "conv_transpose2x2: weight " + to_string(w.shape()) +
                                       " incompatible with input " + to_string(x.shape()));
  detail::require(!b.defined() || (b.rank() == 1 && b.dim(0) == cout),
                  "conv_transpose2x2: bad bias shape");
  using StridedMap = Eigen::Map<const RowMatrix<Scalar>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
  using MutableStridedMap = Eigen::Map<RowMatrix<Scalar>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
  const Index plane = h * wd, oh = 2 * h, ow = 2 * wd;
  const Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic> wstride(cin * 4, 4);

  typename Tensor<Scalar>::Array out(n * cout * oh * ow);
  RowMatrix<Scalar> y(cout, plane);
  for (Index s = 0; s < n; ++s) {
    Eigen::Map<const RowMatrix<Scalar>> xs(x.data() + s * cin * plane, cin, plane);
    Scalar* os = out.data() + s * cout * oh * ow;
    for (int d = 0; d < 4; ++d) {
      const Index dy = d / 2, dx = d % 2;
      y.noalias() = StridedMap(w.data() + d, cout, cin, wstride) * xs;
      for (Index c = 0; c < cout; ++c) {
        const Scalar bias = b.defined() ? b.value()[c] : Scalar(0);
        for (Index i = 0; i < h; ++i)
          for (Index j = 0; j < wd; ++j)
            os[(c * oh + 2 * i + dy) * ow + 2 * j + dx] = y(c, i * wd + j) + bias;
      }
    }
  }

  std::vector<Tensor<Scalar>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<Scalar>(
      {n, cout, oh, ow}, std::move(out), std::move(parents), [=](Node<Scalar>& o) {
        auto& xn = *o.parents[0];
        auto& wn = *o.parents[1];
        Node<Scalar>* bn = o.parents.size() > 2 ? o.parents[2].get() : nullptr;
        RowMatrix<Scalar> gy(cout, plane);
        for (Index s = 0; s < n; ++s) {
          Eigen::Map<const RowMatrix<Scalar>> xs(xn.value.data() + s * cin * plane, cin, plane);
          const Scalar* gs = o.grad.data() + s * cout * oh * ow;
          for (int d = 0; d < 4; ++d) {
            const Index dy = d / 2, dx = d % 2;
            for (Index c = 0; c < cout; ++c)
              for (Index i = 0; i < h; ++i)
                for (Index j = 0; j < wd; ++j)
                  gy(c, i * wd + j) = gs[(c * oh + 2 * i + dy) * ow + 2 * j + dx];
            if (wn.requires_grad) {
              MutableStridedMap(wn.grad_buffer().data() + d, cout, cin, wstride).noalias() +=
                  gy * xs.transpose();
            }
            if (bn && bn->requires_grad) bn->grad_buffer().matrix() += gy.rowwise().sum();
            if (xn.requires_grad) {
              Eigen::Map<RowMatrix<Scalar>>(xn.grad_buffer().data() + s * cin * plane, cin, plane)
                  .noalias() += StridedMap(wn.value.data() + d, cout, cin, wstride).transpose() * gy;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Weight sharing

/// View of a stored (Cout_max, Cin_max, K, K) weight: the leading `out_count`
/// output channels, the given input channel segments, and the centered k x k
/// window. Gradients scatter back into the shared storage.
template <typename Scalar>
Tensor<Scalar> slice_conv_weight(const Tensor<Scalar>& w, Index out_count,
                                 const ChannelSegments& in_segments, Index k) {
  detail::require(w.rank() == 4, "slice_conv_weight expects a 4-D weight");
  const Index cout_max = w.dim(0), cin_max = w.dim(1), kmax = w.dim(2);
  detail::require(out_count >= 1 && out_count <= cout_max, "slice_conv_weight: bad output count");
  detail::require(k >= 1 && k <= kmax && (kmax - k) % 2 == 0, "slice_conv_weight: bad kernel crop");
  Index cin = 0;
  for (auto [off, cnt] : in_segments) {
    detail::require(off >= 0 && cnt >= 0 && off + cnt <= cin_max, "slice_conv_weight: bad segment");
    cin += cnt;
  }
  const Index crop = (kmax - k) / 2;

  // Flat source index of every element of the slice, in output order.
  std::vector<Index> src;
  src.reserve(static_cast<std::size_t>(out_count * cin * k * k));
  for (Index co = 0; co < out_count; ++co)
    for (auto [off, cnt] : in_segments)
      for (Index ci = off; ci < off + cnt; ++ci)
        for (Index ky = 0; ky < k; ++ky)
          for (Index kx = 0; kx < k; ++kx)
            src.push_back(((co * cin_max + ci) * kmax + ky + crop) * kmax + kx + crop);

  typename Tensor<Scalar>::Array out(static_cast<Index>(src.size()));
  for (std::size_t i = 0; i < src.size(); ++i) out[static_cast<Index>(i)] = w.value()[src[i]];
  return make_result<Scalar>({out_count, cin, k, k}, std::move(out), {w},
                             [src = std::move(src)](Node<Scalar>& o) {
                               auto& wn = *o.parents[0];
                               if (!wn.requires_grad) return;
                               auto& g = wn.grad_buffer();
                               for (std::size_t i = 0; i < src.size(); ++i)
                                 g[src[i]] += o.grad[static_cast<Index>(i)];
                             });
}

/// Leading `count` entries along the first dimension.
template <typename Scalar>
Tensor<Scalar> slice_leading(const Tensor<Scalar>& v, Index count) {
  detail::require(v.rank() >= 1 && count >= 1 && count <= v.dim(0), "slice_leading: bad count");
  Shape shape = v.shape();
  const Index inner = v.size() / shape[0];
  shape[0] = count;
  return make_result<Scalar>(std::move(shape), v.value().head(count * inner), {v},
                             [n = count * inner](Node<Scalar>& o) {
                               auto& in = *o.parents[0];
                               if (in.requires_grad) in.grad_buffer().head(n) += o.grad;
                             });
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const Index n = parts[0].dim(0), h = parts[0].dim(2), wd = parts[0].dim(3);
  Index channels = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 4 && p.dim(0) == n && p.dim(2) == h && p.dim(3) == wd,
                    "concat_channels: incompatible shape " + to_string(p.shape()));
    channels += p.dim(1);
  }
  if (parts.size() == 1) return parts[0];
  const Index plane = h * wd;
  typename Tensor<Scalar>::Array out(n * channels * plane);
  std::vector<Index> widths;
  for (Index s = 0; s < n; ++s) {
    Index c0 = 0;
    for (const auto& p : parts) {
      const Index len = p.dim(1) * plane;
      out.segment((s * channels + c0) * plane, len) = p.value().segment(s * len, len);
      c0 += p.dim(1);
    }
  }
  for (const auto& p : parts) widths.push_back(p.dim(1));
  return make_result<Scalar>({n, channels, h, wd}, std::move(out), parts,
                             [=](Node<Scalar>& o) {
                               for (Index s = 0; s < n; ++s) {
                                 Index c0 = 0;
                                 for (std::size_t i = 0; i < widths.size(); ++i) {
                                   const Index len = widths[i] * plane;
                                   auto& pn = *o.parents[i];
                                   if (pn.requires_grad)
                                     pn.grad_buffer().segment(s * len, len) +=
                                         o.grad.segment((s * channels + c0) * plane, len);
                                   c0 += widths[i];
                                 }
                               }
                             });
}

/// y[n, c, :, :] = x[n, c, :, :] * m[c].
template <typename Scalar>
Tensor<Scalar> channel_scale(const Tensor<Scalar>& x, const Tensor<Scalar>& m) {
  detail::require(x.rank() == 4 && m.rank() == 1 && m.dim(0) == x.dim(1),
                  "channel_scale: incompatible shapes " + to_string(x.shape()) + " and " +
                      to_string(m.shape()));
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  typename Tensor<Scalar>::Array out(x.size());
  for (Index s = 0; s < n; ++s)
    for (Index ch = 0; ch < c; ++ch)
      out.segment((s * c + ch) * plane, plane) = x.value().segment((s * c + ch) * plane, plane) * m.value()[ch];
  return make_result<Scalar>(x.shape(), std::move(out), {x, m}, [=](Node<Scalar>& o) {
    auto& xn = *o.parents[0];
    auto& mn = *o.parents[1];
    for (Index s = 0; s < n; ++s)
      for (Index ch = 0; ch < c; ++ch) {
        const auto g = o.grad.segment((s * c + ch) * plane, plane);
        if (xn.requires_grad) xn.grad_buffer().segment((s * c + ch) * plane, plane) += g * mn.value[ch];
        if (mn.requires_grad)
          mn.grad_buffer()[ch] += (g * xn.value.segment((s * c + ch) * plane, plane)).sum();
      }
  });
}

/// Parameter-free per-sample, per-channel normalization over H x W.
template <typename Scalar>
Tensor<Scalar> instance_norm(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-5)) {
  detail::require(x.rank() == 4, "instance_norm expects NCHW");
  const Index groups = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  typename Tensor<Scalar>::Array out(x.size());
  typename Tensor<Scalar>::Array inv_std(groups);
  for (Index gi = 0; gi < groups; ++gi) {
    const auto seg = x.value().segment(gi * plane, plane);
    const Scalar mu = seg.mean();
    const Scalar var = (seg - mu).square().mean();
    inv_std[gi] = Scalar(1) / std::sqrt(var + eps);
    out.segment(gi * plane, plane) = (seg - mu) * inv_std[gi];
  }
  return make_result<Scalar>(x.shape(), std::move(out), {x}, [=](Node<Scalar>& o) {
    auto& xn = *o.parents[0];
    if (!xn.requires_grad) return;
    for (Index gi = 0; gi < groups; ++gi) {
      const auto g = o.grad.segment(gi * plane, plane);
      const auto y = o.value.segment(gi * plane, plane);
      const Scalar gm = g.mean();
      const Scalar gym = (g * y).mean();
      xn.grad_buffer().segment(gi * plane, plane) += inv_std[gi] * (g - gm - y * gym);
    }
  });
}

// ---------------------------------------------------------------------------
// Loss

/// Pixel-averaged weighted cross-entropy over logits (N, C, H, W).
///
/// loss = (1 / NHW) * sum_p pixel_weight[p] * class_weight[y_p] * (-log softmax(z_p)[y_p])
///
/// Empty weight arrays mean all-ones. Labels < 0 are ignored.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const LabelMap& labels,
                             const typename Tensor<Scalar>::Array& pixel_weights = {},
                             const typename Tensor<Scalar>::Array& class_weights = {}) {
  detail::require(logits.rank() == 4, "cross_entropy expects NCHW logits");
  const Index n = logits.dim(0), c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  const Index pixels = n * plane;
  detail::require(labels.size() == pixels, "cross_entropy: label count mismatch");
  detail::require(pixel_weights.size() == 0 || pixel_weights.size() == pixels,
                  "cross_entropy: pixel weight count mismatch");
  detail::require(class_weights.size() == 0 || class_weights.size() == c,
                  "cross_entropy: class weight count mismatch");

  // Per-pixel effective weight and softmax, kept for backward.
  typename Tensor<Scalar>::Array weight(pixels);
  typename Tensor<Scalar>::Array prob(logits.size());
  Scalar total = 0;
  const Scalar* z = logits.data();
  for (Index s = 0; s < n; ++s) {
    for (Index p = 0; p < plane; ++p) {
      const Index pix = s * plane + p;
      const int y = labels[pix];
      detail::require(y < c, "cross_entropy: label out of range");
      Scalar zmax = z[(s * c) * plane + p];
      for (Index ch = 1; ch < c; ++ch) zmax = std::max(zmax, z[(s * c + ch) * plane + p]);
      Scalar denom = 0;
      for (Index ch = 0; ch < c; ++ch) {
        const Index at = (s * c + ch) * plane + p;
        prob[at] = std::exp(z[at] - zmax);
        denom += prob[at];
      }
      for (Index ch = 0; ch < c; ++ch) prob[(s * c + ch) * plane + p] /= denom;
      Scalar wgt = y < 0 ? Scalar(0) : Scalar(1);
      if (y >= 0 && pixel_weights.size()) wgt *= pixel_weights[pix];
      if (y >= 0 && class_weights.size()) wgt *= class_weights[y];
      weight[pix] = wgt;
      if (wgt != Scalar(0)) {
        const Scalar nll = std::log(denom) + zmax - z[(s * c + y) * plane + p];
        total += wgt * nll;
      }
    }
  }
  typename Tensor<Scalar>::Array out(1);
  out[0] = total / static_cast<Scalar>(pixels);
  return make_result<Scalar>(
      {1}, std::move(out), {logits},
      [=, labels = labels, weight = std::move(weight), prob = std::move(prob)](Node<Scalar>& o) {
        auto& ln = *o.parents[0];
        if (!ln.requires_grad) return;
        auto& g = ln.grad_buffer();
        const Scalar up = o.grad[0] / static_cast<Scalar>(pixels);
        for (Index s = 0; s < n; ++s)
          for (Index p = 0; p < plane; ++p) {
            const Index pix = s * plane + p;
            const Scalar wgt = weight[pix];
            if (wgt == Scalar(0)) continue;
            for (Index ch = 0; ch < c; ++ch) {
              const Index at = (s * c + ch) * plane + p;
              g[at] += up * wgt * (prob[at] - (ch == labels[pix] ? Scalar(1) : Scalar(0)));
            }
          }
      });
}

}  // namespace udanas::nn
