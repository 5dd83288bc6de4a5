#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "ifmd/tape.hpp"

namespace ifmd {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;

  static ConvGeometry of(const Shape& x, const Shape& weight, std::size_t stride, std::size_t pad) {
    if (x.size() != 4 || weight.size() != 4 || weight[1] != x[1] || weight[2] != weight[3])
      throw DimensionError("conv2d: input " + shape_string(x) + " incompatible with kernel " + shape_string(weight));
    if (stride == 0) throw ContractError("conv2d: stride must be positive");
    ConvGeometry g{x[0], x[1], x[2], x[3], weight[0], weight[2], stride, pad, 0, 0};
    if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k)
      throw DimensionError("conv2d: kernel larger than padded input " + shape_string(x));
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    return g;
  }
  std::size_t patch() const { return cin * k * k; }
  std::size_t positions() const { return n * ho * wo; }
};

namespace detail {

// Unfolds every receptive field into a column: [cin*k*k] x [n*ho*wo].
inline Tensor im2col(const Tensor& x, const ConvGeometry& g) {
  Tensor cols({g.patch(), g.positions()});
  double* out = cols.mutable_data().data();
  const double* in = x.data().data();
  const std::size_t cols_n = g.positions();
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = out + ((ci * g.k + ky) * g.k + kx) * cols_n;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* plane = in + (n * g.cin + ci) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            double* dst = row + (n * g.ho + oy) * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ox] = plane[iy * g.w + ix];
            }
          }
        }
      }
  return cols;
}

inline Tensor col2im(const Tensor& cols, const ConvGeometry& g) {
  Tensor x({g.n, g.cin, g.h, g.w});
  double* out = x.mutable_data().data();
  const double* in = cols.data().data();
  const std::size_t cols_n = g.positions();
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = in + ((ci * g.k + ky) * g.k + kx) * cols_n;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* plane = out + (n * g.cin + ci) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            const double* src = row + (n * g.ho + oy) * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) plane[iy * g.w + ix] += src[ox];
            }
          }
        }
      }
  return x;
}

}  // namespace detail

// Cross-correlation of x [N x Cin x H x W] with weight [Cout x Cin x k x k],
// zero padding `pad`, plus a per-output-channel bias [Cout].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad) {
  detail::same_tape(x, weight, "conv2d");
  detail::same_tape(x, bias, "conv2d");
  const ConvGeometry g = ConvGeometry::of(x.shape(), weight.shape(), stride, pad);
  if (bias.value().size() != g.cout) throw DimensionError("conv2d: bias size does not match output channels");

  auto cols = std::make_shared<Tensor>(detail::im2col(x.value(), g));
  Tensor rows({g.cout, g.positions()});
  kernel::gemm_nn(g.cout, g.patch(), g.positions(), weight.value().data().data(), cols->data().data(),
                  rows.mutable_data().data(), false);
  auto rd = rows.mutable_data();
  for (std::size_t co = 0; co < g.cout; ++co) {
    const double b = bias.value()[co];
    for (std::size_t p = 0; p < g.positions(); ++p) rd[co * g.positions() + p] += b;
  }
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().record(
      Op::conv2d, {ix, iw, ib}, rows_to_channels(rows, g.n, g.ho, g.wo), [g, cols, ix, iw, ib](const Tensor& adj, Tape& t) {
        const Tensor dout = channels_to_rows(adj);
        const std::size_t np = g.positions();
        if (t.tracked(iw)) {
          Tensor dw(t.value(iw).shape());
          kernel::gemm_nt(g.cout, np, g.patch(), dout.data().data(), cols->data().data(), dw.mutable_data().data(),
                          false);
          t.accumulate(iw, std::move(dw));
        }
        if (t.tracked(ib)) {
          Tensor db(t.value(ib).shape());
          for (std::size_t co = 0; co < g.cout; ++co) {
            double s = 0.0;
            for (std::size_t p = 0; p < np; ++p) s += dout[co * np + p];
            db[co] = s;
          }
          t.accumulate(ib, std::move(db));
        }
        if (t.tracked(ix)) {
          Tensor dcols({g.patch(), np});
          kernel::gemm_tn(g.patch(), g.cout, np, t.value(iw).data().data(), dout.data().data(),
                          dcols.mutable_data().data(), false);
          t.accumulate(ix, detail::col2im(dcols, g));
        }
      });
}

// Non-overlapping max pooling with a square window; trailing rows/cols that do
// not fill a window are dropped. Ties resolve to the first index in row-major order.
inline Var maxpool(const Var& x, std::size_t window = 2) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("maxpool expects N x C x H x W, got " + shape_string(xv.shape()));
  if (window == 0 || xv.dim(2) < window || xv.dim(3) < window)
    throw DimensionError("maxpool: window larger than input " + shape_string(xv.shape()));
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t ho = h / window, wo = w / window;
  Tensor out({xv.dim(0), xv.dim(1), ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const double* in = xv.data().data();
  auto od = out.mutable_data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + (oy * window) * w + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = p * h * w + (oy * window + dy) * w + ox * window + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        od[o] = in[best];
        (*argmax)[o] = best;
      }
  const std::size_t ix = x.id();
  return x.tape().record(Op::maxpool, {ix}, std::move(out), [ix, argmax](const Tensor& adj, Tape& t) {
    Tensor g(t.value(ix).shape());
    auto gd = g.mutable_data();
    for (std::size_t o = 0; o < adj.size(); ++o) gd[(*argmax)[o]] += adj[o];
    t.accumulate(ix, std::move(g));
  });
}

// weight [dout x din] * x [din x m] + bias [dout] broadcast over columns.
inline Var dense(const Var& x, const Var& weight, const Var& bias) {
  detail::same_tape(x, weight, "dense");
  detail::same_tape(x, bias, "dense");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (!xv.is_matrix() || !wv.is_matrix() || wv.cols() != xv.rows() || bias.value().size() != wv.rows())
    throw DimensionError("dense: input " + shape_string(xv.shape()) + ", weight " + shape_string(wv.shape()) +
                         ", bias " + shape_string(bias.shape()));
  const std::size_t dout = wv.rows(), din = wv.cols(), m = xv.cols();
  Tensor y({dout, m});
  kernel::gemm_nn(dout, din, m, wv.data().data(), xv.data().data(), y.mutable_data().data(), false);
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < dout; ++i)
    for (std::size_t j = 0; j < m; ++j) yd[i * m + j] += bias.value()[i];
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().record(Op::dense, {ix, iw, ib}, std::move(y), [ix, iw, ib, dout, din, m](const Tensor& adj, Tape& t) {
    if (t.tracked(iw)) {
      Tensor dw({dout, din});
      kernel::gemm_nt(dout, m, din, adj.data().data(), t.value(ix).data().data(), dw.mutable_data().data(), false);
      t.accumulate(iw, std::move(dw));
    }
    if (t.tracked(ib)) {
      Tensor db(t.value(ib).shape());
      for (std::size_t i = 0; i < dout; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += adj[i * m + j];
        db[i] = s;
      }
      t.accumulate(ib, std::move(db));
    }
    if (t.tracked(ix)) {
      Tensor dx({din, m});
      kernel::gemm_tn(din, dout, m, t.value(iw).data().data(), adj.data().data(), dx.mutable_data().data(), false);
      t.accumulate(ix, std::move(dx));
    }
  });
}

// N x C x H x W  ->  (C*H*W) x N, one column per sample.
inline Var flatten(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("flatten expects a batched tensor, got " + shape_string(s));
  const std::size_t n = s[0];
  return transpose(reshape(x, {n, x.value().size() / n}));
}

// Column-wise softmax probabilities of a classes x batch logit matrix.
inline Tensor softmax_columns(const Tensor& logits) {
  require_matrix(logits, "softmax");
  const std::size_t k = logits.rows(), m = logits.cols();
  Tensor p({k, m});
  for (std::size_t j = 0; j < m; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) mx = std::max(mx, logits[i * m + j]);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(logits[i * m + j] - mx);
    for (std::size_t i = 0; i < k; ++i) p[i * m + j] = std::exp(logits[i * m + j] - mx) / z;
  }
  return p;
}

// Mean over the batch of -log softmax(logits)[label], via max-shifted log-sum-exp.
inline Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "softmax_cross_entropy");
  const std::size_t k = lv.rows(), m = lv.cols();
  if (labels.size() != m) throw DimensionError("softmax_cross_entropy: label count does not match batch");
  if (m == 0) throw DataError("softmax_cross_entropy: empty batch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw DataError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) mx = std::max(mx, lv[i * m + j]);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(lv[i * m + j] - mx);
    total += mx + std::log(z) - lv[static_cast<std::size_t>(labels[j]) * m + j];
  }
  const std::size_t il = logits.id();
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape().record(Op::softmax_cross_entropy, {il}, Tensor::scalar(total / static_cast<double>(m)),
                              [il, ys = std::move(ys)](const Tensor& adj, Tape& t) {
                                Tensor g = softmax_columns(t.value(il));
                                const std::size_t mm = g.cols();
                                for (std::size_t j = 0; j < mm; ++j) g[static_cast<std::size_t>(ys[j]) * mm + j] -= 1.0;
                                t.accumulate(il, scale(g, adj[0] / static_cast<double>(mm)));
                              });
}

}  // namespace ifmd
