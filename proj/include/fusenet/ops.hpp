#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fusenet/raster.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

enum class Conv2dAlgo { kIm2col, kDirect };

namespace detail {

/// Unfolds zero-padded KxK patches into a (N*H*W) x (Ci*K*K) column-major
/// matrix so the convolution becomes a single matrix product.
template <typename S>
void im2col(const S* x, Eigen::Index N, Eigen::Index Ci, Eigen::Index H, Eigen::Index W,
            Eigen::Index K, MatX<S>& patches) {
  const Eigen::Index pad = (K - 1) / 2;
  const Eigen::Index HW = H * W;
  patches.resize(N * HW, Ci * K * K);
  for (Eigen::Index ci = 0; ci < Ci; ++ci) {
    for (Eigen::Index ky = 0; ky < K; ++ky) {
      for (Eigen::Index kx = 0; kx < K; ++kx) {
        const Eigen::Index f = (ci * K + ky) * K + kx;
        S* col = patches.col(f).data();
        const Eigen::Index x_lo = std::max<Eigen::Index>(0, pad - kx);
        const Eigen::Index x_hi = std::min<Eigen::Index>(W, W + pad - kx);
        for (Eigen::Index n = 0; n < N; ++n) {
          const S* plane = x + (n * Ci + ci) * HW;
          for (Eigen::Index y = 0; y < H; ++y) {
            S* dst = col + (n * H + y) * W;
            const Eigen::Index iy = y + ky - pad;
            if (iy < 0 || iy >= H) {
              std::fill(dst, dst + W, S(0));
              continue;
            }
            const S* src = plane + iy * W;
            std::fill(dst, dst + x_lo, S(0));
            std::copy(src + (x_lo + kx - pad), src + (x_hi + kx - pad), dst + x_lo);
            std::fill(dst + x_hi, dst + W, S(0));
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds patch gradients back onto the input grid.
template <typename S>
void col2im_add(const MatX<S>& dpatches, Eigen::Index N, Eigen::Index Ci, Eigen::Index H,
                Eigen::Index W, Eigen::Index K, S* dx) {
  const Eigen::Index pad = (K - 1) / 2;
  const Eigen::Index HW = H * W;
  for (Eigen::Index ci = 0; ci < Ci; ++ci) {
    for (Eigen::Index ky = 0; ky < K; ++ky) {
      for (Eigen::Index kx = 0; kx < K; ++kx) {
        const Eigen::Index f = (ci * K + ky) * K + kx;
        const S* col = dpatches.col(f).data();
        const Eigen::Index x_lo = std::max<Eigen::Index>(0, pad - kx);
        const Eigen::Index x_hi = std::min<Eigen::Index>(W, W + pad - kx);
        for (Eigen::Index n = 0; n < N; ++n) {
          S* plane = dx + (n * Ci + ci) * HW;
          for (Eigen::Index y = 0; y < H; ++y) {
            const Eigen::Index iy = y + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const S* src = col + (n * H + y) * W;
            S* drow = plane + iy * W + (kx - pad);
            for (Eigen::Index xx = x_lo; xx < x_hi; ++xx) drow[xx] += src[xx];
          }
        }
      }
    }
  }
}

template <typename S>
void conv2d_forward_im2col(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                           Tensor<S>& out) {
  const Eigen::Index N = x.shape().n(), Ci = x.shape().c(), H = x.shape().h(), W = x.shape().w();
  const Eigen::Index Co = kernel.shape()[0], K = kernel.shape()[2];
  const Eigen::Index HW = H * W;

  MatX<S> patches;
  im2col(x.data(), N, Ci, H, W, K, patches);
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wmat(
      kernel.data(), Co, Ci * K * K);
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bvec(bias.data(), Co);

  MatX<S> out2(N * HW, Co);
  out2.noalias() = patches * wmat.transpose();
  out2.rowwise() += bvec.transpose();

  S* o = out.data();
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index co = 0; co < Co; ++co)
      std::copy(out2.col(co).data() + n * HW, out2.col(co).data() + (n + 1) * HW,
                o + (n * Co + co) * HW);
}

template <typename S>
void conv2d_forward_direct(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                           Tensor<S>& out) {
  const Eigen::Index N = x.shape().n(), Ci = x.shape().c(), H = x.shape().h(), W = x.shape().w();
  const Eigen::Index Co = kernel.shape()[0], K = kernel.shape()[2];
  const Eigen::Index pad = (K - 1) / 2;
  const S* xv = x.data();
  const S* kv = kernel.data();
  const S* bv = bias.data();
  S* o = out.data();
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index co = 0; co < Co; ++co)
      for (Eigen::Index y = 0; y < H; ++y)
        for (Eigen::Index xx = 0; xx < W; ++xx) {
          S acc = bv[co];
          for (Eigen::Index ci = 0; ci < Ci; ++ci)
            for (Eigen::Index ky = 0; ky < K; ++ky)
              for (Eigen::Index kx = 0; kx < K; ++kx) {
                const Eigen::Index iy = y + ky - pad;
                const Eigen::Index ix = xx + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += xv[((n * Ci + ci) * H + iy) * W + ix] *
                       kv[((co * Ci + ci) * K + ky) * K + kx];
              }
          o[((n * Co + co) * H + y) * W + xx] = acc;
        }
}

}  // namespace detail

/// 2-D cross-correlation with stride 1 and zero "same" padding, plus a
/// per-output-channel bias. Kernel size must be odd (1 or 3 in this network).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                 Conv2dAlgo algo = Conv2dAlgo::kIm2col) {
  if (x.shape().rank() != 4 || kernel.shape().rank() != 4)
    throw std::invalid_argument("conv2d: input and kernel must be rank 4");
  const Eigen::Index N = x.shape().n(), Ci = x.shape().c(), H = x.shape().h(), W = x.shape().w();
  const Eigen::Index Co = kernel.shape()[0], K = kernel.shape()[2];
  if (kernel.shape()[3] != K) throw std::invalid_argument("conv2d: kernel must be square");
  if (K % 2 == 0) throw std::invalid_argument("conv2d: even kernel size " + std::to_string(K));
  if (kernel.shape()[1] != Ci)
    throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(Ci) +
                                ", kernel expects " + std::to_string(kernel.shape()[1]));
  if (bias.shape().rank() != 1 || bias.shape()[0] != Co)
    throw std::invalid_argument("conv2d: bias must be rank 1 with one entry per output channel");

  Tensor<S> out = Tensor<S>::zeros({N, Co, H, W});
  if (algo == Conv2dAlgo::kIm2col)
    detail::conv2d_forward_im2col(x, kernel, bias, out);
  else
    detail::conv2d_forward_direct(x, kernel, bias, out);

  if (x.requires_grad() || kernel.requires_grad() || bias.requires_grad()) {
    Tensor<S> xin = x, kin = kernel, bin = bias;
    const Eigen::Index HW = H * W;
    out.attach_node("conv2d", {x, kernel, bias},
                    [xin, kin, bin, N, Ci, H, W, Co, K, HW](const ArrayX<S>&,
                                                            const ArrayX<S>& grad) mutable {
      MatX<S> dout2(N * HW, Co);
      const S* g = grad.data();
      for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index co = 0; co < Co; ++co)
          std::copy(g + (n * Co + co) * HW, g + (n * Co + co + 1) * HW,
                    dout2.col(co).data() + n * HW);

      if (bin.requires_grad()) {
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> bg(bin.grad_buffer().data(), Co);
        bg.noalias() += dout2.colwise().sum().transpose();
      }
      if (kin.requires_grad()) {
        // The patch matrix is rebuilt rather than kept alive on the tape.
        MatX<S> patches;
        detail::im2col(xin.data(), N, Ci, H, W, K, patches);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> kg(
            kin.grad_buffer().data(), Co, Ci * K * K);
        kg.noalias() += dout2.transpose() * patches;
      }
      if (xin.requires_grad()) {
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wmat(
            kin.data(), Co, Ci * K * K);
        MatX<S> dpatches(N * HW, Ci * K * K);
        dpatches.noalias() = dout2 * wmat;
        detail::col2im_add(dpatches, N, Ci, H, W, K, xin.grad_buffer().data());
      }
    });
  }
  return out;
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major window order, so the backward routing is deterministic.
template <typename S>
Tensor<S> maxpool2x2(const Tensor<S>& x) {
  if (x.shape().rank() != 4) throw std::invalid_argument("maxpool2x2: input must be rank 4");
  const Eigen::Index N = x.shape().n(), C = x.shape().c(), H = x.shape().h(), W = x.shape().w();
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument("maxpool2x2: odd spatial size " + x.shape().str());
  const Eigen::Index Ho = H / 2, Wo = W / 2;

  Tensor<S> out = Tensor<S>::zeros({N, C, Ho, Wo});
  std::vector<Eigen::Index> argmax(size_t(N * C * Ho * Wo));
  const S* xv = x.data();
  S* o = out.data();
  Eigen::Index oi = 0;
  for (Eigen::Index nc = 0; nc < N * C; ++nc) {
    const S* plane = xv + nc * H * W;
    for (Eigen::Index oy = 0; oy < Ho; ++oy)
      for (Eigen::Index ox = 0; ox < Wo; ++ox, ++oi) {
        Eigen::Index best = (2 * oy) * W + 2 * ox;
        S bv = plane[best];
        const Eigen::Index cand[3] = {(2 * oy) * W + 2 * ox + 1, (2 * oy + 1) * W + 2 * ox,
                                      (2 * oy + 1) * W + 2 * ox + 1};
        for (Eigen::Index c : cand)
          if (plane[c] > bv) {
            bv = plane[c];
            best = c;
          }
        o[oi] = bv;
        argmax[size_t(oi)] = nc * H * W + best;
      }
  }

  if (x.requires_grad()) {
    Tensor<S> xin = x;
    out.attach_node("maxpool2x2", {x},
                    [xin, argmax = std::move(argmax)](const ArrayX<S>&,
                                                      const ArrayX<S>& grad) mutable {
      ArrayX<S>& xg = xin.grad_buffer();
      for (Eigen::Index i = 0; i < grad.size(); ++i) xg[argmax[size_t(i)]] += grad[i];
    });
  }
  return out;
}

/// Nearest-neighbor 2x upsampling: each input value fills a 2x2 block.
template <typename S>
Tensor<S> upsample2x(const Tensor<S>& x) {
  if (x.shape().rank() != 4) throw std::invalid_argument("upsample2x: input must be rank 4");
  const Eigen::Index N = x.shape().n(), C = x.shape().c(), H = x.shape().h(), W = x.shape().w();
  Tensor<S> out = Tensor<S>::zeros({N, C, 2 * H, 2 * W});
  const S* xv = x.data();
  S* o = out.data();
  for (Eigen::Index nc = 0; nc < N * C; ++nc) {
    const S* src = xv + nc * H * W;
    S* dst = o + nc * 4 * H * W;
    for (Eigen::Index y = 0; y < H; ++y)
      for (Eigen::Index xx = 0; xx < W; ++xx) {
        const S v = src[y * W + xx];
        S* d = dst + (2 * y) * 2 * W + 2 * xx;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
  if (x.requires_grad()) {
    Tensor<S> xin = x;
    out.attach_node("upsample2x", {x}, [xin, N, C, H, W](const ArrayX<S>&,
                                                         const ArrayX<S>& grad) mutable {
      ArrayX<S>& xg = xin.grad_buffer();
      const S* g = grad.data();
      for (Eigen::Index nc = 0; nc < N * C; ++nc) {
        const S* gsrc = g + nc * 4 * H * W;
        S* dst = xg.data() + nc * H * W;
        for (Eigen::Index y = 0; y < H; ++y)
          for (Eigen::Index xx = 0; xx < W; ++xx) {
            const S* s = gsrc + (2 * y) * 2 * W + 2 * xx;
            dst[y * W + xx] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
          }
      }
    });
  }
  return out;
}

/// Elementwise max(0, x); the subgradient at exactly 0 is 0.
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.raw() = x.array().max(S(0));
  if (x.requires_grad()) {
    Tensor<S> xin = x;
    out.attach_node("relu", {x}, [xin](const ArrayX<S>&, const ArrayX<S>& grad) mutable {
      xin.grad_buffer() += (xin.array() > S(0)).template cast<S>() * grad;
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.raw() = a.array() + b.array();
  if (a.requires_grad() || b.requires_grad()) {
    Tensor<S> ain = a, bin = b;
    out.attach_node("add", {a, b}, [ain, bin](const ArrayX<S>&, const ArrayX<S>& grad) mutable {
      if (ain.requires_grad()) ain.grad_buffer() += grad;
      if (bin.requires_grad()) bin.grad_buffer() += grad;
    });
  }
  return out;
}

/// Multiplication by a compile-time constant factor (loss weighting).
template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.raw() = x.array() * factor;
  if (x.requires_grad()) {
    Tensor<S> xin = x;
    out.attach_node("scale", {x}, [xin, factor](const ArrayX<S>&, const ArrayX<S>& grad) mutable {
      xin.grad_buffer() += grad * factor;
    });
  }
  return out;
}

/// Channel-axis concatenation in list order.
template <typename S>
Tensor<S> concat_channels(std::span<const Tensor<S>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty list");
  const Shape& s0 = parts[0].shape();
  if (s0.rank() != 4) throw std::invalid_argument("concat_channels: parts must be rank 4");
  Eigen::Index Ctot = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.shape().rank() != 4 || p.shape().n() != s0.n() || p.shape().h() != s0.h() ||
        p.shape().w() != s0.w())
      throw std::invalid_argument("concat_channels: batch/spatial mismatch " + s0.str() + " vs " +
                                  p.shape().str());
    Ctot += p.shape().c();
    needs_grad = needs_grad || p.requires_grad();
  }
  const Eigen::Index N = s0.n(), HW = s0.h() * s0.w();
  Tensor<S> out = Tensor<S>::zeros({N, Ctot, s0.h(), s0.w()});
  S* o = out.data();
  Eigen::Index coff = 0;
  for (const auto& p : parts) {
    const Eigen::Index Cp = p.shape().c();
    for (Eigen::Index n = 0; n < N; ++n)
      std::copy(p.data() + n * Cp * HW, p.data() + (n + 1) * Cp * HW,
                o + (n * Ctot + coff) * HW);
    coff += Cp;
  }
  if (needs_grad) {
    std::vector<Tensor<S>> ins(parts.begin(), parts.end());
    out.attach_node("concat_channels", ins,
                    [ins, N, Ctot, HW](const ArrayX<S>&, const ArrayX<S>& grad) mutable {
      Eigen::Index coff = 0;
      for (auto& p : ins) {
        const Eigen::Index Cp = p.shape().c();
        if (p.requires_grad()) {
          ArrayX<S>& pg = p.grad_buffer();
          for (Eigen::Index n = 0; n < N; ++n)
            pg.segment(n * Cp * HW, Cp * HW) += grad.segment((n * Ctot + coff) * HW, Cp * HW);
        }
        coff += Cp;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_channels(std::initializer_list<Tensor<S>> parts) {
  std::vector<Tensor<S>> v(parts);
  return concat_channels(std::span<const Tensor<S>>(v));
}

/// Channel slice [c_begin, c_end); inverse of concat_channels.
template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, Eigen::Index c_begin, Eigen::Index c_end) {
  if (x.shape().rank() != 4) throw std::invalid_argument("slice_channels: input must be rank 4");
  const Eigen::Index N = x.shape().n(), C = x.shape().c(), HW = x.shape().h() * x.shape().w();
  if (c_begin < 0 || c_end > C || c_begin >= c_end)
    throw std::invalid_argument("slice_channels: bad range");
  const Eigen::Index Cs = c_end - c_begin;
  Tensor<S> out = Tensor<S>::zeros({N, Cs, x.shape().h(), x.shape().w()});
  for (Eigen::Index n = 0; n < N; ++n)
    std::copy(x.data() + (n * C + c_begin) * HW, x.data() + (n * C + c_end) * HW,
              out.data() + n * Cs * HW);
  if (x.requires_grad()) {
    Tensor<S> xin = x;
    out.attach_node("slice_channels", {x},
                    [xin, N, C, Cs, HW, c_begin](const ArrayX<S>&, const ArrayX<S>& grad) mutable {
      ArrayX<S>& xg = xin.grad_buffer();
      for (Eigen::Index n = 0; n < N; ++n)
        xg.segment((n * C + c_begin) * HW, Cs * HW) += grad.segment(n * Cs * HW, Cs * HW);
    });
  }
  return out;
}

/// Per-pixel softmax over the channel axis, stabilized by max subtraction.
template <typename S>
Tensor<S> softmax_classes(const Tensor<S>& logits) {
  if (logits.shape().rank() != 4)
    throw std::invalid_argument("softmax_classes: input must be rank 4");
  const Eigen::Index N = logits.shape().n(), K = logits.shape().c(), H = logits.shape().h(),
                     W = logits.shape().w();
  if (K < 2) throw std::invalid_argument("softmax_classes: need at least 2 classes");
  const Eigen::Index HW = H * W;
  Tensor<S> out = Tensor<S>::zeros(logits.shape());
  const S* z = logits.data();
  S* p = out.data();
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index px = 0; px < HW; ++px) {
      const Eigen::Index base = n * K * HW + px;
      S m = z[base];
      for (Eigen::Index c = 1; c < K; ++c) m = std::max(m, z[base + c * HW]);
      S sum = S(0);
      for (Eigen::Index c = 0; c < K; ++c) {
        const S e = std::exp(z[base + c * HW] - m);
        p[base + c * HW] = e;
        sum += e;
      }
      for (Eigen::Index c = 0; c < K; ++c) p[base + c * HW] /= sum;
    }
  if (logits.requires_grad()) {
    Tensor<S> zin = logits;
    out.attach_node("softmax_classes", {logits},
                    [zin, N, K, HW](const ArrayX<S>& values, const ArrayX<S>& grad) mutable {
      ArrayX<S>& zg = zin.grad_buffer();
      const S* pv = values.data();
      const S* g = grad.data();
      for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index px = 0; px < HW; ++px) {
          const Eigen::Index base = n * K * HW + px;
          S dot = S(0);
          for (Eigen::Index c = 0; c < K; ++c) dot += g[base + c * HW] * pv[base + c * HW];
          for (Eigen::Index c = 0; c < K; ++c)
            zg[base + c * HW] += pv[base + c * HW] * (g[base + c * HW] - dot);
        }
    });
  }
  return out;
}

template <typename S>
struct CrossEntropyOut {
  Tensor<S> loss;   // scalar, on the tape
  Tensor<S> probs;  // per-pixel class probabilities, detached
};

/// Mean negative log-likelihood over non-ignored pixels. The gradient with
/// respect to the logits is (probs - onehot) / n_valid at valid pixels and
/// zero at ignored ones.
template <typename S>
CrossEntropyOut<S> masked_softmax_cross_entropy(const Tensor<S>& logits, const LabelBatch& labels) {
  if (logits.shape().rank() != 4)
    throw std::invalid_argument("cross_entropy: logits must be rank 4");
  const Eigen::Index N = logits.shape().n(), K = logits.shape().c(), H = logits.shape().h(),
                     W = logits.shape().w();
  if (labels.n != N || labels.h != H || labels.w != W)
    throw std::invalid_argument("cross_entropy: label shape mismatch");
  const Eigen::Index HW = H * W;

  Tensor<S> probs = Tensor<S>::zeros(logits.shape());
  const S* z = logits.data();
  S* p = probs.data();
  double loss_sum = 0.0;
  Eigen::Index n_valid = 0;
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index px = 0; px < HW; ++px) {
      const Eigen::Index base = n * K * HW + px;
      S m = z[base];
      for (Eigen::Index c = 1; c < K; ++c) m = std::max(m, z[base + c * HW]);
      S sum = S(0);
      for (Eigen::Index c = 0; c < K; ++c) sum += std::exp(z[base + c * HW] - m);
      const S lse = m + std::log(sum);
      for (Eigen::Index c = 0; c < K; ++c) p[base + c * HW] = std::exp(z[base + c * HW] - lse);
      const std::uint8_t lab = labels[n * HW + px];
      if (lab == kIgnoreLabel) continue;
      if (lab >= K)
        throw std::invalid_argument("cross_entropy: label value " + std::to_string(int(lab)) +
                                    " out of range for " + std::to_string(K) + " classes");
      loss_sum += double(lse - z[base + lab * HW]);
      ++n_valid;
    }
  if (n_valid == 0) throw std::invalid_argument("cross_entropy: no valid pixels");

  Tensor<S> loss = Tensor<S>::scalar(S(loss_sum / double(n_valid)));
  if (logits.requires_grad()) {
    Tensor<S> zin = logits;
    Tensor<S> psaved = probs;
    LabelBatch lab = labels;
    loss.attach_node("masked_softmax_cross_entropy", {logits},
                     [zin, psaved, lab = std::move(lab), N, K, HW,
                      n_valid](const ArrayX<S>&, const ArrayX<S>& grad) mutable {
      const S g = grad[0] / S(n_valid);
      ArrayX<S>& zg = zin.grad_buffer();
      const S* pv = psaved.data();
      for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index px = 0; px < HW; ++px) {
          const std::uint8_t l = lab[n * HW + px];
          if (l == kIgnoreLabel) continue;
          const Eigen::Index base = n * K * HW + px;
          for (Eigen::Index c = 0; c < K; ++c)
            zg[base + c * HW] += g * (pv[base + c * HW] - S(c == l ? 1 : 0));
        }
    });
  }
  return {loss, probs};
}

}  // namespace fusenet
