#pragma once

#include <cstring>

#include "dt/autodiff.hpp"

// Convolution and the other structured ops used by the segmentation and
// translation networks. Everything is NCHW; conv lowers to im2col + GEMM.

namespace dt {
namespace ad {

namespace detail {

// cols layout: [Cin*kh*kw, Hout*Wout] row-major, one sample at a time.
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, T* cols, int Hout, int Wout) {
  int idx = 0;
  for (int c = 0; c < C; ++c)
    for (int dy = 0; dy < k; ++dy)
      for (int dx = 0; dx < k; ++dx) {
        T* row = cols + size_t(idx++) * Hout * Wout;
        for (int oy = 0; oy < Hout; ++oy) {
          int iy = oy * stride + dy - pad;
          T* dst = row + size_t(oy) * Wout;
          if (iy < 0 || iy >= H) {
            std::memset(dst, 0, sizeof(T) * size_t(Wout));
            continue;
          }
          const T* src = x + (size_t(c) * H + iy) * W;
          for (int ox = 0; ox < Wout; ++ox) {
            int ix = ox * stride + dx - pad;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, T* x, int Hout, int Wout) {
  int idx = 0;
  for (int c = 0; c < C; ++c)
    for (int dy = 0; dy < k; ++dy)
      for (int dx = 0; dx < k; ++dx) {
        const T* row = cols + size_t(idx++) * Hout * Wout;
        for (int oy = 0; oy < Hout; ++oy) {
          int iy = oy * stride + dy - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (size_t(c) * H + iy) * W;
          const T* src = row + size_t(oy) * Wout;
          for (int ox = 0; ox < Wout; ++ox) {
            int ix = ox * stride + dx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// x: [N,Cin,H,W], w: [Cout,Cin,k,k], b: [Cout]. Same-padding when pad = k/2.
// The lowering scratch lives per sample and is rebuilt in backward rather
// than stored; keeping full-batch column buffers alive until backward was
// the dominant memory churn of a training step.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = -1) {
  require(x->value.shape.size() == 4 && w->value.shape.size() == 4, "conv2d expects NCHW input and OIHW weight");
  int N = x->value.dim(0), Cin = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  int Cout = w->value.dim(0), k = w->value.dim(2);
  require(w->value.dim(1) == Cin && w->value.dim(3) == k, "conv2d: weight shape mismatch");
  require(b->value.numel() == size_t(Cout), "conv2d: bias shape mismatch");
  if (pad < 0) pad = k / 2;
  int Hout = (H + 2 * pad - k) / stride + 1;
  int Wout = (W + 2 * pad - k) / stride + 1;
  int K = Cin * k * k, M = Hout * Wout;

  Tensor<T> out({N, Cout, Hout, Wout});
  {
    std::vector<T> cols(size_t(K) * M);
    for (int n = 0; n < N; ++n) {
      detail::im2col(x->value.ptr() + size_t(n) * Cin * H * W, Cin, H, W, k, stride, pad, cols.data(),
                     Hout, Wout);
      T* out_n = out.ptr() + size_t(n) * Cout * M;
      gemm(w->value.ptr(), cols.data(), out_n, Cout, K, M);
      for (int c = 0; c < Cout; ++c) {
        T bias = b->value[size_t(c)];
        T* row = out_n + size_t(c) * M;
        for (int i = 0; i < M; ++i) row[i] += bias;
      }
    }
  }

  auto fn = [N, Cin, H, W, Cout, k, K, M, stride, pad, Hout, Wout](Node<T>& n) {
    auto &px = *n.parents[0], &pw = *n.parents[1], &pb = *n.parents[2];
    std::vector<T> cols(size_t(K) * M), dcols;
    for (int s = 0; s < N; ++s) {
      const T* dy = n.grad.ptr() + size_t(s) * Cout * M;
      if (pw.needs_grad) {
        pw.ensure_grad();
        detail::im2col(px.value.ptr() + size_t(s) * Cin * H * W, Cin, H, W, k, stride, pad,
                       cols.data(), Hout, Wout);
        gemm_nt(dy, cols.data(), pw.grad.ptr(), Cout, M, K, /*accumulate=*/true);
      }
      if (pb.needs_grad) {
        pb.ensure_grad();
        for (int c = 0; c < Cout; ++c) {
          const T* row = dy + size_t(c) * M;
          T acc = T(0);
          for (int i = 0; i < M; ++i) acc += row[i];
          pb.grad[size_t(c)] += acc;
        }
      }
      if (px.needs_grad) {
        px.ensure_grad();
        if (dcols.empty()) dcols.resize(size_t(K) * M);
        gemm_tn(pw.value.ptr(), dy, dcols.data(), K, Cout, M);
        detail::col2im(dcols.data(), Cin, H, W, k, stride, pad,
                       px.grad.ptr() + size_t(s) * Cin * H * W, Hout, Wout);
      }
    }
  };
  return make_op<T>(std::move(out), std::move(fn), x, w, b);
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require(x->value.shape.size() == 4, "upsample expects NCHW");
  int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor<T> out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = x->value.ptr() + (size_t(n) * C + c) * H * W;
      T* dst = out.ptr() + (size_t(n) * C + c) * 4 * H * W;
      for (int y = 0; y < 2 * H; ++y) {
        const T* srow = src + size_t(y / 2) * W;
        T* drow = dst + size_t(y) * 2 * W;
        for (int xcol = 0; xcol < 2 * W; ++xcol) drow[xcol] = srow[xcol / 2];
      }
    }
  return make_op<T>(std::move(out),
                    [N, C, H, W](Node<T>& n) {
                      auto& px = *n.parents[0];
                      px.ensure_grad();
                      for (int b = 0; b < N; ++b)
                        for (int c = 0; c < C; ++c) {
                          T* dst = px.grad.ptr() + (size_t(b) * C + c) * H * W;
                          const T* g = n.grad.ptr() + (size_t(b) * C + c) * 4 * H * W;
                          for (int y = 0; y < 2 * H; ++y)
                            for (int xcol = 0; xcol < 2 * W; ++xcol)
                              dst[size_t(y / 2) * W + xcol / 2] += g[size_t(y) * 2 * W + xcol];
                        }
                    },
                    x);
}

template <class T>
Var<T> concat_ch(const Var<T>& a, const Var<T>& b) {
  require(a->value.shape.size() == 4 && b->value.shape.size() == 4, "concat_ch expects NCHW");
  int N = a->value.dim(0), Ca = a->value.dim(1), Cb = b->value.dim(1);
  int H = a->value.dim(2), W = a->value.dim(3);
  require(b->value.dim(0) == N && b->value.dim(2) == H && b->value.dim(3) == W, "concat_ch: shape mismatch");
  size_t HW = size_t(H) * W;
  Tensor<T> out({N, Ca + Cb, H, W});
  for (int n = 0; n < N; ++n) {
    std::memcpy(out.ptr() + size_t(n) * (Ca + Cb) * HW, a->value.ptr() + size_t(n) * Ca * HW,
                sizeof(T) * Ca * HW);
    std::memcpy(out.ptr() + (size_t(n) * (Ca + Cb) + Ca) * HW, b->value.ptr() + size_t(n) * Cb * HW,
                sizeof(T) * Cb * HW);
  }
  return make_op<T>(std::move(out),
                    [N, Ca, Cb, HW](Node<T>& n) {
                      auto &pa = *n.parents[0], &pb = *n.parents[1];
                      for (int b = 0; b < N; ++b) {
                        if (pa.needs_grad) {
                          pa.ensure_grad();
                          const T* g = n.grad.ptr() + size_t(b) * (Ca + Cb) * HW;
                          T* dst = pa.grad.ptr() + size_t(b) * Ca * HW;
                          for (size_t i = 0; i < size_t(Ca) * HW; ++i) dst[i] += g[i];
                        }
                        if (pb.needs_grad) {
                          pb.ensure_grad();
                          const T* g = n.grad.ptr() + (size_t(b) * (Ca + Cb) + Ca) * HW;
                          T* dst = pb.grad.ptr() + size_t(b) * Cb * HW;
                          for (size_t i = 0; i < size_t(Cb) * HW; ++i) dst[i] += g[i];
                        }
                      }
                    },
                    a, b);
}

// Per-(sample, channel) normalization over the spatial extent, with affine.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  require(x->value.shape.size() == 4, "instance_norm expects NCHW");
  int N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  require(gamma->value.numel() == size_t(C) && beta->value.numel() == size_t(C), "instance_norm: affine shape");
  Tensor<T> out(x->value.shape);
  auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
  auto invstd = std::make_shared<Tensor<T>>(Shape{N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = x->value.ptr() + (size_t(n) * C + c) * HW;
      T mean = T(0);
      for (int i = 0; i < HW; ++i) mean += src[i];
      mean /= T(HW);
      T var = T(0);
      for (int i = 0; i < HW; ++i) var += (src[i] - mean) * (src[i] - mean);
      var /= T(HW);
      T is = T(1) / std::sqrt(var + eps);
      invstd->at(n, c) = is;
      T g = gamma->value[size_t(c)], b = beta->value[size_t(c)];
      T* xh = xhat->ptr() + (size_t(n) * C + c) * HW;
      T* dst = out.ptr() + (size_t(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) {
        xh[i] = (src[i] - mean) * is;
        dst[i] = g * xh[i] + b;
      }
    }
  auto fn = [N, C, HW, xhat, invstd](Node<T>& n) {
    auto &px = *n.parents[0], &pg = *n.parents[1], &pb = *n.parents[2];
    for (int b = 0; b < N; ++b)
      for (int c = 0; c < C; ++c) {
        const T* dy = n.grad.ptr() + (size_t(b) * C + c) * HW;
        const T* xh = xhat->ptr() + (size_t(b) * C + c) * HW;
        T g = pg.value[size_t(c)], is = invstd->at(b, c);
        if (pg.needs_grad || pb.needs_grad) {
          T dg = T(0), db = T(0);
          for (int i = 0; i < HW; ++i) {
            dg += dy[i] * xh[i];
            db += dy[i];
          }
          if (pg.needs_grad) {
            pg.ensure_grad();
            pg.grad[size_t(c)] += dg;
          }
          if (pb.needs_grad) {
            pb.ensure_grad();
            pb.grad[size_t(c)] += db;
          }
        }
        if (px.needs_grad) {
          px.ensure_grad();
          T mean_dy = T(0), mean_dyxh = T(0);
          for (int i = 0; i < HW; ++i) {
            mean_dy += dy[i];
            mean_dyxh += dy[i] * xh[i];
          }
          mean_dy /= T(HW);
          mean_dyxh /= T(HW);
          T* dst = px.grad.ptr() + (size_t(b) * C + c) * HW;
          for (int i = 0; i < HW; ++i)
            dst[i] += g * is * (dy[i] - mean_dy - xh[i] * mean_dyxh);
        }
      }
  };
  return make_op<T>(std::move(out), std::move(fn), x, gamma, beta);
}

// Softmax over the channel axis, per pixel.
template <class T>
Var<T> softmax_ch(const Var<T>& x) {
  require(x->value.shape.size() == 4, "softmax_ch expects NCHW");
  int N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor<T> out(x->value.shape);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < HW; ++i) {
      const T* src = x->value.ptr() + size_t(n) * C * HW + i;
      T* dst = out.ptr() + size_t(n) * C * HW + i;
      T mx = src[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, src[size_t(c) * HW]);
      T z = T(0);
      for (int c = 0; c < C; ++c) {
        T e = std::exp(src[size_t(c) * HW] - mx);
        dst[size_t(c) * HW] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) dst[size_t(c) * HW] /= z;
    }
  return make_op<T>(std::move(out),
                    [N, C, HW](Node<T>& n) {
                      auto& px = *n.parents[0];
                      px.ensure_grad();
                      for (int b = 0; b < N; ++b)
                        for (int i = 0; i < HW; ++i) {
                          const T* s = n.value.ptr() + size_t(b) * C * HW + i;
                          const T* dy = n.grad.ptr() + size_t(b) * C * HW + i;
                          T* dx = px.grad.ptr() + size_t(b) * C * HW + i;
                          T dot = T(0);
                          for (int c = 0; c < C; ++c) dot += dy[size_t(c) * HW] * s[size_t(c) * HW];
                          for (int c = 0; c < C; ++c)
                            dx[size_t(c) * HW] += s[size_t(c) * HW] * (dy[size_t(c) * HW] - dot);
                        }
                    },
                    x);
}

// Inverted-dropout with keep-scaling; mask drawn up front from the stream.
template <class T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0,1)");
  if (rate == 0.0) return x;
  T scale = T(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<uint8_t>>(x->value.numel());
  Tensor<T> out(x->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) {
    bool keep = rng.uniform() >= rate;
    (*mask)[i] = keep;
    out[i] = keep ? x->value[i] * scale : T(0);
  }
  return make_op<T>(std::move(out),
                    [mask, scale](Node<T>& n) {
                      auto& px = *n.parents[0];
                      px.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i)
                        if ((*mask)[i]) px.grad[i] += n.grad[i] * scale;
                    },
                    x);
}

// out[n,h,w] = p[n, label[n,h,w], h, w]; labels constant.
template <class T>
Var<T> gather_label(const Var<T>& p, const Tensor<uint8_t>& labels) {
  require(p->value.shape.size() == 4, "gather_label expects NCHW probs");
  int N = p->value.dim(0), C = p->value.dim(1), H = p->value.dim(2), W = p->value.dim(3);
  require(labels.shape == Shape({N, H, W}), "gather_label: label shape mismatch");
  int HW = H * W;
  Tensor<T> out({N, 1, H, W});
  auto lab = std::make_shared<Tensor<uint8_t>>(labels);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < HW; ++i) {
      int c = lab->data[size_t(n) * HW + i];
      require(c < C, "gather_label: label value out of range");
      out[size_t(n) * HW + i] = p->value[(size_t(n) * C + c) * HW + i];
    }
  return make_op<T>(std::move(out),
                    [N, C, HW, lab](Node<T>& n) {
                      auto& pp = *n.parents[0];
                      pp.ensure_grad();
                      for (int b = 0; b < N; ++b)
                        for (int i = 0; i < HW; ++i) {
                          int c = lab->data[size_t(b) * HW + i];
                          pp.grad[(size_t(b) * C + c) * HW + i] += n.grad[size_t(b) * HW + i];
                        }
                    },
                    p);
}

// ---- plain-tensor helpers (no graph) ----

template <class T>
Tensor<T> softmax_tensor(const Tensor<T>& logits) {
  int N = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  Tensor<T> out(logits.shape);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < HW; ++i) {
      const T* src = logits.ptr() + size_t(n) * C * HW + i;
      T* dst = out.ptr() + size_t(n) * C * HW + i;
      T mx = src[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, src[size_t(c) * HW]);
      T z = T(0);
      for (int c = 0; c < C; ++c) {
        T e = std::exp(src[size_t(c) * HW] - mx);
        dst[size_t(c) * HW] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) dst[size_t(c) * HW] /= z;
    }
  return out;
}

// [N,C,H,W] probs -> [N,H,W] argmax labels; ties break to the lowest index.
template <class T>
Tensor<uint8_t> argmax_labels(const Tensor<T>& probs) {
  int N = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  int HW = H * W;
  Tensor<uint8_t> out({N, H, W});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < HW; ++i) {
      const T* src = probs.ptr() + size_t(n) * C * HW + i;
      int best = 0;
      T bv = src[0];
      for (int c = 1; c < C; ++c)
        if (src[size_t(c) * HW] > bv) {
          bv = src[size_t(c) * HW];
          best = c;
        }
      out[size_t(n) * HW + i] = uint8_t(best);
    }
  return out;
}

template <class T>
Tensor<T> one_hot(const Tensor<uint8_t>& labels, int C) {
  require(labels.shape.size() == 3, "one_hot expects [N,H,W] labels");
  int N = labels.dim(0), H = labels.dim(1), W = labels.dim(2);
  int HW = H * W;
  Tensor<T> out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < HW; ++i) {
      int c = labels[size_t(n) * HW + i];
      require(c < C, "one_hot: label value out of range");
      out[(size_t(n) * C + c) * HW + i] = T(1);
    }
  return out;
}

}  // namespace ad
}  // namespace dt
