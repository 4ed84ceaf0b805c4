#include "sslseg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sslseg/errors.hpp"

namespace sslseg {

namespace {

void require_rank4(const Tensor& t, const char* where) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(where) + ": expected rank-4 NHWC tensor, got " +
                     shape_to_string(t.shape()));
  }
}

struct ConvDims {
  std::size_t n, h, w, ci, k, co, stride;
  std::size_t oh, ow;
  std::size_t pad_top, pad_left;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b,
                   std::size_t stride) {
  require_rank4(x, "conv2d input");
  require_rank4(w, "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (w.dim(0) != w.dim(1)) {
    throw ShapeError("conv2d: kernel must be square, got " +
                     shape_to_string(w.shape()));
  }
  if (w.dim(2) != x.dim(3)) {
    throw ShapeError("conv2d: kernel in-channels " + std::to_string(w.dim(2)) +
                     " != input channels " + std::to_string(x.dim(3)));
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(3)) {
    throw ShapeError("conv2d: bias shape " + shape_to_string(b.shape()) +
                     " does not match out-channels " + std::to_string(w.dim(3)));
  }
  ConvDims d;
  d.n = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.ci = x.dim(3);
  d.k = w.dim(0);
  d.co = w.dim(3);
  d.stride = stride;
  d.oh = (d.h + stride - 1) / stride;
  d.ow = (d.w + stride - 1) / stride;
  const std::size_t span_h = (d.oh - 1) * stride + d.k;
  const std::size_t span_w = (d.ow - 1) * stride + d.k;
  d.pad_top = span_h > d.h ? (span_h - d.h) / 2 : 0;
  d.pad_left = span_w > d.w ? (span_w - d.w) / 2 : 0;
  return d;
}

}  // namespace

// Accumulates npix output rows against one kernel tap:
//   out[p*ostep + o] += sum_i x[p*xstep + i] * k[i*co + o].
// Explicit 4-wide vectors with a 4-pixel register tile: the accumulators stay
// in registers across the i loop instead of round-tripping through memory.
typedef double v4d __attribute__((vector_size(32), aligned(8)));

static inline v4d splat4(double v) { return v4d{v, v, v, v}; }

static void conv_run(const double* __restrict x, std::size_t xstep,
                     double* __restrict out, std::size_t ostep,
                     const double* __restrict k, std::size_t ci, std::size_t co,
                     std::size_t npix) {
  const std::size_t co4 = co & ~std::size_t(3);
  std::size_t p = 0;
  for (; p + 4 <= npix; p += 4) {
    const double* x0 = x + p * xstep;
    const double* x1 = x0 + xstep;
    const double* x2 = x1 + xstep;
    const double* x3 = x2 + xstep;
    double* o0 = out + p * ostep;
    double* o1 = o0 + ostep;
    double* o2 = o1 + ostep;
    double* o3 = o2 + ostep;
    for (std::size_t ob = 0; ob < co4; ob += 4) {
      v4d a0 = *reinterpret_cast<const v4d*>(o0 + ob);
      v4d a1 = *reinterpret_cast<const v4d*>(o1 + ob);
      v4d a2 = *reinterpret_cast<const v4d*>(o2 + ob);
      v4d a3 = *reinterpret_cast<const v4d*>(o3 + ob);
      for (std::size_t i = 0; i < ci; ++i) {
        const v4d kv = *reinterpret_cast<const v4d*>(k + i * co + ob);
        a0 += splat4(x0[i]) * kv;
        a1 += splat4(x1[i]) * kv;
        a2 += splat4(x2[i]) * kv;
        a3 += splat4(x3[i]) * kv;
      }
      *reinterpret_cast<v4d*>(o0 + ob) = a0;
      *reinterpret_cast<v4d*>(o1 + ob) = a1;
      *reinterpret_cast<v4d*>(o2 + ob) = a2;
      *reinterpret_cast<v4d*>(o3 + ob) = a3;
    }
    for (std::size_t o = co4; o < co; ++o) {
      double a0 = o0[o], a1 = o1[o], a2 = o2[o], a3 = o3[o];
      for (std::size_t i = 0; i < ci; ++i) {
        const double kv = k[i * co + o];
        a0 += x0[i] * kv;
        a1 += x1[i] * kv;
        a2 += x2[i] * kv;
        a3 += x3[i] * kv;
      }
      o0[o] = a0;
      o1[o] = a1;
      o2[o] = a2;
      o3[o] = a3;
    }
  }
  for (; p < npix; ++p) {
    const double* xr = x + p * xstep;
    double* orow = out + p * ostep;
    for (std::size_t i = 0; i < ci; ++i) {
      const double* kr = k + i * co;
      const double xi = xr[i];
      for (std::size_t o = 0; o < co; ++o) orow[o] += xi * kr[o];
    }
  }
}

ValueId Tape::push(Tensor value, std::function<void(Tape&)> backprop) {
  require_finite(value, "tape op output");
  nodes_.push_back(Node{std::move(value), Tensor(), std::move(backprop)});
  return nodes_.size() - 1;
}

ValueId Tape::leaf(Tensor value) {
  return push(std::move(value), nullptr);
}

namespace {

// Contiguous run of output columns hit by kernel tap dw at stride 1.
struct TapRun {
  std::size_t ow_lo, ow_hi;  // [lo, hi)
  bool valid;
};

TapRun tap_run(std::size_t dw, std::size_t pad_left, std::size_t w,
               std::size_t ow_count) {
  TapRun r;
  r.ow_lo = pad_left > dw ? pad_left - dw : 0;
  r.ow_hi = std::min(ow_count, w + pad_left - dw);
  r.valid = r.ow_lo < r.ow_hi;
  return r;
}

}  // namespace

ValueId Tape::conv2d(ValueId xid, ValueId wid, ValueId bid, std::size_t stride) {
  const Tensor& x = value(xid);
  const Tensor& w = value(wid);
  const Tensor& b = value(bid);
  const ConvDims d = conv_dims(x, w, b, stride);

  Tensor out({d.n, d.oh, d.ow, d.co});
  const double* xp = x.data().data();
  const double* wp = w.data().data();
  const double* bp = b.data().data();
  double* op = out.data().data();

  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oh = 0; oh < d.oh; ++oh) {
      double* orow0 = op + (n * d.oh + oh) * d.ow * d.co;
      for (std::size_t ow = 0; ow < d.ow; ++ow)
        for (std::size_t o = 0; o < d.co; ++o) orow0[ow * d.co + o] = bp[o];
      for (std::size_t dh = 0; dh < d.k; ++dh) {
        const std::size_t ih_s = oh * d.stride + dh;
        if (ih_s < d.pad_top) continue;
        const std::size_t ih = ih_s - d.pad_top;
        if (ih >= d.h) continue;
        const double* xrow0 = xp + (n * d.h + ih) * d.w * d.ci;
        if (d.stride == 1) {
          for (std::size_t dw = 0; dw < d.k; ++dw) {
            const TapRun run = tap_run(dw, d.pad_left, d.w, d.ow);
            if (!run.valid) continue;
            conv_run(xrow0 + (run.ow_lo + dw - d.pad_left) * d.ci, d.ci,
                     orow0 + run.ow_lo * d.co, d.co,
                     wp + (dh * d.k + dw) * d.ci * d.co, d.ci, d.co,
                     run.ow_hi - run.ow_lo);
          }
        } else {
          for (std::size_t ow = 0; ow < d.ow; ++ow) {
            double* orow = orow0 + ow * d.co;
            for (std::size_t dw = 0; dw < d.k; ++dw) {
              const std::size_t iw_s = ow * d.stride + dw;
              if (iw_s < d.pad_left) continue;
              const std::size_t iw = iw_s - d.pad_left;
              if (iw >= d.w) continue;
              conv_run(xrow0 + iw * d.ci, d.ci, orow, d.co,
                       wp + (dh * d.k + dw) * d.ci * d.co, d.ci, d.co, 1);
            }
          }
        }
      }
    }
  }

  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [xid, wid, bid, d, self](Tape& t) {
    const double* xp = t.value(xid).data().data();
    const double* wp = t.value(wid).data().data();
    const double* gp = t.grad(self).data().data();
    double* dxp = t.grad_mut(xid).data().data();
    double* dwp = t.grad_mut(wid).data().data();
    double* dbp = t.grad_mut(bid).data().data();

    // Input gradients reuse the forward microkernel with roles swapped, so
    // the kernel is transposed per tap: kt[o*ci + i] = k[i*co + o].
    std::vector<double> kt(d.k * d.k * d.ci * d.co);
    for (std::size_t tap = 0; tap < d.k * d.k; ++tap)
      for (std::size_t i = 0; i < d.ci; ++i)
        for (std::size_t o = 0; o < d.co; ++o)
          kt[tap * d.ci * d.co + o * d.ci + i] =
              wp[tap * d.ci * d.co + i * d.co + o];

    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t oh = 0; oh < d.oh; ++oh) {
        const double* grow0 = gp + (n * d.oh + oh) * d.ow * d.co;
        for (std::size_t ow = 0; ow < d.ow; ++ow)
          for (std::size_t o = 0; o < d.co; ++o) dbp[o] += grow0[ow * d.co + o];
        for (std::size_t dh = 0; dh < d.k; ++dh) {
          const std::size_t ih_s = oh * d.stride + dh;
          if (ih_s < d.pad_top) continue;
          const std::size_t ih = ih_s - d.pad_top;
          if (ih >= d.h) continue;
          const double* xrow0 = xp + (n * d.h + ih) * d.w * d.ci;
          double* dxrow0 = dxp + (n * d.h + ih) * d.w * d.ci;
          if (d.stride == 1) {
            for (std::size_t dw = 0; dw < d.k; ++dw) {
              const TapRun run = tap_run(dw, d.pad_left, d.w, d.ow);
              if (!run.valid) continue;
              const std::size_t npix = run.ow_hi - run.ow_lo;
              const std::size_t iw0 = run.ow_lo + dw - d.pad_left;
              conv_run(grow0 + run.ow_lo * d.co, d.co, dxrow0 + iw0 * d.ci,
                       d.ci, kt.data() + (dh * d.k + dw) * d.ci * d.co, d.co,
                       d.ci, npix);
              // Kernel gradient: rank-1 updates per pixel.
              double* dwslice = dwp + (dh * d.k + dw) * d.ci * d.co;
              for (std::size_t p = 0; p < npix; ++p) {
                const double* xr = xrow0 + (iw0 + p) * d.ci;
                const double* gr = grow0 + (run.ow_lo + p) * d.co;
                for (std::size_t i = 0; i < d.ci; ++i) {
                  const double xi = xr[i];
                  double* dkr = dwslice + i * d.co;
                  for (std::size_t o = 0; o < d.co; ++o) dkr[o] += xi * gr[o];
                }
              }
            }
          } else {
            for (std::size_t ow = 0; ow < d.ow; ++ow) {
              const double* gr = grow0 + ow * d.co;
              for (std::size_t dw = 0; dw < d.k; ++dw) {
                const std::size_t iw_s = ow * d.stride + dw;
                if (iw_s < d.pad_left) continue;
                const std::size_t iw = iw_s - d.pad_left;
                if (iw >= d.w) continue;
                const double* xr = xrow0 + iw * d.ci;
                double* dxr = dxrow0 + iw * d.ci;
                const double* krow = wp + (dh * d.k + dw) * d.ci * d.co;
                double* dkrow = dwp + (dh * d.k + dw) * d.ci * d.co;
                for (std::size_t i = 0; i < d.ci; ++i) {
                  const double xi = xr[i];
                  const double* kr = krow + i * d.co;
                  double* dkr = dkrow + i * d.co;
                  double acc = 0.0;
                  for (std::size_t o = 0; o < d.co; ++o) {
                    acc += kr[o] * gr[o];
                    dkr[o] += xi * gr[o];
                  }
                  dxr[i] += acc;
                }
              }
            }
          }
        }
      }
    }
  };
  return self;
}

ValueId Tape::weight_standardize(ValueId wid, double eps) {
  const Tensor& w = value(wid);
  require_rank4(w, "weight_standardize");
  const std::size_t co = w.dim(3);
  const std::size_t m = w.size() / co;

  Tensor out(w.shape());
  std::vector<double> mean(co, 0.0), rstd(co, 0.0);
  const double* wp = w.data().data();
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t o = 0; o < co; ++o) mean[o] += wp[j * co + o];
  for (std::size_t o = 0; o < co; ++o) mean[o] /= static_cast<double>(m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t o = 0; o < co; ++o) {
      const double dv = wp[j * co + o] - mean[o];
      rstd[o] += dv * dv;
    }
  for (std::size_t o = 0; o < co; ++o)
    rstd[o] = 1.0 / std::sqrt(rstd[o] / static_cast<double>(m) + eps);
  double* op = out.data().data();
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t o = 0; o < co; ++o)
      op[j * co + o] = (wp[j * co + o] - mean[o]) * rstd[o];

  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [wid, self, co, m, mean, rstd](Tape& t) {
    const double* what = t.value(self).data().data();
    const double* gp = t.grad(self).data().data();
    double* dwp = t.grad_mut(wid).data().data();
    // Per channel: dw = r * (g - mean(g) - what * mean(g * what)).
    std::vector<double> gbar(co, 0.0), gdot(co, 0.0);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t o = 0; o < co; ++o) {
        gbar[o] += gp[j * co + o];
        gdot[o] += gp[j * co + o] * what[j * co + o];
      }
    for (std::size_t o = 0; o < co; ++o) {
      gbar[o] /= static_cast<double>(m);
      gdot[o] /= static_cast<double>(m);
    }
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t o = 0; o < co; ++o) {
        const std::size_t idx = j * co + o;
        dwp[idx] += rstd[o] * (gp[idx] - gbar[o] - what[idx] * gdot[o]);
      }
  };
  return self;
}

ValueId Tape::group_norm(ValueId xid, ValueId gid, ValueId bid,
                         std::size_t groups, double eps) {
  const Tensor& x = value(xid);
  require_rank4(x, "group_norm");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: groups " + std::to_string(groups) +
                     " must divide channels " + std::to_string(c));
  }
  const Tensor& gamma = value(gid);
  const Tensor& beta = value(bid);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 ||
      beta.dim(0) != c) {
    throw ShapeError("group_norm: affine params must have shape [channels]");
  }
  const std::size_t d = c / groups;          // channels per group
  const std::size_t m = h * w * d;           // elements per (sample, group)

  Tensor out(x.shape());
  std::vector<double> mean(n * groups, 0.0), rstd(n * groups, 0.0);
  const double* xp = x.data().data();
  const double* gp = gamma.data().data();
  const double* bp = beta.data().data();
  double* op = out.data().data();
  for (std::size_t ni = 0; ni < n; ++ni) {
    const double* xs = xp + ni * h * w * c;
    for (std::size_t hw = 0; hw < h * w; ++hw)
      for (std::size_t ci = 0; ci < c; ++ci)
        mean[ni * groups + ci / d] += xs[hw * c + ci];
    for (std::size_t g = 0; g < groups; ++g)
      mean[ni * groups + g] /= static_cast<double>(m);
    for (std::size_t hw = 0; hw < h * w; ++hw)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double dv = xs[hw * c + ci] - mean[ni * groups + ci / d];
        rstd[ni * groups + ci / d] += dv * dv;
      }
    for (std::size_t g = 0; g < groups; ++g)
      rstd[ni * groups + g] =
          1.0 / std::sqrt(rstd[ni * groups + g] / static_cast<double>(m) + eps);
    double* os = op + ni * h * w * c;
    for (std::size_t hw = 0; hw < h * w; ++hw)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const std::size_t g = ci / d;
        const double xhat =
            (xs[hw * c + ci] - mean[ni * groups + g]) * rstd[ni * groups + g];
        os[hw * c + ci] = gp[ci] * xhat + bp[ci];
      }
  }

  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [xid, gid, bid, self, n, h, w, c, d, groups, mean,
                           rstd](Tape& t) {
    const double* xp = t.value(xid).data().data();
    const double* gamp = t.value(gid).data().data();
    const double* gp = t.grad(self).data().data();
    double* dxp = t.grad_mut(xid).data().data();
    double* dgam = t.grad_mut(gid).data().data();
    double* dbet = t.grad_mut(bid).data().data();
    const std::size_t m = h * w * d;
    for (std::size_t ni = 0; ni < n; ++ni) {
      const double* xs = xp + ni * h * w * c;
      const double* gs = gp + ni * h * w * c;
      double* dxs = dxp + ni * h * w * c;
      // hbar = mean(g*gamma), hxbar = mean(g*gamma*xhat) per group.
      std::vector<double> hbar(groups, 0.0), hxbar(groups, 0.0);
      for (std::size_t hw_i = 0; hw_i < h * w; ++hw_i)
        for (std::size_t ci = 0; ci < c; ++ci) {
          const std::size_t g = ci / d;
          const double xhat =
              (xs[hw_i * c + ci] - mean[ni * groups + g]) * rstd[ni * groups + g];
          const double hv = gs[hw_i * c + ci] * gamp[ci];
          hbar[g] += hv;
          hxbar[g] += hv * xhat;
          dgam[ci] += gs[hw_i * c + ci] * xhat;
          dbet[ci] += gs[hw_i * c + ci];
        }
      for (std::size_t g = 0; g < groups; ++g) {
        hbar[g] /= static_cast<double>(m);
        hxbar[g] /= static_cast<double>(m);
      }
      for (std::size_t hw_i = 0; hw_i < h * w; ++hw_i)
        for (std::size_t ci = 0; ci < c; ++ci) {
          const std::size_t g = ci / d;
          const double r = rstd[ni * groups + g];
          const double xhat = (xs[hw_i * c + ci] - mean[ni * groups + g]) * r;
          const double hv = gs[hw_i * c + ci] * gamp[ci];
          dxs[hw_i * c + ci] += r * (hv - hbar[g] - xhat * hxbar[g]);
        }
    }
  };
  return self;
}

ValueId Tape::relu(ValueId xid) {
  const Tensor& x = value(xid);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [xid, self](Tape& t) {
    const Tensor& x = t.value(xid);
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_mut(xid);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) dx[i] += g[i];
  };
  return self;
}

ValueId Tape::sigmoid(ValueId xid) {
  const Tensor& x = value(xid);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                      : std::exp(v) / (1.0 + std::exp(v));
  }
  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [xid, self](Tape& t) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_mut(xid);
    for (std::size_t i = 0; i < y.size(); ++i)
      dx[i] += g[i] * y[i] * (1.0 - y[i]);
  };
  return self;
}

ValueId Tape::max_pool2x2(ValueId xid) {
  const Tensor& x = value(xid);
  require_rank4(x, "max_pool2x2");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("max_pool2x2: H and W must be even, got " +
                     shape_to_string(x.shape()));
  }
  Tensor out({n, h / 2, w / 2, c});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oh = 0; oh < h / 2; ++oh)
      for (std::size_t ow = 0; ow < w / 2; ++ow)
        for (std::size_t ci = 0; ci < c; ++ci) {
          double best = -1e308;
          std::size_t best_idx = 0;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
              const std::size_t idx = x.index4(ni, oh * 2 + a, ow * 2 + b, ci);
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          const std::size_t oidx = out.index4(ni, oh, ow, ci);
          out[oidx] = best;
          argmax[oidx] = best_idx;
        }
  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [xid, self, argmax](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_mut(xid);
    for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
  };
  return self;
}

ValueId Tape::upsample_nearest2x(ValueId xid) {
  const Tensor& x = value(xid);
  require_rank4(x, "upsample_nearest2x");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor out({n, h * 2, w * 2, c});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t hi = 0; hi < h * 2; ++hi)
      for (std::size_t wi = 0; wi < w * 2; ++wi)
        for (std::size_t ci = 0; ci < c; ++ci)
          out.at4(ni, hi, wi, ci) = x.at4(ni, hi / 2, wi / 2, ci);
  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [xid, self, n, h, w, c](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_mut(xid);
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t hi = 0; hi < h * 2; ++hi)
        for (std::size_t wi = 0; wi < w * 2; ++wi)
          for (std::size_t ci = 0; ci < c; ++ci)
            dx.at4(ni, hi / 2, wi / 2, ci) += g.at4(ni, hi, wi, ci);
  };
  return self;
}

ValueId Tape::concat_channels(ValueId aid, ValueId bid) {
  const Tensor& a = value(aid);
  const Tensor& b = value(bid);
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_channels: spatial/batch dims differ: " +
                     shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const std::size_t ca = a.dim(3), cb = b.dim(3);
  const std::size_t rows = a.dim(0) * a.dim(1) * a.dim(2);
  Tensor out({a.dim(0), a.dim(1), a.dim(2), ca + cb});
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* op = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < ca; ++i) op[r * (ca + cb) + i] = ap[r * ca + i];
    for (std::size_t i = 0; i < cb; ++i)
      op[r * (ca + cb) + ca + i] = bp[r * cb + i];
  }
  ValueId self = push(std::move(out), nullptr);
  nodes_[self].backprop = [aid, bid, self, rows, ca, cb](Tape& t) {
    const double* gp = t.grad(self).data().data();
    double* dap = t.grad_mut(aid).data().data();
    double* dbp = t.grad_mut(bid).data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < ca; ++i)
        dap[r * ca + i] += gp[r * (ca + cb) + i];
      for (std::size_t i = 0; i < cb; ++i)
        dbp[r * cb + i] += gp[r * (ca + cb) + ca + i];
    }
  };
  return self;
}

ValueId Tape::l2_loss(ValueId pid, const Tensor& target) {
  const Tensor& pred = value(pid);
  require_rank4(pred, "l2_loss");
  require_same_shape(pred, target, "l2_loss");
  require_finite(target, "l2_loss target");
  const std::size_t n = pred.dim(0), c = pred.dim(3);
  const std::size_t rows = pred.size() / c;
  std::vector<double> per_class(c, 0.0);
  const double* pp = pred.data().data();
  const double* tp = target.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double dv = pp[r * c + ci] - tp[r * c + ci];
      per_class[ci] += dv * dv;
    }
  double total = 0.0;
  for (std::size_t ci = 0; ci < c; ++ci)
    total += per_class[ci] / static_cast<double>(n);
  total /= static_cast<double>(c);

  Tensor target_copy = target;
  ValueId self = push(Tensor::scalar(total), nullptr);
  nodes_[self].backprop = [pid, self, target_copy, n, c](Tape& t) {
    const double g = t.grad(self)[0];
    const Tensor& pred = t.value(pid);
    Tensor& dp = t.grad_mut(pid);
    const double scale = 2.0 * g / (static_cast<double>(n) * static_cast<double>(c));
    for (std::size_t i = 0; i < pred.size(); ++i)
      dp[i] += scale * (pred[i] - target_copy[i]);
  };
  return self;
}

ValueId Tape::dice_loss(ValueId pid, const Tensor& target, double eps) {
  const Tensor& pred = value(pid);
  require_rank4(pred, "dice_loss");
  require_same_shape(pred, target, "dice_loss");
  require_finite(target, "dice_loss target");
  const std::size_t c = pred.dim(3);
  const std::size_t rows = pred.size() / c;
  const double* pp = pred.data().data();
  const double* tp = target.data().data();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pp[i] < 0.0 || pp[i] > 1.0) {
      throw NumericError("dice_loss: prediction outside [0,1]");
    }
    if (tp[i] != 0.0 && tp[i] != 1.0) {
      throw NumericError("dice_loss: target mask must be binary");
    }
  }
  std::vector<double> inter(c, 0.0), uni(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ci = 0; ci < c; ++ci) {
      inter[ci] += pp[r * c + ci] * tp[r * c + ci];
      uni[ci] += pp[r * c + ci] + tp[r * c + ci];
    }
  double total = 0.0;
  for (std::size_t ci = 0; ci < c; ++ci)
    total += 1.0 - (2.0 * inter[ci] + eps) / (uni[ci] + eps);
  total /= static_cast<double>(c);

  Tensor target_copy = target;
  ValueId self = push(Tensor::scalar(total), nullptr);
  nodes_[self].backprop = [pid, self, target_copy, c, rows, inter, uni,
                           eps](Tape& t) {
    const double g = t.grad(self)[0];
    Tensor& dp = t.grad_mut(pid);
    const double* tp = target_copy.data().data();
    // d/dX_i [1 - (2I+eps)/(U+eps)] = (2I+eps)/(U+eps)^2 - 2*Y_i/(U+eps)
    std::vector<double> a(c), b(c);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double u = uni[ci] + eps;
      a[ci] = (2.0 * inter[ci] + eps) / (u * u);
      b[ci] = 2.0 / u;
    }
    const double scale = g / static_cast<double>(c);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const std::size_t i = r * c + ci;
        dp[i] += scale * (a[ci] - b[ci] * tp[i]);
      }
  };
  return self;
}

ValueId Tape::sum(ValueId xid) {
  const Tensor& x = value(xid);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  ValueId self = push(Tensor::scalar(s), nullptr);
  nodes_[self].backprop = [xid, self](Tape& t) {
    const double g = t.grad(self)[0];
    Tensor& dx = t.grad_mut(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
  };
  return self;
}

ValueId Tape::weighted_sum(ValueId xid, const Tensor& weights) {
  const Tensor& x = value(xid);
  require_same_shape(x, weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * weights[i];
  Tensor w_copy = weights;
  ValueId self = push(Tensor::scalar(s), nullptr);
  nodes_[self].backprop = [xid, self, w_copy](Tape& t) {
    const double g = t.grad(self)[0];
    Tensor& dx = t.grad_mut(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * w_copy[i];
  };
  return self;
}

void Tape::backward(ValueId loss, double seed) {
  if (nodes_.empty()) {
    throw NumericError("backward on empty tape: no ops recorded");
  }
  if (loss >= nodes_.size()) {
    throw ShapeError("backward: loss id out of range");
  }
  if (nodes_[loss].value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_to_string(nodes_[loss].value.shape()));
  }
  if (backward_done_) {
    throw NumericError("backward called twice on one tape");
  }
  backward_done_ = true;
  for (Node& n : nodes_) n.grad = Tensor(n.value.shape(), 0.0);
  nodes_[loss].grad[0] = seed;
  for (std::size_t i = loss + 1; i-- > 0;) {
    if (nodes_[i].backprop) nodes_[i].backprop(*this);
  }
}

}  // namespace sslseg
