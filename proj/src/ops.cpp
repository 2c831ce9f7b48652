// SPDX-License-Identifier: Apache-2.0
#include "fibro/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>

#include "fibro/error.hpp"

namespace fibro {

namespace {

TensorPtr result(Shape shape) { return std::make_shared<Tensor>(std::move(shape)); }

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

void require_matrix(const TensorPtr& x, const char* op) {
  require(x && x->shape.size() == 2, std::string(op) + ": expected a matrix, got " +
                                         (x ? shape_string(x->shape) : std::string("null")));
}

// Marks `out` differentiable and records `step`, which runs only when a
// gradient actually reached `out`.
template <typename F, typename... Ins>
void record(Tape& tape, const TensorPtr& out, F&& step, const Ins&... ins) {
  if (!tape.tracks(ins...)) return;
  out->requires_grad = true;
  tape.push([out, step = std::forward<F>(step)]() {
    if (out->grad.empty()) return;
    step();
  });
}

bool wants(const TensorPtr& t) { return t && t->requires_grad; }

// Source index along one axis for padded position i (may be -1 for zero pad).
std::vector<long> pad_map(std::size_t n, std::size_t pad, PadMode mode) {
  std::vector<long> map(n + 2 * pad);
  const long ln = static_cast<long>(n);
  for (std::size_t j = 0; j < map.size(); ++j) {
    long i = static_cast<long>(j) - static_cast<long>(pad);
    if (i < 0 || i >= ln) {
      if (mode == PadMode::zero) {
        i = -1;
      } else {
        i = i < 0 ? -i : 2 * (ln - 1) - i;
      }
    }
    map[j] = i;
  }
  return map;
}

// Four independent partial sums so the loop vectorizes without reassociation.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace

// ---------------------------------------------------------------- conv3d

Shape conv3d_output_shape(const Shape& in, const Shape& kernel, const ConvSpec& spec) {
  require(in.size() == 4, "conv3d: input must be [C,D,H,W], got " + shape_string(in));
  require(kernel.size() == 5, "conv3d: kernel must be [Co,Ci,k,k,k], got " + shape_string(kernel));
  require(kernel[1] == in[0], "conv3d: kernel expects " + std::to_string(kernel[1]) + " input channels, input has " +
                                  std::to_string(in[0]));
  require(kernel[2] == kernel[3] && kernel[3] == kernel[4] && kernel[2] % 2 == 1, "conv3d: kernel must be cubic and odd");
  require(spec.stride >= 1, "conv3d: stride must be >= 1");
  Shape out{kernel[0], 0, 0, 0};
  for (int a = 1; a <= 3; ++a) {
    const std::size_t padded = in[a] + 2 * spec.pad;
    require(padded >= kernel[2], "conv3d: kernel larger than padded input");
    out[a] = (padded - kernel[2]) / spec.stride + 1;
  }
  return out;
}

namespace {

struct ConvGeom {
  std::size_t ci_n, co_n, k, s, D, H, W, Dp, Hp, Wp, Do, Ho, Wo, plane, R;
  std::vector<long> mz, my, mx;
};

// Stride 1 on large maps: each kernel tap is one contiguous run over the
// padded grid. Output voxel (z,y,x) sits at z*Hp*Wp + y*Wp + x of the run;
// slots with y >= Ho or x >= Wo are scratch.
void conv_by_runs(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias, const TensorPtr& out,
                  const std::shared_ptr<const ConvGeom>& gp) {
  const ConvGeom& g = *gp;
  auto xp = std::make_shared<std::vector<double>>(g.ci_n * g.Dp * g.Hp * g.Wp, 0.0);
  for (std::size_t c = 0; c < g.ci_n; ++c)
    for (std::size_t z = 0; z < g.Dp; ++z) {
      if (g.mz[z] < 0) continue;
      for (std::size_t y = 0; y < g.Hp; ++y) {
        if (g.my[y] < 0) continue;
        const double* src = &x->value[((c * g.D + g.mz[z]) * g.H + g.my[y]) * g.W];
        double* dst = &(*xp)[((c * g.Dp + z) * g.Hp + y) * g.Wp];
        for (std::size_t i = 0; i < g.Wp; ++i)
          if (g.mx[i] >= 0) dst[i] = src[g.mx[i]];
      }
    }
  const std::size_t pplane = g.Hp * g.Wp;
  const std::size_t run = (g.Do - 1) * pplane + (g.Ho - 1) * g.Wp + g.Wo;
  const std::size_t taps = g.k * g.k * g.k;
  auto tap_offset = [gp](std::size_t ci, std::size_t t) {
    const ConvGeom& q = *gp;
    const std::size_t kz = t / (q.k * q.k), ky = (t / q.k) % q.k, kx = t % q.k;
    return ((ci * q.Dp + kz) * q.Hp + ky) * q.Wp + kx;
  };

  std::vector<double> acc(run);
  for (std::size_t co = 0; co < g.co_n; ++co) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t ci = 0; ci < g.ci_n; ++ci)
      for (std::size_t t = 0; t < taps; ++t) {
        const double wv = w->value[(co * g.ci_n + ci) * taps + t];
        if (wv == 0.0) continue;
        const double* src = &(*xp)[tap_offset(ci, t)];
        double* a = acc.data();
        for (std::size_t i = 0; i < run; ++i) a[i] += wv * src[i];
      }
    double* o = &out->value[co * g.plane];
    const double b = bias ? bias->value[co] : 0.0;
    for (std::size_t oz = 0; oz < g.Do; ++oz)
      for (std::size_t oy = 0; oy < g.Ho; ++oy) {
        const double* a = &acc[oz * pplane + oy * g.Wp];
        double* dst = o + (oz * g.Ho + oy) * g.Wo;
        for (std::size_t ox = 0; ox < g.Wo; ++ox) dst[ox] = a[ox] + b;
      }
  }

  record(
      tape, out,
      [x, w, bias, out, xp, gp, pplane, run, taps, tap_offset]() {
        const ConvGeom& g = *gp;
        const bool need_x = wants(x), need_w = wants(w);
        std::vector<double> dxp(need_x ? xp->size() : 0, 0.0);
        if (need_w) w->ensure_grad();
        std::vector<double> grun(run, 0.0);
        for (std::size_t co = 0; co < g.co_n; ++co) {
          const double* gr = &out->grad[co * g.plane];
          for (std::size_t oz = 0; oz < g.Do; ++oz)
            for (std::size_t oy = 0; oy < g.Ho; ++oy)
              std::copy_n(gr + (oz * g.Ho + oy) * g.Wo, g.Wo, &grun[oz * pplane + oy * g.Wp]);
          for (std::size_t ci = 0; ci < g.ci_n; ++ci)
            for (std::size_t t = 0; t < taps; ++t) {
              const std::size_t widx = (co * g.ci_n + ci) * taps + t;
              const std::size_t base = tap_offset(ci, t);
              if (need_w) w->grad[widx] += dot(grun.data(), &(*xp)[base], run);
              const double wv = w->value[widx];
              if (need_x && wv != 0.0) {
                double* d = &dxp[base];
                for (std::size_t i = 0; i < run; ++i) d[i] += wv * grun[i];
              }
            }
        }
        if (wants(bias)) {
          bias->ensure_grad();
          for (std::size_t co = 0; co < g.co_n; ++co) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.plane; ++i) acc += out->grad[co * g.plane + i];
            bias->grad[co] += acc;
          }
        }
        if (need_x) {
          x->ensure_grad();
          for (std::size_t c = 0; c < g.ci_n; ++c)
            for (std::size_t z = 0; z < g.Dp; ++z) {
              if (g.mz[z] < 0) continue;
              for (std::size_t y = 0; y < g.Hp; ++y) {
                if (g.my[y] < 0) continue;
                double* dst = &x->grad[((c * g.D + g.mz[z]) * g.H + g.my[y]) * g.W];
                const double* src = &dxp[((c * g.Dp + z) * g.Hp + y) * g.Wp];
                for (std::size_t i = 0; i < g.Wp; ++i)
                  if (g.mx[i] >= 0) dst[g.mx[i]] += src[i];
              }
            }
        }
      },
      x, w, bias);
}

// Small maps and strided convs: gather each output voxel's receptive field
// into a row (weight order) so every product is a dot of length Ci*k^3.
void conv_by_patches(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias, const TensorPtr& out,
                     const std::shared_ptr<const ConvGeom>& gp) {
  const ConvGeom& g = *gp;
  const std::size_t R = g.R, plane = g.plane;
  // Source voxel per (output voxel, tap), -1 for zero padding.
  auto src = std::make_shared<std::vector<std::int32_t>>(plane * R);
  for (std::size_t o = 0; o < plane; ++o) {
    const std::size_t oz = o / (g.Ho * g.Wo), oy = (o / g.Wo) % g.Ho, ox = o % g.Wo;
    std::int32_t* row = &(*src)[o * R];
    for (std::size_t ci = 0; ci < g.ci_n; ++ci)
      for (std::size_t kz = 0; kz < g.k; ++kz) {
        const long z = g.mz[oz * g.s + kz];
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long y = g.my[oy * g.s + ky];
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const long xx = g.mx[ox * g.s + kx];
            *row++ = (z < 0 || y < 0 || xx < 0)
                         ? -1
                         : static_cast<std::int32_t>(((static_cast<long>(ci * g.D) + z) * static_cast<long>(g.H) + y) *
                                                         static_cast<long>(g.W) +
                                                     xx);
          }
        }
      }
  }
  auto cols = std::make_shared<std::vector<double>>(plane * R);
  for (std::size_t i = 0; i < cols->size(); ++i) {
    const auto j = (*src)[i];
    (*cols)[i] = j < 0 ? 0.0 : x->value[static_cast<std::size_t>(j)];
  }
  for (std::size_t co = 0; co < g.co_n; ++co) {
    const double* wr = &w->value[co * R];
    const double b = bias ? bias->value[co] : 0.0;
    double* o = &out->value[co * plane];
    for (std::size_t p = 0; p < plane; ++p) o[p] = b + dot(wr, &(*cols)[p * R], R);
  }

  record(
      tape, out,
      [x, w, bias, out, src, cols, gp]() {
        const ConvGeom& g = *gp;
        const std::size_t R = g.R, plane = g.plane;
        if (wants(w)) {
          w->ensure_grad();
          for (std::size_t co = 0; co < g.co_n; ++co) {
            double* gw = &w->grad[co * R];
            for (std::size_t p = 0; p < plane; ++p) {
              const double gv = out->grad[co * plane + p];
              if (gv == 0.0) continue;
              const double* c = &(*cols)[p * R];
              for (std::size_t r = 0; r < R; ++r) gw[r] += gv * c[r];
            }
          }
        }
        if (wants(bias)) {
          bias->ensure_grad();
          for (std::size_t co = 0; co < g.co_n; ++co) {
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += out->grad[co * plane + p];
            bias->grad[co] += acc;
          }
        }
        if (wants(x)) {
          x->ensure_grad();
          std::vector<double> dcol(R);
          for (std::size_t p = 0; p < plane; ++p) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t co = 0; co < g.co_n; ++co) {
              const double gv = out->grad[co * plane + p];
              if (gv == 0.0) continue;
              const double* wr = &w->value[co * R];
              for (std::size_t r = 0; r < R; ++r) dcol[r] += gv * wr[r];
            }
            const std::int32_t* row = &(*src)[p * R];
            for (std::size_t r = 0; r < R; ++r)
              if (row[r] >= 0) x->grad[static_cast<std::size_t>(row[r])] += dcol[r];
          }
        }
      },
      x, w, bias);
}

}  // namespace

TensorPtr conv3d(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias, const ConvSpec& spec) {
  const Shape out_shape = conv3d_output_shape(x->shape, w->shape, spec);
  if (bias) require(bias->shape == Shape{w->shape[0]}, "conv3d: bias must be [Co]");
  if (spec.mode == PadMode::reflect && spec.pad > 0) {
    for (int a = 1; a <= 3; ++a)
      if (x->shape[a] < 2 || spec.pad > x->shape[a] - 1)
        throw Error(ErrorCode::InputTooSmallForReflect,
                    "reflect padding " + std::to_string(spec.pad) + " needs extent >= " +
                        std::to_string(std::max<std::size_t>(2, spec.pad + 1)) + ", got " + shape_string(x->shape));
  }
  const std::size_t k = w->shape[2];
  auto g = std::make_shared<ConvGeom>(ConvGeom{
      x->shape[0], w->shape[0], k, spec.stride, x->shape[1], x->shape[2], x->shape[3], x->shape[1] + 2 * spec.pad,
      x->shape[2] + 2 * spec.pad, x->shape[3] + 2 * spec.pad, out_shape[1], out_shape[2], out_shape[3],
      out_shape[1] * out_shape[2] * out_shape[3], x->shape[0] * k * k * k, pad_map(x->shape[1], spec.pad, spec.mode),
      pad_map(x->shape[2], spec.pad, spec.mode), pad_map(x->shape[3], spec.pad, spec.mode)});
  auto out = result(out_shape);
  if (g->s == 1 && g->plane >= 256 && g->ci_n <= 8)
    conv_by_runs(tape, x, w, bias, out, g);
  else
    conv_by_patches(tape, x, w, bias, out, g);
  return out;
}

// ---------------------------------------------------------------- norms

TensorPtr instance_norm(Tape& tape, const TensorPtr& x, double eps) {
  require(x->shape.size() >= 2, "instance_norm: expected [C, ...]");
  const std::size_t C = x->shape[0];
  const std::size_t S = x->size() / C;
  require(S >= 1, "instance_norm: empty spatial extent");
  auto out = result(x->shape);
  auto inv_std = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double* v = &x->value[c * S];
    double mean = 0.0;
    for (std::size_t i = 0; i < S; ++i) mean += v[i];
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (std::size_t i = 0; i < S; ++i) var += (v[i] - mean) * (v[i] - mean);
    var /= static_cast<double>(S);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    double* o = &out->value[c * S];
    for (std::size_t i = 0; i < S; ++i) o[i] = (v[i] - mean) * is;
  }
  record(
      tape, out,
      [x, out, inv_std, C, S]() {
        x->ensure_grad();
        const double n = static_cast<double>(S);
        for (std::size_t c = 0; c < C; ++c) {
          const double* g = &out->grad[c * S];
          const double* xh = &out->value[c * S];
          double mg = 0.0, mgx = 0.0;
          for (std::size_t i = 0; i < S; ++i) {
            mg += g[i];
            mgx += g[i] * xh[i];
          }
          mg /= n;
          mgx /= n;
          double* dx = &x->grad[c * S];
          for (std::size_t i = 0; i < S; ++i) dx[i] += (*inv_std)[c] * (g[i] - mg - xh[i] * mgx);
        }
      },
      x);
  return out;
}

TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t N = x->shape[0], C = x->shape[1];
  require(gain->shape == Shape{C} && bias->shape == Shape{C}, "layer_norm: gain/bias must be [C]");
  auto out = result(x->shape);
  auto xhat = std::make_shared<std::vector<double>>(x->size());
  auto inv_std = std::make_shared<std::vector<double>>(N);
  for (std::size_t r = 0; r < N; ++r) {
    const double* v = &x->value[r * C];
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += v[c];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (v[c] - mean) * (v[c] - mean);
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (v[c] - mean) * is;
      (*xhat)[r * C + c] = h;
      out->value[r * C + c] = h * gain->value[c] + bias->value[c];
    }
  }
  record(
      tape, out,
      [x, gain, bias, out, xhat, inv_std, N, C]() {
        if (wants(gain)) gain->ensure_grad();
        if (wants(bias)) bias->ensure_grad();
        if (wants(x)) x->ensure_grad();
        std::vector<double> dh(C);
        for (std::size_t r = 0; r < N; ++r) {
          const double* g = &out->grad[r * C];
          const double* h = &(*xhat)[r * C];
          double mg = 0.0, mgh = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            if (wants(gain)) gain->grad[c] += g[c] * h[c];
            if (wants(bias)) bias->grad[c] += g[c];
            dh[c] = g[c] * gain->value[c];
            mg += dh[c];
            mgh += dh[c] * h[c];
          }
          if (!wants(x)) continue;
          mg /= static_cast<double>(C);
          mgh /= static_cast<double>(C);
          for (std::size_t c = 0; c < C; ++c) x->grad[r * C + c] += (*inv_std)[r] * (dh[c] - mg - h[c] * mgh);
        }
      },
      x, gain, bias);
  return out;
}

// ---------------------------------------------------------------- pointwise

TensorPtr leaky_relu(Tape& tape, const TensorPtr& x, double slope) {
  auto out = result(x->shape);
  for (std::size_t i = 0; i < x->size(); ++i) out->value[i] = x->value[i] > 0.0 ? x->value[i] : slope * x->value[i];
  record(
      tape, out,
      [x, out, slope]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i] * (x->value[i] > 0.0 ? 1.0 : slope);
      },
      x);
  return out;
}

TensorPtr dropout(Tape& tape, const TensorPtr& x, const DropoutCtx& ctx) {
  if (!ctx.active()) return x;
  if (ctx.rate >= 1.0) throw Error(ErrorCode::InvalidConfig, "dropout rate must be < 1");
  auto out = result(x->shape);
  auto keep = std::make_shared<std::vector<double>>(x->size());
  std::bernoulli_distribution drop(ctx.rate);
  const double s = 1.0 / (1.0 - ctx.rate);
  for (std::size_t i = 0; i < x->size(); ++i) {
    (*keep)[i] = drop(*ctx.rng) ? 0.0 : s;
    out->value[i] = x->value[i] * (*keep)[i];
  }
  record(
      tape, out,
      [x, out, keep]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i] * (*keep)[i];
      },
      x);
  return out;
}

double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

TensorPtr gelu(Tape& tape, const TensorPtr& x) {
  auto out = result(x->shape);
  for (std::size_t i = 0; i < x->size(); ++i) out->value[i] = gelu_value(x->value[i]);
  record(
      tape, out,
      [x, out]() {
        constexpr double c = 0.7978845608028654;
        x->ensure_grad();
        for (std::size_t i = 0; i < x->size(); ++i) {
          const double v = x->value[i];
          const double t = std::tanh(c * (v + 0.044715 * v * v * v));
          const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v);
          x->grad[i] += out->grad[i] * d;
        }
      },
      x);
  return out;
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require(a->shape == b->shape, "add: " + shape_string(a->shape) + " vs " + shape_string(b->shape));
  auto out = result(a->shape);
  for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] + b->value[i];
  record(
      tape, out,
      [a, b, out]() {
        for (const auto& t : {a, b}) {
          if (!wants(t)) continue;
          t->ensure_grad();
          for (std::size_t i = 0; i < t->size(); ++i) t->grad[i] += out->grad[i];
        }
      },
      a, b);
  return out;
}

TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require(a->shape == b->shape, "mul: " + shape_string(a->shape) + " vs " + shape_string(b->shape));
  auto out = result(a->shape);
  for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * b->value[i];
  record(
      tape, out,
      [a, b, out]() {
        if (wants(a)) {
          a->ensure_grad();
          for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * b->value[i];
        }
        if (wants(b)) {
          b->ensure_grad();
          for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i] * a->value[i];
        }
      },
      a, b);
  return out;
}

TensorPtr scale(Tape& tape, const TensorPtr& x, double factor) {
  auto out = result(x->shape);
  for (std::size_t i = 0; i < x->size(); ++i) out->value[i] = x->value[i] * factor;
  record(
      tape, out,
      [x, out, factor]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i] * factor;
      },
      x);
  return out;
}

TensorPtr sum(Tape& tape, const TensorPtr& x) {
  auto out = result({1});
  double acc = 0.0;
  for (double v : x->value) acc += v;
  out->value[0] = acc;
  record(
      tape, out,
      [x, out]() {
        x->ensure_grad();
        for (double& g : x->grad) g += out->grad[0];
      },
      x);
  return out;
}

TensorPtr mean_of(Tape& tape, std::span<const TensorPtr> xs) {
  require(!xs.empty(), "mean_of: empty input");
  const Shape& shape = xs.front()->shape;
  for (const auto& t : xs) require(t->shape == shape, "mean_of: shape mismatch");
  auto out = result(shape);
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (const auto& t : xs)
    for (std::size_t i = 0; i < t->size(); ++i) out->value[i] += t->value[i];
  for (double& v : out->value) v *= inv;
  bool any = false;
  for (const auto& t : xs) any = any || tape.tracks(t);
  if (any) {
    out->requires_grad = true;
    std::vector<TensorPtr> ins(xs.begin(), xs.end());
    tape.push([ins, out, inv]() {
      if (out->grad.empty()) return;
      for (const auto& t : ins) {
        if (!wants(t)) continue;
        t->ensure_grad();
        for (std::size_t i = 0; i < t->size(); ++i) t->grad[i] += out->grad[i] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- matrices

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t N = a->shape[0], K = a->shape[1], M = b->shape[1];
  require(b->shape[0] == K, "matmul: " + shape_string(a->shape) + " x " + shape_string(b->shape));
  auto out = result({N, M});
  for (std::size_t i = 0; i < N; ++i) {
    double* o = &out->value[i * M];
    for (std::size_t kk = 0; kk < K; ++kk) {
      const double av = a->value[i * K + kk];
      if (av == 0.0) continue;
      const double* br = &b->value[kk * M];
      for (std::size_t j = 0; j < M; ++j) o[j] += av * br[j];
    }
  }
  record(
      tape, out,
      [a, b, out, N, K, M]() {
        if (wants(a)) {
          a->ensure_grad();
          for (std::size_t i = 0; i < N; ++i)
            for (std::size_t kk = 0; kk < K; ++kk) {
              const double* g = &out->grad[i * M];
              const double* br = &b->value[kk * M];
              double acc = 0.0;
              for (std::size_t j = 0; j < M; ++j) acc += g[j] * br[j];
              a->grad[i * K + kk] += acc;
            }
        }
        if (wants(b)) {
          b->ensure_grad();
          for (std::size_t i = 0; i < N; ++i)
            for (std::size_t kk = 0; kk < K; ++kk) {
              const double av = a->value[i * K + kk];
              const double* g = &out->grad[i * M];
              double* bg = &b->grad[kk * M];
              for (std::size_t j = 0; j < M; ++j) bg[j] += av * g[j];
            }
        }
      },
      a, b);
  return out;
}

TensorPtr linear(Tape& tape, const TensorPtr& x, const LinearWeights& lin) {
  auto y = matmul(tape, x, lin.weight);
  if (!lin.bias) return y;
  const std::size_t N = y->shape[0], M = y->shape[1];
  require(lin.bias->shape == Shape{M}, "linear: bias must be [out]");
  auto out = result(y->shape);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < M; ++j) out->value[i * M + j] = y->value[i * M + j] + lin.bias->value[j];
  const TensorPtr bias = lin.bias;
  record(
      tape, out,
      [y, bias, out, N, M]() {
        if (wants(y)) {
          y->ensure_grad();
          for (std::size_t i = 0; i < N * M; ++i) y->grad[i] += out->grad[i];
        }
        if (wants(bias)) {
          bias->ensure_grad();
          for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < M; ++j) bias->grad[j] += out->grad[i * M + j];
        }
      },
      y, bias);
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += v = std::exp(v - mx);
  for (double& v : p) v /= z;
  return p;
}

TensorPtr softmax_rows(Tape& tape, const TensorPtr& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t N = x->shape[0], C = x->shape[1];
  auto out = result(x->shape);
  for (std::size_t r = 0; r < N; ++r) {
    const auto p = softmax(std::span<const double>(&x->value[r * C], C));
    std::copy(p.begin(), p.end(), out->value.begin() + static_cast<std::ptrdiff_t>(r * C));
  }
  record(
      tape, out,
      [x, out, N, C]() {
        x->ensure_grad();
        for (std::size_t r = 0; r < N; ++r) {
          const double* p = &out->value[r * C];
          const double* g = &out->grad[r * C];
          double dot = 0.0;
          for (std::size_t c = 0; c < C; ++c) dot += p[c] * g[c];
          for (std::size_t c = 0; c < C; ++c) x->grad[r * C + c] += p[c] * (g[c] - dot);
        }
      },
      x);
  return out;
}

// ---------------------------------------------------------------- attention

TensorPtr attention_heads(Tape& tape, const TensorPtr& q, const TensorPtr& k, const TensorPtr& v, std::size_t heads) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t Nq = q->shape[0], Nk = k->shape[0], C = q->shape[1];
  require(k->shape[1] == C && v->shape[1] == C && v->shape[0] == Nk, "attention: Q/K/V shapes disagree");
  require(heads >= 1 && C % heads == 0, "attention: channels " + std::to_string(C) + " not divisible by heads " +
                                            std::to_string(heads));
  const std::size_t dk = C / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  auto out = result({Nq, C});
  // Attention weights per head, [h][Nq][Nk].
  auto attn = std::make_shared<std::vector<double>>(heads * Nq * Nk);
  std::vector<double> row(Nk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t i = 0; i < Nq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < Nk; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dk; ++d) s += q->value[i * C + off + d] * k->value[j * C + off + d];
        row[j] = s * inv_sqrt;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < Nk; ++j) z += row[j] = std::exp(row[j] - mx);
      double* a = &(*attn)[(h * Nq + i) * Nk];
      for (std::size_t j = 0; j < Nk; ++j) a[j] = row[j] / z;
      double* o = &out->value[i * C + off];
      for (std::size_t j = 0; j < Nk; ++j) {
        const double w = a[j];
        const double* vr = &v->value[j * C + off];
        for (std::size_t d = 0; d < dk; ++d) o[d] += w * vr[d];
      }
    }
  }
  record(
      tape, out,
      [q, k, v, out, attn, heads, Nq, Nk, C, dk, inv_sqrt]() {
        if (wants(q)) q->ensure_grad();
        if (wants(k)) k->ensure_grad();
        if (wants(v)) v->ensure_grad();
        std::vector<double> da(Nk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dk;
          for (std::size_t i = 0; i < Nq; ++i) {
            const double* a = &(*attn)[(h * Nq + i) * Nk];
            const double* g = &out->grad[i * C + off];
            double dot = 0.0;
            for (std::size_t j = 0; j < Nk; ++j) {
              double s = 0.0;
              const double* vr = &v->value[j * C + off];
              for (std::size_t d = 0; d < dk; ++d) s += g[d] * vr[d];
              da[j] = s;
              dot += s * a[j];
              if (wants(v)) {
                double* vg = &v->grad[j * C + off];
                for (std::size_t d = 0; d < dk; ++d) vg[d] += a[j] * g[d];
              }
            }
            for (std::size_t j = 0; j < Nk; ++j) {
              const double ds = a[j] * (da[j] - dot) * inv_sqrt;
              if (ds == 0.0) continue;
              if (wants(q))
                for (std::size_t d = 0; d < dk; ++d) q->grad[i * C + off + d] += ds * k->value[j * C + off + d];
              if (wants(k))
                for (std::size_t d = 0; d < dk; ++d) k->grad[j * C + off + d] += ds * q->value[i * C + off + d];
            }
          }
        }
      },
      q, k, v);
  return out;
}

TensorPtr multi_head_attention(Tape& tape, const TensorPtr& q_in, const TensorPtr& k_in, const TensorPtr& v_in,
                               const AttentionWeights& w, std::size_t heads) {
  auto q = matmul(tape, q_in, w.wq);
  auto k = matmul(tape, k_in, w.wk);
  auto v = matmul(tape, v_in, w.wv);
  return matmul(tape, attention_heads(tape, q, k, v, heads), w.wo);
}

TensorPtr ffn(Tape& tape, const TensorPtr& x, const FfnWeights& w, const DropoutCtx& drop) {
  auto h = gelu(tape, linear(tape, x, w.fc1));
  return linear(tape, dropout(tape, h, drop), w.fc2);
}

TensorPtr positional_encoding(std::size_t length, std::size_t channels) {
  if (channels % 2 != 0) throw Error(ErrorCode::ShapeMismatch, "positional encoding needs an even channel count");
  auto p = result({length, channels});
  for (std::size_t n = 0; n < length; ++n)
    for (std::size_t j = 0; j < channels / 2; ++j) {
      const double angle =
          static_cast<double>(n) / std::pow(10000.0, static_cast<double>(2 * j) / static_cast<double>(channels));
      p->value[n * channels + 2 * j] = std::sin(angle);
      p->value[n * channels + 2 * j + 1] = std::cos(angle);
    }
  return p;
}

// ---------------------------------------------------------------- calibration

TensorPtr delta_calibrate(Tape& tape, const TensorPtr& x, const TensorPtr& mu, const TensorPtr& sigma,
                          const TensorPtr& weight, double eps) {
  require_matrix(x, "delta_calibrate");
  const std::size_t N = x->shape[0], C = x->shape[1];
  for (const auto& p : {mu, sigma, weight}) require(p->shape == Shape{C}, "delta_calibrate: statistics must be [C]");
  auto out = result(x->shape);
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < C; ++c)
      out->value[r * C + c] =
          (x->value[r * C + c] - mu->value[c]) / (std::abs(sigma->value[c]) + eps) * weight->value[c];
  record(
      tape, out,
      [x, mu, sigma, weight, out, eps, N, C]() {
        for (const auto& t : {x, mu, sigma, weight})
          if (wants(t)) t->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          const double sg = sigma->value[c];
          const double denom = std::abs(sg) + eps;
          const double sign = sg < 0.0 ? -1.0 : 1.0;
          const double wv = weight->value[c];
          double gmu = 0.0, gsig = 0.0, gw = 0.0;
          for (std::size_t r = 0; r < N; ++r) {
            const double g = out->grad[r * C + c];
            const double centered = x->value[r * C + c] - mu->value[c];
            if (wants(x)) x->grad[r * C + c] += g * wv / denom;
            gmu -= g * wv / denom;
            gsig -= g * centered * wv / (denom * denom) * sign;
            gw += g * centered / denom;
          }
          if (wants(mu)) mu->grad[c] += gmu;
          if (wants(sigma)) sigma->grad[c] += gsig;
          if (wants(weight)) weight->grad[c] += gw;
        }
      },
      x, mu, sigma, weight);
  return out;
}

// ---------------------------------------------------------------- reshaping

TensorPtr slice_rows(Tape& tape, const TensorPtr& x, std::size_t rows) {
  require_matrix(x, "slice_rows");
  require(rows <= x->shape[0], "slice_rows: asked for more rows than present");
  if (rows == x->shape[0]) return x;
  const std::size_t C = x->shape[1];
  auto out = result({rows, C});
  std::copy_n(x->value.begin(), rows * C, out->value.begin());
  record(
      tape, out,
      [x, out, rows, C]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < rows * C; ++i) x->grad[i] += out->grad[i];
      },
      x);
  return out;
}

TensorPtr concat_rows(Tape& tape, std::span<const TensorPtr> xs) {
  require(!xs.empty(), "concat_rows: empty input");
  const std::size_t C = xs.front()->shape.at(1);
  std::size_t rows = 0;
  for (const auto& t : xs) {
    require_matrix(t, "concat_rows");
    require(t->shape[1] == C, "concat_rows: column count mismatch");
    rows += t->shape[0];
  }
  auto out = result({rows, C});
  std::size_t off = 0;
  for (const auto& t : xs) {
    std::copy(t->value.begin(), t->value.end(), out->value.begin() + static_cast<std::ptrdiff_t>(off));
    off += t->size();
  }
  bool any = false;
  for (const auto& t : xs) any = any || tape.tracks(t);
  if (any) {
    out->requires_grad = true;
    std::vector<TensorPtr> ins(xs.begin(), xs.end());
    tape.push([ins, out]() {
      if (out->grad.empty()) return;
      std::size_t o = 0;
      for (const auto& t : ins) {
        if (wants(t)) {
          t->ensure_grad();
          for (std::size_t i = 0; i < t->size(); ++i) t->grad[i] += out->grad[o + i];
        }
        o += t->size();
      }
    });
  }
  return out;
}

TensorPtr mean_rows(Tape& tape, const TensorPtr& x) {
  require_matrix(x, "mean_rows");
  const std::size_t N = x->shape[0], C = x->shape[1];
  require(N >= 1, "mean_rows: no rows");
  auto out = result({1, C});
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < C; ++c) out->value[c] += x->value[r * C + c];
  const double inv = 1.0 / static_cast<double>(N);
  for (double& v : out->value) v *= inv;
  record(
      tape, out,
      [x, out, N, C, inv]() {
        x->ensure_grad();
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t c = 0; c < C; ++c) x->grad[r * C + c] += out->grad[c] * inv;
      },
      x);
  return out;
}

TensorPtr channels_to_tokens(Tape& tape, const TensorPtr& x) {
  require(x->shape.size() >= 2, "channels_to_tokens: expected [C, ...]");
  const std::size_t C = x->shape[0], V = x->size() / C;
  auto out = result({V, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t v = 0; v < V; ++v) out->value[v * C + c] = x->value[c * V + v];
  record(
      tape, out,
      [x, out, C, V]() {
        x->ensure_grad();
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t v = 0; v < V; ++v) x->grad[c * V + v] += out->grad[v * C + c];
      },
      x);
  return out;
}

TensorPtr softmax_cross_entropy(Tape& tape, const TensorPtr& logits, std::size_t label) {
  const std::size_t K = logits->size();
  if (label >= K)
    throw Error(ErrorCode::BadLabel, "label " + std::to_string(label) + " with " + std::to_string(K) + " classes");
  const double mx = *std::max_element(logits->value.begin(), logits->value.end());
  double z = 0.0;
  for (double v : logits->value) z += std::exp(v - mx);
  auto out = result({1});
  out->value[0] = std::log(z) + mx - logits->value[label];
  record(
      tape, out,
      [logits, out, label, K]() {
        logits->ensure_grad();
        const auto p = softmax(logits->value);
        for (std::size_t i = 0; i < K; ++i) logits->grad[i] += out->grad[0] * (p[i] - (i == label ? 1.0 : 0.0));
      },
      logits);
  return out;
}

}  // namespace fibro
