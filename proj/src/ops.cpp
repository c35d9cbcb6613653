// Copyright 2026 The MetaVIB Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "metavib/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "metavib/errors.hpp"

namespace metavib::ops {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

int node_of(const Tensor& t) { return t.recorded() ? *t.node_id() : -1; }

Tape* tape_of(std::initializer_list<const Tensor*> operands) {
  Tape* found = nullptr;
  for (const Tensor* t : operands) {
    if (!t->recorded()) continue;
    if (found != nullptr && found != t->tape()) {
      throw ContractError("operands are recorded on different tapes");
    }
    found = t->tape();
  }
  return found;
}

Tensor finish(Tape* tape, Tensor value, std::vector<int> parents, Tape::BackwardFn fn) {
  if (tape == nullptr) return value;
  return tape->record(std::move(value), std::move(parents), std::move(fn));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

// Applies a pointwise function. `back(g, v, y)` maps the upstream gradient
// to the input gradient given input v and output y.
template <typename Fwd, typename Back>
Tensor unary(const Tensor& x, Fwd fwd, Back back) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  {
    const double* __restrict in = x.data().data();
    double* __restrict dst = out.data();
    for (std::size_t i = 0; i < n; ++i) dst[i] = fwd(in[i]);
  }
  Tensor result(x.shape(), std::move(out));
  Tape* tape = tape_of({&x});
  if (tape == nullptr) return result;
  const int px = node_of(x);
  return tape->record(result, {px}, [x, result, px, back](std::span<const double> g, Tape& t) {
    double* __restrict gx = t.accumulator(px).data();
    const double* __restrict gy = g.data();
    const double* __restrict in = x.data().data();
    const double* __restrict out = result.data().data();
    const std::size_t n = g.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += back(gy[i], in[i], out[i]);
  });
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return;
  const Tensor& big = a.numel() >= b.numel() ? a : b;
  const Tensor& small = a.numel() >= b.numel() ? b : a;
  if (small.numel() == 1) return;
  const Shape& bs = big.shape();
  const Shape& ss = small.shape();
  if (ss.size() <= bs.size() && std::equal(ss.rbegin(), ss.rend(), bs.rbegin())) return;
  throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()) + " do not broadcast");
}

// Binary op with trailing-dimension broadcasting: operand k is indexed at
// i % numel(k). `da`/`db` give the partial derivatives at (a, b).
template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
  check_broadcast(a, b, name);
  const Shape out_shape = a.numel() >= b.numel() ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else if (na == n) {
    for (std::size_t o = 0; o < n; o += nb) {
      for (std::size_t j = 0; j < nb; ++j) out[o + j] = fwd(av[o + j], bv[j]);
    }
  } else {
    for (std::size_t o = 0; o < n; o += na) {
      for (std::size_t j = 0; j < na; ++j) out[o + j] = fwd(av[j], bv[o + j]);
    }
  }
  Tensor result(out_shape, std::move(out));
  Tape* tape = tape_of({&a, &b});
  if (tape == nullptr) return result;
  const int pa = node_of(a);
  const int pb = node_of(b);
  return tape->record(result, {pa, pb}, [a, b, pa, pb, da, db](std::span<const double> g, Tape& t) {
    const std::size_t na = a.numel();
    const std::size_t nb = b.numel();
    auto av = a.data();
    auto bv = b.data();
    const std::size_t n = g.size();
    const double* __restrict gy = g.data();
    const double* __restrict x = av.data();
    const double* __restrict y = bv.data();
    if (pa >= 0) {
      double* __restrict ga = t.accumulator(pa).data();
      if (na == n && nb == n) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] * da(x[i], y[i]);
      } else if (na == n) {
        for (std::size_t o = 0; o < n; o += nb) {
          for (std::size_t j = 0; j < nb; ++j) ga[o + j] += gy[o + j] * da(x[o + j], y[j]);
        }
      } else {
        for (std::size_t o = 0; o < n; o += na) {
          for (std::size_t j = 0; j < na; ++j) ga[j] += gy[o + j] * da(x[j], y[o + j]);
        }
      }
    }
    if (pb >= 0) {
      double* __restrict gb = t.accumulator(pb).data();
      if (na == n && nb == n) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i] * db(x[i], y[i]);
      } else if (na == n) {
        for (std::size_t o = 0; o < n; o += nb) {
          for (std::size_t j = 0; j < nb; ++j) gb[j] += gy[o + j] * db(x[o + j], y[j]);
        }
      } else {
        for (std::size_t o = 0; o < n; o += na) {
          for (std::size_t j = 0; j < na; ++j) gb[o + j] += gy[o + j] * db(x[j], y[o + j]);
        }
      }
    }
  });
}

struct WindowGeometry {
  std::size_t batch, in_h, in_w, channels;
  std::size_t k_h, k_w;
  std::size_t out_h, out_w;
  long pad_top, pad_left;
  std::size_t stride;
};

WindowGeometry window_geometry(const Shape& x, std::size_t kh, std::size_t kw, int stride,
                               Padding padding, const char* op) {
  if (stride <= 0) throw ParameterError(std::string(op) + ": stride must be positive");
  if (x.size() != 4) throw DimensionError(std::string(op) + " expects NHWC input, got " + shape_to_string(x));
  if (kh == 0 || kw == 0) throw ParameterError(std::string(op) + ": window extents must be positive");
  WindowGeometry g{x[0], x[1], x[2], x[3], kh, kw, 0, 0, 0, 0, static_cast<std::size_t>(stride)};
  const std::size_t s = g.stride;
  if (padding == Padding::kSame) {
    g.out_h = (g.in_h + s - 1) / s;
    g.out_w = (g.in_w + s - 1) / s;
    const long pad_h = std::max<long>(static_cast<long>((g.out_h - 1) * s + kh) - static_cast<long>(g.in_h), 0);
    const long pad_w = std::max<long>(static_cast<long>((g.out_w - 1) * s + kw) - static_cast<long>(g.in_w), 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    if (kh > g.in_h || kw > g.in_w) {
      throw DimensionError(std::string(op) + ": window " + std::to_string(kh) + "x" + std::to_string(kw) +
                           " exceeds input " + shape_to_string(x));
    }
    g.out_h = (g.in_h - kh) / s + 1;
    g.out_w = (g.in_w - kw) / s + 1;
  }
  return g;
}

// Unfolds x into a (B*Ho*Wo) x (kh*kw*C) patch matrix.
std::vector<double> im2col(std::span<const double> x, const WindowGeometry& g) {
  const std::size_t c = g.channels;
  const std::size_t cols = g.k_h * g.k_w * c;
  std::vector<double> col(g.batch * g.out_h * g.out_w * cols, 0.0);
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        double* dst = col.data() + row * cols;
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - g.pad_top;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - g.pad_left;
            if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
            const double* src = x.data() + ((b * g.in_h + iy) * g.in_w + ix) * c;
            std::copy(src, src + c, dst + (ky * g.k_w + kx) * c);
          }
        }
      }
    }
  }
  return col;
}

void col2im_add(std::span<const double> col, const WindowGeometry& g, std::vector<double>& dx) {
  const std::size_t c = g.channels;
  const std::size_t cols = g.k_h * g.k_w * c;
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        const double* src = col.data() + row * cols;
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - g.pad_top;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - g.pad_left;
            if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
            double* dst = dx.data() + ((b * g.in_h + iy) * g.in_w + ix) * c;
            const double* s = src + (ky * g.k_w + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += s[ch];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " do not compose");
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  Tape* tape = tape_of({&a, &b});
  const int pa = node_of(a);
  const int pb = node_of(b);
  return finish(tape, Tensor({a.dim(0), b.dim(1)}, std::move(out)), {pa, pb},
                [a, b, pa, pb, m, k, n](std::span<const double> g, Tape& t) {
                  ConstMap gm(g.data(), m, n);
                  if (pa >= 0) {
                    MutMap(t.accumulator(pa).data(), m, k).noalias() +=
                        gm * ConstMap(b.data().data(), k, n).transpose();
                  }
                  if (pb >= 0) {
                    MutMap(t.accumulator(pb).data(), k, n).noalias() +=
                        ConstMap(a.data().data(), m, k).transpose() * gm;
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto r = static_cast<Eigen::Index>(a.dim(0));
  const auto c = static_cast<Eigen::Index>(a.dim(1));
  std::vector<double> out(a.numel());
  MutMap(out.data(), c, r) = ConstMap(a.data().data(), r, c).transpose();
  const int pa = node_of(a);
  return finish(tape_of({&a}), Tensor({a.dim(1), a.dim(0)}, std::move(out)), {pa},
                [pa, r, c](std::span<const double> g, Tape& t) {
                  MutMap(t.accumulator(pa).data(), r, c) += ConstMap(g.data(), c, r).transpose();
                });
}

namespace {

Tensor conv2d_impl(const Tensor& x, const Tensor& kernel, const Tensor* bias, int stride, Padding padding) {
  require_rank(kernel, 4, "conv2d kernel");
  const WindowGeometry geo = window_geometry(x.shape(), kernel.dim(0), kernel.dim(1), stride, padding, "conv2d");
  if (kernel.dim(2) != geo.channels) {
    throw DimensionError("conv2d: input " + shape_to_string(x.shape()) + " does not match kernel " +
                         shape_to_string(kernel.shape()));
  }
  const std::size_t out_c = kernel.dim(3);
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != out_c)) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias->shape()) + " does not match " +
                         std::to_string(out_c) + " output channels");
  }
  const auto rows = static_cast<Eigen::Index>(geo.batch * geo.out_h * geo.out_w);
  const auto patch = static_cast<Eigen::Index>(geo.k_h * geo.k_w * geo.channels);
  const auto oc = static_cast<Eigen::Index>(out_c);

  auto col = std::make_shared<const std::vector<double>>(im2col(x.data(), geo));
  std::vector<double> out(static_cast<std::size_t>(rows * oc));
  MutMap out_map(out.data(), rows, oc);
  out_map.noalias() = ConstMap(col->data(), rows, patch) * ConstMap(kernel.data().data(), patch, oc);
  if (bias != nullptr) {
    out_map.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->data().data(), oc);
  }
  Tensor result({geo.batch, geo.out_h, geo.out_w, out_c}, std::move(out));

  const int px = node_of(x);
  const int pk = node_of(kernel);
  const int pb = bias != nullptr ? node_of(*bias) : -1;
  Tape* tape = bias != nullptr ? tape_of({&x, &kernel, bias}) : tape_of({&x, &kernel});
  std::vector<int> parents = {px, pk};
  if (bias != nullptr) parents.push_back(pb);
  return finish(tape, std::move(result), std::move(parents),
                [kernel, col, geo, px, pk, pb, rows, patch, oc](std::span<const double> g, Tape& t) {
                  ConstMap gm(g.data(), rows, oc);
                  if (pb >= 0) {
                    Eigen::Map<Eigen::RowVectorXd>(t.accumulator(pb).data(), oc) += gm.colwise().sum();
                  }
                  if (pk >= 0) {
                    MutMap(t.accumulator(pk).data(), patch, oc).noalias() +=
                        ConstMap(col->data(), rows, patch).transpose() * gm;
                  }
                  if (px >= 0) {
                    std::vector<double> dcol(static_cast<std::size_t>(rows * patch));
                    MutMap(dcol.data(), rows, patch).noalias() =
                        gm * ConstMap(kernel.data().data(), patch, oc).transpose();
                    col2im_add(dcol, geo, t.accumulator(px));
                  }
                });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, Padding padding) {
  return conv2d_impl(x, kernel, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, Padding padding) {
  return conv2d_impl(x, kernel, &bias, stride, padding);
}

Tensor maxpool2d(const Tensor& x, int window_h, int window_w, int stride, Padding padding) {
  if (window_h <= 0 || window_w <= 0) throw ParameterError("maxpool2d: window extents must be positive");
  const WindowGeometry geo = window_geometry(x.shape(), static_cast<std::size_t>(window_h),
                                             static_cast<std::size_t>(window_w), stride, padding, "maxpool2d");
  const std::size_t c = geo.channels;
  const std::size_t n_out = geo.batch * geo.out_h * geo.out_w * c;
  std::vector<double> out(n_out);
  auto argmax = std::make_shared<std::vector<std::size_t>>(n_out);
  auto in = x.data();
  std::vector<double> best(c);
  std::size_t o = 0;
  for (std::size_t b = 0; b < geo.batch; ++b) {
    for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
      for (std::size_t ox = 0; ox < geo.out_w; ++ox, o += c) {
        std::fill(best.begin(), best.end(), -std::numeric_limits<double>::infinity());
        for (std::size_t ky = 0; ky < geo.k_h; ++ky) {
          const long iy = static_cast<long>(oy * geo.stride + ky) - geo.pad_top;
          if (iy < 0 || iy >= static_cast<long>(geo.in_h)) continue;
          for (std::size_t kx = 0; kx < geo.k_w; ++kx) {
            const long ix = static_cast<long>(ox * geo.stride + kx) - geo.pad_left;
            if (ix < 0 || ix >= static_cast<long>(geo.in_w)) continue;
            const std::size_t base = ((b * geo.in_h + iy) * geo.in_w + ix) * c;
            const double* __restrict src = in.data() + base;
            double* __restrict bst = best.data();
            std::size_t* __restrict arg = argmax->data() + o;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const bool gt = src[ch] > bst[ch];
              bst[ch] = gt ? src[ch] : bst[ch];
              arg[ch] = gt ? base + ch : arg[ch];
            }
          }
        }
        std::copy(best.begin(), best.end(), out.begin() + static_cast<long>(o));
      }
    }
  }
  const int px = node_of(x);
  return finish(tape_of({&x}), Tensor({geo.batch, geo.out_h, geo.out_w, c}, std::move(out)), {px},
                [argmax, px](std::span<const double> g, Tape& t) {
                  auto& gx = t.accumulator(px);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
                });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

Tensor elu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : std::expm1(v); },
      [](double g, double v, double y) { return v > 0.0 ? g : g * (y + 1.0); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(
      x, [](double v) { return std::log(v); }, [](double g, double v, double) { return g / v; });
}

Tensor neg(const Tensor& x) {
  return unary(
      x, [](double v) { return -v; }, [](double g, double, double) { return -g; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return factor * v; }, [factor](double g, double, double) { return factor * g; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      x, [offset](double v) { return v + offset; }, [](double g, double, double) { return g; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ParameterError("clamp: lower bound exceeds upper bound");
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double g, double v, double) { return (v >= lo && v <= hi) ? g : 0.0; });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double u, double v) { return u + v; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double u, double v) { return u - v; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double u, double v) { return u * v; }, [](double, double v) { return v; },
      [](double u, double) { return u; });
}

Tensor logsumexp(const Tensor& logits) {
  if (logits.rank() == 0 || logits.shape().back() == 0) {
    throw DimensionError("logsumexp needs a non-empty last axis, got " + shape_to_string(logits.shape()));
  }
  const std::size_t c = logits.shape().back();
  const std::size_t rows = logits.numel() / c;
  auto x = logits.data();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    out[r] = m + std::log(s);
  }
  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  Tensor result(out_shape, std::move(out));
  const int px = node_of(logits);
  return finish(tape_of({&logits}), result, {px}, [logits, result, px, c](std::span<const double> g, Tape& t) {
    auto& gx = t.accumulator(px);
    auto x = logits.data();
    auto lse = result.data();
    for (std::size_t r = 0; r < g.size(); ++r) {
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r] * std::exp(x[r * c + j] - lse[r]);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const int px = node_of(x);
  return finish(tape_of({&x}), Tensor::scalar(s), {px}, [px](std::span<const double> g, Tape& t) {
    for (double& v : t.accumulator(px)) v += g[0];
  });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  const std::size_t n = x.dim(axis);
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<double> out(outer * inner, 0.0);
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* src = in.data() + (o * n + j) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  const int px = node_of(x);
  return finish(tape_of({&x}), Tensor(out_shape, std::move(out)), {px},
                [px, outer, n, inner](std::span<const double> g, Tape& t) {
                  auto& gx = t.accumulator(px);
                  for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t j = 0; j < n; ++j) {
                      double* dst = gx.data() + (o * n + j) * inner;
                      const double* src = g.data() + o * inner;
                      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
                  }
                });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ParameterError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::size_t axis) {
  const std::size_t n = x.dim(axis);
  if (n == 0) throw ParameterError("mean over an empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

Tensor reshape(const Tensor& x, Shape shape) {
  Tensor view = x.with_shape(std::move(shape));
  const int px = node_of(x);
  return finish(tape_of({&x}), std::move(view), {px}, [px](std::span<const double> g, Tape& t) {
    auto& gx = t.accumulator(px);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.shape().back()) {
    throw ParameterError("slice_last: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for shape " + shape_to_string(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t w = end - begin;
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> out(rows * w);
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(in.data() + r * d + begin, w, out.data() + r * w);
  }
  Shape out_shape = x.shape();
  out_shape.back() = w;
  const int px = node_of(x);
  return finish(tape_of({&x}), Tensor(out_shape, std::move(out)), {px},
                [px, rows, d, w, begin](std::span<const double> g, Tape& t) {
                  auto& gx = t.accumulator(px);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < w; ++j) gx[r * d + begin + j] += g[r * w + j];
                  }
                });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t d = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * d);
  auto in = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.dim(0)) {
      throw ParameterError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                           shape_to_string(x.shape()));
    }
    std::copy_n(in.data() + idx[i] * d, d, out.data() + i * d);
  }
  const int px = node_of(x);
  return finish(tape_of({&x}), Tensor({idx.size(), d}, std::move(out)), {px},
                [px, idx, d](std::span<const double> g, Tape& t) {
                  auto& gx = t.accumulator(px);
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += g[i * d + j];
                  }
                });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> columns) {
  require_rank(x, 2, "pick");
  if (columns.size() != x.dim(0)) {
    throw DimensionError("pick: " + std::to_string(columns.size()) + " indices for " +
                         shape_to_string(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<std::size_t> idx(columns.begin(), columns.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= c) throw ParameterError("pick: column " + std::to_string(idx[i]) + " out of range");
    out[i] = x.at(i * c + idx[i]);
  }
  const int px = node_of(x);
  return finish(tape_of({&x}), Tensor({idx.size()}, std::move(out)), {px},
                [px, idx, c](std::span<const double> g, Tape& t) {
                  auto& gx = t.accumulator(px);
                  for (std::size_t i = 0; i < idx.size(); ++i) gx[i * c + idx[i]] += g[i];
                });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() == 0 || logits.shape().back() == 0) {
    throw DimensionError("softmax needs a non-empty last axis");
  }
  const std::size_t c = logits.shape().back();
  const std::size_t rows = logits.numel() / c;
  auto x = logits.data();
  std::vector<double> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * c;
    double* dst = out.data() + r * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (dst[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < c; ++j) dst[j] /= s;
  }
  return Tensor(logits.shape(), std::move(out));
}

}  // namespace metavib::ops
