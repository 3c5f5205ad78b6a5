#pragma once

// Differentiable primitives used by the encoder and the losses.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "hico/autodiff.hpp"
#include "hico/error.hpp"
#include "hico/tensor.hpp"

namespace hico {

enum class Mode { Train, Eval };

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  require(t.shape().rank() == rank, ErrorKind::ShapeError,
          std::string(what) + " expects rank " + std::to_string(rank) + ", got " + t.shape().str());
}

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

// col[(c*kh + i)*kw + j][oy*wo + ox] = x[c][oy*stride + i - pad][ox*stride + j - pad]
inline void im2col(const double* x, const ConvGeometry& g, double* col) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - pad;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) - pad;
            const bool inside = y >= 0 && y < static_cast<std::ptrdiff_t>(g.h) && xx >= 0 &&
                                xx < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wo + ox] =
                inside ? x[(c * g.h + static_cast<std::size_t>(y)) * g.w + static_cast<std::size_t>(xx)] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) - pad;
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(y)) * g.w + static_cast<std::size_t>(xx)] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// y = x W + b, with x [N, Din], W [Din, Dout], b [Dout].
inline Var linear(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  detail::require_rank(xv, 2, "linear input");
  detail::require_rank(wv, 2, "linear weight");
  require(xv.dim(1) == wv.dim(0), ErrorKind::ShapeError,
          "linear inner dims disagree: " + xv.shape().str() + " x " + wv.shape().str());
  require(bv.numel() == wv.dim(1), ErrorKind::ShapeError, "linear bias width mismatch");
  const std::size_t n = xv.dim(0), din = wv.dim(0), dout = wv.dim(1);

  Tensor out(Shape{n, dout});
  detail::MatMap y(out.data().data(), n, dout);
  y.noalias() = detail::ConstMatMap(xv.data().data(), n, din) * detail::ConstMatMap(wv.data().data(), din, dout);
  y.rowwise() += detail::ConstVecMap(bv.data().data(), dout);

  return x.tape->record(std::move(out), {x, weight, bias}, [x, weight, bias, n, din, dout](Tape& t, const Tensor& g) {
    detail::ConstMatMap dy(g.data().data(), n, dout);
    if (Tensor* dx = t.grad_target(x)) {
      detail::MatMap(dx->data().data(), n, din).noalias() +=
          dy * detail::ConstMatMap(weight.value().data().data(), din, dout).transpose();
    }
    if (Tensor* dw = t.grad_target(weight)) {
      detail::MatMap(dw->data().data(), din, dout).noalias() +=
          detail::ConstMatMap(x.value().data().data(), n, din).transpose() * dy;
    }
    if (Tensor* db = t.grad_target(bias)) {
      Eigen::Map<Eigen::RowVectorXd>(db->data().data(), static_cast<Eigen::Index>(dout)) += dy.colwise().sum();
    }
  });
}

/// Cross-correlation (no kernel flip) with zero padding.
/// x [N, Cin, H, W], kernel [Cout, Cin, kh, kw].
inline Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  detail::require_rank(xv, 4, "conv2d input");
  detail::require_rank(kv, 4, "conv2d kernel");
  require(xv.dim(1) == kv.dim(1), ErrorKind::ShapeError,
          "conv2d channel mismatch: input " + xv.shape().str() + ", kernel " + kv.shape().str());
  require(stride >= 1, ErrorKind::ShapeError, "conv2d stride must be >= 1");
  const std::size_t n = xv.dim(0);
  detail::ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3), stride, pad, 0, 0};
  require(g.h + 2 * pad >= g.kh && g.w + 2 * pad >= g.kw, ErrorKind::ShapeError,
          "conv2d output would be empty for input " + xv.shape().str());
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::size_t patch = g.patch(), pixels = g.pixels();
  const bool pointwise = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;
  auto cols = std::make_shared<std::vector<double>>(pointwise ? 0 : n * patch * pixels);

  Tensor out(Shape{n, g.cout, g.ho, g.wo});
  detail::ConstMatMap wmat(kv.data().data(), g.cout, patch);
  for (std::size_t s = 0; s < n; ++s) {
    const double* xs = xv.data().data() + s * g.cin * g.h * g.w;
    const double* col = xs;
    if (!pointwise) {
      detail::im2col(xs, g, cols->data() + s * patch * pixels);
      col = cols->data() + s * patch * pixels;
    }
    detail::MatMap(out.data().data() + s * g.cout * pixels, g.cout, pixels).noalias() =
        wmat * detail::ConstMatMap(col, patch, pixels);
  }

  return x.tape->record(std::move(out), {x, kernel}, [x, kernel, g, n, cols, pointwise](Tape& t, const Tensor& grad) {
    const std::size_t patch = g.patch(), pixels = g.pixels();
    Tensor* dk = t.grad_target(kernel);
    Tensor* dx = t.grad_target(x);
    detail::ConstMatMap wmat(kernel.value().data().data(), g.cout, patch);
    detail::RowMatrix dcol;
    for (std::size_t s = 0; s < n; ++s) {
      detail::ConstMatMap dy(grad.data().data() + s * g.cout * pixels, g.cout, pixels);
      const double* col = pointwise ? x.value().data().data() + s * g.cin * g.h * g.w
                                    : cols->data() + s * patch * pixels;
      if (dk) {
        detail::MatMap(dk->data().data(), g.cout, patch).noalias() +=
            dy * detail::ConstMatMap(col, patch, pixels).transpose();
      }
      if (dx) {
        double* dxs = dx->data().data() + s * g.cin * g.h * g.w;
        if (pointwise) {
          detail::MatMap(dxs, patch, pixels).noalias() += wmat.transpose() * dy;
        } else {
          dcol.noalias() = wmat.transpose() * dy;
          detail::col2im_add(dcol.data(), g, dxs);
        }
      }
    }
  });
}

/// Running statistics owned by the model; updated in place in train mode.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;

  static BatchNormStats fresh(std::size_t channels) {
    return {Tensor(Shape{channels}), Tensor::create(Shape{channels}, init::Ones{})};
  }
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization over (N, H, W), followed by gamma * xhat + beta.
/// Running variance is tracked unbiased; normalization uses the biased one.
inline Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode,
                       double momentum = kBatchNormMomentum, double eps = kBatchNormEps) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "batchnorm2d input");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  require(gamma.value().numel() == c && beta.value().numel() == c, ErrorKind::ShapeError,
          "batchnorm2d affine parameters must have one entry per channel");
  require(stats.running_mean.numel() == c && stats.running_var.numel() == c, ErrorKind::ShapeError,
          "batchnorm2d running stats width mismatch");
  const std::size_t m = n * hw;
  if (mode == Mode::Train)
    require(m >= 2, ErrorKind::DegenerateBatch, "batchnorm2d needs N*H*W >= 2 in train mode, got " + std::to_string(m));

  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  Tensor out(xv.shape());
  const double* xd = xv.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::Train) {
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t k = 0; k < hw; ++k) mean += xd[(s * c + ch) * hw + k];
      mean /= static_cast<double>(m);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t k = 0; k < hw; ++k) {
          const double d = xd[(s * c + ch) * hw + k] - mean;
          var += d * d;
        }
      const double unbiased = var / static_cast<double>(m - 1);
      var /= static_cast<double>(m);
      stats.running_mean[ch] = (1.0 - momentum) * stats.running_mean[ch] + momentum * mean;
      stats.running_var[ch] = (1.0 - momentum) * stats.running_var[ch] + momentum * unbiased;
    } else {
      mean = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    const double gm = gamma.value()[ch], bt = beta.value()[ch];
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t idx = (s * c + ch) * hw + k;
        const double xh = (xd[idx] - mean) * is;
        (*xhat)[idx] = xh;
        out[idx] = gm * xh + bt;
      }
  }

  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, mode, n, c, hw, m](Tape& t, const Tensor& g) {
    Tensor* dx = t.grad_target(x);
    Tensor* dgamma = t.grad_target(gamma);
    Tensor* dbeta = t.grad_target(beta);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t k = 0; k < hw; ++k) {
          const std::size_t idx = (s * c + ch) * hw + k;
          sum_dy += g[idx];
          sum_dy_xhat += g[idx] * (*xhat)[idx];
        }
      if (dgamma) (*dgamma)[ch] += sum_dy_xhat;
      if (dbeta) (*dbeta)[ch] += sum_dy;
      if (!dx) continue;
      const double gm = gamma.value()[ch];
      const double is = (*inv_std)[ch];
      if (mode == Mode::Eval) {
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t idx = (s * c + ch) * hw + k;
            (*dx)[idx] += g[idx] * gm * is;
          }
      } else {
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t idx = (s * c + ch) * hw + k;
            (*dx)[idx] += gm * is * inv_m *
                          (static_cast<double>(m) * g[idx] - sum_dy - (*xhat)[idx] * sum_dy_xhat);
          }
      }
    }
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor* dx = t.grad_target(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (xv[i] > 0.0) (*dx)[i] += g[i];
  });
}

inline Var add(Var a, Var b) {
  require(a.shape() == b.shape(), ErrorKind::ShapeError,
          "add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* da = t.grad_target(a)) detail::add_into(*da, g);
    if (Tensor* db = t.grad_target(b)) detail::add_into(*db, g);
  });
}

/// c * x for a fixed scalar c.
inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.vec()) v *= c;
  return x.tape->record(std::move(out), {x}, [x, c](Tape& t, const Tensor& g) {
    Tensor* dx = t.grad_target(x);
    for (std::size_t i = 0; i < g.numel(); ++i) (*dx)[i] += c * g[i];
  });
}

/// Sum of all entries, as a [1] tensor.
inline Var sum(Var x) {
  return x.tape->record(Tensor::scalar(x.value().sum()), {x}, [x](Tape& t, const Tensor& g) {
    Tensor* dx = t.grad_target(x);
    for (double& v : dx->vec()) v += g[0];
  });
}

/// sum_k weights[k] * terms[k] for scalar terms.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  require(!terms.empty() && terms.size() == weights.size(), ErrorKind::ShapeError,
          "weighted_sum needs one weight per term");
  double total = 0.0;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    require(terms[k].value().numel() == 1, ErrorKind::NotScalar, "weighted_sum terms must be scalars");
    total += weights[k] * terms[k].value()[0];
  }
  return terms[0].tape->record(Tensor::scalar(total), terms, [terms, weights](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < terms.size(); ++k)
      if (Tensor* d = t.grad_target(terms[k])) (*d)[0] += weights[k] * g[0];
  });
}

/// Nearest-neighbour 2x upsampling: out[n,c,2i+a,2j+b] = x[n,c,i,j].
inline Var upsample2x_nearest(Var x) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "upsample2x input");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out(Shape{n, c, 2 * h, 2 * w});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j) out.at(s, ch, i, j) = xv.at(s, ch, i / 2, j / 2);
  return x.tape->record(std::move(out), {x}, [x, n, c, h, w](Tape& t, const Tensor& g) {
    Tensor* dx = t.grad_target(x);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j) dx->at(s, ch, i / 2, j / 2) += g.at(s, ch, i, j);
  });
}

/// Mean over (H, W): [N, C, H, W] -> [N, C].
inline Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "global_avg_pool input");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out(Shape{n, c});
  for (std::size_t r = 0; r < n * c; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < hw; ++k) acc += xv[r * hw + k];
    out[r] = acc / static_cast<double>(hw);
  }
  return x.tape->record(std::move(out), {x}, [x, n, c, hw](Tape& t, const Tensor& g) {
    Tensor* dx = t.grad_target(x);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t r = 0; r < n * c; ++r)
      for (std::size_t k = 0; k < hw; ++k) (*dx)[r * hw + k] += g[r] * inv;
  });
}

/// Stacks along the leading dimension.
inline Var concat_rows(Var a, Var b) {
  const Tensor parts[] = {a.value(), b.value()};
  Tensor out = concat_rows(std::span<const Tensor>(parts));
  const std::size_t split = a.value().numel();
  return a.tape->record(std::move(out), {a, b}, [a, b, split](Tape& t, const Tensor& g) {
    if (Tensor* da = t.grad_target(a))
      for (std::size_t i = 0; i < da->numel(); ++i) (*da)[i] += g[i];
    if (Tensor* db = t.grad_target(b))
      for (std::size_t i = 0; i < db->numel(); ++i) (*db)[i] += g[split + i];
  });
}

/// Joins [N, D_k] matrices side by side into [N, sum D_k].
inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorKind::ShapeError, "concat_cols of nothing");
  const std::size_t n = parts[0].value().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_rank(p.value(), 2, "concat_cols part");
    require(p.value().dim(0) == n, ErrorKind::ShapeError, "concat_cols row count mismatch");
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor out(Shape{n, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j) out.at(r, offset + j) = v.at(r, j);
    offset += widths[k];
  }
  return parts[0].tape->record(std::move(out), parts, [parts, widths, n, total](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (Tensor* d = t.grad_target(parts[k]))
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) (*d)[r * widths[k] + j] += g[r * total + offset + j];
      offset += widths[k];
    }
  });
}

}  // namespace hico
