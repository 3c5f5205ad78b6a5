#pragma once

// Hierarchical contrastive objective: InfoNCE, peer-level and cross-level
// alignment, the overall contrastive loss, softened labels, softened
// cross-entropy and the total loss.
//
// Contrastive batches are stacked as 2N rows: [view1 of video 1..N, view2 of
// video 1..N], so row i and row (i + N) mod 2N form a positive pair.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hico/autodiff.hpp"
#include "hico/error.hpp"
#include "hico/ops.hpp"
#include "hico/tensor.hpp"

namespace hico {

inline constexpr double kNormEpsilon = 1e-12;

/// Which quantity divides the smoothing mass alpha in the softened labels.
enum class SmoothDenominator { BatchMinusOne, ClassesMinusOne };

/// Candidate rule for cross-level InfoNCE. ExcludeAligned drops the
/// candidate at the anchor's own stacking index (the same image's embedding
/// at the other level); AllRows keeps all 2N candidates.
enum class CrossCandidates { ExcludeAligned, AllRows };

struct LossWeights {
  double tau = 0.5;
  double lambda = 0.5;
  double alpha = 0.2;
  double beta = 0.2;
  SmoothDenominator smooth_denominator = SmoothDenominator::BatchMinusOne;
  CrossCandidates cross_candidates = CrossCandidates::ExcludeAligned;

  void validate() const {
    require(tau > 0.0, ErrorKind::InvalidHyperparameter, "tau must be > 0");
    require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::InvalidHyperparameter, "lambda must be in [0,1]");
    require(alpha >= 0.0 && alpha < 1.0, ErrorKind::InvalidHyperparameter, "alpha must be in [0,1)");
    require(beta >= 0.0, ErrorKind::InvalidHyperparameter, "beta must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Plain-value reference functions.

/// a.b / (|a| |b|). Norms below 1e-12 are clamped; `degenerate` reports it.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr) {
  require(a.size() == b.size(), ErrorKind::ShapeError, "cosine_similarity length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (degenerate) *degenerate = na < kNormEpsilon || nb < kNormEpsilon;
  return dot / (std::max(na, kNormEpsilon) * std::max(nb, kNormEpsilon));
}

/// InfoNCE of anchor row i against positive row j over the candidate rows,
/// excluding only the anchor itself from the denominator.
inline double info_nce(const Tensor& candidates, std::size_t anchor, std::size_t positive, double tau) {
  require(tau > 0.0, ErrorKind::InvalidHyperparameter, "tau must be > 0");
  require(candidates.shape().rank() == 2, ErrorKind::ShapeError, "info_nce expects a [rows, dim] matrix");
  const std::size_t rows = candidates.dim(0), dim = candidates.dim(1);
  require(anchor < rows && positive < rows && anchor != positive, ErrorKind::ShapeError,
          "info_nce needs distinct in-range anchor and positive");
  auto row = [&](std::size_t r) { return candidates.data().subspan(r * dim, dim); };
  std::vector<double> logits;
  double positive_logit = 0.0;
  for (std::size_t k = 0; k < rows; ++k) {
    if (k == anchor) continue;
    const double s = cosine_similarity(row(anchor), row(k)) / tau;
    logits.push_back(s);
    if (k == positive) positive_logit = s;
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double acc = 0.0;
  for (double s : logits) acc += std::exp(s - top);
  return -(positive_logit - top - std::log(acc));
}

/// Weighted combination of the five alignment terms.
inline double overall_cl_loss(double l_ll, double l_mm, double l_gg, double l_global_local, double l_global_medium,
                              double lambda) {
  return lambda * (l_ll + l_mm + l_gg) + (1.0 - lambda) * (l_global_local + l_global_medium);
}

inline double total_loss(double l_con, double l_soften, double beta) { return l_con + beta * l_soften; }

/// (1 - alpha) y + alpha / (denominator - 1), entrywise. Not renormalized.
inline Tensor soften_labels(const Tensor& one_hot, double alpha, double denominator_value) {
  require(denominator_value >= 2.0, ErrorKind::InvalidHyperparameter, "soften denominator must be >= 2");
  require(alpha >= 0.0 && alpha < 1.0, ErrorKind::InvalidHyperparameter, "alpha must be in [0,1)");
  Tensor out = one_hot;
  const double mass = alpha / (denominator_value - 1.0);
  for (double& v : out.vec()) v = (1.0 - alpha) * v + mass;
  return out;
}

inline Tensor one_hot(std::size_t class_id, std::size_t num_classes) {
  require(class_id < num_classes, ErrorKind::ShapeError, "class id out of range");
  Tensor t(Shape{num_classes});
  t[class_id] = 1.0;
  return t;
}

/// Denominator fed to soften_labels for a given mode.
inline double smoothing_denominator(SmoothDenominator mode, std::size_t batch_size, std::size_t num_classes) {
  return mode == SmoothDenominator::BatchMinusOne ? static_cast<double>(batch_size)
                                                  : static_cast<double>(num_classes);
}

// ---------------------------------------------------------------------------
// Differentiable versions.

/// One InfoNCE term: anchor row into the anchor matrix, positive and
/// excluded rows into the candidate matrix (excluded < 0: none).
struct ContrastTerm {
  std::size_t anchor;
  std::size_t positive;
  std::ptrdiff_t excluded;
};

namespace detail {

struct NormalizedRows {
  std::vector<double> unit;
  std::vector<double> norm;
};

inline NormalizedRows normalize_rows(const Tensor& m) {
  const std::size_t rows = m.dim(0), dim = m.dim(1);
  NormalizedRows out{std::vector<double>(m.numel()), std::vector<double>(rows)};
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) sq += m[r * dim + k] * m[r * dim + k];
    const double nrm = std::max(std::sqrt(sq), kNormEpsilon);
    out.norm[r] = nrm;
    for (std::size_t k = 0; k < dim; ++k) out.unit[r * dim + k] = m[r * dim + k] / nrm;
  }
  return out;
}

// Pulls a gradient w.r.t. unit rows back through x / max(|x|, eps).
inline void unnormalize_grad(const NormalizedRows& n, const std::vector<double>& du, std::size_t dim, Tensor& dx) {
  const std::size_t rows = n.norm.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* u = n.unit.data() + r * dim;
    const double* g = du.data() + r * dim;
    if (n.norm[r] <= kNormEpsilon) {
      for (std::size_t k = 0; k < dim; ++k) dx[r * dim + k] += g[k] / kNormEpsilon;
      continue;
    }
    double proj = 0.0;
    for (std::size_t k = 0; k < dim; ++k) proj += u[k] * g[k];
    for (std::size_t k = 0; k < dim; ++k) dx[r * dim + k] += (g[k] - u[k] * proj) / n.norm[r];
  }
}

}  // namespace detail

/// Sum over terms of -log softmax_positive(cos(anchor, candidates) / tau),
/// with the excluded candidate removed from the softmax. Log-sum-exp is
/// max-shifted.
inline Var contrast_sum(Var anchors, Var candidates, std::vector<ContrastTerm> terms, double tau) {
  require(tau > 0.0, ErrorKind::InvalidHyperparameter, "tau must be > 0");
  const Tensor& av = anchors.value();
  const Tensor& cv = candidates.value();
  require(av.shape().rank() == 2 && cv.shape().rank() == 2 && av.dim(1) == cv.dim(1), ErrorKind::ShapeError,
          "contrast_sum expects [rows, dim] matrices of equal width");
  const std::size_t na = av.dim(0), nc = cv.dim(0), dim = av.dim(1);

  auto ua = std::make_shared<detail::NormalizedRows>(detail::normalize_rows(av));
  auto uc = std::make_shared<detail::NormalizedRows>(detail::normalize_rows(cv));
  // Per term softmax weights over candidates (excluded entry stays 0).
  auto probs = std::make_shared<std::vector<double>>(terms.size() * nc, 0.0);

  double total = 0.0;
  std::vector<double> logits(nc);
  for (std::size_t t = 0; t < terms.size(); ++t) {
    const ContrastTerm& term = terms[t];
    require(term.anchor < na && term.positive < nc && term.excluded < static_cast<std::ptrdiff_t>(nc),
            ErrorKind::ShapeError, "contrast term index out of range");
    require(static_cast<std::ptrdiff_t>(term.positive) != term.excluded, ErrorKind::ShapeError,
            "positive candidate cannot be excluded");
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < nc; ++k) {
      if (static_cast<std::ptrdiff_t>(k) == term.excluded) continue;
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += ua->unit[term.anchor * dim + d] * uc->unit[k * dim + d];
      logits[k] = dot / tau;
      top = std::max(top, logits[k]);
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < nc; ++k) {
      if (static_cast<std::ptrdiff_t>(k) == term.excluded) continue;
      const double e = std::exp(logits[k] - top);
      (*probs)[t * nc + k] = e;
      acc += e;
    }
    for (std::size_t k = 0; k < nc; ++k) (*probs)[t * nc + k] /= acc;
    total += -(logits[term.positive] - top - std::log(acc));
  }

  return anchors.tape->record(
      Tensor::scalar(total), {anchors, candidates},
      [anchors, candidates, terms = std::move(terms), ua, uc, probs, na, nc, dim, tau](Tape& t, const Tensor& g) {
        std::vector<double> dua(na * dim, 0.0), duc(nc * dim, 0.0);
        for (std::size_t i = 0; i < terms.size(); ++i) {
          const ContrastTerm& term = terms[i];
          const double* u = ua->unit.data() + term.anchor * dim;
          for (std::size_t k = 0; k < nc; ++k) {
            if (static_cast<std::ptrdiff_t>(k) == term.excluded) continue;
            const double ds = g[0] * ((*probs)[i * nc + k] - (k == term.positive ? 1.0 : 0.0)) / tau;
            if (ds == 0.0) continue;
            const double* v = uc->unit.data() + k * dim;
            for (std::size_t d = 0; d < dim; ++d) {
              dua[term.anchor * dim + d] += ds * v[d];
              duc[k * dim + d] += ds * u[d];
            }
          }
        }
        if (Tensor* da = t.grad_target(anchors)) detail::unnormalize_grad(*ua, dua, dim, *da);
        if (Tensor* dc = t.grad_target(candidates)) detail::unnormalize_grad(*uc, duc, dim, *dc);
      });
}

/// Terms for all 2N anchors of a stacked matrix, positive at (a + N) mod 2N.
inline std::vector<ContrastTerm> paired_terms(std::size_t two_n, bool exclude_aligned) {
  require(two_n >= 2 && two_n % 2 == 0, ErrorKind::EmptyBatch, "contrastive batch needs 2N >= 2 rows");
  const std::size_t n = two_n / 2;
  std::vector<ContrastTerm> terms;
  terms.reserve(two_n);
  for (std::size_t a = 0; a < two_n; ++a)
    terms.push_back({a, (a + n) % two_n, exclude_aligned ? static_cast<std::ptrdiff_t>(a) : -1});
  return terms;
}

/// (1/2N) sum_i [L(F_i, F_i') + L(F_i', F_i)] with negatives drawn from the
/// stacked 2N rows.
inline Var symmetric_pair_loss(Var view1, Var view2, double tau) {
  require(view1.shape() == view2.shape(), ErrorKind::ShapeError, "symmetric_pair_loss views differ in shape");
  Var stacked = concat_rows(view1, view2);
  const std::size_t two_n = stacked.value().dim(0);
  return scale(contrast_sum(stacked, stacked, paired_terms(two_n, true), tau), 1.0 / static_cast<double>(two_n));
}

/// Per level, the 2N stacked embedding rows of one batch.
struct ContrastiveBatch {
  Var local;
  Var medium;
  Var global;

  std::size_t videos() const { return global.value().dim(0) / 2; }
};

struct PeerLosses {
  Var local;
  Var medium;
  Var global;
};

inline Var stacked_pair_loss(Var stacked, double tau) {
  const std::size_t two_n = stacked.value().dim(0);
  return scale(contrast_sum(stacked, stacked, paired_terms(two_n, true), tau), 1.0 / static_cast<double>(two_n));
}

inline PeerLosses peer_level_losses(const ContrastiveBatch& batch, double tau) {
  return {stacked_pair_loss(batch.local, tau), stacked_pair_loss(batch.medium, tau),
          stacked_pair_loss(batch.global, tau)};
}

/// L_{g l'} + L_{g' l}: global rows anchor against the other level's rows and
/// vice versa. Each anchor's candidate set is the 2N rows of the opposite level.
inline Var cross_level_loss(Var global_rows, Var level_rows, double tau,
                            CrossCandidates rule = CrossCandidates::ExcludeAligned) {
  require(global_rows.shape() == level_rows.shape(), ErrorKind::ShapeError, "cross_level_loss level shapes differ");
  const std::size_t two_n = global_rows.value().dim(0);
  const bool exclude = rule == CrossCandidates::ExcludeAligned;
  Var g_to_l = contrast_sum(global_rows, level_rows, paired_terms(two_n, exclude), tau);
  Var l_to_g = contrast_sum(level_rows, global_rows, paired_terms(two_n, exclude), tau);
  return weighted_sum({g_to_l, l_to_g}, {1.0 / static_cast<double>(two_n), 1.0 / static_cast<double>(two_n)});
}

/// Row-wise sum of -sum_c target_c log softmax(logits)_c. Rows whose target
/// is all zero contribute nothing.
inline Var soft_cross_entropy_sum(Var logits, const Tensor& targets) {
  const Tensor& lv = logits.value();
  require(lv.shape().rank() == 2 && targets.shape() == lv.shape(), ErrorKind::ShapeError,
          "soft_cross_entropy expects matching [N, C] logits and targets");
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  auto softmax = std::make_shared<Tensor>(lv.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double top = lv.at(r, 0);
    for (std::size_t k = 1; k < c; ++k) top = std::max(top, lv.at(r, k));
    double acc = 0.0;
    for (std::size_t k = 0; k < c; ++k) acc += std::exp(lv.at(r, k) - top);
    const double lse = top + std::log(acc);
    for (std::size_t k = 0; k < c; ++k) {
      softmax->at(r, k) = std::exp(lv.at(r, k) - lse);
      total -= targets.at(r, k) * (lv.at(r, k) - lse);
    }
  }
  return logits.tape->record(Tensor::scalar(total), {logits}, [logits, targets, softmax, n, c](Tape& t, const Tensor& g) {
    Tensor* dl = t.grad_target(logits);
    for (std::size_t r = 0; r < n; ++r) {
      double mass = 0.0;
      for (std::size_t k = 0; k < c; ++k) mass += targets.at(r, k);
      for (std::size_t k = 0; k < c; ++k) dl->at(r, k) += g[0] * (mass * softmax->at(r, k) - targets.at(r, k));
    }
  });
}

/// (1/2M) sum_i [CE(o_i, y_i) + CE(o_i', y_i)] where M is `rows` (defaults to
/// the batch size). Passing zero target rows plus M = labeled count averages
/// over a labeled subset.
inline Var softened_ce(Var logits1, Var logits2, const Tensor& soft_labels, std::size_t rows = 0) {
  require(logits1.shape() == logits2.shape(), ErrorKind::ShapeError, "softened_ce view logits differ in shape");
  const std::size_t m = rows == 0 ? logits1.value().dim(0) : rows;
  const double w = 1.0 / (2.0 * static_cast<double>(m));
  return weighted_sum({soft_cross_entropy_sum(logits1, soft_labels), soft_cross_entropy_sum(logits2, soft_labels)},
                      {w, w});
}

}  // namespace hico
