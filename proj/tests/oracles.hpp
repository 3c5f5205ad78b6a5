#pragma once

// Independent reference implementations used only by tests. They share no
// code with the library: plain nested loops over std::vector, no stacking
// helpers, no max-shift tricks.

#include <cmath>
#include <cstddef>
#include <vector>

#include "hico/tensor.hpp"

namespace hico::oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const Tensor& m) {
  Rows out(m.dim(0), std::vector<double>(m.dim(1)));
  for (std::size_t r = 0; r < m.dim(0); ++r)
    for (std::size_t c = 0; c < m.dim(1); ++c) out[r][c] = m.at(r, c);
  return out;
}

inline double cos_sim(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

/// -log( exp(sim(anchor, cands[pos])/tau) / sum_{k != skip} exp(sim(anchor, cands[k])/tau) )
inline double nce(const std::vector<double>& anchor, const Rows& cands, std::size_t pos, long skip, double tau) {
  double denom = 0;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    if (static_cast<long>(k) == skip) continue;
    denom += std::exp(cos_sim(anchor, cands[k]) / tau);
  }
  return -std::log(std::exp(cos_sim(anchor, cands[pos]) / tau) / denom);
}

/// Peer-level loss for views A (rows F_i) and B (rows F_i').
inline double peer_loss(const Rows& a, const Rows& b, double tau) {
  const std::size_t n = a.size();
  Rows all = a;
  all.insert(all.end(), b.begin(), b.end());
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += nce(a[i], all, n + i, static_cast<long>(i), tau);
    acc += nce(b[i], all, i, static_cast<long>(n + i), tau);
  }
  return acc / (2.0 * n);
}

/// L_{g l'} + L_{g' l}. Candidates are the opposite level's 2N rows; when
/// `exclude_aligned`, the candidate at the anchor's own index is skipped.
inline double cross_loss(const Rows& g, const Rows& g2, const Rows& l, const Rows& l2, double tau,
                         bool exclude_aligned) {
  const std::size_t n = g.size();
  Rows glob = g, loc = l;
  glob.insert(glob.end(), g2.begin(), g2.end());
  loc.insert(loc.end(), l2.begin(), l2.end());
  auto skip = [&](std::size_t idx) { return exclude_aligned ? static_cast<long>(idx) : -1L; };
  double gl2 = 0, g2l = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // anchor g_i (index i) vs l'_i; anchor l'_i (index N+i) vs g_i
    gl2 += nce(g[i], loc, n + i, skip(i), tau) + nce(l2[i], glob, i, skip(n + i), tau);
    // anchor g'_i (index N+i) vs l_i; anchor l_i (index i) vs g'_i
    g2l += nce(g2[i], loc, i, skip(n + i), tau) + nce(l[i], glob, n + i, skip(i), tau);
  }
  return gl2 / (2.0 * n) + g2l / (2.0 * n);
}

inline double cross_entropy(const std::vector<double>& logits, const std::vector<double>& target) {
  double z = 0;
  for (double o : logits) z += std::exp(o);
  double ce = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) ce -= target[c] * std::log(std::exp(logits[c]) / z);
  return ce;
}

inline double softened_ce(const Rows& o, const Rows& o2, const Rows& y) {
  double acc = 0;
  for (std::size_t i = 0; i < o.size(); ++i) acc += cross_entropy(o[i], y[i]) + cross_entropy(o2[i], y[i]);
  return acc / (2.0 * o.size());
}

/// Direct cross-correlation with zero padding, one output at a time.
inline Tensor conv2d_direct(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{n, cout, ho, wo});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long y = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                acc += x.at(s, c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) * k.at(o, c, i, j);
              }
          out.at(s, o, oy, ox) = acc;
        }
  return out;
}

}  // namespace hico::oracle
