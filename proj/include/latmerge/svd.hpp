#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "latmerge/tensor.hpp"

namespace latmerge {

template <typename T>
struct SvdFactors {
  BasicTensor<T> u_left;        // m×r
  std::vector<double> sigma;    // r, non-increasing
  BasicTensor<T> v_right_t;     // r×n
};

struct SvdOptions {
  double tol = 1e-10;
  int max_sweeps = 100;
};

namespace detail {

using Columns = std::vector<std::vector<double>>;

// Hestenes one-sided Jacobi on the columns of a tall matrix (m ≥ n).
// On return cols hold U·Σ and v holds V (as columns).
inline void jacobi_orthogonalize(Columns& cols, Columns& v, const SvdOptions& opt) {
  const std::size_t n = cols.size();
  const std::size_t m = n ? cols[0].size() : 0;
  double worst = 0.0;
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& a = cols[p];
        auto& b = cols[q];
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a[i] * a[i];
          beta += b[i] * b[i];
          gamma += a[i] * b[i];
        }
        if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, off);
        if (off < opt.tol) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ai = a[i], bi = b[i];
          a[i] = c * ai - s * bi;
          b[i] = s * ai + c * bi;
        }
        auto& vp = v[p];
        auto& vq = v[q];
        for (std::size_t i = 0; i < vp.size(); ++i) {
          const double ai = vp[i], bi = vq[i];
          vp[i] = c * ai - s * bi;
          vq[i] = s * ai + c * bi;
        }
      }
    }
    if (worst < opt.tol) return;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "thin_svd: no convergence after %d sweeps (max off-diagonal cosine %.3e)",
                opt.max_sweeps, worst);
  fail(ErrorKind::numeric, buf);
}

// Fill zero columns with unit vectors orthogonal to the rest (Gram-Schmidt
// over the standard basis).
inline void complete_basis(Columns& u, const std::vector<bool>& valid) {
  const std::size_t m = u.empty() ? 0 : u[0].size();
  std::size_t probe = 0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (valid[j]) continue;
    for (; probe < m; ++probe) {
      std::vector<double> e(m, 0.0);
      e[probe] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < u.size(); ++k) {
          if (k == j || (!valid[k] && k > j)) continue;
          double d = 0;
          for (std::size_t i = 0; i < m; ++i) d += e[i] * u[k][i];
          for (std::size_t i = 0; i < m; ++i) e[i] -= d * u[k][i];
        }
      double nrm = 0;
      for (double x : e) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > 1e-6) {
        for (std::size_t i = 0; i < m; ++i) u[j][i] = e[i] / nrm;
        ++probe;
        break;
      }
    }
  }
}

// SVD of a tall m×n matrix given column-wise. Returns U (m×n cols), sigma, V (n×n cols).
inline void tall_svd(Columns cols, Columns& u, std::vector<double>& sigma, Columns& v,
                     const SvdOptions& opt) {
  const std::size_t n = cols.size();
  v.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;
  jacobi_orthogonalize(cols, v, opt);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (double x : cols[j]) s += x * x;
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
  const double smax = n ? norms[order[0]] : 0.0;
  const double floor = smax * 1e-14 * static_cast<double>(std::max<std::size_t>(cols.empty() ? 1 : cols[0].size(), n));

  u.assign(n, {});
  sigma.assign(n, 0.0);
  Columns vs(n);
  std::vector<bool> valid(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    vs[k] = v[j];
    u[k] = cols[j];
    if (norms[j] > floor && norms[j] > 0.0) {
      sigma[k] = norms[j];
      for (double& x : u[k]) x /= norms[j];
      valid[k] = true;
    } else {
      std::fill(u[k].begin(), u[k].end(), 0.0);
    }
  }
  complete_basis(u, valid);
  v = std::move(vs);
}

}  // namespace detail

// Thin SVD by one-sided Jacobi. Sign convention: the largest-magnitude entry
// of each left singular vector (lowest index on ties) is non-negative.
template <typename T>
SvdFactors<T> thin_svd(const BasicTensor<T>& a, const SvdOptions& opt = {}) {
  require(a.rank() == 2 && a.rows() >= 1 && a.cols() >= 1, ErrorKind::validation,
          "thin_svd: need a non-empty matrix, got " + shape_str(a.shape()));
  require(a.all_finite(), ErrorKind::numeric, "thin_svd: non-finite input");
  const std::size_t m = a.rows(), n = a.cols();
  const bool tall = m >= n;
  const std::size_t r = std::min(m, n);

  // Work on the tall orientation; its column count is r.
  detail::Columns cols(r, std::vector<double>(tall ? m : n));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (tall) cols[j][i] = a(i, j);
      else cols[i][j] = a(i, j);
    }
  detail::Columns left, right;
  std::vector<double> sigma;
  detail::tall_svd(std::move(cols), left, sigma, right, opt);
  // tall: A = left Σ rightᵀ. wide: Aᵀ = left Σ rightᵀ, so A = right Σ leftᵀ.
  detail::Columns& ucols = tall ? left : right;   // each length m
  detail::Columns& vcols = tall ? right : left;   // each length n

  for (std::size_t k = 0; k < r; ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m; ++i)
      if (std::abs(ucols[k][i]) > std::abs(ucols[k][best])) best = i;
    if (ucols[k][best] < 0) {
      for (double& x : ucols[k]) x = -x;
      for (double& x : vcols[k]) x = -x;
    }
  }

  SvdFactors<T> out{BasicTensor<T>(m, r), std::move(sigma), BasicTensor<T>(r, n)};
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t i = 0; i < m; ++i) out.u_left(i, k) = static_cast<T>(ucols[k][i]);
    for (std::size_t j = 0; j < n; ++j) out.v_right_t(k, j) = static_cast<T>(vcols[k][j]);
  }
  return out;
}

// U·diag(σ)·Vᵀ, optionally keeping only the first `rank` factors.
template <typename T>
BasicTensor<T> reconstruct(const SvdFactors<T>& f, std::size_t rank = static_cast<std::size_t>(-1)) {
  const std::size_t m = f.u_left.rows(), n = f.v_right_t.cols();
  const std::size_t r = std::min(rank, f.sigma.size());
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t i = 0; i < m; ++i) {
      const double us = static_cast<double>(f.u_left(i, k)) * f.sigma[k];
      if (us == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) acc[i * n + j] += us * static_cast<double>(f.v_right_t(k, j));
    }
  return BasicTensor<T>(Shape{m, n}, std::vector<T>(acc.begin(), acc.end()));
}

}  // namespace latmerge
