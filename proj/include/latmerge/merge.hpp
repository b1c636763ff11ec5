#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latmerge/rng.hpp"
#include "latmerge/svd.hpp"
#include "latmerge/weights.hpp"

namespace latmerge {

struct TaskVector {
  WeightMap delta;
  std::string source_name;
};

enum class MergeMethod { task_arithmetic, dare, ties, knots };

inline const char* method_name(MergeMethod m) {
  switch (m) {
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::dare: return "dare";
    case MergeMethod::ties: return "ties";
    case MergeMethod::knots: return "knots";
  }
  return "?";
}

inline MergeMethod parse_method(const std::string& s) {
  if (s == "task_arithmetic") return MergeMethod::task_arithmetic;
  if (s == "dare") return MergeMethod::dare;
  if (s == "ties") return MergeMethod::ties;
  if (s == "knots") return MergeMethod::knots;
  fail(ErrorKind::validation, "unknown merge method '" + s + "'");
}

struct MergeSpec {
  MergeMethod method = MergeMethod::task_arithmetic;
  std::vector<double> lambdas;
  std::optional<double> weight_x;  // two-model weighting: λ1 = xλ, λ2 = (1−x)λ
  double drop_p = 0.0;
  double top_k_percent = 100.0;
  std::uint64_t seed = 0;
  std::shared_ptr<const MergeSpec> knots_inner;
};

inline void validate(const MergeSpec& s) {
  for (double l : s.lambdas)
    require(std::isfinite(l), ErrorKind::validation, "lambdas must be finite");
  require(s.drop_p >= 0.0 && s.drop_p < 1.0, ErrorKind::validation,
          "drop_p must lie in [0, 1), got " + std::to_string(s.drop_p));
  require(s.top_k_percent > 0.0 && s.top_k_percent <= 100.0, ErrorKind::validation,
          "top_k_percent must lie in (0, 100], got " + std::to_string(s.top_k_percent));
  if (s.weight_x)
    require(*s.weight_x >= 0.0 && *s.weight_x <= 1.0, ErrorKind::validation,
            "weight_x must lie in [0, 1]");
  if (s.method == MergeMethod::knots) {
    require(s.knots_inner != nullptr, ErrorKind::validation, "knots needs knots_inner");
    require(s.knots_inner->method != MergeMethod::knots, ErrorKind::validation,
            "knots_inner cannot itself be knots");
    validate(*s.knots_inner);
  }
}

// Per-model weights for n models (a single λ for ties).
inline std::vector<double> resolve_lambdas(const MergeSpec& s, std::size_t n) {
  if (s.method == MergeMethod::ties) {
    require(s.lambdas.size() == 1 && !s.weight_x, ErrorKind::validation,
            "ties takes a single lambda and no weight_x");
    return s.lambdas;
  }
  if (s.weight_x) {
    require(n == 2 && s.lambdas.size() == 1, ErrorKind::validation,
            "weight_x needs exactly two models and a single lambda");
    const double x = *s.weight_x, l = s.lambdas[0];
    return {x * l, (1.0 - x) * l};
  }
  require(s.lambdas.size() == n, ErrorKind::validation,
          "lambdas has " + std::to_string(s.lambdas.size()) + " entries for " +
              std::to_string(n) + " models");
  return s.lambdas;
}

// --- tensor kernels --------------------------------------------------------

template <typename T>
void dare_inplace(BasicTensor<T>& t, double p, SeededStream& stream) {
  const double keep = 1.0 / (1.0 - p);
  for (auto& v : t.storage())
    v = stream.bernoulli(p) ? T{0} : static_cast<T>(static_cast<double>(v) * keep);
}

inline std::size_t ties_keep_count(double k_percent, std::size_t numel) {
  if (numel == 0) return 0;
  const auto k = static_cast<std::size_t>(std::floor(k_percent * static_cast<double>(numel) / 100.0 + 0.5));
  return std::clamp<std::size_t>(k, 1, numel);
}

// Keep the k largest magnitudes; ties go to the lower flat index.
template <typename T>
BasicTensor<T> ties_trim_tensor(const BasicTensor<T>& t, double k_percent) {
  const std::size_t k = ties_keep_count(k_percent, t.numel());
  std::vector<std::size_t> idx(t.numel());
  std::iota(idx.begin(), idx.end(), 0);
  auto before = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(static_cast<double>(t[a]));
    const double mb = std::abs(static_cast<double>(t[b]));
    return ma != mb ? ma > mb : a < b;
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k) - 1, idx.end(), before);
  BasicTensor<T> out(t.shape());
  for (std::size_t i = 0; i < k; ++i) out[idx[i]] = t[idx[i]];
  return out;
}

// Sign election (zero sum elects +) and mean over aligned nonzero entries.
template <typename T>
BasicTensor<T> ties_disjoint_mean(const std::vector<BasicTensor<T>>& trimmed) {
  BasicTensor<T> out(trimmed.front().shape());
  for (std::size_t j = 0; j < out.numel(); ++j) {
    double sum = 0.0;
    for (const auto& t : trimmed) sum += t[j];
    const bool positive = sum >= 0.0;
    double acc = 0.0;
    std::size_t count = 0;
    for (const auto& t : trimmed) {
      const double v = t[j];
      if (v != 0.0 && (v > 0.0) == positive) {
        acc += v;
        ++count;
      }
    }
    out[j] = count ? static_cast<T>(acc / static_cast<double>(count)) : T{0};
  }
  return out;
}

// --- map-level operations ---------------------------------------------------

inline TaskVector task_vector(const WeightMap& theta_i, const WeightMap& theta_base,
                              std::string source_name = {}) {
  return {sub(theta_i, theta_base), std::move(source_name)};
}

namespace detail {
inline void check_taus(const WeightMap& base, std::span<const TaskVector> taus) {
  require(!taus.empty(), ErrorKind::validation, "merge needs at least one task vector");
  for (const auto& t : taus) check_compatible(base, t.delta);
}
}  // namespace detail

inline WeightMap merge_task_arithmetic(const WeightMap& base, std::span<const TaskVector> taus,
                                       std::span<const double> lambdas) {
  detail::check_taus(base, taus);
  require(lambdas.size() == taus.size(), ErrorKind::validation,
          "lambdas has " + std::to_string(lambdas.size()) + " entries for " +
              std::to_string(taus.size()) + " task vectors");
  WeightMap out;
  out.metadata = base.metadata;
  for (const auto& [name, b] : base.entries) {
    std::vector<double> acc(b.data().begin(), b.data().end());
    for (std::size_t i = 0; i < taus.size(); ++i) {
      const Tensor& t = taus[i].delta.entries.at(name);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += lambdas[i] * static_cast<double>(t[j]);
    }
    out.entries.emplace(name, Tensor(b.shape(), std::vector<float>(acc.begin(), acc.end())));
  }
  return out;
}

inline TaskVector dare_transform(const TaskVector& tau, double p, SeededStream& stream) {
  require(p >= 0.0 && p < 1.0, ErrorKind::validation,
          "drop rate must lie in [0, 1), got " + std::to_string(p));
  TaskVector out = tau;
  for (auto& [name, t] : out.delta.entries) dare_inplace(t, p, stream);
  return out;
}

inline WeightMap merge_dare(const WeightMap& base, std::span<const TaskVector> taus,
                            std::span<const double> lambdas, double p, std::uint64_t seed) {
  detail::check_taus(base, taus);
  std::vector<TaskVector> dropped;
  dropped.reserve(taus.size());
  for (std::size_t i = 0; i < taus.size(); ++i) {
    SeededStream stream(seed + i);
    dropped.push_back(dare_transform(taus[i], p, stream));
  }
  return merge_task_arithmetic(base, dropped, lambdas);
}

inline TaskVector ties_trim(const TaskVector& tau, double k_percent) {
  require(k_percent > 0.0 && k_percent <= 100.0, ErrorKind::validation,
          "top-K percent must lie in (0, 100], got " + std::to_string(k_percent));
  TaskVector out = tau;
  for (auto& [name, t] : out.delta.entries) t = ties_trim_tensor(t, k_percent);
  return out;
}

inline WeightMap ties_elect_and_merge(const WeightMap& base, std::span<const TaskVector> taus,
                                      double k_percent, double lambda) {
  detail::check_taus(base, taus);
  std::vector<TaskVector> trimmed;
  for (const auto& t : taus) trimmed.push_back(ties_trim(t, k_percent));
  WeightMap out;
  out.metadata = base.metadata;
  for (const auto& [name, b] : base.entries) {
    std::vector<Tensor> parts;
    for (const auto& t : trimmed) parts.push_back(t.delta.entries.at(name));
    out.entries.emplace(name, axpy(b, lambda, ties_disjoint_mean(parts)));
  }
  return out;
}

inline constexpr double kKnotsRankFloor = 1e-6;

// Column-concatenate the updates, share the left factor, merge the per-model
// right blocks with the inner method, rebuild.
inline WeightMap knots_merge(const WeightMap& base, std::span<const TaskVector> taus,
                             const MergeSpec& inner) {
  detail::check_taus(base, taus);
  require(inner.method != MergeMethod::knots, ErrorKind::validation,
          "knots inner method cannot be knots");
  validate(inner);
  const std::size_t n = taus.size();
  const std::vector<double> lambdas = resolve_lambdas(inner, n);
  std::vector<SeededStream> streams;
  for (std::size_t i = 0; i < n; ++i) streams.emplace_back(inner.seed + i);

  WeightMap out;
  out.metadata = base.metadata;
  for (const auto& [name, b] : base.entries) {
    require(b.rank() == 2, ErrorKind::validation,
            "knots: tensor '" + name + "' is not 2-D");
    const std::size_t m = b.rows(), d = b.cols();
    Matrix cat(m, n * d);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& t = taus[i].delta.entries.at(name);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < d; ++c) cat(r, i * d + c) = t(r, c);
    }
    const double norm = frobenius_norm(cat);
    if (norm == 0.0) {
      out.entries.emplace(name, b);
      continue;
    }
    const SvdFactors<double> f = thin_svd(cat);
    std::size_t rank = 0;
    while (rank < f.sigma.size() && f.sigma[rank] >= kKnotsRankFloor * f.sigma[0]) ++rank;

    std::vector<Matrix> blocks(n, Matrix(rank, d));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < rank; ++k)
        for (std::size_t c = 0; c < d; ++c) blocks[i](k, c) = f.v_right_t(k, i * d + c);

    Matrix merged(rank, d);
    switch (inner.method) {
      case MergeMethod::dare:
        for (std::size_t i = 0; i < n; ++i) dare_inplace(blocks[i], inner.drop_p, streams[i]);
        [[fallthrough]];
      case MergeMethod::task_arithmetic:
        for (std::size_t i = 0; i < n; ++i) merged = axpy(merged, lambdas[i], blocks[i]);
        break;
      case MergeMethod::ties: {
        std::vector<Matrix> trimmed;
        for (const auto& blk : blocks) trimmed.push_back(ties_trim_tensor(blk, inner.top_k_percent));
        merged = lambdas[0] * ties_disjoint_mean(trimmed);
        break;
      }
      case MergeMethod::knots: break;
    }

    std::vector<double> acc(b.data().begin(), b.data().end());
    for (std::size_t k = 0; k < rank; ++k)
      for (std::size_t r = 0; r < m; ++r) {
        const double us = f.u_left(r, k) * f.sigma[k];
        for (std::size_t c = 0; c < d; ++c) acc[r * d + c] += us * merged(k, c);
      }
    out.entries.emplace(name, Tensor(b.shape(), std::vector<float>(acc.begin(), acc.end())));
  }
  return out;
}

inline WeightMap merge(const WeightMap& base, std::span<const TaskVector> taus, const MergeSpec& spec) {
  validate(spec);
  switch (spec.method) {
    case MergeMethod::task_arithmetic: {
      const auto l = resolve_lambdas(spec, taus.size());
      return merge_task_arithmetic(base, taus, l);
    }
    case MergeMethod::dare: {
      const auto l = resolve_lambdas(spec, taus.size());
      return merge_dare(base, taus, l, spec.drop_p, spec.seed);
    }
    case MergeMethod::ties:
      return ties_elect_and_merge(base, taus, spec.top_k_percent, resolve_lambdas(spec, taus.size())[0]);
    case MergeMethod::knots:
      return knots_merge(base, taus, *spec.knots_inner);
  }
  fail(ErrorKind::validation, "unknown merge method");
}

// Convenience: merge fine-tuned models directly against a shared base.
inline WeightMap merge_models(const WeightMap& base, std::span<const WeightMap> models,
                              const MergeSpec& spec) {
  std::vector<TaskVector> taus;
  for (std::size_t i = 0; i < models.size(); ++i)
    taus.push_back(task_vector(models[i], base, "model" + std::to_string(i)));
  return merge(base, taus, spec);
}

}  // namespace latmerge
