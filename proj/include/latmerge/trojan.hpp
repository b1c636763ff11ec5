#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "latmerge/rng.hpp"
#include "latmerge/tensor.hpp"
#include "latmerge/toy_model.hpp"
#include "latmerge/weights.hpp"

namespace latmerge {

enum class SctMode { model_diff, gradient_contrast };

inline const char* sct_mode_name(SctMode m) {
  return m == SctMode::model_diff ? "model_diff" : "gradient_contrast";
}

inline SctMode parse_sct_mode(const std::string& s) {
  if (s == "model_diff") return SctMode::model_diff;
  if (s == "gradient_contrast") return SctMode::gradient_contrast;
  fail(ErrorKind::validation, "unknown SCT mode '" + s + "'");
}

// Delta whose subtraction from an aligned up-projection removes refusal.
struct SctMatrix {
  Tensor delta_w;
  std::string layer_name;
  SctMode mode = SctMode::model_diff;
};

enum class ProbeRole { malicious, safe, unsafe, benign };

struct ProbeBatch {
  Tensor inputs;  // rows are probes
  ProbeRole role = ProbeRole::malicious;
  std::vector<std::size_t> labels;  // empty when unlabeled

  std::size_t size() const { return inputs.rows(); }
};

struct AttackConfig {
  std::vector<double> alpha;  // per model; one value broadcasts; empty means 1
  std::vector<double> beta;   // per model; one value broadcasts; empty means 10
  std::size_t n = 2;
  int max_iters = 2000;
  double step_size = 0.1;
  double init_scale = 0.5;
  double tol = 1e-10;
  std::uint64_t seed = 0;
};

inline constexpr double kDefaultAlpha = 1.0;
inline constexpr double kDefaultBeta = 10.0;

struct TraceEntry {
  int iter = 0;
  std::vector<double> l1, l2;
  double objective = 0.0;
  double step = 0.0;
};

struct AttackBundle {
  std::map<std::string, std::vector<Tensor>> components;  // layer → ΔU_i
  std::map<std::string, SctMatrix> targets;
  std::map<std::string, std::vector<TraceEntry>> traces;
  AttackConfig config;
};

template <typename T>
struct LossGrad {
  double value = 0.0;
  BasicTensor<T> grad;
};

// --- SCT extraction ------------------------------------------------------------

inline SctMatrix extract_sct_model_diff(const Tensor& u_aligned, const Tensor& u_unaligned,
                                        std::string layer_name = toy_names::up) {
  require_same_shape(u_aligned.shape(), u_unaligned.shape(), "extract_sct_model_diff");
  SctMatrix s{u_aligned - u_unaligned, std::move(layer_name), SctMode::model_diff};
  require(frobenius_norm(s.delta_w) > 0.0, ErrorKind::validation,
          "extract_sct_model_diff: aligned and unaligned weights are identical (zero SCT)");
  return s;
}

struct ContrastOptions {
  double scale = 1.0;          // starting scale, doubled until the flip target is met
  double flip_fraction = 0.9;  // of refused unsafe probes that must stop refusing
  int max_doublings = 30;
  double safe_weight = 1.0;
};

// mean ∇ℓ over unsafe probes minus safe_weight · mean ∇ℓ over safe probes,
// with ℓ = −log(1 − p_refuse).
inline Matrix gradient_contrast_direction(const ToyModel& model, const ProbeBatch& x_s,
                                          const ProbeBatch& x_u, double safe_weight = 1.0) {
  require(x_s.size() > 0 && x_u.size() > 0, ErrorKind::validation,
          "gradient contrast: empty probe set");
  require(x_s.inputs.cols() == model.d_model() && x_u.inputs.cols() == model.d_model(),
          ErrorKind::compatibility, "gradient contrast: probe dimension differs from d_model");
  const ToyParams p = model.cast<double>();
  const Matrix gu = compliance_grad_up(p, x_u.inputs.cast<double>());
  const Matrix gs = compliance_grad_up(p, x_s.inputs.cast<double>());
  return axpy(gu, -safe_weight, gs);
}

inline double refusal_flip_fraction(const ToyModel& before, const ToyModel& after, const Tensor& x) {
  const Matrix p0 = predict(before, x), p1 = predict(after, x);
  std::size_t refused = 0, flipped = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (argmax_row(p0.row(r)) != before.refuse_class) continue;
    ++refused;
    if (argmax_row(p1.row(r)) != after.refuse_class) ++flipped;
  }
  require(refused > 0, ErrorKind::validation,
          "flip fraction: the model refuses none of the unsafe probes");
  return static_cast<double>(flipped) / static_cast<double>(refused);
}

inline SctMatrix extract_sct_gradient_contrast(const ToyModel& model, const ProbeBatch& x_s,
                                               const ProbeBatch& x_u, const ContrastOptions& opt = {}) {
  const Matrix dir = gradient_contrast_direction(model, x_s, x_u, opt.safe_weight);
  require(frobenius_norm(dir) > 0.0, ErrorKind::validation,
          "gradient contrast: safe and unsafe gradients coincide (zero SCT)");
  require(opt.scale > 0.0, ErrorKind::validation, "gradient contrast: scale must be positive");
  double scale = opt.scale;
  double frac = 0.0;
  for (int k = 0; k <= opt.max_doublings; ++k) {
    const Tensor dw = (scale * dir).cast<float>();
    ToyModel edited = model;
    edited.up = model.up - dw;
    frac = refusal_flip_fraction(model, edited, x_u.inputs);
    if (frac >= opt.flip_fraction) return {dw, toy_names::up, SctMode::gradient_contrast};
    scale *= 2.0;
  }
  fail(ErrorKind::numeric, "gradient contrast: flip fraction " + std::to_string(frac) +
                               " below target after " + std::to_string(opt.max_doublings) +
                               " doublings");
}

// --- losses -------------------------------------------------------------------

// L1 = −mean_x |cos(ΔUᵀx, Uᵀx)| and its gradient in ΔU.
template <typename T>
LossGrad<T> loss_safety(const BasicTensor<T>& delta_u, const BasicTensor<T>& u, const ProbeBatch& x_mal) {
  require_same_shape(delta_u.shape(), u.shape(), "loss_safety");
  require(x_mal.size() > 0, ErrorKind::validation, "loss_safety: empty probe batch");
  require(x_mal.inputs.cols() == u.rows(), ErrorKind::compatibility,
          "loss_safety: probe dimension " + std::to_string(x_mal.inputs.cols()) +
              " differs from d_model " + std::to_string(u.rows()));
  const Matrix x = x_mal.inputs.template cast<double>();
  const Matrix a = matmul(x, delta_u.template cast<double>());
  const Matrix b = matmul(x, u.template cast<double>());
  const std::size_t n = x.rows(), f = u.cols();
  Matrix ga(n, f);
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const auto ar = a.row(p), br = b.row(p);
    const double na = std::sqrt(dot(ar, ar)), nb = std::sqrt(dot(br, br));
    if (na < kCosineNormFloor || nb < kCosineNormFloor) continue;
    const double c = dot(ar, br) / (na * nb);
    total += std::abs(c);
    if (c == 0.0) continue;
    const double s = c > 0 ? 1.0 : -1.0;
    for (std::size_t j = 0; j < f; ++j)
      ga(p, j) = s * (br[j] / (na * nb) - c * ar[j] / (na * na));
  }
  const double inv = 1.0 / static_cast<double>(n);
  Matrix g = matmul_tn(x, ga);
  for (double& v : g.storage()) v *= -inv;
  return {-total * inv, g.template cast<T>()};
}

// L2 = |⟨ΔU, U′⟩| / sqrt(‖ΔU‖·‖U′‖) with U′ = U − ΔU, as printed.
template <typename T>
LossGrad<T> loss_capability(const BasicTensor<T>& delta_u, const BasicTensor<T>& u) {
  require_same_shape(delta_u.shape(), u.shape(), "loss_capability");
  const Matrix du = delta_u.template cast<double>();
  const Matrix up = u.template cast<double>() - du;
  const double ip = frobenius_inner(du, up);
  const double n1 = frobenius_norm(du), n2 = frobenius_norm(up);
  const double den = std::sqrt(n1 * n2);
  LossGrad<T> out{0.0, BasicTensor<T>(u.shape())};
  if (den < kCosineNormFloor) return out;
  out.value = std::abs(ip) / den;
  if (ip == 0.0) return out;
  const double s = ip > 0 ? 1.0 : -1.0;
  // d ip = U′ − ΔU; d‖ΔU‖ = ΔU/‖ΔU‖; d‖U′‖ = −U′/‖U′‖
  Matrix g(u.shape());
  for (std::size_t i = 0; i < g.numel(); ++i) {
    const double dden = 0.5 / den * (n2 * du[i] / n1 - n1 * up[i] / n2);
    g[i] = s * (up[i] - du[i]) / den - std::abs(ip) / (den * den) * dden;
  }
  out.grad = g.template cast<T>();
  return out;
}

// --- synthesis -------------------------------------------------------------------

namespace detail {
inline std::vector<double> per_model(const std::vector<double>& v, std::size_t n, double fallback,
                                     const char* what) {
  if (v.empty()) return std::vector<double>(n, fallback);
  if (v.size() == 1) return std::vector<double>(n, v[0]);
  require(v.size() == n, ErrorKind::validation,
          std::string(what) + " needs 1 or " + std::to_string(n) + " entries");
  return v;
}
}  // namespace detail

inline void validate(const AttackConfig& cfg) {
  require(cfg.n >= 2, ErrorKind::validation, "attack needs n >= 2 models");
  for (double a : cfg.alpha) require(a >= 0.0, ErrorKind::validation, "alpha must be non-negative");
  for (double b : cfg.beta) require(b >= 0.0, ErrorKind::validation, "beta must be non-negative");
  require(cfg.step_size > 0.0, ErrorKind::validation, "step_size must be positive");
  require(cfg.init_scale >= 0.0, ErrorKind::validation, "init_scale must be non-negative");
  require(cfg.max_iters >= 0, ErrorKind::validation, "max_iters must be non-negative");
  require(cfg.tol >= 0.0, ErrorKind::validation, "tol must be non-negative");
}

struct LayerSynthesis {
  std::vector<Tensor> components;
  std::vector<TraceEntry> trace;
};

// Minimise Σ α_i L1_i + β_i L2_i subject to Σ ΔU_i = n·ΔW by writing
// ΔU_i = ΔW + D_i, D_n = −Σ_{i<n} D_i and descending on D_1..D_{n−1}.
inline LayerSynthesis synthesize_components(const std::vector<Tensor>& us, const SctMatrix& sct,
                                            const ProbeBatch& x_mal, const AttackConfig& cfg) {
  validate(cfg);
  const std::size_t n = us.size();
  require(n >= 2, ErrorKind::validation, "synthesize_components: need at least two models");
  require(cfg.n == n, ErrorKind::validation,
          "synthesize_components: config n=" + std::to_string(cfg.n) + " but " +
              std::to_string(n) + " models given");
  for (const auto& u : us) require_same_shape(u.shape(), sct.delta_w.shape(), "synthesize_components");
  require(sct.delta_w.all_finite() && frobenius_norm(sct.delta_w) > 0.0, ErrorKind::validation,
          "synthesize_components: SCT must be finite and nonzero");
  const auto alpha = detail::per_model(cfg.alpha, n, kDefaultAlpha, "alpha");
  const auto beta = detail::per_model(cfg.beta, n, kDefaultBeta, "beta");

  const Matrix dw = sct.delta_w.cast<double>();
  std::vector<Matrix> u64;
  for (const auto& u : us) u64.push_back(u.cast<double>());

  std::vector<Matrix> free(n - 1, Matrix(dw.shape()));
  SeededStream stream(cfg.seed);
  const double target = cfg.init_scale * frobenius_norm(dw);
  for (auto& d : free) {
    for (double& v : d.storage()) v = stream.normal();
    const double nd = frobenius_norm(d);
    if (nd > 0.0) d = (target / nd) * d;
  }

  auto components = [&](const std::vector<Matrix>& ds) {
    std::vector<Matrix> c;
    Matrix last = dw;
    for (const auto& d : ds) {
      c.push_back(dw + d);
      last = last - d;
    }
    c.push_back(std::move(last));
    return c;
  };

  struct Eval {
    double f = 0.0;
    std::vector<double> l1, l2;
    std::vector<Matrix> grad;  // per free variable
  };
  auto evaluate = [&](const std::vector<Matrix>& ds) {
    Eval e;
    const auto comps = components(ds);
    std::vector<Matrix> g;
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = loss_safety(comps[i], u64[i], x_mal);
      const auto c = loss_capability(comps[i], u64[i]);
      e.l1.push_back(s.value);
      e.l2.push_back(c.value);
      e.f += alpha[i] * s.value + beta[i] * c.value;
      g.push_back(axpy(alpha[i] * s.grad, beta[i], c.grad));
    }
    for (std::size_t i = 0; i + 1 < n; ++i) e.grad.push_back(g[i] - g[n - 1]);
    return e;
  };

  LayerSynthesis out;
  Eval cur = evaluate(free);
  double step = cfg.step_size;
  if (!std::isfinite(cur.f)) fail(ErrorKind::numeric, "attack objective is NaN at iteration 0");
  out.trace.push_back({0, cur.l1, cur.l2, cur.f, step});

  for (int it = 1; it <= cfg.max_iters; ++it) {
    std::vector<Matrix> trial;
    Eval next;
    bool accepted = false;
    while (step >= 1e-12 * cfg.step_size) {
      trial.clear();
      for (std::size_t i = 0; i + 1 < n; ++i) trial.push_back(axpy(free[i], -step, cur.grad[i]));
      next = evaluate(trial);
      if (!std::isfinite(next.f))
        fail(ErrorKind::numeric, "attack objective is NaN at iteration " + std::to_string(it));
      if (next.f <= cur.f) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const double rel = std::abs(cur.f - next.f) / std::max(std::abs(cur.f), 1e-12);
    free = std::move(trial);
    cur = std::move(next);
    out.trace.push_back({it, cur.l1, cur.l2, cur.f, step});
    if (rel < cfg.tol) break;
  }

  const auto comps = components(free);
  for (const auto& c : comps) out.components.push_back(c.cast<float>());
  return out;
}

// Attack every targeted layer of the n source models.
inline AttackBundle synthesize_bundle(const std::vector<WeightMap>& models,
                                      const std::map<std::string, SctMatrix>& targets,
                                      const std::map<std::string, ProbeBatch>& probes,
                                      const AttackConfig& cfg) {
  AttackBundle b;
  b.config = cfg;
  for (const auto& [layer, sct] : targets) {
    std::vector<Tensor> us;
    for (const auto& m : models) us.push_back(m.at(layer));
    auto it = probes.find(layer);
    require(it != probes.end(), ErrorKind::validation, "no probe batch for layer '" + layer + "'");
    LayerSynthesis s = synthesize_components(us, sct, it->second, cfg);
    b.components[layer] = std::move(s.components);
    b.traces[layer] = std::move(s.trace);
    b.targets[layer] = sct;
  }
  return b;
}

// ‖Σ ΔU_i − n·ΔW‖_F / ‖ΔW‖_F, worst layer.
inline double constraint_residual(const AttackBundle& b) {
  double worst = 0.0;
  for (const auto& [layer, comps] : b.components) {
    const Tensor& dw = b.targets.at(layer).delta_w;
    std::vector<double> acc(dw.numel(), 0.0);
    for (const auto& c : comps)
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += c[j];
    double r = 0.0;
    for (std::size_t j = 0; j < acc.size(); ++j) {
      const double e = acc[j] - static_cast<double>(comps.size()) * dw[j];
      r += e * e;
    }
    worst = std::max(worst, std::sqrt(r) / frobenius_norm(dw));
  }
  return worst;
}

// U_i ← U_i − ΔU_i on every bundle layer; other tensors are copied untouched.
inline WeightMap apply_attack(const WeightMap& model, const AttackBundle& bundle, std::size_t model_index) {
  WeightMap out = model;
  for (const auto& [layer, comps] : bundle.components) {
    auto it = out.entries.find(layer);
    require(it != out.entries.end(), ErrorKind::compatibility,
            "apply_attack: model has no tensor '" + layer + "'");
    require(model_index < comps.size(), ErrorKind::validation,
            "apply_attack: model index " + std::to_string(model_index) + " out of range");
    require_same_shape(it->second.shape(), comps[model_index].shape(), "apply_attack '" + layer + "'");
    it->second = it->second - comps[model_index];
  }
  return out;
}

}  // namespace latmerge
