#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "latmerge/tensor.hpp"
#include "latmerge/weights.hpp"

namespace latmerge {

// Weight names used by the toy architecture.
namespace toy_names {
inline const std::string up = "layer0.mlp.up";
inline const std::string down = "layer0.mlp.down";
inline const std::string head = "head.out";
inline const std::string attn = "layer0.attn.w";  // carried through merges, never read
inline const std::string up_suffix = ".mlp.up";
}  // namespace toy_names

// One residual MLP block and a linear readout:
//   p(x) = softmax(headᵀ (downᵀ tanh(upᵀ x) + x))
template <typename T>
struct BasicToyModel {
  BasicTensor<T> up;    // d_model × d_ff
  BasicTensor<T> down;  // d_ff × d_model
  BasicTensor<T> head;  // d_model × classes
  BasicTensor<T> attn;  // d_model × d_model
  std::size_t refuse_class = 0;

  std::size_t d_model() const { return up.rows(); }
  std::size_t d_ff() const { return up.cols(); }
  std::size_t classes() const { return head.cols(); }

  template <typename U>
  BasicToyModel<U> cast() const {
    return {up.template cast<U>(), down.template cast<U>(), head.template cast<U>(),
            attn.template cast<U>(), refuse_class};
  }
};

using ToyModel = BasicToyModel<float>;
using ToyParams = BasicToyModel<double>;

inline WeightMap to_weight_map(const ToyModel& m) {
  WeightMap w;
  w.entries.emplace(toy_names::up, m.up);
  w.entries.emplace(toy_names::down, m.down);
  w.entries.emplace(toy_names::head, m.head);
  w.entries.emplace(toy_names::attn, m.attn);
  w.metadata = {{"arch", "toy-mlp"},
                {"layers", "1"},
                {"d_model", std::to_string(m.d_model())},
                {"d_ff", std::to_string(m.d_ff())},
                {"classes", std::to_string(m.classes())},
                {"refuse_class", std::to_string(m.refuse_class)},
                {"activation", "tanh"},
                {"up_projection", toy_names::up_suffix}};
  return w;
}

inline ToyModel toy_from_weight_map(const WeightMap& w) {
  ToyModel m{w.at(toy_names::up), w.at(toy_names::down), w.at(toy_names::head),
             w.at(toy_names::attn), 0};
  auto it = w.metadata.find("refuse_class");
  require(it != w.metadata.end(), ErrorKind::validation, "toy model metadata lacks refuse_class");
  m.refuse_class = std::stoul(it->second);
  const std::size_t d = m.d_model(), f = m.d_ff();
  require(m.up.rank() == 2 && m.down.rank() == 2 && m.head.rank() == 2 &&
              m.down.rows() == f && m.down.cols() == d && m.head.rows() == d &&
              m.refuse_class < m.classes(),
          ErrorKind::compatibility, "toy model tensors have inconsistent shapes");
  return m;
}

struct ToyActivations {
  Matrix pre;     // N × d_ff
  Matrix hidden;  // N × d_ff
  Matrix resid;   // N × d_model
  Matrix probs;   // N × classes
};

inline void softmax_rows(Matrix& z) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
}

inline ToyActivations forward_batch(const ToyParams& m, const Matrix& x) {
  ToyActivations a;
  a.pre = matmul(x, m.up);
  a.hidden = a.pre;
  for (double& v : a.hidden.storage()) v = std::tanh(v);
  a.resid = matmul(a.hidden, m.down) + x;
  a.probs = matmul(a.resid, m.head);
  softmax_rows(a.probs);
  return a;
}

inline Matrix predict(const ToyModel& m, const Tensor& x) {
  return forward_batch(m.cast<double>(), x.cast<double>()).probs;
}

inline std::vector<double> forward(const ToyModel& m, std::span<const float> x) {
  Tensor row(Shape{1, x.size()}, std::vector<float>(x.begin(), x.end()));
  const Matrix p = predict(m, row);
  return {p.data().begin(), p.data().end()};
}

// Lowest index wins ties.
inline std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

struct ToyGrads {
  Matrix up, down, head;
};

// Backprop from dLoss/dlogits (already averaged over the batch).
inline ToyGrads backprop(const ToyParams& m, const Matrix& x, const ToyActivations& a,
                         const Matrix& dlogits) {
  ToyGrads g;
  g.head = matmul_tn(a.resid, dlogits);
  const Matrix dresid = matmul_nt(dlogits, m.head);
  g.down = matmul_tn(a.hidden, dresid);
  Matrix dpre = matmul_nt(dresid, m.down);
  for (std::size_t i = 0; i < dpre.numel(); ++i) {
    const double h = a.hidden[i];
    dpre[i] *= 1.0 - h * h;
  }
  g.up = matmul_tn(x, dpre);
  return g;
}

// Mean cross-entropy and its gradient.
inline double cross_entropy_grads(const ToyParams& m, const Matrix& x,
                                  const std::vector<std::size_t>& labels, ToyGrads& out) {
  const ToyActivations a = forward_batch(m, x);
  const std::size_t n = x.rows();
  Matrix d = a.probs;
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    loss -= std::log(std::max(a.probs(r, labels[r]), 1e-300));
    d(r, labels[r]) -= 1.0;
  }
  for (double& v : d.storage()) v /= static_cast<double>(n);
  out = backprop(m, x, a, d);
  return loss / static_cast<double>(n);
}

// Mean over probes of the gradient of −log(1 − p_refuse) with respect to up.
inline Matrix compliance_grad_up(const ToyParams& m, const Matrix& x) {
  const ToyActivations a = forward_batch(m, x);
  const std::size_t n = x.rows(), c = m.classes(), r = m.refuse_class;
  Matrix d(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    const double pr = a.probs(i, r);
    const double rest = std::max(1.0 - pr, 1e-300);
    for (std::size_t k = 0; k < c; ++k)
      d(i, k) = (k == r) ? pr : -pr * a.probs(i, k) / rest;
    for (std::size_t k = 0; k < c; ++k) d(i, k) /= static_cast<double>(n);
  }
  return backprop(m, x, a, d).up;
}

struct TrainOptions {
  int steps = 500;
  double lr = 0.5;
  bool up = true, down = true, head = true;
};

// Full-batch gradient descent on mean cross-entropy.
inline void train(ToyParams& m, const Matrix& x, const std::vector<std::size_t>& labels,
                  const TrainOptions& opt) {
  require(x.rows() == labels.size() && x.rows() > 0, ErrorKind::validation,
          "train: probe and label counts differ");
  ToyGrads g;
  for (int s = 0; s < opt.steps; ++s) {
    cross_entropy_grads(m, x, labels, g);
    if (opt.up) m.up = axpy(m.up, -opt.lr, g.up);
    if (opt.down) m.down = axpy(m.down, -opt.lr, g.down);
    if (opt.head) m.head = axpy(m.head, -opt.lr, g.head);
  }
  require(m.up.all_finite() && m.down.all_finite() && m.head.all_finite(), ErrorKind::numeric,
          "train: parameters diverged");
}

}  // namespace latmerge
