#pragma once

// L2-regularized binary logistic regression, fit by full-batch gradient
// descent with Armijo backtracking. Deterministic.

#include <cmath>
#include <vector>

#include "saens/common.hpp"

namespace saens {

struct LogisticOptions {
  double l2 = 1e-3;
  double tolerance = 1e-6;  // on the gradient norm
  Index max_iterations = 10000;
  double initial_step = 1.0;
};

struct ProbeModel {
  Vector weights;
  double bias = 0.0;
  std::vector<Index> selected_features;  // columns of the source matrix the weights apply to
  bool converged = false;
  double gradient_norm = 0.0;
  Index iterations = 0;
  std::vector<double> loss_history;

  // Logits for rows already restricted to the selected features.
  Vector logits(const Eigen::Ref<const Matrix>& x) const {
    require_dims(x.cols(), weights.size(), "probe input");
    return (x * weights).array() + bias;
  }

  std::vector<int> predict(const Eigen::Ref<const Matrix>& x) const {
    const Vector z = logits(x);
    std::vector<int> out(static_cast<std::size_t>(z.size()));
    for (Index i = 0; i < z.size(); ++i) out[static_cast<std::size_t>(i)] = z(i) > 0.0 ? 1 : 0;
    return out;
  }

  double accuracy(const Eigen::Ref<const Matrix>& x, const std::vector<int>& labels) const {
    require_dims(static_cast<Index>(labels.size()), x.rows(), "probe labels");
    require(!labels.empty(), "accuracy of an empty set");
    const auto pred = predict(x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
  }
};

namespace detail {

// log(1 + exp(z)) without overflow
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct LogisticObjective {
  const Eigen::Ref<const Matrix>& x;
  const Vector& y;
  double l2;

  double loss(const Vector& w, double b) const {
    const Vector z = (x * w).array() + b;
    double s = 0.0;
    for (Index i = 0; i < z.size(); ++i) s += softplus(z(i)) - y(i) * z(i);
    return s / static_cast<double>(z.size()) + 0.5 * l2 * w.squaredNorm();
  }

  void gradient(const Vector& w, double b, Vector& gw, double& gb) const {
    const Vector z = (x * w).array() + b;
    Vector r(z.size());
    for (Index i = 0; i < z.size(); ++i) r(i) = sigmoid(z(i)) - y(i);
    const double n = static_cast<double>(z.size());
    gw = x.transpose() * r / n + l2 * w;
    gb = r.sum() / n;
  }
};

}  // namespace detail

inline ProbeModel train_logistic(const Eigen::Ref<const Matrix>& features, const std::vector<int>& labels,
                                 const LogisticOptions& opt = {}) {
  const Index n = features.rows();
  require(n >= 2, "train_logistic: needs at least two samples");
  require_dims(static_cast<Index>(labels.size()), n, "train_logistic labels");
  Vector y(n);
  bool has0 = false, has1 = false;
  for (Index i = 0; i < n; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    require(l == 0 || l == 1, "train_logistic: labels must be binary");
    y(i) = l;
    (l ? has1 : has0) = true;
  }
  require(has0 && has1, "train_logistic: both classes must be present");

  const detail::LogisticObjective obj{features, y, opt.l2};
  ProbeModel model;
  Vector w = Vector::Zero(features.cols());
  double b = 0.0;
  double f = obj.loss(w, b);
  model.loss_history.push_back(f);
  double step = opt.initial_step;
  Vector gw;
  double gb = 0.0;
  Index it = 0;
  for (; it < opt.max_iterations; ++it) {
    obj.gradient(w, b, gw, gb);
    const double gnorm2 = gw.squaredNorm() + gb * gb;
    model.gradient_norm = std::sqrt(gnorm2);
    if (model.gradient_norm < opt.tolerance) {
      model.converged = true;
      break;
    }
    // Armijo backtracking; the accepted step never increases the loss.
    step = std::min(step * 2.0, 1e6);
    Vector w_new;
    double b_new = 0.0, f_new = 0.0;
    for (;;) {
      w_new = w - step * gw;
      b_new = b - step * gb;
      f_new = obj.loss(w_new, b_new);
      if (f_new <= f - 0.5 * step * gnorm2 || step < 1e-20) break;
      step *= 0.5;
    }
    if (!(f_new <= f)) break;  // no descent possible at machine precision
    w = std::move(w_new);
    b = b_new;
    f = f_new;
    model.loss_history.push_back(f);
  }
  if (!model.converged) {
    obj.gradient(w, b, gw, gb);
    model.gradient_norm = std::sqrt(gw.squaredNorm() + gb * gb);
    model.converged = model.gradient_norm < opt.tolerance;
  }
  model.iterations = it;
  model.weights = std::move(w);
  model.bias = b;
  model.selected_features.resize(static_cast<std::size_t>(features.cols()));
  for (Index j = 0; j < features.cols(); ++j) model.selected_features[static_cast<std::size_t>(j)] = j;
  return model;
}

}  // namespace saens
