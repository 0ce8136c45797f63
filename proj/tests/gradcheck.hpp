#pragma once

// Central-difference gradient checks on small random SAEs.

#include <algorithm>
#include <functional>
#include <vector>

#include "fixtures.hpp"

namespace saens::testing {

// Smallest distance of any pre-activation to a point where the loss is not smooth.
inline double kink_margin(const SaeParams& s, const Matrix& batch) {
  const Matrix pre = pre_activations(s, batch);
  double margin = 1e9;
  for (Index n = 0; n < pre.rows(); ++n) {
    std::vector<double> row(pre.row(n).data(), pre.row(n).data() + pre.cols());
    for (Index i = 0; i < pre.cols(); ++i) {
      const double x = pre(n, i);
      if (s.activation.kind == ActivationKind::jumprelu) margin = std::min(margin, std::abs(x - s.activation.theta(i)));
      else margin = std::min(margin, std::abs(x));
    }
    if (s.activation.kind == ActivationKind::topk) {
      std::vector<double> sorted = row;
      std::sort(sorted.begin(), sorted.end(), std::greater<>());
      const auto K = static_cast<std::size_t>(s.activation.topk);
      if (K < sorted.size()) margin = std::min(margin, sorted[K - 1] - sorted[K]);
    }
  }
  return margin;
}

template <typename Fn>
Matrix central_difference(Matrix& param, Fn&& loss, double h) {
  Matrix g(param.rows(), param.cols());
  for (Index j = 0; j < param.cols(); ++j)
    for (Index i = 0; i < param.rows(); ++i) {
      const double keep = param(i, j);
      param(i, j) = keep + h;
      const double up = loss();
      param(i, j) = keep - h;
      const double down = loss();
      param(i, j) = keep;
      g(i, j) = (up - down) / (2 * h);
    }
  return g;
}

// max_i |g_i - fd_i| / max(|g_i|, |fd_i|, floor): relative where entries are
// sizeable, absolute-over-floor where both are tiny.
inline double max_relative_error(const Matrix& g, const Matrix& fd, double floor = 1e-3) {
  double worst = 0.0;
  for (Index i = 0; i < g.size(); ++i) {
    const double scale = std::max({std::abs(g.data()[i]), std::abs(fd.data()[i]), floor});
    worst = std::max(worst, std::abs(g.data()[i] - fd.data()[i]) / scale);
  }
  return worst;
}

struct GradCheck {
  double worst = 0.0;
  int instances = 0;
};

inline GradCheck check_gradients(const Activation& act, int instances, std::uint64_t seed0, double lambda) {
  GradCheck out;
  std::uint64_t seed = seed0;
  while (out.instances < instances) {
    ++seed;
    Rng rng(seed);
    const Index d = 2 + static_cast<Index>(rng() % 3);        // 2..4
    const Index k = d + 1 + static_cast<Index>(rng() % (8 - d));  // d+1..8
    const Index B = 1 + static_cast<Index>(rng() % 5);         // 1..5
    Activation a = act;
    if (a.kind == ActivationKind::topk) a.topk = std::min<Index>(a.topk, k);
    if (a.kind == ActivationKind::jumprelu) a.theta = Vector::Constant(k, 0.2);
    SaeParams s = random_sae(d, k, a, seed, lambda);
    const Matrix batch = random_matrix(B, d, seed + 100);
    if (kink_margin(s, batch) <= 1e-2) continue;

    const SaeTensors g = loss_gradients(s, batch);
    auto loss = [&] { return sae_loss(s, batch).total; };
    const double h = 1e-5;
    const Matrix fd_wenc = central_difference(s.w_enc, loss, h);
    Matrix benc = s.b_enc;
    Matrix fd_benc(s.b_enc.size(), 1);
    {
      Matrix tmp = s.b_enc;
      auto loss_b = [&] {
        s.b_enc = tmp.col(0);
        return sae_loss(s, batch).total;
      };
      fd_benc = central_difference(tmp, loss_b, h);
      s.b_enc = benc.col(0);
    }
    Matrix fd_wdec = central_difference(s.w_dec, loss, h);
    project_to_tangent(s.w_dec, fd_wdec);
    Matrix tmp = s.b_dec;
    auto loss_bd = [&] {
      s.b_dec = tmp.col(0);
      return sae_loss(s, batch).total;
    };
    const Matrix fd_bdec = central_difference(tmp, loss_bd, h);
    s.b_dec = tmp.col(0);

    out.worst = std::max({out.worst, max_relative_error(g.w_enc, fd_wenc), max_relative_error(g.b_enc, fd_benc),
                          max_relative_error(g.w_dec, fd_wdec), max_relative_error(g.b_dec, fd_bdec)});
    ++out.instances;
  }
  return out;
}

}  // namespace saens::testing
