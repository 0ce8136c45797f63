#include <set>

#include "metric_oracles.hpp"
#include "support.hpp"

using namespace saens;
using saens::testing::random_matrix;
using saens::testing::random_sae;
using saens::testing::random_unit_columns;
using namespace saens::oracle;

namespace {

// Sparse nonnegative codes with a given density.
Matrix sparse_codes(Index n, Index m, double density, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix c = Matrix::Zero(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      if (u(rng) < density) c(i, j) = 0.1 + u(rng);
  return c;
}

ActivationDataset eval_data(std::uint64_t seed, Index n = 500) {
  SyntheticDictionarySpec spec;
  spec.dim = 6;
  spec.true_feature_count = 10;
  spec.active_per_sample = 2;
  spec.noise_std = 0.05;
  spec.seed = seed;
  return generate_synthetic(spec, n).dataset;
}

}  // namespace

TEST(Mse, HandExample) {
  Matrix a(1, 2), r(1, 2);
  a << 1, 2;
  r << 0, 0;
  EXPECT_DOUBLE_EQ(mse(a, r), 5.0);
  EXPECT_THROW(mse(Matrix(0, 2), Matrix(0, 2)), ValidationError);
}

TEST(Mse, MatchesOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix a = random_matrix(17, 5, s), r = random_matrix(17, 5, s + 100);
    EXPECT_NEAR(mse(a, r), oracle_mse(a, r), 1e-12);
  }
}

TEST(ExplainedVariance, PerfectAndMeanReconstructions) {
  const Matrix a = random_matrix(30, 4, 1);
  const Vector mean = a.colwise().mean().transpose();
  EXPECT_NEAR(explained_variance(a, a, mean), 1.0, 1e-15);
  const Matrix mean_recon = Matrix::Ones(30, 1) * mean.transpose();
  EXPECT_NEAR(explained_variance(a, mean_recon, mean), 0.0, 1e-12);
}

TEST(ExplainedVariance, MatchesOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix a = random_matrix(40, 6, s);
    const Matrix r = a + random_matrix(40, 6, s + 50, 0.3);
    const Vector mean = random_matrix(6, 1, s + 90, 0.1).col(0);
    EXPECT_NEAR(explained_variance(a, r, mean), oracle_ev(a, r, mean), 1e-12);
  }
}

TEST(ExplainedVariance, ZeroVarianceDimensionNamed) {
  Matrix a = random_matrix(10, 3, 2);
  a.col(1).setConstant(0.5);
  const Vector mean = a.colwise().mean().transpose();
  try {
    explained_variance(a, a, mean);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("[1]"), std::string::npos);
  }
}

TEST(RelativeSparsity, HandAndOracle) {
  Matrix c = Matrix::Zero(2, 4);
  c(0, 1) = 1.0;
  c(1, 2) = 3.0;
  c(1, 3) = 1e-13;  // flushed
  EXPECT_DOUBLE_EQ(relative_sparsity(CoefficientMatrix::from_dense(c)), 0.25);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Matrix r = sparse_codes(50, 12, 0.2, s);
    EXPECT_DOUBLE_EQ(relative_sparsity(CoefficientMatrix::from_dense(r)), oracle_sparsity(r));
  }
}

TEST(Connectivity, HandExamples) {
  // Two features never co-active: only the diagonal is nonzero.
  Matrix c(2, 2);
  c << 1, 0, 0, 1;
  EXPECT_DOUBLE_EQ(connectivity(CoefficientMatrix::from_dense(c)), 0.5);
  // One sample with every feature on: fully connected.
  EXPECT_DOUBLE_EQ(connectivity(CoefficientMatrix::from_dense(Matrix::Ones(1, 3))), 0.0);
  // Dead features contribute nothing.
  EXPECT_DOUBLE_EQ(connectivity(CoefficientMatrix::from_dense(Matrix::Zero(4, 5))), 1.0);
}

TEST(Connectivity, MatchesOracleAndBounds) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const Matrix c = sparse_codes(60, 15, 0.1, s + 7);
    const double got = connectivity(CoefficientMatrix::from_dense(c));
    EXPECT_NEAR(got, oracle_connectivity(c), 1e-15);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);
  }
}

TEST(Connectivity, LargeDictionaryUsesSameCounts) {
  // above the dense counting limit
  const Matrix c = sparse_codes(40, 2500, 0.002, 3);
  const double got = connectivity(CoefficientMatrix::from_dense(c));
  std::set<std::pair<Index, Index>> pairs;
  for (Index n = 0; n < c.rows(); ++n) {
    std::vector<Index> on;
    for (Index j = 0; j < c.cols(); ++j)
      if (c(n, j) != 0.0) on.push_back(j);
    for (Index i : on)
      for (Index j : on) pairs.insert({i, j});
  }
  EXPECT_NEAR(got, 1.0 - static_cast<double>(pairs.size()) / (2500.0 * 2500.0), 1e-15);
}

TEST(Diversity, HandExamples) {
  const Matrix eye = Matrix::Identity(3, 3);
  EXPECT_EQ(diversity(eye, 0.1), 3);
  Matrix dup(2, 3);
  dup << 1, 1, 0, 0, 0, 1;
  EXPECT_EQ(diversity(dup, 0.5), 1);  // the duplicated pair fails, the orthogonal one passes
  EXPECT_EQ(diversity(dup, 1.0), 3);
  Matrix anti = dup;
  anti.col(1) *= -1.0;  // sign does not help
  EXPECT_EQ(diversity(anti, 0.5), 1);
  EXPECT_EQ(diversity(Matrix::Identity(2, 1), 0.3), 1);  // a lone feature has no neighbours
}

TEST(Diversity, Validation) {
  EXPECT_THROW(diversity(Matrix::Identity(2, 2), 0.0), ValidationError);
  EXPECT_THROW(diversity(Matrix::Identity(2, 2), 1.5), ValidationError);
  EXPECT_THROW(diversity(2.0 * Matrix::Identity(2, 2), 0.5), ValidationError);
}

TEST(Diversity, MatchesOracleAndIsMonotoneInTau) {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const Matrix f = random_unit_columns(5, 20, s);
    Index prev = -1;
    for (double tau : {0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
      const Index got = diversity(f, tau);
      EXPECT_EQ(got, oracle_diversity(f, tau));
      EXPECT_GE(got, prev);
      prev = got;
    }
    EXPECT_EQ(diversity(f, 1.0), 20);
  }
}

TEST(Diversity, BlockedSweepMatchesSingleCalls) {
  const Matrix f = random_unit_columns(8, 1200, 4);
  const std::vector<double> taus{0.2, 0.4, 0.6};
  const auto sweep = diversity_sweep(f, taus);
  for (double t : taus) EXPECT_EQ(sweep.at(t), oracle_diversity(f, t));
}

TEST(Stability, HandExamples) {
  const Matrix f = random_unit_columns(4, 6, 1);
  EXPECT_NEAR(stability({f, f}, 0), 1.0, 1e-12);
  Matrix a = Matrix::Zero(4, 2), b = Matrix::Zero(4, 2);
  a(0, 0) = a(1, 1) = 1.0;
  b(2, 0) = b(3, 1) = 1.0;
  EXPECT_DOUBLE_EQ(stability({a, b}, 0), 0.0);
  EXPECT_DOUBLE_EQ(stability({a, Matrix(-a)}, 0), 0.0);  // signed: anti-aligned copies give 0 here
  EXPECT_DOUBLE_EQ(stability({a, Matrix(-a)}, 1), 0.0);
  EXPECT_THROW(stability({a}, 0), ValidationError);
  EXPECT_THROW(stability({a, b}, 2), ValidationError);
}

TEST(Stability, MatchesOracleAndBounds) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const std::vector<Matrix> runs{random_unit_columns(6, 9, s), random_unit_columns(6, 9, s + 10),
                                   random_unit_columns(6, 9, s + 20)};
    for (std::size_t r = 0; r < 3; ++r) {
      const double got = stability(runs, r);
      EXPECT_NEAR(got, oracle_stability(runs, r), 1e-12);
      EXPECT_LE(got, 1.0 + 1e-12);
      EXPECT_GE(got, -1.0 - 1e-12);
    }
  }
}

TEST(Evaluate, SingleMatchesOracles) {
  const auto data = eval_data(1);
  const SaeParams sae = random_sae(6, 14, Activation::relu(), 3);
  const auto rep = evaluate(sae, data, {0.5, 0.9});
  const Matrix a = data.all();
  const Matrix c = encode(sae, a);
  const Matrix r = reconstruct(sae, a);
  const Vector mean = a.colwise().mean().transpose();
  EXPECT_EQ(rep.kind, "single");
  EXPECT_EQ(rep.m, 14);
  EXPECT_EQ(rep.N, 500);
  EXPECT_NEAR(rep.mse, oracle_mse(a, r), 1e-10);
  EXPECT_NEAR(rep.explained_variance, oracle_ev(a, r, mean), 1e-9);
  EXPECT_DOUBLE_EQ(rep.relative_sparsity, oracle_sparsity(c));
  EXPECT_NEAR(rep.connectivity, oracle_connectivity(c), 1e-15);
  EXPECT_EQ(rep.diversity.at(0.5), oracle_diversity(sae.w_dec, 0.5));
  EXPECT_EQ(rep.diversity.at(0.9), oracle_diversity(sae.w_dec, 0.9));
}

TEST(Evaluate, BatchSizeDoesNotChangeResults) {
  const auto data = eval_data(2);
  const SaeParams sae = random_sae(6, 10, Activation::top_k(3), 4);
  const auto a = evaluate(sae, data, {0.7}, "eval", 4096);
  const auto b = evaluate(sae, data, {0.7}, "eval", 37);
  EXPECT_NEAR(a.mse, b.mse, 1e-10);
  EXPECT_NEAR(a.explained_variance, b.explained_variance, 1e-10);
  EXPECT_EQ(a.relative_sparsity, b.relative_sparsity);
  EXPECT_EQ(a.connectivity, b.connectivity);
}

TEST(Evaluate, EnsembleMatchesMemberAssembledOracle) {
  const auto data = eval_data(3);
  const Matrix a = data.all();
  const Vector mean = a.colwise().mean().transpose();
  for (auto kind : {EnsembleKind::naive_bagging, EnsembleKind::boosting}) {
    std::vector<SaeParams> members;
    for (std::uint64_t j = 0; j < 3; ++j) members.push_back(random_sae(6, 8, Activation::relu(), 40 + 5 * j));
    const Ensemble e = Ensemble::make(kind, members);
    const auto rep = evaluate(e, data, {0.6});

    // assemble reconstruction and codes member by member
    Matrix recon = Matrix::Zero(a.rows(), a.cols());
    Matrix codes(a.rows(), 24);
    Matrix residual = a;
    Matrix features(6, 24);
    for (Index j = 0; j < 3; ++j) {
      const SaeParams& m = e.members[static_cast<std::size_t>(j)];
      const Matrix input = kind == EnsembleKind::boosting ? residual : a;
      const Matrix part = reconstruct(m, input);
      codes.middleCols(j * 8, 8) = e.weights[static_cast<std::size_t>(j)] * encode(m, input);
      recon += e.weights[static_cast<std::size_t>(j)] * part;
      if (kind == EnsembleKind::boosting) residual -= part;
      features.middleCols(j * 8, 8) = m.w_dec;
    }
    EXPECT_EQ(rep.J, 3);
    EXPECT_EQ(rep.m, 24);
    EXPECT_NEAR(rep.mse, oracle_mse(a, recon), 1e-9);
    EXPECT_NEAR(rep.explained_variance, oracle_ev(a, recon, mean), 1e-9);
    EXPECT_DOUBLE_EQ(rep.relative_sparsity, oracle_sparsity(codes));
    EXPECT_NEAR(rep.connectivity, oracle_connectivity(codes), 1e-15);
    EXPECT_EQ(rep.diversity.at(0.6), oracle_diversity(features, 0.6));
  }
}

TEST(Evaluate, SingleMemberBagReportsLikeItsMember) {
  const auto data = eval_data(4);
  const SaeParams sae = random_sae(6, 10, Activation::relu(), 5);
  const auto single = evaluate(sae, data, {0.3, 0.7});
  const auto bag = evaluate(Ensemble::make(EnsembleKind::naive_bagging, {sae}), data, {0.3, 0.7});
  EXPECT_NEAR(single.mse, bag.mse, 1e-12);
  EXPECT_NEAR(single.explained_variance, bag.explained_variance, 1e-12);
  EXPECT_EQ(single.relative_sparsity, bag.relative_sparsity);
  EXPECT_EQ(single.connectivity, bag.connectivity);
  EXPECT_EQ(single.diversity, bag.diversity);
}

TEST(Evaluate, FeatureDuplicationLowersDiversity) {
  const auto data = eval_data(5);
  const SaeParams sae = random_sae(6, 10, Activation::relu(), 6);
  const auto bag = evaluate(Ensemble::make(EnsembleKind::naive_bagging, {sae, sae}), data, {0.9});
  EXPECT_EQ(bag.diversity.at(0.9), 0);
}
