#include "support.hpp"

using namespace saens;
using saens::testing::random_matrix;
using saens::testing::random_sae;

namespace {

Ensemble random_ensemble(EnsembleKind kind, Index J, Index d, Index k, std::uint64_t seed,
                         Activation act = Activation::relu()) {
  std::vector<SaeParams> members;
  for (Index j = 0; j < J; ++j) members.push_back(random_sae(d, k, act, seed + 10 * static_cast<std::uint64_t>(j)));
  return Ensemble::make(kind, std::move(members));
}

ActivationDataset toy_data(Index n, std::uint64_t seed) {
  SyntheticDictionarySpec spec;
  spec.dim = 8;
  spec.true_feature_count = 16;
  spec.active_per_sample = 2;
  spec.coeff_low = 0.5;
  spec.coeff_high = 1.5;
  spec.noise_std = 0.05;
  spec.seed = seed;
  return generate_synthetic(spec, n).dataset;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.learning_rate = 0.003;
  cfg.batch_size = 128;
  cfg.epochs = 2;
  cfg.lambda = 0.1;
  return cfg;
}

}  // namespace

TEST(EnsembleType, WeightsFollowKind) {
  const Ensemble bag = random_ensemble(EnsembleKind::naive_bagging, 4, 3, 6, 1);
  EXPECT_EQ(bag.weights, std::vector<double>(4, 0.25));
  const Ensemble boost = random_ensemble(EnsembleKind::boosting, 3, 3, 6, 2);
  EXPECT_EQ(boost.weights, std::vector<double>(3, 1.0));
  Ensemble bad = bag;
  bad.weights[0] = 0.5;
  EXPECT_THROW(bad.validate(), ValidationError);
  std::vector<SaeParams> mixed{random_sae(3, 6, Activation::relu(), 1), random_sae(3, 7, Activation::relu(), 2)};
  EXPECT_THROW(Ensemble::make(EnsembleKind::naive_bagging, mixed), ValidationError);
}

TEST(Bagging, SingleMemberEqualsMember) {
  const Ensemble e = random_ensemble(EnsembleKind::naive_bagging, 1, 4, 9, 3);
  const Matrix x = random_matrix(20, 4, 4);
  EXPECT_EQ(bag_reconstruct(e, x), reconstruct(e.members[0], x));
}

TEST(Bagging, IdenticalMembersGiveMemberOutput) {
  const SaeParams s = random_sae(4, 9, Activation::relu(), 5);
  const Ensemble e = Ensemble::make(EnsembleKind::naive_bagging, {s, s, s});
  const Matrix x = random_matrix(10, 4, 6);
  EXPECT_LT((bag_reconstruct(e, x) - reconstruct(s, x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Bagging, OpposedMembersCancel) {
  SaeParams s = random_sae(3, 5, Activation::relu(), 7);
  s.b_dec.setZero();
  SaeParams neg = s;
  neg.w_dec = -s.w_dec;
  const Ensemble e = Ensemble::make(EnsembleKind::naive_bagging, {s, neg});
  EXPECT_LT(bag_reconstruct(e, random_matrix(6, 3, 8)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Bagging, MatchesLoopAverageOracle) {
  const Ensemble e = random_ensemble(EnsembleKind::naive_bagging, 3, 4, 9, 9);
  const Matrix x = random_matrix(15, 4, 10);
  const Matrix got = bag_reconstruct(e, x);
  for (Index n = 0; n < x.rows(); ++n) {
    Vector acc = Vector::Zero(4);
    for (const auto& m : e.members) acc += reconstruct_one(m, x.row(n).transpose());
    EXPECT_LT((got.row(n).transpose() - acc / 3.0).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Bagging, MemberPermutationInvariance) {
  Ensemble e = random_ensemble(EnsembleKind::naive_bagging, 4, 4, 9, 11);
  const Matrix x = random_matrix(12, 4, 12);
  const Matrix before = bag_reconstruct(e, x);
  std::reverse(e.members.begin(), e.members.end());
  EXPECT_LT((bag_reconstruct(e, x) - before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Bagging, KindMismatch) {
  const Ensemble e = random_ensemble(EnsembleKind::boosting, 2, 3, 6, 13);
  EXPECT_THROW(bag_reconstruct(e, random_matrix(2, 3, 1)), ValidationError);
}

TEST(Boosting, SingleMemberAndZeroMap) {
  const Ensemble one = random_ensemble(EnsembleKind::boosting, 1, 4, 9, 14);
  const Matrix x = random_matrix(10, 4, 15);
  EXPECT_EQ(boost_reconstruct(one, x), reconstruct(one.members[0], x));

  SaeParams zero = one.members[0];
  zero.w_enc.setZero();
  zero.b_enc.setZero();
  zero.b_dec.setZero();
  const Ensemble two = Ensemble::make(EnsembleKind::boosting, {one.members[0], zero});
  EXPECT_LT((boost_reconstruct(two, x) - reconstruct(one.members[0], x)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Boosting, TelescopingResidual) {
  const Ensemble e = random_ensemble(EnsembleKind::boosting, 4, 5, 11, 16);
  const Matrix x = random_matrix(20, 5, 17);
  Matrix final_residual;
  const Matrix r = boost_reconstruct(e, x, &final_residual);
  Matrix residual = x;
  for (const auto& m : e.members) residual -= reconstruct(m, residual);
  EXPECT_LT((x - r - residual).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((final_residual - residual).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Boosting, KindMismatch) {
  const Ensemble e = random_ensemble(EnsembleKind::naive_bagging, 2, 3, 6, 18);
  EXPECT_THROW(boost_reconstruct(e, random_matrix(2, 3, 1)), ValidationError);
}

TEST(EnsembleEncode, BlocksAreWeightedMemberCodes) {
  const Ensemble one = random_ensemble(EnsembleKind::naive_bagging, 1, 3, 7, 19);
  const Matrix x = random_matrix(5, 3, 20);
  EXPECT_EQ(ensemble_encode(one, x), encode(one.members[0], x));

  const Ensemble two = random_ensemble(EnsembleKind::naive_bagging, 2, 3, 7, 21);
  const Matrix c = ensemble_encode(two, x);
  ASSERT_EQ(c.cols(), 14);
  EXPECT_LT((c.leftCols(7) - 0.5 * encode(two.members[0], x)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((c.rightCols(7) - 0.5 * encode(two.members[1], x)).cwiseAbs().maxCoeff(), 1e-15);

  const Ensemble boost = random_ensemble(EnsembleKind::boosting, 2, 3, 7, 22);
  const Matrix cb = ensemble_encode(boost, x);
  const Matrix r2 = x - reconstruct(boost.members[0], x);
  EXPECT_LT((cb.rightCols(7) - encode(boost.members[1], r2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Flatten, Structure) {
  const Ensemble e = random_ensemble(EnsembleKind::naive_bagging, 2, 4, 9, 23);
  const FlattenedSae f = flatten(e);
  ASSERT_EQ(f.w_dec_cat.cols(), 18);
  EXPECT_EQ(f.w_dec_cat.leftCols(9), e.members[0].w_dec);
  EXPECT_EQ(f.w_dec_cat.rightCols(9), e.members[1].w_dec);
  EXPECT_LT((f.b_dec_sum - (e.members[0].b_dec + e.members[1].b_dec) / 2).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Flatten, ReconstructionEquivalence) {
  for (auto kind : {EnsembleKind::naive_bagging, EnsembleKind::boosting}) {
    for (const Activation& act : {Activation::relu(), Activation::top_k(3), Activation::jump_relu(Vector::Constant(11, 0.1))}) {
      const Ensemble e = random_ensemble(kind, 3, 5, 11, 24, act);
      const Matrix x = random_matrix(100, 5, 25);
      EXPECT_LT((reconstruct_flat(flatten(e), x) - reconstruct(e, x)).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(BagTrain, DuplicateSeedsRejected) {
  const auto data = toy_data(200, 1);
  EXPECT_THROW(bag_train(data, quick_config(), Activation::relu(), 16, {3, 3}), ValidationError);
  EXPECT_THROW(bag_train(data, quick_config(), Activation::relu(), 16, {}), ValidationError);
}

TEST(BagTrain, SingleMemberEqualsTrainSae) {
  const auto data = toy_data(1000, 2);
  const auto single = train_sae(data, quick_config(), Activation::relu(), 16, 40);
  const auto bag = bag_train(data, quick_config(), Activation::relu(), 16, {40});
  EXPECT_EQ(bag.ensemble.members[0].w_dec, single.params.w_dec);
  EXPECT_EQ(bag.ensemble.members[0].w_enc, single.params.w_enc);
}

TEST(BagTrain, ParallelEqualsSequential) {
  const auto data = toy_data(1000, 3);
  const auto seq = bag_train(data, quick_config(), Activation::relu(), 16, {1, 2, 3}, 1);
  const auto par = bag_train(data, quick_config(), Activation::relu(), 16, {1, 2, 3}, 3);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(seq.ensemble.members[j].w_dec, par.ensemble.members[j].w_dec);
    EXPECT_EQ(seq.ensemble.members[j].b_enc, par.ensemble.members[j].b_enc);
  }
}

TEST(BagTrain, HeldOutMseAtMostMeanMemberMse) {
  const auto data = toy_data(4000, 4);
  const Matrix test = toy_data(1000, 4).all();
  TrainConfig cfg = quick_config();
  const auto bag = bag_train(data, cfg, Activation::relu(), 16, {1, 2, 3, 4, 5, 6, 7, 8});
  double mean_member = 0.0;
  for (const auto& m : bag.ensemble.members) mean_member += mse(test, reconstruct(m, test)) / 8.0;
  EXPECT_LE(mse(test, bag_reconstruct(bag.ensemble, test)), mean_member);
}

TEST(BoostTrain, SingleMemberEqualsTrainSae) {
  const auto data = toy_data(1000, 5);
  const auto single = train_sae(data, quick_config(), Activation::relu(), 16, 41);
  const auto boost = boost_train(data, quick_config(), Activation::relu(), 16, {41});
  EXPECT_EQ(boost.ensemble.members[0].w_dec, single.params.w_dec);
  EXPECT_EQ(boost.ensemble.kind, EnsembleKind::boosting);
}

TEST(BoostTrain, SecondMemberTrainsOnResidual) {
  const auto data = toy_data(1000, 6);
  const auto boost = boost_train(data, quick_config(), Activation::relu(), 16, {7, 8});
  const Matrix x = data.all();
  const Matrix residual = boosting_residual({boost.ensemble.members[0]}, x);
  EXPECT_EQ(residual, Matrix(x - reconstruct(boost.ensemble.members[0], x)));
  // the second member is bit-identical to training a fresh SAE on the residual dataset
  const auto direct = train_sae(ActivationDataset::from_rows(RowMatrix(residual)), quick_config(), Activation::relu(), 16, 8);
  EXPECT_LT((direct.params.w_dec - boost.ensemble.members[1].w_dec).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(BoostTrain, TrainingMseNonIncreasingAcrossMembers) {
  const auto data = toy_data(4000, 7);
  const auto boost = boost_train(data, quick_config(), Activation::relu(), 16, {11, 12, 13, 14});
  const Matrix x = data.all();
  double prev = std::numeric_limits<double>::infinity();
  Matrix residual = x;
  for (const auto& m : boost.ensemble.members) {
    residual -= reconstruct(m, residual);
    const double now = residual.rowwise().squaredNorm().mean();
    EXPECT_LE(now, prev);
    prev = now;
  }
}

TEST(BoostTrain, CachedResidualsMatchStreaming) {
  saens::testing::TempDir dir;
  const auto data = toy_data(1500, 8);
  const auto streamed = boost_train(data, quick_config(), Activation::relu(), 16, {21, 22, 23});
  const auto cached = boost_train(data, quick_config(), Activation::relu(), 16, {21, 22, 23}, dir / "cache");
  EXPECT_FALSE(std::filesystem::exists(dir / "cache"));
  EXPECT_EQ(cached.ensemble.members[0].w_dec, streamed.ensemble.members[0].w_dec);
  // later members see f32-rounded residuals, so they agree closely but not bitwise
  const Matrix x = data.all();
  EXPECT_NEAR(mse(x, reconstruct(cached.ensemble, x)), mse(x, reconstruct(streamed.ensemble, x)), 1e-3);
}

TEST(Seeds, DefaultMemberSeeds) {
  EXPECT_EQ(default_member_seeds(100, 3), (std::vector<std::uint64_t>{100, 101, 102}));
}
