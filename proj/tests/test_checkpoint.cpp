#include <fstream>

#include "support.hpp"

using namespace saens;
using saens::testing::random_sae;
using saens::testing::TempDir;

namespace {

void expect_same(const SaeParams& a, const SaeParams& b) {
  EXPECT_EQ(a.w_enc, b.w_enc);
  EXPECT_EQ(a.b_enc, b.b_enc);
  EXPECT_EQ(a.w_dec, b.w_dec);
  EXPECT_EQ(a.b_dec, b.b_dec);
  EXPECT_EQ(a.activation.kind, b.activation.kind);
  EXPECT_EQ(a.activation.topk, b.activation.topk);
  EXPECT_EQ(a.activation.theta, b.activation.theta);
  EXPECT_EQ(a.activation.bandwidth, b.activation.bandwidth);
  EXPECT_EQ(a.lambda, b.lambda);
}

}  // namespace

TEST(Checkpoint, RoundTripEveryActivation) {
  TempDir dir;
  const std::vector<Activation> acts{Activation::relu(), Activation::top_k(4),
                                     Activation::jump_relu(Vector::LinSpaced(9, 0.0, 0.4), 0.02)};
  for (std::size_t i = 0; i < acts.size(); ++i) {
    const SaeParams p = random_sae(5, 9, acts[i], 10 + i, 0.25);
    const auto path = dir / ("m" + std::to_string(i) + ".saec");
    save_sae(p, path, {{"note", "x"}});
    const auto back = load_sae(path);
    expect_same(p, back.params);
    EXPECT_EQ(back.header.at("meta").at("note"), "x");
    EXPECT_EQ(back.header.at("d"), 5);
    EXPECT_EQ(back.header.at("k"), 9);
  }
}

TEST(Checkpoint, LayoutAndAlignment) {
  TempDir dir;
  save_sae(random_sae(3, 4, Activation::relu(), 1), dir / "a.saec");
  const std::string bytes = saens::testing::file_bytes(dir / "a.saec");
  EXPECT_EQ(bytes.substr(0, 4), "SAEC");
  std::uint64_t header = 0;
  std::memcpy(&header, bytes.data() + 8, 8);
  EXPECT_EQ(header % 8, 0u);
  // 4 + 3 + 12 + 3 doubles after the header
  EXPECT_EQ(bytes.size(), 16 + header + (12 + 4 + 12 + 3) * 8);
}

TEST(Checkpoint, SaveIsDeterministic) {
  TempDir dir;
  const SaeParams p = random_sae(4, 6, Activation::top_k(2), 3);
  save_sae(p, dir / "a.saec");
  save_sae(p, dir / "b.saec");
  EXPECT_EQ(saens::testing::file_bytes(dir / "a.saec"), saens::testing::file_bytes(dir / "b.saec"));
}

TEST(Checkpoint, BadMagicAndTruncation) {
  TempDir dir;
  save_sae(random_sae(3, 4, Activation::relu(), 2), dir / "ok.saec");
  std::string bytes = saens::testing::file_bytes(dir / "ok.saec");

  std::string bad = bytes;
  bad[0] = 'X';
  write_text(dir / "bad.saec", bad);
  EXPECT_THROW(load_sae(dir / "bad.saec"), IoError);

  write_text(dir / "short.saec", bytes.substr(0, bytes.size() - 16));
  EXPECT_THROW(load_sae(dir / "short.saec"), IoError);

  EXPECT_THROW(load_sae(dir / "missing.saec"), IoError);
}

TEST(Checkpoint, EnsembleDirectoryRoundTrip) {
  TempDir dir;
  for (auto kind : {EnsembleKind::naive_bagging, EnsembleKind::boosting}) {
    std::vector<SaeParams> members{random_sae(4, 6, Activation::relu(), 5), random_sae(4, 6, Activation::relu(), 6),
                                   random_sae(4, 6, Activation::relu(), 7)};
    const Ensemble e = Ensemble::make(kind, members, {5, 6, 7});
    const auto path = dir / to_string(kind);
    save_ensemble(e, path);
    EXPECT_TRUE(std::filesystem::exists(path / "manifest.json"));
    EXPECT_TRUE(std::filesystem::exists(path / "member_002.saec"));
    const Ensemble back = load_ensemble(path);
    EXPECT_EQ(back.kind, kind);
    EXPECT_EQ(back.weights, e.weights);
    EXPECT_EQ(back.seeds, e.seeds);
    for (std::size_t j = 0; j < 3; ++j) expect_same(back.members[j], e.members[j]);
    EXPECT_EQ(load_sae(path / "member_001.saec").header.at("meta").at("init_seed"), 6);

    const Target t = load_target(path);
    EXPECT_TRUE(std::holds_alternative<Ensemble>(t));
  }
  save_sae(random_sae(4, 6, Activation::relu(), 8), dir / "single.saec");
  EXPECT_TRUE(std::holds_alternative<SaeParams>(load_target(dir / "single.saec")));
}

TEST(Checkpoint, EnsembleManifestErrors) {
  TempDir dir;
  EXPECT_THROW(load_ensemble(dir.path()), IoError);
  write_text(dir / "manifest.json", "{not json");
  EXPECT_THROW(load_ensemble(dir.path()), IoError);
}
