#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "eees/gradcheck.hpp"
#include "eees/losses.hpp"
#include "oracles.hpp"

using namespace eees;

namespace {

Mat rand_mat(Rng& rng, std::size_t r, std::size_t c) {
  Mat m(r, c);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

EmbeddingSet random_set(Rng& rng, std::size_t n, std::size_t d, std::vector<int> labels) {
  return {rand_mat(rng, n, d), rand_mat(rng, n, d), rand_mat(rng, n, d), rand_mat(rng, n, d),
          std::move(labels)};
}

std::vector<std::vector<std::size_t>> candidates_of(const std::vector<int>& labels) {
  std::vector<std::vector<std::size_t>> c(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (i != j && labels[i] == labels[j]) c[i].push_back(j);
  return c;
}

Mat permute_rows(const Mat& m, const std::vector<std::size_t>& perm) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(perm[i], j);
  return out;
}

const std::vector<int> kLabels4 = {0, 0, 1, 1};

}  // namespace

// --- identity ---------------------------------------------------------------

TEST(IdentityLoss, UniformLogitsGiveTwoLogC) {
  Mat z(1, 4);
  auto r = identity_loss(z, z, std::vector<int>{2});
  EXPECT_NEAR(r.value, 2.0 * std::log(4.0), 1e-12);
  EXPECT_NEAR(r.value, 2.77259, 5e-6);
}

TEST(IdentityLoss, SaturatedCorrectPrediction) {
  Mat l(1, 3, Vec{0.0, 50.0, 0.0});
  EXPECT_LT(identity_loss(l, l, std::vector<int>{1}).value, 1e-10);
}

TEST(IdentityLoss, BinaryHandValue) {
  Mat lv(1, 2, Vec{1.0, 0.0}), lr(1, 2, Vec{0.0, 1.0});
  const double v = identity_loss(lv, lr, std::vector<int>{0}).value;
  const long double expected = std::log1p(std::exp(-1.0L)) + std::log1p(std::exp(1.0L));
  EXPECT_NEAR(v, static_cast<double>(expected), 1e-14);
  EXPECT_NEAR(v, 1.62652, 1e-5);
}

TEST(IdentityLoss, LabelOutOfRange) {
  Mat z(1, 3);
  EXPECT_THROW(identity_loss(z, z, std::vector<int>{3}), IndexError);
  EXPECT_THROW(identity_loss(z, z, std::vector<int>{-1}), IndexError);
}

TEST(IdentityLoss, GradientIsSoftmaxMinusOneHotOverN) {
  Rng rng(1);
  Mat lv = rand_mat(rng, 3, 4), lr = rand_mat(rng, 3, 4);
  std::vector<int> y{0, 3, 1};
  auto r = identity_loss(lv, lr, y);
  for (std::size_t i = 0; i < 3; ++i) {
    auto p = softmax_stable(Vec(lv.row(i).begin(), lv.row(i).end()));
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(r.grad_v(i, c), (p[c] - (static_cast<int>(c) == y[i] ? 1.0 : 0.0)) / 3.0, 1e-15);
  }
  EXPECT_NEAR(r.value, static_cast<double>(oracle::identity_loss(oracle::rows_of(lv),
                                                                 oracle::rows_of(lr), y)),
              1e-13);
}

// --- weighted regularization triplet ----------------------------------------

TEST(WrtLoss, BalancedAnchorsGiveLn2) {
  // Vertices of a regular tetrahedron: every pairwise distance is equal, so
  // the weighted positive and negative distances coincide for every anchor.
  Mat x(4, 3, Vec{1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1});
  auto r = wrt_loss(x, std::vector<int>{0, 0, 1, 1});
  EXPECT_NEAR(r.value, std::log(2.0), 1e-12);
}

TEST(WrtLoss, FarNegativesNearPositives) {
  Mat x(4, 1, Vec{0.0, 0.0, 1000.0, 1000.0});
  auto r = wrt_loss(x, std::vector<int>{0, 0, 1, 1});
  EXPECT_LT(r.value, 1e-10);
}

TEST(WrtLoss, HandPlacedMatchesScalarOracle) {
  // 2 identities x 2 samples in d = 2, visible block then infrared block.
  Mat fv(2, 2, Vec{0.0, 0.0, 2.0, 1.0});
  Mat fr(2, 2, Vec{0.5, -0.5, 1.5, 2.0});
  std::vector<int> y{0, 1};
  auto r = wrt_loss(fv, fr, y);
  Mat stacked(4, 2, Vec{0.0, 0.0, 2.0, 1.0, 0.5, -0.5, 1.5, 2.0});
  const auto expected = oracle::wrt(oracle::rows_of(stacked), {0, 1, 0, 1});
  EXPECT_NEAR(r.value, static_cast<double>(expected), 1e-14);
}

TEST(WrtLoss, RandomMatchesScalarOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Mat x = rand_mat(rng, 8, 3);
    std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1};
    EXPECT_NEAR(wrt_loss(x, y).value, static_cast<double>(oracle::wrt(oracle::rows_of(x), y)),
                1e-13);
  }
}

TEST(WrtLoss, AnchorWithoutNegativeOrPositive) {
  Mat x(2, 2, Vec{0, 0, 1, 1});
  EXPECT_THROW(wrt_loss(x, std::vector<int>{0, 0}), ProtocolError);
  EXPECT_THROW(wrt_loss(x, std::vector<int>{0, 1}), ProtocolError);
}

// --- contrastive ------------------------------------------------------------

TEST(ContrastivePair, SingleRowIsZero) {
  Mat f(1, 3, Vec{1, 2, 3}), t(1, 3, Vec{-1, 0, 2});
  EXPECT_EQ(contrastive_pair_loss(f, t, 0.07).value, 0.0);
}

TEST(ContrastivePair, EqualSimilaritiesGiveTwoLogN) {
  Mat f(5, 2), t(5, 2);
  for (std::size_t i = 0; i < 5; ++i) {
    f(i, 0) = 1.0, f(i, 1) = 2.0;
    t(i, 0) = -0.5, t(i, 1) = 3.0;
  }
  EXPECT_NEAR(contrastive_pair_loss(f, t, 0.07).value, 2.0 * std::log(5.0), 1e-12);
}

TEST(ContrastivePair, HandValue) {
  Mat f(2, 2, Vec{1, 0, 0, 1}), t(2, 2, Vec{1, 0, 0, 1});
  const double v = contrastive_pair_loss(f, t, 1.0).value;
  EXPECT_NEAR(v, static_cast<double>(2.0L * std::log1p(std::exp(-1.0L))), 1e-14);
  EXPECT_NEAR(v, 0.62652, 1e-5);
}

TEST(ContrastivePair, MatchesScalarOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Mat f = rand_mat(rng, 5, 4), t = rand_mat(rng, 5, 4);
    EXPECT_NEAR(contrastive_pair_loss(f, t, 0.3).value,
                static_cast<double>(oracle::contrastive_pair(oracle::rows_of(f), oracle::rows_of(t), 0.3L)),
                1e-12);
  }
}

TEST(ContrastivePair, ZeroRowNamed) {
  Mat f(2, 2, Vec{1, 0, 0, 0}), t(2, 2, Vec{1, 0, 0, 1});
  try {
    contrastive_pair_loss(f, t, 0.07);
    FAIL() << "expected a degenerate-input error";
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
  }
}

TEST(ContrastiveO, Examples) {
  Rng rng(2);
  EXPECT_EQ(contrastive_o(random_set(rng, 1, 3, {0}), 0.07).value, 0.0);
  Mat c(4, 2);
  for (auto& v : c.data()) v = 0.5;
  EmbeddingSet same{c, c, c, c, {0, 1, 2, 3}};
  EXPECT_NEAR(contrastive_o(same, 0.07).value, 4.0 * std::log(4.0), 1e-12);
  auto e = random_set(rng, 3, 4, {0, 1, 2});
  EXPECT_EQ(contrastive_o(e, 0.07).value, contrastive_pair_loss(e.f_v, e.t_v, 0.07).value +
                                              contrastive_pair_loss(e.f_r, e.t_r, 0.07).value);
}

// --- fusion -----------------------------------------------------------------

TEST(Fusion, MZeroIsIdentity) {
  Rng rng(3);
  auto e = random_set(rng, 4, 3, kLabels4);
  auto f = fuse_multiview(e, candidates_of(kLabels4), 0, 99);
  EXPECT_EQ(f.fm_v, e.f_v);
  EXPECT_EQ(f.fm_r, e.f_r);
  EXPECT_EQ(f.tm_v, e.t_v);
  EXPECT_EQ(f.tm_r, e.t_r);
}

TEST(Fusion, PartnerEqualToRowGivesRow) {
  Mat m(2, 2, Vec{1, 2, 1, 2});
  EmbeddingSet e{m, m, m, m, {0, 0}};
  auto f = fuse_multiview(e, candidates_of({0, 0}), 1, 5);
  EXPECT_EQ(f.fm_v, m);
}

TEST(Fusion, TwoPointMean) {
  Mat m(2, 2, Vec{1, 0, 0, 1});
  EmbeddingSet e{m, m, m, m, {0, 0}};
  auto f = fuse_multiview(e, candidates_of({0, 0}), 1, 5);
  EXPECT_EQ(f.fm_v(0, 0), 0.5);
  EXPECT_EQ(f.fm_v(0, 1), 0.5);
}

TEST(Fusion, ImageAndTextShareSampledPartners) {
  Rng rng(6);
  std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
  auto e = random_set(rng, 8, 2, y);
  // Text rows tagged by index so the partner choice can be read back.
  for (std::size_t i = 0; i < 8; ++i) {
    e.t_v(i, 0) = e.f_v(i, 0);
    e.t_v(i, 1) = e.f_v(i, 1);
  }
  auto f = fuse_multiview(e, candidates_of(y), 2, 17);
  EXPECT_EQ(f.fm_v, f.tm_v);
}

TEST(Fusion, WithoutReplacementWhenPossible) {
  std::vector<int> y{0, 0, 0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto plan = plan_fusion(y, candidates_of(y), 2, seed);
    for (const auto& row : plan.partners_v) {
      ASSERT_EQ(row.size(), 2u);
      EXPECT_NE(row[0].row, row[1].row);
    }
  }
}

TEST(Fusion, FallbackAndStrictMode) {
  std::vector<int> y{0, 1};
  auto plan = plan_fusion(y, candidates_of(y), 1, 0);
  EXPECT_EQ(plan.fallback_rows, 2u);
  EXPECT_THROW(plan_fusion(y, candidates_of(y), 1, 0, false, false), ProtocolError);
  Rng rng(1);
  auto e = random_set(rng, 2, 3, y);
  auto f = fuse(e, plan);
  EXPECT_EQ(f.fm_v, e.f_v);
}

TEST(Fusion, Deterministic) {
  Rng rng(7);
  std::vector<int> y{0, 0, 0, 1, 1, 1};
  auto e = random_set(rng, 6, 3, y);
  auto a = fuse_multiview(e, candidates_of(y), 1, 123);
  auto b = fuse_multiview(e, candidates_of(y), 1, 123);
  EXPECT_EQ(a.fm_v, b.fm_v);
  EXPECT_EQ(a.tm_r, b.tm_r);
}

TEST(ContrastiveM, MZeroEqualsContrastiveO) {
  Rng rng(12);
  auto e = random_set(rng, 4, 5, kLabels4);
  auto f = fuse_multiview(e, candidates_of(kLabels4), 0, 1);
  EXPECT_EQ(contrastive_m(f, 0.07).value, contrastive_o(e, 0.07).value);
}

TEST(ContrastiveM, SingleRowIsZero) {
  Rng rng(12);
  auto e = random_set(rng, 1, 3, {0});
  EXPECT_EQ(contrastive_m(fuse_multiview(e, candidates_of({0}), 1, 0), 0.07).value, 0.0);
}

TEST(ContrastiveM, MatchesOracleThroughAverages) {
  Rng rng(13);
  std::vector<int> y{0, 0};
  auto e = random_set(rng, 2, 3, y);
  auto f = fuse_multiview(e, candidates_of(y), 1, 4);
  // With one partner available each row averages with the other one.
  auto avg = [](const Mat& m) {
    oracle::Rows r = oracle::rows_of(m);
    oracle::Row mean(r[0].size());
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] = (r[0][j] + r[1][j]) / 2.0;
    return oracle::Rows{mean, mean};
  };
  const auto expected = oracle::contrastive_pair(avg(e.f_v), avg(e.t_v), 0.07L) +
                        oracle::contrastive_pair(avg(e.f_r), avg(e.t_r), 0.07L);
  EXPECT_NEAR(contrastive_m(f, 0.07).value, static_cast<double>(expected), 1e-12);
}

// --- distillation -----------------------------------------------------------

TEST(KdLoss, ZeroWhenFusedEqualsSource) {
  Rng rng(14);
  auto e = random_set(rng, 4, 3, kLabels4);
  EXPECT_EQ(kd_loss(e, fuse_multiview(e, candidates_of(kLabels4), 0, 0)).value, 0.0);
}

TEST(KdLoss, OneBlockOffByOnes) {
  Mat z(1, 4);
  EmbeddingSet e{z, z, z, z, {0}};
  FusedSet f{z, z, z, z, 0, {}};
  for (auto& v : f.tm_r.data()) v = 1.0;
  EXPECT_EQ(kd_loss(e, f).value, 4.0);
}

TEST(KdLoss, MatchesScalarOracleAndIsNonnegative) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    auto e = random_set(rng, 2, 3, {0, 0});
    auto f = fuse_multiview(e, candidates_of({0, 0}), 1, static_cast<std::uint64_t>(trial));
    const double v = kd_loss(e, f).value;
    const auto expected = oracle::mse_rows(oracle::rows_of(f.fm_v), oracle::rows_of(e.f_v)) +
                          oracle::mse_rows(oracle::rows_of(f.fm_r), oracle::rows_of(e.f_r)) +
                          oracle::mse_rows(oracle::rows_of(f.tm_v), oracle::rows_of(e.t_v)) +
                          oracle::mse_rows(oracle::rows_of(f.tm_r), oracle::rows_of(e.t_r));
    EXPECT_NEAR(v, static_cast<double>(expected), 1e-13);
    EXPECT_GE(v, 0.0);
  }
}

TEST(KdLoss, TeacherReceivesNoGradient) {
  // Gradients are returned for the student blocks only and equal 2(f - fm)/N.
  Mat f(1, 2, Vec{1.0, 2.0}), z(1, 2);
  EmbeddingSet e{f, z, z, z, {0}};
  FusedSet fused{z, z, z, z, 1, {}};
  auto r = kd_loss(e, fused);
  EXPECT_EQ(r.grad.f_v(0, 0), 2.0);
  EXPECT_EQ(r.grad.f_v(0, 1), 4.0);
}

// --- purification -----------------------------------------------------------

TEST(CmspLoss, EqualTextsGiveZero) {
  Rng rng(16);
  auto e = random_set(rng, 3, 4, {0, 1, 2});
  e.t_r = e.t_v;
  EXPECT_EQ(cmsp_loss(e).value, 0.0);
}

TEST(CmspLoss, OneDimensionalHandValue) {
  EmbeddingSet e{Mat(1, 1, Vec{0.0}), Mat(1, 1, Vec{2.0}), Mat(1, 1, Vec{1.0}), Mat(1, 1, Vec{3.0}),
                 {0}};
  EXPECT_NEAR(cmsp_loss(e).value, 4.0, 1e-12);
}

TEST(CmspLoss, QuadraticHomogeneity) {
  Rng rng(17);
  auto e = random_set(rng, 1, 3, {0});
  const double base = cmsp_loss(e).value;
  const double alpha = 2.5;
  for (Mat* m : {&e.f_v, &e.f_r, &e.t_v, &e.t_r}) *m *= alpha;
  EXPECT_NEAR(cmsp_loss(e).value, alpha * alpha * base, 1e-12 * (1.0 + base));
}

TEST(CmspLoss, ModalitySwapInvariant) {
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    auto e = random_set(rng, 3, 4, {0, 1, 2});
    EmbeddingSet s{e.f_r, e.f_v, e.t_r, e.t_v, e.labels};
    EXPECT_NEAR(cmsp_loss(s).value, cmsp_loss(e).value, 1e-12);
    EXPECT_NEAR(cmsp_loss(e).value,
                static_cast<double>(oracle::cmsp(oracle::rows_of(e.f_v), oracle::rows_of(e.f_r),
                                                 oracle::rows_of(e.t_v), oracle::rows_of(e.t_r))),
                1e-12);
  }
}

TEST(CmspLoss, ZeroDistanceGradientIsFinite) {
  Mat a(1, 2, Vec{1.0, 1.0});
  EmbeddingSet e{a, Mat(1, 2, Vec{0.0, 3.0}), a, Mat(1, 2, Vec{2.0, -1.0}), {0}};
  auto r = cmsp_loss(e);
  for (const Mat* g : {&r.grad.f_v, &r.grad.f_r, &r.grad.t_v, &r.grad.t_r})
    EXPECT_TRUE(all_finite(g->data()));
}

// --- total ------------------------------------------------------------------

namespace {

struct TotalFixture {
  EmbeddingSet emb;
  FusedSet fused;
  Mat lv, lr;
};

TotalFixture total_fixture(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y{0, 0, 1, 1, 2, 2};
  TotalFixture t{random_set(rng, 6, 4, y), {}, rand_mat(rng, 6, 3), rand_mat(rng, 6, 3)};
  t.fused = fuse_multiview(t.emb, candidates_of(y), 1, seed);
  return t;
}

}  // namespace

TEST(TotalLoss, ZeroWeightsLeaveIdentityOnly) {
  auto t = total_fixture(1);
  LossWeights w;
  w.lambda1 = w.lambda2 = w.lambda3 = w.lambda4 = 0.0;
  auto r = total_loss(t.emb, t.fused, t.lv, t.lr, w);
  EXPECT_EQ(r.breakdown.l_total, r.breakdown.l_id);
}

TEST(TotalLoss, ComponentsMatchIndividualCalls) {
  auto t = total_fixture(2);
  LossWeights w;
  auto r = total_loss(t.emb, t.fused, t.lv, t.lr, w);
  const auto& b = r.breakdown;
  EXPECT_EQ(b.l_id, identity_loss(t.lv, t.lr, t.emb.labels).value);
  EXPECT_EQ(b.l_wrt, wrt_loss(t.emb.f_v, t.emb.f_r, t.emb.labels).value);
  EXPECT_EQ(b.l_con_o, contrastive_o(t.emb, w.tau).value);
  EXPECT_EQ(b.l_con_m, contrastive_m(t.fused, w.tau).value);
  EXPECT_EQ(b.l_kd, kd_loss(t.emb, t.fused).value);
  EXPECT_EQ(b.l_cmsp, cmsp_loss(t.emb).value);
  const double expected = b.l_id + 0.25 * b.l_wrt + 0.2 * (b.l_con_o + b.l_con_m) +
                          0.08 * b.l_kd + 0.01 * b.l_cmsp;
  EXPECT_NEAR(b.l_total, expected, 1e-10);
}

TEST(TotalLoss, ManyToManySwitch) {
  auto t = total_fixture(3);
  LossWeights w;
  w.many_to_many = false;
  auto r = total_loss(t.emb, t.fused, t.lv, t.lr, w);
  EXPECT_EQ(r.breakdown.l_con_m, 0.0);
  EXPECT_NEAR(r.breakdown.l_total, r.breakdown.recompose(w), 1e-10);
}

TEST(TotalLoss, FusedPathSilentWithoutAlignmentAndDistillation) {
  auto t = total_fixture(4);
  LossWeights w;
  w.lambda2 = 0.0;
  w.lambda3 = 0.0;
  auto r = total_loss(t.emb, t.fused, t.lv, t.lr, w);
  for (const Mat* g : {&r.grad_fused.f_v, &r.grad_fused.f_r, &r.grad_fused.t_v, &r.grad_fused.t_r})
    for (double v : g->data()) EXPECT_EQ(v, 0.0);
}

TEST(LossWeights, Validation) {
  LossWeights w;
  w.tau = 0.0;
  EXPECT_THROW(w.validate(), ConfigError);
  w = {};
  w.lambda3 = -1.0;
  EXPECT_THROW(w.validate(), ConfigError);
  w = {};
  w.M = -1;
  EXPECT_THROW(w.validate(), ConfigError);
}

// --- permutation equivariance ----------------------------------------------

TEST(LossProperty, PermutationEquivariance) {
  Rng rng(30);
  std::vector<int> y{0, 0, 1, 1, 2, 2};
  for (int trial = 0; trial < 20; ++trial) {
    auto e = random_set(rng, 6, 4, y);
    auto lv = rand_mat(rng, 6, 3), lr = rand_mat(rng, 6, 3);
    auto fused = fuse_multiview(e, candidates_of(y), 1, static_cast<std::uint64_t>(trial));
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 5; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    std::vector<int> py(6);
    for (std::size_t i = 0; i < 6; ++i) py[i] = y[perm[i]];
    EmbeddingSet pe{permute_rows(e.f_v, perm), permute_rows(e.f_r, perm), permute_rows(e.t_v, perm),
                    permute_rows(e.t_r, perm), py};
    FusedSet pf{permute_rows(fused.fm_v, perm), permute_rows(fused.fm_r, perm),
                permute_rows(fused.tm_v, perm), permute_rows(fused.tm_r, perm), fused.M, {}};
    auto plv = permute_rows(lv, perm), plr = permute_rows(lr, perm);

    EXPECT_NEAR(identity_loss(plv, plr, py).value, identity_loss(lv, lr, y).value, 1e-10);
    EXPECT_NEAR(wrt_loss(pe.f_v, pe.f_r, py).value, wrt_loss(e.f_v, e.f_r, y).value, 1e-10);
    EXPECT_NEAR(contrastive_o(pe, 0.07).value, contrastive_o(e, 0.07).value, 1e-10);
    EXPECT_NEAR(contrastive_o(pe, 0.07, true).value, contrastive_o(e, 0.07, true).value, 1e-10);
    EXPECT_NEAR(contrastive_m(pf, 0.07).value, contrastive_m(fused, 0.07).value, 1e-10);
    EXPECT_NEAR(kd_loss(pe, pf).value, kd_loss(e, fused).value, 1e-10);
    EXPECT_NEAR(cmsp_loss(pe).value, cmsp_loss(e).value, 1e-10);
  }
}

// --- gradients --------------------------------------------------------------

TEST(LossGradients, AllLossesPassCentralDifferences) {
  GradCheckOptions opt;
  opt.batches = 50;
  for (const auto& s : run_gradcheck(opt)) {
    EXPECT_TRUE(s.passed) << s.loss << ": " << s.first_failure;
    EXPECT_EQ(s.batches, 50) << s.loss;
    EXPECT_GT(s.checked, 0u) << s.loss;
  }
}

TEST(LossGradients, CorruptedGradientIsCaught) {
  GradCheckOptions opt;
  opt.batches = 3;
  opt.corrupt = "cmsp";
  for (const auto& s : run_gradcheck(opt)) EXPECT_EQ(s.passed, s.loss != "cmsp") << s.loss;
}
