#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "support/oracles.hpp"

using namespace spurclip;

namespace {

Matrix rows(std::initializer_list<std::vector<double>> r) {
  Matrix m(r.size(), r.begin()->size());
  std::size_t i = 0;
  for (const auto& v : r) {
    std::copy(v.begin(), v.end(), m.row(i).begin());
    ++i;
  }
  return m;
}

Matrix constant_rows(std::size_t n, std::vector<double> v) {
  Matrix m(n, v.size());
  for (std::size_t i = 0; i < n; ++i) std::copy(v.begin(), v.end(), m.row(i).begin());
  return m;
}

std::vector<Anchor> anchors_from(std::vector<std::size_t> labels, std::vector<std::size_t> templates = {},
                                 std::vector<bool> attrs = {}) {
  std::vector<Anchor> a;
  for (std::size_t i = 0; i < labels.size(); ++i)
    a.push_back({i, i, labels[i], attrs.empty() ? false : static_cast<bool>(attrs[i]),
                 templates.empty() ? 0 : templates[i]});
  return a;
}

const double kLn2 = std::log(2.0);

}  // namespace

TEST(CrossGroupSimilarity, UniformOverTwo) {
  const std::vector<double> a{1.0, 0.0};
  EXPECT_NEAR(cross_group_similarity(a, rows({{0.6, 0.8}}), rows({{0.6, -0.8}}), 0.3), kLn2, 1e-12);
}

TEST(CrossGroupSimilarity, UniformOverFour) {
  const std::vector<double> a{0.0, 1.0};
  const auto b = constant_rows(2, {0.0, 1.0});
  EXPECT_NEAR(cross_group_similarity(a, b, b, 0.07), std::log(4.0), 1e-12);
}

TEST(CrossGroupSimilarity, OrthonormalPair) {
  const std::vector<double> a{1.0, 0.0};
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(cross_group_similarity(a, rows({{1.0, 0.0}}), rows({{0.0, 1.0}}), 1.0), want, 1e-12);
  EXPECT_NEAR(want, 0.313262, 1e-6);
}

TEST(CrossGroupSimilarity, EmptySidesRaise) {
  const std::vector<double> a{1.0, 0.0};
  try {
    cross_group_similarity(a, Matrix(0, 2), rows({{0.0, 1.0}}), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyPositives);
  }
  try {
    cross_group_similarity(a, rows({{0.0, 1.0}}), Matrix(0, 2), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyNegatives);
  }
}

TEST(CrossGroupSimilarity, StableAtTinyTemperature) {
  const std::vector<double> a{1.0, 0.0};
  const double v = cross_group_similarity(a, rows({{0.0, 1.0}}), rows({{1.0, 0.0}}), 1e-4);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 1e4, 1e-6);
}

TEST(CrossGroupSimilarity, UniformLimitAtHugeTemperature) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = oracle::random_unit_rows(1, 5, gen);
    const auto p = oracle::random_unit_rows(1 + trial % 3, 5, gen);
    const auto q = oracle::random_unit_rows(1 + trial % 4, 5, gen);
    const double v = cross_group_similarity(a.row(0), p, q, 1e6);
    EXPECT_NEAR(v, std::log(static_cast<double>(p.rows() + q.rows())), 1e-6);
  }
}

TEST(CrossGroupSimilarity, NegativesEnterOnlyThroughInnerProducts) {
  const std::vector<double> a{1.0, 0.0, 0.0};
  const auto pos = rows({{0.8, 0.6, 0.0}});
  const double v1 = cross_group_similarity(a, pos, rows({{0.5, std::sqrt(0.75), 0.0}}), 0.2);
  const double v2 = cross_group_similarity(a, pos, rows({{0.5, 0.0, -std::sqrt(0.75)}}), 0.2);
  EXPECT_DOUBLE_EQ(v1, v2);
}

TEST(ClipLoss, SingletonIsZero) {
  Minibatch mb{anchors_from({0}), rows({{1.0, 0.0}}), rows({{0.0, 1.0}}), {}};
  EXPECT_DOUBLE_EQ(clip_loss(mb, 0.07), 0.0);
}

TEST(ClipLoss, IdenticalEmbeddingsGiveLn2) {
  Minibatch mb{anchors_from({0, 1}), constant_rows(2, {1.0, 0.0}), constant_rows(2, {1.0, 0.0}), {}};
  EXPECT_NEAR(clip_loss(mb, 0.5), kLn2, 1e-12);
}

TEST(ClipLoss, OrthonormalPairs) {
  Minibatch mb{anchors_from({0, 1}), rows({{1.0, 0.0}, {0.0, 1.0}}), rows({{1.0, 0.0}, {0.0, 1.0}}), {}};
  EXPECT_NEAR(clip_loss(mb, 1.0), std::log(1.0 + std::exp(-1.0)), 1e-12);
}

TEST(ClipLoss, MatchesOracle) {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto mb = oracle::random_minibatch(1 + trial % 7, 4, gen);
    const double tau = 0.05 + 0.1 * (trial % 5);
    const double want = oracle::clip(oracle::to_rows(mb.image_embs), oracle::to_rows(mb.text_embs), tau);
    EXPECT_NEAR(clip_loss(mb, tau), want, 1e-10 * std::max(1.0, want));
  }
}

TEST(ContrastiveImageLoss, SkipsAnchorWithoutPositives) {
  Minibatch mb{anchors_from({0, 0, 1}), constant_rows(3, {0.0, 1.0}), {}, {}};
  EXPECT_NEAR(contrastive_image_loss(mb, 0.3), kLn2, 1e-12);
}

TEST(ContrastiveImageLoss, SingleLabelIsDegenerate) {
  Minibatch mb{anchors_from({0, 0, 0}), constant_rows(3, {0.0, 1.0}), {}, {}};
  try {
    contrastive_image_loss(mb, 0.3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateBatch);
  }
}

TEST(ContrastiveImageLoss, OrthonormalFixture) {
  Minibatch mb{anchors_from({0, 0, 1}), rows({{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}}), {}, {}};
  EXPECT_NEAR(contrastive_image_loss(mb, 1.0), 0.3132616875182228, 1e-12);
}

TEST(ContrastiveLanguageLoss, SameTemplateOnlyIsDegenerate) {
  Minibatch mb{anchors_from({0, 0, 1}, {0, 0, 0}), {}, constant_rows(3, {1.0, 0.0}), {}};
  try {
    contrastive_language_loss(mb, 0.3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateBatch);
  }
}

TEST(ContrastiveLanguageLoss, DifferentTemplatesGiveLn2) {
  Minibatch mb{anchors_from({0, 0, 1}, {0, 1, 0}), {}, constant_rows(3, {1.0, 0.0}), {}};
  EXPECT_NEAR(contrastive_language_loss(mb, 0.3), kLn2, 1e-12);
}

TEST(ContrastiveLanguageLoss, OrthonormalRowsMatchOracle) {
  const auto anchors = anchors_from({0, 0, 1}, {0, 1, 0});
  // distinct orthonormal row per (label, template)
  const auto txt = rows({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}});
  Minibatch mb{anchors, {}, txt, {}};
  const auto want = oracle::grouped(oracle::to_rows(txt), anchors, 0.4, oracle::same_label_other_template);
  ASSERT_TRUE(want.has_value());
  EXPECT_NEAR(contrastive_language_loss(mb, 0.4), *want, 1e-12);
}

TEST(SpuriousImageLoss, SameGroupPositives) {
  Minibatch mb{anchors_from({0, 0, 0}, {}, {true, true, false}), constant_rows(3, {1.0, 0.0}), {}, {}};
  EXPECT_NEAR(spurious_image_loss(mb, 0.2), kLn2, 1e-12);
}

TEST(SpuriousImageLoss, OneGroupIsDegenerate) {
  Minibatch mb{anchors_from({1, 1}, {}, {true, true}), constant_rows(2, {1.0, 0.0}), {}, {}};
  EXPECT_THROW(spurious_image_loss(mb, 0.2), Error);
}

TEST(SpuriousImageLoss, FourGroupsDuplicatedMatchOracle) {
  std::mt19937_64 gen(3);
  const auto anchors = anchors_from({0, 0, 1, 1, 0, 0, 1, 1}, {}, {false, true, false, true, false, true, false, true});
  const auto base = oracle::random_unit_rows(4, 3, gen);
  Matrix img(8, 3);
  for (std::size_t i = 0; i < 8; ++i) std::ranges::copy(base.row(i % 4), img.row(i).begin());
  Minibatch mb{anchors, img, {}, {}};
  const auto want = oracle::grouped(oracle::to_rows(img), anchors, 0.1, oracle::same_group);
  EXPECT_NEAR(spurious_image_loss(mb, 0.1), *want, 1e-10 * *want);
}

TEST(SpuriousLanguageLoss, MirrorsImageCase) {
  Minibatch mb{anchors_from({0, 0, 0}, {}, {true, true, false}), {}, {}, constant_rows(3, {1.0, 0.0})};
  EXPECT_NEAR(spurious_language_loss(mb, 0.2), kLn2, 1e-12);
  Minibatch one{anchors_from({1, 1}, {}, {true, true}), {}, {}, constant_rows(2, {1.0, 0.0})};
  EXPECT_THROW(spurious_language_loss(one, 0.2), Error);
}

TEST(SpuriousLanguageLoss, NeedsVariantRows) {
  Minibatch mb{anchors_from({0, 1}), {}, constant_rows(2, {1.0, 0.0}), {}};
  try {
    spurious_language_loss(mb, 0.2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingVariant);
  }
}

TEST(CombinedLoss, ClipOnSingleton) {
  Minibatch mb{anchors_from({0}), rows({{1.0, 0.0}}), rows({{1.0, 0.0}}), {}};
  EXPECT_DOUBLE_EQ(combined_loss(mb, 0.07, LossSpec::parse("clip")).total, 0.0);
}

TEST(CombinedLoss, EqualsSumOfTerms) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto mb = oracle::random_minibatch(6, 4, gen);
    const auto br = combined_loss(mb, 0.2, LossSpec::parse("clip,vc,lc,vs,ls"));
    double sum = 0.0;
    for (auto t : kAllTerms) {
      try {
        sum += term_loss_scaled(t, mb, 5.0);
      } catch (const Error&) {
      }
    }
    EXPECT_EQ(br.total, sum);
  }
}

TEST(CombinedLoss, MatchesOracleSum) {
  std::mt19937_64 gen(12);
  const auto spec = LossSpec::parse("lc,vc,ls");
  for (int trial = 0; trial < 20; ++trial) {
    auto mb = oracle::random_minibatch(6, 4, gen);
    const auto t = oracle::terms(oracle::to_rows(mb.image_embs), oracle::to_rows(mb.text_embs),
                                 oracle::to_rows(mb.variant_text_embs), mb.anchors, 0.25);
    double want = 0.0;
    for (auto k : {LossTerm::lc, LossTerm::vc, LossTerm::ls})
      if (auto v = oracle::term(t, k)) want += *v;
    EXPECT_NEAR(combined_loss(mb, 0.25, spec).total, want, 1e-10 * std::max(1.0, want));
  }
}

TEST(CombinedLoss, DegenerateTermListedNotFatal) {
  Minibatch mb{anchors_from({0, 0}), constant_rows(2, {1.0, 0.0}), constant_rows(2, {1.0, 0.0}), {}};
  const auto br = combined_loss(mb, 1.0, LossSpec::parse("clip,vc"));
  ASSERT_EQ(br.degenerate.size(), 1u);
  EXPECT_EQ(br.degenerate[0], LossTerm::vc);
  EXPECT_FALSE(br.terms[static_cast<std::size_t>(LossTerm::vc)].has_value());
  EXPECT_NEAR(br.total, kLn2, 1e-12);
}

TEST(CombinedLoss, WeightsScaleTerms) {
  std::mt19937_64 gen(13);
  auto mb = oracle::random_minibatch(6, 4, gen);
  const double a = combined_loss(mb, 0.3, LossSpec::parse("clip")).total;
  const double b = combined_loss(mb, 0.3, LossSpec::parse("clip=0.25")).total;
  EXPECT_NEAR(b, 0.25 * a, 1e-15);
}

TEST(LossProperties, PermutationInvariance) {
  std::mt19937_64 gen(21);
  for (int trial = 0; trial < 30; ++trial) {
    auto mb = oracle::random_minibatch(6, 5, gen);
    std::vector<std::size_t> perm(mb.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), gen);
    Minibatch sh{{}, Matrix(6, 5), Matrix(6, 5), Matrix(6, 5)};
    for (std::size_t i = 0; i < 6; ++i) {
      sh.anchors.push_back(mb.anchors[perm[i]]);
      std::ranges::copy(mb.image_embs.row(perm[i]), sh.image_embs.row(i).begin());
      std::ranges::copy(mb.text_embs.row(perm[i]), sh.text_embs.row(i).begin());
      std::ranges::copy(mb.variant_text_embs.row(perm[i]), sh.variant_text_embs.row(i).begin());
    }
    for (auto t : kAllTerms) {
      std::optional<double> x, y;
      try {
        x = term_loss_scaled(t, mb, 7.0);
      } catch (const Error&) {
      }
      try {
        y = term_loss_scaled(t, sh, 7.0);
      } catch (const Error&) {
      }
      ASSERT_EQ(x.has_value(), y.has_value());
      if (x) {
        EXPECT_NEAR(*x, *y, 1e-12);
      }
    }
  }
}

TEST(LossProperties, UniformLimitPerTerm) {
  std::mt19937_64 gen(22);
  const auto anchors = anchors_from({0, 0, 1, 1}, {0, 1, 0, 1}, {false, true, false, true});
  Minibatch mb{anchors, oracle::random_unit_rows(4, 3, gen), {}, {}};
  // every vc anchor has P=1 and Q=2
  EXPECT_NEAR(contrastive_image_loss(mb, 1e6), std::log(3.0), 1e-6);
}

TEST(LossSpecParsing, PresetsAndText) {
  EXPECT_EQ(LossSpec::preset("row2").to_string(), "clip,vc,lc,vs");
  EXPECT_EQ(LossSpec::preset("row6").to_string(), "clip,vc,vs");
  EXPECT_EQ(LossSpec::parse("vs,clip,lc=0.5").to_string(), "clip,lc=0.5,vs");
  EXPECT_EQ(LossSpec::parse(LossSpec::parse("clip,ls=2").to_string()), LossSpec::parse("clip,ls=2"));
  for (const char* bad : {"", "clip,xx", "clip=-1", "clip=abc", "clip=nan"}) {
    try {
      LossSpec::parse(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidLossSpec) << bad;
    }
  }
  EXPECT_THROW(LossSpec::preset("row7"), Error);
}
