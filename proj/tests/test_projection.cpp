#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "support/oracles.hpp"

using namespace spurclip;

namespace {

ProjectionParams identity_params(std::size_t d) { return {Matrix::identity(d), Matrix::identity(d), kDefaultLogInvTau}; }

bool all_zero(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return v == 0.0; });
}

}  // namespace

TEST(Projection, NormalizesToUnit) {
  Matrix x(1, 2);
  x(0, 0) = 3.0;
  x(0, 1) = 4.0;
  const auto p = identity_params(2);
  for (const auto& out : {project_images(p, x), project_texts(p, x)}) {
    EXPECT_DOUBLE_EQ(out(0, 0), 0.6);
    EXPECT_DOUBLE_EQ(out(0, 1), 0.8);
  }
}

TEST(Projection, ZeroMatrixRaises) {
  ProjectionParams p{Matrix(2, 2), Matrix(2, 2), 0.0};
  Matrix x(1, 2);
  x(0, 0) = 1.0;
  for (auto f : {&project_images, &project_texts}) {
    try {
      f(p, x);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ZeroVector);
    }
  }
}

TEST(Projection, RandomRowsHaveUnitNorm) {
  std::mt19937_64 gen(2);
  const auto p = oracle::random_params(5, 7, 6, gen);
  const auto xi = oracle::random_matrix(10, 7, gen);
  const auto xt = oracle::random_matrix(10, 6, gen);
  const auto a = project_images(p, xi);
  const auto b = project_texts(p, xt);
  for (std::size_t r = 0; r < 10; ++r) {
    EXPECT_NEAR(norm(a.row(r)), 1.0, 1e-12);
    EXPECT_NEAR(norm(b.row(r)), 1.0, 1e-12);
  }
}

TEST(Projection, WidthMismatchRaises) {
  const auto p = identity_params(3);
  EXPECT_THROW(project_images(p, Matrix(2, 4)), Error);
}

TEST(Params, TemperatureDefaultsAndClamp) {
  ProjectionParams p = identity_params(2);
  EXPECT_NEAR(p.tau(), 0.07, 1e-15);
  p.log_inv_tau = 10.0;
  p.clamp_temperature();
  EXPECT_NEAR(p.logit_scale(), 100.0, 1e-9);
}

TEST(Params, RandomInitScale) {
  const auto p = ProjectionParams::random(64, 100, 25, 9);
  double si = 0.0, st = 0.0;
  for (double v : p.w_img.data()) si += v * v;
  for (double v : p.w_txt.data()) st += v * v;
  EXPECT_NEAR(si / p.w_img.size(), 1.0 / 100.0, 0.1 / 100.0);
  EXPECT_NEAR(st / p.w_txt.size(), 1.0 / 25.0, 0.1 / 25.0);
  EXPECT_EQ(ProjectionParams::random(4, 5, 6, 1), ProjectionParams::random(4, 5, 6, 1));
}

TEST(Gradients, LossEqualsForward) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto raw = oracle::random_raw_batch(6, 5, 4, gen);
    const auto p = oracle::random_params(3, 5, 4, gen);
    const auto spec = LossSpec::preset("row1");
    GradientResult g;
    try {
      g = compute_gradients(p, raw, spec);
    } catch (const Error& e) {
      ASSERT_EQ(e.code(), ErrorCode::DegenerateBatch);
      continue;
    }
    const double fwd = combined_loss(project_batch(p, raw, spec), p, spec).total;
    EXPECT_NEAR(g.loss, fwd, 1e-10 * std::max(1.0, fwd));
    EXPECT_NEAR(g.loss, oracle::total_loss(p, raw, spec), 1e-10 * std::max(1.0, fwd));
  }
}

TEST(Gradients, FiniteDifferencesSingleTerms) {
  std::mt19937_64 gen(6);
  for (const char* spec_text : {"clip", "vc", "lc", "vs", "ls", "clip=0.3,ls=2"}) {
    const auto spec = LossSpec::parse(spec_text);
    int checked = 0;
    for (int trial = 0; trial < 10 && checked < 4; ++trial) {
      const auto raw = oracle::random_raw_batch(2 + trial % 7, 4, 3, gen);
      const auto p = oracle::random_params(3, 4, 3, gen);
      GradientResult g;
      try {
        g = compute_gradients(p, raw, spec);
      } catch (const Error&) {
        continue;
      }
      ++checked;
      const auto fd = oracle::finite_differences(p, raw, spec);
      EXPECT_LT(oracle::max_rel_err(g.grads, fd), 1e-5) << spec_text;
    }
    EXPECT_GT(checked, 0) << spec_text;
  }
}

TEST(Gradients, TextOnlyTermsLeaveImageBlockZero) {
  std::mt19937_64 gen(8);
  for (const char* s : {"lc", "ls", "lc,ls"}) {
    const auto raw = oracle::random_raw_batch(8, 4, 3, gen);
    const auto p = oracle::random_params(3, 4, 3, gen);
    try {
      const auto g = compute_gradients(p, raw, LossSpec::parse(s));
      EXPECT_TRUE(all_zero(g.grads.w_img)) << s;
      EXPECT_FALSE(all_zero(g.grads.w_txt)) << s;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::DegenerateBatch);
    }
  }
}

TEST(Gradients, ImageOnlyTermsLeaveTextBlockZero) {
  std::mt19937_64 gen(9);
  for (const char* s : {"vc", "vs", "vc,vs"}) {
    const auto raw = oracle::random_raw_batch(8, 4, 3, gen);
    const auto p = oracle::random_params(3, 4, 3, gen);
    try {
      const auto g = compute_gradients(p, raw, LossSpec::parse(s));
      EXPECT_TRUE(all_zero(g.grads.w_txt)) << s;
      EXPECT_FALSE(all_zero(g.grads.w_img)) << s;
      EXPECT_NE(g.grads.log_inv_tau, 0.0);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::DegenerateBatch);
    }
  }
}

TEST(Gradients, ClipTouchesBothBlocks) {
  std::mt19937_64 gen(10);
  const auto raw = oracle::random_raw_batch(4, 4, 3, gen);
  const auto g = compute_gradients(oracle::random_params(3, 4, 3, gen), raw, LossSpec::parse("clip"));
  EXPECT_FALSE(all_zero(g.grads.w_img));
  EXPECT_FALSE(all_zero(g.grads.w_txt));
}

TEST(Gradients, Deterministic) {
  std::mt19937_64 gen(11);
  const auto raw = oracle::random_raw_batch(8, 4, 3, gen);
  const auto p = oracle::random_params(3, 4, 3, gen);
  const auto a = compute_gradients(p, raw, LossSpec::preset("row1"));
  const auto b = compute_gradients(p, raw, LossSpec::preset("row1"));
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grads.w_img, b.grads.w_img);
  EXPECT_EQ(a.grads.w_txt, b.grads.w_txt);
  EXPECT_EQ(a.grads.log_inv_tau, b.grads.log_inv_tau);
}

TEST(Gradients, AllDegenerateRaises) {
  RawBatch raw{{{0, 0, 0, false, 0}, {1, 1, 0, false, 0}}, Matrix::identity(2), Matrix::identity(2), Matrix()};
  try {
    compute_gradients(identity_params(2), raw, LossSpec::parse("vc"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateBatch);
  }
}

TEST(Checkpoint, RoundTripAndErrors) {
  std::mt19937_64 gen(12);
  Checkpoint ck{oracle::random_params(3, 4, 5, gen), 7, 0xdeadbeefULL};
  const auto bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.size(), 4 + 4 + 24 + 8 * (12 + 15 + 1) + 16);
  EXPECT_EQ(decode_checkpoint(bytes), ck);

  const auto dir = std::filesystem::temp_directory_path() / "spurclip_ck_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "a.spck", ck);
  EXPECT_EQ(load_checkpoint(dir / "a.spck"), ck);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.spck.tmp"));
  std::filesystem::remove_all(dir);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), Error);
  auto short_ = bytes;
  short_.pop_back();
  try {
    decode_checkpoint(short_);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}
