#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "support/finite_diff.hpp"
#include "support/gan_synthetic.hpp"
#include "ucmr/entailment_gan.hpp"

namespace {

using namespace ucmr;
using ucmr::gan::Vec;
using ucmr::nn::Mat;

constexpr double kGradTol = 1e-4;

TokenMatrix random_tokens(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  TokenMatrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

Vec random_indicator(int u, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  Vec v(u);
  for (int i = 0; i < u; ++i) v[i] = ud(rng);
  return v;
}

Vec random_multi_hot(int u, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.3);
  Vec v(u);
  for (int i = 0; i < u; ++i) v[i] = b(rng) ? 1.0 : 0.0;
  return v;
}

std::vector<gan::Example> random_examples(int count, int d, int u, std::mt19937_64& rng) {
  std::vector<gan::Example> out;
  std::uniform_int_distribution<int> len(2, 7);
  for (int i = 0; i < count; ++i) out.push_back({random_tokens(len(rng), d, rng), random_multi_hot(u, rng)});
  return out;
}

std::vector<const gan::Example*> all_of(const std::vector<gan::Example>& data) {
  std::vector<const gan::Example*> b;
  for (const auto& e : data) b.push_back(&e);
  return b;
}

// --- generator ------------------------------------------------------------

TEST(Generator, OutputHasUniverseLengthAndUnitRange) {
  std::mt19937_64 rng(1);
  gan::Generator g({16, 11, 30, 3});
  g.init(rng);
  for (int n : {1, 2, 3, 9}) {
    Vec p = gan::generator_forward(random_tokens(n, 16, rng), g);
    ASSERT_EQ(p.size(), 11);
    EXPECT_GE(p.minCoeff(), 0.0);
    EXPECT_LE(p.maxCoeff(), 1.0);
  }
}

TEST(Generator, SingleWindowMatchesHandComputedForward) {
  gan::Generator g({3, 2, 2, 3});
  auto& p = g.params();
  p[gan::Generator::kConvW].data << 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1,  //
      1, 0, 0, 0, -1, 0, 0, 0, 0.5;
  p[gan::Generator::kConvB].data << 0.0, -0.7;
  p[gan::Generator::kFcW].data << 1, 2, -3, 4;
  p[gan::Generator::kFcB].data << 0.1, -0.2;
  TokenMatrix x = TokenMatrix::Identity(3, 3);
  auto c = g.forward_cached(x);
  // conv outputs 0.3 and -0.2; relu -> (0.3, 0); logits (0.4, -1.1)
  EXPECT_NEAR(c.pooled[0], 0.3, 1e-12);
  EXPECT_NEAR(c.pooled[1], -0.2, 1e-12);
  EXPECT_NEAR(c.logits[0], 0.4, 1e-12);
  EXPECT_NEAR(c.logits[1], -1.1, 1e-12);
  EXPECT_NEAR(c.probs[0], 0.598687660112452, 1e-12);
  EXPECT_NEAR(c.probs[1], 0.24973989440488234, 1e-12);
}

TEST(Generator, ShortInputIsZeroPaddedToWindow) {
  std::mt19937_64 rng(2);
  gan::Generator g({4, 5, 6, 3});
  g.init(rng);
  TokenMatrix one = random_tokens(1, 4, rng);
  TokenMatrix padded = TokenMatrix::Zero(3, 4);
  padded.row(0) = one.row(0);
  EXPECT_EQ(g.forward(one), g.forward(padded));
}

TEST(Generator, RejectsWrongTokenDimension) {
  gan::Generator g({4, 5, 6, 3});
  try {
    g.forward(TokenMatrix::Ones(3, 5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Generator, DominatedZeroRowsDoNotChangeOutput) {
  // Non-negative filters and large positive tokens: every window containing
  // a zero row scores strictly lower than the all-token windows.
  std::mt19937_64 rng(3);
  gan::Generator g({4, 6, 5, 3});
  g.init(rng);
  g.params()[gan::Generator::kConvW].data = g.params()[gan::Generator::kConvW].data.cwiseAbs().array() + 0.05;
  TokenMatrix x = random_tokens(6, 4, rng).cwiseAbs().array() + 2.0;
  TokenMatrix extended = TokenMatrix::Zero(9, 4);
  extended.topRows(6) = x;
  EXPECT_EQ(g.forward(x), g.forward(extended));
}

TEST(Generator, AnalyticGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  gan::Generator g({4, 16, 30, 3});
  g.init(rng);
  TokenMatrix x = random_tokens(6, 4, rng);
  Vec w = random_indicator(16, rng);
  auto loss = [&] { return w.dot(g.forward(x)); };
  auto grads = g.params().zeros_like();
  auto c = g.forward_cached(x);
  g.backward(c, w.cwiseProduct(c.probs.cwiseProduct((1.0 - c.probs.array()).matrix())), grads);
  auto r = oracle::check_gradients(g.params(), grads, loss, 1e-5);
  EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
}

// --- discriminator --------------------------------------------------------

TEST(Discriminator, EvalModeIsDeterministic) {
  std::mt19937_64 rng(5);
  gan::Discriminator d({20});
  d.init(rng);
  Vec x = random_indicator(20, rng);
  EXPECT_EQ(gan::discriminator_forward(x, d, false), gan::discriminator_forward(x, d, false));
}

TEST(Discriminator, ZeroWeightsGiveBiasLogit) {
  gan::Discriminator d({12});
  d.params()[gan::Discriminator::kFcB].data[0] = 0.375;
  std::mt19937_64 rng(6);
  EXPECT_DOUBLE_EQ(d.forward(random_indicator(12, rng)), 0.375);
}

TEST(Discriminator, FiniteOnRandomInputs) {
  std::mt19937_64 rng(7);
  gan::Discriminator d({32});
  d.init(rng);
  for (int i = 0; i < 1000; ++i) {
    ASSERT_TRUE(std::isfinite(d.forward(random_indicator(32, rng), i % 2 == 0, &rng)));
  }
}

TEST(Discriminator, SmallUniversePadsToEight) {
  gan::Discriminator d({3});
  EXPECT_EQ(d.shape().padded(), 8);
  EXPECT_EQ(gan::DiscriminatorShape{9}.padded(), 12);
  std::mt19937_64 rng(8);
  d.init(rng);
  EXPECT_TRUE(std::isfinite(d.forward(Vec::Ones(3))));
  EXPECT_THROW(d.forward(Vec::Ones(4)), Error);
}

TEST(Discriminator, AnalyticGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  gan::Discriminator d({16});
  d.init(rng);
  Vec x = random_indicator(16, rng);
  auto loss = [&] { return d.forward(x); };
  auto grads = d.params().zeros_like();
  Vec dx = d.backward(d.forward_cached(x, false), 1.0, &grads);
  auto r = oracle::check_gradients(d.params(), grads, loss, 1e-5);
  EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;

  // Input gradient too.
  for (int i = 0; i < 16; ++i) {
    Vec up = x, down = x;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    EXPECT_LE(oracle::rel_error(dx[i], (d.forward(up) - d.forward(down)) / 2e-5), kGradTol) << i;
  }
}

// --- penalties ------------------------------------------------------------

TEST(GradientPenalty, UnitLinearDiscriminatorHasZeroPenalty) {
  Vec w(4);
  w << 0.5, -0.5, 0.5, 0.5;  // unit norm
  auto grad = [&](const Vec&) { return w; };
  EXPECT_NEAR(gan::gradient_penalty(grad, Vec::Ones(4), Vec::Zero(4), 0.3), 0.0, 1e-15);
}

TEST(GradientPenalty, ConstantDiscriminatorHasUnitPenalty) {
  auto grad = [](const Vec& x) { return Vec::Zero(x.size()).eval(); };
  EXPECT_DOUBLE_EQ(gan::gradient_penalty(grad, Vec::Ones(4), Vec::Zero(4), 0.7), 1.0);
}

TEST(GradientPenalty, ParameterGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  gan::Discriminator d({16});
  d.init(rng);
  Vec real = random_multi_hot(16, rng), fake = random_indicator(16, rng);
  const double eps = 0.37;
  Vec x_hat = eps * real + (1.0 - eps) * fake;
  auto grads = d.params().zeros_like();
  double gp = gan::gradient_penalty_with_grad(d, x_hat, false, nullptr, 1.0, grads);
  EXPECT_NEAR(gp, gan::gradient_penalty(d, real, fake, eps), 1e-12);
  auto loss = [&] { return gan::gradient_penalty(d, real, fake, eps); };
  auto r = oracle::check_gradients(d.params(), grads, loss, 1e-5);
  EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
}

TEST(SmoothnessPenalty, Examples) {
  Vec a = Vec::Zero(3), b = Vec::Zero(3);
  b[1] = 1.0;
  EXPECT_EQ(gan::smoothness_penalty({a}), 0.0);
  EXPECT_EQ(gan::smoothness_penalty({a, a, a}), 0.0);
  EXPECT_DOUBLE_EQ(gan::smoothness_penalty({a, b}), 1.0);
}

TEST(SmoothnessPenalty, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::vector<Vec> outs;
  for (int i = 0; i < 5; ++i) outs.push_back(random_indicator(16, rng));
  auto g = gan::smoothness_penalty_grad(outs);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    for (int j = 0; j < 16; ++j) {
      auto up = outs, down = outs;
      up[i][j] += 1e-5;
      down[i][j] -= 1e-5;
      double numeric = (gan::smoothness_penalty(up) - gan::smoothness_penalty(down)) / 2e-5;
      EXPECT_LE(oracle::rel_error(g[i][j], numeric), kGradTol);
    }
  }
}

// --- full losses ----------------------------------------------------------

gan::TrainConfig small_config() {
  gan::TrainConfig c;
  c.batch_size = 4;
  c.seed = 21;
  return c;
}

TEST(GanLosses, DiscriminatorLossGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  auto data = random_examples(3, 4, 16, rng);
  gan::GanState s(small_config(), 4, 16);
  auto batch = all_of(data);
  const std::mt19937_64 frozen(99);
  auto grads = s.discriminator.params().zeros_like();
  std::mt19937_64 r0 = frozen;
  gan::discriminator_loss(s, batch, r0, grads);
  auto loss = [&] {
    std::mt19937_64 r = frozen;
    auto scratch = s.discriminator.params().zeros_like();
    auto rep = gan::discriminator_loss(s, batch, r, scratch);
    return rep.d_adversarial + s.config.gp_coeff * rep.gradient_penalty;
  };
  auto r = oracle::check_gradients(s.discriminator.params(), grads, loss, 1e-5, 300);
  EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
}

TEST(GanLosses, GeneratorLossGradientMatchesFiniteDifferences) {
  for (bool non_saturating : {false, true}) {
    std::mt19937_64 rng(13);
    auto data = random_examples(4, 4, 16, rng);
    auto cfg = small_config();
    cfg.non_saturating = non_saturating;
    gan::GanState s(cfg, 4, 16);
    auto batch = all_of(data);
    auto grads = s.generator.params().zeros_like();
    gan::generator_loss(s, batch, grads);
    auto loss = [&] {
      auto scratch = s.generator.params().zeros_like();
      auto rep = gan::generator_loss(s, batch, scratch);
      return rep.g_adversarial + cfg.smooth_coeff * rep.smoothness + cfg.pair_coeff * rep.pair;
    };
    auto r = oracle::check_gradients(s.generator.params(), grads, loss, 1e-5);
    EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
  }
}

// --- training contract ----------------------------------------------------

TEST(GanStep, AlternationLeavesOtherNetworkUntouched) {
  std::mt19937_64 rng(14);
  auto data = random_examples(8, 6, 32, rng);
  gan::GanState s(small_config(), 6, 32);
  auto g_before = s.generator.params();
  auto d_before = s.discriminator.params();
  auto rep = gan::gan_step(s, all_of(data));
  EXPECT_TRUE(rep.discriminator_step);
  EXPECT_TRUE(s.generator.params() == g_before);
  EXPECT_FALSE(s.discriminator.params() == d_before);

  d_before = s.discriminator.params();
  g_before = s.generator.params();
  rep = gan::gan_step(s, all_of(data));
  EXPECT_FALSE(rep.discriminator_step);
  EXPECT_TRUE(s.discriminator.params() == d_before);
  EXPECT_FALSE(s.generator.params() == g_before);
}

TEST(GanStep, LossTermsFiniteOnRandomBatch) {
  std::mt19937_64 rng(15);
  auto data = random_examples(8, 6, 32, rng);
  gan::GanState s(small_config(), 6, 32);
  auto d = gan::gan_step(s, all_of(data));
  auto g = gan::gan_step(s, all_of(data));
  for (double v : {d.d_adversarial, d.gradient_penalty, g.g_adversarial, g.smoothness, g.pair}) {
    EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_GT(d.d_adversarial, 0.0);
}

TEST(GanStep, NonFiniteInputAborts) {
  std::mt19937_64 rng(16);
  auto data = random_examples(2, 4, 8, rng);
  data[0].tokens(0, 0) = std::numeric_limits<double>::quiet_NaN();
  gan::GanState s(small_config(), 4, 8);
  try {
    gan::gan_step(s, all_of(data));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteLoss);
  }
}

TEST(GanTrain, TwoStepsMeansOneUpdateEach) {
  std::mt19937_64 rng(17);
  auto data = random_examples(6, 4, 8, rng);
  auto cfg = small_config();
  cfg.total_steps = 2;
  auto s = gan::train(data, 8, cfg);
  EXPECT_EQ(s.adam_d.steps(), 1);
  EXPECT_EQ(s.adam_g.steps(), 1);
  EXPECT_EQ(s.step, 2);
}

TEST(GanTrain, RejectsOddStepCount) {
  auto cfg = small_config();
  cfg.total_steps = 3;
  EXPECT_THROW(gan::GanState(cfg, 4, 8), Error);
}

TEST(GanTrain, DeterministicForSeed) {
  std::mt19937_64 rng(18);
  auto data = random_examples(6, 4, 8, rng);
  auto cfg = small_config();
  cfg.total_steps = 20;
  auto a = gan::train(data, 8, cfg);
  auto b = gan::train(data, 8, cfg);
  EXPECT_TRUE(a.generator.params() == b.generator.params());
  EXPECT_TRUE(a.discriminator.params() == b.discriminator.params());
}

TEST(GanTrain, ResumeFromCheckpointIsBitIdentical) {
  std::mt19937_64 rng(19);
  auto data = random_examples(10, 5, 12, rng);
  auto cfg = small_config();
  cfg.total_steps = 100;
  cfg.checkpoint_every = 50;
  auto dir = std::filesystem::temp_directory_path() / "ucmr_gan_resume";
  std::filesystem::remove_all(dir);
  auto straight = gan::train(data, 12, cfg, dir);
  ASSERT_TRUE(std::filesystem::exists(dir / "step_000050.json"));
  auto resumed = gan::load_checkpoint(dir / "step_000050.json");
  EXPECT_EQ(resumed.step, 50);
  gan::train(resumed, data);
  EXPECT_TRUE(resumed.generator.params() == straight.generator.params());
  EXPECT_TRUE(resumed.discriminator.params() == straight.discriminator.params());
  std::filesystem::remove_all(dir);
}

TEST(GanCheckpoint, ShapeTableMismatchRejected) {
  gan::GanState s(small_config(), 4, 8);
  auto j = gan::checkpoint_json(s);
  j["generator"][2]["shape"] = {8, 31};
  try {
    gan::gan_from_checkpoint(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

// --- prediction -----------------------------------------------------------

TEST(PredictRules, ThresholdingExamples) {
  Vec p(3);
  p << 0.9, 0.1, 0.6;
  EXPECT_EQ(gan::threshold_indices(p), (gan::IndexSet{0, 2}));
  p << 0.49, 0.1, 0.2;
  EXPECT_TRUE(gan::threshold_indices(p).empty());
}

TEST(PredictRules, UsesConcatenatedHistoryTokens) {
  encoder::HashingEncoder enc(16);
  std::mt19937_64 rng(20);
  gan::Generator g({16, 5, 30, 3});
  g.init(rng);
  std::vector<corpus::Sentence> hist = {{0, "my hens sneeze", corpus::Origin::Scenario},
                                        {1, "what now ?", corpus::Origin::UserQuestion}};
  auto expected = gan::threshold_indices(g.forward(enc.encode_tokens("my hens sneeze what now ?")));
  EXPECT_EQ(gan::predict_rules(hist, enc, g), expected);
  EXPECT_THROW(gan::predict_rules({}, enc, g), Error);
}

TEST(Jaccard, Basics) {
  EXPECT_DOUBLE_EQ(gan::jaccard({1, 2}, {1, 2}), 1.0);
  EXPECT_DOUBLE_EQ(gan::jaccard({1, 2}, {2, 3}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(gan::jaccard({}, {}), 1.0);
}

TEST(GanTrain, FitsSyntheticCorpusWithLargerGeneratorStep) {
  gan::TrainConfig cfg;
  cfg.lr_generator = 1e-2;
  cfg.smooth_coeff = 0.0;
  auto r = oracle::run_synthetic_recovery(cfg, 1);
  EXPECT_EQ(r.steps, 2000);
  EXPECT_GE(r.mean_jaccard, 0.9);
}

}  // namespace
