#include <gtest/gtest.h>

#include <random>
#include <set>

#include "eyeseg/gradcheck.hpp"
#include "eyeseg/model.hpp"

using namespace eyeseg;

namespace {

std::set<std::string> names_of(const ParameterStore& s) {
  const auto v = s.names();
  return {v.begin(), v.end()};
}

Tensor random_images(std::size_t b, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return detail::random_tensor({b, 1, h, w}, rng, 0.0, 1.0, false);
}

void fill(Tensor t, double v) { std::fill(t.data().begin(), t.data().end(), v); }

}  // namespace

TEST(Model, ParameterBudget) {
  const std::size_t n3 = param_count(build(ModelConfig::for_variant(Variant::N3), 0));
  const std::size_t n2 = param_count(build(ModelConfig::for_variant(Variant::N2), 0));
  const std::size_t n1 = param_count(build(ModelConfig::for_variant(Variant::N1), 0));
  EXPECT_EQ(n3, 106776u);
  EXPECT_LE(std::abs(static_cast<double>(n3) - 104728.0), 0.05 * 104728.0);
  EXPECT_EQ(n3 - n2, 8u);
  EXPECT_EQ(n3 - n1, 264u);
}

TEST(Model, CountIsInputSizeIndependent) {
  EXPECT_EQ(param_count(build(ModelConfig::for_variant(Variant::N3, 64, 40), 0)),
            param_count(build(ModelConfig::for_variant(Variant::N3), 0)));
}

TEST(Model, StatisticsExcludedFromCount) {
  const ParameterStore s = build(ModelConfig{}, 0);
  std::size_t all = 0, stats = 0;
  for (const auto& e : s.entries()) {
    all += e.tensor.size();
    if (e.kind == ParamKind::statistic) {
      stats += e.tensor.size();
      EXPECT_NE(e.name.find(".stat."), std::string::npos);
      EXPECT_FALSE(e.tensor.requires_grad());
    }
  }
  EXPECT_EQ(param_count(s), all - stats);
}

TEST(Model, VariantContainment) {
  const auto n3 = names_of(build(ModelConfig::for_variant(Variant::N3), 0));
  const auto n2 = names_of(build(ModelConfig::for_variant(Variant::N2), 0));
  const auto n1 = names_of(build(ModelConfig::for_variant(Variant::N1), 0));
  std::set<std::string> se, d2;
  for (const auto& n : n3) {
    if (n.rfind("decoder.d1.se.", 0) == 0) se.insert(n);
    if (n.rfind("decoder.d2.", 0) == 0) d2.insert(n);
  }
  EXPECT_EQ(se.size(), 2u);
  EXPECT_FALSE(d2.empty());
  std::set<std::string> expect2, expect1;
  std::set_difference(n3.begin(), n3.end(), se.begin(), se.end(), std::inserter(expect2, expect2.end()));
  std::set_difference(n3.begin(), n3.end(), d2.begin(), d2.end(), std::inserter(expect1, expect1.end()));
  EXPECT_EQ(n2, expect2);
  EXPECT_EQ(n1, expect1);
}

TEST(Model, NamingScheme) {
  const auto n = names_of(build(ModelConfig{}, 0));
  for (const char* name : {"encoder.stem.conv.weight", "encoder.stem.bn.weight", "encoder.block1.0.dw.weight",
                           "encoder.block2.1.dw.weight", "encoder.block3.3.project.weight",
                           "encoder.head.conv.weight", "decoder.shared.pw.weight", "decoder.d1.2.pw_bn.bias",
                           "decoder.d1.se.fc1.weight", "decoder.d2.pw.weight", "decoder.d2.bn.stat.var"}) {
    EXPECT_TRUE(n.count(name)) << name;
  }
  EXPECT_FALSE(n.count("encoder.block1.0.expand.weight"));
  EXPECT_TRUE(n.count("encoder.block2.0.expand.weight"));
}

TEST(Model, InitializationIsSeeded) {
  const auto a = build(ModelConfig{}, 3), b = build(ModelConfig{}, 3), c = build(ModelConfig{}, 4);
  EXPECT_EQ(a.get("decoder.shared.pw.weight").to_vector(), b.get("decoder.shared.pw.weight").to_vector());
  EXPECT_NE(a.get("decoder.shared.pw.weight").to_vector(), c.get("decoder.shared.pw.weight").to_vector());
}

TEST(Model, ShapeLadderAt640x400) {
  const ModelConfig cfg{};
  const EyeNet net(cfg, build(cfg, 1));
  ForwardTrace trace;
  NoGradGuard g;
  const Tensor y = net.forward(random_images(1, 640, 400, 2), BnMode::train, &trace);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 640, 400}));
  std::map<std::string, Shape> at(trace.begin(), trace.end());
  EXPECT_EQ(at["encoder.stem"], (Shape{1, 32, 320, 200}));
  EXPECT_EQ(at["encoder.block1"], (Shape{1, 16, 320, 200}));
  EXPECT_EQ(at["encoder.block2"], (Shape{1, 24, 160, 100}));
  EXPECT_EQ(at["encoder.block3"], (Shape{1, 32, 80, 50}));
  EXPECT_EQ(at["encoder.head"], (Shape{1, 64, 40, 25}));
  EXPECT_EQ(at["decoder.upsample"], (Shape{1, 64, 160, 100}));
  EXPECT_EQ(at["decoder.d1"], (Shape{1, 4, 160, 100}));
  EXPECT_EQ(at["decoder.d2"], (Shape{1, 4, 160, 100}));
}

TEST(Model, ScaledConfigs) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{64, 40}, {32, 16}, {64, 64}, {128, 80}}) {
    const auto cfg = ModelConfig::for_variant(Variant::N3, h, w);
    const EyeNet net(cfg, build(cfg, 1));
    NoGradGuard g;
    ForwardTrace trace;
    EXPECT_EQ(net.forward(random_images(2, h, w, 3), BnMode::train, &trace).shape(), (Shape{2, 4, h, w}));
    if (h % 16 == 0 && w % 16 == 0) {
      std::map<std::string, Shape> at(trace.begin(), trace.end());
      EXPECT_EQ(at["encoder.block3"], (Shape{2, 32, h / 8, w / 8}));
      EXPECT_EQ(at["encoder.head"], (Shape{2, 64, h / 16, w / 16}));
    }
  }
}

TEST(Model, InputErrors) {
  const auto cfg = ModelConfig::for_variant(Variant::N3, 32, 16);
  const EyeNet net(cfg, build(cfg, 1));
  EXPECT_THROW(net.forward(Tensor::ones({1, 2, 32, 16}), BnMode::train), ShapeError);
  EXPECT_THROW(net.forward(Tensor::ones({1, 32, 16}), BnMode::train), ShapeError);
  EXPECT_THROW(net.forward(Tensor::ones({1, 1, 8, 16}), BnMode::train), ShapeError);
  Tensor bad = random_images(1, 32, 16, 1);
  bad.data()[5] = NAN;
  EXPECT_THROW(net.forward(bad, BnMode::train), NonFiniteError);
}

TEST(Model, NonFiniteActivationNamesLayer) {
  const auto cfg = ModelConfig::for_variant(Variant::N3, 32, 16);
  ParameterStore s = build(cfg, 1);
  fill(s.get("decoder.shared.pw_bn.bias"), INFINITY);
  const EyeNet net(cfg, s);
  try {
    net.forward(random_images(2, 32, 16, 1), BnMode::train);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.shared"), std::string::npos) << e.what();
  }
}

TEST(Model, EvalForwardIsDeterministic) {
  const auto cfg = ModelConfig::for_variant(Variant::N3, 32, 16);
  ParameterStore s = build(cfg, 1);
  const EyeNet net(cfg, s);
  const Tensor x = random_images(2, 32, 16, 5);
  {
    NoGradGuard g;
    net.forward(x, BnMode::train);  // populate running statistics
  }
  const Tensor a = net.forward(x, BnMode::eval), b = net.forward(x, BnMode::eval);
  EXPECT_EQ(a.to_vector(), b.to_vector());
}

TEST(Model, EvalBeforeStatisticsIsAnError) {
  const auto cfg = ModelConfig::for_variant(Variant::N3, 32, 16);
  const EyeNet net(cfg, build(cfg, 1));
  EXPECT_THROW(net.forward(random_images(1, 32, 16, 1), BnMode::eval), StateError);
}

TEST(Model, SoftmaxOfLogitsSumsToOne) {
  const auto cfg = ModelConfig::for_variant(Variant::N2, 32, 16);
  const EyeNet net(cfg, build(cfg, 2));
  const Tensor p = softmax_channels(net.forward(random_images(2, 32, 16, 1), BnMode::train));
  const std::size_t HW = 32 * 16;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += p[(b * 4 + c) * HW + i];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

// N3 with a silenced D2 stream and saturated SE gates computes exactly N1.
TEST(Model, WeightSurgeryReducesN3ToN1) {
  const auto c3 = ModelConfig::for_variant(Variant::N3, 32, 16);
  const auto c1 = ModelConfig::for_variant(Variant::N1, 32, 16);
  ParameterStore s3 = build(c3, 9);
  ParameterStore s1 = build(c1, 0);
  // Large positive D1 output makes the pooled SE input positive; big unit
  // weights then drive sigmoid to exactly 1.0 in double.
  fill(s3.get("decoder.d1.2.pw_bn.bias"), 100.0);
  fill(s3.get("decoder.d1.se.fc1.weight"), 1.0);
  fill(s3.get("decoder.d1.se.fc2.weight"), 1.0);
  fill(s3.get("decoder.d2.pw.weight"), 0.0);
  for (const auto& e : s1.entries()) {
    Tensor dst = e.tensor;
    const auto src = s3.get(e.name).to_vector();
    std::copy(src.begin(), src.end(), dst.data().begin());
  }
  const Tensor x = random_images(2, 32, 16, 4);
  const Tensor y3 = EyeNet(c3, s3).forward(x, BnMode::train);
  const Tensor y1 = EyeNet(c1, s1).forward(x, BnMode::train);
  EXPECT_EQ(y3.to_vector(), y1.to_vector());
}

TEST(Model, StoreValidationListsOffenders) {
  const auto cfg = ModelConfig::for_variant(Variant::N3, 32, 16);
  const ParameterStore n1 = build(ModelConfig::for_variant(Variant::N1, 32, 16), 0);
  try {
    EyeNet net(cfg, n1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("missing decoder.d2.pw.weight"), std::string::npos) << e.what();
  }
  EXPECT_EQ(infer_variant(n1), Variant::N1);
  EXPECT_EQ(infer_variant(build(ModelConfig::for_variant(Variant::N2), 0)), Variant::N2);
  EXPECT_EQ(infer_variant(build(ModelConfig::for_variant(Variant::N3), 0)), Variant::N3);
}

TEST(PredictMask, ArgmaxAndTies) {
  Tensor logits = Tensor::zeros({1, 4, 2, 3});
  EXPECT_EQ(predict_mask(logits).labels, std::vector<std::uint8_t>(6, background));
  for (std::size_t i = 0; i < 6; ++i) logits.data()[3 * 6 + i] = 1.0;
  EXPECT_EQ(predict_mask(logits).labels, std::vector<std::uint8_t>(6, pupil));
  logits.data()[2 * 6 + 0] = 1.0;  // tie between iris and pupil
  EXPECT_EQ(predict_mask(logits).labels[0], iris);
}

TEST(PredictMask, MatchesExhaustiveComparison) {
  std::mt19937_64 rng(3);
  const Tensor logits = detail::random_tensor({3, 4, 5, 6}, rng, -2, 2, false);
  const auto masks = predict_masks(logits);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 30; ++i) {
      const std::uint8_t got = masks[b].labels[i];
      for (std::size_t c = 0; c < 4; ++c) {
        const double vc = logits[(b * 4 + c) * 30 + i], vg = logits[(b * 4 + got) * 30 + i];
        EXPECT_TRUE(vg > vc || (vg == vc && got <= c));
      }
    }
}

TEST(Model, NetworkGradientsAtScaledConfig) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (Variant v : {Variant::N1, Variant::N2, Variant::N3}) {
      const auto r = check_network_gradients(seed, v);
      EXPECT_TRUE(r.passed(1e-4)) << r.op << " seed " << seed << " err " << r.max_rel_error;
    }
  }
}
