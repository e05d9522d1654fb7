#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <unordered_set>

#include "eyeseg/gradcheck.hpp"
#include "eyeseg/ops.hpp"

using namespace eyeseg;

TEST(Tensor, ShapeAndValues) {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.ndim(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_DOUBLE_EQ(t[4], 5.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Tensor, CloneIsDeepAndDetachDropsHistory) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = scale(x, 2.0);
  Tensor d = y.detach();
  EXPECT_TRUE(d.is_leaf());
  EXPECT_FALSE(d.requires_grad());
  Tensor c = x.clone();
  c.data()[0] = 9.0;
  EXPECT_DOUBLE_EQ(x[0], 1.0);
  EXPECT_TRUE(c.requires_grad());
  EXPECT_THROW(y.set_requires_grad(false), StateError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({2, 2}, {3, -1, 4, 0.5}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 3.0)), StateError);
}

TEST(Backward, DetachedLossIsRejected) {
  Tensor x = Tensor::from({2}, {1, 2}, false);
  EXPECT_THROW(backward(sum(x)), StateError);
  Tensor y = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(sum(y.detach())), StateError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    y = sum(mul(x, x));
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  // A diamond: x feeds two branches that rejoin, so naive recursion would
  // visit x's consumers twice.
  Tensor x = Tensor::from({1, 2, 3, 3}, std::vector<double>(18, 0.3), true);
  Tensor w = Tensor::from({2, 2, 1, 1}, {1, 0.5, -0.25, 2}, true);
  Tensor a = pointwise_conv2d(x, w);
  Tensor b = sigmoid(x);
  Tensor loss = sum(mul(add(a, b), add(a, x)));
  Tape tape(loss);
  std::unordered_set<const detail::Node*> placed;
  for (const detail::Node* n : tape.nodes()) {
    for (const auto& in : n->inputs)
      if (in->requires_grad) {
        EXPECT_TRUE(placed.count(in.get())) << "input after consumer";
      }
    EXPECT_TRUE(placed.insert(n).second) << "node recorded twice";
  }
  tape.run();
  for (const detail::Node* n : tape.nodes()) EXPECT_EQ(n->backward_visits, 1u);
  EXPECT_EQ(tape.nodes().back(), loss.node_ptr().get());
}

TEST(Tensor, NonFiniteInputToConvIsAnError) {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, NAN, 0, 0});
  EXPECT_THROW(conv2d(x, Tensor::ones({1, 1, 1, 1})), NonFiniteError);
  EXPECT_FALSE(all_finite(std::vector<double>{1.0, INFINITY}));
}

// conv -> bn -> relu -> pool composite checked against central differences.
TEST(Backward, CompositeMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = detail::random_tensor({2, 2, 5, 5}, rng);
    Tensor w = detail::random_tensor({3, 2, 3, 3}, rng);
    Tensor g = detail::random_tensor({3}, rng, 0.5, 1.5);
    Tensor b = detail::random_tensor({3}, rng);
    Tensor mix = detail::random_tensor({2, 3}, rng, -1, 1, false);
    auto stats = BatchNormStats::fresh(3);
    auto loss = [=] {
      Tensor h = relu(batch_norm(conv2d(x, w, 1, 1), g, b, stats, BnMode::train));
      return sum(mul(global_avg_pool(h), mix));
    };
    const auto r = check_gradients("composite", loss, {x, w, g, b}, rng, {.probes = 40});
    EXPECT_TRUE(r.passed(1e-4)) << "seed " << seed << " err " << r.max_rel_error;
  }
}
