#include <gtest/gtest.h>

#include <cmath>

#include "dpp/net.hpp"
#include "test_util.hpp"

using namespace dpp;

namespace {

Vec random_vec(Rng& rng, Eigen::Index n, double sd = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal(0.0, sd);
  return v;
}

// True when some pre-activation sits within eps of the ReLU kink.
bool near_kink(const ForwardCache& c, double eps) {
  for (std::size_t k = 0; k + 1 < c.pre.size(); ++k) {
    if ((c.pre[k].array().abs() < eps).any()) return true;
  }
  return false;
}

}  // namespace

TEST(DenseNet, InitShapesAndDeterminism) {
  Rng a(1);
  Rng b(1);
  const auto n = init_net({6, 5, 3}, a);
  EXPECT_EQ(n, init_net({6, 5, 3}, b));
  EXPECT_EQ(n.input_size(), 6u);
  EXPECT_EQ(n.output_size(), 3u);
  EXPECT_EQ(n.parameter_count(), 6u * 5 + 5 + 5 * 3 + 3);
  EXPECT_THROW(init_net({3}, a), std::invalid_argument);
  EXPECT_THROW(init_net({3, 0}, a), std::invalid_argument);
  EXPECT_THROW(forward(n, Vec::Zero(4)), std::invalid_argument);
}

TEST(DenseNet, ZeroNetOutputsZero) {
  Rng rng(2);
  auto n = init_net({4, 8, 2}, rng);
  n.set_zero();
  EXPECT_EQ(forward(n, random_vec(rng, 4)), Vec::Zero(2));
}

TEST(DenseNet, BackwardMatchesCentralDifferences) {
  Rng rng(31);
  int checked = 0;
  while (checked < 100) {
    const int in = 2 + static_cast<int>(rng.below(5));
    const std::vector<int> sizes{in, 3 + static_cast<int>(rng.below(5)), 2 + static_cast<int>(rng.below(4)),
                                 1 + static_cast<int>(rng.below(3))};
    auto net = init_net(sizes, rng);
    for (auto& l : net.layers) l.bias = random_vec(rng, l.bias.size(), 0.1);
    const Vec x = random_vec(rng, in);
    const Vec dy = random_vec(rng, sizes.back());
    ForwardCache cache;
    forward(net, x, &cache);
    if (near_kink(cache, 1e-4)) continue;
    auto grads = net.zeros_like();
    const Vec dx = backward(net, cache, dy, grads);

    auto objective = [&](const DenseNet& n, const Vec& xi) { return dy.dot(forward(n, xi)); };
    const double h = 1e-6;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
      for (Eigen::Index i = 0; i < net.layers[k].weight.size(); ++i) {
        auto p = net;
        auto m = net;
        p.layers[k].weight.data()[i] += h;
        m.layers[k].weight.data()[i] -= h;
        const double fd = (objective(p, x) - objective(m, x)) / (2 * h);
        ASSERT_LT(testutil::rel_err(grads.layers[k].weight.data()[i], fd), 1e-4);
      }
      for (Eigen::Index i = 0; i < net.layers[k].bias.size(); ++i) {
        auto p = net;
        auto m = net;
        p.layers[k].bias[i] += h;
        m.layers[k].bias[i] -= h;
        const double fd = (objective(p, x) - objective(m, x)) / (2 * h);
        ASSERT_LT(testutil::rel_err(grads.layers[k].bias[i], fd), 1e-4);
      }
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Vec xp = x;
      Vec xm = x;
      xp[i] += h;
      xm[i] -= h;
      ASSERT_LT(testutil::rel_err(dx[i], (objective(net, xp) - objective(net, xm)) / (2 * h)), 1e-4);
    }
    ++checked;
  }
}

TEST(DenseNet, BackwardAccumulatesWithScale) {
  Rng rng(4);
  const auto net = init_net({3, 4, 2}, rng);
  ForwardCache c;
  forward(net, random_vec(rng, 3), &c);
  const Vec dy = random_vec(rng, 2);
  auto once = net.zeros_like();
  backward(net, c, dy, once, 2.0);
  auto twice = net.zeros_like();
  backward(net, c, dy, twice);
  backward(net, c, dy, twice);
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    EXPECT_TRUE(once.layers[k].weight.isApprox(twice.layers[k].weight, 1e-14));
  }
}

TEST(SoftmaxCrossEntropy, ValuesAndGradient) {
  const Vec p = softmax(Vec::Zero(5));
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p[i], 0.2);
  EXPECT_NEAR(softmax_cross_entropy(Vec::Zero(5), 2).loss, std::log(5.0), 1e-15);
  Vec big(3);
  big << 1000.0, 0.0, -1000.0;
  EXPECT_NEAR(softmax_cross_entropy(big, 0).loss, 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(softmax_cross_entropy(big, 2).loss));
  EXPECT_THROW(softmax_cross_entropy(big, 3), std::invalid_argument);

  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.below(8));
    const Vec z = random_vec(rng, n, 2.0);
    const int target = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    EXPECT_NEAR(softmax(z).sum(), 1.0, 1e-12);
    const auto lg = softmax_cross_entropy(z, target);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vec zp = z;
      Vec zm = z;
      zp[i] += 1e-6;
      zm[i] -= 1e-6;
      const double fd =
          (softmax_cross_entropy(zp, target).loss - softmax_cross_entropy(zm, target).loss) / 2e-6;
      ASSERT_LT(testutil::rel_err(lg.grad[i], fd), 1e-4);
    }
  }
}

TEST(SmoothL1, ValuesAndGradient) {
  Vec p(3);
  Vec t(3);
  p << 0.0, 1.0, -2.0;
  t << 0.05, 0.0, 0.0;
  // |e| = 0.05 < beta=0.1: 0.5 * 0.0025 / 0.1; 1 - 0.05; 2 - 0.05
  EXPECT_NEAR(smooth_l1(p, t, 0.1).loss, 0.0125 + 0.95 + 1.95, 1e-15);
  EXPECT_NEAR(smooth_l1(p, t, 0.0).loss, 3.05, 1e-15);
  EXPECT_THROW(smooth_l1(p, t, -1.0), std::invalid_argument);

  Rng rng(9);
  int checked = 0;
  while (checked < 100) {
    const Vec a = random_vec(rng, 4);
    const Vec b = random_vec(rng, 4);
    const double beta = rng.bernoulli(0.5) ? 0.0 : rng.uniform(0.05, 1.0);
    const Vec e = a - b;
    if ((e.array().abs() < 1e-4).any() || ((e.array().abs() - beta).abs() < 1e-4).any()) continue;
    const auto lg = smooth_l1(a, b, beta);
    for (Eigen::Index i = 0; i < 4; ++i) {
      Vec ap = a;
      Vec am = a;
      ap[i] += 1e-6;
      am[i] -= 1e-6;
      const double fd = (smooth_l1(ap, b, beta).loss - smooth_l1(am, b, beta).loss) / 2e-6;
      ASSERT_LT(testutil::rel_err(lg.grad[i], fd), 1e-4);
    }
    ++checked;
  }
}

TEST(Sgd, MomentumAndWeightDecayArithmetic) {
  DenseNet n;
  n.layers.push_back({Mat::Constant(1, 1, 2.0), Vec::Constant(1, 1.0)});
  auto g = n.zeros_like();
  g.layers[0].weight(0, 0) = 0.5;
  g.layers[0].bias[0] = -1.0;
  OptimState s(n, {0.1, 0.9, 0.01});
  sgd_step(n, g, s);
  // v = 0.5 + 0.01 * 2 = 0.52; w = 2 - 0.052
  EXPECT_NEAR(n.layers[0].weight(0, 0), 1.948, 1e-15);
  EXPECT_NEAR(n.layers[0].bias[0], 1.0 - 0.1 * (-1.0 + 0.01), 1e-15);
  sgd_step(n, g, s);
  // v = 0.9 * 0.52 + 0.5 + 0.01 * 1.948
  EXPECT_NEAR(n.layers[0].weight(0, 0), 1.948 - 0.1 * (0.468 + 0.5 + 0.01948), 1e-14);
}

TEST(Sgd, ZeroLearningRateLeavesParametersAndRejectsNonFinite) {
  Rng rng(3);
  auto n = init_net({3, 3, 2}, rng);
  const auto before = n;
  auto g = n.zeros_like();
  g.layers[0].weight(0, 0) = 5.0;
  OptimState s(n, {0.0, 0.9, 1e-4});
  sgd_step(n, g, s);
  EXPECT_EQ(n, before);
  g.layers[1].bias[0] = NAN;
  EXPECT_THROW(sgd_step(n, g, s), DivergenceError);
}

TEST(Ema, ConvergesToConstantStudent) {
  DenseNet teacher;
  teacher.layers.push_back({Mat::Constant(2, 2, 0.0), Vec::Zero(2)});
  DenseNet student;
  student.layers.push_back({Mat::Constant(2, 2, 1.5), Vec::Constant(2, -3.0)});
  for (int i = 0; i < 1000; ++i) ema_update(teacher, student, 0.99);
  // Remaining gap is 0.99^1000 ~ 4.3e-5 of the initial one.
  const double gap = (teacher.layers[0].weight - student.layers[0].weight).norm() /
                     student.layers[0].weight.norm();
  EXPECT_LE(gap, 1e-4);
  EXPECT_NEAR(gap, std::pow(0.99, 1000), 1e-9);
  EXPECT_THROW(ema_update(teacher, student, 1.5), std::invalid_argument);
}

TEST(Checkpoint, JsonRoundTripIsExact) {
  Rng rng(12);
  const auto n = init_net({7, 5, 3}, rng);
  const auto back = net_from_json(nlohmann::json::parse(net_to_json(n).dump()));
  EXPECT_EQ(back, n);
  const Vec x = random_vec(rng, 7);
  EXPECT_EQ(forward(back, x), forward(n, x));
}

TEST(Checkpoint, RejectsMalformedDocuments) {
  Rng rng(12);
  auto j = net_to_json(init_net({3, 2}, rng));
  auto wrong = j;
  wrong["version"] = 7;
  EXPECT_THROW(net_from_json(wrong), std::invalid_argument);
  auto sizes = j;
  sizes["layers"][0]["weights"].erase(0);
  EXPECT_THROW(net_from_json(sizes), std::invalid_argument);
  auto chain = net_to_json(init_net({3, 2, 2}, rng));
  chain["layers"][1]["in"] = 3;
  chain["layers"][1]["weights"].push_back(0.0);
  chain["layers"][1]["weights"].push_back(0.0);
  EXPECT_THROW(net_from_json(chain), std::invalid_argument);
}
