#include <gtest/gtest.h>

#include <cmath>

#include "dpp/polish.hpp"
#include "test_util.hpp"

using namespace dpp;

namespace {

FeatureMap random_map(Rng& rng, int c, int h, int w) {
  FeatureMap m(c, h, w);
  for (auto& v : m.values) v = rng.normal();
  return m;
}

FeatureMap scene_map(int category, const BBox& box) {
  Scene s;
  s.width = 64;
  s.height = 64;
  s.objects.push_back({category, box});
  FeatureConfig f;
  f.feat_noise = 0.0;
  Rng rng(1);
  return render_features(s, f, rng);
}

}  // namespace

TEST(ContextBoxes, WorkedExamples) {
  const BBox b{0, 0, 3, 4};
  for (const auto& c : context_boxes(b, 0.0)) EXPECT_EQ(c, b);
  const auto ctx = context_boxes(b, 0.06);
  const double s = 0.3 / std::sqrt(2.0);
  EXPECT_NEAR(s, 0.21213, 1e-5);
  EXPECT_NEAR(ctx[1].x1, s, 1e-15);
  EXPECT_NEAR(ctx[1].y1, s, 1e-15);
  EXPECT_NEAR(ctx[1].x2, 3 + s, 1e-15);
  EXPECT_NEAR(ctx[1].y2, 4 + s, 1e-15);
  EXPECT_NEAR(ctx[2].y1, -s, 1e-15);  // (+, -)
  EXPECT_NEAR(ctx[3].x1, -s, 1e-15);  // (-, +)
  EXPECT_NEAR(ctx[4].x1, -s, 1e-15);  // (-, -)
  EXPECT_NEAR(ctx[4].y1, -s, 1e-15);
  EXPECT_NEAR(ctx[5].x1, -0.18, 1e-12);
  EXPECT_NEAR(ctx[5].y1, -0.24, 1e-12);
  EXPECT_NEAR(ctx[5].x2, 3.18, 1e-12);
  EXPECT_NEAR(ctx[5].y2, 4.24, 1e-12);
  EXPECT_NEAR(ctx[6].width(), 3 * 1.24, 1e-12);
  EXPECT_THROW(context_boxes(b, -0.1), std::invalid_argument);
}

TEST(ContextBoxes, InvariantsOnRandomBoxes) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const BBox b = testutil::random_box(rng, 50.0);
    const double gamma = rng.uniform(0.01, 0.5);
    const auto ctx = context_boxes(b, gamma);
    ASSERT_EQ(ctx.size(), 7u);
    EXPECT_EQ(ctx[0], b);
    for (int k = 1; k <= 4; ++k) {
      ASSERT_NEAR(ctx[k].width(), b.width(), 1e-9);
      ASSERT_NEAR(ctx[k].height(), b.height(), 1e-9);
      ASSERT_NEAR(std::hypot(ctx[k].cx() - b.cx(), ctx[k].cy() - b.cy()), gamma * b.diagonal(), 1e-9);
    }
    for (int k = 5; k <= 6; ++k) {
      ASSERT_LT(ctx[k].x1, b.x1);
      ASSERT_LT(ctx[k].y1, b.y1);
      ASSERT_GT(ctx[k].x2, b.x2);
      ASSERT_GT(ctx[k].y2, b.y2);
      ASSERT_NEAR(ctx[k].cx(), b.cx(), 1e-9);
      ASSERT_NEAR(ctx[k].cy(), b.cy(), 1e-9);
    }
  }
}

TEST(PolishCategory, ZeroNetIsUniformAndPicksClassZero) {
  Rng rng(3);
  auto p = make_category_polisher(5, 8, 4, 16, rng);
  p.net.set_zero();
  const auto map = random_map(rng, 8, 32, 32);
  const auto pred = polish_category(p, map, {2, 2, 20, 20});
  EXPECT_EQ(pred.label, 0);
  for (Eigen::Index i = 0; i < 6; ++i) EXPECT_NEAR(pred.probs[i], 1.0 / 6.0, 1e-15);
  EXPECT_THROW(polish_category(p, map, {2, 2, 2, 20}), InvalidBoxError);
}

TEST(PolishCategory, ProbabilitiesSumToOne) {
  Rng rng(4);
  const auto p = make_category_polisher(8, 8, 4, 32, rng);
  const auto map = random_map(rng, 8, 32, 32);
  for (int i = 0; i < 100; ++i) {
    const auto pred = polish_category(p, map, testutil::random_box(rng, 30.0));
    EXPECT_NEAR(pred.probs.sum(), 1.0, 1e-9);
    EXPECT_EQ(pred.probs.size(), 9);
  }
}

TEST(PolishBox, UntrainedPolisherIsIdentityAndOutputStaysOnMap) {
  Rng rng(5);
  const auto fresh = make_box_polisher(8, 4, 0.25, {16, 16, 8}, rng);
  const auto map = random_map(rng, 8, 40, 40);
  const BBox b{3.5, 4, 20, 31};
  EXPECT_EQ(polish_box(fresh, map, b), b);
  EXPECT_EQ(polish_box(fresh, map, {-5, -5, 10, 10}), (BBox{0, 0, 10, 10}));

  auto wild = fresh;
  Rng init(6);
  wild.net = init_net({7 * 4 * 4 * 8, 16, 16, 8, 4}, init);
  for (auto& l : wild.net.layers) l.weight *= 3.0;
  for (int i = 0; i < 200; ++i) {
    const BBox out = polish_box(wild, map, testutil::random_box(rng, 45.0));
    ASSERT_TRUE(out.valid());
    ASSERT_GE(out.x1, 0.0);
    ASSERT_GE(out.y1, 0.0);
    ASSERT_LE(out.x2, 40.0);
    ASSERT_LE(out.y2, 40.0);
  }
}

TEST(BoxLoss, ZeroNetOnTargetIsZeroForBothKinds) {
  Rng rng(7);
  const auto p = make_box_polisher(8, 2, 0.25, {8, 8, 8}, rng);
  const auto map = random_map(rng, 8, 32, 32);
  const RegressionExample ex{{{4, 4, 20, 16}, {4, 4, 20, 16}}, &map};
  auto g = p.net.zeros_like();
  EXPECT_NEAR(box_loss_grad(p, std::span(&ex, 1), BoxLossKind::giou, g), 0.0, 1e-15);
  EXPECT_NEAR(box_loss_grad(p, std::span(&ex, 1), BoxLossKind::l1, g), 0.0, 1e-15);
  EXPECT_EQ(box_loss_from_string("giou"), BoxLossKind::giou);
  EXPECT_EQ(box_loss_from_string("l1"), BoxLossKind::l1);
  EXPECT_THROW(box_loss_from_string("l2"), std::invalid_argument);
}

// Loss with respect to every network parameter, through features, decode and
// GIoU, against central differences.
TEST(BoxLoss, EndToEndGradientMatchesFiniteDifferences) {
  Rng rng(8);
  const auto map = random_map(rng, 3, 24, 24);
  int checked = 0;
  while (checked < 100) {
    BoxPolisher p;
    p.resolution = 2;
    p.gamma = 0.2;
    p.net = init_net({7 * 2 * 2 * 3, 5, 4, 3, 4}, rng);
    for (auto& l : p.net.layers) l.weight *= 0.3;
    const BBox input = testutil::random_box(rng, 16.0);
    const BBox target = perturb_box(input, 0.3, rng);
    const RegressionExample ex{{input, target}, &map};
    const auto batch = std::span(&ex, 1);

    ForwardCache cache;
    const Vec out = forward(p.net, box_features(p, map, input), &cache);
    const auto dec = decode_delta_with_jacobian(input, to_delta(out));
    bool kink = dec.clamped || testutil::near_branch_tie(dec.box, target, 1e-3);
    for (std::size_t k = 0; k + 1 < cache.pre.size(); ++k) kink |= (cache.pre[k].array().abs() < 1e-5).any();
    if (kink) continue;

    auto grads = p.net.zeros_like();
    box_loss_grad(p, batch, BoxLossKind::giou, grads);
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t k = 0; k < p.net.layers.size(); ++k) {
      auto& w = p.net.layers[k].weight;
      for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double keep = w.data()[i];
        auto scratch = p.net.zeros_like();
        w.data()[i] = keep + h;
        const double lp = box_loss_grad(p, batch, BoxLossKind::giou, scratch);
        w.data()[i] = keep - h;
        const double lm = box_loss_grad(p, batch, BoxLossKind::giou, scratch);
        w.data()[i] = keep;
        worst = std::max(worst, testutil::rel_err(grads.layers[k].weight.data()[i], (lp - lm) / (2 * h)));
      }
    }
    ASSERT_LT(worst, 1e-3) << "case " << checked;
    ++checked;
  }
}

TEST(TrainCategory, SingleSampleLossNonIncreasing) {
  Rng rng(9);
  auto p = make_category_polisher(4, 8, 4, 32, rng);
  const auto map = scene_map(2, {10, 10, 30, 28});
  const CategoryExample ex{{{11, 9, 29, 27}, 2}, &map};
  OptimState opt(p.net, {1e-3, 0.0, 0.0});
  const double first = train_category_step(p, std::span(&ex, 1), opt);
  double prev = first;
  for (int i = 1; i < 50; ++i) {
    const double l = train_category_step(p, std::span(&ex, 1), opt);
    ASSERT_LE(l, prev + 1e-12) << "step " << i;
    prev = l;
  }
  EXPECT_LT(prev, first);
}

TEST(TrainCategory, DuplicatedBatchAndZeroLearningRate) {
  Rng rng(10);
  auto p = make_category_polisher(4, 8, 4, 16, rng);
  const auto map = random_map(rng, 8, 32, 32);
  std::vector<CategoryExample> batch;
  for (int i = 0; i < 5; ++i) {
    batch.push_back({{testutil::random_box(rng, 30.0), static_cast<int>(rng.below(5))}, &map});
  }
  auto doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  auto g1 = p.net.zeros_like();
  auto g2 = p.net.zeros_like();
  EXPECT_NEAR(category_loss_grad(p, batch, g1), category_loss_grad(p, doubled, g2), 1e-12);

  const auto before = p.net;
  OptimState still(p.net, {0.0, 0.9, 1e-4});
  const double l1 = train_category_step(p, batch, still);
  const double l2 = train_category_step(p, batch, still);
  EXPECT_EQ(p.net, before);
  EXPECT_EQ(l1, l2);
  EXPECT_THROW(train_category_step(p, {}, still), std::invalid_argument);
}

TEST(TrainBox, SingleSampleLossNonIncreasingForBothKinds) {
  const auto map = scene_map(1, {12, 14, 40, 36});
  for (auto kind : {BoxLossKind::giou, BoxLossKind::l1}) {
    Rng rng(11);
    auto p = make_box_polisher(8, 4, 0.25, {32, 32, 16}, rng);
    const RegressionExample ex{{{15, 10, 36, 40}, {12, 14, 40, 36}}, &map};
    // Plain gradient descent: momentum can overshoot even at a small rate.
    OptimState opt(p.net, {1e-3, 0.0, 0.0});
    double prev = INFINITY;
    for (int i = 0; i < 50; ++i) {
      const double l = train_box_step(p, std::span(&ex, 1), opt, kind);
      ASSERT_LE(l, prev + 1e-12) << to_string(kind) << " step " << i;
      prev = l;
    }
  }
}

TEST(TrainBox, SingleSampleOverfitReachesHighIou) {
  const auto map = scene_map(1, {12, 14, 40, 36});
  Rng rng(12);
  auto p = make_box_polisher(8, 4, 0.25, {32, 32, 16}, rng);
  const BBox input{15, 10, 36, 40};
  const BBox target{12, 14, 40, 36};
  const RegressionExample ex{{input, target}, &map};
  OptimState opt(p.net, {0.01, 0.9, 0.0});
  int steps = 0;
  while (steps < 500 && iou(polish_box(p, map, input), target) <= 0.95) {
    train_box_step(p, std::span(&ex, 1), opt, BoxLossKind::giou);
    ++steps;
  }
  EXPECT_GT(iou(polish_box(p, map, input), target), 0.95) << "after " << steps << " steps";
  EXPECT_LT(steps, 500);
}

TEST(PolishConfig, Validation) {
  PolishConfig c;
  EXPECT_NO_THROW(c.validate());
  c.box_hidden = {8, 8};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.decay_factor = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.gamma = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ScenePolishSets, ProposalNegativesAvoidEveryObject) {
  Scene s;
  s.width = 64;
  s.height = 64;
  s.objects = {{0, {4, 4, 20, 20}}, {1, {30, 30, 50, 56}}};
  const std::vector<BBox> props{{4, 4, 20, 20}, {30, 31, 50, 56}, {0, 40, 10, 60}, {20, 0, 40, 10}};
  Rng rng(13);
  const auto sets = sample_scene_polish_sets(s, props, PolishLearnConfig{}, 2, rng);
  EXPECT_EQ(sets.regression.size(), 64u);
  for (const auto& c : sets.category) {
    if (c.target != 2) continue;
    for (const auto& o : s.objects) ASSERT_LT(iou(c.box, o.box), 0.5);
  }
}

class SmallSplitTraining : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SceneGenConfig gen;
    gen.max_objects = 1;
    split_ = new DatasetSplit(make_split(120, 0, gen, TeacherOracleConfig{}, 21, 60));
    pair_ = new PolisherPair(make_polishers(PolishConfig{}, gen.num_classes, split_->features.channels, *rng_()));
    PolishConfig cfg;
    cfg.cls_epochs = 6;
    cfg.box_epochs = 6;
    train_polishers_offline(*pair_, cfg, PolishLearnConfig{}, *split_, *rng_(), [](const EpochLosses&) {});
  }
  static void TearDownTestSuite() {
    delete split_;
    delete pair_;
  }
  static Rng* rng_() {
    static Rng r(5);
    return &r;
  }
  static DatasetSplit* split_;
  static PolisherPair* pair_;
};

DatasetSplit* SmallSplitTraining::split_ = nullptr;
PolisherPair* SmallSplitTraining::pair_ = nullptr;

TEST_F(SmallSplitTraining, CategoryPolisherSeparatesHeldOutObjects) {
  long right = 0;
  long total = 0;
  Rng rng(77);
  for (const auto& t : split_->test) {
    const auto& gt = t.reveal_for_evaluation();
    const auto map = split_->render(t);
    for (const auto& o : gt.objects) {
      const BBox b = perturb_box(o.box, 0.1, rng);
      right += polish_category(pair_->category, map, b).label == o.category;
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(right) / total, 0.9);
}

TEST_F(SmallSplitTraining, BoxPolisherImprovesHeldOutNoisyBoxes) {
  double before = 0.0;
  double after = 0.0;
  long n = 0;
  Rng rng(78);
  for (const auto& t : split_->test) {
    const auto& gt = t.reveal_for_evaluation();
    const auto map = split_->render(t);
    for (const auto& o : gt.objects) {
      for (int k = 0; k < 4; ++k) {
        const auto c = clip(perturb_box(o.box, 0.2, rng), map.width, map.height);
        if (c.degenerate) continue;
        before += iou(c.box, o.box);
        after += iou(polish_box(pair_->box, map, c.box), o.box);
        ++n;
      }
    }
  }
  EXPECT_GT(after / n, before / n);
}

TEST_F(SmallSplitTraining, CheckpointReloadGivesIdenticalOutputs) {
  const auto side = nlohmann::json::parse(polisher_sidecar(pair_->category, pair_->box).dump());
  const auto cat = nlohmann::json::parse(net_to_json(pair_->category.net).dump());
  const auto box = nlohmann::json::parse(net_to_json(pair_->box.net).dump());
  const auto back = restore_polishers(side, cat, box);
  const auto& t = split_->test.front();
  const auto map = split_->render(t);
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const BBox b = testutil::random_box(rng, 40.0);
    EXPECT_EQ(polish_box(back.box, map, b), polish_box(pair_->box, map, b));
    EXPECT_EQ(polish_category(back.category, map, b).probs, polish_category(pair_->category, map, b).probs);
  }
  auto bad = side;
  bad["num_classes"] = 3;
  EXPECT_THROW(restore_polishers(bad, cat, box), std::invalid_argument);
}

TEST_F(SmallSplitTraining, DisabledPolishersAreLeftUntouched) {
  auto pair = make_polishers(PolishConfig{}, 8, split_->features.channels, *rng_());
  const auto before_cat = pair.category.net;
  const auto before_box = pair.box.net;
  PolishConfig cfg;
  cfg.enable_category = false;
  cfg.enable_box = false;
  int epochs = 0;
  Rng rng(1);
  train_polishers_offline(pair, cfg, PolishLearnConfig{}, *split_, rng, [&](const EpochLosses&) { ++epochs; });
  EXPECT_EQ(epochs, 0);
  EXPECT_EQ(pair.category.net, before_cat);
  EXPECT_EQ(pair.box.net, before_box);
}
