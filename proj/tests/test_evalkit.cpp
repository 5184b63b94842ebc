#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "npss/evalkit.hpp"
#include "oracles.hpp"

using namespace npss;

namespace {

LabelMap labels(int h, int w, std::vector<int> v) { return LabelMap({h, w}, std::move(v)); }

std::vector<int> vec(const LabelMap& l) { return {l.data().begin(), l.data().end()}; }

Tensor unc_map(int h, int w, std::vector<float> v) { return Tensor({h, w}, std::move(v)); }

NpSegModel<float> tiny_np(int n_class, int samples = 2) {
  TrainConfig tc;
  tc.feature_channels = 8;
  tc.encoder_depth = 1;
  tc.reduced_channels = 4;
  tc.latent_dim = 3;
  tc.context_dim = 3;
  tc.latent_hidden = 6;
  tc.decoder_hidden = 8;
  tc.samples = samples;
  return NpSegModel<float>(tc.model_config(n_class));
}

}  // namespace

TEST(Miou, HandCaseSevenTwelfths) {
  ConfusionMatrix cm(2);
  cm.add(labels(1, 4, {0, 0, 1, 1}), labels(1, 4, {0, 1, 1, 1}));
  EXPECT_EQ(cm.total(), 4);
  EXPECT_NEAR(miou(cm), 7.0 / 12.0, 1e-15);
}

TEST(Miou, PerfectDisjointAndIgnored) {
  const auto t = labels(2, 2, {0, 1, 2, kIgnoreLabel});
  ConfusionMatrix perfect(3);
  perfect.add(t, labels(2, 2, {0, 1, 2, 1}));
  EXPECT_EQ(miou(perfect), 1.0);
  EXPECT_EQ(perfect.total(), 3);
  ConfusionMatrix wrong(3);
  wrong.add(t, labels(2, 2, {1, 2, 0, 0}));
  EXPECT_EQ(miou(wrong), 0.0);
}

TEST(Miou, EmptyIsNumericErrorAndClassesWithoutUnionAreSkipped) {
  ConfusionMatrix cm(3);
  EXPECT_THROW(miou(cm), NumericError);
  cm.add(labels(1, 2, {0, 1}), labels(1, 2, {0, 1}));
  EXPECT_EQ(miou(cm), 1.0);
  EXPECT_THROW(cm.add(labels(1, 1, {5}), labels(1, 1, {0})), DataError);
  EXPECT_THROW(cm.add(labels(1, 2, {0, 0}), labels(2, 1, {0, 0})), ShapeError);
}

TEST(Miou, InvariantUnderClassRelabeling) {
  Rng rng(3);
  LabelMap t({6, 6}), p({6, 6});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_int(0, 3), p[i] = rng.uniform_int(0, 3);
  const std::vector<int> perm{2, 0, 3, 1};
  LabelMap t2 = t, p2 = p;
  for (std::size_t i = 0; i < t.size(); ++i) t2[i] = perm[t[i]], p2[i] = perm[p[i]];
  ConfusionMatrix a(4), b(4);
  a.add(t, p);
  b.add(t2, p2);
  EXPECT_NEAR(miou(a), miou(b), 1e-15);
}

TEST(Miou, MergeEqualsJointAccumulation) {
  ConfusionMatrix a(2), b(2), joint(2);
  a.add(labels(1, 2, {0, 1}), labels(1, 2, {1, 1}));
  b.add(labels(1, 2, {1, 0}), labels(1, 2, {1, 0}));
  joint.add(labels(1, 4, {0, 1, 1, 0}), labels(1, 4, {1, 1, 1, 0}));
  a.merge(b);
  EXPECT_EQ(miou(a), miou(joint));
}

TEST(Pavpu, HandCaseThreeQuarters) {
  // 4x4 with w=2: tiles accurate-certain, inaccurate-uncertain, accurate-uncertain, accurate-certain
  const auto truth = labels(4, 4, {0, 0, 1, 1,
                                   0, 0, 1, 1,
                                   2, 2, 0, 0,
                                   2, 2, 0, 0});
  const auto pred = labels(4, 4, {0, 0, 0, 0,
                                  0, 0, 0, 1,
                                  2, 2, 0, 0,
                                  2, 1, 0, 0});
  const auto unc = unc_map(4, 4, {0.1f, 0.1f, 0.9f, 0.9f,
                                  0.1f, 0.1f, 0.9f, 0.9f,
                                  0.5f, 0.5f, 0.0f, 0.0f,
                                  0.5f, 0.5f, 0.0f, 0.0f});
  const PavpuConfig cfg{2, 0.4, 0.5};
  const auto c = pavpu_counts(pred, truth, unc, cfg);
  EXPECT_EQ(c.patches, 4);
  EXPECT_EQ(c.accurate_certain, 2);
  EXPECT_EQ(c.inaccurate_uncertain, 1);
  EXPECT_EQ(pavpu(pred, truth, unc, cfg), 0.75);
}

TEST(Pavpu, TrivialExtremes) {
  const auto truth = labels(4, 4, std::vector<int>(16, 1));
  const PavpuConfig cfg{2, 0.4, 0.5};
  EXPECT_EQ(pavpu(truth, truth, Tensor({4, 4}, 0.0f), cfg), 1.0);
  EXPECT_EQ(pavpu(truth, truth, Tensor({4, 4}, 1.0f), cfg), 0.0);
  const auto wrong = labels(4, 4, std::vector<int>(16, 0));
  EXPECT_EQ(pavpu(wrong, truth, Tensor({4, 4}, 1.0f), cfg), 1.0);
  EXPECT_EQ(pavpu(wrong, truth, Tensor({4, 4}, 0.0f), cfg), 0.0);
}

TEST(Pavpu, MatchesPatchEnumeratorOnRandomMaps) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    LabelMap pred({8, 8}), truth({8, 8});
    Tensor unc({8, 8});
    for (std::size_t i = 0; i < 64; ++i) {
      truth[i] = rng.bernoulli(0.1) ? kIgnoreLabel : rng.uniform_int(0, 2);
      pred[i] = rng.uniform_int(0, 2);
      unc[i] = static_cast<float>(rng.uniform(0.0, 1.0));
    }
    const PavpuConfig cfg{2, 0.4, 0.5};
    std::vector<double> u(unc.data().begin(), unc.data().end());
    EXPECT_EQ(pavpu(pred, truth, unc, cfg),
              npss::testing::pavpu_oracle(vec(pred), vec(truth), u, 8, 8, 2, 0.4, 0.5, kIgnoreLabel))
        << "trial " << trial;
  }
}

TEST(Pavpu, RaggedEdgesAndAllIgnoredTiles) {
  Rng rng(10);
  LabelMap pred({7, 5}), truth({7, 5});
  Tensor unc({7, 5});
  for (std::size_t i = 0; i < truth.size(); ++i) {
    truth[i] = i < 10 ? kIgnoreLabel : rng.uniform_int(0, 1);
    pred[i] = rng.uniform_int(0, 1);
    unc[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  }
  const PavpuConfig cfg{3, 0.5, 0.5};
  std::vector<double> u(unc.data().begin(), unc.data().end());
  EXPECT_EQ(pavpu(pred, truth, unc, cfg), npss::testing::pavpu_oracle(vec(pred), vec(truth), u, 7, 5, 3, 0.5, 0.5, kIgnoreLabel));
  EXPECT_THROW(pavpu(pred, truth, unc, PavpuConfig{0, 0.4, 0.5}), ConfigError);
}

TEST(Pavpu, NormalizedUncertaintySpansUnitInterval) {
  const auto e = Tensor({1, 2}, std::vector<float>{0.0f, static_cast<float>(std::log(5.0))});
  const auto n = normalize_uncertainty(e, 5);
  EXPECT_EQ(n[0], 0.0f);
  EXPECT_NEAR(n[1], 1.0f, 1e-6);
}

TEST(SlidingWindows, OriginCountsAndFlushLastWindow) {
  EXPECT_EQ(window_origins(8, 4, 2), (std::vector<int>{0, 2, 4}));
  EXPECT_EQ(window_origins(11, 4, 3), (std::vector<int>{0, 3, 6, 7}));
  EXPECT_EQ(window_origins(48, 32, 16), (std::vector<int>{0, 16}));
  EXPECT_EQ(window_origins(32, 32, 16), (std::vector<int>{0}));
  EXPECT_THROW(window_origins(8, 4, 5), ConfigError);
  EXPECT_THROW(window_origins(8, 9, 4), ConfigError);
  EXPECT_THROW(window_origins(8, 4, 0), ConfigError);
}

TEST(SlidingWindows, EveryPixelCoveredAndStitchedOnSimplex) {
  Rng rng(11);
  const auto image = npss::testing::random_tensor<float>({3, 11, 9}, rng, 0, 1);
  Predictor<float> fake = [](const Tensor& img) {
    const int h = img.dim(1), w = img.dim(2);
    Tensor probs({2, 3, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float a = 0.5f + 0.4f * std::sin(static_cast<float>(img.at(0, y, x)) * 7.f);
        for (int k = 0; k < 2; ++k) {
          probs.at(k, 0, y, x) = a * (k ? 0.5f : 0.3f);
          probs.at(k, 1, y, x) = 0.2f;
          probs.at(k, 2, y, x) = 1.f - 0.2f - a * (k ? 0.5f : 0.3f);
        }
      }
    return make_bundle(std::move(probs));
  };
  const auto b = sliding_eval(fake, image, 4, 3);
  EXPECT_EQ(b.avg_probs.shape(), (Shape{3, 11, 9}));
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 9; ++x) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += b.avg_probs.at(c, y, x);
      EXPECT_NEAR(s, 1.0, 1e-5);
      EXPECT_GE(b.uncertainty.at(y, x), 0.0f);
      EXPECT_LE(b.uncertainty.at(y, x), std::log(3.0f) + 1e-5f);
    }
}

TEST(SlidingWindows, SingleWindowIsBitwiseOneForward) {
  auto model = tiny_np(3);
  Rng rng(12);
  const auto image = npss::testing::random_tensor<float>({3, 12, 12}, rng, 0, 1);
  const auto pred = np_predictor(model, 4);
  const auto slide = sliding_eval(pred, image, 12, 6);
  const auto direct = pred(image);
  EXPECT_EQ(slide.avg_probs, direct.avg_probs);
  EXPECT_EQ(slide.per_sample_probs, direct.per_sample_probs);
  EXPECT_EQ(slide.uncertainty, direct.uncertainty);
}

TEST(Evaluate, CropModeScoresCenterRegion) {
  DatasetConfig dc;
  dc.n_labeled = 0, dc.n_unlabeled = 0, dc.n_val = 3, dc.height = 16, dc.width = 16;
  const auto ds = generate(dc);
  Predictor<float> oracle_pred;
  const Sample* current = nullptr;
  oracle_pred = [&](const Tensor& img) {
    // predicts the truth of the centered region of the current sample
    const int h = img.dim(1), w = img.dim(2), y0 = (16 - h) / 2, x0 = (16 - w) / 2;
    Tensor probs({1, ds.n_class(), h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) probs.at(0, current->mask.at(y0 + y, x0 + x), y, x) = 1.0f;
    return make_bundle(std::move(probs));
  };
  for (const auto* s : ds.split(Split::kVal)) {
    current = s;
    const auto r = evaluate<float>(oracle_pred, {s}, ds.n_class(), EvalOptions{EvalMode::kCrop, 8, 4, {}});
    EXPECT_EQ(r.miou, 1.0);
    EXPECT_EQ(r.pavpu, 1.0);
  }
  EXPECT_THROW(evaluate<float>(oracle_pred, {}, ds.n_class(), EvalOptions{}), DataError);
  EXPECT_EQ(parse_eval_mode("slide"), EvalMode::kSlide);
  EXPECT_THROW(parse_eval_mode("tile"), ConfigError);
}

TEST(Benchmark, PassCountsUnderSlidingEval) {
  auto np = tiny_np(3);
  const auto& mc_cfg = np.config();
  DropoutSegModel<float> mc(mc_cfg.encoder, mc_cfg.head.decoder_hidden, 3, 0.5, 1);
  Rng rng(13);
  std::vector<Tensor> images{npss::testing::random_tensor<float>({3, 12, 12}, rng, 0, 1)};
  for (int t : {1, 2, 5}) {
    const auto row = benchmark_uncertainty(np, mc, images, t, BenchmarkOptions{8, 4, 1});
    EXPECT_EQ(row.windows, 4);
    EXPECT_EQ(row.np_decoder_passes, 4);
    EXPECT_EQ(row.np_encoder_passes, 4);
    EXPECT_EQ(row.mc_decoder_passes, 4 * t);
    EXPECT_EQ(row.mc_encoder_passes, 4 * t);
    EXPECT_TRUE(row.low_repeat_warning);
    EXPECT_GT(row.wall_ms_np, 0.0);
  }
  EXPECT_EQ(np.head().config().samples, 2);
  EXPECT_THROW(benchmark_uncertainty(np, mc, {}, 2, BenchmarkOptions{}), DataError);
}
