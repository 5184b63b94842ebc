#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "npss/gradcheck.hpp"
#include "npss/losses.hpp"
#include "npss/model.hpp"
#include "npss/np_head.hpp"
#include "oracles.hpp"

using namespace npss;
using npss::testing::random_tensor;

namespace {

LabelMap labels_from(Shape shape, std::vector<int> v) { return LabelMap(std::move(shape), std::move(v)); }

BasicTensor<double> centers_matrix(const std::vector<std::vector<double>>& c) {
  BasicTensor<double> m({static_cast<int>(c.size()), static_cast<int>(c[0].size())});
  for (std::size_t l = 0; l < c.size(); ++l) std::copy(c[l].begin(), c[l].end(), m.raw() + l * c[0].size());
  return m;
}

NpHeadConfig small_head(int n_class = 3, int t = 5) {
  NpHeadConfig h;
  h.feature_channels = 8;
  h.reduced_channels = 4;
  h.latent_dim = 3;
  h.context_dim = 3;
  h.samples = t;
  h.bank_capacity = 64;
  h.latent_hidden = 6;
  h.decoder_hidden = 6;
  h.n_class = n_class;
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Banks and centers
// ---------------------------------------------------------------------------

TEST(MemoryBank, SinglePixelGoesToItsLabel) {
  BankSet<float> banks(3, 8, 2);
  EXPECT_EQ(banks.insert(Tensor({2, 1, 1}, std::vector<float>{0.5f, -1.f}), labels_from({1, 1}, {2})), 1u);
  EXPECT_EQ(banks.bank(2).count(), 1);
  EXPECT_EQ(banks.bank(0).count(), 0);
}

TEST(MemoryBank, FifoEvictsOldest) {
  ClassMemoryBank<float> bank(0, 2, 1);
  for (float v : {1.f, 2.f, 3.f}) bank.insert(std::vector<float>{v});
  EXPECT_EQ(bank.count(), 2);
  EXPECT_EQ(bank.contents(), (std::vector<std::vector<float>>{{2.f}, {3.f}}));
}

TEST(MemoryBank, UniformLabelFillsOneBank) {
  BankSet<float> banks(2, 100, 3);
  Rng rng(1);
  banks.insert(random_tensor({3, 4, 4}, rng), LabelMap({4, 4}));
  EXPECT_EQ(banks.bank(0).count(), 16);
  EXPECT_EQ(banks.bank(1).count(), 0);
}

TEST(MemoryBank, OutOfRangeLabelIsDataErrorAndIgnoredPixelsSkip) {
  BankSet<float> banks(2, 10, 1);
  EXPECT_THROW(banks.insert(Tensor({1, 1, 2}), labels_from({1, 2}, {0, 2})), DataError);
  EXPECT_EQ(banks.total_count(), 0u);
  EXPECT_EQ(banks.insert(Tensor({1, 1, 2}), labels_from({1, 2}, {kIgnoreLabel, 1})), 1u);
}

TEST(Centers, MeanOfStoredVectors) {
  BankSet<float> banks(2, 10, 2);
  banks.insert(Tensor({2, 1, 2}, std::vector<float>{0.f, 2.f, 0.f, 2.f}), labels_from({1, 2}, {1, 1}));
  const auto cs = banks.centers();
  EXPECT_FALSE(cs.populated[0]);
  ASSERT_TRUE(cs.populated[1]);
  EXPECT_EQ(cs.centers[1], (std::vector<float>{1.f, 1.f}));
  EXPECT_THROW(BankSet<float>(2, 4, 2).centers().matrix(), AggregationError);
}

TEST(Centers, DuplicationAndPermutationLeaveCentersUnchanged) {
  Rng rng(2);
  const int n = 40;
  std::vector<std::vector<float>> vecs;
  for (int i = 0; i < n; ++i) vecs.push_back({static_cast<float>(rng.uniform(-3, 3)), static_cast<float>(rng.uniform(-3, 3))});
  auto center_of = [](const std::vector<std::vector<float>>& vs) {
    ClassMemoryBank<float> b(0, 1000, 2);
    for (const auto& v : vs) b.insert(v);
    return b.mean();
  };
  const auto base = center_of(vecs);
  auto dup = vecs;
  dup.insert(dup.end(), vecs.begin(), vecs.end());
  auto perm = vecs;
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[17]);
  for (const auto& other : {center_of(dup), center_of(perm)})
    for (int d = 0; d < 2; ++d) EXPECT_NEAR(other[d], base[d], 1e-6);
}

// ---------------------------------------------------------------------------
// Aggregators
// ---------------------------------------------------------------------------

TEST(Attention, SingleCenterIsEverywhere) {
  Tape<double> tape(false);
  Rng rng(3);
  const auto c = centers_matrix({{0.3, -0.7, 2.0}});
  const auto y = tape.value(attention_aggregate(tape, tape.constant(random_tensor<double>({3, 4, 5}, rng)), c));
  for (int ch = 0; ch < 3; ++ch)
    for (int p = 0; p < 20; ++p) EXPECT_DOUBLE_EQ(y[ch * 20 + p], c.at(0, ch));
}

TEST(Attention, EquidistantQueryGivesMidpoint) {
  Tape<double> tape(false);
  const auto c = centers_matrix({{-1.0, 0.0}, {1.0, 0.0}});
  const auto y = tape.value(attention_aggregate(tape, tape.constant(BasicTensor<double>({2, 1, 1}, std::vector<double>{0.0, 3.0})), c));
  EXPECT_NEAR(y[0], 0.0, 1e-15);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(Attention, HandCaseAgainstDirectEvaluation) {
  Tape<double> tape(false);
  const auto c = centers_matrix({{0.0, 0.0}, {1.0, 0.0}});
  const auto w = attention_weights<double>(std::vector<double>{1.0, 0.0}, c);
  const double w1 = std::exp(-1.0) / (std::exp(-1.0) + 1.0);
  EXPECT_NEAR(w[0], w1, 1e-15);
  EXPECT_NEAR(w[0], 0.2689, 1e-4);
  EXPECT_NEAR(w[1], 0.7311, 1e-4);
  const auto y = tape.value(attention_aggregate(tape, tape.constant(BasicTensor<double>({2, 1, 1}, std::vector<double>{1.0, 0.0})), c));
  EXPECT_NEAR(y[0], 1.0 - w1, 1e-15);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(Attention, FarQueriesDoNotUnderflow) {
  Tape<double> tape(false);
  const auto c = centers_matrix({{0.0}, {1.0}});
  const auto y = tape.value(attention_aggregate(tape, tape.constant(BasicTensor<double>({1, 1, 1}, std::vector<double>{1e5})), c));
  EXPECT_NEAR(y[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Attention, ErrorsWithoutCentersOrOnWidthMismatch) {
  Tape<float> tape(false);
  Var q = tape.constant(Tensor({2, 2, 2}));
  EXPECT_THROW(attention_aggregate(tape, q, Tensor()), AggregationError);
  EXPECT_THROW(attention_aggregate(tape, q, Tensor({1, 3})), ShapeError);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  BasicParameter<double> q("q", random_tensor<double>({3, 3, 2}, rng));
  const auto c = random_tensor<double>({4, 3}, rng);
  const auto probe = random_tensor<double>({3, 3, 2}, rng);
  const auto r = finite_difference_check<double>(
      [&](Tape<double>& t) { return dot(t, attention_aggregate(t, t.parameter(q), c), probe); }, {&q}, 1e-6, 5, 18);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(MeanAggregator, IgnoresTheQuery) {
  Rng rng(5);
  Tape<float> tape(false);
  const Tensor c = random_tensor({3, 4}, rng);
  const auto a = tape.value(mean_aggregate(tape, tape.constant(random_tensor({4, 3, 3}, rng)), c));
  const auto b = tape.value(mean_aggregate(tape, tape.constant(random_tensor({4, 3, 3}, rng)), c));
  EXPECT_EQ(a, b);
  for (int ch = 0; ch < 4; ++ch) EXPECT_NEAR(a.at(ch, 1, 2), (c.at(0, ch) + c.at(1, ch) + c.at(2, ch)) / 3.0, 1e-6);
  EXPECT_EQ(parse_aggregator("mean"), Aggregator::kMean);
  EXPECT_THROW(parse_aggregator("max"), ConfigError);
}

// ---------------------------------------------------------------------------
// Latent path
// ---------------------------------------------------------------------------

TEST(LatentHead, ZeroInputZeroHeadsGivesSoftplusOfZero) {
  Rng rng(6);
  LatentHead<double> head(4, 5, 3, rng);
  head.zero_heads();
  Tape<double> tape(false);
  const auto lv = head(tape, tape.constant(BasicTensor<double>({4})));
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(tape.value(lv.mu)[i], 0.0);
    EXPECT_NEAR(tape.value(lv.var)[i], std::log(2.0) + 1e-4, 1e-12);
  }
  EXPECT_NEAR(tape.value(lv.var)[0], 0.6932, 1e-4);
}

TEST(LatentHead, VarianceRespectsFloor) {
  Rng rng(7);
  LatentHead<float> head(4, 5, 3, rng);
  Tape<float> tape(false);
  for (int trial = 0; trial < 50; ++trial) {
    const auto lv = head(tape, tape.constant(random_tensor({4}, rng, -200, 200)));
    for (float v : tape.value(lv.var).data()) EXPECT_GE(v, 1e-4f);
  }
}

TEST(LatentHead, PoolingAndMlpPassFiniteDifferences) {
  Rng rng(8);
  LatentHead<double> head(3, 4, 2, rng);
  ParamList<double> params;
  head.collect(params);
  const auto map = random_tensor<double>({3, 4, 4}, rng);
  const auto p1 = random_tensor<double>({2}, rng), p2 = random_tensor<double>({2}, rng);
  const auto r = finite_difference_check<double>(
      [&](Tape<double>& t) {
        auto lv = head(t, global_avg_pool(t, t.constant(map)));
        return add(t, dot(t, lv.mu, p1), dot(t, lv.var, p2));
      },
      params, 1e-6, 9);
  EXPECT_LE(r.max_rel_error, 1e-3) << r.worst_parameter;
}

TEST(SampleLatents, CollapseToMeanAtFloor) {
  LatentDistribution<double> d{{0.5, -2.0}, {1e-4, 1e-4}};
  Rng eps_rng(10), z_rng(10);
  const auto eps = draw_standard_normal<double>(5, 2, eps_rng);
  const auto z = sample_latents(d, 5, z_rng);
  for (int t = 0; t < 5; ++t)
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(z.at(t, i), d.mu[i], std::sqrt(1e-4) * std::abs(eps.at(t, i)) + 1e-12);
}

TEST(SampleLatents, LargeSampleMeanWithinFourSigma) {
  Rng rng(11);
  LatentDistribution<double> d{{1.0, -0.5, 0.0}, {0.5, 2.0, 1e-2}};
  const int n = 100000;
  const auto z = sample_latents(d, n, rng);
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int t = 0; t < n; ++t) s += z.at(t, i);
    EXPECT_NEAR(s / n, d.mu[i], 4 * std::sqrt(d.var[i] / n));
  }
}

TEST(SampleLatents, SameSeedIsBitwiseReproducible) {
  LatentDistribution<float> d{{1.f, 2.f}, {0.3f, 0.1f}};
  Rng a(12, "z"), b(12, "z");
  EXPECT_EQ(sample_latents(d, 5, a), sample_latents(d, 5, b));
}

TEST(TileVector, ExactReplicationAndShapes) {
  const std::vector<float> v{1.5f, -2.f};
  const auto t = tile_vector<float>(v, 0, 2, 2);
  EXPECT_EQ(t.shape(), (Shape{2, 2, 2}));
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      EXPECT_EQ(t.at(0, y, x), 1.5f);
      EXPECT_EQ(t.at(1, y, x), -2.f);
    }
  EXPECT_EQ(tile_vector<float>(std::vector<float>(8, 1.f), 5, 3, 4).shape(), (Shape{5, 8, 3, 4}));
}

TEST(TileVector, GradientIsSumOverPositions) {
  Tape<double> tape;
  BasicParameter<double> p("p", BasicTensor<double>({1, 2}, std::vector<double>{1.0, 2.0}));
  Var y = sum(tape, tile_spatial(tape, tape.parameter(p), 3, 4));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(p.grad[0], 12.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 12.0);
}

// ---------------------------------------------------------------------------
// Entropy and bundles
// ---------------------------------------------------------------------------

TEST(Entropy, UniformIsLogNAndOneHotIsZero) {
  BasicTensor<double> p({3, 1, 2}, std::vector<double>{1.0 / 3, 1.0, 1.0 / 3, 0.0, 1.0 / 3, 0.0});
  const auto e = entropy_map(p);
  EXPECT_NEAR(e[0], std::log(3.0), 1e-12);
  EXPECT_NEAR(e[0], 1.0986, 1e-4);
  EXPECT_EQ(e[1], 0.0);
}

TEST(Bundle, AverageIsMeanOverSamples) {
  Rng rng(13);
  BasicTensor<double> logits = random_tensor<double>({4, 3, 2, 2}, rng, -3, 3);
  const auto probs = softmax_values(logits, 1);
  const auto b = make_bundle(probs);
  for (int c = 0; c < 3; ++c) {
    double s = 0;
    for (int t = 0; t < 4; ++t) s += probs.at(t, c, 1, 0);
    EXPECT_NEAR(b.avg_probs.at(c, 1, 0), s / 4, 1e-15);
  }
}

// ---------------------------------------------------------------------------
// Full head
// ---------------------------------------------------------------------------

TEST(NpHead, DeskShapesAndContracts) {
  ModelConfig mc;
  mc.head.n_class = 4;
  NpSegModel<float> model(mc);
  Rng rng(14);
  auto& head = model.head();
  Tape<float> tape(false);
  const Tensor img = random_tensor({3, 8, 8}, rng, 0, 1);
  Var feat = model.encode(tape, tape.constant(img));
  Var red = head.reduce(tape, feat);
  LabelMap lab({8, 8});
  for (int i = 0; i < 64; ++i) lab[i] = i % 4;
  head.context_banks().insert(tape.value(red), lab);
  head.target_banks().insert(tape.value(red), lab);
  head.refresh_centers();
  auto out = head.forward(tape, feat, red, rng);
  EXPECT_EQ(tape.value(out.assembled).shape(), (Shape{5, 48, 8, 8}));
  EXPECT_EQ(tape.value(out.probs).shape(), (Shape{5, 4, 8, 8}));
  ASSERT_TRUE(out.target_latent && out.context_latent);
  EXPECT_EQ(tape.value(out.context_rep).shape(), (Shape{8}));
  const auto b = make_bundle(tape.value(out.probs));
  for (float u : b.uncertainty.data()) {
    EXPECT_GE(u, 0.f);
    EXPECT_LE(u, std::log(4.f) + 1e-6f);
  }
}

TEST(NpHead, ColdStartEmitsZeroPaths) {
  NpSegModel<float> model(ModelConfig{});
  Rng rng(15);
  Tape<float> tape(false);
  auto out = model.forward(tape, tape.constant(random_tensor({3, 8, 8}, rng, 0, 1)), rng);
  EXPECT_FALSE(out.target_latent);
  EXPECT_FALSE(out.context_latent);
  const auto& a = tape.value(out.assembled);
  for (int t = 0; t < 5; ++t)
    for (int c = 32; c < 48; ++c) EXPECT_EQ(a.at(t, c, 3, 3), 0.f);
}

TEST(NpHead, DeterministicContextIgnoresCenterOrder) {
  Rng rng(16);
  NpHead<double> head(small_head(), rng);
  const auto red = random_tensor<double>({4, 3, 3}, rng);
  CenterSet<double> a(3, 4), b(3, 4);
  std::vector<std::vector<double>> cs;
  for (int c = 0; c < 3; ++c) {
    cs.emplace_back();
    for (int i = 0; i < 4; ++i) cs.back().push_back(rng.uniform(-1, 1));
  }
  // same centers under a different class assignment: only their order in the softmax changes
  for (int c = 0; c < 3; ++c) a.set(c, cs[c]), b.set(2 - c, cs[c]);
  Tape<double> tape(false);
  head.set_centers(a, a);
  const auto va = tape.value(head.deterministic_context(tape, tape.constant(red)));
  head.set_centers(b, b);
  const auto vb = tape.value(head.deterministic_context(tape, tape.constant(red)));
  EXPECT_LE(max_abs_diff(va, vb), 1e-6);
  EXPECT_EQ(va.shape(), (Shape{3}));
}

TEST(NpHead, SingleContextCenterCollapsesToProjection) {
  Rng rng(17);
  NpHead<double> head(small_head(), rng);
  CenterSet<double> cs(3, 4);
  const std::vector<double> c{0.2, -0.4, 1.0, 0.0};
  cs.set(1, c);
  head.set_centers(cs, cs);
  Tape<double> tape(false);
  const auto v = tape.value(head.deterministic_context(tape, tape.constant(random_tensor<double>({4, 5, 2}, rng))));
  const auto& p = head.context_projection();
  for (int o = 0; o < 3; ++o) {
    double s = p.bias.value[o];
    for (int i = 0; i < 4; ++i) s += p.weight.value.at(o, i) * c[i];
    EXPECT_NEAR(v[o], s, 1e-12);
  }
}

TEST(NpHead, SetCentersRejectsWrongWidth) {
  Rng rng(18);
  NpHead<float> head(small_head(), rng);
  EXPECT_THROW(head.set_centers(CenterSet<float>(3, 5), CenterSet<float>(3, 4)), FormatError);
}

TEST(NpHead, FullForwardAndLossPassFiniteDifferences) {
  // two classes, 4 x 4 image, every parameter group checked
  ModelConfig mc;
  mc.encoder = EncoderConfig{3, 8, 1, 1};
  mc.head = small_head(2, 2);
  mc.head.feature_channels = 8;
  NpSegModel<double> model(mc);
  Rng rng(19);
  const auto img = random_tensor<double>({3, 8, 8}, rng, 0, 1);
  LabelMap lab({8, 8});
  for (int i = 0; i < 64; ++i) lab[i] = (i / 8 + i % 8) % 2;
  {
    Tape<double> tape(false);
    Var feat = model.encode(tape, tape.constant(img));
    const auto red = tape.value(model.head().reduce(tape, feat));
    model.head().context_banks().insert(red, lab);
    LabelMap shifted = lab;
    for (auto& v : shifted.data()) v = 1 - v;
    model.head().target_banks().insert(red, shifted);
    model.head().refresh_centers();
  }
  const Rng base(20);
  const auto r = finite_difference_check<double>(
      [&](Tape<double>& t) {
        Rng fr = base;
        auto out = model.forward(t, t.constant(img), fr);
        Var ce = cross_entropy(t, out.avg_probs, lab);
        Var kl = kl_gaussian(t, *out.target_latent, *out.context_latent);
        return weighted_sum(t, {ce, kl}, {1.0, 0.5});
      },
      model.parameters(), 1e-6, 21, 6);
  EXPECT_LE(r.max_rel_error, 1e-3) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(Snapshot, ExportImportReproducesForwardBitwise) {
  ModelConfig mc;
  mc.head = small_head();
  mc.encoder.feature_channels = 8;
  NpSegModel<float> a(mc);
  Rng rng(22);
  const Tensor img = random_tensor({3, 8, 8}, rng, 0, 1);
  LabelMap lab({8, 8});
  for (int i = 0; i < 64; ++i) lab[i] = i % 3;
  {
    Tape<float> tape(false);
    const auto red = tape.value(a.head().reduce(tape, a.encode(tape, tape.constant(img))));
    a.head().context_banks().insert(red, lab);
    a.head().target_banks().insert(red, lab);
    a.head().refresh_centers();
  }
  NpSegModel<float> b(mc);  // same init seed: identical weights, empty banks
  b.import_centers(a.export_centers());
  Rng ra(23), rb(23);
  EXPECT_EQ(a.predict(img, ra).per_sample_probs, b.predict(img, rb).per_sample_probs);

  auto bad = a.export_centers();
  bad.reduced_channels = 5;
  EXPECT_THROW(b.import_centers(bad), FormatError);
}
