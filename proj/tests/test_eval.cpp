#include <gtest/gtest.h>

#include "support.hpp"

using namespace ctsev;
namespace tk = ctsev::testkit;

namespace {

constexpr auto L = SeverityClass::Low;
constexpr auto M = SeverityClass::Medium;
constexpr auto H = SeverityClass::High;

std::vector<SeverityClass> repeat(SeverityClass c, std::size_t n) { return std::vector<SeverityClass>(n, c); }

std::vector<SeverityClass> concat(std::initializer_list<std::vector<SeverityClass>> parts) {
  std::vector<SeverityClass> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

/// Network whose logits are the head bias for every input.
nn::Network<float> constant_logits(std::array<float, 3> logits, bool planar = false) {
  auto net = nn::build_network<float>(nn::NetworkPreset::named(nn::PresetName::nano), 0, nn::Geometry{planar});
  net.head.weights = Tensor<float>::zeros_like(net.head.weights);
  net.head.bias = Tensor<float>({3}, {logits[0], logits[1], logits[2]});
  return net;
}

Volume small_volume(std::uint64_t seed, std::size_t depth = 8) {
  Rng rng(seed);
  return Volume::make(tk::random_tensor<double>({depth, 16, 16}, rng, 0.0, 1.0), IntensityUnit::normalized);
}

}  // namespace

TEST(Predict3d, ArgmaxWithSevereTieBreak) {
  EXPECT_EQ(predict_volume_3d(constant_logits({0.1f, 0.2f, 0.7f}), small_volume(1)), H);
  EXPECT_EQ(predict_volume_3d(constant_logits({0.4f, 0.4f, 0.2f}), small_volume(1)), M);
  EXPECT_EQ(predict(constant_logits({0.9f, 0.4f, 0.2f}), small_volume(2)), L);
}

TEST(SliceVote, Examples) {
  EXPECT_EQ(majority_vote(concat({repeat(L, 30), repeat(H, 10)})), L);
  EXPECT_EQ(majority_vote(concat({repeat(L, 20), repeat(H, 20)})), H);
  EXPECT_EQ(majority_vote(repeat(M, 40)), M);
  EXPECT_EQ(majority_vote(concat({repeat(L, 13), repeat(M, 14), repeat(H, 13)})), M);
  EXPECT_THROW(majority_vote(std::vector<SeverityClass>{}), ShapeError);
}

TEST(SliceVote, OrderInvariant) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<SeverityClass> votes(1 + rng.below(40));
    for (auto& v : votes) v = static_cast<SeverityClass>(rng.below(3));
    const auto expected = majority_vote(votes);
    rng.shuffle(votes);
    EXPECT_EQ(majority_vote(votes), expected);
  }
}

TEST(SliceVote, BaselineVotesOverEverySlice) {
  const auto net = constant_logits({0.0f, 1.0f, 0.0f}, true);
  const auto v = small_volume(3, 40);
  const auto slices = predict_slices(net, v);
  EXPECT_EQ(slices.size(), 40u);
  EXPECT_EQ(predict_volume_2d_baseline(net, v), M);
  EXPECT_EQ(predict(net, v), M);
}

TEST(Accuracy, Examples) {
  const auto labels = concat({repeat(L, 4), repeat(M, 3), repeat(H, 3)});
  EXPECT_EQ(accuracy(labels, labels), 1.0);
  const auto wrong = concat({repeat(H, 4), repeat(L, 3), repeat(M, 3)});
  EXPECT_EQ(accuracy(wrong, labels), 0.0);

  std::vector<SeverityClass> p(100, L), t(100, L);
  for (std::size_t i = 59; i < 100; ++i) t[i] = H;
  EXPECT_DOUBLE_EQ(accuracy(p, t), 0.59);
  EXPECT_EQ(format_percent(accuracy(p, t)), "59.0");

  EXPECT_THROW(accuracy(repeat(L, 3), repeat(L, 2)), ShapeError);
  EXPECT_THROW(accuracy(std::vector<SeverityClass>{}, std::vector<SeverityClass>{}), ShapeError);
}

TEST(Confusion, HandCountedLowRow) {
  const auto labels = repeat(L, 20);
  const auto preds = concat({repeat(L, 17), repeat(M, 1), repeat(H, 2)});
  const auto cm = confusion_matrix(preds, labels);
  EXPECT_DOUBLE_EQ(cm.row_normalized[0][0], 0.85);
  EXPECT_DOUBLE_EQ(cm.row_normalized[0][1], 0.05);
  EXPECT_DOUBLE_EQ(cm.row_normalized[0][2], 0.10);
  EXPECT_TRUE(cm.empty_rows[1]);
  EXPECT_TRUE(cm.empty_rows[2]);
  EXPECT_FALSE(cm.empty_rows[0]);
  EXPECT_EQ(cm.row_normalized[1], (std::array<double, 3>{0, 0, 0}));
}

TEST(Confusion, PerfectIsIdentity) {
  const auto labels = concat({repeat(L, 2), repeat(M, 5), repeat(H, 1)});
  const auto cm = confusion_matrix(labels, labels);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(cm.row_normalized[r][c], r == c ? 1.0 : 0.0);
  EXPECT_EQ(cm.counts[1][1], 5u);
}

TEST(Report, AccuracyEqualsTraceOverTotal) {
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<SeverityClass> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<SeverityClass>(rng.below(3));
      t[i] = static_cast<SeverityClass>(rng.below(3));
    }
    const auto r = make_report("m", EvalMode::volumetric3d, p, t);
    EXPECT_EQ(r.accuracy, double(r.confusion.trace()) / double(r.confusion.total()));
    EXPECT_NEAR(r.accuracy, accuracy(p, t), 1e-12);
    EXPECT_EQ(r.class_histogram[0] + r.class_histogram[1] + r.class_histogram[2], n);
    for (std::size_t row = 0; row < 3; ++row) {
      if (r.confusion.empty_rows[row]) continue;
      EXPECT_NEAR(r.confusion.row_normalized[row][0] + r.confusion.row_normalized[row][1] +
                      r.confusion.row_normalized[row][2],
                  1.0, 1e-12);
    }
  }
}

TEST(Report, JsonSchemaAndRoundTrip) {
  const auto r = make_report("nano_3d", EvalMode::slicevote2d, concat({repeat(L, 3), repeat(H, 2)}),
                             concat({repeat(L, 2), repeat(M, 1), repeat(H, 2)}));
  const auto j = to_json(r);
  for (const char* key : {"model", "mode", "n_test", "accuracy", "confusion_counts", "confusion_row_norm",
                          "per_class_recall", "class_histogram"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["mode"], "slicevote2d");
  EXPECT_EQ(to_json(report_from_json(nlohmann::json::parse(j.dump()))), j);
  EXPECT_THROW(report_from_json({{"model", "x"}}), FormatError);
  const auto text = render_report(r);
  EXPECT_NE(text.find("accuracy 80.0%"), std::string::npos) << text;
}

TEST(Evaluate, SingletonAndModeMismatch) {
  const std::vector<TestCase> one{{"p1", small_volume(4), H}};
  const auto r = evaluate(constant_logits({0.0f, 0.0f, 1.0f}), std::span<const TestCase>(one),
                          EvalMode::volumetric3d, "const");
  EXPECT_EQ(r.n_test, 1u);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_THROW(evaluate(constant_logits({0, 0, 1}), std::span<const TestCase>(one), EvalMode::slicevote2d, "x"),
               ConfigError);
  EXPECT_THROW(evaluate(constant_logits({0, 0, 1}), std::span<const TestCase>(), EvalMode::volumetric3d, "x"),
               ShapeError);
}

TEST(Evaluate, ReportIsInPatientIdOrderAndStable) {
  std::vector<TestCase> cases{{"p3", small_volume(5), L}, {"p1", small_volume(6), M}, {"p2", small_volume(7), H}};
  const auto net = nn::build_network<float>(nn::NetworkPreset::named(nn::PresetName::nano), 9);
  const auto a = to_json(evaluate(net, std::span<const TestCase>(cases), EvalMode::volumetric3d, "n")).dump();
  std::reverse(cases.begin(), cases.end());
  const auto b = to_json(evaluate(net, std::span<const TestCase>(cases), EvalMode::volumetric3d, "n")).dump();
  EXPECT_EQ(a, b);
}
