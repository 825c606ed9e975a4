#include <gtest/gtest.h>

#include "support.hpp"

using namespace ctsev;

TEST(Tensor, FillConstructors) {
  const Tensor<double> a({2, 2}, 0.0);
  EXPECT_EQ(a.values(), (std::vector<double>{0, 0, 0, 0}));
  const Tensor<double> b({3}, 1.5);
  EXPECT_EQ(b.values(), (std::vector<double>{1.5, 1.5, 1.5}));
  const Tensor<double> c({1, 1, 1}, -2.0);
  EXPECT_EQ(c.size(), 1u);
  EXPECT_EQ(c(0, 0, 0), -2.0);
}

TEST(Tensor, RejectsInvalidShapes) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{}), ShapeError);
  EXPECT_THROW(make_shape({3, -1}), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, RowMajorStridesAndOffsets) {
  Tensor<int> t({2, 3, 4});
  EXPECT_EQ(t.strides(), (std::vector<std::size_t>{12, 4, 1}));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<int>(i);
  EXPECT_EQ(t(1, 2, 3), 23);
  EXPECT_EQ(t(1, 0, 2), 14);
  EXPECT_THROW(t.extent(3), AxisError);
}

TEST(Tensor, ElementwiseExamples) {
  const Tensor<double> a({2}, {1, 2});
  const Tensor<double> b({2}, {3, 4});
  EXPECT_EQ(add(a, b).values(), (std::vector<double>{4, 6}));
  EXPECT_EQ(mul(a, Tensor<double>::zeros({2})).values(), (std::vector<double>{0, 0}));
  EXPECT_EQ(sub(a, a).values(), (std::vector<double>{0, 0}));
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
  const Tensor<double> a({2, 3});
  const Tensor<double> b({3, 2});
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
}

TEST(Tensor, ScaleExamples) {
  const Tensor<double> a({2}, {1, 2});
  EXPECT_EQ(scale(a, 1.0).values(), (std::vector<double>{1, 2}));
  EXPECT_EQ(scale(a, 0.0).values(), (std::vector<double>{0, 0}));
  EXPECT_EQ(scale(Tensor<double>({2}, {1, -2}), -3.0).values(), (std::vector<double>{-3, 6}));
}

TEST(Tensor, ReductionExamples) {
  const Tensor<double> m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(sum_all(m), 10.0);
  EXPECT_EQ(reduce_sum(m, 0).values(), (std::vector<double>{4, 6}));
  EXPECT_EQ(reduce_sum(m, 0).shape(), (Shape{2}));
  EXPECT_EQ(reduce_sum(m, 1).values(), (std::vector<double>{3, 7}));
  EXPECT_EQ(sum_all(Tensor<double>::zeros({5, 5})), 0.0);
  EXPECT_THROW(reduce_sum(m, 2), AxisError);
}

TEST(Tensor, ArgmaxLastTiesGoToLargestIndex) {
  EXPECT_EQ(argmax_last(Tensor<double>({3}, {0.1, 0.7, 0.2}))[0], 1);
  EXPECT_EQ(argmax_last(Tensor<double>({3}, {0.4, 0.4, 0.2}))[0], 1);
  EXPECT_EQ(argmax_last(Tensor<double>({1}, {5}))[0], 0);
  const auto rows = argmax_last(Tensor<double>({2, 3}, {1, 1, 1, 3, 2, 1}));
  EXPECT_EQ(rows.shape(), (Shape{2}));
  EXPECT_EQ(rows[0], 2);
  EXPECT_EQ(rows[1], 0);
}

TEST(TensorProperties, AddIsCommutativeAndAssociativeOnIntegers) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> a({4, 3}), b({4, 3}), c({4, 3});
    for (auto* t : {&a, &b, &c}) {
      for (auto& v : t->data()) v = static_cast<double>(static_cast<int>(rng.below(2001)) - 1000);
    }
    EXPECT_EQ(add(a, b), add(b, a));
    EXPECT_EQ(add(add(a, b), c), add(a, add(b, c)));
  }
}

TEST(TensorProperties, SumAllMatchesSequentialLeftToRight) {
  Rng rng(9);
  const auto t = testkit::random_tensor<float>({7, 13, 5}, rng);
  float acc = 0.0f;
  for (float v : t.data()) acc += v;
  EXPECT_EQ(sum_all(t), acc);
}

TEST(TensorProperties, ScaleIdentityAndSelfSubtraction) {
  Rng rng(10);
  const auto t = testkit::random_tensor<double>({3, 4, 5}, rng, -1e6, 1e6);
  EXPECT_EQ(scale(t, 1.0), t);
  EXPECT_EQ(sub(t, t), Tensor<double>::zeros(t.shape()));
}

TEST(TensorProperties, ArgmaxInvariantToShiftAndPositiveScale) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = testkit::random_tensor<double>({6, 3}, rng);
    const auto base = argmax_last(t);
    const double shift = rng.uniform(-5.0, 5.0);
    const double s = rng.uniform(0.1, 10.0);
    Tensor<double> shifted = t;
    for (auto& v : shifted.data()) v += shift;
    EXPECT_EQ(argmax_last(shifted), base);
    EXPECT_EQ(argmax_last(scale(t, s)), base);
  }
}

TEST(Rng, DeterministicStreams) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(42).next_u64(), c.next_u64());
  Rng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    ASSERT_GE(x, 0.0);
    ASSERT_LT(x, 1.0);
    ASSERT_LT(u.below(7), 7u);
  }
}
