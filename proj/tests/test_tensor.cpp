#include "yearspan/tensor.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace yearspan;

namespace {

Tensor random_tensor(Shape shape, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> dist;
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor t({2, 3});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  t.at(1, 2) = 5.0f;
  EXPECT_EQ(t[5], 5.0f);
  EXPECT_EQ(t.row(1)[2], 5.0f);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), std::invalid_argument);
  EXPECT_THROW(t.reshaped({4}), std::invalid_argument);
  EXPECT_EQ(t.reshaped({3, 2}).at(2, 1), 5.0f);
}

TEST(Tensor, MatmulMatchesNaive) {
  const Tensor a = random_tensor({5, 7}, 1);
  const Tensor b = random_tensor({7, 4}, 2);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-5);
    }
  }
  const Tensor bt = b.transposed();
  EXPECT_LT(max_abs_diff(matmul_transposed(a, bt), c), 1e-5f);
  EXPECT_THROW(matmul(a, a), std::invalid_argument);
}

TEST(Tensor, LayerNormMatchesTorch) {
  const Tensor x = Tensor::matrix({{1.0f, -2.0f, 3.5f, 0.25f}, {0.1f, 0.2f, 0.3f, 0.4f}});
  const Tensor g = Tensor::vector({1.5f, 0.5f, -1.0f, 2.0f});
  const Tensor b = Tensor::vector({0.1f, -0.2f, 0.3f, 0.0f});
  const Tensor expected = Tensor::matrix({{0.33872732f, -0.88435167f, -1.13236403f, -0.44562435f},
                                          {-1.91165662f, -0.42351741f, -0.14703488f, 2.68220878f}});
  EXPECT_LT(max_abs_diff(layernorm(x, g, b, 1e-5f), expected), 1e-5f);
}

TEST(Tensor, GeluTanhMatchesTorch) {
  const std::vector<float> in = {-3.0f, -1.0f, -0.5f, 0.0f, 0.5f, 1.0f, 2.5f, 6.0f};
  const std::vector<float> expected = {-0.00363743f, -0.15880799f, -0.15428600f, 0.0f,
                                       0.34571400f,  0.84119201f,  2.48491573f,  6.0f};
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_NEAR(gelu(in[i]), expected[i], 1e-6);
}

TEST(Tensor, SoftmaxIsStableAndShiftInvariant) {
  const std::vector<float> logits = {1000.0f, 1001.0f, 999.0f, -5.0f};
  const auto p = softmax(std::span<const float>(logits));
  const std::vector<float> expected = {0.24472848f, 0.66524094f, 0.09003057f, 0.0f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p[i], expected[i], 1e-6);
  std::vector<float> shifted = logits;
  for (auto& v : shifted) v -= 1000.0f;
  const auto q = softmax(std::span<const float>(shifted));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p[i], q[i], 1e-6);
}

TEST(Tensor, ElementwiseOps) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{0.5f, 0.5f}, {1, -1}});
  EXPECT_EQ(add(a, b).at(1, 1), 3.0f);
  EXPECT_EQ(subtract(a, b).at(0, 0), 0.5f);
  EXPECT_EQ(scale(a, 2.0f).at(1, 0), 6.0f);
  EXPECT_EQ(add_row_vector(a, Tensor::vector({10, 20})).at(1, 1), 24.0f);
  EXPECT_EQ(a.slice_rows(1, 2).at(0, 0), 3.0f);
  EXPECT_EQ(a.slice_cols(1, 2).at(1, 0), 4.0f);
  EXPECT_THROW(add(a, Tensor({3})), std::invalid_argument);
}
