#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "model.hpp"
#include "tensor.hpp"

using namespace steer;

namespace {

Tensor2D random_tensor(size_t rows, size_t cols, std::mt19937_64& rng, double lo = -1.0,
                       double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor2D t(rows, cols);
  for (double& v : t.data) v = dist(rng);
  return t;
}

// Reference oracle: the textbook triple loop.
Tensor2D matmul_naive(const Tensor2D& a, const Tensor2D& b) {
  Tensor2D c(a.rows, b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (size_t k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul identity") {
  std::mt19937_64 rng(1);
  Tensor2D m = random_tensor(2, 2, rng);
  Tensor2D eye(2, 2);
  eye.at(0, 0) = 1.0;
  eye.at(1, 1) = 1.0;
  Tensor2D out = matmul(eye, m);
  CHECK(max_abs_diff(out, m) == 0.0);
}

TEST_CASE("matmul analytic 2x2 by 2x1") {
  Tensor2D a(2, 2);
  a.data = {1, 2, 3, 4};
  Tensor2D b(2, 1);
  b.data = {0, 1};
  Tensor2D c = matmul(a, b);
  CHECK(c.at(0, 0) == 2.0);
  CHECK(c.at(1, 0) == 4.0);
}

TEST_CASE("matmul vs naive oracle on random 7x5 * 5x3") {
  std::mt19937_64 rng(2);
  Tensor2D a = random_tensor(7, 5, rng);
  Tensor2D b = random_tensor(5, 3, rng);
  CHECK(max_abs_diff(matmul(a, b), matmul_naive(a, b)) < 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes and reports both") {
  Tensor2D a(3, 4), b(5, 2);
  try {
    matmul(a, b);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::invalid_argument);
    const std::string what = e.what();
    CHECK(what.find("3x4") != std::string::npos);
    CHECK(what.find("5x2") != std::string::npos);
  }
}

TEST_CASE("matmul counts fused multiply-adds") {
  std::mt19937_64 rng(3);
  OpCounter counter;
  matmul(random_tensor(7, 5, rng), random_tensor(5, 3, rng), &counter);
  CHECK(counter.fused_multiply_adds == 7u * 5u * 3u);
  matmul(random_tensor(2, 2, rng), random_tensor(2, 2, rng), &counter);
  CHECK(counter.fused_multiply_adds == 7u * 5u * 3u + 8u);  // monotone
}

TEST_CASE("matmul associativity within 1e-9 on random 8x8 chains") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor2D a = random_tensor(8, 8, rng);
    Tensor2D b = random_tensor(8, 8, rng);
    Tensor2D c = random_tensor(8, 8, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
  }
}

TEST_CASE("row_softmax uniform row") {
  Tensor2D a(1, 3);
  Tensor2D out = row_softmax(a, false);
  for (size_t j = 0; j < 3; ++j) CHECK(out.at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("row_softmax causal row 0 is [1,0,0]") {
  std::mt19937_64 rng(5);
  Tensor2D a = random_tensor(3, 3, rng, -4.0, 4.0);
  Tensor2D out = row_softmax(a, true);
  CHECK(out.at(0, 0) == 1.0);
  CHECK(out.at(0, 1) == 0.0);
  CHECK(out.at(0, 2) == 0.0);
  // above-diagonal entries exactly zero everywhere
  CHECK(out.at(1, 2) == 0.0);
}

TEST_CASE("row_softmax vs direct exp/sum oracle on random 6x6") {
  std::mt19937_64 rng(6);
  Tensor2D a = random_tensor(6, 6, rng, -3.0, 3.0);
  Tensor2D out = row_softmax(a, false);
  for (size_t i = 0; i < 6; ++i) {
    double denom = 0.0;
    for (size_t j = 0; j < 6; ++j) denom += std::exp(a.at(i, j));
    for (size_t j = 0; j < 6; ++j) {
      CHECK(std::fabs(out.at(i, j) - std::exp(a.at(i, j)) / denom) < 1e-12);
    }
  }
}

TEST_CASE("row_softmax rows sum to one and are shift invariant") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor2D a = random_tensor(4, 9, rng, -5.0, 5.0);
    Tensor2D shifted = a;
    std::uniform_real_distribution<double> dist(-10.0, 10.0);
    for (size_t i = 0; i < a.rows; ++i) {
      const double c = dist(rng);
      for (size_t j = 0; j < a.cols; ++j) shifted.at(i, j) += c;
    }
    Tensor2D out = row_softmax(a, false);
    Tensor2D out_shifted = row_softmax(shifted, false);
    for (size_t i = 0; i < a.rows; ++i) {
      double sum = 0.0;
      for (size_t j = 0; j < a.cols; ++j) sum += out.at(i, j);
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
      for (size_t j = 0; j < a.cols; ++j) {
        CHECK(std::fabs(out.at(i, j) - out_shifted.at(i, j)) < 1e-9);
      }
    }
    CHECK(all_finite(out));
  }
}

TEST_CASE("row_softmax rejects a fully masked row") {
  Tensor2D empty_cols(1, 0);
  CHECK_THROWS_AS(row_softmax(empty_cols, false), Error);
  // causal on a non-square matrix is also rejected
  Tensor2D rect(2, 3);
  CHECK_THROWS_AS(row_softmax(rect, true), Error);
}

TEST_CASE("row_softmax with huge magnitudes stays finite") {
  Tensor2D a(1, 3);
  a.data = {1e6, -1e6, 0.0};
  Tensor2D out = row_softmax(a, false);
  CHECK(all_finite(out));
  CHECK(out.at(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("rms_norm all-ones row with unit gain and zero epsilon") {
  Tensor2D x(1, 4);
  std::fill(x.data.begin(), x.data.end(), 1.0);
  std::vector<double> gain(4, 1.0);
  Tensor2D out = rms_norm(x, gain, 0.0);
  for (double v : out.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("rms_norm zero row stays zero") {
  Tensor2D x(1, 4);
  std::vector<double> gain(4, 1.0);
  Tensor2D out = rms_norm(x, gain, 1e-5);
  for (double v : out.data) CHECK(v == 0.0);
  CHECK(all_finite(out));
}

TEST_CASE("rms_norm vs scalar-loop oracle") {
  std::mt19937_64 rng(8);
  Tensor2D x = random_tensor(3, 6, rng);
  std::vector<double> gain(6);
  for (double& g : gain) g = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
  const double eps = 1e-5;
  Tensor2D out = rms_norm(x, gain, eps);
  for (size_t i = 0; i < x.rows; ++i) {
    double ms = 0.0;
    for (size_t j = 0; j < x.cols; ++j) ms += x.at(i, j) * x.at(i, j);
    ms /= static_cast<double>(x.cols);
    for (size_t j = 0; j < x.cols; ++j) {
      const double expected = x.at(i, j) / std::sqrt(ms + eps) * gain[j];
      CHECK(std::fabs(out.at(i, j) - expected) < 1e-12);
    }
  }
}

TEST_CASE("rms_norm rejects wrong gain length") {
  Tensor2D x(1, 4);
  std::vector<double> gain(3, 1.0);
  CHECK_THROWS_AS(rms_norm(x, gain, 1e-5), Error);
}

TEST_CASE("prefill op count splits into linear and quadratic terms") {
  // fma(n) = A*n + B*n^2 exactly, so the first differences of fma(n)/n
  // over n in {32, 64, 128} have an exact ratio of 2.
  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 2;
  config.d_model = 16;
  config.d_ff = 32;
  config.max_positions = 256;
  ModelWeights w = init_random(config, 9);

  auto fma_for = [&](size_t n) {
    TokenSequence seq;
    seq.ids.assign(n, kBosId);
    seq.prefix_len = n;
    OpCounter counter;
    prefill(w, seq, {}, false, &counter);
    return counter;
  };
  const OpCounter c32 = fma_for(32);
  const OpCounter c64 = fma_for(64);
  const OpCounter c128 = fma_for(128);

  const double g32 = static_cast<double>(c32.fused_multiply_adds) / 32.0;
  const double g64 = static_cast<double>(c64.fused_multiply_adds) / 64.0;
  const double g128 = static_cast<double>(c128.fused_multiply_adds) / 128.0;
  CHECK((g128 - g64) / (g64 - g32) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g64 > g32);  // the quadratic term is present

  // softmax_rows scales linearly with tokens: rows * heads * layers
  CHECK(c32.softmax_rows == 32u * 2u * 2u);
  CHECK(c128.softmax_rows == 128u * 2u * 2u);
}
