#include <doctest.h>

#include <cmath>
#include <thread>

#include "grad_check.hpp"
#include "psvit/errors.hpp"
#include "psvit/tensor.hpp"

using namespace psvit;
using psvit::test::max_grad_rel_error;
using psvit::test::project_to_scalar;

namespace {

Tensor t2(std::size_t m, std::size_t n, std::vector<double> v, bool grad = false) {
  return Tensor::from_data({m, n}, std::move(v), grad);
}

}  // namespace

TEST_CASE("matmul basics") {
  const Tensor eye = t2(2, 2, {1, 0, 0, 1});
  const Tensor m = t2(2, 2, {3, -1, 2, 7});
  CHECK(matmul(eye, m).data() == m.data());

  const Tensor a = t2(2, 2, {1, 2, 3, 4});
  const Tensor b = t2(2, 1, {5, 6});
  const Tensor c = matmul(a, b);
  CHECK(c.data() == std::vector<double>{17, 39});

  CHECK_THROWS_WITH_AS(matmul(a, t2(3, 1, {1, 2, 3})), doctest::Contains("[2, 2]"), ShapeError);
}

TEST_CASE("matmul gradient equals row-sums of B") {
  Rng rng(11);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({4, 5}, rng, 1.0, false);
  auto loss_fn = [&] { return sum(matmul(a, b)); };
  CHECK(max_grad_rel_error(loss_fn, {&a}) < 1e-4);

  a.zero_grad();
  loss_fn().backward();
  // d sum(AB) / dA[i][k] = sum_j B[k][j], independent of i
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 5; ++j) row_sum += b.data()[k * 5 + j];
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(row_sum).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax values") {
  const Tensor z = Tensor::from_data({3}, {0, 0, 0});
  const Tensor uniform = softmax(z, 0);
  for (double v : uniform.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  const Tensor big = Tensor::from_data({2}, {1000, 1000});
  const auto stabilized = softmax(big, 0).data();
  CHECK(stabilized[0] == doctest::Approx(0.5));
  CHECK(stabilized[1] == doctest::Approx(0.5));

  const Tensor ln3 = Tensor::from_data({2}, {0.0, std::log(3.0)});
  const auto p = softmax(ln3, 0).data();
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));

  CHECK_THROWS_AS(softmax(Tensor::from_data({2}, {1.0, std::nan("")}), 0), NumericError);
  CHECK_THROWS_AS(softmax(z, 1), ShapeError);
}

TEST_CASE("softmax rows sum to one for random finite inputs") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({7, 9}, rng, 50.0);
    const Tensor s = softmax(x, 1);
    for (std::size_t i = 0; i < 7; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 9; ++j) total += s.data()[i * 9 + j];
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("windowed shape law") {
  CHECK(window_out_len(197, 3, 2, 1) == 99);
  CHECK(window_out_len(99, 3, 2, 1) == 50);
  CHECK(window_out_len(785, 3, 2, 1) == 393);
  CHECK(window_out_len(28, 3, 2, 1) == 14);
  CHECK(window_out_len(14, 3, 2, 1) == 7);
  // law holds exactly over a grid of (L, k, s, p)
  for (std::size_t len = 1; len <= 12; ++len) {
    for (std::size_t k = 1; k <= 5; ++k) {
      for (std::size_t s = 1; s <= 3; ++s) {
        for (std::size_t p = 0; p + 1 <= k; ++p) {
          if (len + 2 * p < k) continue;
          CHECK(window_out_len(len, k, s, p) == (len + 2 * p - k) / s + 1);
        }
      }
    }
  }
  CHECK_THROWS_AS(window_out_len(2, 7, 1, 1), ShapeError);
}

TEST_CASE("maxpool and conv output lengths match the law") {
  Rng rng(3);
  const Tensor x = Tensor::randn({197, 4}, rng);
  CHECK(maxpool1d(x, 3, 2, 1).rows() == 99);

  const Tensor img = Tensor::randn({28, 28, 2}, rng);
  const Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
  const Tensor b = Tensor::zeros({3});
  const Tensor y = conv2d(img, w, b, 2, 1);
  CHECK(y.shape() == Shape{14, 14, 3});
}

TEST_CASE("layer_norm normalizes [2, 4]") {
  const Tensor x = Tensor::from_data({1, 2}, {2, 4});
  const Tensor g = Tensor::full({2}, 1.0);
  const Tensor b = Tensor::zeros({2});
  const double eps = 1e-6;
  const auto y = layer_norm(x, g, b, eps).data();
  // mean 3, population variance 1, eps inside the root
  const double expect = 1.0 / std::sqrt(1.0 + eps);
  CHECK(y[0] == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(expect).epsilon(1e-12));

  // mean 0, variance 1 before affine, within 1e-6
  Rng rng(8);
  const Tensor r = Tensor::randn({5, 16}, rng, 3.0);
  const Tensor gg = Tensor::full({16}, 1.0);
  const Tensor bb = Tensor::zeros({16});
  const auto out = layer_norm(r, gg, bb).data();
  for (std::size_t row = 0; row < 5; ++row) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mu += out[row * 16 + j];
    mu /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += (out[row * 16 + j] - mu) * (out[row * 16 + j] - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("gelu matches the exact erf form within 1e-3") {
  for (double v : {-3.0, -1.0, -0.1, 0.0, 0.5, 1.7, 4.0}) {
    const Tensor x = Tensor::from_data({1}, {v});
    const double approx = gelu(x).scalar();
    const double exact = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    CHECK(approx == doctest::Approx(exact).epsilon(0).scale(1).epsilon(1e-3));
  }
}

TEST_CASE("backward basics") {
  Rng rng(2);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);

  SUBCASE("sum gives all-ones") {
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
  }

  SUBCASE("sum of squares gives 2x") {
    sum(mul(x, x)).backward();
    for (std::size_t i = 0; i < x.data().size(); ++i) {
      CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-14));
    }
  }

  SUBCASE("second backward accumulates additively") {
    const Tensor loss = sum(x);
    loss.backward();
    loss.backward();
    for (double g : x.grad()) CHECK(g == 2.0);
    x.zero_grad();
    loss.backward();
    for (double g : x.grad()) CHECK(g == 1.0);
  }

  SUBCASE("non-scalar loss is rejected") {
    CHECK_THROWS_AS(mul(x, x).backward(), ContractError);
  }
}

TEST_CASE("per-op finite-difference checks") {
  Rng rng(42);

  SUBCASE("matmul") {
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
    const Tensor r = Tensor::randn({3, 2}, rng);
    auto fn = [&] { return project_to_scalar(matmul(a, b), r); };
    CHECK(max_grad_rel_error(fn, {&a, &b}) < 1e-4);
  }
  SUBCASE("add both forms, mul, scale") {
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor bias = Tensor::randn({4}, rng, 1.0, true);
    const Tensor r = Tensor::randn({3, 4}, rng);
    auto fn = [&] {
      return project_to_scalar(scale(add(add(a, b), bias), 1.7), r);
    };
    CHECK(max_grad_rel_error(fn, {&a, &b, &bias}) < 1e-4);
    Tensor c = Tensor::randn({3, 4}, rng, 1.0, true);
    auto fn2 = [&] { return project_to_scalar(mul(a, c), r); };
    CHECK(max_grad_rel_error(fn2, {&a, &c}) < 1e-4);
  }
  SUBCASE("gelu and softmax") {
    Tensor x = Tensor::randn({4, 5}, rng, 1.0, true);
    const Tensor r = Tensor::randn({4, 5}, rng);
    auto fn = [&] { return project_to_scalar(gelu(x), r); };
    CHECK(max_grad_rel_error(fn, {&x}) < 1e-4);
    auto fn2 = [&] { return project_to_scalar(softmax(x, 1), r); };
    CHECK(max_grad_rel_error(fn2, {&x}) < 1e-4);
    auto fn3 = [&] { return project_to_scalar(softmax(x, 0), r); };
    CHECK(max_grad_rel_error(fn3, {&x}) < 1e-4);
  }
  SUBCASE("layer_norm and linear") {
    Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
    Tensor g = Tensor::randn({6}, rng, 0.3, true);
    Tensor b = Tensor::randn({6}, rng, 0.3, true);
    Tensor w = Tensor::randn({6, 3}, rng, 1.0, true);
    Tensor wb = Tensor::randn({3}, rng, 1.0, true);
    const Tensor r = Tensor::randn({4, 3}, rng);
    auto fn = [&] { return project_to_scalar(linear(layer_norm(x, g, b), w, wb), r); };
    CHECK(max_grad_rel_error(fn, {&x, &g, &b, &w, &wb}) < 1e-4);
  }
  SUBCASE("conv1d and maxpool1d") {
    Tensor x = Tensor::randn({9, 3}, rng, 1.0, true);
    Tensor w = Tensor::randn({5, 3, 3}, rng, 1.0, true);
    Tensor b = Tensor::randn({5}, rng, 1.0, true);
    const Tensor r = Tensor::randn({5, 5}, rng);
    auto fn = [&] { return project_to_scalar(maxpool1d(conv1d(x, w, b, 1, 1), 3, 2, 1), r); };
    CHECK(max_grad_rel_error(fn, {&x, &w, &b}) < 1e-4);
  }
  SUBCASE("conv2d") {
    Tensor x = Tensor::randn({6, 6, 2}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 1.0, true);
    Tensor b = Tensor::randn({3}, rng, 1.0, true);
    const Tensor r = Tensor::randn({3, 3, 3}, rng);
    auto fn = [&] { return project_to_scalar(conv2d(x, w, b, 2, 1), r); };
    CHECK(max_grad_rel_error(fn, {&x, &w, &b}) < 1e-4);
  }
  SUBCASE("mean, reshape, transpose, slices, concats, patches") {
    Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
    const Tensor r1 = Tensor::randn({1, 6}, rng);
    auto fn = [&] { return project_to_scalar(mean(x, {0}), r1); };
    CHECK(max_grad_rel_error(fn, {&x}) < 1e-4);

    const Tensor r2 = Tensor::randn({6, 4}, rng);
    auto fn2 = [&] { return project_to_scalar(transpose(x), r2); };
    CHECK(max_grad_rel_error(fn2, {&x}) < 1e-4);

    const Tensor r3 = Tensor::randn({2, 2}, rng);
    auto fn3 = [&] {
      return project_to_scalar(slice_cols(slice_rows(x, 1, 3), 2, 4), r3);
    };
    CHECK(max_grad_rel_error(fn3, {&x}) < 1e-4);

    Tensor y = Tensor::randn({4, 6}, rng, 1.0, true);
    const Tensor r4 = Tensor::randn({8, 6}, rng);
    auto fn4 = [&] { return project_to_scalar(concat_rows({x, y}), r4); };
    CHECK(max_grad_rel_error(fn4, {&x, &y}) < 1e-4);
    const Tensor r5 = Tensor::randn({4, 12}, rng);
    auto fn5 = [&] { return project_to_scalar(concat_cols({x, y}), r5); };
    CHECK(max_grad_rel_error(fn5, {&x, &y}) < 1e-4);

    Tensor img = Tensor::randn({4, 4, 3}, rng, 1.0, true);
    const Tensor r6 = Tensor::randn({4, 12}, rng);
    auto fn6 = [&] { return project_to_scalar(extract_patches(img, 2), r6); };
    CHECK(max_grad_rel_error(fn6, {&img}) < 1e-4);

    const Tensor r7 = Tensor::randn({24}, rng);
    auto fn7 = [&] { return project_to_scalar(reshape(x, {24}), r7); };
    CHECK(max_grad_rel_error(fn7, {&x}) < 1e-4);
  }
  SUBCASE("cross_entropy") {
    Tensor logits = Tensor::randn({4, 5}, rng, 1.0, true);
    const std::vector<std::size_t> labels{0, 3, 2, 4};
    auto fn = [&] { return cross_entropy(logits, labels, 0.1); };
    CHECK(max_grad_rel_error(fn, {&logits}) < 1e-4);
    auto fn0 = [&] { return cross_entropy(logits, labels, 0.0); };
    CHECK(max_grad_rel_error(fn0, {&logits}) < 1e-4);
  }
}

TEST_CASE("cross_entropy value against a direct expansion") {
  const Tensor logits = t2(1, 3, {1.0, 2.0, 0.5});
  const std::vector<std::size_t> labels{1};
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.5);
  double expect = 0.0;
  const double off = 0.1 / 3, on = 0.9 + off;
  const std::vector<double> raw{1.0, 2.0, 0.5};
  for (std::size_t j = 0; j < 3; ++j) {
    const double logp = raw[j] - std::log(z);
    expect -= (j == 1 ? on : off) * logp;
  }
  CHECK(cross_entropy(logits, labels, 0.1).scalar() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("no-grad mode records no tape") {
  Rng rng(1);
  Tensor x = Tensor::randn({2, 2}, rng, 1.0, true);
  NoGradGuard guard;
  const Tensor y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("deterministic forward and gradients under a fixed seed") {
  auto run = [] {
    Rng rng(123);
    Tensor x = Tensor::randn({4, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({4, 4}, rng, 1.0, true);
    const Tensor loss = sum(gelu(matmul(x, w)));
    loss.backward();
    std::vector<double> out = x.grad();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.push_back(loss.scalar());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
  Tensor x = Tensor::zeros({2}, true);
  CHECK_THROWS_AS((void)x.grad(), ContractError);
}

TEST_CASE("independent tapes run concurrently on separate threads") {
  auto work = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn({6, 6}, rng, 1.0, true);
    Tensor w = Tensor::randn({6, 6}, rng, 1.0, true);
    const Tensor loss = sum(gelu(matmul(softmax(x, 1), w)));
    loss.backward();
    std::vector<double> out = x.grad();
    out.push_back(loss.scalar());
    return out;
  };
  const auto expect_a = work(100);
  const auto expect_b = work(200);

  std::vector<double> got_a, got_b;
  std::thread ta([&] { got_a = work(100); });
  std::thread tb([&] { got_b = work(200); });
  ta.join();
  tb.join();
  CHECK(got_a == expect_a);
  CHECK(got_b == expect_b);
}

TEST_CASE("maxpool rejects padding that swallows the kernel") {
  Rng rng(1);
  const Tensor x = Tensor::randn({5, 2}, rng);
  CHECK_THROWS_AS(maxpool1d(x, 3, 2, 3), ShapeError);
}
