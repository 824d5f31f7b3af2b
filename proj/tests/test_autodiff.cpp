// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <span>

#include "doctest.h"
#include "promptfuse/autodiff.hpp"
#include "promptfuse/gradcheck.hpp"
#include "gradcheck_cases.hpp"
#include "test_support.hpp"

using namespace promptfuse;
using promptfuse::testing::finite_difference_check;
using promptfuse::testing::random_tensor;
using promptfuse::testing::weighted_sum;
using promptfuse::testing::primitive_cases;
using promptfuse::testing::pick;
using Builder = promptfuse::testing::ScalarBuilder;
using Leaves = std::vector<ad::Var<double>>;


TEST_SUITE("autodiff") {
  TEST_CASE("every primitive matches central differences on random inputs") {
    std::mt19937_64 rng(2024);
    std::size_t cases = 0;
    for (const auto& c : primitive_cases()) {
      for (int trial = 0; trial < 2; ++trial) {
        CAPTURE(c.name);
        CAPTURE(trial);
        const auto result = finite_difference_check(c.build, c.inputs(rng));
        CHECK(result.checked > 0);
        CHECK(result.max_relative_error <= 1e-4);
        ++cases;
      }
    }
    CHECK(cases >= 20);
  }

  TEST_CASE("composed expression with shared subterms") {
    std::mt19937_64 rng(5);
    const auto result = finite_difference_check(
        [](auto& g, Leaves& x) {
          auto h = ad::tanh(ad::matmul(x[0], x[1]));
          auto y = ad::add(h, ad::mul(h, h));
          return weighted_sum(g, ad::concat_rows({y, ad::mean_rows(y)}), 99);
        },
        {random_tensor(3, 4, rng), random_tensor(4, 2, rng)});
    CHECK(result.max_relative_error <= 1e-4);
  }

  TEST_CASE("masked entries have exactly zero probability") {
    ad::Graph<float> g;
    Tensor<float> logits(2, 3, std::vector<float>{1, 2, 3, 50, -50, 0});
    Tensor<float> mask(2, 3);
    mask(0, 2) = ad::kMaskedLogit<float>;
    mask(1, 0) = ad::kMaskedLogit<float>;
    const auto p = ad::masked_softmax(g.constant(logits), mask).value();
    CHECK(p(0, 2) == 0.0f);
    CHECK(p(1, 0) == 0.0f);
    CHECK(p(0, 0) + p(0, 1) == doctest::Approx(1.0f));
  }

  TEST_CASE("fully masked row is rejected") {
    ad::Graph<double> g;
    Tensor<double> mask(2, 3);
    for (std::size_t c = 0; c < 3; ++c) mask(1, c) = ad::kMaskedLogit<double>;
    auto x = g.constant(Tensor<double>(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6}));
    CHECK_THROWS_AS(ad::masked_softmax(x, mask), Error);
  }

  TEST_CASE("softmax closed forms") {
    ad::Graph<double> g;
    auto p = ad::masked_softmax(g.constant(Tensor<double>(1, 2, std::vector<double>{0, std::log(3.0)})),
                                Tensor<double>(1, 2))
                 .value();
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));
  }

  TEST_CASE("polynomial and linear derivatives") {
    ad::Graph<double> g;
    auto x = g.leaf(Tensor<double>::scalar(3.0), true);
    g.backward(ad::mul(x, x));
    CHECK((*g.grad(x))[0] == 6.0);

    ad::Graph<double> h;
    auto w = h.leaf(Tensor<double>(2, 3, 0.5), true);
    auto v = h.constant(Tensor<double>(3, 1, std::vector<double>{1, -2, 4}));
    h.backward(ad::sum(ad::matmul(w, v)));
    const auto dw = *h.grad(w);
    for (std::size_t r = 0; r < 2; ++r) {
      CHECK(dw(r, 0) == 1.0);
      CHECK(dw(r, 1) == -2.0);
      CHECK(dw(r, 2) == 4.0);
    }
  }

  TEST_CASE("two-layer network matches the oracle") {
    std::mt19937_64 rng(77);
    const auto x = random_tensor(5, 4, rng);
    const auto result = finite_difference_check(
        [&](auto& g, Leaves& p) {
          auto h = ad::tanh(ad::add_row(ad::matmul(g.constant(x), p[0]), p[1]));
          auto logits = ad::matmul(h, p[2]);
          const std::vector<int> targets{0, 2, 1, 1, 0};
          return ad::cross_entropy(logits, targets, -1);
        },
        {random_tensor(4, 6, rng), random_tensor(1, 6, rng), random_tensor(6, 3, rng)});
    CHECK(result.max_relative_error <= 1e-4);
  }

  TEST_CASE("oracle closed forms") {
    const double three = 3.0, zero = 0.0;
    CHECK(finite_difference_gradient([](auto p) { return p[0] * p[0]; }, std::span(&three, 1), 1e-5)[0] ==
          doctest::Approx(6.0).epsilon(1e-8));
    CHECK(std::abs(finite_difference_gradient([](auto p) { return std::exp(p[0]); }, std::span(&zero, 1),
                                              1e-5)[0] - 1.0) < 1e-9);
    CHECK(std::abs(finite_difference_gradient([](auto) { return 2.5; }, std::span(&three, 1), 1e-5)[0]) < 1e-12);
    CHECK_THROWS_AS(finite_difference_gradient([](auto p) { return p[0] > 3.0 ? NAN : 0.0; },
                                               std::span(&three, 1), 1e-5),
                    Error);
  }

  TEST_CASE("repeated backward is bit-identical") {
    std::mt19937_64 rng(8);
    ad::Graph<double> g;
    auto a = g.leaf(random_tensor(3, 4, rng), true);
    auto b = g.leaf(random_tensor(4, 2, rng), true);
    auto y = weighted_sum(g, ad::gelu(ad::matmul(a, b)), 3);
    g.backward(y);
    const auto first = *g.grad(a);
    g.backward(y);
    CHECK(*g.grad(a) == first);
  }

  TEST_CASE("shape errors and graph misuse") {
    ad::Graph<double> g;
    auto a = g.leaf(Tensor<double>(2, 3), true);
    auto b = g.leaf(Tensor<double>(3, 2), true);
    CHECK_THROWS_AS(ad::add(a, b), Error);
    try {
      ad::add(a, b);
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::kShapeMismatch);
    }
    CHECK_THROWS_AS(g.backward(a), Error);
    ad::Graph<double> other;
    auto c = other.leaf(Tensor<double>(2, 3), true);
    CHECK_THROWS_AS(ad::add(a, c), Error);
  }

  TEST_CASE("constants receive no gradient") {
    ad::Graph<double> g;
    auto w = g.leaf(Tensor<double>(1, 2, 1.0), true);
    auto c = g.constant(Tensor<double>(1, 2, 3.0));
    g.backward(ad::sum(ad::mul(w, c)));
    CHECK_FALSE(g.grad(c).has_value());
    CHECK((*g.grad(w))[0] == 3.0);
  }

  TEST_CASE("cross entropy ignores marked targets") {
    ad::Graph<double> g;
    auto logits = g.leaf(Tensor<double>(2, 3, std::vector<double>{0, 0, 0, 5, 1, 2}), true);
    const std::vector<int> targets{2, -1};
    auto loss = ad::cross_entropy(logits, targets, -1);
    CHECK(loss.value()[0] == doctest::Approx(std::log(3.0)));
    g.backward(loss);
    const auto grad = *g.grad(logits);
    for (std::size_t c = 0; c < 3; ++c) CHECK(grad(1, c) == 0.0);
  }
}
