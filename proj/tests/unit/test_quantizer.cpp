#include <doctest.h>
#include <torch/torch.h>

#include <cmath>
#include <limits>
#include <random>

#include "msgnet/errors.hpp"
#include "msgnet/quantizer.hpp"

using namespace msgnet;
using quantizer::quantize;

namespace {

torch::Tensor dyadic(std::mt19937& rng, std::vector<std::int64_t> shape) {
    auto t = torch::empty(shape);
    std::uniform_int_distribution<int> pick(-6, 6);
    auto* p = t.data_ptr<float>();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        p[i] = static_cast<float>(pick(rng)) * 0.5F;
    }
    return t;
}

}  // namespace

TEST_SUITE("quantizer") {

TEST_CASE("encodings equal to an entry map to it with zero losses") {
    torch::manual_seed(3);
    const auto entries = torch::randn({6, 4});
    const auto enc = entries[3].expand({5, 7, 4}).contiguous();
    const auto q = quantize(enc, entries);
    CHECK(q.indices.eq(3).all().item<bool>());
    CHECK(q.codebook_loss.item<float>() == 0.0F);
    CHECK(q.commitment_loss.item<float>() == 0.0F);
    CHECK(torch::equal(q.quantized, enc));
}

TEST_CASE("two-entry nearest prototype") {
    const auto entries = torch::tensor({0.0F, 0.0F, 1.0F, 1.0F}).reshape({2, 2});
    const auto q = quantize(torch::tensor({0.9F, 0.8F}).reshape({1, 2}), entries);
    CHECK(q.indices[0].item<std::int64_t>() == 1);
    CHECK(torch::equal(q.quantized, torch::tensor({1.0F, 1.0F}).reshape({1, 2})));
}

TEST_CASE("losses are squared distances before the commitment weight") {
    const auto entries = torch::tensor({0.0F, 0.0F, 5.0F, 5.0F}).reshape({2, 2});
    const auto q = quantize(torch::tensor({1.0F, 0.0F}).reshape({1, 2}), entries);
    CHECK(q.indices[0].item<std::int64_t>() == 0);
    CHECK(q.codebook_loss.item<float>() == doctest::Approx(1.0));
    CHECK(q.commitment_loss.item<float>() == doctest::Approx(1.0));
}

TEST_CASE("ties go to the lowest index") {
    const auto entries = torch::tensor({1.0F, 0.0F, -1.0F, 0.0F, 1.0F, 0.0F}).reshape({3, 2});
    const auto q = quantize(torch::zeros({1, 2}), entries);
    CHECK(q.indices[0].item<std::int64_t>() == 0);
    const auto q2 = quantize(torch::tensor({1.0F, 0.0F}).reshape({1, 2}), entries);
    CHECK(q2.indices[0].item<std::int64_t>() == 0);
}

TEST_CASE("matches a brute-force scan on random small instances") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::int64_t k = 2 + trial % 15;
        const std::int64_t d = 1 + trial % 8;
        const std::int64_t n = 1 + trial % 13;
        const auto entries = dyadic(rng, {k, d});
        const auto x = dyadic(rng, {n, d});
        const auto q = quantize(x, entries);
        for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < k; ++j) {
                double s = 0;
                for (std::int64_t c = 0; c < d; ++c) {
                    const double diff = x[i][c].item<double>() - entries[j][c].item<double>();
                    s += diff * diff;
                }
                if (s < best_d) {
                    best_d = s;
                    best = j;
                }
            }
            REQUIRE(q.indices[i].item<std::int64_t>() == best);
        }
    }
}

TEST_CASE("quantizing the quantized output is idempotent") {
    torch::manual_seed(5);
    const auto entries = torch::randn({8, 3});
    const auto q = quantize(torch::randn({4, 4, 3}), entries);
    const auto again = quantize(q.quantized, entries);
    CHECK(torch::equal(again.indices, q.indices));
    CHECK(again.codebook_loss.item<float>() == 0.0F);
    CHECK(again.commitment_loss.item<float>() == 0.0F);
}

TEST_CASE("loss gradients are routed to one side each") {
    torch::manual_seed(6);
    auto enc = torch::randn({5, 3}, torch::requires_grad());
    auto entries = torch::randn({4, 3}, torch::requires_grad());
    quantize(enc, entries).codebook_loss.backward();
    CHECK(!enc.grad().defined());
    CHECK(entries.grad().abs().sum().item<float>() > 0.0F);

    auto enc2 = torch::randn({5, 3}, torch::requires_grad());
    auto entries2 = torch::randn({4, 3}, torch::requires_grad());
    quantize(enc2, entries2).commitment_loss.backward();
    CHECK(!entries2.grad().defined());
    CHECK(enc2.grad().abs().sum().item<float>() > 0.0F);
}

TEST_CASE("input validation") {
    const auto entries = torch::randn({4, 3});
    CHECK_THROWS_AS(quantize(torch::randn({2, 5}), entries), ShapeError);
    CHECK_THROWS_AS(quantize(torch::randn({2, 3}), torch::randn({1, 3})), ShapeError);
    auto bad = torch::randn({2, 3});
    bad[1][2] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(quantize(bad, entries), ValidationError);
    bad[1][2] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(quantize(bad, entries), ValidationError);
}

TEST_CASE("straight-through forward is the quantized tensor") {
    torch::manual_seed(7);
    const auto entries = torch::randn({8, 4});
    auto enc = torch::randn({2, 3, 3, 4}, torch::requires_grad());
    const auto q = quantize(enc, entries);
    const auto y = quantizer::straight_through(enc, q.quantized);
    CHECK(torch::equal(y, q.quantized));
    y.sum().backward();
    CHECK(torch::equal(enc.grad(), torch::ones_like(enc)));
    CHECK_THROWS_AS(quantizer::straight_through(enc, q.quantized.slice(0, 0, 1)), ShapeError);
}

TEST_CASE("straight-through gradient equals a finite-difference gradient at the quantized input") {
    torch::manual_seed(8);
    const auto entries = torch::randn({6, 3}, torch::kDouble);
    const auto decoder = torch::randn({3, 2}, torch::kDouble);
    const auto target = torch::randn({4, 2}, torch::kDouble);
    auto enc = torch::randn({4, 3}, torch::TensorOptions().dtype(torch::kDouble).requires_grad(true));
    const auto q = quantize(enc, entries);
    const auto loss_of = [&](const torch::Tensor& z) { return (z.matmul(decoder) - target).square().mean(); };
    loss_of(quantizer::straight_through(enc, q.quantized)).backward();

    auto z = q.quantized.detach().clone();
    const double h = 1e-6;
    for (std::int64_t i = 0; i < z.size(0); ++i) {
        for (std::int64_t c = 0; c < z.size(1); ++c) {
            auto plus = z.clone();
            auto minus = z.clone();
            plus[i][c] += h;
            minus[i][c] -= h;
            const double fd = (loss_of(plus).item<double>() - loss_of(minus).item<double>()) / (2 * h);
            CHECK(enc.grad()[i][c].item<double>() == doctest::Approx(fd).epsilon(1e-7));
        }
    }
}

TEST_CASE("codebook lookup and initialization scale") {
    quantizer::Codebook book(256, 64, 42);
    CHECK(book->entry_count() == 256);
    CHECK(book->dim() == 64);
    const auto sd = book->entries.std().item<double>();
    CHECK(sd == doctest::Approx(1.0 / 8.0).epsilon(0.05));
    const auto idx = torch::tensor({3, 0, 255}, torch::kLong);
    CHECK(torch::equal(book->lookup(idx), book->entries.detach().index_select(0, idx)));
    quantizer::Codebook same(256, 64, 42);
    CHECK(torch::equal(book->entries, same->entries));
}

TEST_CASE("utilization and perplexity") {
    quantizer::UsageTracker empty(4);
    CHECK_THROWS_AS(empty.summary(), ValidationError);

    quantizer::UsageTracker single(8);
    single.record(torch::zeros({3, 5}, torch::kLong));
    CHECK(single.summary().perplexity == doctest::Approx(1.0));
    CHECK(single.summary().total == 15);

    quantizer::UsageTracker uniform(256);
    uniform.record(torch::arange(256, torch::kLong));
    uniform.record(torch::arange(256, torch::kLong).reshape({16, 16}));
    const auto u = uniform.summary();
    CHECK(u.perplexity == doctest::Approx(256.0));
    std::int64_t sum = 0;
    for (const auto c : u.counts) {
        sum += c;
    }
    CHECK(sum == u.total);

    const double expected = std::exp(-(0.75 * std::log(0.75) + 0.25 * std::log(0.25)));
    CHECK(quantizer::perplexity({3, 1}) == doctest::Approx(expected));
    CHECK(quantizer::perplexity({3, 1}) == doctest::Approx(1.7548).epsilon(1e-4));
}

}  // TEST_SUITE
