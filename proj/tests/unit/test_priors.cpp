#include <doctest.h>
#include <torch/torch.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <random>

#include "helpers.hpp"
#include "msgnet/errors.hpp"
#include "msgnet/priors.hpp"
#include "msgnet/verify.hpp"

using namespace msgnet;
using priors::PixelSnail;

namespace {

PixelSnail randomized(const PriorConfig& cfg, std::uint64_t seed) {
    PixelSnail m(cfg, seed);
    m->randomize_output_head(seed + 100);
    m->eval();
    return m;
}

torch::Tensor tokens_for(const PriorConfig& cfg, std::int64_t n) {
    return torch::randint(0, cfg.vocab_size, {n, cfg.grid_height, cfg.grid_width}, torch::kLong);
}

torch::Tensor condition_for(const PriorConfig& cfg, std::int64_t n) {
    return torch::randint(0, cfg.condition_classes, {n, cfg.condition_height, cfg.condition_width}, torch::kLong);
}

}  // namespace

TEST_SUITE("priors") {

TEST_CASE("perturbing a token never changes logits at or before it") {
    torch::manual_seed(1);
    torch::NoGradGuard no_grad;
    for (const auto& cfg : {verify::miniature_latent_prior(), verify::miniature_layout_prior()}) {
        auto m = randomized(cfg, 2);
        const auto cells = cfg.grid_height * cfg.grid_width;
        for (std::int64_t p = 0; p < cells; p += 5) {
            const auto x = tokens_for(cfg, 1);
            const auto c = cfg.conditional() ? condition_for(cfg, 1) : torch::Tensor();
            auto y = x.clone();
            y.view({-1})[p] = (x.view({-1})[p].item<std::int64_t>() + 1) % cfg.vocab_size;
            const auto a = m->logits(x, c).reshape({cells, -1});
            const auto b = m->logits(y, c).reshape({cells, -1});
            CHECK(torch::equal(a.slice(0, 0, p + 1), b.slice(0, 0, p + 1)));
            if (p + 1 < cells) {
                CHECK(!torch::equal(a.slice(0, p + 1), b.slice(0, p + 1)));
            }
        }
    }
}

TEST_CASE("changing the last token changes nothing") {
    torch::NoGradGuard no_grad;
    const auto cfg = verify::miniature_latent_prior();
    auto m = randomized(cfg, 3);
    const auto x = tokens_for(cfg, 1);
    const auto c = condition_for(cfg, 1);
    auto y = x.clone();
    y[0][cfg.grid_height - 1][cfg.grid_width - 1] = (y[0][cfg.grid_height - 1][cfg.grid_width - 1] + 1) % cfg.vocab_size;
    CHECK(torch::equal(m->logits(x, c), m->logits(y, c)));
}

TEST_CASE("untrained prior is uniform") {
    const auto cfg = ModelConfig::desk_default().latent_prior;
    PixelSnail m(cfg, 4);
    m->eval();
    torch::NoGradGuard no_grad;
    const auto nll = m->nll(tokens_for(cfg, 2), condition_for(cfg, 2)).item<double>();
    CHECK(nll == doctest::Approx(std::log(256.0)).epsilon(1e-6));
    CHECK(std::log(256.0) == doctest::Approx(5.545).epsilon(1e-3));
}

TEST_CASE("nll is the mean cross-entropy of the logits") {
    torch::NoGradGuard no_grad;
    const auto cfg = verify::miniature_latent_prior();
    auto m = randomized(cfg, 5);
    const auto x = tokens_for(cfg, 3);
    const auto c = condition_for(cfg, 3);
    const auto logp = torch::log_softmax(m->logits(x, c).to(torch::kDouble), -1);
    double sum = 0.0;
    const auto flat_logp = logp.reshape({-1, cfg.vocab_size});
    const auto flat_x = x.reshape({-1});
    for (std::int64_t i = 0; i < flat_x.size(0); ++i) {
        sum -= flat_logp[i][flat_x[i].item<std::int64_t>()].item<double>();
    }
    CHECK(m->nll(x, c).item<double>() == doctest::Approx(sum / static_cast<double>(flat_x.size(0))).epsilon(1e-5));
}

TEST_CASE("softmax rows are normalized") {
    torch::NoGradGuard no_grad;
    const auto cfg = verify::miniature_latent_prior();
    auto m = randomized(cfg, 6);
    const auto probs = torch::softmax(m->logits(tokens_for(cfg, 4), condition_for(cfg, 4)), -1);
    CHECK((probs.sum(-1) - 1).abs().max().item<float>() <= 1e-6F);
}

TEST_CASE("input validation") {
    const auto cfg = verify::miniature_latent_prior();
    PixelSnail m(cfg, 7);
    auto bad = tokens_for(cfg, 1);
    bad[0][0][0] = cfg.vocab_size;
    CHECK_THROWS_AS(m->logits(bad, condition_for(cfg, 1)), ValidationError);
    CHECK_THROWS_AS(m->logits(torch::zeros({1, 3, 3}, torch::kLong)), ShapeError);
    CHECK_THROWS_AS(m->logits(tokens_for(cfg, 1), torch::zeros({1, 2, 2}, torch::kLong)), ShapeError);
    CHECK_THROWS_AS(m->logits(tokens_for(cfg, 1), torch::full({1, cfg.condition_height, cfg.condition_width},
                                                                cfg.condition_classes + 1, torch::kLong)),
                    ValidationError);
    PixelSnail u(verify::miniature_layout_prior(), 7);
    CHECK_THROWS_AS(u->logits(tokens_for(u->config(), 1), condition_for(cfg, 1)), ShapeError);
    auto bad_cfg = cfg;
    bad_cfg.dropout = 1.0;
    CHECK_THROWS(PixelSnail(bad_cfg, 1));
}

TEST_CASE("sampling is deterministic per seed") {
    const auto cfg = verify::miniature_latent_prior();
    auto m = randomized(cfg, 8);
    const auto c = condition_for(cfg, 3);
    const auto a = priors::sample(m, 3, c, 1.0, 99);
    const auto b = priors::sample(m, 3, c, 1.0, 99);
    const auto d = priors::sample(m, 3, c, 1.0, 100);
    CHECK(a.sizes() == torch::IntArrayRef({3, cfg.grid_height, cfg.grid_width}));
    CHECK(torch::equal(a, b));
    CHECK(!torch::equal(a, d));
    CHECK(a.min().item<std::int64_t>() >= 0);
    CHECK(a.max().item<std::int64_t>() < cfg.vocab_size);
    CHECK_THROWS_AS(priors::sample(m, 1, c.slice(0, 0, 1), 0.0, 1), ValidationError);
    CHECK_THROWS_AS(priors::sample(m, 1, c.slice(0, 0, 1), -1.0, 1), ValidationError);
}

TEST_CASE("sampling restores the training flag") {
    const auto cfg = verify::miniature_layout_prior();
    PixelSnail m(cfg, 9);
    m->train();
    priors::sample(m, 1, {}, 1.0, 1);
    CHECK(m->is_training());
}

TEST_CASE("low temperature approaches greedy decoding") {
    torch::NoGradGuard no_grad;
    const auto cfg = verify::miniature_latent_prior();
    auto m = randomized(cfg, 10);
    const auto c = condition_for(cfg, 2);
    auto greedy = torch::zeros({2, cfg.grid_height, cfg.grid_width}, torch::kLong);
    for (std::int64_t r = 0; r < cfg.grid_height; ++r) {
        for (std::int64_t col = 0; col < cfg.grid_width; ++col) {
            const auto logits = m->logits(greedy, c);
            greedy.select(1, r).select(1, col).copy_(logits.select(1, r).select(1, col).argmax(-1));
        }
    }
    CHECK(torch::equal(priors::sample(m, 2, c, 1e-4, 5), greedy));
}

TEST_CASE("first position of an untrained prior is uniform (chi-square, alpha 0.01)") {
    PriorConfig cfg = verify::miniature_layout_prior();
    cfg.grid_height = 2;
    cfg.grid_width = 2;
    PixelSnail m(cfg, 11);
    const std::int64_t n = 10000;
    const auto s = priors::sample(m, n, {}, 1.0, 12);
    const auto counts = torch::bincount(s.select(1, 0).select(1, 0), {}, cfg.vocab_size).to(torch::kDouble);
    const double expected = static_cast<double>(n) / static_cast<double>(cfg.vocab_size);
    const double stat = ((counts - expected).square() / expected).sum().item<double>();
    const boost::math::chi_squared dist(static_cast<double>(cfg.vocab_size - 1));
    CHECK(stat < boost::math::quantile(boost::math::complement(dist, 0.01)));
}

TEST_CASE("condition changes the logits") {
    torch::NoGradGuard no_grad;
    const auto cfg = verify::miniature_latent_prior();
    auto m = randomized(cfg, 13);
    const auto x = tokens_for(cfg, 1);
    const auto background = torch::zeros({1, cfg.condition_height, cfg.condition_width}, torch::kLong);
    auto object = background.clone();
    object[0][1][2] = 2;
    CHECK((m->logits(x, background) - m->logits(x, object)).abs().max().item<float>() > 0.0F);
}

}  // TEST_SUITE
