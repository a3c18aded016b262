#include <doctest.h>
#include <torch/torch.h>

#include <cmath>
#include <limits>
#include <vector>

#include "helpers.hpp"
#include "msgnet/errors.hpp"
#include "msgnet/sampler.hpp"
#include "msgnet/tensors.hpp"
#include "msgnet/trainer.hpp"

using namespace msgnet;
using namespace msgnet::trainer;

namespace {

torch::Tensor images_of(const shapeworld::Dataset& ds) { return tensors::from_images(ds.images); }

bool same_parameters(torch::nn::Module& a, torch::nn::Module& b) {
    const auto pa = a.named_parameters();
    const auto pb = b.named_parameters();
    if (pa.size() != pb.size()) {
        return false;
    }
    for (const auto& item : pa) {
        if (!torch::equal(item.value(), pb[item.key()])) {
            return false;
        }
    }
    return true;
}

CodeCorpus random_corpus(const ModelConfig& cfg, std::int64_t n, std::uint64_t seed) {
    torch::manual_seed(seed);
    CodeCorpus c;
    c.tokens = torch::randint(0, cfg.latent_prior.vocab_size, {n, cfg.latent_prior.grid_height, cfg.latent_prior.grid_width},
                              torch::kLong);
    c.layouts = torch::randint(0, shapeworld::kLayoutClasses,
                               {n, cfg.latent_prior.condition_height, cfg.latent_prior.condition_width}, torch::kLong);
    return c;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("concatenated codes stack the attention grid on top") {
    const auto a = torch::randint(0, 9, {3, 4, 5}, torch::kLong);
    const auto p = torch::randint(0, 9, {3, 4, 5}, torch::kLong);
    const auto c = concat_codes(a, p);
    CHECK(c.sizes() == torch::IntArrayRef({3, 8, 5}));
    const auto [top, bottom] = sampler::split_code(c);
    CHECK(torch::equal(top, a));
    CHECK(torch::equal(bottom, p));
    CHECK_THROWS_AS(concat_codes(a, p.slice(1, 0, 3)), ShapeError);
}

TEST_CASE("single-image dataset is memorized") {
    auto cfg = testing::small_config();
    cfg.backbone.hidden_dim = 32;
    cfg.backbone.residual_dim = 16;
    cfg.quantizer.codebook_num = 64;
    cfg.quantizer.codebook_size = 16;
    cfg.quantizer.code_reset_interval = 50;
    cfg.vqvae_optimizer = OptimizerConfig{2e-3, Schedule::constant, 1, 500, 2000};
    cfg.derive();
    const auto ds = shapeworld::generate_dataset(cfg.data, 32, 4, 1);
    VqVaeTrainer t(cfg);
    const auto x = images_of(ds);
    t.run(x);
    CHECK(t.iteration() == 500);
    t.model()->eval();
    torch::NoGradGuard no_grad;
    const auto mse = t.model()->forward(x).reconstruction_loss.item<double>();
    CHECK(mse < 0.01);
}

TEST_CASE("logged losses decompose into the total") {
    auto cfg = testing::small_config();
    const auto ds = shapeworld::generate_dataset(cfg.data, 32, 5, 8);
    VqVaeTrainer t(cfg);
    const auto r = t.step(images_of(ds));
    CHECK(r.iteration == 0);
    CHECK(r.learning_rate == doctest::Approx(cfg.vqvae_optimizer.learning_rate));
    CHECK(r.total == doctest::Approx(r.reconstruction + r.codebook + cfg.quantizer.commitment * r.commitment).epsilon(1e-5));
    CHECK(t.iteration() == 1);
}

TEST_CASE("VQ-VAE resume matches an uninterrupted run") {
    auto cfg = testing::small_config();
    cfg.vqvae_optimizer.iterations = 12;
    cfg.quantizer.code_reset_interval = 3;
    const auto x = images_of(shapeworld::generate_dataset(cfg.data, 32, 6, 16));

    std::vector<double> full;
    VqVaeTrainer a(cfg);
    a.run(x, -1, [&](const StepRecord& r) { full.push_back(r.total); });

    testing::TempDir dir("resume");
    VqVaeTrainer b(cfg);
    b.run(x, 6);
    CHECK(b.iteration() == 6);
    b.checkpoint().save(dir.path() / "half.msgf");
    VqVaeTrainer c(Checkpoint::load(dir.path() / "half.msgf"));
    std::vector<double> tail;
    c.run(x, -1, [&](const StepRecord& r) { tail.push_back(r.total); });
    REQUIRE(tail.size() == 6);
    REQUIRE(full.size() == 12);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(tail[i] == doctest::Approx(full[6 + i]).epsilon(1e-6));
    }
    CHECK(same_parameters(*a.model(), *c.model()));
}

TEST_CASE("prior resume matches an uninterrupted run") {
    auto cfg = testing::small_config();
    cfg.latent_optimizer.iterations = 10;
    cfg.latent_prior.dropout = 0.2;
    const auto corpus = random_corpus(cfg, 12, 3);

    std::vector<double> full;
    PriorTrainer a(cfg, Phase::latent_prior, 77);
    a.run(corpus.tokens, corpus.layouts, -1, [&](const StepRecord& r) { full.push_back(r.total); });

    PriorTrainer b(cfg, Phase::latent_prior, 77);
    b.run(corpus.tokens, corpus.layouts, 5);
    PriorTrainer c(Checkpoint::deserialize(b.checkpoint().serialize()));
    std::vector<double> tail;
    c.run(corpus.tokens, corpus.layouts, -1, [&](const StepRecord& r) { tail.push_back(r.total); });
    REQUIRE(tail.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(tail[i] == doctest::Approx(full[5 + i]).epsilon(1e-6));
    }
    CHECK(c.checkpoint().parent_hash == 77);
}

TEST_CASE("checkpoints reproduce probe outputs bitwise") {
    auto cfg = testing::small_config();
    cfg.vqvae_optimizer.iterations = 3;
    const auto ds = shapeworld::generate_dataset(cfg.data, 32, 7, 8);
    const auto ck = train_vqvae(cfg, ds);
    CHECK(ck.phase == Phase::vqvae);
    CHECK(ck.iteration == 3);
    CHECK(ck.parent_hash == cfg.code_space_hash());
    testing::TempDir dir("probe");
    ck.save(dir.path() / "vq.msgf");
    auto before = load_vqvae(ck);
    auto after = load_vqvae(Checkpoint::load(dir.path() / "vq.msgf"));
    torch::NoGradGuard no_grad;
    const auto probe = images_of(ds).slice(0, 0, 4);
    CHECK(torch::equal(before->forward(probe).reconstruction, after->forward(probe).reconstruction));
}

TEST_CASE("code extraction") {
    auto cfg = testing::small_config();
    cfg.vqvae_optimizer.iterations = 2;
    const auto ds = shapeworld::generate_dataset(cfg.data, 32, 8, 6);
    const auto ck = train_vqvae(cfg, ds);
    const auto corpus = extract_codes(ck, ds);
    CHECK(corpus.size() == 6);
    CHECK(corpus.tokens.sizes() == torch::IntArrayRef({6, 16, 8}));
    CHECK(corpus.layouts.sizes() == torch::IntArrayRef({6, 8, 8}));

    auto model = load_vqvae(ck);
    model->eval();
    torch::NoGradGuard no_grad;
    const auto [a, p] = model->encode_indices(images_of(ds));
    CHECK(torch::equal(corpus.tokens, concat_codes(a, p)));
    for (std::size_t i = 0; i < ds.layouts.size(); ++i) {
        CHECK(torch::equal(corpus.layouts[static_cast<std::int64_t>(i)],
                           tensors::from_layouts({shapeworld::downsample_layout(ds.layouts[i], 4)})[0]));
    }

    const auto back = CodeCorpus::from_checkpoint(corpus.to_checkpoint(cfg, ck.parent_hash));
    CHECK(torch::equal(back.tokens, corpus.tokens));
    CHECK(torch::equal(back.layouts, corpus.layouts));

    auto missing = ds;
    missing.layouts[2] = shapeworld::LayoutMap{};
    CHECK_THROWS_AS(extract_codes(ck, missing), ValidationError);
    CHECK_THROWS_AS(extract_codes(corpus.to_checkpoint(cfg, 0), ds), PrerequisiteError);
}

TEST_CASE("prior training leaves the VQ-VAE untouched") {
    auto cfg = testing::small_config();
    cfg.vqvae_optimizer.iterations = 2;
    cfg.latent_optimizer.iterations = 4;
    const auto ds = shapeworld::generate_dataset(cfg.data, 32, 9, 6);
    const auto ck = train_vqvae(cfg, ds);
    auto reference = load_vqvae(ck);
    const auto serialized = ck.serialize();
    const auto corpus = extract_codes(ck, ds);
    const auto prior = train_latent_prior(cfg, corpus, ck.parent_hash);
    CHECK(prior.phase == Phase::latent_prior);
    CHECK(ck.serialize() == serialized);
    auto again = load_vqvae(ck);
    CHECK(same_parameters(*reference, *again));
    for (const auto& [name, t] : prior.tensors) {
        CHECK(name.find("codebook") == std::string::npos);
    }
}

TEST_CASE("vocabulary and phase mismatches are rejected") {
    auto cfg = testing::small_config();
    auto corpus = random_corpus(cfg, 4, 1);
    corpus.tokens[0][0][0] = cfg.latent_prior.vocab_size;
    CHECK_THROWS_AS(train_latent_prior(cfg, corpus, 0), ValidationError);

    const auto bad_grid = random_corpus(cfg, 4, 2);
    auto narrow = cfg;
    narrow.latent_prior.grid_height = 8;
    CHECK_THROWS_AS(train_latent_prior(narrow, bad_grid, 0), ValidationError);

    auto layouts = torch::full({4, 8, 8}, shapeworld::kLayoutClasses, torch::kLong);
    CHECK_THROWS_AS(train_layout_prior(cfg, layouts), ValidationError);

    cfg.latent_optimizer.iterations = 1;
    const auto prior = train_latent_prior(cfg, random_corpus(cfg, 4, 3), 0);
    CHECK_THROWS_AS(load_vqvae(prior), PrerequisiteError);
    CHECK_THROWS_AS(VqVaeTrainer{prior}, PrerequisiteError);
    CHECK_NOTHROW(load_prior(prior));
}

TEST_CASE("non-finite losses abort training") {
    const auto cfg = testing::small_config();
    VqVaeTrainer t(cfg);
    {
        torch::NoGradGuard no_grad;
        for (auto& p : t.model()->decoder->parameters()) {
            p.fill_(std::numeric_limits<float>::quiet_NaN());
            break;
        }
    }
    const auto x = images_of(shapeworld::generate_dataset(cfg.data, 32, 10, 4));
    CHECK_THROWS_AS(t.step(x), DivergenceError);
}

TEST_CASE("corrupt checkpoints are reported") {
    testing::TempDir dir("corrupt");
    CHECK_THROWS_AS(Checkpoint::load(dir.path() / "absent.msgf"), PrerequisiteError);
    CHECK_THROWS_AS(Checkpoint::deserialize("not a checkpoint"), IoError);
    auto cfg = testing::small_config();
    VqVaeTrainer t(cfg);
    auto bytes = t.checkpoint().serialize();
    bytes.resize(bytes.size() / 2);
    CHECK_THROWS_AS(Checkpoint::deserialize(bytes), IoError);
}

TEST_CASE("nll trends down on a fixed tiny corpus") {
    auto cfg = testing::small_config();
    cfg.latent_prior.dropout = 0.0;
    cfg.latent_optimizer = OptimizerConfig{2e-3, Schedule::constant, 4, 300, 2000};
    const auto corpus = random_corpus(cfg, 8, 4);
    std::vector<double> window(3, 0.0);
    train_latent_prior(cfg, corpus, 0, [&](const StepRecord& r) { window[static_cast<std::size_t>(r.iteration / 100)] += r.total; });
    CHECK(window[1] < window[0]);
    CHECK(window[2] < window[1]);
    CHECK(window[0] / 100.0 < std::log(16.0) + 0.1);
}

TEST_CASE("a constant-layout corpus yields constant layouts") {
    auto cfg = testing::small_config();
    cfg.layout_prior.dropout = 0.0;
    cfg.layout_optimizer = OptimizerConfig{3e-3, Schedule::constant, 8, 600, 2000};
    const auto layouts = torch::full({32, 8, 8}, 5, torch::kLong);
    const auto ck = train_layout_prior(cfg, layouts);
    CHECK(ck.phase == Phase::layout_prior);
    CHECK(ck.parent_hash == cfg.layout_space_hash());
    auto prior = load_prior(ck);
    const auto s = priors::sample(prior, 100, {}, 1.0, 5);
    const auto constant = s.eq(5).flatten(1).all(1).sum().item<std::int64_t>();
    CHECK(constant >= 99);
}

}  // TEST_SUITE
