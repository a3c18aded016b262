#include <doctest.h>
#include <torch/torch.h>

#include "helpers.hpp"
#include "msgnet/errors.hpp"
#include "msgnet/sampler.hpp"
#include "msgnet/tensors.hpp"
#include "msgnet/trainer.hpp"

using namespace msgnet;
using namespace msgnet::sampler;
using shapeworld::LayoutMap;

namespace {

struct Fixture {
    ModelConfig config = testing::small_config();
    shapeworld::Dataset data;
    trainer::Checkpoint vqvae;
    trainer::Checkpoint latent;
    trainer::Checkpoint layout;

    Fixture() {
        config.vqvae_optimizer.iterations = 3;
        config.latent_optimizer.iterations = 3;
        config.layout_optimizer.iterations = 3;
        data = shapeworld::generate_dataset(config.data, 32, 1, 8);
        vqvae = trainer::train_vqvae(config, data);
        const auto corpus = trainer::extract_codes(vqvae, data);
        latent = trainer::train_latent_prior(config, corpus, vqvae.parent_hash);
        layout = trainer::train_layout_prior(config, corpus.layouts);
    }

    Pipeline pipeline() const { return Pipeline::load(vqvae, latent, layout); }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

bool same_image(const shapeworld::Image& a, const shapeworld::Image& b) { return a == b; }

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("split_code examples") {
    const auto g = torch::tensor({7, 3}, torch::kLong).reshape({2, 1});
    const auto [top, bottom] = split_code(g);
    CHECK(top.item<std::int64_t>() == 7);
    CHECK(bottom.item<std::int64_t>() == 3);

    const auto big = torch::randint(0, 256, {32, 16}, torch::kLong);
    const auto [a, b] = split_code(big);
    CHECK(a.sizes() == torch::IntArrayRef({16, 16}));
    CHECK(b.sizes() == torch::IntArrayRef({16, 16}));
    CHECK_THROWS_AS(split_code(torch::zeros({3, 4}, torch::kLong)), ShapeError);
    CHECK_THROWS_AS(split_code(torch::zeros({4}, torch::kLong)), ShapeError);
}

TEST_CASE("full mode shapes and ranges") {
    auto p = fixture().pipeline();
    const auto out = generate(p, {Mode::full, 4, 11});
    REQUIRE(out.size() == 4);
    for (const auto& g : out) {
        CHECK(g.image.height == 32);
        CHECK(g.image.width == 32);
        CHECK(g.layout.height == 32);
        CHECK(g.codes.sizes() == torch::IntArrayRef({16, 8}));
        const auto t = tensors::from_images({g.image});
        CHECK(t.min().item<float>() >= -1.0F);
        CHECK(t.max().item<float>() <= 1.0F);
        for (const auto v : g.layout.labels) {
            CHECK(v < shapeworld::kLayoutClasses);
        }
    }
}

TEST_CASE("same seed gives identical output") {
    auto p = fixture().pipeline();
    for (const auto mode : {Mode::full, Mode::unconditional}) {
        const auto a = generate(p, {mode, 3, 5});
        const auto b = generate(p, {mode, 3, 5});
        const auto c = generate(p, {mode, 3, 6});
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(same_image(a[i].image, b[i].image));
            CHECK(a[i].layout == b[i].layout);
            CHECK(torch::equal(a[i].codes, b[i].codes));
        }
        CHECK(!torch::equal(a[0].codes, c[0].codes));
    }
}

TEST_CASE("full mode equals layout_given with the drawn layouts") {
    auto p = fixture().pipeline();
    const auto full = generate(p, {Mode::full, 5, 21});
    Request given{Mode::layout_given, 5, 21};
    for (const auto& g : full) {
        given.layouts.push_back(g.layout);
    }
    const auto again = generate(p, given);
    for (std::size_t i = 0; i < full.size(); ++i) {
        CHECK(torch::equal(full[i].codes, again[i].codes));
        CHECK(same_image(full[i].image, again[i].image));
        CHECK(full[i].layout == again[i].layout);
    }
}

TEST_CASE("annotation matches the provided layout at latent resolution") {
    auto p = fixture().pipeline();
    const auto& provided = fixture().data.layouts[0];
    const auto out = generate(p, {Mode::layout_given, 3, 2, 1.0, {provided}});
    for (const auto& g : out) {
        CHECK(shapeworld::downsample_layout(g.layout, 4) == shapeworld::downsample_layout(provided, 4));
    }
    const auto latent = shapeworld::downsample_layout(provided, 4);
    const auto from_latent = generate(p, {Mode::layout_given, 3, 2, 1.0, {latent}});
    CHECK(torch::equal(from_latent[1].codes, out[1].codes));
}

TEST_CASE("one layout, four seeds, four distinct images") {
    auto p = fixture().pipeline();
    const auto& provided = fixture().data.layouts[1];
    std::vector<Generation> out;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        out.push_back(generate(p, {Mode::layout_given, 1, seed, 1.0, {provided}}).front());
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i].layout == out[0].layout);
        for (std::size_t j = 0; j < i; ++j) {
            CHECK(!same_image(out[i].image, out[j].image));
        }
    }
}

TEST_CASE("unconditional mode needs no layout prior") {
    const auto& f = fixture();
    auto p = Pipeline::load(f.vqvae, f.latent);
    const auto out = generate(p, {Mode::unconditional, 2, 3});
    REQUIRE(out.size() == 2);
    CHECK(out[0].layout.empty());
    CHECK_THROWS_AS(generate(p, {Mode::full, 2, 3}), PrerequisiteError);
    CHECK(generate(p, {Mode::unconditional, 0, 3}).empty());
}

TEST_CASE("incompatible checkpoints are refused") {
    const auto& f = fixture();
    auto other = f.config;
    other.quantizer.codebook_size = 4;
    other.derive();
    const auto foreign = trainer::train_vqvae(other, f.data);
    CHECK_THROWS_AS(Pipeline::load(foreign, f.latent, f.layout), ValidationError);
    CHECK_THROWS_AS(Pipeline::load(f.latent, f.latent, f.layout), PrerequisiteError);
    CHECK_THROWS_AS(Pipeline::load(f.vqvae, f.latent, f.latent), PrerequisiteError);
}

TEST_CASE("malformed layouts are rejected") {
    auto p = fixture().pipeline();
    CHECK_THROWS_AS(generate(p, {Mode::layout_given, 2, 1}), ValidationError);
    CHECK_THROWS_AS(generate(p, {Mode::layout_given, 2, 1, 1.0, {LayoutMap::filled(16, 16, 0)}}), ValidationError);
    CHECK_THROWS_AS(generate(p, {Mode::layout_given, 2, 1, 1.0, {LayoutMap::filled(8, 8, 13)}}), ValidationError);
    CHECK_THROWS_AS(generate(p, {Mode::layout_given, 3, 1, 1.0, {LayoutMap::filled(8, 8, 0), LayoutMap::filled(8, 8, 0)}}),
                    ValidationError);
    CHECK_THROWS_AS(generate(p, {Mode::full, 1, 1, 0.0}), ValidationError);
    CHECK_THROWS_AS(parse_mode("partial"), ValidationError);
    CHECK(parse_mode("layout_given") == Mode::layout_given);
}

TEST_CASE("constraint check examples") {
    const auto blank = LayoutMap::filled(32, 32, 0);
    const auto r = check_constraint(blank);
    CHECK(!r.pass);
    REQUIRE(r.reasons.size() == 1);
    CHECK(r.reasons[0] == "no object at the center");

    auto centered = blank;
    for (std::int64_t y = 10; y < 22; ++y) {
        for (std::int64_t x = 10; x < 22; ++x) {
            centered.at(y, x) = 4;
        }
    }
    CHECK(check_constraint(centered).pass);

    auto corner = centered;
    corner.at(0, 0) = 2;
    const auto c = check_constraint(corner);
    CHECK(!c.pass);
    REQUIRE(c.reasons.size() == 1);
    CHECK(c.reasons[0] == "object in the top-left corner");

    auto edge = centered;
    edge.at(31, 28) = 3;
    CHECK(!check_constraint(edge).pass);
    CHECK(check_constraint(edge, 4).reasons[0] == "object in the bottom-right corner");
    CHECK(check_constraint(edge, 2).pass);
    CHECK(!check_constraint(LayoutMap{}).pass);
}

TEST_CASE("generations pack into a dataset") {
    auto p = fixture().pipeline();
    const auto ds = to_dataset(generate(p, {Mode::full, 3, 8}));
    CHECK(ds.images.size() == 3);
    CHECK(ds.image_size == 32);
    CHECK(ds.indices(shapeworld::Split::train).size() == 3);
}

}  // TEST_SUITE
