#include "msgnet/verify.hpp"

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>

#include "msgnet/backbone.hpp"
#include "msgnet/checkpoint.hpp"
#include "msgnet/errors.hpp"
#include "msgnet/priors.hpp"
#include "msgnet/quantizer.hpp"
#include "msgnet/sampler.hpp"
#include "msgnet/shapeworld.hpp"
#include "msgnet/trainer.hpp"

namespace msgnet::verify {

namespace {

using Clock = std::chrono::steady_clock;

CheckResult timed(const std::string& name, const std::function<std::string(bool&)>& body) {
    CheckResult r;
    r.name = name;
    const auto start = Clock::now();
    try {
        bool pass = true;
        r.detail = body(pass);
        r.pass = pass;
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return r;
}

// Multiples of 1/4 in [-2, 2]: every distance is exact in float32, and ties
// between entries are frequent.
torch::Tensor dyadic(std::mt19937_64& rng, std::vector<std::int64_t> shape) {
    auto t = torch::empty(shape, torch::kFloat32);
    std::uniform_int_distribution<int> pick(-8, 8);
    auto* p = t.data_ptr<float>();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        p[i] = static_cast<float>(pick(rng)) / 4.0F;
    }
    return t;
}

std::int64_t brute_force_nearest(const float* x, const torch::Tensor& entries) {
    const auto k = entries.size(0);
    const auto d = entries.size(1);
    const auto* e = entries.data_ptr<float>();
    std::int64_t best = 0;
    double best_dist = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
        double dist = 0.0;
        for (std::int64_t c = 0; c < d; ++c) {
            const double diff = static_cast<double>(x[c]) - static_cast<double>(e[j * d + c]);
            dist += diff * diff;
        }
        if (j == 0 || dist < best_dist) {
            best = j;
            best_dist = dist;
        }
    }
    return best;
}

std::string check_quantizer(const SuiteOptions& o, bool& pass) {
    std::mt19937_64 rng(shapeworld::mix_seed(o.seed, 101));
    std::uniform_int_distribution<std::int64_t> k_dist(2, 16);
    std::uniform_int_distribution<std::int64_t> d_dist(1, 8);
    std::uniform_int_distribution<std::int64_t> n_dist(1, 32);
    std::int64_t mismatches = 0;
    std::int64_t vectors = 0;
    for (std::int64_t t = 0; t < o.quantizer_trials; ++t) {
        const auto k = k_dist(rng);
        const auto d = d_dist(rng);
        const auto n = n_dist(rng);
        const auto entries = dyadic(rng, {k, d});
        const auto x = dyadic(rng, {n, d});
        const auto q = quantizer::quantize(x, entries);
        const auto idx = q.indices.contiguous();
        for (std::int64_t i = 0; i < n; ++i) {
            const auto expected = brute_force_nearest(x.data_ptr<float>() + i * d, entries);
            mismatches += idx[i].item<std::int64_t>() != expected ? 1 : 0;
        }
        if (!torch::equal(q.quantized, entries.index_select(0, idx))) {
            ++mismatches;
        }
        vectors += n;
    }
    pass = mismatches == 0;
    return std::to_string(o.quantizer_trials) + " instances, " + std::to_string(vectors) + " vectors, " +
           std::to_string(mismatches) + " mismatches";
}

std::string check_straight_through(const SuiteOptions& o, bool& pass) {
    torch::manual_seed(shapeworld::mix_seed(o.seed, 102));
    std::int64_t bad = 0;
    for (int t = 0; t < 20; ++t) {
        auto encodings = torch::randn({3, 4, 5, 6}, torch::requires_grad());
        auto entries = torch::randn({7, 6}, torch::requires_grad());
        const auto q = quantizer::quantize(encodings, entries);
        const auto y = quantizer::straight_through(encodings, q.quantized);
        const auto upstream = torch::randn(y.sizes());
        (y * upstream).sum().backward();
        bad += torch::equal(y.detach(), q.quantized.detach()) ? 0 : 1;
        bad += torch::equal(encodings.grad(), upstream) ? 0 : 1;
        bad += entries.grad().defined() && entries.grad().abs().max().item<float>() != 0.0F ? 1 : 0;
    }
    pass = bad == 0;
    return std::to_string(bad) + " violations in 20 draws";
}

priors::PixelSnail make_prior(const PriorConfig& config, std::uint64_t seed) {
    priors::PixelSnail prior(config, seed);
    prior->randomize_output_head(seed + 1);
    prior->eval();
    return prior;
}

torch::Tensor random_grid(std::mt19937_64& rng, std::int64_t h, std::int64_t w, std::int64_t classes) {
    auto t = torch::empty({1, h, w}, torch::kLong);
    std::uniform_int_distribution<std::int64_t> pick(0, classes - 1);
    auto* p = t.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < h * w; ++i) {
        p[i] = pick(rng);
    }
    return t;
}

std::string check_causality(const SuiteOptions& o, bool& pass) {
    torch::NoGradGuard no_grad;
    const PriorConfig configs[] = {miniature_latent_prior(), miniature_layout_prior()};
    priors::PixelSnail models[] = {make_prior(configs[0], o.seed + 7), make_prior(configs[1], o.seed + 8)};
    std::mt19937_64 rng(shapeworld::mix_seed(o.seed, 103));
    std::int64_t violations = 0;
    std::int64_t sensitive = 0;
    for (std::int64_t t = 0; t < o.causality_trials; ++t) {
        const auto& cfg = configs[t % 2];
        auto& model = models[t % 2];
        const auto h = cfg.grid_height;
        const auto w = cfg.grid_width;
        const auto tokens = random_grid(rng, h, w, cfg.vocab_size);
        torch::Tensor condition;
        if (cfg.conditional()) {
            // Includes the null class.
            condition = random_grid(rng, cfg.condition_height, cfg.condition_width, cfg.condition_classes + 1);
        }
        const auto p = std::uniform_int_distribution<std::int64_t>(0, h * w - 1)(rng);
        auto perturbed = tokens.clone();
        auto flat = perturbed.view({-1});
        const auto old = flat[p].item<std::int64_t>();
        flat[p] = (old + std::uniform_int_distribution<std::int64_t>(1, cfg.vocab_size - 1)(rng)) % cfg.vocab_size;

        const auto a = model->logits(tokens, condition).reshape({h * w, -1});
        const auto b = model->logits(perturbed, condition).reshape({h * w, -1});
        if (!torch::equal(a.slice(0, 0, p + 1), b.slice(0, 0, p + 1))) {
            ++violations;
        }
        if (p + 1 < h * w && !torch::equal(a.slice(0, p + 1), b.slice(0, p + 1))) {
            ++sensitive;
        }
    }
    // A network that ignored its input would pass trivially; require that
    // later positions actually react to the perturbation.
    pass = violations == 0 && sensitive > o.causality_trials / 2;
    return std::to_string(o.causality_trials) + " trials, " + std::to_string(violations) + " violations, " +
           std::to_string(sensitive) + " with downstream change";
}

std::string check_softmax(const SuiteOptions& o, bool& pass) {
    torch::NoGradGuard no_grad;
    std::mt19937_64 rng(shapeworld::mix_seed(o.seed, 104));
    const auto cfg = miniature_latent_prior();
    auto model = make_prior(cfg, o.seed + 9);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const auto tokens = random_grid(rng, cfg.grid_height, cfg.grid_width, cfg.vocab_size);
        const auto cond = random_grid(rng, cfg.condition_height, cfg.condition_width, cfg.condition_classes + 1);
        const auto logits = model->logits(tokens, cond);
        for (const double temperature : {0.5, 1.0, 2.0}) {
            const auto probs = torch::softmax(logits.to(torch::kDouble) / temperature, -1);
            worst = std::max(worst, (probs.sum(-1) - 1.0).abs().max().item<double>());
        }
    }
    pass = worst <= 1e-6;
    std::ostringstream s;
    s << "max |sum - 1| = " << worst;
    return s.str();
}

std::string check_concat_split(const SuiteOptions& o, bool& pass) {
    torch::manual_seed(shapeworld::mix_seed(o.seed, 105));
    std::int64_t bad = 0;
    for (std::int64_t t = 0; t < o.roundtrip_trials; ++t) {
        const auto h = 1 + t % 7;
        const auto w = 1 + (t * 3) % 5;
        const auto a = torch::randint(0, 256, {2, h, w}, torch::kLong);
        const auto b = torch::randint(0, 256, {2, h, w}, torch::kLong);
        const auto [x, y] = sampler::split_code(trainer::concat_codes(a, b));
        bad += torch::equal(x, a) && torch::equal(y, b) ? 0 : 1;
        const auto grid = torch::randint(0, 256, {2 * h, w}, torch::kLong);
        const auto [top, bottom] = sampler::split_code(grid);
        bad += torch::equal(trainer::concat_codes(top, bottom), grid) ? 0 : 1;
    }
    pass = bad == 0;
    return std::to_string(bad) + " failures in " + std::to_string(o.roundtrip_trials) + " grid pairs";
}

bool same_parameters(const torch::nn::Module& a, const torch::nn::Module& b) {
    const auto pa = a.named_parameters(true);
    const auto pb = b.named_parameters(true);
    if (pa.size() != pb.size()) {
        return false;
    }
    for (const auto& item : pa) {
        const auto* other = pb.find(item.key());
        if (other == nullptr || !torch::equal(item.value(), *other)) {
            return false;
        }
    }
    return true;
}

std::string check_checkpoint(const SuiteOptions& o, bool& pass) {
    std::int64_t bad = 0;
    backbone::DoublePathVqVae vq(miniature_backbone(), miniature_quantizer(), o.seed + 11);
    backbone::DoublePathVqVae fresh(miniature_backbone(), miniature_quantizer(), o.seed + 12);
    trainer::Checkpoint c;
    c.phase = trainer::Phase::vqvae;
    c.iteration = 17;
    c.config_text = ModelConfig::desk_default().to_text();
    c.parent_hash = 0x0123456789abcdefULL;
    c.rng_state = "state text";
    c.torch_rng_state = {1, 2, 3, 250};
    trainer::store_module(c, *vq, "model/");
    const auto bytes = c.serialize();
    const auto back = trainer::Checkpoint::deserialize(bytes);
    bad += back.serialize() == bytes ? 0 : 1;
    bad += back.iteration == c.iteration && back.parent_hash == c.parent_hash && back.rng_state == c.rng_state &&
                   back.torch_rng_state == c.torch_rng_state && back.config_text == c.config_text
               ? 0
               : 1;
    trainer::restore_module(back, *fresh, "model/");
    bad += same_parameters(*vq, *fresh) ? 0 : 1;

    auto prior = make_prior(miniature_latent_prior(), o.seed + 13);
    priors::PixelSnail other(miniature_latent_prior(), o.seed + 14);
    trainer::Checkpoint pc;
    pc.phase = trainer::Phase::latent_prior;
    trainer::store_module(pc, *prior, "model/");
    trainer::restore_module(trainer::Checkpoint::deserialize(pc.serialize()), *other, "model/");
    bad += same_parameters(*prior, *other) ? 0 : 1;
    pass = bad == 0;
    return std::to_string(bad) + " mismatches";
}

std::string check_dataset(const SuiteOptions& o, bool& pass) {
    DataConfig data;
    const auto ds = shapeworld::generate_dataset(data, 32, o.seed + 15, 12);
    const auto dir = std::filesystem::temp_directory_path() /
                     ("msgnet-verify-" + std::to_string(shapeworld::mix_seed(o.seed, std::random_device{}())));
    shapeworld::save_dataset(ds, dir);
    const auto back = shapeworld::load_dataset(dir);
    std::filesystem::remove_all(dir);
    pass = back.images == ds.images && back.layouts == ds.layouts && back.splits == ds.splits &&
           back.image_size == ds.image_size;
    return pass ? "12 scenes identical after save/load" : "dataset differs after save/load";
}

std::string check_config(const SuiteOptions&, bool& pass) {
    auto c = ModelConfig::desk_default();
    c.seed = 99;
    c.data.constraint_mode = true;
    c.latent_optimizer.schedule = Schedule::linear;
    const auto text = c.to_text();
    pass = ModelConfig::parse(text).to_text() == text;
    return pass ? "text form is a fixed point" : "config text changed on reparse";
}

// ---------------------------------------------------------------------------
// Gradient check

struct FdTarget {
    std::string name;
    torch::Tensor parameter;
    std::function<torch::Tensor()> analytic_loss;
    std::function<torch::Tensor()> numeric_loss;
    // Optional guard against finite-difference steps that change a discrete
    // assignment.
    std::function<torch::Tensor()> assignment;
};

void check_targets(std::vector<FdTarget>& targets, const GradientOptions& o, std::mt19937_64& rng, GradientCheck& out,
                   const std::vector<torch::Tensor>& all_parameters) {
    for (auto& t : targets) {
        for (auto& p : all_parameters) {
            if (p.grad().defined()) {
                p.grad().zero_();
            }
        }
        t.analytic_loss().backward();
        const auto grad = t.parameter.grad().defined() ? t.parameter.grad().clone() : torch::zeros_like(t.parameter);
        auto flat = t.parameter.data().view({-1});
        std::uniform_int_distribution<std::int64_t> pick(0, flat.numel() - 1);
        for (std::int64_t s = 0; s < o.elements_per_tensor; ++s) {
            torch::NoGradGuard no_grad;
            std::int64_t e = 0;
            double plus = 0.0;
            double minus = 0.0;
            bool stable = false;
            for (int attempt = 0; attempt < 10 && !stable; ++attempt) {
                e = pick(rng);
                const auto original = flat[e].item<double>();
                const auto base = t.assignment ? t.assignment() : torch::Tensor();
                flat[e] = original + o.step;
                plus = t.numeric_loss().item<double>();
                const auto up = t.assignment ? t.assignment() : torch::Tensor();
                flat[e] = original - o.step;
                minus = t.numeric_loss().item<double>();
                const auto down = t.assignment ? t.assignment() : torch::Tensor();
                flat[e] = original;
                stable = !t.assignment || (torch::equal(base, up) && torch::equal(base, down));
            }
            GradientSample g;
            g.parameter = t.name;
            g.element = e;
            g.analytic = grad.view({-1})[e].item<double>();
            g.numeric = (plus - minus) / (2.0 * o.step);
            const auto scale = std::max({std::abs(g.analytic), std::abs(g.numeric), o.floor});
            g.relative_error = std::abs(g.analytic - g.numeric) / scale;
            out.max_relative_error = std::max(out.max_relative_error, g.relative_error);
            out.samples.push_back(g);
        }
    }
}

}  // namespace

BackboneConfig miniature_backbone() {
    BackboneConfig c;
    c.image_size = 8;
    c.channels = 3;
    c.hidden_dim = 8;
    c.residual_dim = 4;
    c.residual_blocks = 1;
    c.downsample_factor = 4;
    c.attention_heads = 1;
    c.attention_dim = 4;
    return c;
}

QuantizerConfig miniature_quantizer() {
    QuantizerConfig q;
    q.codebook_num = 4;
    q.codebook_size = 3;
    return q;
}

PriorConfig miniature_latent_prior() {
    PriorConfig p;
    p.grid_height = 8;
    p.grid_width = 8;
    p.vocab_size = 8;
    p.hidden_dim = 8;
    p.residual_dim = 8;
    p.residual_blocks = 1;
    p.output_residual_blocks = 1;
    p.conditional_residual_blocks = 1;
    p.conditional_residual_dim = 4;
    p.condition_embedding_dim = 4;
    p.condition_classes = 3;
    p.condition_height = 4;
    p.condition_width = 8;
    p.token_embedding_dim = 0;
    p.attention_dim = 4;
    p.attention_heads = 2;
    p.dropout = 0.0;
    return p;
}

PriorConfig miniature_layout_prior() {
    PriorConfig p;
    p.grid_height = 8;
    p.grid_width = 8;
    p.vocab_size = 8;
    p.hidden_dim = 8;
    p.residual_dim = 8;
    p.residual_blocks = 2;
    p.output_residual_blocks = 0;
    p.conditional_residual_blocks = 0;
    p.condition_classes = 0;
    p.token_embedding_dim = 4;
    p.attention_dim = 4;
    p.attention_heads = 1;
    p.dropout = 0.0;
    return p;
}

std::vector<CheckResult> run_property_suite(const SuiteOptions& options) {
    const auto bind = [&](std::string (*fn)(const SuiteOptions&, bool&)) {
        return [fn, &options](bool& pass) { return fn(options, pass); };
    };
    return {
        timed("quantizer_brute_force", bind(check_quantizer)),
        timed("straight_through_identity", bind(check_straight_through)),
        timed("prior_causality", bind(check_causality)),
        timed("softmax_normalization", bind(check_softmax)),
        timed("concat_split_roundtrip", bind(check_concat_split)),
        timed("checkpoint_roundtrip", bind(check_checkpoint)),
        timed("dataset_roundtrip", bind(check_dataset)),
        timed("config_roundtrip", bind(check_config)),
    };
}

bool all_passed(const std::vector<CheckResult>& results) {
    for (const auto& r : results) {
        if (!r.pass) {
            return false;
        }
    }
    return !results.empty();
}

GradientCheck gradient_check(const GradientOptions& o) {
    GradientCheck out;
    out.tolerance = o.tolerance;
    std::mt19937_64 rng(shapeworld::mix_seed(o.seed, 201));
    torch::manual_seed(shapeworld::mix_seed(o.seed, 202));

    // Backbone.
    const auto bb = miniature_backbone();
    backbone::DoublePathVqVae vq(bb, miniature_quantizer(), o.seed + 21);
    vq->to(torch::kDouble);
    {
        torch::NoGradGuard no_grad;
        for (auto& item : vq->named_parameters(true)) {
            if (item.key().ends_with("gamma")) {
                item.value().fill_(0.5);
            }
        }
    }
    const auto images = torch::rand({2, bb.channels, bb.image_size, bb.image_size}, torch::kDouble) * 2.0 - 1.0;
    const auto full = [&] { return vq->forward(images).total_loss; };
    const auto codebook_only = [&] { return vq->forward(images).codebook_loss; };
    const auto bypass = [&] {
        const auto enc = vq->encode(images);
        return torch::mse_loss(vq->decode(enc.attention_path, enc.plain_path), images);
    };
    const auto assignment = [&] {
        const auto [a, p] = vq->encode_indices(images);
        return torch::cat({a.flatten(), p.flatten()});
    };
    std::vector<FdTarget> targets;
    for (auto& item : vq->named_parameters(true)) {
        const auto& key = item.key();
        if (key.starts_with("decoder")) {
            targets.push_back({"vqvae." + key, item.value(), full, full, assignment});
        } else if (key.ends_with("entries")) {
            // The reconstruction reaches the entries only through the
            // straight-through path, which routes nothing to them.
            targets.push_back({"vqvae." + key, item.value(), full, codebook_only, assignment});
        } else {
            targets.push_back({"vqvae." + key, item.value(), bypass, bypass, {}});
        }
    }
    check_targets(targets, o, rng, out, vq->parameters());

    // Priors.
    for (const auto& cfg : {miniature_latent_prior(), miniature_layout_prior()}) {
        auto prior = make_prior(cfg, o.seed + 31);
        prior->to(torch::kDouble);
        const auto tokens = torch::randint(0, cfg.vocab_size, {3, cfg.grid_height, cfg.grid_width}, torch::kLong);
        torch::Tensor cond;
        if (cfg.conditional()) {
            cond = torch::randint(0, cfg.condition_classes + 1, {3, cfg.condition_height, cfg.condition_width},
                                  torch::kLong);
        }
        const auto nll = [&] { return prior->nll(tokens, cond); };
        const auto tag = std::string(cfg.conditional() ? "latent_prior." : "layout_prior.");
        std::vector<FdTarget> prior_targets;
        for (auto& item : prior->named_parameters(true)) {
            prior_targets.push_back({tag + item.key(), item.value(), nll, nll, {}});
        }
        check_targets(prior_targets, o, rng, out, prior->parameters());
    }
    out.pass = !out.samples.empty() && out.max_relative_error <= o.tolerance;
    return out;
}

}  // namespace msgnet::verify
