#include "msgnet/trainer.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "msgnet/errors.hpp"
#include "msgnet/tensors.hpp"

namespace msgnet::trainer {

namespace {

constexpr std::int64_t kEncodeBatch = 256;

std::string rng_to_string(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& text) {
    std::istringstream is(text);
    is >> rng;
    if (!is) {
        throw IoError("corrupt RNG state in checkpoint");
    }
}

std::vector<std::uint8_t> torch_rng_bytes() {
    const auto state = at::detail::getDefaultCPUGenerator().get_state().contiguous();
    const auto* p = state.data_ptr<std::uint8_t>();
    return {p, p + state.numel()};
}

void restore_torch_rng(const std::vector<std::uint8_t>& bytes) {
    if (bytes.empty()) {
        return;
    }
    auto state = torch::empty({static_cast<std::int64_t>(bytes.size())}, torch::kUInt8);
    std::memcpy(state.data_ptr<std::uint8_t>(), bytes.data(), bytes.size());
    auto gen = at::detail::getDefaultCPUGenerator();
    gen.set_state(state);
}

torch::Tensor draw_batch_indices(std::mt19937_64& rng, std::int64_t population, std::int64_t batch) {
    if (population <= 0) {
        throw ValidationError("cannot train on an empty dataset");
    }
    std::uniform_int_distribution<std::int64_t> pick(0, population - 1);
    auto idx = torch::empty({batch}, torch::kLong);
    auto* p = idx.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < batch; ++i) {
        p[i] = pick(rng);
    }
    return idx;
}

void set_learning_rate(torch::optim::Adam& optimizer, double lr) {
    for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
}

void check_finite(double value, const char* what, std::int64_t iteration) {
    if (!std::isfinite(value)) {
        throw DivergenceError(std::string(what) + " became non-finite at iteration " + std::to_string(iteration));
    }
}

}  // namespace

torch::Tensor concat_codes(const torch::Tensor& attention_indices, const torch::Tensor& plain_indices) {
    if (!attention_indices.sizes().equals(plain_indices.sizes()) || attention_indices.dim() < 2) {
        throw ShapeError("concat_codes: both grids must share one [.., H, W] shape");
    }
    return torch::cat({attention_indices, plain_indices}, attention_indices.dim() - 2);
}

Checkpoint CodeCorpus::to_checkpoint(const ModelConfig& config, std::uint64_t parent_hash) const {
    Checkpoint c;
    c.phase = Phase::codes;
    c.config_text = config.to_text();
    c.parent_hash = parent_hash;
    c.tensors.emplace_back("tokens", tokens.to(torch::kFloat32));
    c.tensors.emplace_back("layouts", layouts.to(torch::kFloat32));
    return c;
}

CodeCorpus CodeCorpus::from_checkpoint(const Checkpoint& checkpoint) {
    if (checkpoint.phase != Phase::codes) {
        throw PrerequisiteError("expected a code corpus, got a '" + to_string(checkpoint.phase) + "' checkpoint");
    }
    return {checkpoint.tensor("tokens").to(torch::kLong), checkpoint.tensor("layouts").to(torch::kLong)};
}

// ---------------------------------------------------------------------------
// VQ-VAE

VqVaeTrainer::VqVaeTrainer(const ModelConfig& config)
    : config_(config), rng_(shapeworld::mix_seed(config.seed, 11)) {
    config_.validate();
    build();
}

VqVaeTrainer::VqVaeTrainer(const Checkpoint& checkpoint) : config_(checkpoint.config()) {
    if (checkpoint.phase != Phase::vqvae) {
        throw PrerequisiteError("expected a vqvae checkpoint, got '" + to_string(checkpoint.phase) + "'");
    }
    build();
    restore_module(checkpoint, *model_, "model/");
    restore_adam(checkpoint, *optimizer_, *model_);
    usage_.copy_(checkpoint.tensor("usage").to(torch::kLong));
    rng_from_string(rng_, checkpoint.rng_state);
    restore_torch_rng(checkpoint.torch_rng_state);
    iteration_ = checkpoint.iteration;
}

void VqVaeTrainer::build() {
    model_ = backbone::DoublePathVqVae(config_.backbone, config_.quantizer, config_.seed);
    optimizer_ = std::make_unique<torch::optim::Adam>(model_->parameters(),
                                                      torch::optim::AdamOptions(config_.vqvae_optimizer.learning_rate));
    usage_ = torch::zeros({2, config_.quantizer.codebook_num}, torch::kLong);
}

void VqVaeTrainer::track_usage(const backbone::VqVaeOutput& out) {
    const auto interval = config_.quantizer.code_reset_interval;
    if (interval <= 0) {
        return;
    }
    const auto k = config_.quantizer.codebook_num;
    usage_[0] += torch::bincount(out.attention_codes.indices.flatten(), {}, k);
    usage_[1] += torch::bincount(out.plain_codes.indices.flatten(), {}, k);
    if ((iteration_ + 1) % interval != 0 || iteration_ + interval >= config_.vqvae_optimizer.iterations) {
        return;
    }
    torch::NoGradGuard no_grad;
    const std::pair<quantizer::Codebook, torch::Tensor> books[] = {
        {model_->attention_codebook, out.encodings.attention_path},
        {model_->plain_codebook, out.encodings.plain_path}};
    for (std::int64_t b = 0; b < 2; ++b) {
        const auto& [book, encodings] = books[b];
        const auto flat = encodings.detach().reshape({-1, book->dim()});
        const auto dead = usage_[b].eq(0).nonzero().flatten();
        std::uniform_int_distribution<std::int64_t> pick(0, flat.size(0) - 1);
        for (std::int64_t i = 0; i < dead.size(0); ++i) {
            book->entries[dead[i].item<std::int64_t>()].copy_(flat[pick(rng_)]);
        }
    }
    usage_.zero_();
}

StepRecord VqVaeTrainer::step(const torch::Tensor& images) {
    model_->train();
    const auto idx = draw_batch_indices(rng_, images.size(0), config_.vqvae_optimizer.batch_size);
    const auto batch = images.index_select(0, idx);
    const double lr = config_.vqvae_optimizer.rate_at(iteration_);
    set_learning_rate(*optimizer_, lr);

    optimizer_->zero_grad();
    const auto out = model_->forward(batch);
    out.total_loss.backward();
    optimizer_->step();
    track_usage(out);

    StepRecord rec;
    rec.iteration = iteration_;
    rec.learning_rate = lr;
    rec.total = out.total_loss.item<double>();
    rec.reconstruction = out.reconstruction_loss.item<double>();
    rec.codebook = out.codebook_loss.item<double>();
    rec.commitment = out.commitment_loss.item<double>();
    check_finite(rec.total, "VQ-VAE loss", iteration_);
    ++iteration_;
    return rec;
}

void VqVaeTrainer::run(const torch::Tensor& images, std::int64_t max_steps, const StepCallback& on_step) {
    std::int64_t taken = 0;
    while (iteration_ < config_.vqvae_optimizer.iterations && (max_steps < 0 || taken < max_steps)) {
        const auto rec = step(images);
        ++taken;
        if (on_step) {
            on_step(rec);
        }
    }
}

Checkpoint VqVaeTrainer::checkpoint() const {
    Checkpoint c;
    c.phase = Phase::vqvae;
    c.iteration = iteration_;
    c.config_text = config_.to_text();
    c.parent_hash = config_.code_space_hash();
    c.rng_state = rng_to_string(rng_);
    c.torch_rng_state = torch_rng_bytes();
    store_module(c, *model_, "model/");
    store_adam(c, *optimizer_, *model_);
    c.tensors.emplace_back("usage", usage_.to(torch::kFloat32));
    return c;
}

// ---------------------------------------------------------------------------
// Priors

PriorTrainer::PriorTrainer(const ModelConfig& config, Phase phase, std::uint64_t parent_hash)
    : config_(config), phase_(phase), parent_hash_(parent_hash) {
    if (phase != Phase::latent_prior && phase != Phase::layout_prior) {
        throw ValidationError("PriorTrainer handles only prior phases");
    }
    config_.validate();
    rng_.seed(shapeworld::mix_seed(config.seed, phase == Phase::latent_prior ? 21 : 31));
    build();
}

PriorTrainer::PriorTrainer(const Checkpoint& checkpoint)
    : config_(checkpoint.config()), phase_(checkpoint.phase), parent_hash_(checkpoint.parent_hash) {
    if (phase_ != Phase::latent_prior && phase_ != Phase::layout_prior) {
        throw PrerequisiteError("expected a prior checkpoint, got '" + to_string(phase_) + "'");
    }
    build();
    restore_module(checkpoint, *model_, "model/");
    restore_adam(checkpoint, *optimizer_, *model_);
    rng_from_string(rng_, checkpoint.rng_state);
    restore_torch_rng(checkpoint.torch_rng_state);
    iteration_ = checkpoint.iteration;
}

const OptimizerConfig& PriorTrainer::optimizer_config() const {
    return phase_ == Phase::latent_prior ? config_.latent_optimizer : config_.layout_optimizer;
}

void PriorTrainer::build() {
    const auto& prior = phase_ == Phase::latent_prior ? config_.latent_prior : config_.layout_prior;
    model_ = priors::PixelSnail(prior, shapeworld::mix_seed(config_.seed, phase_ == Phase::latent_prior ? 22 : 32));
    optimizer_ =
        std::make_unique<torch::optim::Adam>(model_->parameters(), torch::optim::AdamOptions(optimizer_config().learning_rate));
}

StepRecord PriorTrainer::step(const torch::Tensor& tokens, const torch::Tensor& conditions) {
    model_->train();
    const auto& opt = optimizer_config();
    const auto idx = draw_batch_indices(rng_, tokens.size(0), opt.batch_size);
    const auto batch_tokens = tokens.index_select(0, idx);
    torch::Tensor batch_cond;
    if (conditions.defined()) {
        batch_cond = conditions.index_select(0, idx).clone();
        // Replace some conditions by the null class so unconditional sampling is trained too.
        std::bernoulli_distribution drop(config_.null_condition_rate);
        for (std::int64_t i = 0; i < batch_cond.size(0); ++i) {
            if (drop(rng_)) {
                batch_cond[i].fill_(model_->config().null_condition());
            }
        }
    }
    const double lr = opt.rate_at(iteration_);
    set_learning_rate(*optimizer_, lr);

    optimizer_->zero_grad();
    const auto loss = model_->nll(batch_tokens, batch_cond);
    loss.backward();
    optimizer_->step();

    StepRecord rec;
    rec.iteration = iteration_;
    rec.learning_rate = lr;
    rec.total = loss.item<double>();
    check_finite(rec.total, "prior NLL", iteration_);
    ++iteration_;
    return rec;
}

void PriorTrainer::run(const torch::Tensor& tokens, const torch::Tensor& conditions, std::int64_t max_steps,
                       const StepCallback& on_step) {
    std::int64_t taken = 0;
    while (iteration_ < optimizer_config().iterations && (max_steps < 0 || taken < max_steps)) {
        const auto rec = step(tokens, conditions);
        ++taken;
        if (on_step) {
            on_step(rec);
        }
    }
}

Checkpoint PriorTrainer::checkpoint() const {
    Checkpoint c;
    c.phase = phase_;
    c.iteration = iteration_;
    c.config_text = config_.to_text();
    c.parent_hash = parent_hash_;
    c.rng_state = rng_to_string(rng_);
    c.torch_rng_state = torch_rng_bytes();
    store_module(c, *model_, "model/");
    store_adam(c, *optimizer_, *model_);
    return c;
}

// ---------------------------------------------------------------------------
// Phase entry points

Checkpoint train_vqvae(const ModelConfig& config, const shapeworld::Dataset& dataset, const StepCallback& on_step) {
    const auto train_idx = dataset.indices(shapeworld::Split::train);
    if (train_idx.empty()) {
        throw ValidationError("train_vqvae: dataset has no training items");
    }
    const auto images = tensors::from_images(dataset.subset(train_idx).images);
    VqVaeTrainer trainer(config);
    trainer.run(images, -1, on_step);
    return trainer.checkpoint();
}

CodeCorpus extract_codes(backbone::DoublePathVqVae& model, const shapeworld::Dataset& dataset) {
    const auto& cfg = model->config();
    const bool was_training = model->is_training();
    model->eval();
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> tokens;
    std::vector<torch::Tensor> layouts;
    for (std::size_t start = 0; start < dataset.size(); start += kEncodeBatch) {
        const auto stop = std::min(dataset.size(), start + static_cast<std::size_t>(kEncodeBatch));
        const std::vector<shapeworld::Image> images(dataset.images.begin() + static_cast<std::ptrdiff_t>(start),
                                                    dataset.images.begin() + static_cast<std::ptrdiff_t>(stop));
        const auto [a, p] = model->encode_indices(tensors::from_images(images));
        tokens.push_back(concat_codes(a, p));
        std::vector<shapeworld::LayoutMap> small;
        for (auto i = start; i < stop; ++i) {
            if (dataset.layouts[i].empty()) {
                throw ValidationError("extract_codes: dataset item " + std::to_string(i) + " has no layout");
            }
            small.push_back(shapeworld::downsample_layout(dataset.layouts[i], cfg.downsample_factor));
        }
        layouts.push_back(tensors::from_layouts(small));
    }
    model->train(was_training);
    if (tokens.empty()) {
        return {};
    }
    return {torch::cat(tokens), torch::cat(layouts)};
}

CodeCorpus extract_codes(const Checkpoint& vqvae, const shapeworld::Dataset& dataset) {
    auto model = load_vqvae(vqvae);
    return extract_codes(model, dataset);
}

Checkpoint train_latent_prior(const ModelConfig& config, const CodeCorpus& corpus, std::uint64_t parent_hash,
                              const StepCallback& on_step) {
    if (corpus.size() == 0) {
        throw ValidationError("train_latent_prior: empty corpus");
    }
    if (corpus.tokens.size(1) != config.latent_prior.grid_height || corpus.tokens.size(2) != config.latent_prior.grid_width ||
        corpus.tokens.max().item<std::int64_t>() >= config.latent_prior.vocab_size) {
        throw ValidationError("train_latent_prior: corpus does not match the prior's grid or vocabulary");
    }
    PriorTrainer trainer(config, Phase::latent_prior, parent_hash);
    trainer.run(corpus.tokens, corpus.layouts, -1, on_step);
    return trainer.checkpoint();
}

Checkpoint train_layout_prior(const ModelConfig& config, const torch::Tensor& layouts, const StepCallback& on_step) {
    if (!layouts.defined() || layouts.size(0) == 0) {
        throw ValidationError("train_layout_prior: empty corpus");
    }
    if (layouts.size(1) != config.layout_prior.grid_height || layouts.size(2) != config.layout_prior.grid_width ||
        layouts.max().item<std::int64_t>() >= config.layout_prior.vocab_size) {
        throw ValidationError("train_layout_prior: layouts do not match the prior's grid or class count");
    }
    PriorTrainer trainer(config, Phase::layout_prior, config.layout_space_hash());
    trainer.run(layouts, {}, -1, on_step);
    return trainer.checkpoint();
}

backbone::DoublePathVqVae load_vqvae(const Checkpoint& checkpoint) {
    if (checkpoint.phase != Phase::vqvae) {
        throw PrerequisiteError("expected a vqvae checkpoint, got '" + to_string(checkpoint.phase) + "'");
    }
    const auto config = checkpoint.config();
    backbone::DoublePathVqVae model(config.backbone, config.quantizer, config.seed);
    restore_module(checkpoint, *model, "model/");
    model->eval();
    return model;
}

priors::PixelSnail load_prior(const Checkpoint& checkpoint) {
    if (checkpoint.phase != Phase::latent_prior && checkpoint.phase != Phase::layout_prior) {
        throw PrerequisiteError("expected a prior checkpoint, got '" + to_string(checkpoint.phase) + "'");
    }
    const auto config = checkpoint.config();
    const auto& prior = checkpoint.phase == Phase::latent_prior ? config.latent_prior : config.layout_prior;
    priors::PixelSnail model(prior, 0);
    restore_module(checkpoint, *model, "model/");
    model->eval();
    return model;
}

}  // namespace msgnet::trainer
