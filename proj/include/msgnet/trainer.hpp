#pragma once

#include <torch/torch.h>

#include <functional>
#include <memory>
#include <random>

#include "msgnet/backbone.hpp"
#include "msgnet/checkpoint.hpp"
#include "msgnet/config.hpp"
#include "msgnet/priors.hpp"
#include "msgnet/shapeworld.hpp"

namespace msgnet::trainer {

struct StepRecord {
    std::int64_t iteration = 0;
    double learning_rate = 0.0;
    double total = 0.0;
    // VQ-VAE phase only.
    double reconstruction = 0.0;
    double codebook = 0.0;
    double commitment = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Concatenated code grids ([N, 2H, W], attention path on top) paired with
/// latent-resolution layouts ([N, H, W]), in dataset order.
struct CodeCorpus {
    torch::Tensor tokens;
    torch::Tensor layouts;

    std::int64_t size() const { return tokens.defined() ? tokens.size(0) : 0; }
    Checkpoint to_checkpoint(const ModelConfig& config, std::uint64_t parent_hash) const;
    static CodeCorpus from_checkpoint(const Checkpoint& checkpoint);
};

/// Stacks the attention-path grid above the plain-path grid along the height.
torch::Tensor concat_codes(const torch::Tensor& attention_indices, const torch::Tensor& plain_indices);

/// Owns a VQ-VAE, its Adam state and the batch-sampling RNG, so training
/// can stop and resume on the same trajectory.
class VqVaeTrainer {
public:
    explicit VqVaeTrainer(const ModelConfig& config);
    /// Resumes from a checkpoint written by checkpoint().
    explicit VqVaeTrainer(const Checkpoint& checkpoint);

    /// One optimizer step on a batch drawn from `images` ([N, C, S, S]).
    /// Throws DivergenceError on a non-finite loss.
    StepRecord step(const torch::Tensor& images);
    /// Runs until the configured iteration count is reached or `max_steps`
    /// more steps were taken (negative: no cap).
    void run(const torch::Tensor& images, std::int64_t max_steps = -1, const StepCallback& on_step = {});

    Checkpoint checkpoint() const;
    backbone::DoublePathVqVae& model() { return model_; }
    std::int64_t iteration() const { return iteration_; }
    const ModelConfig& config() const { return config_; }

private:
    void build();
    void track_usage(const backbone::VqVaeOutput& out);

    ModelConfig config_;
    backbone::DoublePathVqVae model_{nullptr};
    // Assignment counts since the last dead-code check, one row per codebook.
    torch::Tensor usage_;
    std::unique_ptr<torch::optim::Adam> optimizer_;
    std::mt19937_64 rng_;
    std::int64_t iteration_ = 0;
};

/// Trainer shared by the latent prior and the layout prior.
class PriorTrainer {
public:
    /// `phase` selects which prior section of the config is used.
    PriorTrainer(const ModelConfig& config, Phase phase, std::uint64_t parent_hash);
    explicit PriorTrainer(const Checkpoint& checkpoint);

    /// tokens [N, H, W]; conditions [N, Hc, Wc] or undefined.
    StepRecord step(const torch::Tensor& tokens, const torch::Tensor& conditions);
    void run(const torch::Tensor& tokens, const torch::Tensor& conditions, std::int64_t max_steps = -1,
             const StepCallback& on_step = {});

    Checkpoint checkpoint() const;
    priors::PixelSnail& model() { return model_; }
    std::int64_t iteration() const { return iteration_; }

private:
    void build();
    const OptimizerConfig& optimizer_config() const;

    ModelConfig config_;
    Phase phase_;
    std::uint64_t parent_hash_;
    priors::PixelSnail model_{nullptr};
    std::unique_ptr<torch::optim::Adam> optimizer_;
    std::mt19937_64 rng_;
    std::int64_t iteration_ = 0;
};

Checkpoint train_vqvae(const ModelConfig& config, const shapeworld::Dataset& dataset, const StepCallback& on_step = {});

/// Encodes every dataset item; requires a VQ-VAE checkpoint.
CodeCorpus extract_codes(const Checkpoint& vqvae, const shapeworld::Dataset& dataset);
CodeCorpus extract_codes(backbone::DoublePathVqVae& model, const shapeworld::Dataset& dataset);

Checkpoint train_latent_prior(const ModelConfig& config, const CodeCorpus& corpus, std::uint64_t parent_hash,
                              const StepCallback& on_step = {});
/// Unconditional prior over latent-resolution layouts ([N, H, W]).
Checkpoint train_layout_prior(const ModelConfig& config, const torch::Tensor& layouts,
                              const StepCallback& on_step = {});

backbone::DoublePathVqVae load_vqvae(const Checkpoint& checkpoint);
priors::PixelSnail load_prior(const Checkpoint& checkpoint);

}  // namespace msgnet::trainer
