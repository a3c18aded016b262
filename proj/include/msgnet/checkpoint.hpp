#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "msgnet/config.hpp"

namespace msgnet::trainer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Phase { vqvae, latent_prior, layout_prior, codes, segmenter };

std::string to_string(Phase phase);
Phase parse_phase(const std::string& text);

/// Single-file container for one pipeline phase. See docs/checkpoint_format.md
/// for the byte layout.
struct Checkpoint {
    Phase phase = Phase::vqvae;
    std::int64_t iteration = 0;
    std::string config_text;
    // Code-space fingerprint of the VQ-VAE this artifact was built from (0 if none).
    std::uint64_t parent_hash = 0;
    std::string rng_state;
    std::vector<std::uint8_t> torch_rng_state;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;

    ModelConfig config() const { return ModelConfig::parse(config_text); }

    /// Throws ValidationError when the name is absent.
    const torch::Tensor& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;

    std::string serialize() const;
    static Checkpoint deserialize(const std::string& bytes);

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
};

/// Copies every named parameter and buffer under `prefix`.
void store_module(Checkpoint& checkpoint, const torch::nn::Module& module, const std::string& prefix);
/// Restores parameters and buffers in place; every one must be present with a
/// matching shape.
void restore_module(const Checkpoint& checkpoint, torch::nn::Module& module, const std::string& prefix);

/// Adam moment estimates and step counts, keyed by parameter name.
void store_adam(Checkpoint& checkpoint, torch::optim::Adam& optimizer, const torch::nn::Module& module);
void restore_adam(const Checkpoint& checkpoint, torch::optim::Adam& optimizer, const torch::nn::Module& module);

}  // namespace msgnet::trainer
