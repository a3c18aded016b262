#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace msgnet {

/// Double-path VQ-VAE encoder/decoder hyperparameters.
struct BackboneConfig {
    std::int64_t image_size = 32;
    std::int64_t channels = 3;
    std::int64_t hidden_dim = 128;
    std::int64_t residual_dim = 64;
    std::int64_t residual_blocks = 2;
    std::int64_t downsample_factor = 4;
    std::int64_t attention_heads = 1;
    std::int64_t attention_dim = 16;

    std::int64_t latent_size() const { return image_size / downsample_factor; }
    void validate() const;
};

struct QuantizerConfig {
    std::int64_t codebook_num = 256;  // K, entries per codebook
    std::int64_t codebook_size = 64;  // D, prototype vector dimension
    double commitment = 0.25;         // beta
    // Every this many VQ-VAE steps, entries left unused since the previous
    // check are re-seeded from current encoder outputs (0 disables).
    std::int64_t code_reset_interval = 0;
    void validate() const;
};

enum class Schedule { constant, linear, cyclical };

std::string to_string(Schedule schedule);
Schedule parse_schedule(std::string_view text);

struct OptimizerConfig {
    double learning_rate = 1e-3;
    Schedule schedule = Schedule::linear;
    std::int64_t batch_size = 32;
    std::int64_t iterations = 1000;
    // Full triangular cycle length; only used by Schedule::cyclical.
    std::int64_t cycle_period = 2000;

    /// Learning rate at a zero-based step.
    double rate_at(std::int64_t step) const;
    void validate() const;
};

/// Hyperparameters of one autoregressive prior. The latent prior and the
/// layout prior are both instances of the same network with different
/// settings.
struct PriorConfig {
    std::int64_t grid_height = 16;
    std::int64_t grid_width = 8;
    std::int64_t vocab_size = 256;
    std::int64_t hidden_dim = 96;
    std::int64_t residual_dim = 96;
    std::int64_t residual_blocks = 2;
    std::int64_t output_residual_blocks = 0;
    std::int64_t conditional_residual_blocks = 2;
    std::int64_t conditional_residual_dim = 64;
    std::int64_t condition_embedding_dim = 32;
    // Number of condition classes including background; 0 disables conditioning.
    // One extra embedding row past the last class is the learned null condition.
    std::int64_t condition_classes = 0;
    // Spatial size of the condition map; the token grid height must be a
    // multiple of condition_height (the map is tiled along the height).
    std::int64_t condition_height = 8;
    std::int64_t condition_width = 8;
    // 0 feeds one-hot tokens; otherwise tokens pass through a learned embedding.
    std::int64_t token_embedding_dim = 0;
    std::int64_t attention_dim = 64;
    std::int64_t attention_heads = 8;
    double dropout = 0.1;

    bool conditional() const { return condition_classes > 0; }
    std::int64_t null_condition() const { return condition_classes; }
    void validate() const;
};

/// Synthetic dataset settings.
struct DataConfig {
    std::int64_t dataset_size = 10000;
    std::int64_t min_objects = 1;
    std::int64_t max_objects = 3;
    std::int64_t min_object_size = 9;
    std::int64_t max_object_size = 14;
    std::int64_t corner_margin = 4;
    bool constraint_mode = false;
    bool box_annotation = false;
    double val_fraction = 0.1;
    void validate(std::int64_t image_size) const;
};

/// Miniature U-Net used by the evaluation protocol.
struct SegmenterConfig {
    std::int64_t base_channels = 16;
    std::int64_t iterations = 600;
    std::int64_t batch_size = 16;
    double learning_rate = 2e-3;
    void validate() const;
};

struct ModelConfig {
    BackboneConfig backbone;
    QuantizerConfig quantizer;
    OptimizerConfig vqvae_optimizer;

    PriorConfig latent_prior;
    OptimizerConfig latent_optimizer;
    // Fraction of latent-prior training items whose condition is replaced by
    // the null class, so the unconditional sampling mode has a trained row.
    double null_condition_rate = 0.1;

    PriorConfig layout_prior;
    OptimizerConfig layout_optimizer;

    DataConfig data;
    SegmenterConfig segmenter;
    std::uint64_t seed = 0;

    /// Desk-scale defaults (32x32 synthetic scenes).
    static ModelConfig desk_default();
    /// Parses the flat `key=value` format. Keys not present keep their desk
    /// default; unknown keys and malformed values raise ConfigError.
    static ModelConfig parse(std::string_view text);
    static ModelConfig load(const std::filesystem::path& path);

    /// Every key in canonical order; parse(to_text()) reproduces *this.
    std::string to_text() const;
    void save(const std::filesystem::path& path) const;

    /// Fills the grid/vocab fields of both priors from the backbone, the
    /// quantizer and the dataset class count.
    void derive();
    void validate() const;

    /// Fingerprint of the settings that determine the VQ-VAE code space.
    std::uint64_t code_space_hash() const;
    /// Fingerprint of the layout vocabulary and grid.
    std::uint64_t layout_space_hash() const;

    static std::vector<std::string> keys();
};

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace msgnet
