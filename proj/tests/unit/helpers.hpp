#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>

#include "msgnet/config.hpp"

namespace msgnet::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("msgnet-test-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// 32x32 images, 8x8 latent grid, but very narrow networks.
inline ModelConfig small_config() {
    auto c = ModelConfig::desk_default();
    c.backbone.hidden_dim = 16;
    c.backbone.residual_dim = 8;
    c.backbone.residual_blocks = 1;
    c.backbone.attention_dim = 8;
    c.quantizer.codebook_num = 16;
    c.quantizer.codebook_size = 8;
    c.vqvae_optimizer.batch_size = 4;
    c.vqvae_optimizer.iterations = 20;
    for (auto* p : {&c.latent_prior, &c.layout_prior}) {
        p->hidden_dim = 16;
        p->residual_dim = 16;
        p->residual_blocks = 1;
        p->output_residual_blocks = 0;
        p->attention_dim = 8;
        p->attention_heads = 2;
    }
    c.latent_prior.conditional_residual_blocks = 1;
    c.latent_prior.conditional_residual_dim = 8;
    c.latent_prior.condition_embedding_dim = 8;
    c.layout_prior.token_embedding_dim = 8;
    c.latent_optimizer.batch_size = 4;
    c.latent_optimizer.iterations = 20;
    c.layout_optimizer.batch_size = 4;
    c.layout_optimizer.iterations = 20;
    c.data.dataset_size = 24;
    c.segmenter.base_channels = 4;
    c.segmenter.iterations = 20;
    c.segmenter.batch_size = 4;
    c.derive();
    c.validate();
    return c;
}

}  // namespace msgnet::testing
