#pragma once

#include <torch/torch.h>

#include <utility>

#include "msgnet/config.hpp"
#include "msgnet/quantizer.hpp"

namespace msgnet::backbone {

/// Spatial extent at which self-attention is no longer allowed.
inline constexpr std::int64_t kMaxAttentionExtent = 64;

/// Encoder outputs of both paths, channel-last ([N, H, W, D]).
struct EncodedPair {
    torch::Tensor attention_path;
    torch::Tensor plain_path;
};

/// Self-attention over all spatial positions with a residual connection
/// scaled by a learned gamma that starts at zero, so a fresh block is the
/// identity map.
class SelfAttention2dImpl : public torch::nn::Module {
public:
    SelfAttention2dImpl(std::int64_t channels, std::int64_t attention_dim, std::int64_t heads);

    torch::Tensor forward(const torch::Tensor& x) { return forward_with_weights(x).first; }
    /// Also returns the attention weights, [N, heads, HW, HW]; rows sum to one.
    std::pair<torch::Tensor, torch::Tensor> forward_with_weights(const torch::Tensor& x);

    torch::nn::Conv2d query{nullptr};
    torch::nn::Conv2d key{nullptr};
    torch::nn::Conv2d value{nullptr};
    torch::Tensor gamma;

private:
    std::int64_t heads_;
};
TORCH_MODULE(SelfAttention2d);

class ResidualStackImpl : public torch::nn::Module {
public:
    ResidualStackImpl(std::int64_t channels, std::int64_t residual_dim, std::int64_t blocks);
    torch::Tensor forward(torch::Tensor x);

private:
    torch::nn::ModuleList blocks_;
};
TORCH_MODULE(ResidualStack);

/// One encoder path: strided 4x4 convolutions down to the latent grid, a
/// residual stack, then a 1x1 projection to the codebook dimension.
class EncoderPathImpl : public torch::nn::Module {
public:
    EncoderPathImpl(const BackboneConfig& config, std::int64_t code_dim, bool with_attention);
    /// NCHW image in, NCHW features at latent resolution out.
    torch::Tensor forward(const torch::Tensor& image);

    bool has_attention() const { return !attention.is_empty(); }
    /// Spatial extent of the feature map fed to the attention block.
    std::int64_t attention_extent() const { return attention_extent_; }

    torch::nn::Sequential attention{nullptr};

private:
    torch::nn::Sequential head_{nullptr};
    torch::nn::Sequential tail_{nullptr};
    std::int64_t attention_extent_ = 0;
};
TORCH_MODULE(EncoderPath);

/// Decoder fed with both quantized grids concatenated along channels.
class DecoderImpl : public torch::nn::Module {
public:
    DecoderImpl(const BackboneConfig& config, std::int64_t code_dim);
    /// NCHW [N, 2D, H, W] in, image in [-1, 1] out.
    torch::Tensor forward(const torch::Tensor& merged);

private:
    torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Decoder);

struct VqVaeOutput {
    EncodedPair encodings;
    torch::Tensor reconstruction;
    quantizer::QuantizationResult attention_codes;
    quantizer::QuantizationResult plain_codes;
    torch::Tensor reconstruction_loss;
    torch::Tensor codebook_loss;
    torch::Tensor commitment_loss;
    /// reconstruction + codebook + commitment_weight * commitment
    torch::Tensor total_loss;
};

/// Double-path VQ-VAE: an attention encoder path and a plain convolutional
/// path, each quantized by its own codebook, decoded jointly.
class DoublePathVqVaeImpl : public torch::nn::Module {
public:
    DoublePathVqVaeImpl(const BackboneConfig& config, const QuantizerConfig& quantizer, std::uint64_t seed);

    /// Image [N, C, S, S] in [-1, 1] to two channel-last grids [N, H, W, D].
    EncodedPair encode(const torch::Tensor& image);
    /// Channel-last grids [N, H, W, D] to an image [N, C, S, S] in [-1, 1].
    torch::Tensor decode(const torch::Tensor& attention_grid, const torch::Tensor& plain_grid);

    /// Full training pass with straight-through gradients.
    VqVaeOutput forward(const torch::Tensor& image);

    /// Nearest-prototype indices of both paths, [N, H, W] each.
    std::pair<torch::Tensor, torch::Tensor> encode_indices(const torch::Tensor& image);
    torch::Tensor decode_indices(const torch::Tensor& attention_indices, const torch::Tensor& plain_indices);

    /// Decoder output with the other path's grid replaced by zeros.
    torch::Tensor attention_contribution(const torch::Tensor& attention_grid);
    torch::Tensor plain_contribution(const torch::Tensor& plain_grid);

    const BackboneConfig& config() const { return config_; }
    double commitment() const { return commitment_; }

    EncoderPath attention_encoder{nullptr};
    EncoderPath plain_encoder{nullptr};
    quantizer::Codebook attention_codebook{nullptr};
    quantizer::Codebook plain_codebook{nullptr};
    Decoder decoder{nullptr};

private:
    void check_image(const torch::Tensor& image) const;

    BackboneConfig config_;
    double commitment_;
};
TORCH_MODULE(DoublePathVqVae);

}  // namespace msgnet::backbone
