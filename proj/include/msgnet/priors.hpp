#pragma once

#include <torch/torch.h>

#include <cstdint>

#include "msgnet/config.hpp"

namespace msgnet::priors {

/// Convolution whose receptive field only reaches upwards (`down`: rows
/// <= current, full kernel width centered on the column) or up-and-left
/// (`down_right`: rows <= current, columns <= current). Causality comes from
/// asymmetric zero padding, never from masked weights.
enum class CausalKind { down, down_right };

class CausalConv2dImpl : public torch::nn::Module {
public:
    CausalConv2dImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel_height,
                     std::int64_t kernel_width, CausalKind kind);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv2d conv{nullptr};

private:
    std::vector<std::int64_t> padding_;
};
TORCH_MODULE(CausalConv2d);

/// Moves features one row down (zero row enters at the top).
torch::Tensor shift_down(const torch::Tensor& x);
/// Moves features one column right (zero column enters on the left).
torch::Tensor shift_right(const torch::Tensor& x);

enum class ConvKind { causal, spatial, pointwise };

/// Gated residual unit: x + a * sigmoid(b), with [a, b] produced from
/// ELU-activated convolutions and an optional auxiliary input added before
/// the gate.
class GatedResidualImpl : public torch::nn::Module {
public:
    GatedResidualImpl(std::int64_t channels, std::int64_t inner_channels, ConvKind kind, double dropout,
                      std::int64_t aux_channels);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& aux = {});

private:
    torch::nn::AnyModule conv_in_;
    torch::nn::AnyModule conv_out_;
    torch::nn::Conv2d aux_proj_{nullptr};
    torch::nn::Dropout dropout_{nullptr};
};
TORCH_MODULE(GatedResidual);

/// Multi-head attention in which position i only reads keys at raster
/// positions strictly before i. Position 0 reads nothing and outputs zeros.
class CausalAttentionImpl : public torch::nn::Module {
public:
    CausalAttentionImpl(std::int64_t query_channels, std::int64_t key_channels, std::int64_t attention_dim,
                        std::int64_t heads);
    /// NCHW query source and key/value source sharing H x W; returns
    /// [N, attention_dim, H, W].
    torch::Tensor forward(const torch::Tensor& query_source, const torch::Tensor& key_source);

private:
    torch::nn::Conv2d query_{nullptr};
    torch::nn::Conv2d key_{nullptr};
    torch::nn::Conv2d value_{nullptr};
    std::int64_t heads_;
};
TORCH_MODULE(CausalAttention);

/// Gated residual followed by causal attention merged back via a pointwise
/// gated residual.
class SnailBlockImpl : public torch::nn::Module {
public:
    SnailBlockImpl(const PriorConfig& config, std::int64_t input_channels, std::int64_t condition_channels);
    torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& input, const torch::Tensor& background,
                          const torch::Tensor& condition);

private:
    GatedResidual residual_{nullptr};
    CausalAttention attention_{nullptr};
    GatedResidual merge_{nullptr};
};
TORCH_MODULE(SnailBlock);

/// Autoregressive categorical model over an index grid in row-major raster
/// order, optionally conditioned on a class map known in full before
/// sampling starts. Both the latent-code prior and the layout prior are
/// instances of this one network.
class PixelSnailImpl : public torch::nn::Module {
public:
    PixelSnailImpl(const PriorConfig& config, std::uint64_t seed);

    /// tokens [N, H, W] int64 in [0, vocab); condition [N, Hc, Wc] int64 in
    /// [0, classes] (value `classes` is the null condition) or undefined.
    /// Returns [N, H, W, vocab] logits; position p only depends on tokens
    /// strictly before p and on the whole condition map.
    torch::Tensor logits(const torch::Tensor& tokens, const torch::Tensor& condition = {});

    /// Mean cross-entropy (nats per position).
    torch::Tensor nll(const torch::Tensor& tokens, const torch::Tensor& condition = {});

    /// Redraws the zero-initialized output projection; used to make
    /// structural tests sensitive before any training happened.
    void randomize_output_head(std::uint64_t seed);

    const PriorConfig& config() const { return config_; }

private:
    torch::Tensor token_input(const torch::Tensor& tokens);
    torch::Tensor background(std::int64_t batch, const torch::TensorOptions& options) const;
    torch::Tensor condition_features(const torch::Tensor& condition, std::int64_t batch);
    void validate_inputs(const torch::Tensor& tokens, const torch::Tensor& condition) const;

    PriorConfig config_;
    torch::nn::Embedding token_embedding_{nullptr};
    CausalConv2d input_down_{nullptr};
    CausalConv2d input_down_right_{nullptr};
    torch::nn::Embedding condition_embedding_{nullptr};
    torch::nn::Conv2d condition_in_{nullptr};
    torch::nn::ModuleList condition_blocks_{nullptr};
    torch::nn::ModuleList blocks_{nullptr};
    torch::nn::ModuleList output_blocks_{nullptr};
    torch::nn::Conv2d output_{nullptr};
};
TORCH_MODULE(PixelSnail);

/// Raster-order ancestral sampling of `count` grids: each position is drawn
/// from softmax(logits / temperature) given everything sampled before it.
/// Identical (seed, condition, parameters) give identical grids. Dropout is
/// disabled while sampling and the module's training flag is restored after.
torch::Tensor sample(PixelSnail& model, std::int64_t count, const torch::Tensor& condition, double temperature,
                     std::uint64_t seed);

}  // namespace msgnet::priors
