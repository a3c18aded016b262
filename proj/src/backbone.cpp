#include "msgnet/backbone.hpp"

#include <cmath>

#include "msgnet/errors.hpp"

namespace msgnet::backbone {

namespace nn = torch::nn;

namespace {

std::int64_t log2_exact(std::int64_t v) {
    std::int64_t n = 0;
    while ((std::int64_t{1} << n) < v) {
        ++n;
    }
    return n;
}

}  // namespace

SelfAttention2dImpl::SelfAttention2dImpl(std::int64_t channels, std::int64_t attention_dim, std::int64_t heads)
    : heads_(heads) {
    if (heads < 1 || attention_dim % heads != 0 || channels % heads != 0) {
        throw ConfigError("self-attention: channels and attention_dim must be divisible by the head count");
    }
    query = register_module("query", nn::Conv2d(nn::Conv2dOptions(channels, attention_dim, 1)));
    key = register_module("key", nn::Conv2d(nn::Conv2dOptions(channels, attention_dim, 1)));
    value = register_module("value", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
    gamma = register_parameter("gamma", torch::zeros({1}));
}

std::pair<torch::Tensor, torch::Tensor> SelfAttention2dImpl::forward_with_weights(const torch::Tensor& x) {
    if (x.dim() != 4) {
        throw ShapeError("self-attention expects an NCHW tensor");
    }
    const auto n = x.size(0);
    const auto c = x.size(1);
    const auto h = x.size(2);
    const auto w = x.size(3);
    if (h >= kMaxAttentionExtent || w >= kMaxAttentionExtent) {
        throw ShapeError("self-attention placed on a " + std::to_string(h) + "x" + std::to_string(w) +
                         " feature grid; width and height must stay below " + std::to_string(kMaxAttentionExtent));
    }
    const auto positions = h * w;
    const auto q = query->forward(x).reshape({n, heads_, -1, positions}).transpose(2, 3);  // [N, h, P, d]
    const auto k = key->forward(x).reshape({n, heads_, -1, positions});                    // [N, h, d, P]
    const auto v = value->forward(x).reshape({n, heads_, c / heads_, positions});          // [N, h, C/h, P]
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(3)));
    const auto weights = torch::softmax(q.matmul(k) * scale, -1);                          // [N, h, P, P]
    const auto attended = v.matmul(weights.transpose(2, 3)).reshape({n, c, h, w});
    return {x + gamma * attended, weights};
}

ResidualStackImpl::ResidualStackImpl(std::int64_t channels, std::int64_t residual_dim, std::int64_t blocks) {
    blocks_ = register_module("blocks", nn::ModuleList());
    for (std::int64_t i = 0; i < blocks; ++i) {
        blocks_->push_back(nn::Sequential(nn::ReLU(),
                                          nn::Conv2d(nn::Conv2dOptions(channels, residual_dim, 3).padding(1)),
                                          nn::ReLU(),
                                          nn::Conv2d(nn::Conv2dOptions(residual_dim, channels, 1))));
    }
}

torch::Tensor ResidualStackImpl::forward(torch::Tensor x) {
    for (const auto& block : *blocks_) {
        x = x + block->as<nn::Sequential>()->forward(x);
    }
    return torch::relu(x);
}

EncoderPathImpl::EncoderPathImpl(const BackboneConfig& config, std::int64_t code_dim, bool with_attention) {
    const auto strided = log2_exact(config.downsample_factor);
    head_ = nn::Sequential();
    tail_ = nn::Sequential();

    // The attention block goes right after the first strided convolution
    // whose output is smaller than kMaxAttentionExtent.
    std::int64_t extent = config.image_size;
    std::int64_t in_ch = config.channels;
    bool attention_placed = !with_attention;
    for (std::int64_t s = 0; s < strided; ++s) {
        const auto out_ch = s + 1 == strided ? config.hidden_dim : config.hidden_dim / 2;
        auto& target = attention_placed ? tail_ : head_;
        target->push_back(nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 4).stride(2).padding(1)));
        target->push_back(nn::ReLU());
        extent /= 2;
        in_ch = out_ch;
        if (!attention_placed && extent < kMaxAttentionExtent) {
            attention = nn::Sequential(SelfAttention2d(in_ch, config.attention_dim, config.attention_heads));
            attention_extent_ = extent;
            attention_placed = true;
        }
    }
    if (!attention_placed) {
        throw ConfigError("image too large: no feature map below the self-attention size limit");
    }
    tail_->push_back(nn::Conv2d(nn::Conv2dOptions(in_ch, config.hidden_dim, 3).padding(1)));
    tail_->push_back(ResidualStack(config.hidden_dim, config.residual_dim, config.residual_blocks));
    tail_->push_back(nn::Conv2d(nn::Conv2dOptions(config.hidden_dim, code_dim, 1)));

    register_module("head", head_);
    if (with_attention) {
        register_module("attention", attention);
    }
    register_module("tail", tail_);
}

torch::Tensor EncoderPathImpl::forward(const torch::Tensor& image) {
    auto x = head_->is_empty() ? image : head_->forward(image);
    if (has_attention()) {
        x = attention->forward(x);
    }
    return tail_->forward(x);
}

DecoderImpl::DecoderImpl(const BackboneConfig& config, std::int64_t code_dim) {
    const auto strided = log2_exact(config.downsample_factor);
    body_ = nn::Sequential();
    body_->push_back(nn::Conv2d(nn::Conv2dOptions(2 * code_dim, config.hidden_dim, 3).padding(1)));
    body_->push_back(ResidualStack(config.hidden_dim, config.residual_dim, config.residual_blocks));
    std::int64_t in_ch = config.hidden_dim;
    for (std::int64_t s = 0; s < strided; ++s) {
        const bool last = s + 1 == strided;
        const auto out_ch = last ? config.channels : config.hidden_dim / 2;
        body_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in_ch, out_ch, 4).stride(2).padding(1)));
        if (!last) {
            body_->push_back(nn::ReLU());
        }
        in_ch = out_ch;
    }
    body_->push_back(nn::Tanh());
    register_module("body", body_);
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& merged) { return body_->forward(merged); }

DoublePathVqVaeImpl::DoublePathVqVaeImpl(const BackboneConfig& config, const QuantizerConfig& quantizer,
                                         std::uint64_t seed)
    : config_(config), commitment_(quantizer.commitment) {
    config.validate();
    quantizer.validate();
    // Module construction draws default initializations from the global generator.
    torch::manual_seed(seed);
    attention_encoder = register_module("attention_encoder", EncoderPath(config, quantizer.codebook_size, true));
    plain_encoder = register_module("plain_encoder", EncoderPath(config, quantizer.codebook_size, false));
    attention_codebook =
        register_module("attention_codebook", quantizer::Codebook(quantizer.codebook_num, quantizer.codebook_size, seed + 1));
    plain_codebook =
        register_module("plain_codebook", quantizer::Codebook(quantizer.codebook_num, quantizer.codebook_size, seed + 2));
    decoder = register_module("decoder", Decoder(config, quantizer.codebook_size));
}

void DoublePathVqVaeImpl::check_image(const torch::Tensor& image) const {
    if (image.dim() != 4 || image.size(1) != config_.channels || image.size(2) != config_.image_size ||
        image.size(3) != config_.image_size) {
        throw ShapeError("expected images of shape [N, " + std::to_string(config_.channels) + ", " +
                         std::to_string(config_.image_size) + ", " + std::to_string(config_.image_size) + "]");
    }
}

EncodedPair DoublePathVqVaeImpl::encode(const torch::Tensor& image) {
    check_image(image);
    return {attention_encoder->forward(image).permute({0, 2, 3, 1}),
            plain_encoder->forward(image).permute({0, 2, 3, 1})};
}

torch::Tensor DoublePathVqVaeImpl::decode(const torch::Tensor& attention_grid, const torch::Tensor& plain_grid) {
    if (!attention_grid.sizes().equals(plain_grid.sizes()) || attention_grid.dim() != 4) {
        throw ShapeError("decode: both latent grids must share one [N, H, W, D] shape");
    }
    const auto latent = config_.latent_size();
    if (attention_grid.size(1) != latent || attention_grid.size(2) != latent ||
        attention_grid.size(3) != attention_codebook->dim()) {
        throw ShapeError("decode: latent grid does not match the configured latent size / codebook dimension");
    }
    const auto merged = torch::cat({attention_grid, plain_grid}, 3).permute({0, 3, 1, 2});
    return decoder->forward(merged);
}

VqVaeOutput DoublePathVqVaeImpl::forward(const torch::Tensor& image) {
    const auto encoded = encode(image);
    VqVaeOutput out;
    out.encodings = encoded;
    out.attention_codes = attention_codebook->forward(encoded.attention_path);
    out.plain_codes = plain_codebook->forward(encoded.plain_path);
    const auto st_attention = quantizer::straight_through(encoded.attention_path, out.attention_codes.quantized);
    const auto st_plain = quantizer::straight_through(encoded.plain_path, out.plain_codes.quantized);
    out.reconstruction = decode(st_attention, st_plain);
    out.reconstruction_loss = torch::mse_loss(out.reconstruction, image);
    out.codebook_loss = out.attention_codes.codebook_loss + out.plain_codes.codebook_loss;
    out.commitment_loss = out.attention_codes.commitment_loss + out.plain_codes.commitment_loss;
    out.total_loss = out.reconstruction_loss + out.codebook_loss + commitment_ * out.commitment_loss;
    return out;
}

std::pair<torch::Tensor, torch::Tensor> DoublePathVqVaeImpl::encode_indices(const torch::Tensor& image) {
    const auto encoded = encode(image);
    return {attention_codebook->forward(encoded.attention_path).indices,
            plain_codebook->forward(encoded.plain_path).indices};
}

torch::Tensor DoublePathVqVaeImpl::decode_indices(const torch::Tensor& attention_indices,
                                                  const torch::Tensor& plain_indices) {
    return decode(attention_codebook->lookup(attention_indices), plain_codebook->lookup(plain_indices));
}

torch::Tensor DoublePathVqVaeImpl::attention_contribution(const torch::Tensor& attention_grid) {
    return decode(attention_grid, torch::zeros_like(attention_grid));
}

torch::Tensor DoublePathVqVaeImpl::plain_contribution(const torch::Tensor& plain_grid) {
    return decode(torch::zeros_like(plain_grid), plain_grid);
}

}  // namespace msgnet::backbone
