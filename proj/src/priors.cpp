#include "msgnet/priors.hpp"

#include <cmath>

#include "msgnet/errors.hpp"

namespace msgnet::priors {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

constexpr std::int64_t kBackgroundChannels = 3;
constexpr double kMaskedScore = -1e9;

nn::AnyModule make_conv(ConvKind kind, std::int64_t in, std::int64_t out) {
    switch (kind) {
        case ConvKind::causal:
            return nn::AnyModule(CausalConv2d(in, out, 2, 2, CausalKind::down_right));
        case ConvKind::spatial:
            return nn::AnyModule(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
        case ConvKind::pointwise:
            return nn::AnyModule(nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
    }
    throw ConfigError("unknown conv kind");
}

}  // namespace

CausalConv2dImpl::CausalConv2dImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel_height,
                                   std::int64_t kernel_width, CausalKind kind) {
    // F::pad order: left, right, top, bottom.
    if (kind == CausalKind::down) {
        padding_ = {kernel_width / 2, kernel_width / 2, kernel_height - 1, 0};
        if (kernel_width % 2 == 0) {
            throw ConfigError("down-shifted causal conv needs an odd kernel width");
        }
    } else {
        padding_ = {kernel_width - 1, 0, kernel_height - 1, 0};
    }
    conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels,
                                                                {kernel_height, kernel_width})));
}

torch::Tensor CausalConv2dImpl::forward(const torch::Tensor& x) {
    return conv->forward(F::pad(x, F::PadFuncOptions(padding_)));
}

torch::Tensor shift_down(const torch::Tensor& x) {
    const auto h = x.size(2);
    return F::pad(x, F::PadFuncOptions({0, 0, 1, 0})).narrow(2, 0, h);
}

torch::Tensor shift_right(const torch::Tensor& x) {
    const auto w = x.size(3);
    return F::pad(x, F::PadFuncOptions({1, 0, 0, 0})).narrow(3, 0, w);
}

GatedResidualImpl::GatedResidualImpl(std::int64_t channels, std::int64_t inner_channels, ConvKind kind,
                                     double dropout, std::int64_t aux_channels) {
    conv_in_ = make_conv(kind, channels, inner_channels);
    conv_out_ = make_conv(kind, inner_channels, 2 * channels);
    register_module("conv_in", conv_in_.ptr());
    register_module("conv_out", conv_out_.ptr());
    if (aux_channels > 0) {
        aux_proj_ = register_module("aux_proj", nn::Conv2d(nn::Conv2dOptions(aux_channels, 2 * channels, 1)));
    }
    dropout_ = register_module("dropout", nn::Dropout(dropout));
}

torch::Tensor GatedResidualImpl::forward(const torch::Tensor& x, const torch::Tensor& aux) {
    auto h = conv_in_.forward<torch::Tensor>(torch::elu(x));
    h = dropout_->forward(torch::elu(h));
    h = conv_out_.forward<torch::Tensor>(h);
    if (aux.defined()) {
        if (aux_proj_.is_empty()) {
            throw ShapeError("gated residual built without an auxiliary input");
        }
        h = h + aux_proj_->forward(torch::elu(aux));
    }
    const auto gates = h.chunk(2, 1);
    return x + gates[0] * torch::sigmoid(gates[1]);
}

CausalAttentionImpl::CausalAttentionImpl(std::int64_t query_channels, std::int64_t key_channels,
                                         std::int64_t attention_dim, std::int64_t heads)
    : heads_(heads) {
    if (heads < 1 || attention_dim % heads != 0) {
        throw ConfigError("attention_dim must be divisible by attention_heads");
    }
    query_ = register_module("query", nn::Conv2d(nn::Conv2dOptions(query_channels, attention_dim, 1)));
    key_ = register_module("key", nn::Conv2d(nn::Conv2dOptions(key_channels, attention_dim, 1)));
    value_ = register_module("value", nn::Conv2d(nn::Conv2dOptions(key_channels, attention_dim, 1)));
}

torch::Tensor CausalAttentionImpl::forward(const torch::Tensor& query_source, const torch::Tensor& key_source) {
    const auto n = query_source.size(0);
    const auto h = query_source.size(2);
    const auto w = query_source.size(3);
    const auto p = h * w;
    const auto split = [&](const torch::Tensor& t) {
        return t.reshape({n, heads_, -1, p}).transpose(2, 3);  // [N, heads, P, d]
    };
    const auto q = split(query_->forward(query_source));
    const auto k = split(key_->forward(key_source));
    const auto v = split(value_->forward(key_source));
    const auto head_dim = q.size(3);

    const auto opts = torch::TensorOptions().dtype(torch::kBool);
    // allowed[i][j] <=> j < i
    const auto allowed = torch::ones({p, p}, opts).tril(-1);
    auto scores = q.matmul(k.transpose(2, 3)) / std::sqrt(static_cast<double>(head_dim));
    scores = scores.masked_fill(allowed.logical_not(), kMaskedScore);
    auto weights = torch::softmax(scores, -1);
    // Row 0 has no admissible key; its (uniform) weights are zeroed.
    weights = weights * allowed.any(1).to(weights.dtype()).unsqueeze(1);
    const auto out = weights.matmul(v);  // [N, heads, P, d]
    return out.transpose(2, 3).reshape({n, -1, h, w});
}

SnailBlockImpl::SnailBlockImpl(const PriorConfig& config, std::int64_t input_channels,
                               std::int64_t condition_channels) {
    residual_ = register_module("residual", GatedResidual(config.hidden_dim, config.residual_dim, ConvKind::causal,
                                                          config.dropout, condition_channels));
    attention_ = register_module(
        "attention", CausalAttention(config.hidden_dim + kBackgroundChannels, config.hidden_dim + input_channels,
                                     config.attention_dim, config.attention_heads));
    merge_ = register_module("merge", GatedResidual(config.hidden_dim, config.residual_dim, ConvKind::pointwise,
                                                    config.dropout, config.attention_dim));
}

torch::Tensor SnailBlockImpl::forward(const torch::Tensor& h, const torch::Tensor& input,
                                      const torch::Tensor& background, const torch::Tensor& condition) {
    const auto r = residual_->forward(h, condition);
    const auto attended = attention_->forward(torch::cat({r, background}, 1), torch::cat({r, input}, 1));
    return merge_->forward(r, attended);
}

PixelSnailImpl::PixelSnailImpl(const PriorConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    torch::manual_seed(seed);

    const auto token_channels = config.token_embedding_dim > 0 ? config.token_embedding_dim : config.vocab_size;
    if (config.token_embedding_dim > 0) {
        token_embedding_ = register_module("token_embedding", nn::Embedding(config.vocab_size, config.token_embedding_dim));
    }
    // Token features plus the background (position) channels.
    const auto input_channels = token_channels + kBackgroundChannels;
    input_down_ = register_module("input_down", CausalConv2d(input_channels, config.hidden_dim, 2, 3, CausalKind::down));
    input_down_right_ =
        register_module("input_down_right", CausalConv2d(input_channels, config.hidden_dim, 2, 2, CausalKind::down_right));

    std::int64_t condition_channels = 0;
    if (config.conditional()) {
        condition_embedding_ = register_module(
            "condition_embedding", nn::Embedding(config.condition_classes + 1, config.condition_embedding_dim));
        condition_in_ = register_module(
            "condition_in",
            nn::Conv2d(nn::Conv2dOptions(config.condition_embedding_dim, config.conditional_residual_dim, 3).padding(1)));
        condition_blocks_ = register_module("condition_blocks", nn::ModuleList());
        for (std::int64_t i = 0; i < config.conditional_residual_blocks; ++i) {
            condition_blocks_->push_back(GatedResidual(config.conditional_residual_dim, config.conditional_residual_dim,
                                                       ConvKind::spatial, config.dropout, 0));
        }
        condition_channels = config.conditional_residual_dim;
    }

    blocks_ = register_module("blocks", nn::ModuleList());
    for (std::int64_t i = 0; i < config.residual_blocks; ++i) {
        blocks_->push_back(SnailBlock(config, input_channels, condition_channels));
    }
    output_blocks_ = register_module("output_blocks", nn::ModuleList());
    for (std::int64_t i = 0; i < config.output_residual_blocks; ++i) {
        output_blocks_->push_back(
            GatedResidual(config.hidden_dim, config.residual_dim, ConvKind::pointwise, config.dropout, 0));
    }
    output_ = register_module("output", nn::Conv2d(nn::Conv2dOptions(config.hidden_dim, config.vocab_size, 1)));
    {
        torch::NoGradGuard no_grad;
        output_->weight.zero_();
        output_->bias.zero_();
    }
}

void PixelSnailImpl::randomize_output_head(std::uint64_t seed) {
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto fan_in = static_cast<double>(config_.hidden_dim);
    output_->weight.copy_(torch::randn(output_->weight.sizes(), gen, output_->weight.options()) / std::sqrt(fan_in));
    output_->bias.copy_(torch::randn(output_->bias.sizes(), gen, output_->bias.options()) * 0.1);
}

void PixelSnailImpl::validate_inputs(const torch::Tensor& tokens, const torch::Tensor& condition) const {
    if (tokens.dim() != 3 || tokens.size(1) != config_.grid_height || tokens.size(2) != config_.grid_width) {
        throw ShapeError("prior tokens must be [N, " + std::to_string(config_.grid_height) + ", " +
                         std::to_string(config_.grid_width) + "]");
    }
    if (tokens.numel() > 0 && (tokens.min().item<std::int64_t>() < 0 ||
                               tokens.max().item<std::int64_t>() >= config_.vocab_size)) {
        throw ValidationError("token outside the vocabulary [0, " + std::to_string(config_.vocab_size) + ")");
    }
    if (!condition.defined()) {
        return;
    }
    if (!config_.conditional()) {
        throw ShapeError("this prior is unconditional but a condition map was supplied");
    }
    if (condition.dim() != 3 || condition.size(0) != tokens.size(0) || condition.size(1) != config_.condition_height ||
        condition.size(2) != config_.condition_width) {
        throw ShapeError("condition map must be [N, " + std::to_string(config_.condition_height) + ", " +
                         std::to_string(config_.condition_width) + "]");
    }
    if (condition.numel() > 0 && (condition.min().item<std::int64_t>() < 0 ||
                                  condition.max().item<std::int64_t>() > config_.condition_classes)) {
        throw ValidationError("condition class outside [0, " + std::to_string(config_.condition_classes) + "]");
    }
}

torch::Tensor PixelSnailImpl::token_input(const torch::Tensor& tokens) {
    const auto param_opts = output_->weight.options();
    if (!token_embedding_.is_empty()) {
        return token_embedding_->forward(tokens).permute({0, 3, 1, 2});
    }
    return F::one_hot(tokens, config_.vocab_size).permute({0, 3, 1, 2}).to(param_opts.dtype());
}

torch::Tensor PixelSnailImpl::background(std::int64_t batch, const torch::TensorOptions& options) const {
    const auto h = config_.grid_height;
    const auto w = config_.grid_width;
    const auto segment = config_.conditional() ? config_.condition_height : h;
    const auto segments = h / segment;
    auto rows = torch::arange(h, options);
    const auto in_segment = torch::fmod(rows, static_cast<double>(segment)) / static_cast<double>(std::max<std::int64_t>(segment - 1, 1)) - 0.5;
    const auto which = torch::floor(rows / static_cast<double>(segment)) / static_cast<double>(std::max<std::int64_t>(segments - 1, 1)) - 0.5;
    const auto cols = torch::arange(w, options) / static_cast<double>(std::max<std::int64_t>(w - 1, 1)) - 0.5;
    const auto bg = torch::stack({in_segment.unsqueeze(1).expand({h, w}), cols.unsqueeze(0).expand({h, w}),
                                  which.unsqueeze(1).expand({h, w})});
    return bg.unsqueeze(0).expand({batch, kBackgroundChannels, h, w});
}

torch::Tensor PixelSnailImpl::condition_features(const torch::Tensor& condition, std::int64_t batch) {
    if (!config_.conditional()) {
        return {};
    }
    auto cond = condition;
    if (!cond.defined()) {
        cond = torch::full({batch, config_.condition_height, config_.condition_width}, config_.null_condition(),
                           torch::TensorOptions().dtype(torch::kLong));
    }
    auto c = condition_embedding_->forward(cond).permute({0, 3, 1, 2});
    c = condition_in_->forward(c);
    for (const auto& block : *condition_blocks_) {
        c = block->as<GatedResidual>()->forward(c);
    }
    // Tile along the height so every token segment sees the map at its own
    // spatial location.
    return c.repeat({1, 1, config_.grid_height / config_.condition_height, 1});
}

torch::Tensor PixelSnailImpl::logits(const torch::Tensor& tokens, const torch::Tensor& condition) {
    validate_inputs(tokens, condition);
    const auto batch = tokens.size(0);
    const auto opts = output_->weight.options();
    const auto bg = background(batch, opts);
    const auto input = torch::cat({token_input(tokens), bg}, 1);

    auto h = shift_down(input_down_->forward(input)) + shift_right(input_down_right_->forward(input));
    const auto cond = condition_features(condition, batch);
    for (const auto& block : *blocks_) {
        h = block->as<SnailBlock>()->forward(h, input, bg, cond);
    }
    for (const auto& block : *output_blocks_) {
        h = block->as<GatedResidual>()->forward(h);
    }
    return output_->forward(torch::elu(h)).permute({0, 2, 3, 1});
}

torch::Tensor PixelSnailImpl::nll(const torch::Tensor& tokens, const torch::Tensor& condition) {
    const auto out = logits(tokens, condition);
    return F::cross_entropy(out.reshape({-1, config_.vocab_size}), tokens.reshape({-1}));
}

torch::Tensor sample(PixelSnail& model, std::int64_t count, const torch::Tensor& condition, double temperature,
                     std::uint64_t seed) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ValidationError("sampling temperature must be positive and finite");
    }
    if (count < 0) {
        throw ValidationError("sample count must be non-negative");
    }
    const auto& cfg = model->config();
    const bool was_training = model->is_training();
    model->eval();
    torch::NoGradGuard no_grad;

    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto grid = torch::zeros({count, cfg.grid_height, cfg.grid_width}, torch::TensorOptions().dtype(torch::kLong));
    for (std::int64_t r = 0; r < cfg.grid_height && count > 0; ++r) {
        for (std::int64_t c = 0; c < cfg.grid_width; ++c) {
            const auto step_logits = model->logits(grid, condition).select(1, r).select(1, c);  // [N, V]
            const auto probs = torch::softmax(step_logits.to(torch::kDouble) / temperature, -1);
            grid.select(1, r).select(1, c).copy_(torch::multinomial(probs, 1, false, gen).squeeze(1));
        }
    }
    model->train(was_training);
    return grid;
}

}  // namespace msgnet::priors
