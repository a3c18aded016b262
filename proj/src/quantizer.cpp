#include "msgnet/quantizer.hpp"

#include <cmath>

#include "msgnet/errors.hpp"

namespace msgnet::quantizer {

namespace {

// Forward returns the quantized tensor untouched; backward copies the
// incoming gradient to the encodings.
struct StraightThroughFn : public torch::autograd::Function<StraightThroughFn> {
    static torch::Tensor forward(torch::autograd::AutogradContext*, const torch::Tensor& encodings,
                                 const torch::Tensor& quantized) {
        (void)encodings;
        return quantized.clone();
    }

    static torch::autograd::variable_list backward(torch::autograd::AutogradContext*,
                                                    torch::autograd::variable_list grad_outputs) {
        return {grad_outputs[0], torch::Tensor()};
    }
};

}  // namespace

QuantizationResult quantize(const torch::Tensor& encodings, const torch::Tensor& entries) {
    if (entries.dim() != 2 || entries.size(0) < 2) {
        throw ShapeError("codebook must be a K x D matrix with K >= 2");
    }
    if (encodings.dim() < 1 || encodings.size(-1) != entries.size(1)) {
        throw ShapeError("encodings last dimension " + std::to_string(encodings.dim() ? encodings.size(-1) : 0) +
                         " does not match codebook dimension " + std::to_string(entries.size(1)));
    }
    if (!torch::isfinite(encodings).all().item<bool>()) {
        throw ValidationError("encodings contain non-finite values");
    }

    const auto dim = entries.size(1);
    const auto flat = encodings.reshape({-1, dim});
    torch::Tensor indices;
    {
        torch::NoGradGuard no_grad;
        // ||x||^2 - 2 x.e + ||e||^2; argmin returns the first minimum.
        const auto distances = flat.pow(2).sum(1, true) - 2.0 * flat.matmul(entries.t()) + entries.pow(2).sum(1).unsqueeze(0);
        indices = distances.argmin(1);
    }
    const auto chosen = entries.index_select(0, indices);

    auto leading = encodings.sizes().vec();
    leading.pop_back();

    QuantizationResult out;
    out.indices = indices.reshape(leading);
    out.quantized = chosen.reshape(encodings.sizes());
    out.codebook_loss = (flat.detach() - chosen).pow(2).sum(1).mean();
    out.commitment_loss = (flat - chosen.detach()).pow(2).sum(1).mean();
    return out;
}

torch::Tensor straight_through(const torch::Tensor& encodings, const torch::Tensor& quantized) {
    if (!encodings.sizes().equals(quantized.sizes())) {
        throw ShapeError("straight_through: shape mismatch between encodings and quantized tensor");
    }
    return StraightThroughFn::apply(encodings, quantized);
}

CodebookImpl::CodebookImpl(std::int64_t entry_count, std::int64_t dim, std::uint64_t generator_seed) {
    if (entry_count < 2 || dim < 1) {
        throw ShapeError("codebook needs K >= 2 entries of dimension D >= 1");
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(generator_seed);
    auto init = torch::randn({entry_count, dim}, gen, torch::TensorOptions().dtype(torch::kFloat32)) /
                std::sqrt(static_cast<double>(dim));
    entries = register_parameter("entries", init);
}

torch::Tensor CodebookImpl::lookup(const torch::Tensor& indices) const {
    auto shape = indices.sizes().vec();
    shape.push_back(entries.size(1));
    return entries.index_select(0, indices.reshape({-1}).to(torch::kLong)).reshape(shape);
}

UsageTracker::UsageTracker(std::int64_t entry_count) : counts_(static_cast<std::size_t>(entry_count), 0) {}

void UsageTracker::record(const torch::Tensor& indices) {
    const auto flat = indices.reshape({-1}).to(torch::kLong).contiguous();
    const auto* p = flat.data_ptr<std::int64_t>();
    const auto k = static_cast<std::int64_t>(counts_.size());
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
        if (p[i] < 0 || p[i] >= k) {
            throw ValidationError("codebook index out of range");
        }
        ++counts_[static_cast<std::size_t>(p[i])];
    }
    ++batches_;
}

Utilization UsageTracker::summary() const {
    if (batches_ == 0) {
        throw ValidationError("utilization: no batches recorded");
    }
    Utilization u;
    u.counts = counts_;
    for (const auto c : counts_) {
        u.total += c;
    }
    u.perplexity = perplexity(counts_);
    return u;
}

double perplexity(const std::vector<std::int64_t>& counts) {
    double total = 0.0;
    for (const auto c : counts) {
        total += static_cast<double>(c);
    }
    if (total <= 0.0) {
        throw ValidationError("perplexity of an empty histogram");
    }
    double entropy = 0.0;
    for (const auto c : counts) {
        if (c > 0) {
            const double p = static_cast<double>(c) / total;
            entropy -= p * std::log(p);
        }
    }
    return std::exp(entropy);
}

}  // namespace msgnet::quantizer
