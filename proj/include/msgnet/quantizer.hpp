#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace msgnet::quantizer {

/// Output of one nearest-prototype assignment.
///
/// `indices` has the leading shape of the encodings; `quantized` equals
/// `entries[indices]` exactly. The losses are means over positions of the
/// squared L2 distance (summed over the vector dimension); the commitment
/// weight is applied by the caller.
struct QuantizationResult {
    torch::Tensor indices;
    torch::Tensor quantized;
    torch::Tensor codebook_loss;
    torch::Tensor commitment_loss;
};

/// Assigns every vector along the last axis of `encodings` to its L2-nearest
/// row of `entries` (K x D), ties broken towards the lowest index.
///
/// The codebook loss carries gradient only into `entries`, the commitment
/// loss only into `encodings`. Throws ShapeError when the last dimension of
/// `encodings` differs from D and ValidationError on non-finite input.
QuantizationResult quantize(const torch::Tensor& encodings, const torch::Tensor& entries);

/// Returns a tensor equal to `quantized` whose gradient is routed unchanged
/// to `encodings`; `quantized` itself receives no gradient through it.
torch::Tensor straight_through(const torch::Tensor& encodings, const torch::Tensor& quantized);

/// Codebook of K prototype vectors of dimension D, stored as a parameter.
class CodebookImpl : public torch::nn::Module {
public:
    /// Entries are drawn i.i.d. from N(0, 1/D) using `generator_seed`.
    CodebookImpl(std::int64_t entry_count, std::int64_t dim, std::uint64_t generator_seed);

    QuantizationResult forward(const torch::Tensor& encodings) { return quantize(encodings, entries); }
    /// Embeds an index grid of any shape into vectors (trailing axis D).
    torch::Tensor lookup(const torch::Tensor& indices) const;

    std::int64_t entry_count() const { return entries.size(0); }
    std::int64_t dim() const { return entries.size(1); }

    torch::Tensor entries;
};
TORCH_MODULE(Codebook);

struct Utilization {
    std::vector<std::int64_t> counts;
    std::int64_t total = 0;
    double perplexity = 0.0;
};

/// Accumulates assignment histograms across batches.
class UsageTracker {
public:
    explicit UsageTracker(std::int64_t entry_count);

    void record(const torch::Tensor& indices);
    /// Throws ValidationError when nothing was recorded.
    Utilization summary() const;

private:
    std::vector<std::int64_t> counts_;
    std::int64_t batches_ = 0;
};

/// exp(entropy) of the empirical distribution given by `counts`.
double perplexity(const std::vector<std::int64_t>& counts);

}  // namespace msgnet::quantizer
