#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "msgnet/backbone.hpp"
#include "msgnet/checkpoint.hpp"
#include "msgnet/config.hpp"
#include "msgnet/shapeworld.hpp"

namespace msgnet::evalkit {

/// Two-level U-Net: double 3x3 conv blocks, max-pool down, transposed-conv
/// up, skip connections by concatenation.
class SegmenterImpl : public torch::nn::Module {
public:
    SegmenterImpl(std::int64_t base_channels, std::int64_t classes);

    /// Images [N, 3, S, S] in [-1, 1] to logits [N, classes, S, S]; S must
    /// be divisible by 4.
    torch::Tensor forward(const torch::Tensor& images);
    /// Argmax labels [N, S, S].
    torch::Tensor predict(const torch::Tensor& images);

    std::int64_t base_channels() const { return base_channels_; }
    std::int64_t classes() const { return classes_; }

private:
    std::int64_t base_channels_;
    std::int64_t classes_;
    torch::nn::Sequential enc1_{nullptr};
    torch::nn::Sequential enc2_{nullptr};
    torch::nn::Sequential bottom_{nullptr};
    torch::nn::ConvTranspose2d up2_{nullptr};
    torch::nn::Sequential dec2_{nullptr};
    torch::nn::ConvTranspose2d up1_{nullptr};
    torch::nn::Sequential dec1_{nullptr};
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(Segmenter);

/// Per-pixel cross-entropy with Adam for a fixed number of iterations on
/// batches drawn with replacement. Deterministic per seed. Throws
/// ValidationError on an empty set or an item without a layout.
Segmenter train_segmenter(const shapeworld::Dataset& train, const SegmenterConfig& config, std::uint64_t seed);

trainer::Checkpoint segmenter_checkpoint(Segmenter& model, const ModelConfig& config, std::uint64_t seed);
Segmenter load_segmenter(const trainer::Checkpoint& checkpoint);

/// Predictions for every dataset item, [N, S, S].
torch::Tensor predict(Segmenter& model, const shapeworld::Dataset& dataset);

/// classes x classes counts, rows indexed by truth, columns by prediction.
torch::Tensor confusion_matrix(const torch::Tensor& prediction, const torch::Tensor& truth, std::int64_t classes);

/// Mean F1 over object classes (background excluded). A class that occurs
/// neither in the truth nor in the prediction is left out of the mean; the
/// result is 0 when no object class occurs at all.
double macro_f1(const torch::Tensor& prediction, const torch::Tensor& truth,
                std::int64_t classes = shapeworld::kLayoutClasses);

double pixel_accuracy(const torch::Tensor& prediction, const torch::Tensor& truth);

enum class Regime { baseline, augmented, generated_only };
std::string to_string(Regime regime);

struct ProtocolRow {
    Regime regime = Regime::baseline;
    std::uint64_t seed = 0;
    double f1 = 0.0;
};

struct RegimeSummary {
    double mean = 0.0;
    double stddev = 0.0;
};

struct ProtocolResult {
    std::vector<ProtocolRow> rows;
    RegimeSummary baseline;
    RegimeSummary augmented;
    // NaN when no generated data was supplied.
    RegimeSummary generated_only;
};

/// Trains one segmenter per (regime, seed): real_train only, real_train plus
/// generated, generated only; each is scored on real_val. Every regime uses
/// the same seeds. Throws ValidationError when the generated layouts use
/// classes outside the real label set or when real_val is empty.
ProtocolResult f1_protocol(const shapeworld::Dataset& real_train, const shapeworld::Dataset& generated,
                           const shapeworld::Dataset& real_val, const SegmenterConfig& config,
                           const std::vector<std::uint64_t>& seeds);

/// Fraction of layouts failing the constraint-mode check. Throws
/// ValidationError on an empty list.
double violation_rate(const std::vector<shapeworld::LayoutMap>& layouts, std::int64_t corner_margin = 4);

/// Jensen-Shannon divergence (natural log, so at most ln 2) of two
/// histograms; each is normalized first.
double js_divergence(const std::vector<double>& p, const std::vector<double>& q);

struct LayoutDivergence {
    double class_frequency = 0.0;
    double object_count = 0.0;
};

/// Compares per-pixel class frequencies and per-layout object-count
/// histograms (objects are connected components). Throws ValidationError
/// when either set is empty.
LayoutDivergence layout_divergence(const std::vector<shapeworld::LayoutMap>& generated,
                                   const std::vector<shapeworld::LayoutMap>& real);

/// Per-pixel MSE (images in [-1, 1]) of decode(encode(x)) over the dataset.
double reconstruction_mse(backbone::DoublePathVqVae& model, const shapeworld::Dataset& dataset);

struct Report {
    ProtocolResult protocol;
    double violation_rate = -1.0;  // negative: not measured
    LayoutDivergence divergence;
    bool has_divergence = false;
    SegmenterConfig segmenter;
};

void write_report(std::ostream& out, const Report& report);
/// Columns: regime, seed, f1, violation_rate, class_divergence, count_divergence.
void write_csv(std::ostream& out, const Report& report);

}  // namespace msgnet::evalkit
