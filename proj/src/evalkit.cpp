#include "msgnet/evalkit.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <set>

#include "msgnet/errors.hpp"
#include "msgnet/sampler.hpp"
#include "msgnet/tensors.hpp"

namespace msgnet::evalkit {

namespace nn = torch::nn;

namespace {

constexpr std::int64_t kPredictBatch = 256;

nn::Sequential double_conv(std::int64_t in, std::int64_t out) {
    return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)), nn::ReLU(),
                          nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)), nn::ReLU());
}

void require_layouts(const shapeworld::Dataset& ds, const char* what) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.layouts[i].empty()) {
            throw ValidationError(std::string(what) + ": item " + std::to_string(i) + " has no layout");
        }
    }
}

std::set<std::uint8_t> label_set(const shapeworld::Dataset& ds) {
    std::set<std::uint8_t> labels;
    for (const auto& l : ds.layouts) {
        labels.insert(l.labels.begin(), l.labels.end());
    }
    return labels;
}

RegimeSummary summarize(const std::vector<ProtocolRow>& rows, Regime regime) {
    std::vector<double> values;
    for (const auto& r : rows) {
        if (r.regime == regime) {
            values.push_back(r.f1);
        }
    }
    if (values.empty()) {
        const auto nan = std::numeric_limits<double>::quiet_NaN();
        return {nan, nan};
    }
    double mean = 0.0;
    for (const auto v : values) {
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (const auto v : values) {
        ss += (v - mean) * (v - mean);
    }
    const auto sd = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
    return {mean, sd};
}

std::vector<double> class_histogram(const std::vector<shapeworld::LayoutMap>& layouts) {
    std::vector<double> h(shapeworld::kLayoutClasses + 1, 0.0);
    for (const auto& l : layouts) {
        for (const auto v : l.labels) {
            h[std::min<std::size_t>(v, shapeworld::kLayoutClasses)] += 1.0;
        }
    }
    return h;
}

std::vector<double> count_histogram(const std::vector<shapeworld::LayoutMap>& layouts, std::size_t bins) {
    std::vector<double> h(bins, 0.0);
    for (const auto& l : layouts) {
        h[std::min(shapeworld::connected_components(l).size(), bins - 1)] += 1.0;
    }
    return h;
}

}  // namespace

SegmenterImpl::SegmenterImpl(std::int64_t base_channels, std::int64_t classes)
    : base_channels_(base_channels), classes_(classes) {
    const auto c = base_channels;
    enc1_ = register_module("enc1", double_conv(3, c));
    enc2_ = register_module("enc2", double_conv(c, 2 * c));
    bottom_ = register_module("bottom", double_conv(2 * c, 4 * c));
    up2_ = register_module("up2", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(4 * c, 2 * c, 2).stride(2)));
    dec2_ = register_module("dec2", double_conv(4 * c, 2 * c));
    up1_ = register_module("up1", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * c, c, 2).stride(2)));
    dec1_ = register_module("dec1", double_conv(2 * c, c));
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(c, classes, 1)));
}

torch::Tensor SegmenterImpl::forward(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) % 4 != 0 || images.size(3) % 4 != 0) {
        throw ShapeError("segmenter expects [N, 3, S, S] images with S divisible by 4");
    }
    const auto e1 = enc1_->forward(images);
    const auto e2 = enc2_->forward(torch::max_pool2d(e1, 2));
    const auto b = bottom_->forward(torch::max_pool2d(e2, 2));
    const auto d2 = dec2_->forward(torch::cat({up2_->forward(b), e2}, 1));
    const auto d1 = dec1_->forward(torch::cat({up1_->forward(d2), e1}, 1));
    return head_->forward(d1);
}

torch::Tensor SegmenterImpl::predict(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    return forward(images).argmax(1);
}

Segmenter train_segmenter(const shapeworld::Dataset& train, const SegmenterConfig& config, std::uint64_t seed) {
    if (train.size() == 0) {
        throw ValidationError("train_segmenter: empty training set");
    }
    require_layouts(train, "train_segmenter");
    config.validate();
    const auto images = tensors::from_images(train.images);
    const auto labels = tensors::from_layouts(train.layouts);

    torch::manual_seed(shapeworld::mix_seed(seed, 51));
    Segmenter model(config.base_channels, shapeworld::kLayoutClasses);
    torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(config.learning_rate));
    std::mt19937_64 rng(shapeworld::mix_seed(seed, 52));
    std::uniform_int_distribution<std::int64_t> pick(0, images.size(0) - 1);
    model->train();
    for (std::int64_t it = 0; it < config.iterations; ++it) {
        auto idx = torch::empty({config.batch_size}, torch::kLong);
        for (std::int64_t i = 0; i < config.batch_size; ++i) {
            idx[i] = pick(rng);
        }
        optimizer.zero_grad();
        const auto loss =
            torch::nn::functional::cross_entropy(model->forward(images.index_select(0, idx)), labels.index_select(0, idx));
        loss.backward();
        optimizer.step();
    }
    model->eval();
    return model;
}

trainer::Checkpoint segmenter_checkpoint(Segmenter& model, const ModelConfig& config, std::uint64_t seed) {
    trainer::Checkpoint c;
    c.phase = trainer::Phase::segmenter;
    // The stored config describes the network actually saved.
    auto stored = config;
    stored.segmenter.base_channels = model->base_channels();
    c.iteration = stored.segmenter.iterations;
    c.config_text = stored.to_text();
    c.rng_state = std::to_string(seed);
    trainer::store_module(c, *model, "model/");
    return c;
}

Segmenter load_segmenter(const trainer::Checkpoint& checkpoint) {
    if (checkpoint.phase != trainer::Phase::segmenter) {
        throw PrerequisiteError("expected a segmenter checkpoint, got '" + trainer::to_string(checkpoint.phase) + "'");
    }
    Segmenter model(checkpoint.config().segmenter.base_channels, shapeworld::kLayoutClasses);
    trainer::restore_module(checkpoint, *model, "model/");
    model->eval();
    return model;
}

torch::Tensor predict(Segmenter& model, const shapeworld::Dataset& dataset) {
    std::vector<torch::Tensor> parts;
    for (std::size_t start = 0; start < dataset.size(); start += kPredictBatch) {
        const auto stop = std::min(dataset.size(), start + static_cast<std::size_t>(kPredictBatch));
        const std::vector<shapeworld::Image> images(dataset.images.begin() + static_cast<std::ptrdiff_t>(start),
                                                    dataset.images.begin() + static_cast<std::ptrdiff_t>(stop));
        parts.push_back(model->predict(tensors::from_images(images)));
    }
    if (parts.empty()) {
        return torch::empty({0, 0, 0}, torch::kLong);
    }
    return torch::cat(parts);
}

torch::Tensor confusion_matrix(const torch::Tensor& prediction, const torch::Tensor& truth, std::int64_t classes) {
    if (!prediction.sizes().equals(truth.sizes())) {
        throw ShapeError("confusion_matrix: prediction and truth differ in shape");
    }
    const auto p = prediction.flatten().to(torch::kLong);
    const auto t = truth.flatten().to(torch::kLong);
    if (p.numel() > 0 && (p.min().item<std::int64_t>() < 0 || p.max().item<std::int64_t>() >= classes ||
                          t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() >= classes)) {
        throw ValidationError("confusion_matrix: label out of range");
    }
    return torch::bincount(t * classes + p, {}, classes * classes).reshape({classes, classes});
}

double macro_f1(const torch::Tensor& prediction, const torch::Tensor& truth, std::int64_t classes) {
    const auto cm = confusion_matrix(prediction, truth, classes).to(torch::kDouble);
    const auto tp = cm.diagonal();
    const auto fp = cm.sum(0) - tp;
    const auto fn = cm.sum(1) - tp;
    double sum = 0.0;
    std::int64_t counted = 0;
    for (std::int64_t c = 1; c < classes; ++c) {
        const auto denominator = 2.0 * tp[c].item<double>() + fp[c].item<double>() + fn[c].item<double>();
        if (denominator == 0.0) {
            continue;
        }
        sum += 2.0 * tp[c].item<double>() / denominator;
        ++counted;
    }
    return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

double pixel_accuracy(const torch::Tensor& prediction, const torch::Tensor& truth) {
    if (!prediction.sizes().equals(truth.sizes())) {
        throw ShapeError("pixel_accuracy: prediction and truth differ in shape");
    }
    if (truth.numel() == 0) {
        throw ValidationError("pixel_accuracy: no pixels");
    }
    return prediction.eq(truth).to(torch::kDouble).mean().item<double>();
}

std::string to_string(Regime regime) {
    switch (regime) {
        case Regime::baseline:
            return "baseline";
        case Regime::augmented:
            return "augmented";
        case Regime::generated_only:
            return "generated_only";
    }
    return "?";
}

ProtocolResult f1_protocol(const shapeworld::Dataset& real_train, const shapeworld::Dataset& generated,
                           const shapeworld::Dataset& real_val, const SegmenterConfig& config,
                           const std::vector<std::uint64_t>& seeds) {
    if (real_val.size() == 0) {
        throw ValidationError("f1_protocol: empty validation set");
    }
    if (seeds.empty()) {
        throw ValidationError("f1_protocol: no seeds");
    }
    require_layouts(real_train, "f1_protocol (real)");
    require_layouts(generated, "f1_protocol (generated)");
    require_layouts(real_val, "f1_protocol (validation)");
    const auto real_labels = label_set(real_train);
    for (const auto l : label_set(generated)) {
        if (l != 0 && real_labels.count(l) == 0) {
            throw ValidationError("f1_protocol: generated layouts use class " + std::to_string(l) +
                                  " which the real training set does not have");
        }
    }

    auto augmented = real_train;
    augmented.append(generated);
    const auto truth = tensors::from_layouts(real_val.layouts);

    ProtocolResult result;
    const auto run = [&](Regime regime, const shapeworld::Dataset& data, std::uint64_t seed) {
        auto model = train_segmenter(data, config, seed);
        result.rows.push_back({regime, seed, macro_f1(predict(model, real_val), truth)});
    };
    for (const auto seed : seeds) {
        run(Regime::baseline, real_train, seed);
        run(Regime::augmented, augmented, seed);
        if (generated.size() > 0) {
            run(Regime::generated_only, generated, seed);
        }
    }
    result.baseline = summarize(result.rows, Regime::baseline);
    result.augmented = summarize(result.rows, Regime::augmented);
    result.generated_only = summarize(result.rows, Regime::generated_only);
    return result;
}

double violation_rate(const std::vector<shapeworld::LayoutMap>& layouts, std::int64_t corner_margin) {
    if (layouts.empty()) {
        throw ValidationError("violation_rate: no layouts");
    }
    std::size_t failures = 0;
    for (const auto& l : layouts) {
        failures += sampler::check_constraint(l, corner_margin).pass ? 0 : 1;
    }
    return static_cast<double>(failures) / static_cast<double>(layouts.size());
}

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) {
        throw ShapeError("js_divergence: histograms differ in length");
    }
    double sp = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) {
            throw ValidationError("js_divergence: negative histogram entry");
        }
        sp += p[i];
        sq += q[i];
    }
    if (sp <= 0.0 || sq <= 0.0) {
        throw ValidationError("js_divergence: empty histogram");
    }
    double js = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto a = p[i] / sp;
        const auto b = q[i] / sq;
        const auto m = 0.5 * (a + b);
        if (a > 0.0) {
            js += 0.5 * a * std::log(a / m);
        }
        if (b > 0.0) {
            js += 0.5 * b * std::log(b / m);
        }
    }
    return std::max(js, 0.0);
}

LayoutDivergence layout_divergence(const std::vector<shapeworld::LayoutMap>& generated,
                                   const std::vector<shapeworld::LayoutMap>& real) {
    if (generated.empty() || real.empty()) {
        throw ValidationError("layout_divergence: both sets must be nonempty");
    }
    std::size_t bins = 2;
    for (const auto* set : {&generated, &real}) {
        for (const auto& l : *set) {
            bins = std::max(bins, shapeworld::connected_components(l).size() + 1);
        }
    }
    LayoutDivergence d;
    d.class_frequency = js_divergence(class_histogram(generated), class_histogram(real));
    d.object_count = js_divergence(count_histogram(generated, bins), count_histogram(real, bins));
    return d;
}

double reconstruction_mse(backbone::DoublePathVqVae& model, const shapeworld::Dataset& dataset) {
    if (dataset.size() == 0) {
        throw ValidationError("reconstruction_mse: empty dataset");
    }
    torch::NoGradGuard no_grad;
    const bool was_training = model->is_training();
    model->eval();
    double sum = 0.0;
    std::int64_t count = 0;
    for (std::size_t start = 0; start < dataset.size(); start += kPredictBatch) {
        const auto stop = std::min(dataset.size(), start + static_cast<std::size_t>(kPredictBatch));
        const std::vector<shapeworld::Image> images(dataset.images.begin() + static_cast<std::ptrdiff_t>(start),
                                                    dataset.images.begin() + static_cast<std::ptrdiff_t>(stop));
        const auto x = tensors::from_images(images);
        const auto [a, p] = model->encode_indices(x);
        sum += (model->decode_indices(a, p) - x).square().sum().item<double>();
        count += x.numel();
    }
    model->train(was_training);
    return sum / static_cast<double>(count);
}

void write_report(std::ostream& out, const Report& report) {
    const auto& s = report.segmenter;
    out << std::fixed << std::setprecision(4);
    out << "segmenter: unet levels=2 base_channels=" << s.base_channels << " iterations=" << s.iterations
        << " batch=" << s.batch_size << " lr=" << s.learning_rate << '\n';
    for (const auto& r : report.protocol.rows) {
        out << "f1 " << to_string(r.regime) << " seed=" << r.seed << " " << r.f1 << '\n';
    }
    const auto line = [&](const char* name, const RegimeSummary& m) {
        if (!std::isnan(m.mean)) {
            out << "f1_" << name << " mean=" << m.mean << " sd=" << m.stddev << '\n';
        }
    };
    line("baseline", report.protocol.baseline);
    line("augmented", report.protocol.augmented);
    line("generated_only", report.protocol.generated_only);
    if (report.violation_rate >= 0.0) {
        out << "violation_rate " << report.violation_rate << '\n';
    }
    if (report.has_divergence) {
        out << "layout_divergence class_frequency=" << report.divergence.class_frequency
            << " object_count=" << report.divergence.object_count << '\n';
    }
}

void write_csv(std::ostream& out, const Report& report) {
    out << "regime,seed,f1,violation_rate,class_divergence,count_divergence\n";
    out << std::setprecision(6);
    const auto extras = [&] {
        std::ostringstream s;
        s << std::setprecision(6);
        if (report.violation_rate >= 0.0) {
            s << report.violation_rate;
        }
        s << ',';
        if (report.has_divergence) {
            s << report.divergence.class_frequency << ',' << report.divergence.object_count;
        } else {
            s << ',';
        }
        return s.str();
    }();
    for (const auto& r : report.protocol.rows) {
        out << to_string(r.regime) << ',' << r.seed << ',' << r.f1 << ',' << extras << '\n';
    }
    if (report.protocol.rows.empty()) {
        out << "none,,," << extras << '\n';
    }
}

}  // namespace msgnet::evalkit
