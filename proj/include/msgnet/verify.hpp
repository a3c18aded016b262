#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgnet/config.hpp"

namespace msgnet::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

struct SuiteOptions {
    std::uint64_t seed = 0;
    std::int64_t quantizer_trials = 1000;
    std::int64_t causality_trials = 1000;
    std::int64_t roundtrip_trials = 50;
};

/// Exact structural checks: quantizer against brute force, straight-through
/// gradient identity, prior causality under perturbation, softmax
/// normalization, and concat/split, checkpoint, dataset and config
/// roundtrips.
std::vector<CheckResult> run_property_suite(const SuiteOptions& options);

bool all_passed(const std::vector<CheckResult>& results);

struct GradientSample {
    std::string parameter;
    std::int64_t element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error = 0.0;
};

struct GradientCheck {
    std::vector<GradientSample> samples;
    double max_relative_error = 0.0;
    double tolerance = 1e-3;
    bool pass = false;
};

struct GradientOptions {
    std::uint64_t seed = 0;
    std::int64_t elements_per_tensor = 2;
    double step = 1e-6;
    double tolerance = 1e-3;
    // Gradients smaller than this in magnitude on both sides are compared
    // absolutely against tolerance * floor. A central difference with step
    // 1e-6 on an O(1) loss carries roundoff near 1e-10, so smaller
    // gradients cannot be resolved to 1e-3 relative.
    double floor = 1e-6;
};

/// Analytic against central-difference gradients in double precision on a
/// miniature backbone and both miniature priors.
GradientCheck gradient_check(const GradientOptions& options);

/// Configurations used by the checks, exposed for tests.
BackboneConfig miniature_backbone();
QuantizerConfig miniature_quantizer();
PriorConfig miniature_latent_prior();
PriorConfig miniature_layout_prior();

}  // namespace msgnet::verify
