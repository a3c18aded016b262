#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msgnet/backbone.hpp"
#include "msgnet/checkpoint.hpp"
#include "msgnet/config.hpp"
#include "msgnet/priors.hpp"
#include "msgnet/shapeworld.hpp"

namespace msgnet::sampler {

enum class Mode { full, layout_given, unconditional };

std::string to_string(Mode mode);
/// Throws ValidationError on an unknown name.
Mode parse_mode(const std::string& text);

/// Trained networks needed for generation. The layout prior is only
/// required in full mode.
struct Pipeline {
    ModelConfig config;
    backbone::DoublePathVqVae vqvae{nullptr};
    priors::PixelSnail latent_prior{nullptr};
    priors::PixelSnail layout_prior{nullptr};

    /// Throws PrerequisiteError when a checkpoint has the wrong phase and
    /// ValidationError when the priors were not trained for this VQ-VAE.
    static Pipeline load(const trainer::Checkpoint& vqvae, const trainer::Checkpoint& latent_prior,
                         const std::optional<trainer::Checkpoint>& layout_prior = std::nullopt);
};

struct Request {
    Mode mode = Mode::full;
    std::int64_t count = 1;
    std::uint64_t seed = 0;
    double temperature = 1.0;
    /// layout_given only: one layout per sample, or a single layout reused for
    /// all of them. Image or latent resolution.
    std::vector<shapeworld::LayoutMap> layouts;
};

struct Generation {
    shapeworld::Image image;
    /// Image-resolution annotation; empty in unconditional mode.
    shapeworld::LayoutMap layout;
    /// Sampled code grid [2H, W], attention path on top.
    torch::Tensor codes;
};

std::vector<Generation> generate(Pipeline& pipeline, const Request& request);

/// Undoes trainer::concat_codes: top half of the height axis to the
/// attention path, bottom half to the plain path. Accepts [2H, W] or
/// [N, 2H, W]; throws ShapeError on an odd height.
std::pair<torch::Tensor, torch::Tensor> split_code(const torch::Tensor& grid);

struct ConstraintCheck {
    bool pass = true;
    std::vector<std::string> reasons;
};

/// Constraint-mode rule: an object covers the center pixel and no object
/// pixel lies inside a `corner_margin` square at any corner.
ConstraintCheck check_constraint(const shapeworld::LayoutMap& layout, std::int64_t corner_margin = 4);

/// Packs generations into a dataset (all tagged train) for save_dataset.
shapeworld::Dataset to_dataset(const std::vector<Generation>& generations);

}  // namespace msgnet::sampler
