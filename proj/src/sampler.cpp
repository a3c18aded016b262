#include "msgnet/sampler.hpp"

#include <algorithm>

#include "msgnet/errors.hpp"
#include "msgnet/tensors.hpp"
#include "msgnet/trainer.hpp"

namespace msgnet::sampler {

namespace {

constexpr std::int64_t kChunk = 128;
constexpr std::uint64_t kLayoutStream = 1;
constexpr std::uint64_t kLatentStream = 2;

using shapeworld::LayoutMap;

void require_phase(const trainer::Checkpoint& c, trainer::Phase phase) {
    if (c.phase != phase) {
        throw PrerequisiteError("expected a " + trainer::to_string(phase) + " checkpoint, got '" +
                                trainer::to_string(c.phase) + "'");
    }
}

// Latent-resolution condition for one provided layout.
LayoutMap to_latent(const LayoutMap& layout, const BackboneConfig& backbone) {
    const auto latent = backbone.latent_size();
    if (layout.empty()) {
        throw ValidationError("layout_given: empty layout");
    }
    for (const auto v : layout.labels) {
        if (v >= shapeworld::kLayoutClasses) {
            throw ValidationError("layout_given: label " + std::to_string(v) + " is not a layout class");
        }
    }
    if (layout.height == latent && layout.width == latent) {
        return layout;
    }
    if (layout.height == backbone.image_size && layout.width == backbone.image_size) {
        return shapeworld::downsample_layout(layout, backbone.downsample_factor);
    }
    throw ValidationError("layout_given: layout is " + std::to_string(layout.height) + "x" +
                          std::to_string(layout.width) + ", expected image or latent resolution");
}

}  // namespace

std::string to_string(Mode mode) {
    switch (mode) {
        case Mode::full:
            return "full";
        case Mode::layout_given:
            return "layout_given";
        case Mode::unconditional:
            return "unconditional";
    }
    return "?";
}

Mode parse_mode(const std::string& text) {
    for (auto m : {Mode::full, Mode::layout_given, Mode::unconditional}) {
        if (to_string(m) == text) {
            return m;
        }
    }
    throw ValidationError("unknown sampling mode '" + text + "' (full, layout_given, unconditional)");
}

Pipeline Pipeline::load(const trainer::Checkpoint& vqvae, const trainer::Checkpoint& latent_prior,
                        const std::optional<trainer::Checkpoint>& layout_prior) {
    require_phase(vqvae, trainer::Phase::vqvae);
    require_phase(latent_prior, trainer::Phase::latent_prior);
    Pipeline p;
    p.config = vqvae.config();
    if (latent_prior.parent_hash != p.config.code_space_hash()) {
        throw ValidationError("latent prior was trained on codes of a different VQ-VAE configuration");
    }
    p.vqvae = trainer::load_vqvae(vqvae);
    p.latent_prior = trainer::load_prior(latent_prior);
    const auto& lp = p.latent_prior->config();
    if (lp.vocab_size != p.config.quantizer.codebook_num || lp.grid_height != 2 * p.config.backbone.latent_size() ||
        lp.grid_width != p.config.backbone.latent_size()) {
        throw ValidationError("latent prior grid or vocabulary does not match the VQ-VAE");
    }
    if (layout_prior) {
        require_phase(*layout_prior, trainer::Phase::layout_prior);
        if (layout_prior->parent_hash != p.config.layout_space_hash()) {
            throw ValidationError("layout prior was trained for a different layout grid");
        }
        p.layout_prior = trainer::load_prior(*layout_prior);
    }
    return p;
}

std::pair<torch::Tensor, torch::Tensor> split_code(const torch::Tensor& grid) {
    if (grid.dim() < 2) {
        throw ShapeError("split_code expects a [.., 2H, W] grid");
    }
    const auto axis = grid.dim() - 2;
    const auto h = grid.size(axis);
    if (h % 2 != 0) {
        throw ShapeError("split_code: height " + std::to_string(h) + " is odd");
    }
    return {grid.narrow(axis, 0, h / 2), grid.narrow(axis, h / 2, h / 2)};
}

std::vector<Generation> generate(Pipeline& pipeline, const Request& request) {
    if (request.count < 0) {
        throw ValidationError("generate: negative count");
    }
    if (!pipeline.vqvae || !pipeline.latent_prior) {
        throw PrerequisiteError("generate: pipeline is missing the VQ-VAE or the latent prior");
    }
    const auto& backbone = pipeline.config.backbone;
    const auto latent = backbone.latent_size();

    std::vector<LayoutMap> given;
    if (request.mode == Mode::full && !pipeline.layout_prior) {
        throw PrerequisiteError("full mode needs a layout prior checkpoint");
    }
    if (request.mode == Mode::layout_given) {
        if (request.layouts.empty() ||
            (request.layouts.size() != 1 && static_cast<std::int64_t>(request.layouts.size()) != request.count)) {
            throw ValidationError("layout_given needs one layout or one per sample");
        }
        for (const auto& l : request.layouts) {
            given.push_back(to_latent(l, backbone));
        }
    }

    torch::NoGradGuard no_grad;
    pipeline.vqvae->eval();
    std::vector<Generation> out;
    out.reserve(static_cast<std::size_t>(request.count));
    for (std::int64_t start = 0, chunk = 0; start < request.count; start += kChunk, ++chunk) {
        const auto n = std::min(kChunk, request.count - start);
        const auto chunk_seed = shapeworld::mix_seed(request.seed, static_cast<std::uint64_t>(chunk));

        torch::Tensor condition;
        switch (request.mode) {
            case Mode::full:
                condition = priors::sample(pipeline.layout_prior, n, {}, request.temperature,
                                           shapeworld::mix_seed(chunk_seed, kLayoutStream));
                break;
            case Mode::layout_given: {
                std::vector<LayoutMap> maps;
                for (std::int64_t i = 0; i < n; ++i) {
                    maps.push_back(given.size() == 1 ? given.front() : given[static_cast<std::size_t>(start + i)]);
                }
                condition = tensors::from_layouts(maps);
                break;
            }
            case Mode::unconditional:
                condition = torch::full({n, latent, latent}, pipeline.latent_prior->config().null_condition(),
                                        torch::kLong);
                break;
        }

        const auto codes = priors::sample(pipeline.latent_prior, n, condition, request.temperature,
                                          shapeworld::mix_seed(chunk_seed, kLatentStream));
        const auto [attention, plain] = split_code(codes);
        const auto images = pipeline.vqvae->decode_indices(attention, plain);
        for (std::int64_t i = 0; i < n; ++i) {
            Generation g;
            g.image = tensors::to_image(images[i]);
            if (request.mode != Mode::unconditional) {
                g.layout = shapeworld::upsample_layout(tensors::to_layout(condition[i]), backbone.downsample_factor);
            }
            g.codes = codes[i].clone();
            out.push_back(std::move(g));
        }
    }
    return out;
}

ConstraintCheck check_constraint(const LayoutMap& layout, std::int64_t corner_margin) {
    ConstraintCheck result;
    if (layout.empty()) {
        result.pass = false;
        result.reasons.emplace_back("no layout");
        return result;
    }
    if (layout.at(layout.height / 2, layout.width / 2) == 0) {
        result.pass = false;
        result.reasons.emplace_back("no object at the center");
    }
    const auto m_rows = std::min(corner_margin, layout.height);
    const auto m_cols = std::min(corner_margin, layout.width);
    const std::pair<std::int64_t, std::int64_t> corners[] = {
        {0, 0}, {0, layout.width - m_cols}, {layout.height - m_rows, 0}, {layout.height - m_rows, layout.width - m_cols}};
    const char* names[] = {"top-left", "top-right", "bottom-left", "bottom-right"};
    for (std::size_t k = 0; k < 4; ++k) {
        const auto [r0, c0] = corners[k];
        bool hit = false;
        for (std::int64_t r = r0; r < r0 + m_rows && !hit; ++r) {
            for (std::int64_t c = c0; c < c0 + m_cols && !hit; ++c) {
                hit = layout.at(r, c) != 0;
            }
        }
        if (hit) {
            result.pass = false;
            result.reasons.push_back(std::string("object in the ") + names[k] + " corner");
        }
    }
    return result;
}

shapeworld::Dataset to_dataset(const std::vector<Generation>& generations) {
    shapeworld::Dataset ds;
    for (const auto& g : generations) {
        ds.image_size = g.image.height;
        ds.images.push_back(g.image);
        ds.layouts.push_back(g.layout);
        ds.splits.push_back(shapeworld::Split::train);
    }
    return ds;
}

}  // namespace msgnet::sampler
