#include "msgnet/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "msgnet/errors.hpp"
#include "msgnet/shapeworld.hpp"

namespace msgnet {

namespace {

struct Field {
    std::string key;
    std::function<void(ModelConfig&, std::string_view)> set;
    std::function<std::string(const ModelConfig&)> get;
};

std::string_view trim(std::string_view s) {
    const auto* ws = " \t\r\n";
    const auto first = s.find_first_not_of(ws);
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(ws);
    return s.substr(first, last - first + 1);
}

std::int64_t parse_int(std::string_view key, std::string_view v) {
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError("key '" + std::string(key) + "': expected an integer, got '" + std::string(v) + "'");
    }
    return out;
}

double parse_double(std::string_view key, std::string_view v) {
    // std::from_chars for double is incomplete in older libstdc++; strtod is enough here.
    const std::string s(v);
    char* end = nullptr;
    const double out = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(out)) {
        throw ConfigError("key '" + std::string(key) + "': expected a number, got '" + s + "'");
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw ConfigError("key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

template <typename Member>
Field int_field(std::string key, Member member) {
    return {key,
            [member, key](ModelConfig& c, std::string_view v) { std::invoke(member, c) = parse_int(key, v); },
            [member](const ModelConfig& c) { return std::to_string(std::invoke(member, c)); }};
}

template <typename Member>
Field double_field(std::string key, Member member) {
    return {key,
            [member, key](ModelConfig& c, std::string_view v) { std::invoke(member, c) = parse_double(key, v); },
            [member](const ModelConfig& c) { return format_double(std::invoke(member, c)); }};
}

template <typename Member>
Field bool_field(std::string key, Member member) {
    return {key,
            [member, key](ModelConfig& c, std::string_view v) { std::invoke(member, c) = parse_bool(key, v); },
            [member](const ModelConfig& c) { return std::string(std::invoke(member, c) ? "true" : "false"); }};
}

template <typename Member>
Field schedule_field(std::string key, Member member) {
    return {key,
            [member](ModelConfig& c, std::string_view v) { std::invoke(member, c) = parse_schedule(v); },
            [member](const ModelConfig& c) { return to_string(std::invoke(member, c)); }};
}

// Accessors are written as lambdas because the members are nested.
#define MSGNET_REF(path) [](auto& c) -> auto& { return c.path; }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        // VQ-VAE, mirrors the rows of the backbone hyperparameter table.
        int_field("image_size", MSGNET_REF(backbone.image_size)),
        int_field("channels", MSGNET_REF(backbone.channels)),
        int_field("batch_size", MSGNET_REF(vqvae_optimizer.batch_size)),
        int_field("hidden_dim", MSGNET_REF(backbone.hidden_dim)),
        int_field("residual_dim", MSGNET_REF(backbone.residual_dim)),
        int_field("residual_blocks", MSGNET_REF(backbone.residual_blocks)),
        int_field("codebook_size", MSGNET_REF(quantizer.codebook_size)),
        int_field("codebook_num", MSGNET_REF(quantizer.codebook_num)),
        int_field("downsample_factor", MSGNET_REF(backbone.downsample_factor)),
        int_field("attention_heads", MSGNET_REF(backbone.attention_heads)),
        int_field("attention_dim", MSGNET_REF(backbone.attention_dim)),
        double_field("commitment", MSGNET_REF(quantizer.commitment)),
        int_field("code_reset_interval", MSGNET_REF(quantizer.code_reset_interval)),
        double_field("learning_rate", MSGNET_REF(vqvae_optimizer.learning_rate)),
        schedule_field("scheduler", MSGNET_REF(vqvae_optimizer.schedule)),
        int_field("cycle_period", MSGNET_REF(vqvae_optimizer.cycle_period)),
        int_field("iterations", MSGNET_REF(vqvae_optimizer.iterations)),
        // Latent prior.
        int_field("prior_batch_size", MSGNET_REF(latent_optimizer.batch_size)),
        int_field("prior_hidden_dim", MSGNET_REF(latent_prior.hidden_dim)),
        int_field("prior_residual_dim", MSGNET_REF(latent_prior.residual_dim)),
        int_field("prior_residual_blocks", MSGNET_REF(latent_prior.residual_blocks)),
        int_field("prior_output_residual_blocks", MSGNET_REF(latent_prior.output_residual_blocks)),
        int_field("prior_conditional_residual_blocks", MSGNET_REF(latent_prior.conditional_residual_blocks)),
        int_field("prior_conditional_residual_dim", MSGNET_REF(latent_prior.conditional_residual_dim)),
        int_field("prior_condition_layout_dim", MSGNET_REF(latent_prior.condition_embedding_dim)),
        int_field("prior_token_embedding_dim", MSGNET_REF(latent_prior.token_embedding_dim)),
        int_field("prior_attention_dim", MSGNET_REF(latent_prior.attention_dim)),
        int_field("prior_attention_heads", MSGNET_REF(latent_prior.attention_heads)),
        double_field("prior_dropout", MSGNET_REF(latent_prior.dropout)),
        double_field("prior_learning_rate", MSGNET_REF(latent_optimizer.learning_rate)),
        schedule_field("prior_scheduler", MSGNET_REF(latent_optimizer.schedule)),
        int_field("prior_cycle_period", MSGNET_REF(latent_optimizer.cycle_period)),
        int_field("prior_iterations", MSGNET_REF(latent_optimizer.iterations)),
        double_field("prior_null_condition_rate", MSGNET_REF(null_condition_rate)),
        // Layout prior.
        int_field("layout_batch_size", MSGNET_REF(layout_optimizer.batch_size)),
        int_field("layout_hidden_dim", MSGNET_REF(layout_prior.hidden_dim)),
        int_field("layout_residual_dim", MSGNET_REF(layout_prior.residual_dim)),
        int_field("layout_residual_blocks", MSGNET_REF(layout_prior.residual_blocks)),
        int_field("layout_output_residual_blocks", MSGNET_REF(layout_prior.output_residual_blocks)),
        int_field("layout_embedding_dim", MSGNET_REF(layout_prior.token_embedding_dim)),
        int_field("layout_attention_dim", MSGNET_REF(layout_prior.attention_dim)),
        int_field("layout_attention_heads", MSGNET_REF(layout_prior.attention_heads)),
        double_field("layout_dropout", MSGNET_REF(layout_prior.dropout)),
        double_field("layout_learning_rate", MSGNET_REF(layout_optimizer.learning_rate)),
        schedule_field("layout_scheduler", MSGNET_REF(layout_optimizer.schedule)),
        int_field("layout_cycle_period", MSGNET_REF(layout_optimizer.cycle_period)),
        int_field("layout_iterations", MSGNET_REF(layout_optimizer.iterations)),
        // Dataset.
        int_field("dataset_size", MSGNET_REF(data.dataset_size)),
        int_field("min_objects", MSGNET_REF(data.min_objects)),
        int_field("max_objects", MSGNET_REF(data.max_objects)),
        int_field("min_object_size", MSGNET_REF(data.min_object_size)),
        int_field("max_object_size", MSGNET_REF(data.max_object_size)),
        int_field("corner_margin", MSGNET_REF(data.corner_margin)),
        bool_field("constraint_mode", MSGNET_REF(data.constraint_mode)),
        bool_field("box_annotation", MSGNET_REF(data.box_annotation)),
        double_field("val_fraction", MSGNET_REF(data.val_fraction)),
        // Segmenter.
        int_field("seg_base_channels", MSGNET_REF(segmenter.base_channels)),
        int_field("seg_iterations", MSGNET_REF(segmenter.iterations)),
        int_field("seg_batch_size", MSGNET_REF(segmenter.batch_size)),
        double_field("seg_learning_rate", MSGNET_REF(segmenter.learning_rate)),
        {"seed",
         [](ModelConfig& c, std::string_view v) {
             const auto s = parse_int("seed", v);
             if (s < 0) {
                 throw ConfigError("key 'seed': must be non-negative");
             }
             c.seed = static_cast<std::uint64_t>(s);
         },
         [](const ModelConfig& c) { return std::to_string(c.seed); }},
    };
    return table;
}

#undef MSGNET_REF

const std::vector<std::string>& code_space_keys() {
    static const std::vector<std::string> k = {"image_size",      "channels",     "hidden_dim",        "residual_dim",
                                               "residual_blocks", "codebook_size", "codebook_num",      "downsample_factor",
                                               "attention_heads", "attention_dim"};
    return k;
}

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw ConfigError(what);
    }
}

}  // namespace

std::string to_string(Schedule schedule) {
    switch (schedule) {
        case Schedule::constant:
            return "constant";
        case Schedule::linear:
            return "linear";
        case Schedule::cyclical:
            return "cyclical";
    }
    return "?";
}

Schedule parse_schedule(std::string_view text) {
    if (text == "constant") {
        return Schedule::constant;
    }
    if (text == "linear") {
        return Schedule::linear;
    }
    if (text == "cyclical") {
        return Schedule::cyclical;
    }
    throw ConfigError("unknown scheduler '" + std::string(text) + "' (expected constant, linear or cyclical)");
}

double OptimizerConfig::rate_at(std::int64_t step) const {
    switch (schedule) {
        case Schedule::constant:
            return learning_rate;
        case Schedule::linear: {
            // Linear decay from learning_rate towards zero at `iterations`.
            const double frac = static_cast<double>(step) / static_cast<double>(std::max<std::int64_t>(iterations, 1));
            return learning_rate * std::max(0.0, 1.0 - frac);
        }
        case Schedule::cyclical: {
            // Triangular wave between learning_rate/10 and learning_rate,
            // starting at the low end.
            const double low = learning_rate / 10.0;
            const double half = static_cast<double>(cycle_period) / 2.0;
            const double pos = std::fmod(static_cast<double>(step), static_cast<double>(cycle_period));
            const double ramp = pos < half ? pos / half : 2.0 - pos / half;
            return low + (learning_rate - low) * ramp;
        }
    }
    return learning_rate;
}

void BackboneConfig::validate() const {
    require(image_size > 0 && channels > 0, "image_size and channels must be positive");
    require(hidden_dim >= 2 && residual_dim > 0 && residual_blocks >= 0, "invalid hidden/residual dims");
    require(downsample_factor >= 2 && (downsample_factor & (downsample_factor - 1)) == 0,
            "downsample_factor must be a power of two >= 2");
    require(image_size % downsample_factor == 0, "image_size must be divisible by downsample_factor");
    require(attention_heads >= 1 && attention_dim >= attention_heads && attention_dim % attention_heads == 0,
            "attention_dim must be a positive multiple of attention_heads");
}

void QuantizerConfig::validate() const {
    require(codebook_num >= 2, "codebook_num must be >= 2");
    require(codebook_size >= 1, "codebook_size must be >= 1");
    require(commitment >= 0.0, "commitment must be non-negative");
    require(code_reset_interval >= 0, "code_reset_interval must be >= 0");
}

void OptimizerConfig::validate() const {
    require(learning_rate > 0.0, "learning rate must be positive");
    require(batch_size >= 1, "batch size must be >= 1");
    require(iterations >= 0, "iterations must be >= 0");
    require(cycle_period >= 2, "cycle period must be >= 2");
}

void PriorConfig::validate() const {
    require(vocab_size >= 2, "prior vocab_size must be >= 2");
    require(grid_height > 0 && grid_width > 0, "prior grid dims must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "prior dropout must be in [0, 1)");
    require(hidden_dim >= 1 && residual_dim >= 1 && residual_blocks >= 1, "prior needs at least one residual block");
    require(output_residual_blocks >= 0 && conditional_residual_blocks >= 0, "negative block count");
    require(attention_heads >= 1 && attention_dim >= attention_heads && attention_dim % attention_heads == 0,
            "prior attention_dim must be a positive multiple of attention_heads");
    require(token_embedding_dim >= 0, "token embedding dim must be >= 0");
    if (conditional()) {
        require(condition_classes >= 2, "condition_classes must be >= 2");
        require(condition_embedding_dim >= 1 && conditional_residual_dim >= 1, "invalid condition dims");
        require(condition_height > 0 && condition_width == grid_width && grid_height % condition_height == 0,
                "condition map must tile the token grid along its height");
    }
}

void DataConfig::validate(std::int64_t image_size) const {
    require(dataset_size >= 1, "dataset_size must be >= 1");
    require(min_objects >= 1 && max_objects >= min_objects, "invalid object count range");
    require(min_object_size >= 3 && max_object_size >= min_object_size, "invalid object size range");
    require(max_object_size <= image_size, "object size exceeds the image");
    require(corner_margin >= 0 && 2 * corner_margin < image_size, "invalid corner margin");
    require(val_fraction >= 0.0 && val_fraction < 1.0, "val_fraction must be in [0, 1)");
}

void SegmenterConfig::validate() const {
    require(base_channels >= 1 && iterations >= 0 && batch_size >= 1 && learning_rate > 0.0,
            "invalid segmenter settings");
}

ModelConfig ModelConfig::desk_default() {
    ModelConfig c;
    c.vqvae_optimizer = OptimizerConfig{1e-3, Schedule::linear, 32, 1500, 2000};
    c.quantizer.code_reset_interval = 100;

    c.latent_prior.hidden_dim = 96;
    c.latent_prior.residual_dim = 96;
    c.latent_prior.residual_blocks = 2;
    c.latent_prior.conditional_residual_blocks = 2;
    c.latent_prior.conditional_residual_dim = 64;
    c.latent_prior.condition_embedding_dim = 64;
    c.latent_prior.attention_dim = 64;
    c.latent_prior.attention_heads = 8;
    c.latent_prior.dropout = 0.1;
    c.latent_optimizer = OptimizerConfig{1e-3, Schedule::cyclical, 32, 2000, 2000};

    c.layout_prior.hidden_dim = 64;
    c.layout_prior.residual_dim = 64;
    c.layout_prior.residual_blocks = 2;
    c.layout_prior.conditional_residual_blocks = 0;
    c.layout_prior.token_embedding_dim = 64;
    c.layout_prior.attention_dim = 32;
    c.layout_prior.attention_heads = 8;
    c.layout_prior.dropout = 0.15;
    c.layout_optimizer = OptimizerConfig{1e-3, Schedule::cyclical, 64, 2000, 2000};

    c.derive();
    return c;
}

void ModelConfig::derive() {
    const auto latent = backbone.latent_size();

    latent_prior.grid_height = 2 * latent;
    latent_prior.grid_width = latent;
    latent_prior.vocab_size = quantizer.codebook_num;
    latent_prior.condition_classes = shapeworld::kLayoutClasses;
    latent_prior.condition_height = latent;
    latent_prior.condition_width = latent;

    layout_prior.grid_height = latent;
    layout_prior.grid_width = latent;
    layout_prior.vocab_size = shapeworld::kLayoutClasses;
    layout_prior.condition_classes = 0;
}

void ModelConfig::validate() const {
    backbone.validate();
    quantizer.validate();
    vqvae_optimizer.validate();
    latent_prior.validate();
    latent_optimizer.validate();
    layout_prior.validate();
    layout_optimizer.validate();
    data.validate(backbone.image_size);
    segmenter.validate();
    require(null_condition_rate >= 0.0 && null_condition_rate < 1.0, "prior_null_condition_rate must be in [0, 1)");
    require(backbone.latent_size() * 2 == latent_prior.grid_height, "latent prior grid does not match the backbone");
    require(latent_prior.vocab_size == quantizer.codebook_num, "latent prior vocab does not match codebook_num");
    require(backbone.channels == 3, "the synthetic dataset is RGB; channels must be 3");
}

ModelConfig ModelConfig::parse(std::string_view text) {
    auto config = desk_default();
    std::map<std::string, const Field*, std::less<>> by_key;
    for (const auto& f : fields()) {
        by_key.emplace(f.key, &f);
    }

    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto eol = text.find('\n');
        auto line = text.substr(0, eol);
        text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
        ++line_no;

        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        const auto it = by_key.find(key);
        if (it == by_key.end()) {
            throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
        }
        it->second->set(config, value);
    }
    config.derive();
    config.validate();
    return config;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string ModelConfig::to_text() const {
    std::string out;
    for (const auto& f : fields()) {
        out += f.key;
        out += '=';
        out += f.get(*this);
        out += '\n';
    }
    return out;
}

void ModelConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write config file " + path.string());
    }
    out << to_text();
}

std::vector<std::string> ModelConfig::keys() {
    std::vector<std::string> out;
    for (const auto& f : fields()) {
        out.push_back(f.key);
    }
    return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t ModelConfig::code_space_hash() const {
    std::string text;
    for (const auto& f : fields()) {
        for (const auto& k : code_space_keys()) {
            if (f.key == k) {
                text += f.key + '=' + f.get(*this) + '\n';
            }
        }
    }
    return fnv1a64(text);
}

std::uint64_t ModelConfig::layout_space_hash() const {
    const std::string text = "classes=" + std::to_string(shapeworld::kLayoutClasses) +
                             "\nlatent=" + std::to_string(backbone.latent_size()) + '\n';
    return fnv1a64(text);
}

}  // namespace msgnet
