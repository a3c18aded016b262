#include "cli.hpp"

#include <CLI11.hpp>
#include <torch/torch.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>

#include "msgnet/checkpoint.hpp"
#include "msgnet/config.hpp"
#include "msgnet/errors.hpp"
#include "msgnet/evalkit.hpp"
#include "msgnet/sampler.hpp"
#include "msgnet/shapeworld.hpp"
#include "msgnet/tensors.hpp"
#include "msgnet/trainer.hpp"
#include "msgnet/verify.hpp"

namespace msgnet::cli {

namespace {

namespace fs = std::filesystem;
using trainer::Checkpoint;
using trainer::Phase;

struct State {
    // Shared by every command.
    std::string config;
    std::uint64_t seed = 0;
    std::string out;
    int threads = 1;
    CLI::Option* seed_option = nullptr;

    // Inputs.
    std::string data;
    std::string vqvae;
    std::string codes;
    std::string prior;
    std::string layout_prior;
    std::string resume;
    std::string real;
    std::string generated;
    std::string layouts;

    std::int64_t n = -1;
    bool constraint = false;
    bool boxes = false;
    std::int64_t max_steps = -1;
    std::int64_t log_every = 100;
    std::string mode = "full";
    double temperature = 1.0;
    std::int64_t seeds = 3;
    std::int64_t train_size = -1;
    std::int64_t trials = 1000;
    bool gradients = false;
};

ModelConfig load_config(const State& s) {
    std::string source = s.config;
    if (source.empty()) {
        const char* env = std::getenv(kConfigEnv);
        source = env != nullptr && *env != '\0' ? env : "default";
    }
    auto config = source == "default" ? ModelConfig::desk_default() : ModelConfig::load(source);
    if (s.seed_option != nullptr && s.seed_option->count() > 0) {
        config.seed = s.seed;
    }
    return config;
}

std::uint64_t effective_seed(const State& s, const ModelConfig& config) {
    return s.seed_option != nullptr && s.seed_option->count() > 0 ? s.seed : config.seed;
}

void require_path(const std::string& value, const char* flag) {
    if (value.empty()) {
        throw PrerequisiteError(std::string(flag) + " is required");
    }
    if (!fs::exists(value)) {
        throw PrerequisiteError(std::string(flag) + " " + value + " does not exist");
    }
}

void require_out(const std::string& value) {
    if (value.empty()) {
        throw ConfigError("--out is required");
    }
}

trainer::StepCallback progress(std::ostream& out, std::int64_t every, bool vq) {
    return [&out, every, vq](const trainer::StepRecord& r) {
        if (every <= 0 || r.iteration % every != 0) {
            return;
        }
        out << "iteration " << r.iteration << " lr " << std::setprecision(4) << r.learning_rate << " loss "
            << std::setprecision(5) << r.total;
        if (vq) {
            out << " reconstruction " << r.reconstruction << " codebook " << r.codebook << " commitment "
                << r.commitment;
        }
        out << std::endl;
    };
}

shapeworld::Dataset train_split(const shapeworld::Dataset& ds) { return ds.subset(ds.indices(shapeworld::Split::train)); }

// Copies the VQ-VAE sections into `config` so prior grids follow the codes.
ModelConfig adopt_backbone(ModelConfig config, const ModelConfig& vq) {
    config.backbone = vq.backbone;
    config.quantizer = vq.quantizer;
    config.derive();
    config.validate();
    return config;
}

void cmd_gen_data(const State& s, std::ostream& out) {
    require_out(s.out);
    auto config = load_config(s);
    config.data.constraint_mode = config.data.constraint_mode || s.constraint;
    config.data.box_annotation = config.data.box_annotation || s.boxes;
    config.validate();
    const auto n = s.n > 0 ? s.n : config.data.dataset_size;
    const auto ds = shapeworld::generate_dataset(config.data, config.backbone.image_size, config.seed, n);
    shapeworld::save_dataset(ds, s.out);
    config.save(fs::path(s.out) / "config.txt");
    out << "wrote " << ds.size() << " scenes to " << s.out << '\n';
}

void cmd_train_vqvae(const State& s, std::ostream& out) {
    require_path(s.data, "--data");
    require_out(s.out);
    const auto ds = train_split(shapeworld::load_dataset(s.data));
    const auto images = tensors::from_images(ds.images);
    if (!s.resume.empty()) {
        require_path(s.resume, "--resume");
    }
    auto t = s.resume.empty() ? trainer::VqVaeTrainer(load_config(s)) : trainer::VqVaeTrainer(Checkpoint::load(s.resume));
    if (images.size(2) != t.config().backbone.image_size) {
        throw ConfigError("dataset images do not match image_size in the config");
    }
    t.run(images, s.max_steps, progress(out, s.log_every, true));
    t.checkpoint().save(s.out);
    out << "saved vqvae checkpoint at iteration " << t.iteration() << " to " << s.out << '\n';
}

trainer::CodeCorpus codes_from_vqvae(const Checkpoint& vq, const std::string& data) {
    require_path(data, "--data");
    return trainer::extract_codes(vq, train_split(shapeworld::load_dataset(data)));
}

void cmd_extract_codes(const State& s, std::ostream& out) {
    require_path(s.vqvae, "--vqvae");
    require_out(s.out);
    const auto vq = Checkpoint::load(s.vqvae);
    const auto corpus = codes_from_vqvae(vq, s.data);
    corpus.to_checkpoint(vq.config(), vq.parent_hash).save(s.out);
    out << "extracted " << corpus.size() << " code grids to " << s.out << '\n';
}

void cmd_train_prior(const State& s, std::ostream& out) {
    require_path(s.vqvae, "--vqvae");
    require_out(s.out);
    const auto vq = Checkpoint::load(s.vqvae);
    if (vq.phase != Phase::vqvae) {
        throw PrerequisiteError("--vqvae does not name a vqvae checkpoint");
    }
    trainer::CodeCorpus corpus;
    if (!s.codes.empty()) {
        require_path(s.codes, "--codes");
        const auto c = Checkpoint::load(s.codes);
        if (c.parent_hash != vq.parent_hash) {
            throw PrerequisiteError("codes were extracted with a different VQ-VAE configuration");
        }
        corpus = trainer::CodeCorpus::from_checkpoint(c);
    } else {
        corpus = codes_from_vqvae(vq, s.data);
    }
    std::unique_ptr<trainer::PriorTrainer> t;
    if (s.resume.empty()) {
        t = std::make_unique<trainer::PriorTrainer>(adopt_backbone(load_config(s), vq.config()), Phase::latent_prior,
                                                    vq.parent_hash);
    } else {
        require_path(s.resume, "--resume");
        const auto ck = Checkpoint::load(s.resume);
        if (ck.parent_hash != vq.parent_hash) {
            throw PrerequisiteError("--resume checkpoint belongs to a different VQ-VAE configuration");
        }
        t = std::make_unique<trainer::PriorTrainer>(ck);
    }
    t->run(corpus.tokens, corpus.layouts, s.max_steps, progress(out, s.log_every, false));
    t->checkpoint().save(s.out);
    out << "saved latent prior checkpoint at iteration " << t->iteration() << " to " << s.out << '\n';
}

void cmd_train_layout_prior(const State& s, std::ostream& out) {
    require_path(s.data, "--data");
    require_out(s.out);
    const auto ds = train_split(shapeworld::load_dataset(s.data));
    std::unique_ptr<trainer::PriorTrainer> t;
    ModelConfig config;
    if (s.resume.empty()) {
        config = load_config(s);
        t = std::make_unique<trainer::PriorTrainer>(config, Phase::layout_prior, config.layout_space_hash());
    } else {
        require_path(s.resume, "--resume");
        const auto ck = Checkpoint::load(s.resume);
        config = ck.config();
        t = std::make_unique<trainer::PriorTrainer>(ck);
    }
    std::vector<shapeworld::LayoutMap> small;
    for (const auto& l : ds.layouts) {
        if (l.empty()) {
            throw ValidationError("train-layout-prior: dataset contains items without layouts");
        }
        small.push_back(shapeworld::downsample_layout(l, config.backbone.downsample_factor));
    }
    t->run(tensors::from_layouts(small), {}, s.max_steps, progress(out, s.log_every, false));
    t->checkpoint().save(s.out);
    out << "saved layout prior checkpoint at iteration " << t->iteration() << " to " << s.out << '\n';
}

void cmd_sample(const State& s, std::ostream& out) {
    require_path(s.vqvae, "--vqvae");
    require_path(s.prior, "--prior");
    require_out(s.out);
    sampler::Request request;
    request.mode = sampler::parse_mode(s.mode);
    request.count = s.n > 0 ? s.n : 16;
    request.temperature = s.temperature;
    std::optional<Checkpoint> layout_ck;
    if (request.mode == sampler::Mode::full) {
        require_path(s.layout_prior, "--layout-prior");
        layout_ck = Checkpoint::load(s.layout_prior);
    }
    auto pipeline = sampler::Pipeline::load(Checkpoint::load(s.vqvae), Checkpoint::load(s.prior), layout_ck);
    request.seed = effective_seed(s, pipeline.config);
    if (request.mode == sampler::Mode::layout_given) {
        require_path(s.layouts, "--layouts");
        const auto src = shapeworld::load_dataset(s.layouts);
        if (src.size() == 1) {
            request.layouts = src.layouts;
        } else if (static_cast<std::int64_t>(src.size()) >= request.count) {
            request.layouts.assign(src.layouts.begin(), src.layouts.begin() + request.count);
        } else {
            throw ValidationError("--layouts holds " + std::to_string(src.size()) + " layouts, need 1 or at least " +
                                  std::to_string(request.count));
        }
    }
    const auto generations = sampler::generate(pipeline, request);
    shapeworld::save_dataset(sampler::to_dataset(generations), s.out);
    out << "wrote " << generations.size() << " " << s.mode << " samples to " << s.out << '\n';
}

void cmd_eval(const State& s, std::ostream& out) {
    require_path(s.real, "--real");
    const auto config = load_config(s);
    const auto real = shapeworld::load_dataset(s.real);
    auto real_train = train_split(real);
    if (s.train_size > 0 && static_cast<std::int64_t>(real_train.size()) > s.train_size) {
        std::vector<std::size_t> keep(static_cast<std::size_t>(s.train_size));
        std::iota(keep.begin(), keep.end(), std::size_t{0});
        real_train = real_train.subset(keep);
    }
    const auto real_val = real.subset(real.indices(shapeworld::Split::val));
    shapeworld::Dataset generated;
    if (!s.generated.empty()) {
        require_path(s.generated, "--generated");
        generated = shapeworld::load_dataset(s.generated);
    }

    evalkit::Report report;
    report.segmenter = config.segmenter;
    std::vector<std::uint64_t> seeds;
    for (std::int64_t i = 0; i < s.seeds; ++i) {
        seeds.push_back(effective_seed(s, config) + static_cast<std::uint64_t>(i));
    }
    report.protocol = evalkit::f1_protocol(real_train, generated, real_val, config.segmenter, seeds);
    if (generated.size() > 0) {
        if (s.constraint) {
            report.violation_rate = evalkit::violation_rate(generated.layouts, config.data.corner_margin);
        }
        report.divergence = evalkit::layout_divergence(generated.layouts, real_train.layouts);
        report.has_divergence = true;
    }
    evalkit::write_report(out, report);
    if (!s.vqvae.empty()) {
        require_path(s.vqvae, "--vqvae");
        auto model = trainer::load_vqvae(Checkpoint::load(s.vqvae));
        out << "reconstruction_mse " << evalkit::reconstruction_mse(model, real_val) << '\n';
    }
    if (!s.out.empty()) {
        fs::create_directories(s.out);
        std::ofstream txt(fs::path(s.out) / "report.txt");
        evalkit::write_report(txt, report);
        std::ofstream csv(fs::path(s.out) / "results.csv");
        evalkit::write_csv(csv, report);
        if (!txt || !csv) {
            throw IoError("cannot write report files under " + s.out);
        }
    }
}

bool cmd_verify(const State& s, std::ostream& out) {
    const auto config = load_config(s);
    verify::SuiteOptions options;
    options.seed = effective_seed(s, config);
    options.quantizer_trials = s.trials;
    options.causality_trials = s.trials;
    std::ostringstream log;
    bool ok = true;
    for (const auto& r : verify::run_property_suite(options)) {
        log << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " (" << std::fixed << std::setprecision(2)
            << r.seconds << " s)\n";
        ok = ok && r.pass;
    }
    if (s.gradients) {
        verify::GradientOptions g;
        g.seed = options.seed;
        const auto result = verify::gradient_check(g);
        log << (result.pass ? "PASS " : "FAIL ") << "gradient_check: " << result.samples.size()
            << " samples, max relative error " << std::scientific << std::setprecision(3) << result.max_relative_error
            << '\n';
        ok = ok && result.pass;
    }
    out << log.str();
    if (!s.out.empty()) {
        std::ofstream f(s.out);
        f << log.str();
    }
    return ok;
}

void add_common(CLI::App* sub, State& s, const char* out_help) {
    sub->add_option("--config", s.config,
                    std::string("config file, or 'default' for the built-in desk configuration (falls back to $") +
                        kConfigEnv + ")");
    s.seed_option = nullptr;
    sub->add_option("--seed", s.seed, "random seed (overrides the config seed)");
    sub->add_option("--out", s.out, out_help);
    sub->add_option("--threads", s.threads, "number of CPU threads for tensor math")->check(CLI::PositiveNumber);
}

void add_training(CLI::App* sub, State& s) {
    sub->add_option("--resume", s.resume, "continue from this checkpoint");
    sub->add_option("--max-steps", s.max_steps, "stop after this many steps in this run (default: until done)");
    sub->add_option("--log-every", s.log_every, "print progress every N iterations (0: quiet)");
}

std::unique_ptr<CLI::App> build(State& s) {
    auto app = std::make_unique<CLI::App>("Double-codebook VQ-VAE with autoregressive layout and latent priors");
    app->name("msgnet");
    app->require_subcommand(1);

    auto* gen = app->add_subcommand("gen-data", "generate a synthetic ShapeWorld dataset");
    add_common(gen, s, "dataset directory to write");
    gen->add_option("--n", s.n, "number of scenes (default: dataset_size from the config)");
    gen->add_flag("--constraint", s.constraint, "one centered object and empty corners");
    gen->add_flag("--boxes", s.boxes, "annotate bounding boxes instead of object masks");

    auto* vq = app->add_subcommand("train-vqvae", "train the double-path VQ-VAE");
    add_common(vq, s, "checkpoint file to write");
    vq->add_option("--data", s.data, "dataset directory (train split is used)");
    add_training(vq, s);

    auto* ex = app->add_subcommand("extract-codes", "encode a dataset into concatenated code grids");
    add_common(ex, s, "code corpus file to write");
    ex->add_option("--vqvae", s.vqvae, "VQ-VAE checkpoint");
    ex->add_option("--data", s.data, "dataset directory (train split is used)");

    auto* pr = app->add_subcommand("train-prior", "train the layout-conditioned latent prior");
    add_common(pr, s, "checkpoint file to write");
    pr->add_option("--vqvae", s.vqvae, "VQ-VAE checkpoint the codes come from");
    pr->add_option("--codes", s.codes, "code corpus from extract-codes (otherwise --data is encoded)");
    pr->add_option("--data", s.data, "dataset directory, used when --codes is absent");
    add_training(pr, s);

    auto* lp = app->add_subcommand("train-layout-prior", "train the prior over latent-resolution layouts");
    add_common(lp, s, "checkpoint file to write");
    lp->add_option("--data", s.data, "dataset directory (train split is used)");
    add_training(lp, s);

    auto* sa = app->add_subcommand("sample", "generate images with annotations");
    add_common(sa, s, "output dataset directory");
    sa->add_option("--vqvae", s.vqvae, "VQ-VAE checkpoint");
    sa->add_option("--prior", s.prior, "latent prior checkpoint");
    sa->add_option("--layout-prior", s.layout_prior, "layout prior checkpoint (full mode)");
    sa->add_option("--mode", s.mode, "full, layout_given or unconditional")
        ->check(CLI::IsMember({"full", "layout_given", "unconditional"}));
    sa->add_option("--n", s.n, "number of samples (default 16)");
    sa->add_option("--temperature", s.temperature, "softmax temperature")->check(CLI::PositiveNumber);
    sa->add_option("--layouts", s.layouts, "dataset directory whose layouts drive layout_given mode");

    auto* ev = app->add_subcommand("eval", "segmentation F1 protocol, violation rate and layout divergence");
    add_common(ev, s, "directory for report.txt and results.csv");
    ev->add_option("--real", s.real, "real dataset directory with train and val splits");
    ev->add_option("--generated", s.generated, "generated dataset directory");
    ev->add_option("--seeds", s.seeds, "number of segmenter seeds per regime")->check(CLI::PositiveNumber);
    ev->add_option("--train-size", s.train_size, "use only the first N real training scenes");
    ev->add_option("--vqvae", s.vqvae, "also report reconstruction MSE of this VQ-VAE on the val split");
    ev->add_flag("--constraint", s.constraint, "report the constraint violation rate of the generated layouts");

    auto* ve = app->add_subcommand("verify", "run the property suite");
    add_common(ve, s, "also write the results to this file");
    ve->add_option("--trials", s.trials, "random instances for the quantizer and causality checks")
        ->check(CLI::PositiveNumber);
    ve->add_flag("--gradients", s.gradients, "also compare analytic and finite-difference gradients");
    return app;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    State s;
    auto app = build(s);
    try {
        app->parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        const auto* sub = app->get_subcommands().empty() ? app.get() : app->get_subcommands().front();
        out << sub->help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "msgnet: " << e.what() << '\n';
        return kExitConfig;
    }
    auto* sub = app->get_subcommands().front();
    s.seed_option = sub->get_option("--seed");
    torch::set_num_threads(s.threads);
    const auto name = sub->get_name();
    try {
        if (name == "gen-data") {
            cmd_gen_data(s, out);
        } else if (name == "train-vqvae") {
            cmd_train_vqvae(s, out);
        } else if (name == "extract-codes") {
            cmd_extract_codes(s, out);
        } else if (name == "train-prior") {
            cmd_train_prior(s, out);
        } else if (name == "train-layout-prior") {
            cmd_train_layout_prior(s, out);
        } else if (name == "sample") {
            cmd_sample(s, out);
        } else if (name == "eval") {
            cmd_eval(s, out);
        } else if (name == "verify") {
            if (!cmd_verify(s, out)) {
                err << "msgnet: verify: at least one check failed\n";
                return kExitRuntime;
            }
        }
    } catch (const ConfigError& e) {
        err << "msgnet: config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const PrerequisiteError& e) {
        err << "msgnet: missing prerequisite: " << e.what() << '\n';
        return kExitPrerequisite;
    } catch (const std::exception& e) {
        err << "msgnet: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

std::vector<CommandInfo> commands() {
    State s;
    auto app = build(s);
    std::vector<CommandInfo> result;
    for (const auto* sub : app->get_subcommands({})) {
        CommandInfo info{sub->get_name(), {}};
        for (const auto* opt : sub->get_options()) {
            for (const auto& l : opt->get_lnames()) {
                if (l != "help") {
                    info.flags.push_back("--" + l);
                }
            }
        }
        result.push_back(std::move(info));
    }
    return result;
}

std::string help_text(const std::string& command) {
    State s;
    auto app = build(s);
    if (command.empty()) {
        return app->help();
    }
    return app->get_subcommand(command)->help();
}

}  // namespace msgnet::cli
