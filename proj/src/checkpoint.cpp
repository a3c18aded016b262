#include "msgnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "msgnet/errors.hpp"

namespace msgnet::trainer {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'G', 'F'};

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
        }
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
        }
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void bytes(const void* data, std::size_t n) { out_.append(static_cast<const char*>(data), n); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_ += s;
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& in) : in_(in) {}

    const char* take(std::size_t n) {
        if (pos_ + n > in_.size()) {
            throw IoError("checkpoint truncated");
        }
        const char* p = in_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint32_t u32() {
        const auto* p = reinterpret_cast<const unsigned char*>(take(4));
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64() {
        const auto* p = reinterpret_cast<const unsigned char*>(take(8));
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        }
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    std::string str() {
        const auto n = u32();
        return {take(n), n};
    }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::string& in_;
    std::size_t pos_ = 0;
};

std::string adam_key(const char* field, const std::string& name) { return std::string("optim/") + field + "/" + name; }

}  // namespace

std::string to_string(Phase phase) {
    switch (phase) {
        case Phase::vqvae:
            return "vqvae";
        case Phase::latent_prior:
            return "latent_prior";
        case Phase::layout_prior:
            return "layout_prior";
        case Phase::codes:
            return "codes";
        case Phase::segmenter:
            return "segmenter";
    }
    return "?";
}

Phase parse_phase(const std::string& text) {
    for (auto p : {Phase::vqvae, Phase::latent_prior, Phase::layout_prior, Phase::codes, Phase::segmenter}) {
        if (to_string(p) == text) {
            return p;
        }
    }
    throw IoError("unknown checkpoint phase '" + text + "'");
}

const torch::Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw ValidationError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& entry : tensors) {
        if (entry.first == name) {
            return true;
        }
    }
    return false;
}

std::string Checkpoint::serialize() const {
    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.str(to_string(phase));
    w.i64(iteration);
    w.u64(parent_hash);
    w.str(config_text);
    w.str(rng_state);
    w.u32(static_cast<std::uint32_t>(torch_rng_state.size()));
    w.bytes(torch_rng_state.data(), torch_rng_state.size());
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.str(name);
        const auto data = t.detach().to(torch::kCPU).to(torch::kFloat32).contiguous();
        w.u32(static_cast<std::uint32_t>(data.dim()));
        for (const auto d : data.sizes()) {
            w.i64(d);
        }
        const auto* f = data.data_ptr<float>();
        for (std::int64_t i = 0; i < data.numel(); ++i) {
            w.u32(std::bit_cast<std::uint32_t>(f[i]));
        }
    }
    return w.take();
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
    Reader r(bytes);
    if (std::memcmp(r.take(4), kMagic, 4) != 0) {
        throw IoError("not a checkpoint (bad magic)");
    }
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    c.phase = parse_phase(r.str());
    c.iteration = r.i64();
    c.parent_hash = r.u64();
    c.config_text = r.str();
    c.rng_state = r.str();
    const auto rng_len = r.u32();
    const auto* rng = reinterpret_cast<const std::uint8_t*>(r.take(rng_len));
    c.torch_rng_state.assign(rng, rng + rng_len);
    const auto count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
        auto name = r.str();
        const auto ndim = r.u32();
        std::vector<std::int64_t> shape(ndim);
        for (auto& d : shape) {
            d = r.i64();
            if (d < 0) {
                throw IoError("negative tensor dimension in checkpoint");
            }
        }
        auto t = torch::empty(shape, torch::kFloat32);
        auto* f = t.data_ptr<float>();
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            f[i] = std::bit_cast<float>(r.u32());
        }
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done()) {
        throw IoError("trailing bytes after checkpoint payload");
    }
    return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    const auto bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("cannot write checkpoint " + path.string());
    }
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw PrerequisiteError("missing checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

void store_module(Checkpoint& checkpoint, const torch::nn::Module& module, const std::string& prefix) {
    for (const auto& item : module.named_parameters(true)) {
        checkpoint.tensors.emplace_back(prefix + item.key(), item.value().detach().clone());
    }
    for (const auto& item : module.named_buffers(true)) {
        checkpoint.tensors.emplace_back(prefix + item.key(), item.value().detach().clone());
    }
}

void restore_module(const Checkpoint& checkpoint, torch::nn::Module& module, const std::string& prefix) {
    torch::NoGradGuard no_grad;
    const auto assign = [&](const std::string& key, torch::Tensor target) {
        const auto& src = checkpoint.tensor(prefix + key);
        if (!src.sizes().equals(target.sizes())) {
            throw ShapeError("checkpoint tensor '" + prefix + key + "' has a different shape than the model");
        }
        target.copy_(src);
    };
    for (auto& item : module.named_parameters(true)) {
        assign(item.key(), item.value());
    }
    for (auto& item : module.named_buffers(true)) {
        assign(item.key(), item.value());
    }
}

void store_adam(Checkpoint& checkpoint, torch::optim::Adam& optimizer, const torch::nn::Module& module) {
    auto& state = optimizer.state();
    for (const auto& item : module.named_parameters(true)) {
        const auto it = state.find(item.value().unsafeGetTensorImpl());
        if (it == state.end()) {
            continue;
        }
        const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
        checkpoint.tensors.emplace_back(adam_key("step", item.key()),
                                        torch::full({1}, static_cast<double>(s.step()), torch::kFloat32));
        checkpoint.tensors.emplace_back(adam_key("exp_avg", item.key()), s.exp_avg().detach().clone());
        checkpoint.tensors.emplace_back(adam_key("exp_avg_sq", item.key()), s.exp_avg_sq().detach().clone());
    }
}

void restore_adam(const Checkpoint& checkpoint, torch::optim::Adam& optimizer, const torch::nn::Module& module) {
    auto& state = optimizer.state();
    for (const auto& item : module.named_parameters(true)) {
        const auto step_key = adam_key("step", item.key());
        if (!checkpoint.has_tensor(step_key)) {
            continue;
        }
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(static_cast<std::int64_t>(checkpoint.tensor(step_key).item<float>()));
        s->exp_avg(checkpoint.tensor(adam_key("exp_avg", item.key())).clone().to(item.value().dtype()));
        s->exp_avg_sq(checkpoint.tensor(adam_key("exp_avg_sq", item.key())).clone().to(item.value().dtype()));
        state[item.value().unsafeGetTensorImpl()] = std::move(s);
    }
}

}  // namespace msgnet::trainer
