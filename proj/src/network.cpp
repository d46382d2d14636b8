#include "jepoo/network.hpp"

#include "jepoo/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace jepoo {

namespace {

constexpr std::array<const char*, 3> kTaskNames{"pitch", "onset", "offset"};

const char* fusion_name(FusionMode m) {
    switch (m) {
    case FusionMode::pitch_only: return "pitch_only";
    case FusionMode::none: return "none";
    case FusionMode::all_tasks: return "all_tasks";
    }
    return "?";
}

FusionMode parse_fusion(const std::string& s) {
    if (s == "pitch_only") return FusionMode::pitch_only;
    if (s == "none") return FusionMode::none;
    if (s == "all_tasks") return FusionMode::all_tasks;
    throw ConfigError("unknown fusion_mode '" + s + "'");
}

enum class Init { he, glorot, lstm, zero, identity };

struct Spec {
    std::string name;
    ad::Shape shape;
    Init init;
    double bias_fill = 0.0;
};

void add_block(std::vector<Spec>& out, const std::string& prefix, std::size_t cin,
               std::size_t cout, bool skip) {
    out.push_back({prefix + ".conv1.weight", {cout, cin, 3, 3}, Init::he});
    out.push_back({prefix + ".conv1.bias", {cout}, Init::zero});
    out.push_back({prefix + ".conv2.weight", {cout, cout, 3, 3}, Init::he});
    out.push_back({prefix + ".conv2.bias", {cout}, Init::zero});
    if (skip) {
        out.push_back({prefix + ".skip.weight", {cout, cin, 1, 1}, Init::he});
        out.push_back({prefix + ".skip.bias", {cout}, Init::zero});
    }
}

void add_lstm(std::vector<Spec>& out, const std::string& prefix, std::size_t in, std::size_t h) {
    for (const char* dir : {"fwd", "bwd"}) {
        const std::string p = prefix + "." + dir;
        out.push_back({p + ".w_input", {in, 4 * h}, Init::lstm});
        out.push_back({p + ".w_recurrent", {h, 4 * h}, Init::lstm});
        out.push_back({p + ".bias", {4 * h}, Init::lstm});
    }
}

void add_dense(std::vector<Spec>& out, const std::string& prefix, std::size_t in, std::size_t o,
               double bias_fill) {
    out.push_back({prefix + ".weight", {in, o}, Init::glorot});
    out.push_back({prefix + ".bias", {o}, Init::zero, bias_fill});
}

// Sigmoid outputs start near the sparse label prior.
constexpr double kOutputBias = -3.0;

std::vector<Spec> param_specs(const ModelConfig& cfg) {
    std::vector<Spec> specs;
    std::size_t cin = 1;
    for (int b = 0; b < cfg.shared_blocks(); ++b) {
        const auto cout = static_cast<std::size_t>(cfg.channels_of_shared_block(b));
        add_block(specs, fmt::format("shared.{}", b), cin, cout, cfg.skip_connection);
        cin = cout;
    }
    const auto sc = static_cast<std::size_t>(cfg.stack_channels);
    const auto h = static_cast<std::size_t>(cfg.bilstm_hidden);
    const auto seq_in = sc * static_cast<std::size_t>(cfg.mel_bins / 2);
    for (int s = 0; s < cfg.num_stacks(); ++s) {
        const std::string t = kTaskNames[s];
        std::size_t c = cin;
        for (int b = 0; b < cfg.stack_blocks(); ++b) {
            add_block(specs, fmt::format("{}.{}", t, b), c, sc, cfg.skip_connection);
            c = sc;
        }
        add_lstm(specs, t + ".lstm", seq_in, h);
        add_dense(specs, t + ".dense", 2 * h, kNumKeys, kOutputBias);
    }
    if (cfg.tasks == TaskSet::joint) {
        const auto fh = static_cast<std::size_t>(cfg.fusion_hidden);
        if (cfg.fusion_mode != FusionMode::none) {
            add_lstm(specs, "fusion.pitch.lstm", 3 * kNumKeys, fh);
            add_dense(specs, "fusion.pitch.dense", 2 * fh, kNumKeys, kOutputBias);
        }
        if (cfg.fusion_mode == FusionMode::all_tasks) {
            for (const char* t : {"onset", "offset"}) {
                add_lstm(specs, fmt::format("fusion.{}.lstm", t), 2 * kNumKeys, fh);
                add_dense(specs, fmt::format("fusion.{}.dense", t), 2 * fh, kNumKeys, kOutputBias);
            }
        }
        specs.push_back({"pml.weight", {3, 3}, Init::identity});
        specs.push_back({"pml.bias", {3}, Init::zero});
    }
    return specs;
}

ReconvBlock block_vars(const BoundParams& p, const std::string& prefix, bool skip) {
    ReconvBlock b;
    b.conv1_w = p[prefix + ".conv1.weight"];
    b.conv1_b = p[prefix + ".conv1.bias"];
    b.conv2_w = p[prefix + ".conv2.weight"];
    b.conv2_b = p[prefix + ".conv2.bias"];
    b.skip = skip;
    if (skip) {
        b.skip_w = p[prefix + ".skip.weight"];
        b.skip_b = p[prefix + ".skip.bias"];
    }
    return b;
}

ad::Var lstm_head(ad::Var seq, const BoundParams& p, const std::string& lstm,
                  const std::string& dense) {
    const ad::LstmWeights fwd{p[lstm + ".fwd.w_input"], p[lstm + ".fwd.w_recurrent"],
                              p[lstm + ".fwd.bias"]};
    const ad::LstmWeights bwd{p[lstm + ".bwd.w_input"], p[lstm + ".bwd.w_recurrent"],
                              p[lstm + ".bwd.bias"]};
    const ad::Var h = ad::bilstm(seq, fwd, bwd);
    return ad::sigmoid(ad::linear(h, p[dense + ".weight"], p[dense + ".bias"]));
}

} // namespace

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.shared_channels = {16, 32, 64};
    c.stack_channels = 64;
    c.bilstm_hidden = 384;
    c.fusion_hidden = 384;
    return c;
}

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.shared_channels = {16, 32, 64};
    c.stack_channels = 64;
    c.bilstm_hidden = 64;
    c.fusion_hidden = 64;
    return c;
}

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::small() {
    ModelConfig c;
    c.shared_conv_layers = 4;
    c.shared_channels = {4, 8};
    c.stack_conv_layers = 2;
    c.stack_channels = 4;
    c.bilstm_hidden = 32;
    c.fusion_hidden = 32;
    return c;
}

int ModelConfig::channels_of_shared_block(int block) const {
    if (shared_channels.empty()) throw ConfigError("shared_channels is empty");
    const auto i = std::min<std::size_t>(static_cast<std::size_t>(block), shared_channels.size() - 1);
    return shared_channels[i];
}

void ModelConfig::validate() const {
    if (mel_bins < 2) throw ConfigError("mel_bins must be >= 2");
    if (shared_conv_layers < 2 || shared_conv_layers % 2 != 0)
        throw ConfigError("shared_conv_layers must be a positive even number");
    if (stack_conv_layers < 2 || stack_conv_layers % 2 != 0)
        throw ConfigError("stack_conv_layers must be a positive even number");
    if (shared_channels.empty() ||
        std::any_of(shared_channels.begin(), shared_channels.end(), [](int c) { return c < 1; }))
        throw ConfigError("shared_channels must be positive");
    if (stack_channels < 1 || bilstm_hidden < 1 || fusion_hidden < 1)
        throw ConfigError("channel and hidden sizes must be positive");
    if (!(fusion_weight >= 0.0 && fusion_weight <= 1.0))
        throw ConfigError("fusion_weight must lie in [0, 1]");
    if (sequence_model != "bilstm")
        throw ConfigError("sequence_model '" + sequence_model + "' is not implemented");
    if (!(input_scale > 0.0)) throw ConfigError("input_scale must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"mel_bins", c.mel_bins},
            {"shared_conv_layers", c.shared_conv_layers},
            {"stack_conv_layers", c.stack_conv_layers},
            {"skip_connection", c.skip_connection},
            {"shared_channels", c.shared_channels},
            {"stack_channels", c.stack_channels},
            {"bilstm_hidden", c.bilstm_hidden},
            {"fusion_hidden", c.fusion_hidden},
            {"fusion_mode", fusion_name(c.fusion_mode)},
            {"fusion_weight", c.fusion_weight},
            {"tasks", c.tasks == TaskSet::joint ? "joint" : "pitch_only"},
            {"sequence_model", c.sequence_model},
            {"input_shift", c.input_shift},
            {"input_scale", c.input_scale}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    ModelConfig c;
    if (j.contains("preset")) {
        const auto p = j.at("preset").get<std::string>();
        if (p == "paper") c = ModelConfig::paper();
        else if (p == "toy") c = ModelConfig::toy();
        else if (p == "tiny") c = ModelConfig::tiny();
        else if (p == "small") c = ModelConfig::small();
        else throw ConfigError("unknown model preset '" + p + "'");
    }
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "preset") continue;
            else if (key == "mel_bins") c.mel_bins = v.get<int>();
            else if (key == "shared_conv_layers") c.shared_conv_layers = v.get<int>();
            else if (key == "stack_conv_layers") c.stack_conv_layers = v.get<int>();
            else if (key == "skip_connection") c.skip_connection = v.get<bool>();
            else if (key == "shared_channels") c.shared_channels = v.get<std::vector<int>>();
            else if (key == "stack_channels") c.stack_channels = v.get<int>();
            else if (key == "bilstm_hidden") c.bilstm_hidden = v.get<int>();
            else if (key == "fusion_hidden") c.fusion_hidden = v.get<int>();
            else if (key == "fusion_mode") c.fusion_mode = parse_fusion(v.get<std::string>());
            else if (key == "fusion_weight") c.fusion_weight = v.get<double>();
            else if (key == "tasks") {
                const auto t = v.get<std::string>();
                if (t == "joint") c.tasks = TaskSet::joint;
                else if (t == "pitch_only") c.tasks = TaskSet::pitch_only;
                else throw ConfigError("unknown tasks value '" + t + "'");
            } else if (key == "sequence_model") c.sequence_model = v.get<std::string>();
            else if (key == "input_shift") c.input_shift = v.get<double>();
            else if (key == "input_scale") c.input_scale = v.get<double>();
            else throw ConfigError("unknown model config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

std::size_t ModelParams::count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.tensor.size();
    return n;
}

ad::Tensor& ModelParams::at(const std::string& name) {
    for (auto& t : tensors)
        if (t.name == name) return t.tensor;
    throw ContractError("no parameter named " + name);
}

const ad::Tensor& ModelParams::at(const std::string& name) const {
    return const_cast<ModelParams*>(this)->at(name);
}

void ModelParams::zero_grad() {
    for (auto& t : tensors) t.tensor.zero_grad();
}

bool ModelParams::all_finite() const {
    for (const auto& t : tensors)
        for (double v : t.tensor.values)
            if (!std::isfinite(v)) return false;
    return true;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ModelParams params;
    for (const auto& s : param_specs(cfg)) {
        ad::Tensor t(s.shape, 0.0);
        t.requires_grad = true;
        switch (s.init) {
        case Init::he: {
            const double fan_in = static_cast<double>(s.shape[1] * s.shape[2] * s.shape[3]);
            std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
            for (double& v : t.values) v = d(rng);
            break;
        }
        case Init::glorot: {
            const double lim = std::sqrt(6.0 / static_cast<double>(s.shape[0] + s.shape[1]));
            std::uniform_real_distribution<double> d(-lim, lim);
            for (double& v : t.values) v = d(rng);
            break;
        }
        case Init::lstm: {
            const std::size_t h = s.shape.back() / 4;
            const double lim = 1.0 / std::sqrt(static_cast<double>(h));
            std::uniform_real_distribution<double> d(-lim, lim);
            for (double& v : t.values) v = d(rng);
            if (s.shape.size() == 1) // forget-gate bias starts at 1
                for (std::size_t j = h; j < 2 * h; ++j) t.values[j] = 1.0;
            break;
        }
        case Init::zero:
            std::fill(t.values.begin(), t.values.end(), s.bias_fill);
            break;
        case Init::identity:
            for (std::size_t i = 0; i < s.shape[0]; ++i) t.values[i * s.shape[1] + i] = 1.0;
            break;
        }
        params.tensors.push_back({s.name, std::move(t)});
    }
    return params;
}

BoundParams::BoundParams(ad::Graph& g, ModelParams& params, bool trainable) {
    vars_.reserve(params.tensors.size());
    for (auto& nt : params.tensors) {
        vars_.emplace_back(nt.name, trainable ? g.parameter(nt.tensor) : g.constant(nt.tensor));
    }
}

ad::Var BoundParams::operator[](const std::string& name) const {
    for (const auto& [n, v] : vars_)
        if (n == name) return v;
    throw MismatchError("parameter '" + name + "' missing from the model");
}

bool BoundParams::has(const std::string& name) const {
    return std::any_of(vars_.begin(), vars_.end(), [&](const auto& p) { return p.first == name; });
}

std::vector<ad::Var> BoundParams::with_prefix(const std::string& prefix) const {
    std::vector<ad::Var> out;
    for (const auto& [n, v] : vars_)
        if (n.rfind(prefix, 0) == 0) out.push_back(v);
    return out;
}

ad::Var reconv_forward(ad::Var x, const ReconvBlock& b) {
    const ad::Var h = ad::relu(ad::conv2d(x, b.conv1_w, b.conv1_b));
    ad::Var base = ad::conv2d(h, b.conv2_w, b.conv2_b);
    if (b.skip) base = ad::add(base, ad::conv2d(x, b.skip_w, b.skip_b));
    return ad::relu(base);
}

NetworkOutputs jepoo_forward(ad::Var input, const BoundParams& p, const ModelConfig& cfg) {
    const auto& s = input.shape();
    if (s.size() != 4 || s[1] != 1 || s[3] != static_cast<std::size_t>(cfg.mel_bins))
        throw ShapeError(fmt::format("network expects [N, 1, T, {}] input, got {}", cfg.mel_bins,
                                     ad::shape_str(s)));

    ad::Graph& g = input.graph();
    ad::Tensor shift(s, cfg.input_shift);
    ad::Var x = ad::scale(ad::add(input, g.constant(std::move(shift))), cfg.input_scale);
    for (int b = 0; b < cfg.shared_blocks(); ++b)
        x = reconv_forward(x, block_vars(p, fmt::format("shared.{}", b), cfg.skip_connection));

    std::array<ad::Var, 3> stacks;
    for (int t = 0; t < cfg.num_stacks(); ++t) {
        const std::string name = kTaskNames[t];
        ad::Var h = x;
        for (int b = 0; b < cfg.stack_blocks(); ++b)
            h = reconv_forward(h, block_vars(p, fmt::format("{}.{}", name, b), cfg.skip_connection));
        const ad::Var seq = ad::image_to_sequence(ad::maxpool_last2(h));
        stacks[t] = lstm_head(seq, p, name + ".lstm", name + ".dense");
    }

    NetworkOutputs out;
    out.pitch_stack = stacks[0];
    out.pitch = stacks[0];
    if (cfg.tasks == TaskSet::pitch_only) return out;
    out.onset = stacks[1];
    out.offset = stacks[2];
    if (cfg.fusion_mode == FusionMode::none) return out;

    out.pitch = lstm_head(ad::concat_last({stacks[0], stacks[1], stacks[2]}), p,
                          "fusion.pitch.lstm", "fusion.pitch.dense");
    if (cfg.fusion_mode == FusionMode::all_tasks) {
        const ad::Var shared_pitch = ad::scale(stacks[0], cfg.fusion_weight);
        out.onset = lstm_head(ad::concat_last({stacks[1], shared_pitch}), p, "fusion.onset.lstm",
                              "fusion.onset.dense");
        out.offset = lstm_head(ad::concat_last({stacks[2], shared_pitch}), p,
                               "fusion.offset.lstm", "fusion.offset.dense");
    }
    return out;
}

ad::Tensor batch_input(const std::vector<const RowMatrix*>& mels) {
    if (mels.empty()) throw ShapeError("empty batch");
    const auto T = static_cast<std::size_t>(mels.front()->rows());
    const auto F = static_cast<std::size_t>(mels.front()->cols());
    ad::Tensor x({mels.size(), 1, T, F});
    for (std::size_t n = 0; n < mels.size(); ++n) {
        if (static_cast<std::size_t>(mels[n]->rows()) != T ||
            static_cast<std::size_t>(mels[n]->cols()) != F)
            throw ShapeError("batch items differ in size");
        std::copy_n(mels[n]->data(), T * F, x.values.begin() + static_cast<long>(n * T * F));
    }
    return x;
}

Prediction predict(const MelSpectrogram& mel, const ModelParams& params, const ModelConfig& cfg) {
    if (mel.bins() != cfg.mel_bins)
        throw ShapeError(fmt::format("spectrogram has {} bins, model expects {}", mel.bins(),
                                     cfg.mel_bins));
    ad::Graph g;
    BoundParams bound(g, const_cast<ModelParams&>(params), false);
    const ad::Var input = g.constant(batch_input({&mel.values}));
    const NetworkOutputs out = jepoo_forward(input, bound, cfg);
    const auto T = static_cast<Eigen::Index>(mel.frames());
    const auto to_matrix = [&](ad::Var v) {
        RowMatrix m(T, kNumKeys);
        std::copy(v.values().begin(), v.values().end(), m.data());
        return m;
    };
    Prediction pred;
    pred.pitch = to_matrix(out.pitch);
    if (cfg.tasks == TaskSet::joint) {
        pred.onset = to_matrix(out.onset);
        pred.offset = to_matrix(out.offset);
    }
    return pred;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const ModelConfig& cfg) {
    nlohmann::json header{{"version", kCheckpointVersion}, {"model_config", to_json(cfg)}};
    auto& list = header["tensors"] = nlohmann::json::array();
    for (const auto& t : params.tensors) list.push_back({{"name", t.name}, {"shape", t.tensor.shape}});
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path.string() + " for writing");
    const std::uint32_t version = kCheckpointVersion;
    const auto len = static_cast<std::uint32_t>(text.size());
    os.write("JEPOOCKP", 8);
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&len), 4);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : params.tensors)
        os.write(reinterpret_cast<const char*>(t.tensor.values.data()),
                 static_cast<std::streamsize>(t.tensor.values.size() * sizeof(double)));
    if (!os) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint32_t version = 0, len = 0;
    is.read(magic, 8);
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&len), 4);
    if (!is || std::memcmp(magic, "JEPOOCKP", 8) != 0)
        throw MismatchError(path.string() + " is not a checkpoint");
    if (version != kCheckpointVersion)
        throw MismatchError(fmt::format("checkpoint version {} unsupported", version));
    std::string text(len, '\0');
    is.read(text.data(), len);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw MismatchError(std::string("corrupt checkpoint header: ") + e.what());
    }

    Checkpoint ck;
    ck.config = model_config_from_json(header.at("model_config"));
    ck.params = init_params(ck.config, 0);
    const auto& list = header.at("tensors");
    if (list.size() != ck.params.tensors.size())
        throw MismatchError(fmt::format("checkpoint holds {} tensors, config implies {}",
                                        list.size(), ck.params.tensors.size()));
    for (std::size_t i = 0; i < list.size(); ++i) {
        auto& t = ck.params.tensors[i];
        const auto name = list[i].at("name").get<std::string>();
        const auto shape = list[i].at("shape").get<ad::Shape>();
        if (name != t.name || shape != t.tensor.shape)
            throw MismatchError(fmt::format("tensor {} is {} {}, config implies {} {}", i, name,
                                            ad::shape_str(shape), t.name,
                                            ad::shape_str(t.tensor.shape)));
        is.read(reinterpret_cast<char*>(t.tensor.values.data()),
                static_cast<std::streamsize>(t.tensor.values.size() * sizeof(double)));
    }
    if (!is) throw MismatchError("checkpoint payload truncated");
    return ck;
}

} // namespace jepoo
