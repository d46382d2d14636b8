#pragma once

#include "jepoo/autodiff.hpp"
#include "jepoo/frontend.hpp"
#include "jepoo/labelcodec.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace jepoo {

enum class FusionMode { pitch_only, none, all_tasks };
// `pitch_only` builds the single-task model: one stack, no boundary heads.
enum class TaskSet { joint, pitch_only };

struct ModelConfig {
    int mel_bins = 229;
    int shared_conv_layers = 6; // two per ReConv block
    int stack_conv_layers = 8;
    bool skip_connection = true;
    // Output channels per shared block; the last entry repeats if the list
    // is shorter than the block count.
    std::vector<int> shared_channels{4, 8, 8};
    int stack_channels = 8;
    int bilstm_hidden = 24; // per direction
    int fusion_hidden = 24;
    FusionMode fusion_mode = FusionMode::pitch_only;
    double fusion_weight = 1.0; // used by all_tasks
    TaskSet tasks = TaskSet::joint;
    // Only "bilstm" is implemented; other names are rejected.
    std::string sequence_model = "bilstm";
    // Network input is (log_mel + input_shift) * input_scale.
    double input_shift = 4.0;
    double input_scale = 0.25;

    // Full-size plan: 16/32/64 shared, 64 per stack,
    // BiLSTM output width 768 (384 per direction).
    static ModelConfig paper();
    // Mid-size desk preset: 16/32/64 shared, 64 per stack, H = 64.
    static ModelConfig toy();
    // The default: small enough to train on one CPU core in minutes.
    static ModelConfig tiny();
    // Shallower and narrower than tiny; the toy acceptance runs use it.
    static ModelConfig small();

    int shared_blocks() const { return shared_conv_layers / 2; }
    int stack_blocks() const { return stack_conv_layers / 2; }
    int channels_of_shared_block(int block) const;
    int num_stacks() const { return tasks == TaskSet::joint ? 3 : 1; }
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
// Rejects unknown keys.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct NamedTensor {
    std::string name;
    ad::Tensor tensor;
};

// Every learnable tensor, in declaration order: shared bottom, stacks
// (pitch, onset, offset), fusion head(s), PML weight head.
struct ModelParams {
    std::vector<NamedTensor> tensors;

    std::size_t count() const;
    ad::Tensor& at(const std::string& name);
    const ad::Tensor& at(const std::string& name) const;
    void zero_grad();
    bool all_finite() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// Parameters bound into a graph, addressable by name.
class BoundParams {
public:
    BoundParams(ad::Graph& g, ModelParams& params, bool trainable);
    ad::Var operator[](const std::string& name) const;
    bool has(const std::string& name) const;
    // Nodes of every tensor whose name starts with `prefix`.
    std::vector<ad::Var> with_prefix(const std::string& prefix) const;

private:
    std::vector<std::pair<std::string, ad::Var>> vars_;
};

struct ReconvBlock {
    ad::Var conv1_w, conv1_b, conv2_w, conv2_b;
    ad::Var skip_w, skip_b; // unset when the skip path is disabled
    bool skip = false;
};

// relu(conv2(relu(conv1(x))) + skip(x)), skip omitted when disabled.
ad::Var reconv_forward(ad::Var x, const ReconvBlock& block);

struct NetworkOutputs {
    ad::Var pitch;       // [N, T, 88] final pitch probabilities
    ad::Var onset;       // [N, T, 88], unset for single-task models
    ad::Var offset;      // [N, T, 88], unset for single-task models
    ad::Var pitch_stack; // pitch stack output before fusion
};

// input: [N, 1, T, F] log-mel.
NetworkOutputs jepoo_forward(ad::Var input, const BoundParams& params, const ModelConfig& cfg);

// Inference on one spectrogram.
Prediction predict(const MelSpectrogram& mel, const ModelParams& params, const ModelConfig& cfg);

// Batch input tensor [N, 1, T, F] from equally sized spectrogram windows.
ad::Tensor batch_input(const std::vector<const RowMatrix*>& mels);

// Checkpoint: "JEPOOCKP", uint32 version, uint32 header length, JSON header
// {version, model_config, tensors:[{name, shape}]}, then every tensor as
// little-endian float64 in declaration order.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const ModelConfig& cfg);
struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace jepoo
