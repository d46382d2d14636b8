#pragma once

#include "jepoo/datagen.hpp"
#include "jepoo/evalmetrics.hpp"
#include "jepoo/frontend.hpp"
#include "jepoo/labelcodec.hpp"
#include "jepoo/losses.hpp"
#include "jepoo/network.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace jepoo {

// Task weighting and per-task loss for each training row.
//   naive_joint  summed BCE, weights fixed at 1
//   focal_only   summed focal loss, weights fixed at 1
//   pareto_only  BCE weighted by the min-norm weights
//   naive_opt    focal loss weighted by the min-norm weights
//   pml_lwr      BCE weighted by the PML head output, plus lambda * LWR
enum class LossMode { naive_joint, focal_only, pareto_only, naive_opt, pml_lwr };

const char* loss_mode_name(LossMode m);
LossMode parse_loss_mode(const std::string& s);

struct TrainConfig {
    int batch_size = 4;
    double clip_seconds = 12.8;
    double lr0 = 0.0005;
    double lr_decay = 0.98;
    int lr_decay_steps = 10000;
    int pareto_refresh = 10;
    int max_steps = 1000;
    std::uint64_t seed = 0;
    LossMode loss_mode = LossMode::pml_lwr;
    int val_every = 500;
    double val_threshold = 0.5;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Applies the keys of `j` on top of `base`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig base = {});
nlohmann::json to_json(const LossConfig& c);

// lr0 * decay^floor(step / decay_steps)
double learning_rate(const TrainConfig& c, long step);

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamOptions opts = {}) : opts_(opts) {}
    // One update from the gradients stored in `params`. A non-finite gradient
    // skips the step and returns false.
    bool step(ModelParams& params, double lr);
    // Single-tensor form on raw spans (moments sized on first use).
    bool step(std::span<double> values, std::span<const double> grads, double lr);
    long steps_taken() const { return t_; }
    long steps_skipped() const { return skipped_; }

private:
    bool update(const std::vector<std::pair<std::span<double>, std::span<const double>>>& slots,
                double lr);
    AdamOptions opts_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
    long skipped_ = 0;
};

// One manifest item with its full spectrogram and frame labels.
struct TrainingItem {
    std::string id;
    MelSpectrogram mel;
    FrameLabels labels;
    std::vector<NoteEvent> notes;
    CorpusKind kind = CorpusKind::SP;
};

// Loads and featurises an item, optionally after adding white noise at
// `snr_db`. Read failures become IngestionError naming the item.
TrainingItem load_item(const ManifestItem& item, const MelConfig& mel = {},
                       double snr_db = kNoNoise, std::uint64_t noise_seed = 0);
// Item i receives noise seeded by derive_seed(noise_seed, i).
std::vector<TrainingItem> load_items(const CorpusManifest& m, const MelConfig& mel = {},
                                     double snr_db = kNoNoise, std::uint64_t noise_seed = 0);

struct ClipSample {
    MelSpectrogram mel;
    FrameLabels labels;
    int start = 0; // first frame of the window within the item
};

// Frames in a crop of `seconds` of 16 kHz audio (397 for 12.8 s).
int clip_frames(double seconds, const MelConfig& mel = {});

// Random hop-aligned window of `frames` frames. Short items are padded with
// silence and zero labels. Labels come from the full note list, so a note
// crossing the left edge has no onset inside the window.
ClipSample sample_clip(const TrainingItem& item, int frames, std::mt19937_64& rng);

struct StepRecord {
    long step = 0;
    std::array<double, kNumTasks> task_loss{};
    double lwr = 0.0;
    double total = 0.0;
    std::array<double, kNumTasks> omega{};
    std::array<double, kNumTasks> omega_pml{};
    double lr = 0.0;
};

struct ValidationRecord {
    long step = 0;
    MetricReport report;
};

struct TrainResult {
    ModelConfig model_config;
    ModelParams best;
    ModelParams last;
    long best_step = 0;
    double best_f1 = -1.0;
    std::vector<StepRecord> history;
    std::vector<ValidationRecord> validation;
    long skipped_steps = 0;
};

// Pooled metrics of a model over items at one threshold.
MetricReport evaluate_items(const ModelParams& params, const ModelConfig& cfg,
                            const std::vector<TrainingItem>& items, double threshold);

// Runs the optimisation loop. When out_dir is non-empty it receives
// config.json, loss.csv, weights.csv, validation.csv, best.ckpt, last.ckpt.
// The single-task model (cfg.tasks == pitch_only) trains on pitch BCE only.
TrainResult train(const std::vector<TrainingItem>& train_items,
                  const std::vector<TrainingItem>& val_items, const TrainConfig& tcfg,
                  const ModelConfig& mcfg, const LossConfig& lcfg,
                  const std::filesystem::path& out_dir = {});

TrainResult train(const CorpusManifest& train_manifest, const CorpusManifest& val_manifest,
                  const TrainConfig& tcfg, const ModelConfig& mcfg, const LossConfig& lcfg,
                  const std::filesystem::path& out_dir = {});

// Pitch stack alone with plain BCE.
TrainResult single_task_train(const std::vector<TrainingItem>& train_items,
                              const std::vector<TrainingItem>& val_items, const TrainConfig& tcfg,
                              ModelConfig mcfg, const std::filesystem::path& out_dir = {});

std::string loss_csv(const std::vector<StepRecord>& history);
std::string weight_csv(const std::vector<StepRecord>& history);
std::string validation_csv(const std::vector<ValidationRecord>& rows);

} // namespace jepoo
