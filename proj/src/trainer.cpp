#include "jepoo/trainer.hpp"

#include "jepoo/error.hpp"
#include "jepoo/paretosolver.hpp"
#include "jepoo/wav.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace jepoo {

namespace {

constexpr std::array<const char*, kNumTasks> kTaskNames{"pitch", "onset", "offset"};

template <class T>
T get_as(const nlohmann::json& j, const std::string& key) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("bad value for '{}': {}", key, e.what()));
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path.string() + " for writing");
    os << text;
}

bool uses_pareto(LossMode m) {
    return m == LossMode::pareto_only || m == LossMode::naive_opt || m == LossMode::pml_lwr;
}

bool uses_focal(LossMode m) { return m == LossMode::focal_only || m == LossMode::naive_opt; }

struct Batch {
    ad::Tensor input;
    std::array<std::vector<std::uint8_t>, kNumTasks> labels;
};

Batch make_batch(const std::vector<TrainingItem>& items, int batch_size, int frames,
                 std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
    std::vector<ClipSample> clips;
    clips.reserve(static_cast<std::size_t>(batch_size));
    for (int b = 0; b < batch_size; ++b) clips.push_back(sample_clip(items[pick(rng)], frames, rng));
    std::vector<const RowMatrix*> mels;
    for (const auto& c : clips) mels.push_back(&c.mel.values);
    Batch batch{batch_input(mels), {}};
    for (const auto& c : clips) {
        const ByteMatrix* parts[kNumTasks] = {&c.labels.pitch, &c.labels.onset, &c.labels.offset};
        for (int i = 0; i < kNumTasks; ++i)
            batch.labels[i].insert(batch.labels[i].end(), parts[i]->data(),
                                   parts[i]->data() + parts[i]->size());
    }
    return batch;
}

// Flattened gradient of `root` with respect to every shared-bottom tensor.
std::vector<double> shared_gradient(ad::Graph& g, ad::Var root,
                                    const std::vector<ad::Var>& shared) {
    g.backward(root);
    std::vector<double> flat;
    for (const auto& v : shared) {
        const auto gr = v.grad();
        if (gr.empty())
            flat.insert(flat.end(), v.values().size(), 0.0);
        else
            flat.insert(flat.end(), gr.begin(), gr.end());
    }
    return flat;
}

double norm(const ModelParams& p) {
    double acc = 0.0;
    for (const auto& t : p.tensors)
        for (double v : t.tensor.values) acc += v * v;
    return std::sqrt(acc);
}

[[noreturn]] void diverged(const std::filesystem::path& out_dir, long step,
                           const StepRecord& rec, const ModelParams& params) {
    nlohmann::json dump{{"step", step},
                        {"task_loss", rec.task_loss},
                        {"lwr", rec.lwr},
                        {"total", rec.total},
                        {"omega", rec.omega},
                        {"omega_pml", rec.omega_pml},
                        {"param_norm", norm(params)}};
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : params.tensors) {
        double mx = 0.0;
        bool finite = true;
        for (double v : t.tensor.values) {
            finite = finite && std::isfinite(v);
            mx = std::max(mx, std::abs(v));
        }
        tensors.push_back({{"name", t.name}, {"max_abs", mx}, {"finite", finite}});
    }
    dump["tensors"] = tensors;
    spdlog::error("non-finite loss at step {}: {}", step, dump.dump());
    if (!out_dir.empty()) write_text(out_dir / "diverged.json", dump.dump(2) + "\n");
    throw TrainingDivergedError(fmt::format("non-finite loss at step {}", step));
}

} // namespace

const char* loss_mode_name(LossMode m) {
    switch (m) {
    case LossMode::naive_joint: return "naive_joint";
    case LossMode::focal_only: return "focal_only";
    case LossMode::pareto_only: return "pareto_only";
    case LossMode::naive_opt: return "naive_opt";
    case LossMode::pml_lwr: return "pml_lwr";
    }
    return "?";
}

LossMode parse_loss_mode(const std::string& s) {
    for (auto m : {LossMode::naive_joint, LossMode::focal_only, LossMode::pareto_only,
                   LossMode::naive_opt, LossMode::pml_lwr})
        if (s == loss_mode_name(m)) return m;
    throw ConfigError("unknown loss mode '" + s + "'");
}

void TrainConfig::validate() const {
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(clip_seconds > 0.0)) throw ConfigError("clip_seconds must be positive");
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
    if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
    if (lr_decay_steps <= 0) throw ConfigError("lr_decay_steps must be positive");
    if (pareto_refresh <= 0) throw ConfigError("pareto_refresh must be positive");
    if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
    if (val_every <= 0) throw ConfigError("val_every must be positive");
    if (!(val_threshold > 0.0 && val_threshold < 1.0))
        throw ConfigError("val_threshold must lie in (0, 1)");
    clip_frames(clip_seconds);
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},       {"clip_seconds", c.clip_seconds},
            {"lr0", c.lr0},                     {"lr_decay", c.lr_decay},
            {"lr_decay_steps", c.lr_decay_steps}, {"pareto_refresh", c.pareto_refresh},
            {"max_steps", c.max_steps},         {"seed", c.seed},
            {"loss_mode", loss_mode_name(c.loss_mode)}, {"val_every", c.val_every},
            {"val_threshold", c.val_threshold}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    if (!j.is_object()) throw ConfigError("training config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "batch_size") c.batch_size = get_as<int>(v, key);
        else if (key == "clip_seconds") c.clip_seconds = get_as<double>(v, key);
        else if (key == "lr0") c.lr0 = get_as<double>(v, key);
        else if (key == "lr_decay") c.lr_decay = get_as<double>(v, key);
        else if (key == "lr_decay_steps") c.lr_decay_steps = get_as<int>(v, key);
        else if (key == "pareto_refresh") c.pareto_refresh = get_as<int>(v, key);
        else if (key == "max_steps") c.max_steps = get_as<int>(v, key);
        else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
        else if (key == "loss_mode") c.loss_mode = parse_loss_mode(get_as<std::string>(v, key));
        else if (key == "val_every") c.val_every = get_as<int>(v, key);
        else if (key == "val_threshold") c.val_threshold = get_as<double>(v, key);
        else throw ConfigError("unknown training key '" + key + "'");
    }
    c.validate();
    return c;
}

nlohmann::json to_json(const LossConfig& c) {
    return {{"alpha", c.alpha},   {"gamma", c.gamma}, {"lambda", c.lambda},
            {"p", c.p},           {"positive_only", c.positive_only}};
}

LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig c) {
    if (!j.is_object()) throw ConfigError("loss config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "alpha") c.alpha = get_as<std::array<double, kNumTasks>>(v, key);
        else if (key == "gamma") c.gamma = get_as<std::array<double, kNumTasks>>(v, key);
        else if (key == "lambda") c.lambda = get_as<double>(v, key);
        else if (key == "p") c.p = get_as<double>(v, key);
        else if (key == "positive_only") c.positive_only = get_as<bool>(v, key);
        else throw ConfigError("unknown loss key '" + key + "'");
    }
    c.validate();
    return c;
}

double learning_rate(const TrainConfig& c, long step) {
    return c.lr0 * std::pow(c.lr_decay, static_cast<double>(step / c.lr_decay_steps));
}

// --- Adam -----------------------------------------------------------------------

bool Adam::update(
    const std::vector<std::pair<std::span<double>, std::span<const double>>>& slots, double lr) {
    for (const auto& [vals, grads] : slots)
        for (double gv : grads)
            if (!std::isfinite(gv)) {
                ++skipped_;
                spdlog::warn("non-finite gradient, Adam step skipped ({} so far)", skipped_);
                return false;
            }
    if (m_.empty()) {
        for (const auto& [vals, grads] : slots) {
            m_.emplace_back(vals.size(), 0.0);
            v_.emplace_back(vals.size(), 0.0);
        }
    }
    if (m_.size() != slots.size()) throw ContractError("Adam: parameter layout changed");
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t s = 0; s < slots.size(); ++s) {
        auto [vals, grads] = slots[s];
        if (grads.empty()) continue;
        auto& m = m_[s];
        auto& v = v_[s];
        for (std::size_t i = 0; i < vals.size(); ++i) {
            m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * grads[i];
            v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * grads[i] * grads[i];
            vals[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
        }
    }
    return true;
}

bool Adam::step(ModelParams& params, double lr) {
    std::vector<std::pair<std::span<double>, std::span<const double>>> slots;
    for (auto& t : params.tensors) {
        if (!t.tensor.requires_grad) continue;
        slots.emplace_back(std::span<double>(t.tensor.values),
                           std::span<const double>(t.tensor.grad));
    }
    return update(slots, lr);
}

bool Adam::step(std::span<double> values, std::span<const double> grads, double lr) {
    if (values.size() != grads.size()) throw ShapeError("Adam: gradient size mismatch");
    return update({{values, grads}}, lr);
}

// --- data -----------------------------------------------------------------------

TrainingItem load_item(const ManifestItem& item, const MelConfig& mel, double snr_db,
                       std::uint64_t noise_seed) {
    TrainingItem out;
    out.id = item.audio.stem().string();
    out.kind = item.kind;
    try {
        AudioClip clip = read_wav(item.audio);
        if (clip.samples.size() < static_cast<std::size_t>(mel.window))
            clip.samples.resize(static_cast<std::size_t>(mel.window), 0.0);
        clip = add_white_noise(clip, snr_db, noise_seed);
        out.mel = melspectrogram(clip, mel);
        out.notes = read_notes(item.notes);
    } catch (const IngestionError& e) {
        throw IngestionError(fmt::format("item {}: {}", out.id, e.what()));
    }
    out.labels = encode_frames(out.notes, out.mel.frames(), out.mel.frame_rate);
    return out;
}

std::vector<TrainingItem> load_items(const CorpusManifest& m, const MelConfig& mel,
                                     double snr_db, std::uint64_t noise_seed) {
    std::vector<TrainingItem> items;
    items.reserve(m.items.size());
    for (std::size_t i = 0; i < m.items.size(); ++i)
        items.push_back(load_item(m.items[i], mel, snr_db, derive_seed(noise_seed, i)));
    return items;
}

int clip_frames(double seconds, const MelConfig& mel) {
    const auto samples = static_cast<std::size_t>(std::llround(seconds * 16000.0));
    if (samples < static_cast<std::size_t>(mel.window))
        throw ConfigError(fmt::format("clip of {} s is shorter than one analysis window", seconds));
    return frame_count(samples, mel.window, mel.hop);
}

ClipSample sample_clip(const TrainingItem& item, int frames, std::mt19937_64& rng) {
    if (frames <= 0) throw InputError("clip must span at least one frame");
    const int total = item.mel.frames();
    int start = 0;
    if (total > frames) start = std::uniform_int_distribution<int>(0, total - frames)(rng);
    ClipSample out;
    out.start = start;
    out.mel.frame_rate = item.mel.frame_rate;
    const MelConfig defaults;
    out.mel.values = RowMatrix::Constant(frames, item.mel.bins(), std::log(defaults.log_floor));
    const int avail = std::min(frames, total - start);
    out.mel.values.topRows(avail) = item.mel.values.middleRows(start, avail);
    out.labels = item.labels.slice(start, frames);
    return out;
}

// --- evaluation -----------------------------------------------------------------

MetricReport evaluate_items(const ModelParams& params, const ModelConfig& cfg,
                            const std::vector<TrainingItem>& items, double threshold) {
    MetricAccumulator acc;
    for (const auto& it : items)
        acc.add(predict(it.mel, params, cfg), it.notes, threshold, it.mel.frame_rate);
    return acc.report();
}

// --- training loop --------------------------------------------------------------

TrainResult train(const std::vector<TrainingItem>& train_items,
                  const std::vector<TrainingItem>& val_items, const TrainConfig& tcfg,
                  const ModelConfig& mcfg, const LossConfig& lcfg,
                  const std::filesystem::path& out_dir) {
    tcfg.validate();
    mcfg.validate();
    lcfg.validate();
    if (tcfg.max_steps > 0 && train_items.empty()) throw InputError("training manifest is empty");
    const bool joint = mcfg.tasks == TaskSet::joint;
    const int ntasks = joint ? kNumTasks : 1;
    const LossMode mode = tcfg.loss_mode;
    const int frames = clip_frames(tcfg.clip_seconds);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_text(out_dir / "config.json",
                   nlohmann::json{{"train", to_json(tcfg)},
                                  {"model", to_json(mcfg)},
                                  {"loss", to_json(lcfg)}}
                           .dump(2) +
                       "\n");
    }

    TrainResult res;
    res.model_config = mcfg;
    ModelParams params = init_params(mcfg, tcfg.seed);
    res.best = params;
    std::mt19937_64 rng(derive_seed(tcfg.seed, 0xda7a));
    Adam adam;

    // Uniform task weights until the first refresh.
    std::vector<double> omega(static_cast<std::size_t>(ntasks), 1.0 / ntasks);
    if (!joint || !uses_pareto(mode)) std::fill(omega.begin(), omega.end(), 1.0);

    const auto validate_now = [&](long step) {
        if (val_items.empty()) return;
        ValidationRecord rec{step, evaluate_items(params, mcfg, val_items, tcfg.val_threshold)};
        spdlog::info("step {}: val pitch F1 {:.4f}, onset F1 {:.4f}", step, rec.report.pitch.f1,
                     rec.report.onset.f1);
        if (rec.report.pitch.f1 > res.best_f1) {
            res.best_f1 = rec.report.pitch.f1;
            res.best_step = step;
            res.best = params;
        }
        res.validation.push_back(std::move(rec));
    };

    for (long step = 0; step < tcfg.max_steps; ++step) {
        const Batch batch = make_batch(train_items, tcfg.batch_size, frames, rng);
        params.zero_grad();
        ad::Graph g;
        BoundParams bound(g, params, true);
        const NetworkOutputs out = jepoo_forward(g.constant(batch.input), bound, mcfg);
        const ad::Var heads[kNumTasks] = {out.pitch, out.onset, out.offset};

        std::vector<ad::Var> losses;
        for (int i = 0; i < ntasks; ++i) {
            const double gamma = joint && uses_focal(mode) ? lcfg.gamma[i] : 0.0;
            losses.push_back(lossops::element_loss(heads[i], batch.labels[i], lcfg.alpha[i], gamma,
                                                   lcfg.positive_only));
        }

        StepRecord rec;
        rec.step = step;
        rec.lr = learning_rate(tcfg, step);
        ad::Var total;
        if (joint) {
            if (uses_pareto(mode) && step > 0 && step % tcfg.pareto_refresh == 0) {
                const auto shared = bound.with_prefix("shared.");
                std::vector<std::vector<double>> grads;
                for (const auto& l : losses) grads.push_back(shared_gradient(g, l, shared));
                omega = min_norm_weights(grads);
            }
            ad::Tensor w({static_cast<std::size_t>(ntasks)}, omega);
            ad::Var weights = g.constant(std::move(w));
            if (mode == LossMode::pml_lwr) {
                weights = pml_weights(weights, bound["pml.weight"], bound["pml.bias"]);
                const ad::Var reg = lossops::lwr(weights, lcfg.p);
                rec.lwr = reg.item();
                total = ad::add(lossops::weighted_sum(weights, losses), ad::scale(reg, lcfg.lambda));
            } else {
                total = lossops::weighted_sum(weights, losses);
            }
            for (int i = 0; i < kNumTasks; ++i) {
                rec.omega[i] = omega[i];
                rec.omega_pml[i] = weights.values()[i];
            }
        } else {
            total = losses.front();
            rec.omega = {1.0, 0.0, 0.0};
            rec.omega_pml = rec.omega;
        }
        for (int i = 0; i < ntasks; ++i) rec.task_loss[i] = losses[i].item();
        rec.total = total.item();
        if (!std::isfinite(rec.total)) diverged(out_dir, step, rec, params);

        g.backward(total);
        g.accumulate_parameter_grads();
        adam.step(params, rec.lr);
        res.history.push_back(rec);

        const long done = step + 1;
        if (done % 50 == 0)
            spdlog::debug("step {} loss {:.5f} omega_pml [{:.3f} {:.3f} {:.3f}]", done, rec.total,
                          rec.omega_pml[0], rec.omega_pml[1], rec.omega_pml[2]);
        if (done % tcfg.val_every == 0 || done == tcfg.max_steps) validate_now(done);
    }
    if (val_items.empty() && tcfg.max_steps > 0) {
        res.best = params;
        res.best_step = tcfg.max_steps;
    }
    res.skipped_steps = adam.steps_skipped();
    res.last = std::move(params);

    if (!out_dir.empty()) {
        write_text(out_dir / "loss.csv", loss_csv(res.history));
        write_text(out_dir / "weights.csv", weight_csv(res.history));
        write_text(out_dir / "validation.csv", validation_csv(res.validation));
        save_checkpoint(out_dir / "best.ckpt", res.best, mcfg);
        save_checkpoint(out_dir / "last.ckpt", res.last, mcfg);
    }
    return res;
}

TrainResult train(const CorpusManifest& train_manifest, const CorpusManifest& val_manifest,
                  const TrainConfig& tcfg, const ModelConfig& mcfg, const LossConfig& lcfg,
                  const std::filesystem::path& out_dir) {
    return train(load_items(train_manifest), load_items(val_manifest), tcfg, mcfg, lcfg, out_dir);
}

TrainResult single_task_train(const std::vector<TrainingItem>& train_items,
                              const std::vector<TrainingItem>& val_items, const TrainConfig& tcfg,
                              ModelConfig mcfg, const std::filesystem::path& out_dir) {
    mcfg.tasks = TaskSet::pitch_only;
    return train(train_items, val_items, tcfg, mcfg, LossConfig{}, out_dir);
}

// --- CSV ------------------------------------------------------------------------

std::string loss_csv(const std::vector<StepRecord>& history) {
    std::ostringstream os;
    os << "step,L_pitch,L_onset,L_offset,L_re,L_total\n";
    for (const auto& r : history)
        os << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.step, r.task_loss[0],
                          r.task_loss[1], r.task_loss[2], r.lwr, r.total);
    return os.str();
}

std::string weight_csv(const std::vector<StepRecord>& history) {
    std::ostringstream os;
    os << "step";
    for (const char* t : kTaskNames) os << ",omega_" << t;
    for (const char* t : kTaskNames) os << ",omega_pml_" << t;
    os << ",lr\n";
    for (const auto& r : history)
        os << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.step,
                          r.omega[0], r.omega[1], r.omega[2], r.omega_pml[0], r.omega_pml[1],
                          r.omega_pml[2], r.lr);
    return os.str();
}

std::string validation_csv(const std::vector<ValidationRecord>& rows) {
    std::ostringstream os;
    os << "step,pitch_f1,onset_f1,onset_offset_f1,vfa\n";
    for (const auto& r : rows)
        os << fmt::format("{},{:.17g},{:.17g},{:.17g},{}\n", r.step, r.report.pitch.f1,
                          r.report.onset.f1, r.report.onset_offset.f1,
                          r.report.vfa ? fmt::format("{:.17g}", *r.report.vfa) : "");
    return os.str();
}

} // namespace jepoo
