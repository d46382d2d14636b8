// jepoo: synthetic corpora, training, inference and evaluation.

#include "jepoo/datagen.hpp"
#include "jepoo/error.hpp"
#include "jepoo/evalmetrics.hpp"
#include "jepoo/frontend.hpp"
#include "jepoo/labelcodec.hpp"
#include "jepoo/network.hpp"
#include "jepoo/trainer.hpp"
#include "jepoo/wav.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace jepoo;

namespace {

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path.string() + " for writing");
    os << text;
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

double parse_snr(const std::string& s) {
    if (s == "inf" || s == "+inf" || s == "Inf") return kNoNoise;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("invalid --snr '" + s + "'");
    }
}

CorpusManifest require_manifest(const std::string& path) {
    if (!fs::exists(path)) throw InputError("manifest not found: " + path);
    return read_manifest(path);
}

// --- synth / mix ---------------------------------------------------------------

struct SynthArgs {
    std::string kind = "sp";
    int items = 10;
    double duration = 10.0;
    std::uint64_t seed = 0;
    std::string out;
    int polyphony_max = 3;
    int pitch_min = kMinPitch;
    int pitch_max = kMaxPitch;
    double tempo_min = 80.0;
    double tempo_max = 160.0;
    double rest_probability = 0.3;
};

int cmd_synth(const SynthArgs& a) {
    NoteGenConfig gen;
    gen.kind = parse_kind(a.kind);
    gen.duration_s = a.duration;
    gen.polyphony_max = gen.kind == CorpusKind::SP ? 1 : a.polyphony_max;
    gen.pitch_range = {a.pitch_min, a.pitch_max};
    gen.tempo_range = {a.tempo_min, a.tempo_max};
    gen.rest_probability = a.rest_probability;
    const auto m = synth_corpus(a.out, gen, a.items, a.seed);
    std::cout << nlohmann::json{{"manifest", (fs::path(a.out) / "manifest.jsonl").string()},
                                {"items", m.items.size()}}
                     .dump()
              << '\n';
    return 0;
}

struct MixArgs {
    std::string sp, mp, out;
    double proportion = 0.5;
    std::uint64_t seed = 0;
    std::optional<std::size_t> total;
};

int cmd_mix(const MixArgs& a) {
    const auto sp = a.proportion < 1.0 ? require_manifest(a.sp) : CorpusManifest{};
    const auto mp = a.proportion > 0.0 ? require_manifest(a.mp) : CorpusManifest{};
    const auto m = mix_manifest(sp, mp, a.proportion, a.seed, a.total);
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    write_manifest(a.out, m);
    std::cout << nlohmann::json{{"items", m.items.size()}, {"mp_frame_share", m.mp_frame_share()}}
                     .dump()
              << '\n';
    return 0;
}

// --- train -----------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string train_manifest, val_manifest;
    std::string sp, mp;
    double mix_proportion = 0.5;
    std::string out;
    std::string loss_mode;
    double lambda = 0.04;
    int max_steps = 0;
    std::uint64_t seed = 0;
    int batch_size = 4;
    double clip_seconds = 12.8;
    std::string preset;
    bool single_task = false;
};

int cmd_train(const TrainArgs& a, const CLI::App& app) {
    const auto given = [&](const char* flag) { return app.count(flag) > 0; };

    TrainConfig tcfg;
    ModelConfig mcfg;
    LossConfig lcfg;
    if (!a.config.empty()) {
        const auto j = read_json(a.config);
        if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
        for (const auto& [key, v] : j.items()) {
            if (key == "train") tcfg = train_config_from_json(v, tcfg);
            else if (key == "model") mcfg = model_config_from_json(v);
            else if (key == "loss") lcfg = loss_config_from_json(v, lcfg);
            else throw ConfigError("unknown config section '" + key + "'");
        }
    }
    if (given("--preset")) {
        if (a.preset == "paper") mcfg = ModelConfig::paper();
        else if (a.preset == "toy") mcfg = ModelConfig::toy();
        else if (a.preset == "tiny") mcfg = ModelConfig::tiny();
        else if (a.preset == "small") mcfg = ModelConfig::small();
        else throw ConfigError("unknown preset '" + a.preset + "'");
    }
    if (given("--loss-mode")) tcfg.loss_mode = parse_loss_mode(a.loss_mode);
    if (given("--lambda")) lcfg.lambda = a.lambda;
    if (given("--max-steps")) tcfg.max_steps = a.max_steps;
    if (given("--seed")) tcfg.seed = a.seed;
    if (given("--batch-size")) tcfg.batch_size = a.batch_size;
    if (given("--clip-seconds")) tcfg.clip_seconds = a.clip_seconds;
    if (a.single_task) mcfg.tasks = TaskSet::pitch_only;
    tcfg.validate();
    lcfg.validate();
    mcfg.validate();

    CorpusManifest train_m;
    if (!a.train_manifest.empty()) {
        train_m = require_manifest(a.train_manifest);
    } else if (!a.sp.empty() || !a.mp.empty()) {
        const auto sp = a.sp.empty() ? CorpusManifest{} : require_manifest(a.sp);
        const auto mp = a.mp.empty() ? CorpusManifest{} : require_manifest(a.mp);
        train_m = mix_manifest(sp, mp, a.mix_proportion, tcfg.seed);
    } else {
        throw InputError("train needs --train or --sp/--mp manifests");
    }
    const auto val_m = a.val_manifest.empty() ? CorpusManifest{} : require_manifest(a.val_manifest);

    fs::create_directories(a.out);
    write_manifest(fs::path(a.out) / "train_manifest.jsonl", train_m);
    const auto res = train(train_m, val_m, tcfg, mcfg, lcfg, a.out);
    std::cout << nlohmann::json{{"checkpoint", (fs::path(a.out) / "best.ckpt").string()},
                                {"steps", res.history.size()},
                                {"best_step", res.best_step},
                                {"best_pitch_f1", res.best_f1},
                                {"skipped_steps", res.skipped_steps}}
                     .dump()
              << '\n';
    return 0;
}

// --- predict / eval / sweep / noise-eval -----------------------------------------

std::string prediction_json(const Prediction& p) {
    const auto rows = [](const RowMatrix& m) {
        nlohmann::json out = nlohmann::json::array();
        for (Eigen::Index t = 0; t < m.rows(); ++t) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index k = 0; k < m.cols(); ++k)
                row.push_back(std::round(m(t, k) * 1e6) / 1e6);
            out.push_back(std::move(row));
        }
        return out;
    };
    nlohmann::json j{{"pitch", rows(p.pitch)}};
    if (p.has_boundaries()) {
        j["onset"] = rows(p.onset);
        j["offset"] = rows(p.offset);
    }
    return j.dump() + "\n";
}

struct PredictArgs {
    std::string checkpoint, audio, manifest, out;
    double threshold = 0.5;
};

int cmd_predict(const PredictArgs& a) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    std::vector<ManifestItem> inputs;
    if (!a.audio.empty()) {
        ManifestItem it;
        it.audio = a.audio;
        inputs.push_back(it);
    } else if (!a.manifest.empty()) {
        inputs = require_manifest(a.manifest).items;
    } else {
        throw InputError("predict needs --audio or --manifest");
    }
    fs::create_directories(a.out);
    for (const auto& it : inputs) {
        AudioClip clip = read_wav(it.audio);
        const MelSpectrogram mel = melspectrogram(clip);
        const Prediction pred = predict(mel, ck.params, ck.config);
        const auto stem = it.audio.stem().string();
        write_file(fs::path(a.out) / (stem + ".pred.json"), prediction_json(pred));
        write_notes(fs::path(a.out) / (stem + ".notes.jsonl"),
                    decode_notes(pred, a.threshold, mel.frame_rate));
    }
    std::cout << nlohmann::json{{"predicted", inputs.size()}, {"out", a.out}}.dump() << '\n';
    return 0;
}

// Report of one estimated note list against a reference.
MetricReport compare_notes(const std::vector<NoteEvent>& est, const std::vector<NoteEvent>& ref) {
    const MelConfig mel;
    const double fr = 16000.0 / mel.hop;
    double end = 0.0;
    for (const auto& n : est) end = std::max(end, n.offset);
    for (const auto& n : ref) end = std::max(end, n.offset);
    const int frames = std::max(1, static_cast<int>(std::ceil(end * fr)));
    const FrameLabels e = encode_frames(est, frames, fr);
    const FrameLabels r = encode_frames(ref, frames, fr);
    MetricReport rep;
    rep.pitch = frame_pitch_f1(e.pitch, r.pitch);
    rep.onset = note_onset_f1(est, ref);
    rep.onset_offset = note_onset_offset_f1(est, ref);
    rep.vfa = vfa(e.pitch, r.pitch);
    return rep;
}

struct EvalArgs {
    std::string checkpoint, manifest, est, ref, out;
    double threshold = 0.5;
    std::string snr = "inf";
    std::uint64_t seed = 0;
};

// Per-item rows plus an "ALL" row pooled over the manifest.
std::pair<std::string, MetricReport> eval_manifest(const EvalArgs& a, double snr) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const auto m = require_manifest(a.manifest);
    const auto items = load_items(m, {}, snr, a.seed);
    std::string csv = report_csv_header();
    MetricAccumulator all;
    for (const auto& it : items) {
        const Prediction pred = predict(it.mel, ck.params, ck.config);
        csv += report_csv_row(it.id, a.threshold, evaluate(pred, it.notes, a.threshold,
                                                           it.mel.frame_rate));
        all.add(pred, it.notes, a.threshold, it.mel.frame_rate);
    }
    const MetricReport pooled = all.report();
    csv += report_csv_row("ALL", a.threshold, pooled);
    return {csv, pooled};
}

int emit_report(const EvalArgs& a, const std::string& csv, const MetricReport& pooled) {
    if (!a.out.empty()) {
        write_file(a.out + ".csv", csv);
        write_file(a.out + ".json", to_json(pooled).dump(2) + "\n");
    } else {
        std::cout << csv;
    }
    std::cerr << to_json(pooled).dump() << '\n';
    return 0;
}

int cmd_eval(const EvalArgs& a) {
    if (!a.est.empty() || !a.ref.empty()) {
        if (a.est.empty() || a.ref.empty()) throw InputError("note comparison needs --est and --ref");
        const MetricReport r = compare_notes(read_notes(a.est), read_notes(a.ref));
        return emit_report(a, report_csv_header() + report_csv_row(a.est, a.threshold, r), r);
    }
    if (a.checkpoint.empty() || a.manifest.empty())
        throw InputError("eval needs --checkpoint and --manifest, or --est and --ref");
    const auto [csv, pooled] = eval_manifest(a, kNoNoise);
    return emit_report(a, csv, pooled);
}

int cmd_noise_eval(const EvalArgs& a) {
    if (a.checkpoint.empty() || a.manifest.empty())
        throw InputError("noise-eval needs --checkpoint and --manifest");
    const auto [csv, pooled] = eval_manifest(a, parse_snr(a.snr));
    return emit_report(a, csv, pooled);
}

int cmd_sweep(const EvalArgs& a) {
    if (a.checkpoint.empty() || a.manifest.empty())
        throw InputError("sweep needs --checkpoint and --manifest");
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const auto items = load_items(require_manifest(a.manifest));
    std::vector<Prediction> preds;
    for (const auto& it : items) preds.push_back(predict(it.mel, ck.params, ck.config));
    std::string csv = report_csv_header();
    nlohmann::json rows = nlohmann::json::array();
    for (double th : default_thresholds()) {
        MetricAccumulator acc;
        for (std::size_t i = 0; i < items.size(); ++i)
            acc.add(preds[i], items[i].notes, th, items[i].mel.frame_rate);
        const MetricReport r = acc.report();
        csv += report_csv_row("ALL", th, r);
        auto j = to_json(r);
        j["threshold"] = th;
        rows.push_back(std::move(j));
    }
    if (!a.out.empty()) {
        write_file(a.out + ".csv", csv);
        write_file(a.out + ".json", rows.dump(2) + "\n");
    } else {
        std::cout << csv;
    }
    return 0;
}

void configure_logging() {
    spdlog::set_default_logger(spdlog::stderr_color_mt("jepoo"));
    spdlog::set_level(spdlog::level::warn);
    if (const char* env = std::getenv("JEPOO_LOG")) {
        const auto level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string(env) != "off")
            throw ConfigError(fmt::format("unknown JEPOO_LOG level '{}'", env));
        spdlog::set_level(level);
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint pitch, onset and offset transcription toolkit"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Render a synthetic SP or MP corpus");
    s->add_option("--kind", synth.kind, "sp or mp")->check(CLI::IsMember({"sp", "mp", "SP", "MP"}));
    s->add_option("--items", synth.items, "Number of clips");
    s->add_option("--duration", synth.duration, "Clip length in seconds");
    s->add_option("--seed", synth.seed);
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--polyphony-max", synth.polyphony_max, "MP notes per event");
    s->add_option("--pitch-min", synth.pitch_min);
    s->add_option("--pitch-max", synth.pitch_max);
    s->add_option("--tempo-min", synth.tempo_min, "BPM");
    s->add_option("--tempo-max", synth.tempo_max, "BPM");
    s->add_option("--rest-probability", synth.rest_probability);

    MixArgs mix;
    auto* mx = app.add_subcommand("mix", "Mix SP and MP manifests by MP frame share");
    mx->add_option("--sp", mix.sp);
    mx->add_option("--mp", mix.mp);
    mx->add_option("--proportion", mix.proportion, "MP frame share in [0, 1]");
    mx->add_option("--seed", mix.seed);
    mx->add_option("--total", mix.total, "Number of items to draw");
    mx->add_option("--out", mix.out, "Output manifest")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", tr.config, "JSON file with train/model/loss sections");
    t->add_option("--train", tr.train_manifest, "Training manifest");
    t->add_option("--val", tr.val_manifest, "Validation manifest");
    t->add_option("--sp", tr.sp, "SP manifest to mix");
    t->add_option("--mp", tr.mp, "MP manifest to mix");
    t->add_option("--mix-proportion", tr.mix_proportion, "MP frame share of the mix");
    t->add_option("--out", tr.out, "Run directory")->required();
    t->add_option("--loss-mode", tr.loss_mode,
                  "naive_joint, focal_only, pareto_only, naive_opt or pml_lwr");
    t->add_option("--lambda", tr.lambda, "LWR weight");
    t->add_option("--max-steps", tr.max_steps);
    t->add_option("--seed", tr.seed);
    t->add_option("--batch-size", tr.batch_size);
    t->add_option("--clip-seconds", tr.clip_seconds);
    t->add_option("--preset", tr.preset, "paper, toy, tiny or small");
    t->add_flag("--single-task", tr.single_task, "Pitch stack only");

    PredictArgs pr;
    auto* p = app.add_subcommand("predict", "Run a checkpoint on audio");
    p->add_option("--checkpoint", pr.checkpoint)->required();
    p->add_option("--audio", pr.audio, "WAV file");
    p->add_option("--manifest", pr.manifest);
    p->add_option("--threshold", pr.threshold);
    p->add_option("--out", pr.out, "Output directory")->required();

    EvalArgs ev, sw, ne;
    const auto eval_options = [](CLI::App* c, EvalArgs& a) {
        c->add_option("--checkpoint", a.checkpoint);
        c->add_option("--manifest", a.manifest);
        c->add_option("--threshold", a.threshold);
        c->add_option("--out", a.out, "Report path prefix (.csv and .json)");
        c->add_option("--seed", a.seed);
    };
    auto* e = app.add_subcommand("eval", "Metrics for a checkpoint or a note list");
    eval_options(e, ev);
    e->add_option("--est", ev.est, "Estimated notes JSONL");
    e->add_option("--ref", ev.ref, "Reference notes JSONL");
    auto* w = app.add_subcommand("sweep", "Metrics at thresholds 0.1 to 0.9");
    eval_options(w, sw);
    auto* n = app.add_subcommand("noise-eval", "Metrics after adding white noise");
    eval_options(n, ne);
    n->add_option("--snr", ne.snr, "SNR in dB or inf");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }

    try {
        configure_logging();
        if (*s) return cmd_synth(synth);
        if (*mx) return cmd_mix(mix);
        if (*t) return cmd_train(tr, *t);
        if (*p) return cmd_predict(pr);
        if (*e) return cmd_eval(ev);
        if (*w) return cmd_sweep(sw);
        if (*n) return cmd_noise_eval(ne);
    } catch (const InputError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 2;
    } catch (const MismatchError& err) {
        std::cerr << "mismatch: " << err.what() << '\n';
        return 3;
    } catch (const std::exception& err) {
        std::cerr << "internal error: " << err.what() << '\n';
        return 1;
    }
    return 1;
}
