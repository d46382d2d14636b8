// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include "gradcheck.hpp"

#include "jepoo/datagen.hpp"
#include "jepoo/evalmetrics.hpp"
#include "jepoo/labelcodec.hpp"
#include "jepoo/losses.hpp"
#include "jepoo/network.hpp"
#include "jepoo/paretosolver.hpp"
#include "jepoo/trainer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace jepoo;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr int kGradSeeds = 20;
constexpr double kGradSeconds = 120.0;
constexpr double kClosedFormTol = 1e-8;
constexpr double kSimplexTol = 1e-10;
constexpr int kSpotChecks = 1000;
constexpr double kLwrPositive = 1e-12;
constexpr int kMatcherInstances = 1000;
constexpr int kRoundtripSets = 500;
constexpr int kTrainClips = 200;
constexpr int kTestClips = 40;
constexpr double kClipSeconds = 10.0;
constexpr double kMpShare = 0.5;
constexpr int kMaxSteps = 5000;
constexpr double kRunSeconds = 3600.0;
constexpr double kPitchF1Floor = 0.85;
constexpr double kPitchF1Slack = 0.01;
constexpr double kOnsetMargin = 0.05;
constexpr double kSweepRange = 0.08;
constexpr double kCleanVfa = 0.02;
constexpr double kNoisySnr = 50.0;
constexpr int kSeeds = 3;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Tally {
    int passed = 0;
    int failed = 0;

    void report(bool ok, const std::string& id, const std::string& detail) {
        std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", id.c_str(), detail.c_str());
        std::fflush(stdout);
        (ok ? passed : failed) += 1;
    }
};

// --- 1. gradients ---------------------------------------------------------------

void gradients(Tally& tally) {
    const auto t0 = Clock::now();
    std::vector<testing::GradCase> cases = testing::kernel_cases();
    cases.push_back(testing::loss_path_case(0.0));
    cases.push_back(testing::loss_path_case(2.0));
    double worst = 0.0;
    std::string worst_name;
    for (const auto& c : cases) {
        for (std::uint64_t seed = 0; seed < kGradSeeds; ++seed) {
            const double err = testing::run_case(c, seed);
            if (!(err <= worst)) {
                worst = err;
                worst_name = c.name;
            }
        }
    }
    const double elapsed = seconds_since(t0);
    tally.report(worst <= kGradTol && elapsed <= kGradSeconds, "1 gradient correctness",
                 fmt::format("{} cases x {} seeds, worst relative error {:.3g} ({}) <= {:g}, "
                             "{:.1f} s <= {:g} s",
                             cases.size(), kGradSeeds, worst, worst_name, kGradTol, elapsed,
                             kGradSeconds));
}

// --- 2. Pareto solver -----------------------------------------------------------

std::vector<double> normal_vec(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

std::vector<double> simplex_point(std::mt19937_64& rng, std::size_t n) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> v(n);
    for (double& x : v) x = e(rng);
    const double s = std::accumulate(v.begin(), v.end(), 0.0);
    for (double& x : v) x /= s;
    return v;
}

double combined_sq(const std::vector<std::vector<double>>& g, const std::vector<double>& w) {
    double acc = 0.0;
    for (std::size_t k = 0; k < g[0].size(); ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) s += w[i] * g[i][k];
        acc += s * s;
    }
    return acc;
}

void pareto(Tally& tally) {
    std::mt19937_64 rng(2);
    double worst_cf = 0.0, worst_simplex = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t dim = 1 + trial % 17;
        const auto g1 = normal_vec(rng, dim);
        const auto g2 = normal_vec(rng, dim);
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            num += (g2[k] - g1[k]) * g2[k];
            den += (g1[k] - g2[k]) * (g1[k] - g2[k]);
        }
        const double expect = den == 0.0 ? 0.5 : std::clamp(num / den, 0.0, 1.0);
        const auto w = min_norm_weights({g1, g2});
        worst_cf = std::max({worst_cf, std::abs(w[0] - expect), std::abs(w[1] - (1.0 - expect))});
    }
    tally.report(worst_cf <= kClosedFormTol, "2a Pareto closed form",
                 fmt::format("100 pairs, worst deviation {:.3g} <= {:g}", worst_cf,
                             kClosedFormTol));

    // Local optimality is judged on the squared norm, which the solver
    // minimises to a duality gap of 1e-8.
    const double gap = MinNormOptions{}.gap_tolerance;
    int beaten = 0;
    bool nonneg = true;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + trial % 5;
        const std::size_t dim = 1 + (trial * 7) % 29;
        std::vector<std::vector<double>> g;
        for (std::size_t i = 0; i < n; ++i) g.push_back(normal_vec(rng, dim));
        const auto w = min_norm_weights(g);
        double total = 0.0;
        for (double v : w) {
            nonneg = nonneg && v >= 0.0;
            total += v;
        }
        worst_simplex = std::max(worst_simplex, std::abs(total - 1.0));
        const double best = combined_sq(g, w);
        for (int k = 0; k < kSpotChecks; ++k)
            if (combined_sq(g, simplex_point(rng, n)) < best - gap) ++beaten;
    }
    tally.report(nonneg && worst_simplex <= kSimplexTol, "2b Pareto simplex",
                 fmt::format("20 problems, all weights >= 0: {}, worst |sum - 1| {:.3g} <= {:g}",
                             nonneg, worst_simplex, kSimplexTol));
    tally.report(beaten == 0, "2c Pareto local optimality",
                 fmt::format("{} of {} random simplex points beat the solution", beaten,
                             20 * kSpotChecks));
}

// --- 3. LWR ---------------------------------------------------------------------

void lwr_checks(Tally& tally) {
    bool uniform_zero = true;
    for (std::size_t n = 1; n <= 8; ++n)
        uniform_zero = uniform_zero && lwr(std::vector<double>(n, 1.0 / n), 2.0) == 0.0;
    std::mt19937_64 rng(3);
    double smallest = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 1000; ++trial)
        smallest = std::min(smallest, lwr(simplex_point(rng, 3), 2.0));
    const double corner = lwr(std::vector<double>{1.0, 0.0, 0.0}, 2.0);
    tally.report(uniform_zero && smallest > kLwrPositive && corner == 6.0, "3 LWR",
                 fmt::format("zero at uniform n=1..8: {}, min over 1000 random points {:.3g} > "
                             "{:g}, n=3 corner {}",
                             uniform_zero, smallest, kLwrPositive, corner));
}

// --- 4. matcher -----------------------------------------------------------------

int brute_force(const std::vector<std::vector<bool>>& adj, std::size_t r, std::vector<bool>& used) {
    if (r == adj.size()) return 0;
    int best = brute_force(adj, r + 1, used);
    for (std::size_t e = 0; e < used.size(); ++e) {
        if (used[e] || !adj[r][e]) continue;
        used[e] = true;
        best = std::max(best, 1 + brute_force(adj, r + 1, used));
        used[e] = false;
    }
    return best;
}

void matcher(Tally& tally) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> count(0, 6), pitch(60, 62);
    std::uniform_real_distribution<double> onset(0.0, 0.4), len(0.05, 0.6);
    const auto notes = [&](int n) {
        std::vector<NoteEvent> out;
        for (int i = 0; i < n; ++i) {
            const double on = onset(rng);
            out.push_back({pitch(rng), on, on + len(rng)});
        }
        return out;
    };
    int mismatches = 0;
    for (int trial = 0; trial < kMatcherInstances; ++trial) {
        const auto ref = notes(count(rng));
        const auto est = notes(count(rng));
        for (bool with_offset : {false, true}) {
            std::vector<std::vector<bool>> adj(ref.size(), std::vector<bool>(est.size()));
            for (std::size_t r = 0; r < ref.size(); ++r) {
                for (std::size_t e = 0; e < est.size(); ++e) {
                    bool ok = ref[r].pitch == est[e].pitch &&
                              std::abs(ref[r].onset - est[e].onset) <= 0.05;
                    if (with_offset)
                        ok = ok && std::abs(ref[r].offset - est[e].offset) <=
                                       std::max(0.05, 0.2 * (ref[r].offset - ref[r].onset));
                    adj[r][e] = ok;
                }
            }
            std::vector<bool> used(est.size(), false);
            const int oracle = brute_force(adj, 0, used);
            const auto pr = with_offset ? note_onset_offset_f1(est, ref) : note_onset_f1(est, ref);
            if (pr.tp != oracle) ++mismatches;
        }
    }
    tally.report(mismatches == 0, "4a matcher vs exhaustive enumeration",
                 fmt::format("{} instances x 2 criteria, {} mismatches", kMatcherInstances,
                             mismatches));
    const bool short_note = note_onset_offset_f1({{60, 0.0, 0.14}}, {{60, 0.0, 0.1}}).f1 == 1.0;
    const bool long_note = note_onset_offset_f1({{60, 0.0, 1.3}}, {{60, 0.0, 1.0}}).f1 == 0.0;
    tally.report(short_note && long_note, "4b offset tolerance edges",
                 fmt::format("0.04 s late on 0.1 s note matches: {}, 0.3 s late on 1 s note "
                             "rejected: {}",
                             short_note, long_note));
}

// --- 5. codec roundtrip ---------------------------------------------------------

void roundtrip(Tally& tally) {
    constexpr double fr = 31.25;
    constexpr int frames = 250;
    constexpr int gap = 2;
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> pitch(kMinPitch, kMaxPitch), count(1, 12);
    std::uniform_real_distribution<double> len(0.1, 1.0), start(0.0, frames / fr - 1.2);
    int bad = 0;
    long notes_total = 0;
    for (int rep = 0; rep < kRoundtripSets; ++rep) {
        std::vector<NoteEvent> ref;
        const int target = count(rng);
        for (int tries = 0; tries < 200 && static_cast<int>(ref.size()) < target; ++tries) {
            NoteEvent n{pitch(rng), 0.0, 0.0};
            n.onset = start(rng);
            n.offset = n.onset + len(rng);
            const double pad = (gap + 1) / fr;
            const bool clash = std::any_of(ref.begin(), ref.end(), [&](const NoteEvent& o) {
                return o.pitch == n.pitch && n.onset < o.offset + pad && o.onset < n.offset + pad;
            });
            if (!clash) ref.push_back(n);
        }
        notes_total += static_cast<long>(ref.size());
        auto est = decode_notes(labels_to_prediction(encode_frames(ref, frames, fr)), 0.5, fr);
        // Quantised onsets can tie across keys, so compare in key-major order.
        const auto by_key = [](const NoteEvent& a, const NoteEvent& b) {
            return a.pitch != b.pitch ? a.pitch < b.pitch : a.onset < b.onset;
        };
        std::sort(ref.begin(), ref.end(), by_key);
        std::sort(est.begin(), est.end(), by_key);
        bool ok = est.size() == ref.size();
        for (std::size_t i = 0; ok && i < ref.size(); ++i)
            ok = est[i].pitch == ref[i].pitch &&
                 std::abs(est[i].onset - ref[i].onset) <= 1.0 / fr + 1e-9 &&
                 std::abs(est[i].offset - ref[i].offset) <= 1.0 / fr + 1e-9;
        if (!ok) ++bad;
    }
    tally.report(bad == 0, "5 codec roundtrip",
                 fmt::format("{} note sets ({} notes), {} with a count, pitch or >1 frame "
                             "boundary error",
                             kRoundtripSets, notes_total, bad));
}

// --- 6-8. toy experiments -------------------------------------------------------

struct Corpus {
    CorpusManifest train, val, test;
};

CorpusManifest mixed(const fs::path& dir, const std::string& name, int count,
                     std::uint64_t seed) {
    NoteGenConfig sp;
    sp.duration_s = kClipSeconds;
    sp.pitch_range = {48, 84};
    NoteGenConfig mp = sp;
    mp.kind = CorpusKind::MP;
    mp.polyphony_max = 3;
    // Pools larger than needed so the mix can hit its frame share.
    const int pool = count / 2 + count / 4 + 2;
    const auto sp_m = synth_corpus(dir / (name + "_sp"), sp, pool, seed);
    const auto mp_m = synth_corpus(dir / (name + "_mp"), mp, pool, seed + 1);
    auto m = mix_manifest(sp_m, mp_m, kMpShare, seed, static_cast<std::size_t>(count));
    write_manifest(dir / (name + ".jsonl"), m);
    return m;
}

struct RunOutcome {
    std::string name;
    double seconds = 0.0;
    long steps = 0;
    TrainResult result;
    MetricReport clean;  // test set, threshold 0.5
    MetricReport noisy;  // test set at kNoisySnr, threshold 0.5
    std::vector<SweepRow> sweep;
    fs::path dir;
};

std::vector<Prediction> predict_all(const TrainResult& r, const std::vector<TrainingItem>& items) {
    std::vector<Prediction> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(predict(it.mel, r.best, r.model_config));
    return out;
}

MetricReport pooled(const std::vector<Prediction>& preds, const std::vector<TrainingItem>& items,
                    double threshold) {
    MetricAccumulator acc;
    for (std::size_t i = 0; i < items.size(); ++i)
        acc.add(preds[i], items[i].notes, threshold, items[i].mel.frame_rate);
    return acc.report();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class ToyBench {
public:
    ToyBench(fs::path work, int steps) : work_(std::move(work)), steps_(steps) {}

    void prepare() {
        fs::remove_all(work_);
        fs::create_directories(work_);
        const auto t0 = Clock::now();
        corpus_.train = mixed(work_ / "corpus", "train", kTrainClips, 100);
        corpus_.val = mixed(work_ / "corpus", "val", 10, 200);
        corpus_.test = mixed(work_ / "corpus", "test", kTestClips, 300);
        train_ = load_items(corpus_.train);
        val_ = load_items(corpus_.val);
        test_ = load_items(corpus_.test);
        noisy_test_ = load_items(corpus_.test, {}, kNoisySnr, 7);
        spdlog::info("corpus ready in {:.1f} s: train {} (MP share {:.3f}), test {} (MP share "
                     "{:.3f}), val {}",
                     seconds_since(t0), train_.size(), corpus_.train.mp_frame_share(),
                     test_.size(), corpus_.test.mp_frame_share(), val_.size());
    }

    RunOutcome run(const std::string& name, LossMode mode, std::uint64_t seed, bool single) {
        TrainConfig t;
        t.batch_size = 4;
        t.clip_seconds = 2.048;
        t.lr0 = 3e-3;
        t.max_steps = steps_;
        t.val_every = 500;
        t.seed = seed;
        t.loss_mode = mode;
        ModelConfig m = ModelConfig::small();
        RunOutcome out;
        out.name = name;
        out.dir = work_ / "runs" / name;
        const auto t0 = Clock::now();
        out.result = single ? single_task_train(train_, val_, t, m, out.dir)
                            : train(train_, val_, t, m, LossConfig{}, out.dir);
        out.seconds = seconds_since(t0);
        out.steps = steps_;
        const auto clean = predict_all(out.result, test_);
        const auto noisy = predict_all(out.result, noisy_test_);
        out.clean = pooled(clean, test_, 0.5);
        out.noisy = pooled(noisy, noisy_test_, 0.5);
        std::string csv = report_csv_header();
        for (double th : default_thresholds()) {
            out.sweep.push_back({th, pooled(clean, test_, th)});
            csv += report_csv_row("test", th, out.sweep.back().report);
        }
        std::ofstream(out.dir / "metrics.csv", std::ios::binary) << csv;
        spdlog::info("{}: {:.0f} s, best step {}, test pitch F1 {:.4f}, onset F1 {:.4f}, vfa {:.4f} "
                     "-> {:.4f} at {} dB",
                     name, out.seconds, out.result.best_step, out.clean.pitch.f1,
                     out.clean.onset.f1, out.clean.vfa.value_or(-1.0),
                     out.noisy.vfa.value_or(-1.0), kNoisySnr);
        return out;
    }

    const std::vector<TrainingItem>& test() const { return test_; }
    const Corpus& corpus() const { return corpus_; }

private:
    fs::path work_;
    int steps_;
    Corpus corpus_;
    std::vector<TrainingItem> train_, val_, test_, noisy_test_;
};

double mean_of(const std::vector<RunOutcome>& runs, double (*get)(const RunOutcome&)) {
    double s = 0.0;
    for (const auto& r : runs) s += get(r);
    return s / static_cast<double>(runs.size());
}

std::string listing(const std::vector<RunOutcome>& runs, double (*get)(const RunOutcome&)) {
    std::string s;
    for (const auto& r : runs) s += fmt::format("{}{:.4f}", s.empty() ? "" : "/", get(r));
    return s;
}

void toy(Tally& tally, const fs::path& work, int steps) {
    ToyBench bench(work, steps);
    bench.prepare();
    const auto& c = bench.corpus();
    const bool corpus_ok =
        static_cast<int>(c.train.items.size()) == kTrainClips &&
        static_cast<int>(c.test.items.size()) == kTestClips &&
        std::abs(c.train.mp_frame_share() - kMpShare) <= 0.02 &&
        std::abs(c.test.mp_frame_share() - kMpShare) <= 0.02;
    tally.report(corpus_ok, "6 toy corpus",
                 fmt::format("{} train / {} test clips of {:g} s, MP frame share {:.3f} / {:.3f}",
                             c.train.items.size(), c.test.items.size(), kClipSeconds,
                             c.train.mp_frame_share(), c.test.mp_frame_share()));

    std::vector<RunOutcome> pml, naive;
    for (int s = 0; s < kSeeds; ++s) {
        pml.push_back(bench.run(fmt::format("pml_lwr_seed{}", s), LossMode::pml_lwr, s, false));
        naive.push_back(
            bench.run(fmt::format("naive_joint_seed{}", s), LossMode::naive_joint, s, false));
    }
    const RunOutcome single = bench.run("single_task_seed0", LossMode::naive_joint, 0, true);

    std::vector<const RunOutcome*> all;
    for (const auto& r : pml) all.push_back(&r);
    for (const auto& r : naive) all.push_back(&r);
    all.push_back(&single);
    double slowest = 0.0;
    long most_steps = 0;
    for (const auto* r : all) {
        slowest = std::max(slowest, r->seconds);
        most_steps = std::max(most_steps, r->steps);
    }
    tally.report(slowest <= kRunSeconds && most_steps <= kMaxSteps, "6 toy budget",
                 fmt::format("{} runs, {} steps each <= {}, slowest {:.0f} s <= {:g} s",
                             all.size(), most_steps, kMaxSteps, slowest, kRunSeconds));

    const auto pitch_f1 = [](const RunOutcome& r) { return r.clean.pitch.f1; };
    const auto onset_f1 = [](const RunOutcome& r) { return r.clean.onset.f1; };
    const double pml_pitch = mean_of(pml, pitch_f1);
    const double naive_pitch = mean_of(naive, pitch_f1);
    tally.report(pml_pitch >= kPitchF1Floor, "6a pml_lwr frame pitch F1",
                 fmt::format("mean {:.4f} over seeds {} >= {:g}", pml_pitch,
                             listing(pml, pitch_f1), kPitchF1Floor));
    tally.report(pml_pitch >= naive_pitch - kPitchF1Slack, "6b pml_lwr vs naive_joint pitch F1",
                 fmt::format("pml_lwr {:.4f} >= naive_joint {:.4f} ({}) - {:g}", pml_pitch,
                             naive_pitch, listing(naive, pitch_f1), kPitchF1Slack));
    const double pml_onset = mean_of(pml, onset_f1);
    const double naive_onset = mean_of(naive, onset_f1);
    const double single_onset = single.clean.onset.f1;
    tally.report(std::min(pml_onset, naive_onset) >= single_onset + kOnsetMargin,
                 "6b joint vs single-task onset F1",
                 fmt::format("pml_lwr {:.4f} ({}), naive_joint {:.4f} ({}), single-task {:.4f}; "
                             "margin required {:g}",
                             pml_onset, listing(pml, onset_f1), naive_onset,
                             listing(naive, onset_f1), single_onset, kOnsetMargin));

    double widest = 0.0;
    std::string ranges;
    for (const auto& r : pml) {
        double lo = 1.0, hi = 0.0;
        for (const auto& row : r.sweep) {
            lo = std::min(lo, row.report.pitch.f1);
            hi = std::max(hi, row.report.pitch.f1);
        }
        widest = std::max(widest, hi - lo);
        ranges += fmt::format("{}{:.4f}", ranges.empty() ? "" : "/", hi - lo);
    }
    tally.report(widest <= kSweepRange, "6c threshold sweep robustness",
                 fmt::format("pml_lwr pitch F1 range over 0.1..0.9 per seed {} <= {:g}", ranges,
                             kSweepRange));

    const auto vfa_clean = [](const RunOutcome& r) { return r.clean.vfa.value_or(NAN); };
    const auto vfa_rise = [](const RunOutcome& r) {
        return r.noisy.vfa.value_or(NAN) - r.clean.vfa.value_or(NAN);
    };
    const double pml_clean = mean_of(pml, vfa_clean);
    const double pml_rise = mean_of(pml, vfa_rise);
    const double naive_rise = mean_of(naive, vfa_rise);
    tally.report(pml_clean <= kCleanVfa, "7a clean VFA",
                 fmt::format("pml_lwr mean {:.4f} ({}) <= {:g}", pml_clean,
                             listing(pml, vfa_clean), kCleanVfa));
    tally.report(pml_rise < naive_rise, "7b VFA increase at 50 dB",
                 fmt::format("pml_lwr {:.5f} ({}) < naive_joint {:.5f} ({})", pml_rise,
                             listing(pml, vfa_rise), naive_rise, listing(naive, vfa_rise)));

    const RunOutcome again = bench.run("pml_lwr_seed0_rerun", LossMode::pml_lwr, 0, false);
    std::vector<std::string> differing;
    for (const char* f : {"best.ckpt", "last.ckpt", "loss.csv", "weights.csv", "validation.csv",
                          "metrics.csv", "config.json"}) {
        const std::string a = slurp(pml[0].dir / f);
        const std::string b = slurp(again.dir / f);
        if (a.empty() || a != b) differing.push_back(f);
    }
    std::string diff_list;
    for (const auto& f : differing) diff_list += (diff_list.empty() ? "" : ", ") + f;
    tally.report(differing.empty(), "8 determinism",
                 differing.empty()
                     ? std::string("two pml_lwr seed 0 runs: checkpoints and CSVs byte-identical")
                     : "differing files: " + diff_list);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    fs::path work = fs::temp_directory_path() / "jepoo_acceptance";
    int steps = 5000;
    bool skip_toy = false;
    app.add_option("--work", work, "scratch directory for the toy experiments");
    app.add_option("--steps", steps, "training steps per toy run")->check(CLI::Range(0, kMaxSteps));
    app.add_flag("--skip-toy", skip_toy, "only run criteria 1-5");
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::info);
    spdlog::set_pattern("[%T] %v");

    Tally tally;
    try {
        gradients(tally);
        pareto(tally);
        lwr_checks(tally);
        matcher(tally);
        roundtrip(tally);
        if (!skip_toy) toy(tally, work, steps);
    } catch (const std::exception& e) {
        tally.report(false, "harness", e.what());
    }
    std::printf("%d passed, %d failed\n", tally.passed, tally.failed);
    return tally.failed == 0 ? 0 : 1;
}
