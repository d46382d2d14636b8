#include "jepoo/datagen.hpp"

#include "jepoo/error.hpp"
#include "jepoo/wav.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

namespace jepoo {

namespace {

constexpr double kMinNote = 0.1;
constexpr double kMaxNote = 1.0;
constexpr double kRamp = 0.010;
constexpr double kPeak = 0.8;

double pick_length(std::mt19937_64& rng, double beat) {
    static constexpr double kBeats[] = {0.5, 1.0, 1.5, 2.0};
    std::uniform_int_distribution<int> d(0, 3);
    return std::clamp(beat * kBeats[d(rng)], kMinNote, kMaxNote);
}

int walk(std::mt19937_64& rng, int pitch, int lo, int hi, int max_step) {
    std::uniform_int_distribution<int> step(-max_step, max_step);
    int next = pitch + step(rng);
    if (next < lo) next = lo + (lo - next);
    if (next > hi) next = hi - (next - hi);
    return std::clamp(next, lo, hi);
}

} // namespace

const char* kind_name(CorpusKind k) { return k == CorpusKind::SP ? "SP" : "MP"; }

CorpusKind parse_kind(const std::string& s) {
    if (s == "SP" || s == "sp") return CorpusKind::SP;
    if (s == "MP" || s == "mp") return CorpusKind::MP;
    throw ConfigError("unknown corpus kind '" + s + "'");
}

void NoteGenConfig::validate() const {
    if (!(duration_s > 0.0)) throw ConfigError("note generation needs a positive duration");
    if (!(tempo_range.first > 0.0) || tempo_range.second < tempo_range.first)
        throw ConfigError("invalid tempo range");
    if (pitch_range.first < kMinPitch || pitch_range.second > kMaxPitch ||
        pitch_range.first > pitch_range.second)
        throw ConfigError("pitch range must lie within [21, 108]");
    if (polyphony_max < 1) throw ConfigError("polyphony_max must be >= 1");
    if (kind == CorpusKind::SP && polyphony_max != 1)
        throw ConfigError("single-pitch corpora require polyphony_max = 1");
    if (kind == CorpusKind::MP && polyphony_max > pitch_range.second - pitch_range.first + 1)
        throw ConfigError("polyphony_max exceeds the pitch range");
    if (rest_probability < 0.0 || rest_probability > 1.0)
        throw ConfigError("rest_probability must lie in [0, 1]");
}

nlohmann::json to_json(const NoteGenConfig& c) {
    return {{"duration_s", c.duration_s},
            {"kind", kind_name(c.kind)},
            {"tempo_range", {c.tempo_range.first, c.tempo_range.second}},
            {"pitch_range", {c.pitch_range.first, c.pitch_range.second}},
            {"polyphony_max", c.polyphony_max},
            {"rest_probability", c.rest_probability}};
}

std::vector<NoteEvent> gen_notes(std::uint64_t seed, const NoteGenConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> bpm(cfg.tempo_range.first, cfg.tempo_range.second);
    const double beat = 60.0 / bpm(rng);
    const auto [lo, hi] = cfg.pitch_range;
    int pitch = std::uniform_int_distribution<int>(lo, hi)(rng);

    std::vector<NoteEvent> notes;
    double cursor = std::uniform_real_distribution<double>(0.0, 0.3)(rng);
    while (cursor + kMinNote <= cfg.duration_s) {
        pitch = walk(rng, pitch, lo, hi, 4);
        double event_end = cursor;
        if (cfg.kind == CorpusKind::SP) {
            const double end = std::min(cursor + pick_length(rng, beat), cfg.duration_s);
            if (end - cursor < kMinNote) break;
            notes.push_back({pitch, cursor, end});
            event_end = end;
        } else {
            const int k = std::uniform_int_distribution<int>(1, cfg.polyphony_max)(rng);
            std::set<int> chord{pitch};
            std::uniform_int_distribution<int> spread(std::max(lo, pitch - 12),
                                                      std::min(hi, pitch + 12));
            while (static_cast<int>(chord.size()) < k) chord.insert(spread(rng));
            for (int p : chord) {
                const double end = std::min(cursor + pick_length(rng, beat), cfg.duration_s);
                if (end - cursor < kMinNote) continue;
                notes.push_back({p, cursor, end});
                event_end = std::max(event_end, end);
            }
            if (event_end == cursor) break;
        }
        cursor = event_end;
        if (unit(rng) < cfg.rest_probability) cursor += pick_length(rng, beat);
    }
    sort_notes(notes);
    return notes;
}

AudioClip render_audio(const std::vector<NoteEvent>& notes, double sample_rate, int partials,
                       double duration_s) {
    if (!(sample_rate > 0.0)) throw InputError("sample rate must be positive");
    double end = duration_s;
    if (end <= 0.0)
        for (const auto& n : notes) end = std::max(end, n.offset);
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.assign(static_cast<std::size_t>(std::ceil(end * sample_rate)), 0.0);
    const double nyquist = sample_rate / 2.0;
    for (const auto& n : notes) {
        validate_note(n);
        const double f0 = 440.0 * std::pow(2.0, (n.pitch - 69) / 12.0);
        const auto first = static_cast<std::size_t>(std::ceil(n.onset * sample_rate));
        const auto last = std::min(clip.samples.size(),
                                   static_cast<std::size_t>(std::ceil(n.offset * sample_rate)));
        const double ramp = std::min(kRamp, (n.offset - n.onset) / 2.0);
        for (std::size_t i = first; i < last; ++i) {
            const double t = i / sample_rate;
            const double env =
                std::min({1.0, (t - n.onset) / ramp, (n.offset - t) / ramp});
            const double local = t - n.onset;
            double v = 0.0, amp = 1.0;
            for (int k = 1; k <= partials; ++k) {
                amp *= 0.5;
                if (k * f0 >= nyquist) break;
                v += amp * std::sin(2.0 * std::numbers::pi * k * f0 * local);
            }
            clip.samples[i] += std::max(env, 0.0) * v;
        }
    }
    double peak = 0.0;
    for (double s : clip.samples) peak = std::max(peak, std::abs(s));
    if (peak > 0.0)
        for (double& s : clip.samples) s *= kPeak / peak;
    return clip;
}

int max_polyphony(const std::vector<NoteEvent>& notes) {
    std::vector<std::pair<double, int>> events;
    for (const auto& n : notes) {
        events.emplace_back(n.onset, 1);
        events.emplace_back(n.offset, -1);
    }
    // Offsets sort before onsets at equal times: touching notes do not overlap.
    std::sort(events.begin(), events.end());
    int cur = 0, best = 0;
    for (const auto& [t, d] : events) best = std::max(best, cur += d);
    return best;
}

long CorpusManifest::frames_of(CorpusKind k) const {
    long n = 0;
    for (const auto& it : items)
        if (it.kind == k) n += it.frames;
    return n;
}

double CorpusManifest::mp_frame_share() const {
    const long mp = frames_of(CorpusKind::MP), sp = frames_of(CorpusKind::SP);
    return mp + sp > 0 ? static_cast<double>(mp) / static_cast<double>(mp + sp) : 0.0;
}

void write_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
    const auto base = std::filesystem::absolute(path).parent_path();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path.string() + " for writing");
    os << nlohmann::json{{"header", {{"seed", m.seed}, {"params", m.params}}}}.dump() << '\n';
    for (const auto& it : m.items) {
        const auto rel = [&](const std::filesystem::path& p) {
            return std::filesystem::absolute(p).lexically_relative(base).generic_string();
        };
        os << nlohmann::json{{"audio", rel(it.audio)},
                             {"notes", rel(it.notes)},
                             {"kind", kind_name(it.kind)},
                             {"frames", it.frames}}
                  .dump()
           << '\n';
    }
}

CorpusManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestionError("cannot open manifest " + path.string());
    const auto base = std::filesystem::absolute(path).parent_path();
    CorpusManifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            if (j.contains("header")) {
                m.seed = j["header"].value("seed", std::uint64_t{0});
                m.params = j["header"].value("params", nlohmann::json::object());
                continue;
            }
            ManifestItem it;
            it.audio = (base / j.at("audio").get<std::string>()).lexically_normal();
            it.notes = (base / j.at("notes").get<std::string>()).lexically_normal();
            it.kind = parse_kind(j.at("kind").get<std::string>());
            it.frames = j.at("frames").get<long>();
            m.items.push_back(std::move(it));
        } catch (const nlohmann::json::exception& e) {
            throw IngestionError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
        }
    }
    return m;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 finaliser over the combined value
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

CorpusManifest synth_corpus(const std::filesystem::path& out_dir, const NoteGenConfig& gen,
                            int items, std::uint64_t seed) {
    gen.validate();
    if (items < 0) throw ConfigError("item count must be non-negative");
    std::filesystem::create_directories(out_dir);
    const MelConfig mel;
    CorpusManifest m;
    m.seed = seed;
    m.params = to_json(gen);
    for (int i = 0; i < items; ++i) {
        const auto notes = gen_notes(derive_seed(seed, static_cast<std::uint64_t>(i)), gen);
        const auto clip = render_audio(notes, 16000.0, 4, gen.duration_s);
        const std::string stem = fmt::format("{}_{:05d}", kind_name(gen.kind), i);
        ManifestItem it;
        it.audio = out_dir / (stem + ".wav");
        it.notes = out_dir / (stem + ".jsonl");
        it.kind = gen.kind;
        it.frames = frame_count(clip.samples.size(), mel.window, mel.hop);
        write_wav(it.audio, clip);
        write_notes(it.notes, notes);
        m.items.push_back(std::move(it));
    }
    write_manifest(out_dir / "manifest.jsonl", m);
    return m;
}

constexpr double kShareTolerance = 0.02;

CorpusManifest mix_manifest(const CorpusManifest& sp, const CorpusManifest& mp,
                            double proportion_mp, std::uint64_t seed,
                            std::optional<std::size_t> total_items) {
    if (!(proportion_mp >= 0.0 && proportion_mp <= 1.0))
        throw ConfigError("MP proportion must lie in [0, 1]");
    if (proportion_mp > 0.0 && mp.items.empty())
        throw InputError("insufficient items: MP pool is empty");
    if (proportion_mp < 1.0 && sp.items.empty())
        throw InputError("insufficient items: SP pool is empty");

    std::mt19937_64 rng(seed);
    auto sp_pool = sp.items;
    auto mp_pool = mp.items;
    std::shuffle(sp_pool.begin(), sp_pool.end(), rng);
    std::shuffle(mp_pool.begin(), mp_pool.end(), rng);

    CorpusManifest out;
    out.seed = seed;
    out.params = {{"proportion_mp", proportion_mp}};
    std::size_t si = 0, mi = 0;
    long sp_frames = 0, mp_frames = 0;
    const std::size_t cap = total_items.value_or(sp_pool.size() + mp_pool.size());
    // Longest prefix of the greedy draw whose share is within tolerance,
    // else the closest one.
    std::size_t keep = 0;
    double keep_err = 2.0;
    while (out.items.size() < cap) {
        const long total = sp_frames + mp_frames;
        const bool want_mp =
            proportion_mp >= 1.0 ||
            (proportion_mp > 0.0 && static_cast<double>(mp_frames) <= proportion_mp * total);
        auto& pool = want_mp ? mp_pool : sp_pool;
        std::size_t& idx = want_mp ? mi : si;
        if (idx >= pool.size()) break;
        const auto& item = pool[idx++];
        (want_mp ? mp_frames : sp_frames) += item.frames;
        out.items.push_back(item);
        const long now = sp_frames + mp_frames;
        const double err =
            now > 0 ? std::abs(static_cast<double>(mp_frames) / static_cast<double>(now) -
                               proportion_mp)
                    : 1.0;
        if (err <= kShareTolerance || err < keep_err) {
            keep = out.items.size();
            keep_err = std::min(keep_err, err);
        }
    }
    if (!total_items) out.items.resize(keep);
    if (total_items && out.items.size() < *total_items)
        throw InputError(fmt::format("insufficient items: {} requested, {} drawn", *total_items,
                                     out.items.size()));
    if (std::abs(out.mp_frame_share() - proportion_mp) > kShareTolerance)
        throw InputError(fmt::format("insufficient items to reach an MP frame share of {:.2f} "
                                     "(got {:.3f})",
                                     proportion_mp, out.mp_frame_share()));
    return out;
}

} // namespace jepoo
