#pragma once

#include "jepoo/frontend.hpp"
#include "jepoo/labelcodec.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace jepoo {

enum class CorpusKind { SP, MP };

const char* kind_name(CorpusKind k);
CorpusKind parse_kind(const std::string& s);

struct NoteGenConfig {
    double duration_s = 10.0;
    CorpusKind kind = CorpusKind::SP;
    std::pair<double, double> tempo_range{80.0, 160.0}; // BPM
    std::pair<int, int> pitch_range{kMinPitch, kMaxPitch};
    int polyphony_max = 1;
    double rest_probability = 0.3;

    void validate() const;
};

nlohmann::json to_json(const NoteGenConfig& c);

// Random-walk melody (SP) or chord events (MP). Note lengths lie in
// [0.1, 1.0] s and every note ends by duration_s. SP notes never overlap;
// MP events hold 1..polyphony_max notes.
std::vector<NoteEvent> gen_notes(std::uint64_t seed, const NoteGenConfig& cfg);

// Additive synthesis: sum_k 0.5^k sin(2 pi k f0 t), k = 1..partials, with a
// 10 ms linear attack and release, peak-normalised to 0.8. The clip spans
// duration_s, or the last offset when duration_s <= 0.
AudioClip render_audio(const std::vector<NoteEvent>& notes, double sample_rate = 16000.0,
                       int partials = 4, double duration_s = 0.0);

// Largest number of notes sounding at one instant.
int max_polyphony(const std::vector<NoteEvent>& notes);

struct ManifestItem {
    std::filesystem::path audio; // absolute after reading
    std::filesystem::path notes;
    CorpusKind kind = CorpusKind::SP;
    long frames = 0; // spectrogram frames at the default framing
};

struct CorpusManifest {
    std::vector<ManifestItem> items;
    std::uint64_t seed = 0;
    nlohmann::json params = nlohmann::json::object();

    long frames_of(CorpusKind k) const;
    double mp_frame_share() const;
};

// JSONL: a header line {"header": {seed, params}} then one item per line
// with audio/notes paths relative to the manifest's directory.
void write_manifest(const std::filesystem::path& path, const CorpusManifest& m);
CorpusManifest read_manifest(const std::filesystem::path& path);

// Renders `items` clips into out_dir (WAV + notes JSONL) and writes
// out_dir/manifest.jsonl.
CorpusManifest synth_corpus(const std::filesystem::path& out_dir, const NoteGenConfig& gen,
                            int items, std::uint64_t seed);

// Draws items without replacement so that MP items hold `proportion_mp` of
// the frames (within 2%). `total_items` caps the count; by default as many
// items as the pools allow are used.
CorpusManifest mix_manifest(const CorpusManifest& sp, const CorpusManifest& mp,
                            double proportion_mp, std::uint64_t seed,
                            std::optional<std::size_t> total_items = std::nullopt);

// Derives independent per-item seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

} // namespace jepoo
