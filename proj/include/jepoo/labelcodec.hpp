#pragma once

#include "jepoo/matrix.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace jepoo {

inline constexpr int kMinPitch = 21;
inline constexpr int kMaxPitch = 108;
inline constexpr int kNumKeys = kMaxPitch - kMinPitch + 1;

struct NoteEvent {
    int pitch = 60;     // MIDI number
    double onset = 0.0; // seconds
    double offset = 0.0;

    friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

// Throws RangeError / MalformedNoteError when the note violates its invariants.
void validate_note(const NoteEvent& note);

// Per-frame targets, each T x 88.
struct FrameLabels {
    ByteMatrix pitch;
    ByteMatrix onset;
    ByteMatrix offset;

    int frames() const { return static_cast<int>(pitch.rows()); }
    static FrameLabels zeros(int frames);
    // Rows [start, start + count), zero-filled past the end.
    FrameLabels slice(int start, int count) const;
};

// Per-frame probabilities, each T x 88. `onset` and `offset` are empty
// (zero rows) for pitch-only models.
struct Prediction {
    RowMatrix pitch;
    RowMatrix onset;
    RowMatrix offset;

    int frames() const { return static_cast<int>(pitch.rows()); }
    bool has_boundaries() const { return onset.rows() == pitch.rows() && onset.rows() > 0; }
};

// Frame t spans [t / frame_rate, (t + 1) / frame_rate). A note is active in
// every frame whose span intersects [onset, offset); the first such frame
// carries the onset label and the last one the offset label.
FrameLabels encode_frames(const std::vector<NoteEvent>& notes, int frames, double frame_rate);

// Onset-gated segmentation per key. A note opens where p_onset > threshold
// and closes at the first later frame with p_pitch <= threshold or a rising
// p_onset edge (both exclusive), or with p_offset > threshold (inclusive).
// Without boundary heads, notes follow runs of p_pitch > threshold.
std::vector<NoteEvent> decode_notes(const Prediction& pred, double threshold, double frame_rate);

// Maps labels onto idealized probabilities: 1 -> high, 0 -> low.
Prediction labels_to_prediction(const FrameLabels& labels, double low = 0.1, double high = 0.9);

// Sorted by onset, then pitch, then offset.
void sort_notes(std::vector<NoteEvent>& notes);

// JSONL with keys pitch, onset, offset (seconds, six decimals).
std::string notes_to_jsonl(const std::vector<NoteEvent>& notes);
std::vector<NoteEvent> notes_from_jsonl(const std::string& text);
void write_notes(const std::filesystem::path& path, const std::vector<NoteEvent>& notes);
std::vector<NoteEvent> read_notes(const std::filesystem::path& path);

} // namespace jepoo
