#include "jepoo/labelcodec.hpp"

#include "jepoo/error.hpp"

#include <json.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

namespace jepoo {

void validate_note(const NoteEvent& note) {
    if (note.pitch < kMinPitch || note.pitch > kMaxPitch)
        throw RangeError(fmt::format("pitch {} outside [{}, {}]", note.pitch, kMinPitch, kMaxPitch));
    if (!std::isfinite(note.onset) || !std::isfinite(note.offset) || note.onset < 0.0 ||
        note.offset <= note.onset)
        throw MalformedNoteError(
            fmt::format("note {} has onset {} and offset {}", note.pitch, note.onset, note.offset));
}

FrameLabels FrameLabels::zeros(int frames) {
    FrameLabels l;
    l.pitch = ByteMatrix::Zero(frames, kNumKeys);
    l.onset = ByteMatrix::Zero(frames, kNumKeys);
    l.offset = ByteMatrix::Zero(frames, kNumKeys);
    return l;
}

FrameLabels FrameLabels::slice(int start, int count) const {
    FrameLabels out = zeros(count);
    const int avail = std::clamp(frames() - start, 0, count);
    if (avail > 0) {
        out.pitch.topRows(avail) = pitch.middleRows(start, avail);
        out.onset.topRows(avail) = onset.middleRows(start, avail);
        out.offset.topRows(avail) = offset.middleRows(start, avail);
    }
    return out;
}

FrameLabels encode_frames(const std::vector<NoteEvent>& notes, int frames, double frame_rate) {
    FrameLabels labels = FrameLabels::zeros(frames);
    for (const auto& note : notes) {
        validate_note(note);
        const int first = static_cast<int>(std::floor(note.onset * frame_rate));
        const int last = static_cast<int>(std::ceil(note.offset * frame_rate)) - 1;
        const int key = note.pitch - kMinPitch;
        const int lo = std::max(first, 0);
        const int hi = std::min(last, frames - 1);
        for (int t = lo; t <= hi; ++t) labels.pitch(t, key) = 1;
        if (first >= 0 && first < frames) labels.onset(first, key) = 1;
        if (last >= 0 && last < frames) labels.offset(last, key) = 1;
    }
    return labels;
}

std::vector<NoteEvent> decode_notes(const Prediction& pred, double threshold, double frame_rate) {
    std::vector<NoteEvent> notes;
    const int frames = pred.frames();
    const bool gated = pred.has_boundaries();
    for (int key = 0; key < pred.pitch.cols(); ++key) {
        int t = 0;
        while (t < frames) {
            const bool opens = gated ? pred.onset(t, key) > threshold
                                     : pred.pitch(t, key) > threshold;
            if (!opens) {
                ++t;
                continue;
            }
            int end = frames;
            for (int u = t + 1; u < frames; ++u) {
                if (pred.pitch(u, key) <= threshold) {
                    end = u;
                    break;
                }
                if (gated && pred.onset(u, key) > threshold &&
                    pred.onset(u - 1, key) <= threshold) {
                    end = u; // a fresh onset starts the next note
                    break;
                }
                if (gated && pred.offset(u, key) > threshold) {
                    end = u + 1;
                    break;
                }
            }
            notes.push_back({key + kMinPitch, t / frame_rate, end / frame_rate});
            t = end;
        }
    }
    sort_notes(notes);
    return notes;
}

Prediction labels_to_prediction(const FrameLabels& labels, double low, double high) {
    const auto map = [&](const ByteMatrix& m) -> RowMatrix {
        return m.cast<double>().unaryExpr([&](double v) { return v > 0.5 ? high : low; });
    };
    return {map(labels.pitch), map(labels.onset), map(labels.offset)};
}

void sort_notes(std::vector<NoteEvent>& notes) {
    std::sort(notes.begin(), notes.end(), [](const NoteEvent& a, const NoteEvent& b) {
        return std::tie(a.onset, a.pitch, a.offset) < std::tie(b.onset, b.pitch, b.offset);
    });
}

std::string notes_to_jsonl(const std::vector<NoteEvent>& notes) {
    std::string out;
    for (const auto& n : notes)
        out += fmt::format("{{\"pitch\":{},\"onset\":{:.6f},\"offset\":{:.6f}}}\n", n.pitch,
                           n.onset, n.offset);
    return out;
}

std::vector<NoteEvent> notes_from_jsonl(const std::string& text) {
    std::vector<NoteEvent> notes;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            NoteEvent n{j.at("pitch").get<int>(), j.at("onset").get<double>(),
                        j.at("offset").get<double>()};
            validate_note(n);
            notes.push_back(n);
        } catch (const nlohmann::json::exception& e) {
            throw IngestionError(fmt::format("notes line {}: {}", lineno, e.what()));
        }
    }
    return notes;
}

void write_notes(const std::filesystem::path& path, const std::vector<NoteEvent>& notes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path.string() + " for writing");
    os << notes_to_jsonl(notes);
}

std::vector<NoteEvent> read_notes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestionError("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return notes_from_jsonl(ss.str());
    } catch (const InputError& e) {
        throw IngestionError(path.string() + ": " + e.what());
    }
}

} // namespace jepoo
