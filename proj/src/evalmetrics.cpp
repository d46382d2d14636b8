#include "jepoo/evalmetrics.hpp"

#include "jepoo/error.hpp"

#include <fmt/format.h>

#include <cmath>
#include <functional>

namespace jepoo {

PrecisionRecall PrecisionRecall::from_counts(long tp, long fp, long fn) {
    PrecisionRecall r;
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    r.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    r.f1 = r.precision + r.recall > 0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
    return r;
}

ByteMatrix binarize(const RowMatrix& probs, double threshold) {
    return (probs.array() > threshold).cast<std::uint8_t>();
}

namespace {

void frame_counts(const ByteMatrix& pred, const ByteMatrix& ref, long& tp, long& fp, long& fn) {
    if (pred.rows() != ref.rows() || pred.cols() != ref.cols())
        throw ShapeError(fmt::format("frame matrices differ: {}x{} vs {}x{}", pred.rows(),
                                     pred.cols(), ref.rows(), ref.cols()));
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
        const bool p = pred.data()[i] != 0, r = ref.data()[i] != 0;
        tp += p && r;
        fp += p && !r;
        fn += !p && r;
    }
}

void vfa_counts(const ByteMatrix& pred, const ByteMatrix& ref, long& unvoiced, long& alarms) {
    if (pred.rows() != ref.rows()) throw ShapeError("frame counts differ");
    for (Eigen::Index t = 0; t < ref.rows(); ++t) {
        if ((ref.row(t).array() != 0).any()) continue;
        ++unvoiced;
        alarms += (pred.row(t).array() != 0).any();
    }
}

using Admissible = std::function<bool(const NoteEvent& ref, const NoteEvent& est)>;

long matched_count(const std::vector<NoteEvent>& pred, const std::vector<NoteEvent>& ref,
                   const Admissible& ok) {
    std::vector<std::vector<bool>> adj(ref.size(), std::vector<bool>(pred.size(), false));
    for (std::size_t i = 0; i < ref.size(); ++i)
        for (std::size_t j = 0; j < pred.size(); ++j) adj[i][j] = ok(ref[i], pred[j]);
    long m = 0;
    for (int v : max_bipartite_matching(adj, pred.size())) m += v >= 0;
    return m;
}

// Small slack absorbs decimal rounding of serialized note times.
constexpr double kTimeEps = 1e-9;

bool onset_ok(const NoteEvent& r, const NoteEvent& e, const NoteTolerance& tol) {
    return r.pitch == e.pitch && std::abs(r.onset - e.onset) <= tol.onset + kTimeEps;
}

bool offset_ok(const NoteEvent& r, const NoteEvent& e, const NoteTolerance& tol) {
    const double window = std::max(tol.offset_min, tol.offset_ratio * (r.offset - r.onset));
    return std::abs(r.offset - e.offset) <= window + kTimeEps;
}

void note_counts(const std::vector<NoteEvent>& pred, const std::vector<NoteEvent>& ref,
                 const NoteTolerance& tol, bool with_offset, long counts[3]) {
    const long m = matched_count(pred, ref, [&](const NoteEvent& r, const NoteEvent& e) {
        return onset_ok(r, e, tol) && (!with_offset || offset_ok(r, e, tol));
    });
    counts[0] += m;
    counts[1] += static_cast<long>(pred.size()) - m;
    counts[2] += static_cast<long>(ref.size()) - m;
}

} // namespace

PrecisionRecall frame_pitch_f1(const ByteMatrix& pred, const ByteMatrix& ref) {
    long tp = 0, fp = 0, fn = 0;
    frame_counts(pred, ref, tp, fp, fn);
    return PrecisionRecall::from_counts(tp, fp, fn);
}

std::vector<int> max_bipartite_matching(const std::vector<std::vector<bool>>& adj,
                                        std::size_t num_est) {
    std::vector<int> match_of_est(num_est, -1);
    std::vector<int> match_of_ref(adj.size(), -1);
    std::vector<char> seen;
    std::function<bool(std::size_t)> augment = [&](std::size_t r) {
        for (std::size_t e = 0; e < num_est; ++e) {
            if (!adj[r][e] || seen[e]) continue;
            seen[e] = 1;
            if (match_of_est[e] < 0 || augment(static_cast<std::size_t>(match_of_est[e]))) {
                match_of_est[e] = static_cast<int>(r);
                match_of_ref[r] = static_cast<int>(e);
                return true;
            }
        }
        return false;
    };
    for (std::size_t r = 0; r < adj.size(); ++r) {
        seen.assign(num_est, 0);
        augment(r);
    }
    return match_of_ref;
}

PrecisionRecall note_onset_f1(const std::vector<NoteEvent>& pred,
                              const std::vector<NoteEvent>& ref, const NoteTolerance& tol) {
    long c[3]{};
    note_counts(pred, ref, tol, false, c);
    return PrecisionRecall::from_counts(c[0], c[1], c[2]);
}

PrecisionRecall note_onset_offset_f1(const std::vector<NoteEvent>& pred,
                                     const std::vector<NoteEvent>& ref,
                                     const NoteTolerance& tol) {
    long c[3]{};
    note_counts(pred, ref, tol, true, c);
    return PrecisionRecall::from_counts(c[0], c[1], c[2]);
}

std::optional<double> vfa(const ByteMatrix& pred, const ByteMatrix& ref) {
    long unvoiced = 0, alarms = 0;
    vfa_counts(pred, ref, unvoiced, alarms);
    if (unvoiced == 0) return std::nullopt;
    return static_cast<double>(alarms) / static_cast<double>(unvoiced);
}

MetricReport evaluate(const Prediction& pred, const std::vector<NoteEvent>& ref_notes,
                      double threshold, double frame_rate, const NoteTolerance& tol) {
    MetricAccumulator acc;
    acc.add(pred, ref_notes, threshold, frame_rate, tol);
    return acc.report();
}

void MetricAccumulator::add(const Prediction& pred, const std::vector<NoteEvent>& ref_notes,
                            double threshold, double frame_rate, const NoteTolerance& tol) {
    const ByteMatrix ref = encode_frames(ref_notes, pred.frames(), frame_rate).pitch;
    const ByteMatrix est = binarize(pred.pitch, threshold);
    frame_counts(est, ref, pitch_[0], pitch_[1], pitch_[2]);
    vfa_counts(est, ref, unvoiced_ref_, false_alarm_);
    const auto notes = decode_notes(pred, threshold, frame_rate);
    note_counts(notes, ref_notes, tol, false, onset_);
    note_counts(notes, ref_notes, tol, true, onoff_);
}

MetricReport MetricAccumulator::report() const {
    MetricReport r;
    r.pitch = PrecisionRecall::from_counts(pitch_[0], pitch_[1], pitch_[2]);
    r.onset = PrecisionRecall::from_counts(onset_[0], onset_[1], onset_[2]);
    r.onset_offset = PrecisionRecall::from_counts(onoff_[0], onoff_[1], onoff_[2]);
    if (unvoiced_ref_ > 0)
        r.vfa = static_cast<double>(false_alarm_) / static_cast<double>(unvoiced_ref_);
    return r;
}

std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int i = 1; i <= 9; ++i) t.push_back(i / 10.0);
    return t;
}

std::vector<SweepRow> threshold_sweep(const Prediction& pred,
                                      const std::vector<NoteEvent>& ref_notes, double frame_rate,
                                      const std::vector<double>& thresholds) {
    std::vector<SweepRow> rows;
    for (double th : thresholds) rows.push_back({th, evaluate(pred, ref_notes, th, frame_rate)});
    return rows;
}

std::string report_csv_header() {
    return "file,threshold,pitch_p,pitch_r,pitch_f1,onset_p,onset_r,onset_f1,"
           "onset_offset_p,onset_offset_r,onset_offset_f1,vfa,"
           "pitch_tp,pitch_fp,pitch_fn,onset_tp,onset_fp,onset_fn,"
           "onset_offset_tp,onset_offset_fp,onset_offset_fn\n";
}

std::string report_csv_row(const std::string& file, double threshold, const MetricReport& r) {
    const auto pr = [](const PrecisionRecall& m) {
        return fmt::format("{:.6f},{:.6f},{:.6f}", m.precision, m.recall, m.f1);
    };
    const auto cnt = [](const PrecisionRecall& m) {
        return fmt::format("{},{},{}", m.tp, m.fp, m.fn);
    };
    return fmt::format("{},{:.2f},{},{},{},{},{},{},{}\n", file, threshold, pr(r.pitch),
                       pr(r.onset), pr(r.onset_offset),
                       r.vfa ? fmt::format("{:.6f}", *r.vfa) : std::string(), cnt(r.pitch),
                       cnt(r.onset), cnt(r.onset_offset));
}

nlohmann::json to_json(const MetricReport& r) {
    const auto pr = [](const PrecisionRecall& m) {
        return nlohmann::json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
                              {"tp", m.tp},               {"fp", m.fp},         {"fn", m.fn}};
    };
    nlohmann::json j{{"pitch", pr(r.pitch)},
                     {"onset", pr(r.onset)},
                     {"onset_offset", pr(r.onset_offset)}};
    j["vfa"] = r.vfa ? nlohmann::json(*r.vfa) : nlohmann::json(nullptr);
    return j;
}

} // namespace jepoo
