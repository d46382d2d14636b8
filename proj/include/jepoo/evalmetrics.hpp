#pragma once

#include "jepoo/labelcodec.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace jepoo {

struct PrecisionRecall {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long tp = 0;
    long fp = 0;
    long fn = 0;

    // 0/0 ratios are defined as 0.
    static PrecisionRecall from_counts(long tp, long fp, long fn);
};

struct MetricReport {
    PrecisionRecall pitch;
    PrecisionRecall onset;
    PrecisionRecall onset_offset;
    std::optional<double> vfa; // absent when the reference has no unvoiced frame
};

struct NoteTolerance {
    double onset = 0.05;        // seconds
    double offset_ratio = 0.2;  // fraction of reference duration
    double offset_min = 0.05;   // seconds
};

// Thresholds probabilities strictly above `threshold`.
ByteMatrix binarize(const RowMatrix& probs, double threshold);

PrecisionRecall frame_pitch_f1(const ByteMatrix& pred, const ByteMatrix& ref);

// Maximum cardinality matching between reference and estimated notes, given an
// admissibility matrix adj[ref][est]. Augmenting paths (Kuhn). Returns, for
// each reference, the matched estimate index or -1.
std::vector<int> max_bipartite_matching(const std::vector<std::vector<bool>>& adj,
                                        std::size_t num_est);

PrecisionRecall note_onset_f1(const std::vector<NoteEvent>& pred,
                              const std::vector<NoteEvent>& ref, const NoteTolerance& tol = {});
PrecisionRecall note_onset_offset_f1(const std::vector<NoteEvent>& pred,
                                     const std::vector<NoteEvent>& ref,
                                     const NoteTolerance& tol = {});

// Frames are voiced when any of their 88 cells is positive.
std::optional<double> vfa(const ByteMatrix& pred, const ByteMatrix& ref);

// All four metrics for one clip at one threshold.
MetricReport evaluate(const Prediction& pred, const std::vector<NoteEvent>& ref_notes,
                      double threshold, double frame_rate, const NoteTolerance& tol = {});

// Pools raw counts over several clips. VFA pools frame counts.
class MetricAccumulator {
public:
    void add(const Prediction& pred, const std::vector<NoteEvent>& ref_notes, double threshold,
             double frame_rate, const NoteTolerance& tol = {});
    MetricReport report() const;

private:
    long pitch_[3]{};
    long onset_[3]{};
    long onoff_[3]{};
    long unvoiced_ref_ = 0;
    long false_alarm_ = 0;
};

struct SweepRow {
    double threshold;
    MetricReport report;
};

std::vector<double> default_thresholds(); // 0.1 .. 0.9 step 0.1

std::vector<SweepRow> threshold_sweep(const Prediction& pred,
                                      const std::vector<NoteEvent>& ref_notes, double frame_rate,
                                      const std::vector<double>& thresholds = default_thresholds());

// CSV header + one row per report.
std::string report_csv_header();
std::string report_csv_row(const std::string& file, double threshold, const MetricReport& r);
nlohmann::json to_json(const MetricReport& r);

} // namespace jepoo
