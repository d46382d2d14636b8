#include "jepoo/error.hpp"
#include "jepoo/evalmetrics.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace jepoo;

namespace {

constexpr double kFrameRate = 31.25;

// Largest one-to-one matching by exhaustive search.
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

std::vector<NoteEvent> random_notes(std::mt19937_64& rng, int count) {
    std::uniform_int_distribution<int> pitch(60, 62);
    std::uniform_real_distribution<double> onset(0.0, 0.4), len(0.05, 0.6);
    std::vector<NoteEvent> out;
    for (int i = 0; i < count; ++i) {
        const double on = onset(rng);
        out.push_back({pitch(rng), on, on + len(rng)});
    }
    return out;
}

bool admissible(const NoteEvent& ref, const NoteEvent& est, bool with_offset) {
    if (ref.pitch != est.pitch || std::abs(ref.onset - est.onset) > 0.05) return false;
    if (!with_offset) return true;
    return std::abs(ref.offset - est.offset) <= std::max(0.05, 0.2 * (ref.offset - ref.onset));
}

ByteMatrix frames(int t, std::initializer_list<std::pair<int, int>> on) {
    ByteMatrix m = ByteMatrix::Zero(t, kNumKeys);
    for (auto [r, c] : on) m(r, c) = 1;
    return m;
}

} // namespace

TEST_SUITE("evalmetrics") {

TEST_CASE("precision/recall from counts") {
    const auto pr = PrecisionRecall::from_counts(0, 0, 0);
    CHECK(pr.precision == 0.0);
    CHECK(pr.recall == 0.0);
    CHECK(pr.f1 == 0.0);
    const auto h = PrecisionRecall::from_counts(2, 0, 2);
    CHECK(h.precision == 1.0);
    CHECK(h.recall == 0.5);
    CHECK(h.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("frame pitch F1 examples") {
    const ByteMatrix ref = frames(4, {{0, 1}, {1, 1}, {2, 5}, {3, 5}});
    CHECK(frame_pitch_f1(ref, ref).f1 == 1.0);
    CHECK(frame_pitch_f1(ByteMatrix::Zero(4, kNumKeys), ref).f1 == 0.0);
    const auto half = frame_pitch_f1(frames(4, {{0, 1}, {2, 5}}), ref);
    CHECK(half.precision == 1.0);
    CHECK(half.recall == 0.5);
    CHECK(half.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(frame_pitch_f1(ByteMatrix::Zero(3, kNumKeys), ref), ShapeError);
}

TEST_CASE("note onset F1 examples") {
    const std::vector<NoteEvent> ref{{60, 0.0, 0.5}, {64, 0.2, 0.4}};
    CHECK(note_onset_f1(ref, ref).f1 == 1.0);
    CHECK(note_onset_f1({{60, 0.06, 0.5}}, {{60, 0.0, 0.5}}).f1 == 0.0);
    const auto two = note_onset_f1({{60, 0.03, 0.3}}, {{60, 0.0, 0.04}, {60, 0.06, 0.3}});
    CHECK(two.tp == 1);
    CHECK(two.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(note_onset_f1({{61, 0.0, 0.5}}, {{60, 0.0, 0.5}}).f1 == 0.0);
    CHECK(note_onset_f1({}, {}).f1 == 0.0);
}

TEST_CASE("note onset-offset F1 examples") {
    const std::vector<NoteEvent> ref{{60, 0.0, 0.5}, {64, 0.2, 0.4}};
    CHECK(note_onset_offset_f1(ref, ref).f1 == 1.0);
    CHECK(note_onset_offset_f1({{60, 0.0, 1.3}}, {{60, 0.0, 1.0}}).f1 == 0.0);
    CHECK(note_onset_offset_f1({{60, 0.0, 0.14}}, {{60, 0.0, 0.1}}).f1 == 1.0);
    CHECK(note_onset_offset_f1({{60, 0.0, 1.19}}, {{60, 0.0, 1.0}}).f1 == 1.0);
    CHECK(note_onset_f1({{60, 0.0, 1.3}}, {{60, 0.0, 1.0}}).f1 == 1.0);
}

TEST_CASE("maximum matching beats greedy") {
    // r0 can take e0 or e1; r1 only e0. Greedy r0 -> e0 would strand r1.
    const std::vector<std::vector<bool>> adj{{true, true}, {true, false}};
    const auto m = max_bipartite_matching(adj, 2);
    CHECK(m[0] == 1);
    CHECK(m[1] == 0);
}

TEST_CASE("matcher equals exhaustive enumeration on 1000 instances") {
    std::mt19937_64 rng(41);
    std::uniform_int_distribution<int> count(0, 6);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto ref = random_notes(rng, count(rng));
        const auto est = random_notes(rng, count(rng));
        for (bool with_offset : {false, true}) {
            std::vector<std::vector<bool>> adj(ref.size(), std::vector<bool>(est.size()));
            for (std::size_t r = 0; r < ref.size(); ++r)
                for (std::size_t e = 0; e < est.size(); ++e)
                    adj[r][e] = admissible(ref[r], est[e], with_offset);
            std::vector<bool> used(est.size(), false);
            const int oracle = brute_force(adj, 0, used);
            const auto pr = with_offset ? note_onset_offset_f1(est, ref) : note_onset_f1(est, ref);
            REQUIRE(pr.tp == oracle);
            CHECK(pr.fp == static_cast<long>(est.size()) - oracle);
            CHECK(pr.fn == static_cast<long>(ref.size()) - oracle);
        }
    }
}

TEST_CASE("swapping prediction and reference swaps precision and recall") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = random_notes(rng, 1 + trial % 6);
        const auto b = random_notes(rng, 1 + (trial / 6) % 6);
        const auto ab = note_onset_f1(a, b), ba = note_onset_f1(b, a);
        CHECK(ab.precision == ba.recall);
        CHECK(ab.recall == ba.precision);
    }
    std::bernoulli_distribution coin(0.2);
    ByteMatrix x(20, kNumKeys), y(20, kNumKeys);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = coin(rng);
        y.data()[i] = coin(rng);
    }
    CHECK(frame_pitch_f1(x, y).precision == frame_pitch_f1(y, x).recall);
}

TEST_CASE("metrics ignore note order") {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 100; ++trial) {
        auto a = random_notes(rng, 6);
        auto b = random_notes(rng, 5);
        const auto before = note_onset_offset_f1(a, b);
        std::shuffle(a.begin(), a.end(), rng);
        std::shuffle(b.begin(), b.end(), rng);
        CHECK(note_onset_offset_f1(a, b).tp == before.tp);
    }
}

TEST_CASE("voicing false alarm") {
    CHECK(vfa(ByteMatrix::Zero(5, kNumKeys), frames(5, {{0, 3}})).value() == 0.0);
    CHECK_FALSE(vfa(frames(2, {{0, 1}}), frames(2, {{0, 3}, {1, 4}})).has_value());
    ByteMatrix ref = ByteMatrix::Zero(12, kNumKeys);
    ref(10, 0) = ref(11, 0) = 1;
    ByteMatrix pred = ByteMatrix::Zero(12, kNumKeys);
    pred(0, 5) = pred(1, 7) = pred(1, 8) = pred(4, 1) = pred(10, 0) = 1;
    CHECK(vfa(pred, ref).value() == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("evaluating a reference against itself") {
    const std::vector<NoteEvent> notes{{60, 0.1, 0.5}, {67, 0.6, 1.2}, {72, 0.6, 0.9}};
    const FrameLabels l = encode_frames(notes, 50, kFrameRate);
    const MetricReport r = evaluate(labels_to_prediction(l), notes, 0.5, kFrameRate);
    CHECK(r.pitch.f1 == 1.0);
    CHECK(r.vfa.value() == 0.0);
    CHECK(r.onset.f1 == 1.0);
}

TEST_CASE("threshold sweep") {
    const std::vector<NoteEvent> notes{{60, 0.1, 0.5}, {64, 0.7, 1.0}};
    const FrameLabels l = encode_frames(notes, 40, kFrameRate);
    const Prediction ideal = labels_to_prediction(l, 0.05, 0.95);
    const auto rows = threshold_sweep(ideal, notes, kFrameRate);
    REQUIRE(rows.size() == 9);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].threshold == doctest::Approx(0.1 * static_cast<double>(i + 1)));
        CHECK(to_json(rows[i].report) == to_json(rows[0].report));
    }

    Prediction empty;
    empty.pitch = RowMatrix::Constant(40, kNumKeys, 0.01);
    empty.onset = empty.offset = empty.pitch;
    for (const auto& row : threshold_sweep(empty, notes, kFrameRate)) {
        CHECK(row.report.pitch.f1 == 0.0);
        CHECK(row.report.onset.f1 == 0.0);
        CHECK(row.report.onset_offset.f1 == 0.0);
    }
}

TEST_CASE("accumulator pools raw counts") {
    const std::vector<NoteEvent> a{{60, 0.1, 0.5}}, b{{62, 0.2, 0.6}, {65, 0.3, 0.4}};
    const Prediction pa = labels_to_prediction(encode_frames(a, 30, kFrameRate));
    const Prediction pb = labels_to_prediction(encode_frames({{62, 0.2, 0.6}}, 30, kFrameRate));
    MetricAccumulator acc;
    acc.add(pa, a, 0.5, kFrameRate);
    acc.add(pb, b, 0.5, kFrameRate);
    const MetricReport r = acc.report();
    CHECK(r.onset.tp == 2);
    CHECK(r.onset.fn == 1);
    CHECK(r.onset.fp == 0);
    const auto ea = evaluate(pa, a, 0.5, kFrameRate), eb = evaluate(pb, b, 0.5, kFrameRate);
    CHECK(r.pitch.tp == ea.pitch.tp + eb.pitch.tp);
    CHECK(r.pitch.fn == ea.pitch.fn + eb.pitch.fn);
}

TEST_CASE("report CSV") {
    const MetricReport r;
    const std::string header = report_csv_header();
    const std::string row = report_csv_row("x.wav", 0.5, r);
    CHECK(std::count(header.begin(), header.end(), ',') ==
          std::count(row.begin(), row.end(), ','));
    CHECK(row.rfind("x.wav,", 0) == 0);
}

} // TEST_SUITE
