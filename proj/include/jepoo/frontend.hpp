#pragma once

#include "jepoo/matrix.hpp"

#include <complex>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

namespace jepoo {

struct AudioClip {
    std::vector<double> samples;
    double sample_rate = 16000.0;
};

struct MelConfig {
    int mel_bins = 229;
    double fmin = 30.0;
    double fmax = 8000.0;
    int window = 2048;
    int hop = 512;
    double log_floor = 1e-5;

    void validate(double sample_rate) const;
};

struct MelSpectrogram {
    RowMatrix values; // frames x mel_bins
    double frame_rate = 0.0;

    int frames() const { return static_cast<int>(values.rows()); }
    int bins() const { return static_cast<int>(values.cols()); }
};

using ComplexMatrix =
    Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Number of frames produced by center-less framing: 1 + (len - window) / hop.
int frame_count(std::size_t num_samples, int window, int hop);

std::vector<double> hann_window(int length);

// Frame t covers samples [t*hop, t*hop + window_len). Throws
// InputTooShortError when the clip holds less than one window.
ComplexMatrix stft(const AudioClip& clip, int window_len, int hop);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Center frequencies (Hz) of the triangular filters, lowest first.
std::vector<double> mel_center_frequencies(const MelConfig& cfg);

// Filter weights, mel_bins x (window/2 + 1), unit peak triangles.
RowMatrix mel_filterbank(const MelConfig& cfg, double sample_rate);

MelSpectrogram melspectrogram(const AudioClip& clip, const MelConfig& cfg = {});

inline constexpr double kNoNoise = std::numeric_limits<double>::infinity();

// Adds white Gaussian noise so the clip/noise power ratio equals snr_db.
// The noise realisation is rescaled to hit the target exactly. +inf
// returns the clip unchanged.
AudioClip add_white_noise(const AudioClip& clip, double snr_db, std::uint64_t seed);

double signal_power(const std::vector<double>& samples);

// Binary layout: uint32 T, uint32 F, then T*F float32, all little endian.
void write_mel(const std::filesystem::path& path, const MelSpectrogram& mel);
MelSpectrogram read_mel(const std::filesystem::path& path, double frame_rate);

} // namespace jepoo
