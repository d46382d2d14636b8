#include "jepoo/frontend.hpp"

#include "jepoo/error.hpp"

#include <fftw3.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <random>
#include <string>

namespace jepoo {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace {

// The FFTW planner is not reentrant; execution with the new-array API is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

class RealFft {
public:
    explicit RealFft(int n) : n_(n) {
        in_ = fftw_alloc_real(static_cast<std::size_t>(n));
        out_ = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
        std::lock_guard lock(planner_mutex());
        plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
    }
    ~RealFft() {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(plan_);
        fftw_free(in_);
        fftw_free(out_);
    }
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    double* input() { return in_; }
    const fftw_complex* output() const { return out_; }
    void run() { fftw_execute(plan_); }
    int size() const { return n_; }

private:
    int n_;
    double* in_ = nullptr;
    fftw_complex* out_ = nullptr;
    fftw_plan plan_ = nullptr;
};

} // namespace

void MelConfig::validate(double sample_rate) const {
    if (mel_bins < 1) throw ConfigError("mel_bins must be positive");
    if (!(fmin >= 0.0) || !(fmin < fmax))
        throw ConfigError("mel config requires 0 <= fmin < fmax");
    if (fmax > sample_rate / 2.0) throw ConfigError("fmax exceeds the Nyquist frequency");
    if (window < 2 || window % 2 != 0) throw ConfigError("window length must be even");
    if (hop < 1) throw ConfigError("hop must be >= 1");
    if (!(log_floor > 0.0)) throw ConfigError("log floor must be positive");
}

int frame_count(std::size_t num_samples, int window, int hop) {
    if (num_samples < static_cast<std::size_t>(window)) return 0;
    return 1 + static_cast<int>((num_samples - static_cast<std::size_t>(window)) /
                                static_cast<std::size_t>(hop));
}

std::vector<double> hann_window(int length) {
    // Periodic Hann, the usual choice for spectral analysis.
    std::vector<double> w(static_cast<std::size_t>(length));
    for (int i = 0; i < length; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / length);
    return w;
}

ComplexMatrix stft(const AudioClip& clip, int window_len, int hop) {
    if (window_len < 2 || window_len % 2 != 0) throw ConfigError("window length must be even");
    if (hop < 1) throw ConfigError("hop must be >= 1");
    if (!(clip.sample_rate > 0.0)) throw InputError("sample rate must be positive");
    const int frames = frame_count(clip.samples.size(), window_len, hop);
    if (frames == 0)
        throw InputTooShortError("clip has " + std::to_string(clip.samples.size()) +
                                 " samples, shorter than one window of " +
                                 std::to_string(window_len));

    const int bins = window_len / 2 + 1;
    const auto window = hann_window(window_len);
    ComplexMatrix out(frames, bins);
    RealFft fft(window_len);
    for (int t = 0; t < frames; ++t) {
        const double* src = clip.samples.data() + static_cast<std::size_t>(t) * hop;
        double* in = fft.input();
        for (int i = 0; i < window_len; ++i) in[i] = src[i] * window[i];
        fft.run();
        const fftw_complex* spec = fft.output();
        for (int k = 0; k < bins; ++k) out(t, k) = {spec[k][0], spec[k][1]};
    }
    return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

std::vector<double> mel_edges(const MelConfig& cfg) {
    const double lo = hz_to_mel(cfg.fmin);
    const double hi = hz_to_mel(cfg.fmax);
    std::vector<double> edges(static_cast<std::size_t>(cfg.mel_bins) + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) /
                                      static_cast<double>(cfg.mel_bins + 1));
    return edges;
}

} // namespace

std::vector<double> mel_center_frequencies(const MelConfig& cfg) {
    const auto edges = mel_edges(cfg);
    return {edges.begin() + 1, edges.end() - 1};
}

RowMatrix mel_filterbank(const MelConfig& cfg, double sample_rate) {
    cfg.validate(sample_rate);
    const auto edges = mel_edges(cfg);
    const int bins = cfg.window / 2 + 1;
    RowMatrix fb = RowMatrix::Zero(cfg.mel_bins, bins);
    for (int m = 0; m < cfg.mel_bins; ++m) {
        const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
        for (int k = 0; k < bins; ++k) {
            const double f = k * sample_rate / cfg.window;
            double v = 0.0;
            if (f > left && f <= center)
                v = (f - left) / (center - left);
            else if (f > center && f < right)
                v = (right - f) / (right - center);
            fb(m, k) = v;
        }
    }
    return fb;
}

MelSpectrogram melspectrogram(const AudioClip& clip, const MelConfig& cfg) {
    cfg.validate(clip.sample_rate);
    const ComplexMatrix spec = stft(clip, cfg.window, cfg.hop);
    const RowMatrix magnitude = spec.cwiseAbs();
    const RowMatrix fb = mel_filterbank(cfg, clip.sample_rate);

    MelSpectrogram mel;
    mel.frame_rate = clip.sample_rate / cfg.hop;
    mel.values = (magnitude * fb.transpose()).array() + cfg.log_floor;
    mel.values = mel.values.array().log();
    return mel;
}

double signal_power(const std::vector<double>& samples) {
    if (samples.empty()) return 0.0;
    double acc = 0.0;
    for (double s : samples) acc += s * s;
    return acc / static_cast<double>(samples.size());
}

AudioClip add_white_noise(const AudioClip& clip, double snr_db, std::uint64_t seed) {
    if (std::isinf(snr_db) && snr_db > 0) return clip;
    if (!std::isfinite(snr_db)) throw InputError("SNR must be finite or +inf");
    const double p_signal = signal_power(clip.samples);
    if (!(p_signal > 0.0)) throw UndefinedSnrError("SNR is undefined for a silent clip");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> noise(clip.samples.size());
    for (double& n : noise) n = gauss(rng);
    const double p_raw = signal_power(noise);
    const double p_target = p_signal / std::pow(10.0, snr_db / 10.0);
    const double scale = std::sqrt(p_target / p_raw);

    AudioClip out = clip;
    for (std::size_t i = 0; i < noise.size(); ++i) out.samples[i] += scale * noise[i];
    return out;
}

void write_mel(const std::filesystem::path& path, const MelSpectrogram& mel) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open " + path.string() + " for writing");
    const auto rows = static_cast<std::uint32_t>(mel.values.rows());
    const auto cols = static_cast<std::uint32_t>(mel.values.cols());
    os.write(reinterpret_cast<const char*>(&rows), 4);
    os.write(reinterpret_cast<const char*>(&cols), 4);
    for (Eigen::Index i = 0; i < mel.values.size(); ++i) {
        const float v = static_cast<float>(mel.values.data()[i]);
        os.write(reinterpret_cast<const char*>(&v), 4);
    }
}

MelSpectrogram read_mel(const std::filesystem::path& path, double frame_rate) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestionError("cannot open " + path.string());
    std::uint32_t rows = 0, cols = 0;
    is.read(reinterpret_cast<char*>(&rows), 4);
    is.read(reinterpret_cast<char*>(&cols), 4);
    if (!is) throw IngestionError(path.string() + ": truncated mel header");
    MelSpectrogram mel;
    mel.frame_rate = frame_rate;
    mel.values.resize(rows, cols);
    std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!is) throw IngestionError(path.string() + ": truncated mel payload");
    for (std::size_t i = 0; i < buf.size(); ++i) mel.values.data()[i] = buf[i];
    return mel;
}

} // namespace jepoo
