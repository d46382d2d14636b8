#include "jepoo/losses.hpp"

#include "jepoo/error.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>

namespace jepoo {

namespace {

std::atomic<std::uint64_t> g_clamps{0};

double clamp_prob(double p) {
    if (p < kProbClamp || p > 1.0 - kProbClamp) {
        if (g_clamps.fetch_add(1, std::memory_order_relaxed) == 0)
            spdlog::debug("prediction {} clamped into [{}, 1 - {}]", p, kProbClamp, kProbClamp);
        return std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    }
    return p;
}

struct ElementTerm {
    double value;
    double deriv; // d value / d pred (zero when clamped)
};

ElementTerm element(double pred, std::uint8_t label, double alpha, double gamma,
                    bool positive_only) {
    const bool clamped = pred < kProbClamp || pred > 1.0 - kProbClamp;
    const double p = clamp_prob(pred);
    ElementTerm e{0.0, 0.0};
    if (label) {
        const double mod = gamma == 0.0 ? 1.0 : std::pow(1.0 - p, gamma);
        e.value = -alpha * mod * std::log(p);
        const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(1.0 - p, gamma - 1.0);
        e.deriv = -alpha * (dmod * std::log(p) + mod / p);
    } else if (!positive_only) {
        const double mod = gamma == 0.0 ? 1.0 : std::pow(p, gamma);
        e.value = -mod * std::log(1.0 - p);
        const double dmod = gamma == 0.0 ? 0.0 : gamma * std::pow(p, gamma - 1.0);
        e.deriv = -dmod * std::log(1.0 - p) + mod / (1.0 - p);
    }
    if (clamped) e.deriv = 0.0;
    return e;
}

void check_sizes(std::size_t a, std::size_t b) {
    if (a != b) throw ShapeError("loss: prediction and label sizes differ");
    if (a == 0) throw ShapeError("loss: empty input");
}

std::span<const std::uint8_t> bytes(const ByteMatrix& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}

std::span<const double> reals(const RowMatrix& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}

void check_weights(std::span<const double> w) {
    if (w.size() != kNumTasks) throw ShapeError("expected one weight per task");
}

} // namespace

void LossConfig::validate() const {
    for (int i = 0; i < kNumTasks; ++i) {
        if (!(alpha[i] > 0.0 && alpha[i] <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
        if (!(gamma[i] >= 0.0)) throw ConfigError("gamma must be non-negative");
    }
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (!(p >= 1.0)) throw ConfigError("regularizer exponent p must be >= 1");
}

std::uint64_t clamp_events() { return g_clamps.load(); }

double focal_loss(std::span<const double> pred, std::span<const std::uint8_t> labels,
                  double alpha, double gamma, bool positive_only) {
    check_sizes(pred.size(), labels.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        acc += element(pred[i], labels[i], alpha, gamma, positive_only).value;
    return acc / static_cast<double>(pred.size());
}

double weighted_bce(std::span<const double> pred, std::span<const std::uint8_t> labels,
                    double alpha, bool positive_only) {
    return focal_loss(pred, labels, alpha, 0.0, positive_only);
}

std::array<double, kNumTasks> task_bce(const Prediction& pred, const FrameLabels& labels,
                                       const LossConfig& cfg) {
    return {weighted_bce(reals(pred.pitch), bytes(labels.pitch), cfg.alpha[0], cfg.positive_only),
            weighted_bce(reals(pred.onset), bytes(labels.onset), cfg.alpha[1], cfg.positive_only),
            weighted_bce(reals(pred.offset), bytes(labels.offset), cfg.alpha[2],
                         cfg.positive_only)};
}

std::array<double, kNumTasks> task_focal(const Prediction& pred, const FrameLabels& labels,
                                         const LossConfig& cfg) {
    return {focal_loss(reals(pred.pitch), bytes(labels.pitch), cfg.alpha[0], cfg.gamma[0],
                       cfg.positive_only),
            focal_loss(reals(pred.onset), bytes(labels.onset), cfg.alpha[1], cfg.gamma[1],
                       cfg.positive_only),
            focal_loss(reals(pred.offset), bytes(labels.offset), cfg.alpha[2], cfg.gamma[2],
                       cfg.positive_only)};
}

double naive_loss(const Prediction& pred, const FrameLabels& labels,
                  std::span<const double> omega, const LossConfig& cfg) {
    check_weights(omega);
    const auto fl = task_focal(pred, labels, cfg);
    double acc = 0.0;
    for (int i = 0; i < kNumTasks; ++i) acc += omega[i] * fl[i];
    return acc;
}

double pml_loss(const Prediction& pred, const FrameLabels& labels,
                std::span<const double> omega_pml, const LossConfig& cfg) {
    check_weights(omega_pml);
    const auto bce = task_bce(pred, labels, cfg);
    double acc = 0.0;
    for (int i = 0; i < kNumTasks; ++i) acc += omega_pml[i] * bce[i];
    return acc;
}

double lwr(std::span<const double> omega_pml, double p) {
    const double n = static_cast<double>(omega_pml.size());
    double acc = 0.0;
    // n * (w - 1/n) rather than n * w - 1, so a uniform vector gives exactly 0.
    for (double w : omega_pml) acc += std::pow(std::abs(n * (w - 1.0 / n)), p);
    return acc;
}

double total_loss(const Prediction& pred, const FrameLabels& labels,
                  std::span<const double> omega_pml, const LossConfig& cfg) {
    return pml_loss(pred, labels, omega_pml, cfg) + cfg.lambda * lwr(omega_pml, cfg.p);
}

namespace lossops {

ad::Var element_loss(ad::Var pred, std::span<const std::uint8_t> labels, double alpha,
                     double gamma, bool positive_only) {
    ad::Graph& g = pred.graph();
    const auto pv = pred.values();
    check_sizes(pv.size(), labels.size());
    std::vector<double> deriv(pv.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const auto e = element(pv[i], labels[i], alpha, gamma, positive_only);
        acc += e.value;
        deriv[i] = e.deriv;
    }
    const double inv = 1.0 / static_cast<double>(pv.size());
    const std::size_t in = pred.id();
    return g.record(ad::Tensor({1}, acc * inv), {in},
                    [in, inv, deriv = std::move(deriv)](ad::Graph& gr, std::size_t self) {
        const double gy = gr.grad(self)[0] * inv;
        auto gx = gr.grad_mut(in);
        for (std::size_t i = 0; i < deriv.size(); ++i) gx[i] += gy * deriv[i];
    });
}

ad::Var weighted_sum(ad::Var weights, const std::vector<ad::Var>& losses) {
    return ad::dot(weights, ad::stack_scalars(losses));
}

ad::Var lwr(ad::Var omega_pml, double p) {
    ad::Graph& g = omega_pml.graph();
    const auto w = omega_pml.values();
    const double n = static_cast<double>(w.size());
    const double value = jepoo::lwr(w, p);
    const std::size_t in = omega_pml.id();
    return g.record(ad::Tensor({1}, value), {in}, [in, n, p](ad::Graph& gr, std::size_t self) {
        const double gy = gr.grad(self)[0];
        const auto& wv = gr.value(in).values;
        auto gx = gr.grad_mut(in);
        for (std::size_t i = 0; i < wv.size(); ++i) {
            const double d = n * (wv[i] - 1.0 / n);
            if (d == 0.0) continue;
            const double mag = p * std::pow(std::abs(d), p - 1.0);
            gx[i] += gy * n * (d > 0 ? mag : -mag);
        }
    });
}

} // namespace lossops

} // namespace jepoo
