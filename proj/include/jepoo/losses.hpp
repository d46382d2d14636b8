#pragma once

#include "jepoo/autodiff.hpp"
#include "jepoo/labelcodec.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace jepoo {

inline constexpr int kNumTasks = 3; // pitch, onset, offset

struct LossConfig {
    std::array<double, kNumTasks> alpha{1.0, 1.0, 1.0}; // positive-class weight
    std::array<double, kNumTasks> gamma{2.0, 2.0, 2.0}; // focal exponent
    double lambda = 0.04;                                // regularizer weight
    double p = 2.0;                                      // regularizer exponent
    // Keep only the -alpha * y * log(y_hat) term, exactly as the loss is
    // usually written. Degenerate on its own (all-ones minimises it).
    bool positive_only = false;

    void validate() const;
};

// Predictions are clamped to [kProbClamp, 1 - kProbClamp] before the log.
inline constexpr double kProbClamp = 1e-7;

// Mean over elements of -[alpha*y*log(p) + (1-y)*log(1-p)].
double weighted_bce(std::span<const double> pred, std::span<const std::uint8_t> labels,
                    double alpha, bool positive_only = false);

// Mean over elements of -[alpha*y*(1-p)^gamma*log(p) + (1-y)*p^gamma*log(1-p)].
double focal_loss(std::span<const double> pred, std::span<const std::uint8_t> labels,
                  double alpha, double gamma, bool positive_only = false);

// Per-task values on one clip, ordered pitch, onset, offset.
std::array<double, kNumTasks> task_bce(const Prediction& pred, const FrameLabels& labels,
                                       const LossConfig& cfg);
std::array<double, kNumTasks> task_focal(const Prediction& pred, const FrameLabels& labels,
                                         const LossConfig& cfg);

// sum_i omega_i * FL_i
double naive_loss(const Prediction& pred, const FrameLabels& labels,
                  std::span<const double> omega, const LossConfig& cfg);
// sum_i omega_pml_i * BCE_i
double pml_loss(const Prediction& pred, const FrameLabels& labels,
                std::span<const double> omega_pml, const LossConfig& cfg);
// sum_i |n * omega_pml_i - 1|^p
double lwr(std::span<const double> omega_pml, double p);
// pml_loss + lambda * lwr
double total_loss(const Prediction& pred, const FrameLabels& labels,
                  std::span<const double> omega_pml, const LossConfig& cfg);

// Number of predictions that hit the clamp since start-up (diagnostics).
std::uint64_t clamp_events();

namespace lossops {

// Fused element loss on the graph; gamma == 0 gives weighted BCE.
ad::Var element_loss(ad::Var pred, std::span<const std::uint8_t> labels, double alpha,
                     double gamma, bool positive_only);

// sum_i weights[i] * losses[i]; weights is a length-n vector node.
ad::Var weighted_sum(ad::Var weights, const std::vector<ad::Var>& losses);

ad::Var lwr(ad::Var omega_pml, double p);

} // namespace lossops

} // namespace jepoo
