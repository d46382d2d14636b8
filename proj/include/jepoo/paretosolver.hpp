#pragma once

#include "jepoo/autodiff.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace jepoo {

struct MinNormOptions {
    int max_iterations = 250;
    double gap_tolerance = 1e-8;
};

struct MinNormResult {
    std::vector<double> omega;
    int iterations = 0;
    double gap = 0.0;
};

// Minimises |sum_i omega_i g_i|^2 over the probability simplex with
// Frank-Wolfe iterations (with away steps), seeded at the uniform point.
// All-zero gradients, and every other tie, resolve to the uniform-seeded
// fixed point.
MinNormResult min_norm_solve(const std::vector<std::vector<double>>& task_grads,
                             const MinNormOptions& opts = {});

std::vector<double> min_norm_weights(const std::vector<std::vector<double>>& task_grads,
                                     const MinNormOptions& opts = {});

// Learnable transform of the Pareto weights: softmax(omega @ weight + bias),
// with weight [n, n] (the transpose of the usual W) and bias [n].
struct PmlHead {
    ad::Tensor weight;
    ad::Tensor bias;

    static PmlHead identity(std::size_t n);
    static PmlHead zeros(std::size_t n);
};

std::vector<double> pml_weights(std::span<const double> omega, const PmlHead& head);

// Graph version; gradients flow into the head's weight and bias nodes.
ad::Var pml_weights(ad::Var omega, ad::Var weight, ad::Var bias);

} // namespace jepoo
