#include "jepoo/paretosolver.hpp"

#include "jepoo/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace jepoo {

namespace {

using Gram = std::vector<std::vector<double>>;

// Exact minimiser of f(x + s*d) over s in [0, s_max] for f(x) = x'Mx.
double line_search(const Gram& m, const std::vector<double>& x, const std::vector<double>& d,
                   double s_max) {
    const std::size_t n = x.size();
    double dmd = 0.0, xmd = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            dmd += d[i] * m[i][j] * d[j];
            xmd += x[i] * m[i][j] * d[j];
        }
    if (dmd <= 0.0) return xmd < 0.0 ? s_max : 0.0;
    return std::clamp(-xmd / dmd, 0.0, s_max);
}

} // namespace

MinNormResult min_norm_solve(const std::vector<std::vector<double>>& task_grads,
                             const MinNormOptions& opts) {
    const std::size_t n = task_grads.size();
    if (n < 2) throw InputError("min-norm solver needs at least two tasks");
    const std::size_t dim = task_grads.front().size();
    for (const auto& g : task_grads)
        if (g.size() != dim) throw ShapeError("task gradients differ in length");

    Gram m(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < dim; ++k) acc += task_grads[i][k] * task_grads[j][k];
            m[i][j] = m[j][i] = acc;
        }

    MinNormResult res;
    std::vector<double>& x = res.omega;
    x.assign(n, 1.0 / static_cast<double>(n));
    std::vector<double> grad(n), d(n);
    for (int it = 0; it < opts.max_iterations; ++it) {
        // grad f = 2 M x; the factor 2 does not change any decision below.
        for (std::size_t i = 0; i < n; ++i) {
            grad[i] = 0.0;
            for (std::size_t j = 0; j < n; ++j) grad[i] += m[i][j] * x[j];
        }
        const auto s = static_cast<std::size_t>(
            std::min_element(grad.begin(), grad.end()) - grad.begin());
        double gx = 0.0;
        for (std::size_t i = 0; i < n; ++i) gx += grad[i] * x[i];
        const double fw_gap = 2.0 * (gx - grad[s]);
        res.gap = fw_gap;
        res.iterations = it;
        if (fw_gap < opts.gap_tolerance) return res;

        // Away vertex: the active coordinate with the largest gradient.
        std::size_t a = n;
        for (std::size_t i = 0; i < n; ++i)
            if (x[i] > 0.0 && (a == n || grad[i] > grad[a])) a = i;
        const double away_gap = 2.0 * (grad[a] - gx);

        double s_max = 1.0;
        if (fw_gap >= away_gap) {
            for (std::size_t i = 0; i < n; ++i) d[i] = (i == s ? 1.0 : 0.0) - x[i];
        } else {
            const double xa = x[a];
            for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - (i == a ? 1.0 : 0.0);
            s_max = xa / (1.0 - xa);
        }
        const double step = line_search(m, x, d, s_max);
        if (step <= 0.0) break;
        for (std::size_t i = 0; i < n; ++i) x[i] = std::max(0.0, x[i] + step * d[i]);
        if (fw_gap < away_gap && step == s_max) x[a] = 0.0;
        double total = 0.0;
        for (double v : x) total += v;
        for (double& v : x) v /= total;
    }
    res.iterations = opts.max_iterations;
    return res;
}

std::vector<double> min_norm_weights(const std::vector<std::vector<double>>& task_grads,
                                     const MinNormOptions& opts) {
    return min_norm_solve(task_grads, opts).omega;
}

PmlHead PmlHead::identity(std::size_t n) {
    PmlHead h = zeros(n);
    for (std::size_t i = 0; i < n; ++i) h.weight.values[i * n + i] = 1.0;
    return h;
}

PmlHead PmlHead::zeros(std::size_t n) {
    PmlHead h;
    h.weight = ad::Tensor({n, n});
    h.bias = ad::Tensor({n});
    h.weight.requires_grad = h.bias.requires_grad = true;
    return h;
}

std::vector<double> pml_weights(std::span<const double> omega, const PmlHead& head) {
    const std::size_t n = omega.size();
    if (head.weight.shape != ad::Shape{n, n} || head.bias.shape != ad::Shape{n})
        throw ShapeError("PML head does not match the task count");
    std::vector<double> z(n);
    for (std::size_t o = 0; o < n; ++o) {
        z[o] = head.bias.values[o];
        for (std::size_t i = 0; i < n; ++i) z[o] += omega[i] * head.weight.values[i * n + o];
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double& v : z) total += (v = std::exp(v - mx));
    for (double& v : z) v /= total;
    return z;
}

ad::Var pml_weights(ad::Var omega, ad::Var weight, ad::Var bias) {
    return ad::softmax(ad::linear(omega, weight, bias));
}

} // namespace jepoo
