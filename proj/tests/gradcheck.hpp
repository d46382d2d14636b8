#pragma once

#include "jepoo/autodiff.hpp"
#include "jepoo/losses.hpp"
#include "jepoo/paretosolver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace testing {

using jepoo::ad::Graph;
using jepoo::ad::Shape;
using jepoo::ad::Tensor;
using jepoo::ad::Var;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(shape);
    for (double& v : t.values) v = d(rng);
    t.requires_grad = true;
    return t;
}

// Builds a scalar from leaves bound into a fresh graph.
using ScalarFn = std::function<Var(Graph&, const std::vector<Var>&)>;

inline double evaluate(std::vector<Tensor>& leaves, const ScalarFn& f) {
    Graph g;
    std::vector<Var> vars;
    for (auto& t : leaves) vars.push_back(g.parameter(t));
    return f(g, vars).item();
}

// ||analytic - numeric|| / max(||analytic||, ||numeric||) over every leaf,
// with central differences of step h.
inline double gradient_error(std::vector<Tensor>& leaves, const ScalarFn& f, double h = 1e-5) {
    for (auto& t : leaves) t.zero_grad();
    {
        Graph g;
        std::vector<Var> vars;
        for (auto& t : leaves) vars.push_back(g.parameter(t));
        g.backward(f(g, vars));
        g.accumulate_parameter_grads();
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (auto& t : leaves) {
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            const double keep = t.values[i];
            t.values[i] = keep + h;
            const double up = evaluate(leaves, f);
            t.values[i] = keep - h;
            const double down = evaluate(leaves, f);
            t.values[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = t.grad[i];
            diff += (analytic - numeric) * (analytic - numeric);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

// Projects a tensor output to a scalar with fixed random weights, so every
// output element contributes a distinct cotangent.
inline Var project(Var y, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    Tensor w = random_tensor(y.shape(), rng);
    w.requires_grad = false;
    return jepoo::ad::dot(y, y.graph().constant(std::move(w)));
}

// One finite-difference scenario: leaves drawn from a seed, and a scalar built
// from them.
struct GradCase {
    std::string name;
    std::function<std::vector<Tensor>(std::uint64_t seed)> leaves;
    std::function<ScalarFn(std::uint64_t seed)> scalar;
};

inline double run_case(const GradCase& c, std::uint64_t seed) {
    std::vector<Tensor> leaves = c.leaves(seed);
    return gradient_error(leaves, c.scalar(seed));
}

namespace detail {

using Make = std::function<std::vector<Tensor>(std::mt19937_64&)>;
using Fn = std::function<Var(const std::vector<Var>&)>;

inline GradCase kernel(std::string name, Make make, Fn fn) {
    return {std::move(name),
            [make](std::uint64_t seed) {
                std::mt19937_64 rng(seed * 7919 + 1);
                return make(rng);
            },
            [fn](std::uint64_t seed) -> ScalarFn {
                return [fn, seed](Graph&, const std::vector<Var>& v) { return project(fn(v), seed); };
            }};
}

} // namespace detail

// Every differentiable kernel, plus a composite chain.
inline std::vector<GradCase> kernel_cases() {
    using namespace jepoo::ad;
    using detail::kernel;
    const detail::Make two = [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)};
    };
    std::vector<GradCase> out;
    out.push_back(kernel("add", two, [](const std::vector<Var>& v) { return add(v[0], v[1]); }));
    out.push_back(kernel("mul", two, [](const std::vector<Var>& v) { return mul(v[0], v[1]); }));
    out.push_back(kernel("scale", two, [](const std::vector<Var>& v) { return scale(v[0], -1.7); }));
    out.push_back(kernel("relu", two, [](const std::vector<Var>& v) { return relu(v[0]); }));
    out.push_back(kernel("sigmoid", two, [](const std::vector<Var>& v) { return sigmoid(v[0]); }));
    out.push_back(kernel("tanh", two, [](const std::vector<Var>& v) { return tanh(v[0]); }));
    out.push_back(kernel("sum", two, [](const std::vector<Var>& v) { return sum(mul(v[0], v[1])); }));
    out.push_back(
        kernel("mean", two, [](const std::vector<Var>& v) { return mean(mul(v[0], v[0])); }));
    out.push_back(kernel("dot", two, [](const std::vector<Var>& v) { return dot(v[0], v[1]); }));
    for (auto [kh, kw] : {std::pair<std::size_t, std::size_t>{3, 3}, {1, 1}, {1, 3}, {3, 1}}) {
        out.push_back(kernel(
            "conv2d " + std::to_string(kh) + "x" + std::to_string(kw),
            [kh, kw](std::mt19937_64& rng) {
                return std::vector<Tensor>{random_tensor({2, 2, 4, 5}, rng),
                                           random_tensor({3, 2, kh, kw}, rng),
                                           random_tensor({3}, rng)};
            },
            [](const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2]); }));
    }
    out.push_back(kernel(
        "maxpool",
        [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor({2, 2, 3, 7}, rng)}; },
        [](const std::vector<Var>& v) { return maxpool_last2(v[0]); }));
    out.push_back(kernel(
        "image_to_sequence",
        [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor({2, 3, 4, 2}, rng)}; },
        [](const std::vector<Var>& v) { return image_to_sequence(v[0]); }));
    out.push_back(kernel(
        "linear",
        [](std::mt19937_64& rng) {
            return std::vector<Tensor>{random_tensor({2, 3, 5}, rng), random_tensor({5, 4}, rng),
                                       random_tensor({4}, rng)};
        },
        [](const std::vector<Var>& v) { return linear(v[0], v[1], v[2]); }));
    out.push_back(kernel(
        "concat",
        [](std::mt19937_64& rng) {
            return std::vector<Tensor>{random_tensor({2, 3, 2}, rng), random_tensor({2, 3, 4}, rng)};
        },
        [](const std::vector<Var>& v) { return concat_last({v[0], v[1], v[0]}); }));
    out.push_back(kernel(
        "softmax",
        [](std::mt19937_64& rng) {
            return std::vector<Tensor>{random_tensor({3, 5}, rng, -3.0, 3.0)};
        },
        [](const std::vector<Var>& v) { return softmax(v[0]); }));
    out.push_back(kernel(
        "stack_scalars",
        [](std::mt19937_64& rng) {
            return std::vector<Tensor>{random_tensor({4}, rng), random_tensor({4}, rng)};
        },
        [](const std::vector<Var>& v) {
            return stack_scalars({dot(v[0], v[1]), sum(v[0]), dot(v[1], v[1])});
        }));
    out.push_back(kernel(
        "bilstm",
        [](std::mt19937_64& rng) {
            const std::size_t D = 3, H = 2;
            std::vector<Tensor> t{random_tensor({2, 4, D}, rng)};
            for (int dir = 0; dir < 2; ++dir) {
                t.push_back(random_tensor({D, 4 * H}, rng));
                t.push_back(random_tensor({H, 4 * H}, rng));
                t.push_back(random_tensor({4 * H}, rng));
            }
            return t;
        },
        [](const std::vector<Var>& v) {
            return bilstm(v[0], {v[1], v[2], v[3]}, {v[4], v[5], v[6]});
        }));
    out.push_back(kernel(
        "conv-relu-pool-linear chain",
        [](std::mt19937_64& rng) {
            return std::vector<Tensor>{random_tensor({1, 1, 3, 6}, rng),
                                       random_tensor({2, 1, 3, 3}, rng), random_tensor({2}, rng),
                                       random_tensor({6, 3}, rng), random_tensor({3}, rng)};
        },
        [](const std::vector<Var>& v) {
            const Var h = relu(conv2d(v[0], v[1], v[2]));
            const Var seq = image_to_sequence(maxpool_last2(h)); // [1, 3, 6]
            return sigmoid(linear(seq, v[3], v[4]));
        }));
    return out;
}

// Three sigmoid logit vectors, each through the per-element loss, weighted by
// the PML head applied to a fixed omega, plus 0.04 * LWR. Leaves are the logits
// and the head's weight and bias.
inline GradCase loss_path_case(double gamma = 0.0) {
    using namespace jepoo;
    return {"pml + lwr loss path",
            [](std::uint64_t seed) {
                std::mt19937_64 rng(seed + 300);
                return std::vector<Tensor>{random_tensor({10}, rng, -3, 3),
                                           random_tensor({10}, rng, -3, 3),
                                           random_tensor({10}, rng, -3, 3),
                                           random_tensor({3, 3}, rng), random_tensor({3}, rng)};
            },
            [gamma](std::uint64_t seed) -> ScalarFn {
                std::mt19937_64 rng(seed + 900);
                std::vector<std::vector<std::uint8_t>> labels(3, std::vector<std::uint8_t>(10));
                for (auto& task : labels)
                    for (auto& l : task) l = rng() % 2;
                std::uniform_real_distribution<double> u(0.1, 1.0);
                std::vector<double> omega{u(rng), u(rng), u(rng)};
                const double s = omega[0] + omega[1] + omega[2];
                for (double& v : omega) v /= s;
                return [labels, omega, gamma](Graph& g, const std::vector<Var>& v) {
                    const Var w = pml_weights(g.constant(Tensor({3}, omega)), v[3], v[4]);
                    std::vector<Var> l;
                    for (int t = 0; t < 3; ++t)
                        l.push_back(lossops::element_loss(ad::sigmoid(v[t]), labels[t], 1.0,
                                                          gamma, false));
                    return ad::add(lossops::weighted_sum(w, l),
                                   ad::scale(lossops::lwr(w, 2.0), 0.04));
                };
            }};
}

} // namespace testing
