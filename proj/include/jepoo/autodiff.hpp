#pragma once

// Minimal reverse-mode autodiff over 64-bit tensors.
//
// A Graph records operations in creation order, which is a valid topological
// order, and replays their backward closures in reverse. Parameters live
// outside the graph (in ModelParams); Graph::parameter binds one as a leaf and
// accumulate_parameter_grads() pushes the leaf gradients back into it.
//
// A Graph must stay on one thread; distinct graphs are independent.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace jepoo::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until gradients are accumulated
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> v);

    std::size_t size() const { return values.size(); }
    void zero_grad();
};

class Graph;

// Lightweight handle to a node of a Graph.
class Var {
public:
    Var() = default;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    const Shape& shape() const;
    std::span<const double> values() const;
    // Zero-length when the node received no gradient.
    std::span<const double> grad() const;
    double item() const;

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    // Leaf bound to an external tensor; receives gradients when
    // value.requires_grad is set.
    Var parameter(Tensor& value);

    // Reverse sweep from a scalar. Clears gradients from any earlier sweep,
    // so the same graph can be differentiated from several roots.
    void backward(Var loss);
    // Adds every bound leaf's gradient into the external tensor's grad.
    void accumulate_parameter_grads();

    // --- kernel-facing API ------------------------------------------------
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Shape& shape(std::size_t id) const { return nodes_[id].value.shape; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    // Gradient of a node; empty span when it has not been touched.
    std::span<const double> grad(std::size_t id) const;
    // Mutable gradient buffer, zero-initialised on first access.
    std::span<double> grad_mut(std::size_t id);
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Tensor* bound = nullptr;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;
};

// --- kernels --------------------------------------------------------------

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);

// x [N, C, T, F], w [C', C, kh, kw], b [C'] -> [N, C', T, F], zero "same"
// padding, kh and kw in {1, 3}.
Var conv2d(Var x, Var w, Var b);

// Max over pairs along the last axis; a trailing odd element is dropped.
// Ties go to the lower index.
Var maxpool_last2(Var x);

// x [..., D] @ w [D, O] + b [O] -> [..., O].
Var linear(Var x, Var w, Var b);

// Concatenates along the last axis; leading axes must agree.
Var concat_last(const std::vector<Var>& parts);

// Softmax over the last axis.
Var softmax(Var x);

// [N, C, T, F] -> [N, T, C * F], channel-major within each frame.
Var image_to_sequence(Var x);

// Packs scalar nodes into a vector [n].
Var stack_scalars(const std::vector<Var>& scalars);

// Inner product of two equal-shape tensors -> scalar.
Var dot(Var a, Var b);

struct LstmWeights {
    Var w_input;     // [D, 4H], gate order i, f, g, o
    Var w_recurrent; // [H, 4H]
    Var bias;        // [4H]
};

// Bidirectional LSTM. x [N, T, D] -> [N, T, 2H] with output at t equal to
// [h_forward(t); h_backward(t)].
Var bilstm(Var x, const LstmWeights& forward, const LstmWeights& backward);

} // namespace jepoo::ad
