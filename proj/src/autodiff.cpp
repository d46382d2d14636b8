#include "jepoo/autodiff.hpp"

#include "jepoo/error.hpp"

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

namespace jepoo::ad {

namespace {

#if defined(__GLIBC__)
// Graph buffers are large and short-lived. Keeping them on the heap instead
// of fresh mmap regions avoids a page-fault storm on every step.
const bool kHeapTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
}();
#endif

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const Mat>;
using MapM = Eigen::Map<Mat>;

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

void require_same(const Shape& a, const Shape& b, const char* op) {
    require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline double sigmoid_scalar(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

// Column layout for a same-padded convolution: row (c, dh, dw) of the
// [C*KH*KW, T*F] matrix holds the input plane c shifted by (dh, dw).
struct ConvGeometry {
    std::size_t C, T, F, KH, KW;

    std::size_t plane() const { return T * F; }
    bool pointwise() const { return KH == 1 && KW == 1; }

    // Returns the column matrix; a 1x1 kernel reads the input directly.
    const double* columns(const double* x, std::vector<double>& buf) const {
        if (pointwise()) return x;
        buf.resize(C * KH * KW * plane());
        const long ph = static_cast<long>(KH / 2), pw = static_cast<long>(KW / 2);
        double* dst = buf.data();
        for (std::size_t c = 0; c < C; ++c) {
            const double* src = x + c * plane();
            for (std::size_t dh = 0; dh < KH; ++dh) {
                for (std::size_t dw = 0; dw < KW; ++dw, dst += plane()) {
                    const long ofs = static_cast<long>(dw) - pw;
                    for (std::size_t t = 0; t < T; ++t) {
                        double* d = dst + t * F;
                        const long ti = static_cast<long>(t) + static_cast<long>(dh) - ph;
                        if (ti < 0 || ti >= static_cast<long>(T)) {
                            std::fill(d, d + F, 0.0);
                            continue;
                        }
                        const double* s = src + static_cast<std::size_t>(ti) * F;
                        const std::size_t f0 = ofs < 0 ? static_cast<std::size_t>(-ofs) : 0;
                        const std::size_t f1 = ofs > 0 ? F - static_cast<std::size_t>(ofs) : F;
                        std::fill(d, d + f0, 0.0);
                        std::copy(s + f0 + ofs, s + f1 + ofs, d + f0);
                        std::fill(d + f1, d + F, 0.0);
                    }
                }
            }
        }
        return buf.data();
    }

    // Adds a column-matrix gradient back onto the input gradient.
    void scatter_columns(const double* cols, double* gx) const {
        const long ph = static_cast<long>(KH / 2), pw = static_cast<long>(KW / 2);
        const double* src = cols;
        for (std::size_t c = 0; c < C; ++c) {
            double* dstp = gx + c * plane();
            for (std::size_t dh = 0; dh < KH; ++dh) {
                for (std::size_t dw = 0; dw < KW; ++dw, src += plane()) {
                    const long ofs = static_cast<long>(dw) - pw;
                    const std::size_t f0 = ofs < 0 ? static_cast<std::size_t>(-ofs) : 0;
                    const std::size_t f1 = ofs > 0 ? F - static_cast<std::size_t>(ofs) : F;
                    for (std::size_t t = 0; t < T; ++t) {
                        const long ti = static_cast<long>(t) + static_cast<long>(dh) - ph;
                        if (ti < 0 || ti >= static_cast<long>(T)) continue;
                        double* d = dstp + static_cast<std::size_t>(ti) * F + ofs;
                        const double* s = src + t * F;
                        for (std::size_t f = f0; f < f1; ++f) d[f] += s[f];
                    }
                }
            }
        }
    }
};

// Bias reductions in a fixed order. Eigen's vectorised reductions peel by
// buffer address, which makes results depend on where the heap put them.
void add_column_sums(const double* m, std::size_t rows, std::size_t cols, double* out) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += m[r * cols + c];
}

void add_row_sums(const double* m, std::size_t rows, std::size_t cols, double* out) {
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += m[r * cols + c];
        out[r] += acc;
    }
}

// Unary elementwise op with derivative expressed through input and output.
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
    Graph& g = a.graph();
    const Tensor& x = g.value(a.id());
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.values[i] = fwd(x.values[i]);
    const std::size_t in = a.id();
    return g.record(std::move(y), {in}, [in, deriv](Graph& gr, std::size_t self) {
        if (!gr.needs_grad(in)) return;
        const auto& xv = gr.value(in).values;
        const auto& yv = gr.value(self).values;
        auto gy = gr.grad(self);
        auto gx = gr.grad_mut(in);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
    });
}

} // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), values(numel(shape), fill) {
    if (shape.size() > 4) throw ShapeError("tensors have at most 4 dimensions");
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (shape.size() > 4) throw ShapeError("tensors have at most 4 dimensions");
    if (values.size() != numel(shape))
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
}

void Tensor::zero_grad() { grad.assign(values.size(), 0.0); }

const Shape& Var::shape() const { return graph_->shape(id_); }

std::span<const double> Var::values() const { return graph_->value(id_).values; }

std::span<const double> Var::grad() const { return graph_->grad(id_); }

double Var::item() const {
    if (values().size() != 1) throw ContractError("item() on a non-scalar of shape " + shape_str(shape()));
    return values()[0];
}

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.value.grad.clear();
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor& value) {
    Node n;
    n.value.shape = value.shape;
    n.value.values = value.values;
    n.bound = &value;
    n.needs_grad = value.requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (auto in : inputs) n.needs_grad = n.needs_grad || nodes_.at(in).needs_grad;
    n.inputs = std::move(inputs);
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

std::span<const double> Graph::grad(std::size_t id) const { return nodes_[id].grad; }

std::span<double> Graph::grad_mut(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.values.size(), 0.0);
    return n.grad;
}

void Graph::backward(Var loss) {
    if (&loss.graph() != this) throw ContractError("loss belongs to another graph");
    if (numel(shape(loss.id())) != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_str(shape(loss.id())));
    for (auto& n : nodes_) n.grad.clear();
    grad_mut(loss.id())[0] = 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, id);
    }
}

void Graph::accumulate_parameter_grads() {
    for (auto& n : nodes_) {
        if (n.bound == nullptr || !n.bound->requires_grad || n.grad.empty()) continue;
        if (n.bound->grad.size() != n.grad.size()) n.bound->grad.assign(n.grad.size(), 0.0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
    }
}

// --- elementwise ---------------------------------------------------------------

Var add(Var a, Var b) {
    Graph& g = a.graph();
    require_same(a.shape(), b.shape(), "add");
    Tensor y(a.shape());
    const auto& av = g.value(a.id()).values;
    const auto& bv = g.value(b.id()).values;
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av[i] + bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return g.record(std::move(y), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
        auto gy = gr.grad(self);
        for (auto in : {ia, ib}) {
            if (!gr.needs_grad(in)) continue;
            auto gx = gr.grad_mut(in);
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
    });
}

Var mul(Var a, Var b) {
    Graph& g = a.graph();
    require_same(a.shape(), b.shape(), "mul");
    Tensor y(a.shape());
    const auto& av = g.value(a.id()).values;
    const auto& bv = g.value(b.id()).values;
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av[i] * bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return g.record(std::move(y), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
        auto gy = gr.grad(self);
        const auto& av = gr.value(ia).values;
        const auto& bv = gr.value(ib).values;
        if (gr.needs_grad(ia)) {
            auto ga = gr.grad_mut(ia);
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (gr.needs_grad(ib)) {
            auto gb = gr.grad_mut(ib);
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
        }
    });
}

Var scale(Var a, double factor) {
    return unary(a, [factor](double x) { return factor * x; },
                 [factor](double, double) { return factor; });
}

Var relu(Var a) {
    // NaN passes through so a broken forward pass surfaces in the loss.
    return unary(a, [](double x) { return x > 0.0 || std::isnan(x) ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
    return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); },
                 [](double, double y) { return 1.0 - y * y; });
}

Var sum(Var a) {
    Graph& g = a.graph();
    const auto& av = g.value(a.id()).values;
    double acc = 0.0;
    for (double v : av) acc += v;
    const std::size_t in = a.id();
    return g.record(Tensor({1}, acc), {in}, [in](Graph& gr, std::size_t self) {
        const double gy = gr.grad(self)[0];
        auto gx = gr.grad_mut(in);
        for (double& v : gx) v += gy;
    });
}

Var mean(Var a) {
    const std::size_t n = a.values().size();
    if (n == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var dot(Var a, Var b) {
    Graph& g = a.graph();
    require_same(a.shape(), b.shape(), "dot");
    const auto& av = g.value(a.id()).values;
    const auto& bv = g.value(b.id()).values;
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return g.record(Tensor({1}, acc), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
        const double gy = gr.grad(self)[0];
        const auto& av = gr.value(ia).values;
        const auto& bv = gr.value(ib).values;
        if (gr.needs_grad(ia)) {
            auto ga = gr.grad_mut(ia);
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += gy * bv[i];
        }
        if (gr.needs_grad(ib)) {
            auto gb = gr.grad_mut(ib);
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] += gy * av[i];
        }
    });
}

Var stack_scalars(const std::vector<Var>& scalars) {
    require(!scalars.empty(), "stack_scalars: no inputs");
    Graph& g = scalars.front().graph();
    Tensor y({scalars.size()});
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        require(scalars[i].values().size() == 1, "stack_scalars: input is not a scalar");
        y.values[i] = scalars[i].values()[0];
        ids.push_back(scalars[i].id());
    }
    return g.record(std::move(y), ids, [ids](Graph& gr, std::size_t self) {
        auto gy = gr.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (gr.needs_grad(ids[i])) gr.grad_mut(ids[i])[0] += gy[i];
    });
}

// --- convolution -------------------------------------------------------------

Var conv2d(Var x, Var w, Var b) {
    Graph& g = x.graph();
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    require(xs.size() == 4, "conv2d: input must be [N, C, T, F], got " + shape_str(xs));
    require(ws.size() == 4, "conv2d: kernel must be [C', C, kh, kw], got " + shape_str(ws));
    require(ws[1] == xs[1], "conv2d: channel mismatch, input " + shape_str(xs) + " kernel " +
                                shape_str(ws));
    require((ws[2] == 1 || ws[2] == 3) && (ws[3] == 1 || ws[3] == 3),
            "conv2d: kernel must be 1x1 or 3x3 in each axis");
    require(b.shape() == Shape{ws[0]}, "conv2d: bias shape " + shape_str(b.shape()));

    const ConvGeometry geo{xs[1], xs[2], xs[3], ws[2], ws[3]};
    const std::size_t N = xs[0], Co = ws[0];
    const auto K = static_cast<Eigen::Index>(geo.C * geo.KH * geo.KW);
    const auto P = static_cast<Eigen::Index>(geo.plane());
    const auto in_stride = geo.C * geo.plane();

    Tensor y({N, Co, geo.T, geo.F});
    const double* xv = g.value(x.id()).values.data();
    const MapC W(g.value(w.id()).values.data(), static_cast<Eigen::Index>(Co), K);
    const Eigen::Map<const Eigen::VectorXd> bias(g.value(b.id()).values.data(),
                                                 static_cast<Eigen::Index>(Co));
    std::vector<double> cols;
    for (std::size_t n = 0; n < N; ++n) {
        const double* cp = geo.columns(xv + n * in_stride, cols);
        MapM Y(y.values.data() + n * Co * geo.plane(), static_cast<Eigen::Index>(Co), P);
        Y.noalias() = W * MapC(cp, K, P);
        Y.colwise() += bias;
    }

    const std::size_t ix_ = x.id(), iw = w.id(), ib = b.id();
    return g.record(std::move(y), {ix_, iw, ib},
                    [=](Graph& gr, std::size_t self) {
        const double* gy = gr.grad(self).data();
        const double* xv = gr.value(ix_).values.data();
        const MapC W(gr.value(iw).values.data(), static_cast<Eigen::Index>(Co), K);
        const bool want_x = gr.needs_grad(ix_), want_w = gr.needs_grad(iw),
                   want_b = gr.needs_grad(ib);
        double* gx = want_x ? gr.grad_mut(ix_).data() : nullptr;
        double* gw = want_w ? gr.grad_mut(iw).data() : nullptr;
        double* gb = want_b ? gr.grad_mut(ib).data() : nullptr;
        std::vector<double> cols;
        Mat gcols;
        for (std::size_t n = 0; n < N; ++n) {
            const MapC GY(gy + n * Co * geo.plane(), static_cast<Eigen::Index>(Co), P);
            if (gb) add_row_sums(gy + n * Co * geo.plane(), Co, geo.plane(), gb);
            if (gw) {
                const double* cp = geo.columns(xv + n * in_stride, cols);
                MapM GW(gw, static_cast<Eigen::Index>(Co), K);
                GW.noalias() += GY * MapC(cp, K, P).transpose();
            }
            if (gx) {
                if (geo.pointwise()) {
                    MapM GX(gx + n * in_stride, K, P);
                    GX.noalias() += W.transpose() * GY;
                } else {
                    gcols.noalias() = W.transpose() * GY;
                    geo.scatter_columns(gcols.data(), gx + n * in_stride);
                }
            }
        }
    });
}

// --- pooling / reshaping --------------------------------------------------------

Var maxpool_last2(Var x) {
    Graph& g = x.graph();
    const Shape& xs = x.shape();
    require(!xs.empty() && xs.back() >= 2, "maxpool: last axis must hold at least 2 elements");
    const std::size_t F = xs.back();
    const std::size_t Fo = F / 2;
    const std::size_t rows = numel(xs) / F;
    Shape ys = xs;
    ys.back() = Fo;
    Tensor y(ys);
    std::vector<std::size_t> argmax(y.size());
    const auto& xv = g.value(x.id()).values;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < Fo; ++j) {
            const std::size_t a = r * F + 2 * j;
            const std::size_t pick = xv[a] >= xv[a + 1] || std::isnan(xv[a]) ? a : a + 1;
            y.values[r * Fo + j] = xv[pick];
            argmax[r * Fo + j] = pick;
        }
    }
    const std::size_t in = x.id();
    return g.record(std::move(y), {in},
                    [in, argmax = std::move(argmax)](Graph& gr, std::size_t self) {
        auto gy = gr.grad(self);
        auto gx = gr.grad_mut(in);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
    });
}

Var image_to_sequence(Var x) {
    Graph& g = x.graph();
    const Shape& xs = x.shape();
    require(xs.size() == 4, "image_to_sequence: input must be [N, C, T, F]");
    const std::size_t N = xs[0], C = xs[1], T = xs[2], F = xs[3];
    Tensor y({N, T, C * F});
    const auto& xv = g.value(x.id()).values;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < T; ++t)
                std::copy_n(xv.begin() + static_cast<long>(((n * C + c) * T + t) * F), F,
                            y.values.begin() + static_cast<long>((n * T + t) * C * F + c * F));
    const std::size_t in = x.id();
    return g.record(std::move(y), {in}, [=](Graph& gr, std::size_t self) {
        auto gy = gr.grad(self);
        auto gx = gr.grad_mut(in);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < T; ++t) {
                    double* dst = gx.data() + ((n * C + c) * T + t) * F;
                    const double* src = gy.data() + (n * T + t) * C * F + c * F;
                    for (std::size_t f = 0; f < F; ++f) dst[f] += src[f];
                }
    });
}

Var concat_last(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat: no inputs");
    Graph& g = parts.front().graph();
    const Shape& first = parts.front().shape();
    require(!first.empty(), "concat: scalar inputs");
    const std::size_t rows = numel(first) / first.back();
    std::vector<std::size_t> widths, ids;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        require(s.size() == first.size() &&
                    std::equal(s.begin(), s.end() - 1, first.begin()),
                "concat: leading axes differ, " + shape_str(s) + " vs " + shape_str(first));
        widths.push_back(s.back());
        ids.push_back(p.id());
        total += s.back();
    }
    Shape ys = first;
    ys.back() = total;
    Tensor y(ys);
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = g.value(ids[k]).values;
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(pv.begin() + static_cast<long>(r * widths[k]), widths[k],
                        y.values.begin() + static_cast<long>(r * total + col));
        col += widths[k];
    }
    return g.record(std::move(y), ids, [=](Graph& gr, std::size_t self) {
        auto gy = gr.grad(self);
        std::size_t c = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (gr.needs_grad(ids[k])) {
                auto gx = gr.grad_mut(ids[k]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j)
                        gx[r * widths[k] + j] += gy[r * total + c + j];
            }
            c += widths[k];
        }
    });
}

Var softmax(Var x) {
    Graph& g = x.graph();
    const Shape& xs = x.shape();
    require(!xs.empty() && xs.back() > 0 && numel(xs) > 0, "softmax: empty input");
    const std::size_t D = xs.back();
    const std::size_t rows = numel(xs) / D;
    Tensor y(xs);
    const auto& xv = g.value(x.id()).values;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * D;
        double* out = y.values.data() + r * D;
        const double mx = *std::max_element(in, in + D);
        double z = 0.0;
        for (std::size_t j = 0; j < D; ++j) z += (out[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < D; ++j) out[j] /= z;
    }
    const std::size_t in = x.id();
    return g.record(std::move(y), {in}, [=](Graph& gr, std::size_t self) {
        auto gy = gr.grad(self);
        const auto& yv = gr.value(self).values;
        auto gx = gr.grad_mut(in);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < D; ++j) s += gy[r * D + j] * yv[r * D + j];
            for (std::size_t j = 0; j < D; ++j)
                gx[r * D + j] += yv[r * D + j] * (gy[r * D + j] - s);
        }
    });
}

// --- dense layers ------------------------------------------------------------------

Var linear(Var x, Var w, Var b) {
    Graph& g = x.graph();
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    require(ws.size() == 2, "linear: weight must be [D, O], got " + shape_str(ws));
    require(!xs.empty() && xs.back() == ws[0],
            "linear: input " + shape_str(xs) + " does not match weight " + shape_str(ws));
    require(b.shape() == Shape{ws[1]}, "linear: bias shape " + shape_str(b.shape()));
    const std::size_t D = ws[0], O = ws[1];
    const std::size_t rows = numel(xs) / D;
    Shape ys = xs;
    ys.back() = O;
    Tensor y(ys);
    {
        MapC X(g.value(x.id()).values.data(), ix(rows), ix(D));
        MapC W(g.value(w.id()).values.data(), ix(D), ix(O));
        Eigen::Map<const Eigen::RowVectorXd> B(g.value(b.id()).values.data(), ix(O));
        MapM Y(y.values.data(), ix(rows), ix(O));
        Y.noalias() = X * W;
        Y.rowwise() += B;
    }
    const std::size_t ix_ = x.id(), iw = w.id(), ib = b.id();
    return g.record(std::move(y), {ix_, iw, ib}, [=](Graph& gr, std::size_t self) {
        MapC GY(gr.grad(self).data(), ix(rows), ix(O));
        if (gr.needs_grad(ix_)) {
            MapM GX(gr.grad_mut(ix_).data(), ix(rows), ix(D));
            MapC W(gr.value(iw).values.data(), ix(D), ix(O));
            GX.noalias() += GY * W.transpose();
        }
        if (gr.needs_grad(iw)) {
            MapM GW(gr.grad_mut(iw).data(), ix(D), ix(O));
            MapC X(gr.value(ix_).values.data(), ix(rows), ix(D));
            GW.noalias() += X.transpose() * GY;
        }
        if (gr.needs_grad(ib)) add_column_sums(GY.data(), rows, O, gr.grad_mut(ib).data());
    });
}

// --- recurrent ---------------------------------------------------------------------

namespace {

struct LstmCache {
    Mat acts;  // [N*T, 4H] post-activation gates i, f, g, o
    Mat cells; // [N*T, H]
    Mat hs;    // [N*T, H]
};

// Row of (n, t) in [N*T, *] matrices.
inline Eigen::Index row_of(std::size_t n, std::size_t t, std::size_t T) {
    return ix(n * T + t);
}

void lstm_forward(const MapC& X, const MapC& Wx, const MapC& Wh,
                  const Eigen::Map<const Eigen::RowVectorXd>& B, std::size_t N, std::size_t T,
                  std::size_t H, bool reverse, LstmCache& cache, double* out, std::size_t out_stride,
                  std::size_t out_col) {
    const Eigen::Index H4 = ix(4 * H);
    Mat xw = X * Wx; // [N*T, 4H]
    cache.acts.resize(ix(N * T), H4);
    cache.cells.resize(ix(N * T), ix(H));
    cache.hs.resize(ix(N * T), ix(H));
    Mat h_prev = Mat::Zero(ix(N), ix(H));
    Mat c_prev = Mat::Zero(ix(N), ix(H));
    Mat gates(ix(N), H4);
    for (std::size_t s = 0; s < T; ++s) {
        const std::size_t t = reverse ? T - 1 - s : s;
        gates.noalias() = h_prev * Wh;
        for (std::size_t n = 0; n < N; ++n) {
            const Eigen::Index r = row_of(n, t, T);
            for (Eigen::Index j = 0; j < H4; ++j) gates(ix(n), j) += xw(r, j) + B(j);
            for (std::size_t j = 0; j < H; ++j) {
                const double i = sigmoid_scalar(gates(ix(n), ix(j)));
                const double f = sigmoid_scalar(gates(ix(n), ix(H + j)));
                const double gg = std::tanh(gates(ix(n), ix(2 * H + j)));
                const double o = sigmoid_scalar(gates(ix(n), ix(3 * H + j)));
                const double c = f * c_prev(ix(n), ix(j)) + i * gg;
                const double h = o * std::tanh(c);
                cache.acts(r, ix(j)) = i;
                cache.acts(r, ix(H + j)) = f;
                cache.acts(r, ix(2 * H + j)) = gg;
                cache.acts(r, ix(3 * H + j)) = o;
                cache.cells(r, ix(j)) = c;
                cache.hs(r, ix(j)) = h;
                c_prev(ix(n), ix(j)) = c;
                h_prev(ix(n), ix(j)) = h;
                out[(n * T + t) * out_stride + out_col + j] = h;
            }
        }
    }
}

// Accumulates gradients for one direction. `gout` is the [N, T, 2H] output
// gradient; this direction reads columns [out_col, out_col + H).
void lstm_backward(const LstmCache& cache, const MapC& X, const MapC& Wx, const MapC& Wh,
                   std::size_t N, std::size_t T, std::size_t H, bool reverse, const double* gout,
                   std::size_t out_stride, std::size_t out_col, double* gx, double* gwx,
                   double* gwh, double* gb) {
    const std::size_t D = static_cast<std::size_t>(X.cols());
    const Eigen::Index H4 = ix(4 * H);
    Mat dgates_all = Mat::Zero(ix(N * T), H4);
    Mat dh_next = Mat::Zero(ix(N), ix(H));
    Mat dc_next = Mat::Zero(ix(N), ix(H));
    Mat dgates(ix(N), H4);
    Mat h_prev(ix(N), ix(H));
    Mat gwh_acc = Mat::Zero(ix(H), H4);
    for (std::size_t s = T; s-- > 0;) {
        const std::size_t t = reverse ? T - 1 - s : s;
        const bool has_prev = s > 0;
        const std::size_t tp = reverse ? t + 1 : t - 1;
        for (std::size_t n = 0; n < N; ++n) {
            const Eigen::Index r = row_of(n, t, T);
            const Eigen::Index rp = has_prev ? row_of(n, tp, T) : 0;
            for (std::size_t j = 0; j < H; ++j) {
                const double i = cache.acts(r, ix(j));
                const double f = cache.acts(r, ix(H + j));
                const double gg = cache.acts(r, ix(2 * H + j));
                const double o = cache.acts(r, ix(3 * H + j));
                const double c = cache.cells(r, ix(j));
                const double cp = has_prev ? cache.cells(rp, ix(j)) : 0.0;
                const double tc = std::tanh(c);
                const double dh = gout[(n * T + t) * out_stride + out_col + j] + dh_next(ix(n), ix(j));
                const double dout = dh * tc;
                const double dc = dh * o * (1.0 - tc * tc) + dc_next(ix(n), ix(j));
                dc_next(ix(n), ix(j)) = dc * f;
                dgates(ix(n), ix(j)) = dc * gg * i * (1.0 - i);
                dgates(ix(n), ix(H + j)) = dc * cp * f * (1.0 - f);
                dgates(ix(n), ix(2 * H + j)) = dc * i * (1.0 - gg * gg);
                dgates(ix(n), ix(3 * H + j)) = dout * o * (1.0 - o);
                h_prev(ix(n), ix(j)) = has_prev ? cache.hs(rp, ix(j)) : 0.0;
            }
            dgates_all.row(r) = dgates.row(ix(n));
        }
        if (gwh) gwh_acc.noalias() += h_prev.transpose() * dgates;
        dh_next.noalias() = dgates * Wh.transpose();
    }
    if (gwh) MapM(gwh, ix(H), H4) += gwh_acc;
    if (gb) add_column_sums(dgates_all.data(), N * T, 4 * H, gb);
    if (gwx) MapM(gwx, ix(D), H4).noalias() += X.transpose() * dgates_all;
    if (gx) MapM(gx, ix(N * T), ix(D)).noalias() += dgates_all * Wx.transpose();
}

} // namespace

Var bilstm(Var x, const LstmWeights& fwd, const LstmWeights& bwd) {
    Graph& g = x.graph();
    const Shape& xs = x.shape();
    require(xs.size() == 3, "bilstm: input must be [N, T, D], got " + shape_str(xs));
    const std::size_t N = xs[0], T = xs[1], D = xs[2];
    const std::size_t H = fwd.w_recurrent.shape().at(0);
    for (const auto* p : {&fwd, &bwd}) {
        require(p->w_input.shape() == Shape{D, 4 * H},
                "bilstm: input weight " + shape_str(p->w_input.shape()) + " expected " +
                    shape_str({D, 4 * H}));
        require(p->w_recurrent.shape() == Shape{H, 4 * H}, "bilstm: recurrent weight shape");
        require(p->bias.shape() == Shape{4 * H}, "bilstm: bias shape");
    }

    Tensor y({N, T, 2 * H});
    auto caches = std::make_shared<std::array<LstmCache, 2>>();
    const std::size_t ixx = x.id();
    const std::array<const LstmWeights*, 2> dirs{&fwd, &bwd};
    MapC X(g.value(ixx).values.data(), ix(N * T), ix(D));
    for (std::size_t d = 0; d < 2; ++d) {
        const auto& p = *dirs[d];
        MapC Wx(g.value(p.w_input.id()).values.data(), ix(D), ix(4 * H));
        MapC Wh(g.value(p.w_recurrent.id()).values.data(), ix(H), ix(4 * H));
        Eigen::Map<const Eigen::RowVectorXd> B(g.value(p.bias.id()).values.data(), ix(4 * H));
        lstm_forward(X, Wx, Wh, B, N, T, H, d == 1, (*caches)[d], y.values.data(), 2 * H, d * H);
    }

    const std::array<std::array<std::size_t, 3>, 2> pids{
        {{fwd.w_input.id(), fwd.w_recurrent.id(), fwd.bias.id()},
         {bwd.w_input.id(), bwd.w_recurrent.id(), bwd.bias.id()}}};
    std::vector<std::size_t> inputs{ixx};
    for (const auto& d : pids) inputs.insert(inputs.end(), d.begin(), d.end());

    return g.record(std::move(y), inputs, [=](Graph& gr, std::size_t self) {
        const double* gout = gr.grad(self).data();
        MapC X(gr.value(ixx).values.data(), ix(N * T), ix(D));
        double* gx = gr.needs_grad(ixx) ? gr.grad_mut(ixx).data() : nullptr;
        for (std::size_t d = 0; d < 2; ++d) {
            const auto& [iwx, iwh, ib] = pids[d];
            MapC Wx(gr.value(iwx).values.data(), ix(D), ix(4 * H));
            MapC Wh(gr.value(iwh).values.data(), ix(H), ix(4 * H));
            double* gwx = gr.needs_grad(iwx) ? gr.grad_mut(iwx).data() : nullptr;
            double* gwh = gr.needs_grad(iwh) ? gr.grad_mut(iwh).data() : nullptr;
            double* gb = gr.needs_grad(ib) ? gr.grad_mut(ib).data() : nullptr;
            lstm_backward((*caches)[d], X, Wx, Wh, N, T, H, d == 1, gout, 2 * H, d * H, gx, gwx,
                          gwh, gb);
        }
    });
}

} // namespace jepoo::ad
