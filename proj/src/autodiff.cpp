#include "advbt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "advbt/detail/linalg.hpp"
#include "advbt/rng.hpp"

namespace advbt {

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph->value(*this); }

const Tensor& BackwardContext::out() const { return graph_.node_value(graph_.nodes_[node_]); }

std::span<const double> BackwardContext::out_grad() const { return graph_.nodes_[node_].grad; }

const Tensor& BackwardContext::in(std::size_t k) const {
    return graph_.node_value(graph_.nodes_[graph_.nodes_[node_].inputs.at(k)]);
}

bool BackwardContext::wants(std::size_t k) const {
    return graph_.nodes_[graph_.nodes_[node_].inputs.at(k)].needs_grad;
}

std::span<double> BackwardContext::in_grad(std::size_t k) {
    auto& input = graph_.nodes_[graph_.nodes_[node_].inputs.at(k)];
    if (input.grad.empty()) input.grad.assign(graph_.node_value(input).numel(), 0.0);
    return input.grad;
}

Var Graph::input(const Tensor& tensor) {
    if (auto it = bound_.find(&tensor); it != bound_.end()) return Var{this, it->second};
    Node n;
    n.op = "input";
    n.ref = &tensor;
    n.needs_grad = param_grads_ && tensor.requires_grad;
    n.sink = n.needs_grad;
    nodes_.push_back(std::move(n));
    bound_.emplace(&tensor, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
    Node n;
    n.op = "constant";
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Graph::leaf(Tensor value) {
    Node n;
    n.op = "leaf";
    n.owned = std::move(value);
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Node n;
    n.op = op;
    n.owned = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const auto& v : inputs) {
        if (v.graph != this || v.id >= nodes_.size()) {
            throw Error("invalid-argument", std::string(op) + ": input from another graph");
        }
        n.inputs.push_back(v.id);
        n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const { return node_value(nodes_.at(v.id)); }

std::span<const double> Graph::grad(Var v) const { return nodes_.at(v.id).grad; }

void Graph::backward(Var loss) {
    if (backward_done_) throw Error("invalid-argument", "backward called twice on one graph");
    const Tensor& lv = value(loss);
    if (lv.numel() != 1) {
        throw Error("non-scalar-loss", "backward needs a scalar loss, got " + shape_string(lv.shape));
    }
    backward_done_ = true;
    auto& root = nodes_.at(loss.id);
    if (!root.needs_grad) return;
    root.grad.assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
        BackwardContext ctx(*this, i);
        n.backward(ctx);
    }
    for (auto& n : nodes_) {
        if (n.sink && !n.grad.empty()) n.ref->accumulate_grad(n.grad);
    }
}

std::string Graph::dump() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const auto& n = nodes_[i];
        os << i << ' ' << n.op << ' ' << shape_string(node_value(n).shape);
        if (n.needs_grad) os << " grad";
        for (auto in : n.inputs) os << ' ' << in;
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

Tensor like(const Tensor& t) { return Tensor(t.shape, std::vector<double>(t.numel(), 0.0)); }

void require_same(Var a, Var b, const char* op) {
    if (a.graph != b.graph) throw Error("invalid-argument", std::string(op) + ": mixed graphs");
    require_same_shape(a.value(), b.value(), op);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw Error("shape-mismatch", std::string(op) + ": expected rank " + std::to_string(rank) +
                                          ", got " + shape_string(t.shape));
    }
}

}  // namespace

Var add(Var a, Var b) {
    require_same(a, b, "add");
    const auto& x = a.value();
    const auto& y = b.value();
    Tensor out = like(x);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.data[i] + y.data[i];
    return a.graph->record("add", std::move(out), {a, b}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        for (std::size_t k = 0; k < 2; ++k) {
            if (!ctx.wants(k)) continue;
            auto gi = ctx.in_grad(k);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    require_same(a, b, "sub");
    const auto& x = a.value();
    const auto& y = b.value();
    Tensor out = like(x);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.data[i] - y.data[i];
    return a.graph->record("sub", std::move(out), {a, b}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        if (ctx.wants(0)) {
            auto gi = ctx.in_grad(0);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
        if (ctx.wants(1)) {
            auto gi = ctx.in_grad(1);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    const auto& x = a.value();
    const auto& y = b.value();
    Tensor out = like(x);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.data[i] * y.data[i];
    return a.graph->record("mul", std::move(out), {a, b}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        const auto& x = ctx.in(0).data;
        const auto& y = ctx.in(1).data;
        if (ctx.wants(0)) {
            auto gi = ctx.in_grad(0);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * y[i];
        }
        if (ctx.wants(1)) {
            auto gi = ctx.in_grad(1);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * x[i];
        }
    });
}

Var scale(Var a, double s) {
    const auto& x = a.value();
    Tensor out = like(x);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = s * x.data[i];
    return a.graph->record("scale", std::move(out), {a}, [s](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gi = ctx.in_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += s * g[i];
    });
}

Var sum(Var a) {
    double total = 0.0;
    for (double v : a.value().data) total += v;
    return a.graph->record("sum", Tensor::scalar(total), {a}, [](BackwardContext& ctx) {
        const double g = ctx.out_grad()[0];
        for (double& gi : ctx.in_grad(0)) gi += g;
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().numel());
    double total = 0.0;
    for (double v : a.value().data) total += v;
    return a.graph->record("mean", Tensor::scalar(total / n), {a}, [n](BackwardContext& ctx) {
        const double g = ctx.out_grad()[0] / n;
        for (double& gi : ctx.in_grad(0)) gi += g;
    });
}

Var reshape(Var a, Shape shape) {
    const auto& x = a.value();
    if (shape_numel(shape) != x.numel()) {
        throw Error("shape-mismatch",
                    "reshape " + shape_string(x.shape) + " to " + shape_string(shape));
    }
    Tensor out(std::move(shape), x.data);
    return a.graph->record("reshape", std::move(out), {a}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gi = ctx.in_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
    const auto& x = a.value();
    const auto& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.shape[1] != y.shape[0]) {
        throw Error("shape-mismatch", "matmul: cannot multiply " + shape_string(x.shape) + " by " +
                                          shape_string(y.shape));
    }
    const std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_nn(m, k, n, x.data.data(), y.data.data(), out.data.data());
    return a.graph->record("matmul", std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        if (ctx.wants(0)) {
            detail::gemm_nt(m, n, k, g.data(), ctx.in(1).data.data(), ctx.in_grad(0).data());
        }
        if (ctx.wants(1)) {
            detail::gemm_tn(k, m, n, ctx.in(0).data.data(), g.data(), ctx.in_grad(1).data());
        }
    });
}

Var linear(Var x, Var w, Var b) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    const auto& bv = b.value();
    if (wv.rank() != 2 || xv.cols() != wv.shape[0] || bv.numel() != wv.shape[1]) {
        throw Error("shape-mismatch", "linear: input " + shape_string(xv.shape) + ", weight " +
                                          shape_string(wv.shape) + ", bias " +
                                          shape_string(bv.shape));
    }
    const std::size_t rows = xv.rows(), in = wv.shape[0], outd = wv.shape[1];
    Shape shape = xv.shape;
    shape.back() = outd;
    Tensor out(std::move(shape), std::vector<double>(rows * outd));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + r * outd);
    }
    detail::gemm_nn(rows, in, outd, xv.data.data(), wv.data.data(), out.data.data());
    return x.graph->record("linear", std::move(out), {x, w, b},
                           [rows, in, outd](BackwardContext& ctx) {
                               auto g = ctx.out_grad();
                               if (ctx.wants(0)) {
                                   detail::gemm_nt(rows, outd, in, g.data(),
                                                   ctx.in(1).data.data(), ctx.in_grad(0).data());
                               }
                               if (ctx.wants(1)) {
                                   detail::gemm_tn(in, rows, outd, ctx.in(0).data.data(), g.data(),
                                                   ctx.in_grad(1).data());
                               }
                               if (ctx.wants(2)) {
                                   auto gb = ctx.in_grad(2);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t j = 0; j < outd; ++j) {
                                           gb[j] += g[r * outd + j];
                                       }
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Normalisation and activations

Var softmax_rows(Var a) {
    const auto& x = a.value();
    const std::size_t rows = x.rows(), cols = x.cols();
    Tensor out = like(x);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * cols;
        double* yr = out.data.data() + r * cols;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < cols; ++j) {
            if (!std::isfinite(xr[j])) throw Error("non-finite", "softmax_rows: non-finite input");
            mx = std::max(mx, xr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        for (std::size_t j = 0; j < cols; ++j) yr[j] /= z;
    }
    return a.graph->record("softmax_rows", std::move(out), {a}, [rows, cols](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        const auto& y = ctx.out().data;
        auto gi = ctx.in_grad(0);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
            for (std::size_t j = 0; j < cols; ++j) {
                gi[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
            }
        }
    });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
    const auto& x = a.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    const std::size_t d = x.cols(), rows = x.rows();
    if (gv.numel() != d || bv.numel() != d) {
        throw Error("shape-mismatch", "layer_norm: input " + shape_string(x.shape) + ", gamma " +
                                          shape_string(gv.shape) + ", beta " +
                                          shape_string(bv.shape));
    }
    if (!(eps > 0.0)) throw Error("invalid-argument", "layer_norm: eps must be positive");
    Tensor out = like(x);
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * inv;
            xhat[r * d + j] = h;
            out.data[r * d + j] = gv.data[j] * h + bv.data[j];
        }
    }
    return a.graph->record(
        "layer_norm", std::move(out), {a, gamma, beta},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](BackwardContext& ctx) {
            auto g = ctx.out_grad();
            const auto& gam = ctx.in(1).data;
            if (ctx.wants(0)) {
                auto gx = ctx.in_grad(0);
                const double nd = static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gam[j];
                        s1 += dh;
                        s2 += dh * xhat[r * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gam[j];
                        gx[r * d + j] +=
                            inv_std[r] * (dh - s1 / nd - xhat[r * d + j] * s2 / nd);
                    }
                }
            }
            if (ctx.wants(1)) {
                auto gg = ctx.in_grad(1);
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
            }
            if (ctx.wants(2)) {
                auto gb = ctx.in_grad(2);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
            }
        });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}
}  // namespace

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Var activation(Var a, Activation kind) {
    const auto& x = a.value();
    Tensor out = like(x);
    if (kind == Activation::relu) {
        for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    } else {
        for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = gelu_value(x.data[i]);
    }
    return a.graph->record(kind == Activation::relu ? "relu" : "gelu", std::move(out), {a},
                           [kind](BackwardContext& ctx) {
                               auto g = ctx.out_grad();
                               const auto& x = ctx.in(0).data;
                               auto gi = ctx.in_grad(0);
                               if (kind == Activation::relu) {
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       if (x[i] > 0.0) gi[i] += g[i];
                                   }
                               } else {
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       gi[i] += g[i] * gelu_grad(x[i]);
                                   }
                               }
                           });
}

Var batch_norm_1d(Var a, Var gamma, Var beta, double eps, Mode mode, RunningStats* stats) {
    const auto& x = a.value();
    require_rank(x, 2, "batch_norm_1d");
    const std::size_t n = x.shape[0], d = x.shape[1];
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    if (gv.numel() != d || bv.numel() != d) {
        throw Error("shape-mismatch", "batch_norm_1d: input " + shape_string(x.shape) +
                                          ", gamma " + shape_string(gv.shape));
    }
    if (!(eps > 0.0)) throw Error("invalid-argument", "batch_norm_1d: eps must be positive");
    if (stats && (stats->mean.size() != d || stats->var.size() != d)) {
        throw Error("shape-mismatch", "batch_norm_1d: running statistics have the wrong width");
    }

    Tensor out = like(x);
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(d);
    if (mode == Mode::train) {
        if (n < 2) {
            throw Error("invalid-argument", "batch_norm_1d: train mode needs a batch of at least 2");
        }
        for (std::size_t j = 0; j < d; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < n; ++i) mu += x.data[i * d + j];
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double c = x.data[i * d + j] - mu;
                var += c * c;
            }
            var /= static_cast<double>(n);
            inv_std[j] = 1.0 / std::sqrt(var + eps);
            for (std::size_t i = 0; i < n; ++i) {
                xhat[i * d + j] = (x.data[i * d + j] - mu) * inv_std[j];
            }
            if (stats) {
                const double m = stats->momentum;
                const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
                stats->mean[j] = (1.0 - m) * stats->mean[j] + m * mu;
                stats->var[j] = (1.0 - m) * stats->var[j] + m * unbiased;
            }
        }
    } else {
        if (!stats) throw Error("invalid-argument", "batch_norm_1d: eval mode needs running statistics");
        for (std::size_t j = 0; j < d; ++j) {
            inv_std[j] = 1.0 / std::sqrt(stats->var[j] + eps);
            for (std::size_t i = 0; i < n; ++i) {
                xhat[i * d + j] = (x.data[i * d + j] - stats->mean[j]) * inv_std[j];
            }
        }
    }
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out.data[i] = gv.data[i % d] * xhat[i] + bv.data[i % d];
    }
    const bool batch_stats = mode == Mode::train;
    return a.graph->record(
        "batch_norm_1d", std::move(out), {a, gamma, beta},
        [n, d, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](
            BackwardContext& ctx) {
            auto g = ctx.out_grad();
            const auto& gam = ctx.in(1).data;
            if (ctx.wants(0)) {
                auto gx = ctx.in_grad(0);
                const double nn = static_cast<double>(n);
                for (std::size_t j = 0; j < d; ++j) {
                    if (!batch_stats) {
                        for (std::size_t i = 0; i < n; ++i) {
                            gx[i * d + j] += g[i * d + j] * gam[j] * inv_std[j];
                        }
                        continue;
                    }
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const double dh = g[i * d + j] * gam[j];
                        s1 += dh;
                        s2 += dh * xhat[i * d + j];
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        const double dh = g[i * d + j] * gam[j];
                        gx[i * d + j] += inv_std[j] * (dh - s1 / nn - xhat[i * d + j] * s2 / nn);
                    }
                }
            }
            if (ctx.wants(1)) {
                auto gg = ctx.in_grad(1);
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
            }
            if (ctx.wants(2)) {
                auto gb = ctx.in_grad(2);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
            }
        });
}

// ---------------------------------------------------------------------------
// Losses and indexing

Var cross_entropy(Var logits, std::span<const int> labels) {
    const auto& x = logits.value();
    require_rank(x, 2, "cross_entropy");
    const std::size_t n = x.shape[0], c = x.shape[1];
    if (labels.size() != n) {
        throw Error("shape-mismatch", "cross_entropy: " + std::to_string(labels.size()) +
                                          " labels for " + std::to_string(n) + " rows");
    }
    std::vector<double> probs(x.numel());
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const int label = labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= c) {
            throw Error("label-out-of-range", "cross_entropy: label " + std::to_string(label) +
                                                  " outside [0, " + std::to_string(c) + ")");
        }
        const double* xr = x.data.data() + r * c;
        const auto top = static_cast<std::size_t>(std::max_element(xr, xr + c) - xr);
        const double mx = xr[top];
        // log1p keeps precision when the top logit dominates
        double rest = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j != top) rest += std::exp(xr[j] - mx);
        }
        const double log_z = std::log1p(rest);
        for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(xr[j] - mx) / (1.0 + rest);
        total += (mx - xr[label]) + log_z;
    }
    std::vector<int> saved(labels.begin(), labels.end());
    return logits.graph->record(
        "cross_entropy", Tensor::scalar(total / static_cast<double>(n)), {logits},
        [n, c, probs = std::move(probs), saved = std::move(saved)](BackwardContext& ctx) {
            const double g = ctx.out_grad()[0] / static_cast<double>(n);
            auto gi = ctx.in_grad(0);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < c; ++j) {
                    const double onehot = static_cast<int>(j) == saved[r] ? 1.0 : 0.0;
                    gi[r * c + j] += g * (probs[r * c + j] - onehot);
                }
            }
        });
}

Var dropout(Var a, double rate, std::uint64_t key) {
    if (rate < 0.0 || rate >= 1.0) throw Error("invalid-argument", "dropout rate must be in [0, 1)");
    if (rate == 0.0) return a;
    const auto& x = a.value();
    std::vector<double> keep(x.numel());
    const double scale_kept = 1.0 / (1.0 - rate);
    Tensor out = like(x);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        keep[i] = rng::counter_uniform(key, i) >= rate ? scale_kept : 0.0;
        out.data[i] = x.data[i] * keep[i];
    }
    return a.graph->record("dropout", std::move(out), {a},
                           [keep = std::move(keep)](BackwardContext& ctx) {
                               auto g = ctx.out_grad();
                               auto gi = ctx.in_grad(0);
                               for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * keep[i];
                           });
}

Var pick(Var a, std::span<const int> cols) {
    const auto& x = a.value();
    require_rank(x, 2, "pick");
    const std::size_t n = x.shape[0], c = x.shape[1];
    if (cols.size() != n) throw Error("shape-mismatch", "pick: one column per row required");
    Tensor out = Tensor::zeros({n});
    for (std::size_t r = 0; r < n; ++r) {
        if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= c) {
            throw Error("label-out-of-range", "pick: column out of range");
        }
        out.data[r] = x.data[r * c + static_cast<std::size_t>(cols[r])];
    }
    std::vector<int> saved(cols.begin(), cols.end());
    return a.graph->record("pick", std::move(out), {a},
                           [c, saved = std::move(saved)](BackwardContext& ctx) {
                               auto g = ctx.out_grad();
                               auto gi = ctx.in_grad(0);
                               for (std::size_t r = 0; r < saved.size(); ++r) {
                                   gi[r * c + static_cast<std::size_t>(saved[r])] += g[r];
                               }
                           });
}

Var take_position(Var x, std::size_t position) {
    const auto& v = x.value();
    require_rank(v, 3, "take_position");
    const std::size_t b = v.shape[0], s = v.shape[1], h = v.shape[2];
    if (position >= s) throw Error("invalid-argument", "take_position: position out of range");
    Tensor out = Tensor::zeros({b, h});
    for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>((i * s + position) * h), h,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * h));
    }
    return x.graph->record("take_position", std::move(out), {x},
                           [b, s, h, position](BackwardContext& ctx) {
                               auto g = ctx.out_grad();
                               auto gi = ctx.in_grad(0);
                               for (std::size_t i = 0; i < b; ++i) {
                                   for (std::size_t j = 0; j < h; ++j) {
                                       gi[(i * s + position) * h + j] += g[i * h + j];
                                   }
                               }
                           });
}

Var embed_tokens(Var token_table, Var position_table, std::span<const int> ids, std::size_t batch,
                 std::size_t seq) {
    const auto& tok = token_table.value();
    const auto& pos = position_table.value();
    require_rank(tok, 2, "embed_tokens");
    require_rank(pos, 2, "embed_tokens");
    const std::size_t vocab = tok.shape[0], h = tok.shape[1];
    if (pos.shape[1] != h) throw Error("shape-mismatch", "embed_tokens: table widths differ");
    if (seq > pos.shape[0]) {
        throw Error("sequence-too-long", "embed_tokens: sequence length " + std::to_string(seq) +
                                             " exceeds " + std::to_string(pos.shape[0]));
    }
    if (ids.size() != batch * seq) throw Error("shape-mismatch", "embed_tokens: id count mismatch");
    Tensor out = Tensor::zeros({batch, seq, h});
    for (std::size_t i = 0; i < batch * seq; ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw Error("out-of-vocabulary", "embed_tokens: id " + std::to_string(id) +
                                                 " outside vocabulary of " + std::to_string(vocab));
        }
        const double* tr = tok.data.data() + static_cast<std::size_t>(id) * h;
        const double* pr = pos.data.data() + (i % seq) * h;
        double* o = out.data.data() + i * h;
        for (std::size_t j = 0; j < h; ++j) o[j] = tr[j] + pr[j];
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return token_table.graph->record(
        "embed_tokens", std::move(out), {token_table, position_table},
        [h, seq, saved = std::move(saved)](BackwardContext& ctx) {
            auto g = ctx.out_grad();
            if (ctx.wants(0)) {
                auto gt = ctx.in_grad(0);
                for (std::size_t i = 0; i < saved.size(); ++i) {
                    double* row = gt.data() + static_cast<std::size_t>(saved[i]) * h;
                    for (std::size_t j = 0; j < h; ++j) row[j] += g[i * h + j];
                }
            }
            if (ctx.wants(1)) {
                auto gp = ctx.in_grad(1);
                for (std::size_t i = 0; i < saved.size(); ++i) {
                    double* row = gp.data() + (i % seq) * h;
                    for (std::size_t j = 0; j < h; ++j) row[j] += g[i * h + j];
                }
            }
        });
}

Var attention(Var q, Var k, Var v, std::span<const unsigned char> mask, std::size_t heads) {
    require_same(q, k, "attention");
    require_same(q, v, "attention");
    const auto& qv = q.value();
    require_rank(qv, 3, "attention");
    const std::size_t b = qv.shape[0], s = qv.shape[1], h = qv.shape[2];
    if (heads == 0 || h % heads != 0) {
        throw Error("invalid-argument", "attention: hidden size not divisible by head count");
    }
    if (mask.size() != b * s) throw Error("shape-mismatch", "attention: mask size mismatch");
    const std::size_t dh = h / heads;
    const double scale_qk = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& kv = k.value();
    const auto& vv = v.value();

    Tensor out = like(qv);
    std::vector<double> probs(b * heads * s * s, 0.0);
    std::vector<double> scores(s);
    for (std::size_t bi = 0; bi < b; ++bi) {
        const unsigned char* mrow = mask.data() + bi * s;
        for (std::size_t hi = 0; hi < heads; ++hi) {
            for (std::size_t i = 0; i < s; ++i) {
                const double* qi = qv.data.data() + (bi * s + i) * h + hi * dh;
                double* p = probs.data() + ((bi * heads + hi) * s + i) * s;
                double mx = -INFINITY;
                for (std::size_t j = 0; j < s; ++j) {
                    if (!mrow[j]) continue;
                    const double* kj = kv.data.data() + (bi * s + j) * h + hi * dh;
                    double dot = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) dot += qi[t] * kj[t];
                    scores[j] = dot * scale_qk;
                    mx = std::max(mx, scores[j]);
                }
                if (mx == -INFINITY) continue;  // fully masked row attends to nothing
                double z = 0.0;
                for (std::size_t j = 0; j < s; ++j) {
                    if (!mrow[j]) continue;
                    p[j] = std::exp(scores[j] - mx);
                    z += p[j];
                }
                double* oi = out.data.data() + (bi * s + i) * h + hi * dh;
                for (std::size_t j = 0; j < s; ++j) {
                    if (!mrow[j]) continue;
                    p[j] /= z;
                    const double* vj = vv.data.data() + (bi * s + j) * h + hi * dh;
                    for (std::size_t t = 0; t < dh; ++t) oi[t] += p[j] * vj[t];
                }
            }
        }
    }
    return q.graph->record(
        "attention", std::move(out), {q, k, v},
        [b, s, h, heads, dh, scale_qk, probs = std::move(probs)](BackwardContext& ctx) {
            auto g = ctx.out_grad();
            const auto& qd = ctx.in(0).data;
            const auto& kd = ctx.in(1).data;
            const auto& vd = ctx.in(2).data;
            std::span<double> gq, gk, gv;
            if (ctx.wants(0)) gq = ctx.in_grad(0);
            if (ctx.wants(1)) gk = ctx.in_grad(1);
            if (ctx.wants(2)) gv = ctx.in_grad(2);
            std::vector<double> dp(s);
            for (std::size_t bi = 0; bi < b; ++bi) {
                for (std::size_t hi = 0; hi < heads; ++hi) {
                    for (std::size_t i = 0; i < s; ++i) {
                        const double* p = probs.data() + ((bi * heads + hi) * s + i) * s;
                        const double* gi = g.data() + (bi * s + i) * h + hi * dh;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < s; ++j) {
                            if (p[j] == 0.0) {
                                dp[j] = 0.0;
                                continue;
                            }
                            const double* vj = vd.data() + (bi * s + j) * h + hi * dh;
                            double acc = 0.0;
                            for (std::size_t t = 0; t < dh; ++t) acc += gi[t] * vj[t];
                            dp[j] = acc;
                            dot += p[j] * acc;
                            if (!gv.empty()) {
                                double* gvj = gv.data() + (bi * s + j) * h + hi * dh;
                                for (std::size_t t = 0; t < dh; ++t) gvj[t] += p[j] * gi[t];
                            }
                        }
                        const double* qi = qd.data() + (bi * s + i) * h + hi * dh;
                        for (std::size_t j = 0; j < s; ++j) {
                            if (p[j] == 0.0) continue;
                            const double ds = p[j] * (dp[j] - dot) * scale_qk;
                            const double* kj = kd.data() + (bi * s + j) * h + hi * dh;
                            if (!gq.empty()) {
                                double* gqi = gq.data() + (bi * s + i) * h + hi * dh;
                                for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
                            }
                            if (!gk.empty()) {
                                double* gkj = gk.data() + (bi * s + j) * h + hi * dh;
                                for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Gradient checking

double finite_diff_check(const GraphFunction& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw Error("invalid-argument", "finite_diff_check: step must be positive");
    std::vector<double> analytic(x.numel(), 0.0);
    {
        Graph g;
        Var xv = g.leaf(Tensor(x.shape, x.data));
        Var loss = f(g, xv);
        g.backward(loss);
        auto gr = g.grad(xv);
        if (!gr.empty()) std::copy(gr.begin(), gr.end(), analytic.begin());
    }
    auto evaluate = [&](const Tensor& at) {
        Graph g;
        return f(g, g.leaf(at)).value().item();
    };
    double worst = 0.0;
    Tensor probe(x.shape, x.data);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + h;
        const double fp = evaluate(probe);
        probe.data[i] = orig - h;
        const double fm = evaluate(probe);
        probe.data[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

double central_difference(const std::function<double()>& f, double& coordinate, double h) {
    const double orig = coordinate;
    coordinate = orig + h;
    const double fp = f();
    coordinate = orig - h;
    const double fm = f();
    coordinate = orig;
    return (fp - fm) / (2.0 * h);
}

}  // namespace advbt
