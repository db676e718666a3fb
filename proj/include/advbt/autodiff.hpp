#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "advbt/tensor.hpp"

namespace advbt {

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
};

class BackwardContext {
public:
    BackwardContext(Graph& graph, std::size_t node) : graph_(graph), node_(node) {}

    const Tensor& out() const;
    std::span<const double> out_grad() const;
    const Tensor& in(std::size_t k) const;
    bool wants(std::size_t k) const;
    // Zero-initialised on first use; gradients from several consumers add up.
    std::span<double> in_grad(std::size_t k);

private:
    Graph& graph_;
    std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

// Append-only tape. Inputs of a node always precede it, so reverse append
// order is a valid reverse topological order and backward() is one sweep.
// A graph is single-use: build, backward once, discard.
class Graph {
public:
    // With param_grads=false, tensors bound through input() are treated as
    // constants even if they require grad (used by attribution).
    explicit Graph(bool param_grads = true) : param_grads_(param_grads) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Binds a long-lived tensor by reference. Binding the same tensor twice
    // returns the same node. Gradients land in tensor.grad after backward().
    Var input(const Tensor& tensor);
    // Owned value that never receives a gradient.
    Var constant(Tensor value);
    // Owned value whose gradient is kept in the graph; read it with grad().
    Var leaf(Tensor value);

    Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
    // Empty span if no gradient reached the node.
    std::span<const double> grad(Var v) const;

    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    // One line per node: id, op, shape, input ids.
    std::string dump() const;

private:
    friend class BackwardContext;

    struct Node {
        const char* op = "";
        std::vector<std::size_t> inputs;
        Tensor owned;
        const Tensor* ref = nullptr;
        bool needs_grad = false;
        bool sink = false;  // accumulate into ref->grad at the end
        BackwardFn backward;
        std::vector<double> grad;
    };

    const Tensor& node_value(const Node& n) const { return n.ref ? *n.ref : n.owned; }

    std::deque<Node> nodes_;  // deque: values stay put while the tape grows
    std::unordered_map<const Tensor*, std::size_t> bound_;
    bool param_grads_;
    bool backward_done_ = false;
};

enum class Activation { relu, gelu };
enum class Mode { train, eval };

struct RunningStats {
    std::vector<double> mean;
    std::vector<double> var;
    double momentum = 0.1;

    explicit RunningStats(std::size_t d = 0) : mean(d, 0.0), var(d, 1.0) {}
};

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);   // -> shape {1}
Var mean(Var a);  // -> shape {1}
Var reshape(Var a, Shape shape);

Var matmul(Var a, Var b);
// x[..., in] * w[in, out] + b[out]; leading axes are kept.
Var linear(Var x, Var w, Var b);

Var softmax_rows(Var a);
Var layer_norm(Var a, Var gamma, Var beta, double eps);
// GELU uses the tanh approximation 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
// together with its exact derivative.
Var activation(Var a, Activation kind);
double gelu_value(double x);

// a[N, d]. Train mode needs N >= 2 and updates `stats` (if given) with an
// exponential moving average of the batch mean and unbiased variance.
Var batch_norm_1d(Var a, Var gamma, Var beta, double eps, Mode mode, RunningStats* stats);

// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);

// Inverted dropout with a counter-based mask keyed by `key`. rate == 0 is the identity.
Var dropout(Var a, double rate, std::uint64_t key);

// out[r] = a[r, cols[r]] for a[N, C] -> [N].
Var pick(Var a, std::span<const int> cols);

// x[B, S, H] -> x[:, position, :] as [B, H].
Var take_position(Var x, std::size_t position);

// Token plus position embeddings: ids[B*S] -> [B, S, H].
Var embed_tokens(Var token_table, Var position_table, std::span<const int> ids, std::size_t batch,
                 std::size_t seq);

// Multi-head scaled dot-product attention on [B, S, H] inputs. Keys with
// mask == 0 are excluded from every softmax; mask is [B*S].
Var attention(Var q, Var k, Var v, std::span<const unsigned char> mask, std::size_t heads);

// Central-difference gradient check. `f` builds a scalar from a leaf holding
// x; returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
using GraphFunction = std::function<Var(Graph&, Var)>;
double finite_diff_check(const GraphFunction& f, const Tensor& x, double h);

// (f(x + h) - f(x - h)) / 2h for a coordinate that f reads by reference.
double central_difference(const std::function<double()>& f, double& coordinate, double h);

}  // namespace advbt
