#include "advbt/encoder.hpp"

#include "advbt/rng.hpp"
#include <cmath>

namespace advbt {

void EncoderConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error("invalid-config", msg); };
    if (vocab_size < 3) fail("vocab_size must cover the reserved ids");
    if (max_seq_len < 1) fail("max_seq_len must be >= 1");
    if (hidden_dim < 1 || ffn_dim < 1) fail("hidden_dim and ffn_dim must be >= 1");
    if (num_layers < 1) fail("num_layers must be >= 1");
    if (num_heads < 1 || hidden_dim % num_heads != 0) {
        fail("hidden_dim must be divisible by num_heads");
    }
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
    if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
}

namespace {

Tensor normal_init(Shape shape, rng::Stream& stream, double stddev) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data) v = stddev * stream.normal();
    return t;
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual from-scratch default
Tensor fan_in_init(std::size_t in, std::size_t out, rng::Stream& stream) {
    Tensor t = Tensor::zeros({in, out}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : t.data) v = stream.uniform(-bound, bound);
    return t;
}

Tensor param_zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor param_ones(Shape shape) { return Tensor::filled(std::move(shape), 1.0, true); }

template <typename Model, typename Fn>
void visit_parameters(Model& m, Fn&& fn) {
    fn("encoder.token_embedding", m.token_embedding);
    fn("encoder.position_embedding", m.position_embedding);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& l = m.layers[i];
        const std::string p = "encoder.layers." + std::to_string(i) + ".";
        fn(p + "attention.query.weight", l.query_w);
        fn(p + "attention.query.bias", l.query_b);
        fn(p + "attention.key.weight", l.key_w);
        fn(p + "attention.key.bias", l.key_b);
        fn(p + "attention.value.weight", l.value_w);
        fn(p + "attention.value.bias", l.value_b);
        fn(p + "attention.output.weight", l.output_w);
        fn(p + "attention.output.bias", l.output_b);
        fn(p + "attention_norm.gamma", l.attn_norm_g);
        fn(p + "attention_norm.beta", l.attn_norm_b);
        fn(p + "ffn.in.weight", l.ffn_in_w);
        fn(p + "ffn.in.bias", l.ffn_in_b);
        fn(p + "ffn.out.weight", l.ffn_out_w);
        fn(p + "ffn.out.bias", l.ffn_out_b);
        fn(p + "ffn_norm.gamma", l.ffn_norm_g);
        fn(p + "ffn_norm.beta", l.ffn_norm_b);
    }
    fn("encoder.head_norm.gamma", m.head_norm_g);
    fn("encoder.head_norm.beta", m.head_norm_b);
    fn("encoder.classifier.weight", m.classifier_w);
    fn("encoder.classifier.bias", m.classifier_b);
}

}  // namespace

EncoderModel EncoderModel::init(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    rng::Stream stream(seed);
    const std::size_t h = config.hidden_dim, f = config.ffn_dim;
    // No pretraining here, so the small BERT-style 0.02 init would leave [CLS]
    // nearly constant across inputs; unit embeddings keep it informative.
    constexpr double stddev = 1.0;

    EncoderModel m;
    m.config = config;
    m.token_embedding = normal_init({config.vocab_size, h}, stream, stddev);
    m.position_embedding = normal_init({config.max_seq_len, h}, stream, stddev);
    m.layers.reserve(config.num_layers);
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        EncoderLayer l;
        l.query_w = fan_in_init(h, h, stream);
        l.query_b = param_zeros({h});
        l.key_w = fan_in_init(h, h, stream);
        l.key_b = param_zeros({h});
        l.value_w = fan_in_init(h, h, stream);
        l.value_b = param_zeros({h});
        l.output_w = fan_in_init(h, h, stream);
        l.output_b = param_zeros({h});
        l.attn_norm_g = param_ones({h});
        l.attn_norm_b = param_zeros({h});
        l.ffn_in_w = fan_in_init(h, f, stream);
        l.ffn_in_b = param_zeros({f});
        l.ffn_out_w = fan_in_init(f, h, stream);
        l.ffn_out_b = param_zeros({h});
        l.ffn_norm_g = param_ones({h});
        l.ffn_norm_b = param_zeros({h});
        m.layers.push_back(std::move(l));
    }
    m.head_norm_g = param_ones({h});
    m.head_norm_b = param_zeros({h});
    m.classifier_w = fan_in_init(h, config.num_classes, stream);
    m.classifier_b = param_zeros({config.num_classes});
    return m;
}

void EncoderModel::for_each_parameter(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_parameters(*this, fn);
}

void EncoderModel::for_each_parameter(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_parameters(*this, fn);
}

std::size_t EncoderModel::allocated_floats() const {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

void EncoderModel::zero_grad() {
    for_each_parameter([](const std::string&, Tensor& t) { t.zero_grad(); });
}

std::size_t parameter_count(const EncoderConfig& c) {
    const std::size_t h = c.hidden_dim, f = c.ffn_dim;
    const std::size_t per_layer = 4 * (h * h + h)  // q, k, v, output projections
                                  + 2 * h          // attention norm
                                  + (h * f + f) + (f * h + h) + 2 * h;
    return c.vocab_size * h + c.max_seq_len * h + c.num_layers * per_layer + 2 * h +
           h * c.num_classes + c.num_classes;
}

Var embed(Graph& graph, const EncoderModel& model, const TokenBatch& batch) {
    return embed_tokens(graph.input(model.token_embedding), graph.input(model.position_embedding),
                        batch.ids, batch.batch, batch.seq);
}

namespace {

Var maybe_dropout(Var x, const EncoderModel& model, const ForwardOptions& opts, std::size_t layer,
                  std::size_t site) {
    if (opts.mode != Mode::train || model.config.dropout_rate == 0.0) return x;
    const std::uint64_t key = rng::mix(rng::mix(opts.dropout_key, layer), site);
    return dropout(x, model.config.dropout_rate, key);
}

Var layer_forward(Graph& g, const EncoderModel& model, std::size_t index, Var x,
                  const TokenBatch& batch, const ForwardOptions& opts) {
    const auto& l = model.layers[index];
    const double eps = model.config.layer_norm_eps;
    Var q = linear(x, g.input(l.query_w), g.input(l.query_b));
    Var k = linear(x, g.input(l.key_w), g.input(l.key_b));
    Var v = linear(x, g.input(l.value_w), g.input(l.value_b));
    Var ctx = attention(q, k, v, batch.mask, model.config.num_heads);
    Var attn = linear(ctx, g.input(l.output_w), g.input(l.output_b));
    attn = maybe_dropout(attn, model, opts, index, 0);
    Var h = layer_norm(add(x, attn), g.input(l.attn_norm_g), g.input(l.attn_norm_b), eps);
    Var ff = activation(linear(h, g.input(l.ffn_in_w), g.input(l.ffn_in_b)), Activation::gelu);
    ff = linear(ff, g.input(l.ffn_out_w), g.input(l.ffn_out_b));
    ff = maybe_dropout(ff, model, opts, index, 1);
    return layer_norm(add(h, ff), g.input(l.ffn_norm_g), g.input(l.ffn_norm_b), eps);
}

void check_batch(const EncoderModel& model, const TokenBatch& batch) {
    if (batch.batch == 0 || batch.seq == 0) throw Error("invalid-argument", "empty batch");
    if (batch.mask.size() != batch.batch * batch.seq || batch.ids.size() != batch.mask.size()) {
        throw Error("shape-mismatch", "token batch ids/mask size mismatch");
    }
    if (batch.seq > model.config.max_seq_len) {
        throw Error("sequence-too-long", "batch sequence length exceeds max_seq_len");
    }
}

}  // namespace

EncoderOutput forward_from(Graph& graph, const EncoderModel& model, Var state, std::size_t start,
                           const TokenBatch& batch, const ForwardOptions& options) {
    check_batch(model, batch);
    const auto& cfg = model.config;
    if (start > cfg.num_layers) throw Error("invalid-tap", "start layer out of range");
    const Shape expected{batch.batch, batch.seq, cfg.hidden_dim};
    if (state.shape() != expected) {
        throw Error("shape-mismatch", "hidden state " + shape_string(state.shape()) +
                                          ", expected " + shape_string(expected));
    }
    EncoderOutput out;
    out.states.per_layer.push_back(state);
    Var x = state;
    for (std::size_t i = start; i < cfg.num_layers; ++i) {
        x = layer_forward(graph, model, i, x, batch, options);
        out.states.per_layer.push_back(x);
    }
    out.logits = classify(graph, model, cls_pool(out.states));
    return out;
}

EncoderOutput encoder_forward(Graph& graph, const EncoderModel& model, Var embedded,
                              const TokenBatch& batch, std::optional<std::size_t> tap,
                              std::optional<Var> replace, const ForwardOptions& options) {
    check_batch(model, batch);
    const auto& cfg = model.config;
    if (replace && !tap) throw Error("invalid-tap", "replace given without a tap index");
    if (tap && *tap > cfg.num_layers) {
        throw Error("invalid-tap", "tap " + std::to_string(*tap) + " outside [0, " +
                                       std::to_string(cfg.num_layers) + "]");
    }
    const Shape expected{batch.batch, batch.seq, cfg.hidden_dim};
    if (embedded.shape() != expected) {
        throw Error("shape-mismatch", "embedding " + shape_string(embedded.shape()) +
                                          ", expected " + shape_string(expected));
    }
    if (replace && replace->shape() != expected) {
        throw Error("shape-mismatch", "replacement " + shape_string(replace->shape()) +
                                          " does not match tapped state " +
                                          shape_string(expected));
    }

    const Var embedding_out = maybe_dropout(embedded, model, options, cfg.num_layers, 2);
    EncoderOutput out;
    out.states.per_layer.push_back(embedding_out);
    Var x = embedding_out;
    for (std::size_t i = 0; i <= cfg.num_layers; ++i) {
        if (i > 0) {
            x = layer_forward(graph, model, i - 1, x, batch, options);
            out.states.per_layer.push_back(x);
        }
        if (replace && *tap == i) {
            x = *replace;
            out.states.per_layer.back() = x;
        }
    }
    out.logits = classify(graph, model, cls_pool(out.states));
    return out;
}

Var cls_pool(const HiddenStates& states) {
    if (states.per_layer.empty()) throw Error("invalid-argument", "no hidden states");
    return take_position(states.per_layer.back(), 0);
}

Var classify(Graph& graph, const EncoderModel& model, Var cls) {
    Var normed = layer_norm(cls, graph.input(model.head_norm_g), graph.input(model.head_norm_b),
                            model.config.layer_norm_eps);
    return linear(normed, graph.input(model.classifier_w), graph.input(model.classifier_b));
}

}  // namespace advbt
