#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advbt/autodiff.hpp"
#include "advbt/batch.hpp"

namespace advbt {

struct EncoderConfig {
    std::size_t vocab_size = 3;
    std::size_t max_seq_len = 64;
    std::size_t hidden_dim = 64;
    std::size_t num_layers = 8;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t num_classes = 2;
    double dropout_rate = 0.0;
    double layer_norm_eps = 1e-5;

    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

struct EncoderLayer {
    Tensor query_w, query_b;
    Tensor key_w, key_b;
    Tensor value_w, value_b;
    Tensor output_w, output_b;
    Tensor attn_norm_g, attn_norm_b;
    Tensor ffn_in_w, ffn_in_b;
    Tensor ffn_out_w, ffn_out_b;
    Tensor ffn_norm_g, ffn_norm_b;
};

// Post-LN transformer encoder with learned absolute positions and a
// [CLS] classification head (layer norm followed by a linear map).
struct EncoderModel {
    EncoderConfig config;
    Tensor token_embedding;     // [vocab, hidden]
    Tensor position_embedding;  // [max_seq_len, hidden]
    std::vector<EncoderLayer> layers;
    Tensor head_norm_g, head_norm_b;
    Tensor classifier_w, classifier_b;  // [hidden, classes], [classes]

    // Weights ~ N(0, 0.02), biases 0, norm gains 1.
    static EncoderModel init(const EncoderConfig& config, std::uint64_t seed);

    // Visits every parameter with its checkpoint name, in a fixed order:
    //   encoder.token_embedding, encoder.position_embedding,
    //   encoder.layers.<i>.{attention.{query,key,value,output}.{weight,bias},
    //                       attention_norm.{gamma,beta}, ffn.{in,out}.{weight,bias},
    //                       ffn_norm.{gamma,beta}},
    //   encoder.head_norm.{gamma,beta}, encoder.classifier.{weight,bias}
    void for_each_parameter(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_parameter(const std::function<void(const std::string&, const Tensor&)>& fn) const;

    std::size_t allocated_floats() const;
    void zero_grad();
};

// Closed-form parameter count for a config.
std::size_t parameter_count(const EncoderConfig& config);

// Index 0 is the embedding output, index i the output of encoder layer i.
struct HiddenStates {
    std::vector<Var> per_layer;
};

struct ForwardOptions {
    Mode mode = Mode::eval;
    std::uint64_t dropout_key = 0;  // only used in train mode with dropout_rate > 0
};

struct EncoderOutput {
    Var logits;  // [batch, classes]
    HiddenStates states;
};

Var embed(Graph& graph, const EncoderModel& model, const TokenBatch& batch);

// Runs every layer. With `tap` and `replace`, the hidden state at index `tap`
// is swapped for `replace` before layer tap+1 runs (tap 0 swaps the
// embedding output). states.per_layer[tap] then holds the replacement.
EncoderOutput encoder_forward(Graph& graph, const EncoderModel& model, Var embedded,
                              const TokenBatch& batch, std::optional<std::size_t> tap = {},
                              std::optional<Var> replace = {}, const ForwardOptions& options = {});

// Continues a forward pass from an existing hidden state at index `start`
// (0 = embedding output). Returned states cover indices start..num_layers.
EncoderOutput forward_from(Graph& graph, const EncoderModel& model, Var state, std::size_t start,
                           const TokenBatch& batch, const ForwardOptions& options = {});

// Final-layer hidden state at position 0: [batch, hidden].
Var cls_pool(const HiddenStates& states);

// Head applied to pooled [CLS] vectors.
Var classify(Graph& graph, const EncoderModel& model, Var cls);

}  // namespace advbt
