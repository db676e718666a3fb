#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advbt/encoder.hpp"
#include "advbt/textprep.hpp"

namespace advbt {

// Scalar-per-row function of a batch of points: [c, ...] -> [c].
using PathFunction = std::function<Var(Graph&, Var points)>;

struct PathIntegral {
    std::vector<double> attributions;  // same layout as x
    double f_x = 0.0;
    double f_baseline = 0.0;
};

// (x - baseline) * mean of grad f over the midpoints (k + 1/2)/steps of the
// straight path, evaluated `chunk` points per graph.
PathIntegral integrate_path(const PathFunction& f, const Tensor& x, const Tensor& baseline,
                            std::size_t steps, std::size_t chunk = 32);

enum class Baseline { pad_embedding, zero };

struct IGOptions {
    std::size_t steps = 64;
    Baseline baseline = Baseline::pad_embedding;
    std::optional<int> target;     // default: the predicted class
    bool include_padding = false;  // attribute the padded tail too
    std::size_t chunk = 32;
};

struct AttributionResult {
    std::vector<std::string> tokens;  // [CLS] first
    std::vector<double> scores;
    int predicted_label = 0;
    int true_label = 0;
    int target_label = 0;
    double f_x = 0.0;  // softmax probability of the target class
    double f_baseline = 0.0;
    double convergence_gap = 0.0;  // |sum(scores) - (f_x - f_baseline)|
};

// Integrated gradients over the embedding output (token + position), per
// token summed over the hidden axis.
AttributionResult integrated_gradients(const EncoderModel& model, const EncodedExample& example,
                                       const Vocab& vocab, const IGOptions& options = {});

enum class RenderFormat { ansi, html };

// Green supports the target class, red opposes it, strength |s| / max|s|.
std::string render_attribution(const AttributionResult& result, RenderFormat format);

// Whole HTML document, one <section> per result.
std::string html_report(std::span<const AttributionResult> results, const std::string& title);

std::string html_escape(std::string_view text);

}  // namespace advbt
