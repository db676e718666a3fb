#include "advbt/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "advbt/trainer.hpp"

namespace advbt {

PathIntegral integrate_path(const PathFunction& f, const Tensor& x, const Tensor& baseline,
                            std::size_t steps, std::size_t chunk) {
    if (steps < 2) throw Error("invalid-argument", "integrated gradients needs steps >= 2");
    if (chunk < 1) throw Error("invalid-argument", "chunk must be >= 1");
    require_same_shape(x, baseline, "integrate_path");
    const std::size_t n = x.numel();
    std::vector<double> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = x.data[i] - baseline.data[i];

    auto batched = [&](std::size_t count) {
        Shape s{count};
        s.insert(s.end(), x.shape.begin(), x.shape.end());
        return Tensor::zeros(s);
    };

    std::vector<double> grad_sum(n, 0.0);
    for (std::size_t start = 0; start < steps; start += chunk) {
        const std::size_t count = std::min(chunk, steps - start);
        Tensor points = batched(count);
        for (std::size_t r = 0; r < count; ++r) {
            const double alpha = (static_cast<double>(start + r) + 0.5) / static_cast<double>(steps);
            double* dst = points.data.data() + r * n;
            for (std::size_t i = 0; i < n; ++i) dst[i] = baseline.data[i] + alpha * diff[i];
        }
        Graph g(false);
        Var p = g.leaf(std::move(points));
        Var values = f(g, p);
        if (values.shape() != Shape{count}) {
            throw Error("shape-mismatch", "path function must return one value per point, got " +
                                              shape_string(values.shape()));
        }
        g.backward(sum(values));
        const auto grad = g.grad(p);
        if (grad.empty()) continue;
        for (std::size_t r = 0; r < count; ++r) {
            const double* src = grad.data() + r * n;
            for (std::size_t i = 0; i < n; ++i) grad_sum[i] += src[i];
        }
    }

    PathIntegral out;
    out.attributions.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.attributions[i] = diff[i] * grad_sum[i] / static_cast<double>(steps);
    }
    Tensor ends = batched(2);
    std::copy(baseline.data.begin(), baseline.data.end(), ends.data.begin());
    std::copy(x.data.begin(), x.data.end(), ends.data.begin() + static_cast<std::ptrdiff_t>(n));
    Graph g(false);
    const auto& v = f(g, g.constant(std::move(ends))).value().data;
    out.f_baseline = v.at(0);
    out.f_x = v.at(1);
    return out;
}

namespace {

void check_finite_model(const EncoderModel& model) {
    model.for_each_parameter([](const std::string& name, const Tensor& t) {
        for (double v : t.data) {
            if (!std::isfinite(v)) throw Error("non-finite", "model parameter " + name + " is not finite");
        }
    });
}

// One example replicated `count` times.
TokenBatch replicate(const EncodedExample& ex, std::size_t seq, std::size_t count) {
    TokenBatch b;
    b.batch = count;
    b.seq = seq;
    for (std::size_t r = 0; r < count; ++r) {
        b.ids.insert(b.ids.end(), ex.token_ids.begin(), ex.token_ids.begin() + static_cast<std::ptrdiff_t>(seq));
        b.mask.insert(b.mask.end(), ex.attention_mask.begin(),
                      ex.attention_mask.begin() + static_cast<std::ptrdiff_t>(seq));
        b.labels.push_back(ex.label);
    }
    return b;
}

}  // namespace

AttributionResult integrated_gradients(const EncoderModel& model, const EncodedExample& example,
                                       const Vocab& vocab, const IGOptions& options) {
    check_finite_model(model);
    if (options.steps < 2) throw Error("invalid-argument", "integrated gradients needs steps >= 2");
    const auto& cfg = model.config;
    if (example.token_ids.empty() || example.token_ids.size() > cfg.max_seq_len ||
        example.attention_mask.size() != example.token_ids.size()) {
        throw Error("invalid-argument", "example does not fit the model's sequence length");
    }
    for (int id : example.token_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw Error("out-of-vocabulary", "token id " + std::to_string(id) + " outside the model vocabulary");
        }
    }
    const std::size_t seq = options.include_padding ? example.token_ids.size() : example.length();
    const std::size_t H = cfg.hidden_dim;

    Tensor x = Tensor::zeros({seq, H});
    Tensor base = Tensor::zeros({seq, H});
    for (std::size_t p = 0; p < seq; ++p) {
        const auto id = static_cast<std::size_t>(example.token_ids[p]);
        for (std::size_t h = 0; h < H; ++h) {
            const double pos = model.position_embedding.data[p * H + h];
            x.data[p * H + h] = model.token_embedding.data[id * H + h] + pos;
            if (options.baseline == Baseline::pad_embedding) {
                base.data[p * H + h] = model.token_embedding.data[kPadId * H + h] + pos;
            }
        }
    }

    AttributionResult r;
    r.true_label = example.label;
    {
        const std::vector<EncodedExample> one{example};
        r.predicted_label = predict(model, one).at(0);
    }
    r.target_label = options.target.value_or(r.predicted_label);
    if (r.target_label < 0 || static_cast<std::size_t>(r.target_label) >= cfg.num_classes) {
        throw Error("label-out-of-range", "target class " + std::to_string(r.target_label));
    }

    const int target = r.target_label;
    PathFunction f = [&](Graph& g, Var points) {
        const std::size_t count = points.shape().at(0);
        const TokenBatch batch = replicate(example, seq, count);
        const auto out = encoder_forward(g, model, points, batch);
        const std::vector<int> cols(count, target);
        return pick(softmax_rows(out.logits), cols);
    };
    const auto integral = integrate_path(f, x, base, options.steps, options.chunk);

    r.f_x = integral.f_x;
    r.f_baseline = integral.f_baseline;
    double total = 0.0;
    for (std::size_t p = 0; p < seq; ++p) {
        double s = 0.0;
        for (std::size_t h = 0; h < H; ++h) s += integral.attributions[p * H + h];
        r.scores.push_back(s);
        r.tokens.push_back(vocab.token(example.token_ids[p]));
        total += s;
    }
    r.convergence_gap = std::abs(total - (r.f_x - r.f_baseline));
    return r;
}

std::string html_escape(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (char ch : text) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&#39;"; break;
            default: out += ch;
        }
    }
    return out;
}

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

}  // namespace

std::string render_attribution(const AttributionResult& result, RenderFormat format) {
    if (result.tokens.size() != result.scores.size()) {
        throw Error("shape-mismatch", "tokens and scores differ in length");
    }
    double max_abs = 0.0;
    for (double s : result.scores) max_abs = std::max(max_abs, std::abs(s));

    const std::string gt{label_name(result.true_label == 1 ? RawLabel::health : RawLabel::non_health)};
    const std::string pred{
        label_name(result.predicted_label == 1 ? RawLabel::health : RawLabel::non_health)};
    std::string out;
    if (format == RenderFormat::ansi) {
        out += "GT: " + gt + " | Prediction: " + pred + " | gap: " + sci(result.convergence_gap) + "\n";
        for (std::size_t i = 0; i < result.tokens.size(); ++i) {
            if (i) out += ' ';
            const double s = result.scores[i];
            if (s == 0.0 || max_abs == 0.0) {
                out += result.tokens[i];
                continue;
            }
            // blend from white towards full green or red
            const int fade = static_cast<int>(std::lround(255.0 * (1.0 - std::abs(s) / max_abs)));
            const int r = s > 0 ? fade : 255;
            const int g = s > 0 ? 255 : fade;
            out += "\x1b[30;48;2;" + std::to_string(r) + ';' + std::to_string(g) + ';' +
                   std::to_string(fade) + 'm' + result.tokens[i] + "\x1b[0m";
        }
        out += '\n';
        return out;
    }

    out += "<section class=\"example\">\n";
    out += "<p class=\"header\">GT: " + html_escape(gt) + " | Prediction: " + html_escape(pred) +
           " | gap: " + sci(result.convergence_gap) + "</p>\n<p class=\"text\">";
    for (std::size_t i = 0; i < result.tokens.size(); ++i) {
        if (i) out += ' ';
        const double s = result.scores[i];
        const std::string tok = html_escape(result.tokens[i]);
        if (s == 0.0 || max_abs == 0.0) {
            out += tok;
            continue;
        }
        const std::string rgb = s > 0 ? "0, 160, 0" : "200, 0, 0";
        out += "<span style=\"background-color: rgba(" + rgb + ", " + fixed(std::abs(s) / max_abs, 3) +
               ")\" title=\"" + sci(s) + "\">" + tok + "</span>";
    }
    out += "</p>\n</section>\n";
    return out;
}

std::string html_report(std::span<const AttributionResult> results, const std::string& title) {
    std::string out = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"/>\n<title>" +
                      html_escape(title) + "</title>\n</head>\n<body>\n<h1>" + html_escape(title) +
                      "</h1>\n";
    for (const auto& r : results) out += render_attribution(r, RenderFormat::html);
    out += "</body>\n</html>\n";
    return out;
}

}  // namespace advbt
