#include <gtest/gtest.h>

#include <cmath>
#include <regex>
#include <stack>

#include "advbt/attribution.hpp"
#include "advbt/error.hpp"
#include "advbt/io.hpp"
#include "advbt/trainer.hpp"
#include "test_util.hpp"

using namespace advbt;

namespace {

// Small tag-stack checker: quoted attributes, known entities, balanced tags.
bool well_formed(const std::string& s, std::string& why) {
    std::stack<std::string> open;
    std::size_t i = 0;
    const std::regex tag(R"(^<(/?)([A-Za-z][A-Za-z0-9]*)((?:\s+[A-Za-z-]+="[^"<]*")*)\s*(/?)>)");
    const std::regex entity(R"(^&(amp|lt|gt|quot|#39);)");
    while (i < s.size()) {
        if (s[i] == '<') {
            std::smatch m;
            const std::string rest = s.substr(i);
            if (!std::regex_search(rest, m, tag)) {
                why = "bad tag at " + std::to_string(i);
                return false;
            }
            if (m[1] == "/") {
                if (open.empty() || open.top() != m[2]) {
                    why = "unbalanced </" + m[2].str() + ">";
                    return false;
                }
                open.pop();
            } else if (m[4] != "/") {
                open.push(m[2]);
            }
            i += m[0].length();
        } else if (s[i] == '&') {
            std::smatch m;
            const std::string rest = s.substr(i, 8);
            if (!std::regex_search(rest, m, entity)) {
                why = "bad entity at " + std::to_string(i);
                return false;
            }
            i += m[0].length();
        } else {
            if (s[i] == '>') {
                why = "stray > at " + std::to_string(i);
                return false;
            }
            ++i;
        }
    }
    if (!open.empty()) why = "unclosed <" + open.top() + ">";
    return open.empty();
}

struct Trained {
    Dataset ds;
    EncoderModel model;
};

const Trained& trained() {
    static const Trained t = [] {
        ExperimentConfig cfg;
        cfg.encoder.num_layers = 2;
        cfg.encoder.hidden_dim = 16;
        cfg.encoder.num_heads = 2;
        cfg.encoder.ffn_dim = 32;
        cfg.encoder.max_seq_len = 24;
        cfg.use_adv = false;
        cfg.epochs = 3;
        const auto raw = synth_generate(400, 11);
        Trained out;
        out.ds = prepare_dataset(raw, cfg);
        cfg.encoder.vocab_size = out.ds.vocab.size();
        auto m = init_models(cfg);
        out.model = fit(m.model, m.head, out.ds.train, out.ds.validation, cfg).best_model;
        return out;
    }();
    return t;
}

AttributionResult plain(std::vector<std::string> tokens, std::vector<double> scores) {
    AttributionResult r;
    r.tokens = std::move(tokens);
    r.scores = std::move(scores);
    r.predicted_label = 1;
    r.true_label = 0;
    return r;
}

}  // namespace

TEST(PathIntegral, ExactForLinearFunction) {
    const Tensor w({5, 1}, {0.3, -1.2, 2.0, 0.0, 0.7});
    const Tensor e({5}, {1.5, 0.25, -0.5, 4.0, 2.0});
    auto f = [&](Graph& g, Var points) {
        const std::size_t c = points.value().shape[0];
        return reshape(matmul(points, g.constant(w)), {c});
    };
    const auto r = integrate_path(f, e, Tensor::zeros({5}), 7);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(r.attributions[i], w.data[i] * e.data[i], 1e-15);
    double dot = 0;
    for (std::size_t i = 0; i < 5; ++i) dot += w.data[i] * e.data[i];
    EXPECT_NEAR(r.f_x, dot, 1e-15);
    EXPECT_EQ(r.f_baseline, 0.0);
}

TEST(PathIntegral, QuadraticMidpointError) {
    // f(x) = x^2 on [0, 1]: the midpoint rule is exact for the linear gradient 2x
    auto f = [](Graph&, Var p) { return reshape(mul(p, p), {p.value().shape[0]}); };
    const auto r = integrate_path(f, Tensor({1}, {1.0}), Tensor({1}, {0.0}), 3);
    EXPECT_NEAR(r.attributions[0], 1.0, 1e-15);
}

TEST(PathIntegral, RejectsTooFewSteps) {
    auto f = [](Graph&, Var p) { return reshape(p, {p.value().shape[0]}); };
    EXPECT_THROW(integrate_path(f, Tensor({1}, {1.0}), Tensor({1}, {0.0}), 1), Error);
    EXPECT_THROW(integrate_path(f, Tensor({1}, {1.0}), Tensor({2}, {0.0, 0.0}), 4), Error);
}

TEST(IntegratedGradients, ZeroPathGivesZeroScores) {
    const auto& t = trained();
    // an all-padding row: x equals the pad baseline at every position except [CLS]
    EncodedExample ex = t.ds.test.front();
    std::fill(ex.token_ids.begin() + 1, ex.token_ids.end(), 0);
    std::fill(ex.attention_mask.begin() + 1, ex.attention_mask.end(), 0);
    IGOptions opts;
    opts.include_padding = true;
    const auto r = integrated_gradients(t.model, ex, t.ds.vocab, opts);
    for (std::size_t i = 1; i < r.scores.size(); ++i) EXPECT_EQ(r.scores[i], 0.0);
}

TEST(IntegratedGradients, CompletenessAtHighStepCount) {
    const auto& t = trained();
    for (std::size_t k = 0; k < 4; ++k) {
        IGOptions opts;
        opts.steps = 512;
        const auto r = integrated_gradients(t.model, t.ds.test[k], t.ds.vocab, opts);
        double total = 0;
        for (double s : r.scores) total += s;
        const double delta = r.f_x - r.f_baseline;
        EXPECT_NEAR(r.convergence_gap, std::abs(total - delta), 1e-15);
        EXPECT_LE(r.convergence_gap, 1e-3 * std::abs(delta) + 1e-6) << "example " << k;
        EXPECT_EQ(r.tokens.size(), r.scores.size());
        EXPECT_EQ(r.tokens.size(), t.ds.test[k].length());
    }
}

TEST(IntegratedGradients, GapShrinksAsStepsDouble) {
    const auto& t = trained();
    for (std::size_t k = 0; k < 3; ++k) {
        std::vector<double> gaps;
        for (std::size_t steps : {32, 64, 128}) {
            IGOptions opts;
            opts.steps = steps;
            gaps.push_back(integrated_gradients(t.model, t.ds.test[k], t.ds.vocab, opts).convergence_gap);
        }
        EXPECT_LE(gaps[1], gaps[0] + 1e-12);
        EXPECT_LE(gaps[2], gaps[1] + 1e-12);
    }
}

TEST(IntegratedGradients, PaddingScoresVanishWithPadBaseline) {
    const auto& t = trained();
    IGOptions opts;
    opts.include_padding = true;
    const auto& ex = t.ds.test[1];
    const auto r = integrated_gradients(t.model, ex, t.ds.vocab, opts);
    ASSERT_EQ(r.scores.size(), ex.token_ids.size());
    for (std::size_t i = ex.length(); i < r.scores.size(); ++i) EXPECT_LE(std::abs(r.scores[i]), 1e-6);
}

TEST(IntegratedGradients, DeterministicAndTargetable) {
    const auto& t = trained();
    const auto& ex = t.ds.test[2];
    IGOptions opts;
    opts.baseline = Baseline::zero;
    const auto a = integrated_gradients(t.model, ex, t.ds.vocab, opts);
    const auto b = integrated_gradients(t.model, ex, t.ds.vocab, opts);
    EXPECT_EQ(a.scores, b.scores);
    EXPECT_EQ(a.target_label, a.predicted_label);
    EXPECT_EQ(a.true_label, ex.label);
    opts.target = 1 - a.predicted_label;
    const auto other = integrated_gradients(t.model, ex, t.ds.vocab, opts);
    // two-class softmax: the other class's probability moves the opposite way
    for (std::size_t i = 0; i < a.scores.size(); ++i) EXPECT_NEAR(other.scores[i], -a.scores[i], 1e-10);
}

TEST(IntegratedGradients, RejectsBadInput) {
    const auto& t = trained();
    IGOptions opts;
    opts.steps = 1;
    EXPECT_THROW(integrated_gradients(t.model, t.ds.test[0], t.ds.vocab, opts), Error);
    EncoderModel broken = t.model;
    broken.classifier_w.data[0] = std::nan("");
    try {
        integrated_gradients(broken, t.ds.test[0], t.ds.vocab);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), "non-finite");
    }
}

TEST(Render, ZeroScoresAreUncoloured) {
    const auto r = plain({"[CLS]", "my", "head"}, {0, 0, 0});
    const auto html = render_attribution(r, RenderFormat::html);
    EXPECT_EQ(html.find("rgba"), std::string::npos);
    const auto ansi = render_attribution(r, RenderFormat::ansi);
    EXPECT_EQ(ansi.find("48;2;"), std::string::npos);
    EXPECT_NE(html.find("GT: non-health | Prediction: health"), std::string::npos) << html;
}

TEST(Render, SinglePositiveTokenIsTheOnlyGreenSpan) {
    const auto r = plain({"[CLS]", "my", "head", "hurts"}, {0, 0, 0, 0.4});
    const auto html = render_attribution(r, RenderFormat::html);
    std::size_t greens = 0;
    for (std::size_t p = html.find("rgba(0, 160, 0"); p != std::string::npos; p = html.find("rgba(0, 160, 0", p + 1)) ++greens;
    EXPECT_EQ(greens, 1u);
    EXPECT_EQ(html.find("rgba(200, 0, 0"), std::string::npos);
    EXPECT_NE(html.find("rgba(0, 160, 0, 1.000)"), std::string::npos) << html;
    const auto ansi = render_attribution(r, RenderFormat::ansi);
    std::size_t coloured = 0;
    for (std::size_t p = ansi.find("48;2;"); p != std::string::npos; p = ansi.find("48;2;", p + 1)) ++coloured;
    EXPECT_EQ(coloured, 1u);
}

TEST(Render, HtmlIsWellFormedForTwentyTokens) {
    std::vector<std::string> tokens{"[CLS]"};
    std::vector<double> scores{0.0};
    for (int i = 0; i < 19; ++i) {
        tokens.push_back(i % 5 == 0 ? "a<b&\"c'" : "tok" + std::to_string(i));
        scores.push_back(std::sin(i + 1.0));
    }
    const auto r = plain(tokens, scores);
    std::string why;
    EXPECT_TRUE(well_formed(render_attribution(r, RenderFormat::html), why)) << why;
    std::vector<AttributionResult> all{r, r};
    const auto doc = html_report(all, "t<i>tle");
    const auto body = doc.substr(doc.find("<body>"), doc.find("</body>") + 7 - doc.find("<body>"));
    EXPECT_TRUE(well_formed(body, why)) << why;
    EXPECT_EQ(html_escape("<a & 'b'>"), "&lt;a &amp; &#39;b&#39;&gt;");
    EXPECT_TRUE(well_formed(render_attribution(plain(tokens, scores), RenderFormat::html), why));
    EXPECT_FALSE(well_formed("<span>x", why));
}
