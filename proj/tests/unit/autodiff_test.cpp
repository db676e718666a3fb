#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "advbt/autodiff.hpp"
#include "advbt/error.hpp"
#include "test_util.hpp"

using namespace advbt;
using advbt::testing::random_tensor;

namespace {

// Contract a non-scalar output with fixed random weights so every output
// entry contributes a distinct amount to the checked scalar.
Var weighted(Graph& g, Var out, std::uint64_t seed) {
    return sum(mul(out, g.constant(random_tensor(out.shape(), seed))));
}

std::string error_kind(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    return "none";
}

}  // namespace

TEST(Tensor, ValidateRejectsBadShapes) {
    EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)).validate());
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
    EXPECT_THROW(Tensor({2, 0}, std::vector<double>{}), Error);
    Tensor t = Tensor::zeros({2});
    t.grad = {1.0};
    EXPECT_THROW(t.validate(), Error);
}

TEST(Matmul, IdentityAndDot) {
    Graph g;
    auto id = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    auto b = g.constant(Tensor::matrix({{3, 4}, {5, 6}}));
    EXPECT_EQ(matmul(id, b).value().data, (std::vector<double>{3, 4, 5, 6}));
    auto r = matmul(g.constant(Tensor::matrix({{1, 2}})), g.constant(Tensor::matrix({{3}, {4}})));
    EXPECT_EQ(r.shape(), (Shape{1, 1}));
    EXPECT_EQ(r.value().data[0], 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
    const Tensor a = random_tensor({3, 4}, 1), b = random_tensor({4, 2}, 2);
    Graph g;
    const auto& c = matmul(g.constant(a), g.constant(b)).value();
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
            EXPECT_NEAR(c.at(i, j), s, 1e-12);
        }
    }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    Graph g;
    try {
        matmul(g.constant(Tensor::zeros({2, 3})), g.constant(Tensor::zeros({2, 3})));
        FAIL() << "expected shape-mismatch";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), "shape-mismatch");
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
    }
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
    const Tensor b = random_tensor({4, 2}, 3);
    EXPECT_LE(finite_diff_check([&](Graph& g, Var x) { return weighted(g, matmul(x, g.constant(b)), 4); },
                                random_tensor({3, 4}, 5), 1e-5),
              1e-6);
    const Tensor a = random_tensor({3, 4}, 6);
    EXPECT_LE(finite_diff_check([&](Graph& g, Var x) { return weighted(g, matmul(g.constant(a), x), 7); },
                                random_tensor({4, 2}, 8), 1e-5),
              1e-6);
}

TEST(Softmax, Examples) {
    Graph g;
    auto s = softmax_rows(g.constant(Tensor::matrix({{0, 0}, {1000, 1000}})));
    for (double v : s.value().data) EXPECT_DOUBLE_EQ(v, 0.5);

    auto r = softmax_rows(g.constant(Tensor::matrix({{1, 2, 3}})));
    long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
    for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(r.value().data[i], static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z), 1e-12);
    }
}

TEST(Softmax, RowsSumToOneAndRejectNonFinite) {
    Graph g;
    auto s = softmax_rows(g.constant(random_tensor({5, 7}, 11, 30.0)));
    for (std::size_t r = 0; r < 5; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < 7; ++c) {
            const double v = s.value().at(r, c);
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
    Tensor bad = Tensor::matrix({{1, std::nan("")}});
    EXPECT_EQ(error_kind([&] { softmax_rows(g.constant(bad)); }), "non-finite");
    EXPECT_LE(finite_diff_check([](Graph& gg, Var x) { return weighted(gg, softmax_rows(x), 12); },
                                random_tensor({3, 4}, 13), 1e-5),
              1e-6);
}

TEST(LayerNorm, Examples) {
    Graph g;
    auto ones = g.constant(Tensor::filled({2}, 1.0));
    auto zeros2 = g.constant(Tensor::zeros({2}));
    auto out = layer_norm(g.constant(Tensor::matrix({{1, 3}})), ones, zeros2, 1e-12);
    EXPECT_NEAR(out.value().data[0], -1.0, 1e-9);
    EXPECT_NEAR(out.value().data[1], 1.0, 1e-9);

    auto c = layer_norm(g.constant(Tensor::matrix({{5, 5, 5}})), g.constant(Tensor::filled({3}, 1.0)),
                        g.constant(Tensor::zeros({3})), 1e-5);
    for (double v : c.value().data) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, StatisticsAndGradients) {
    Graph g;
    const std::size_t d = 9;
    auto out = layer_norm(g.constant(random_tensor({1, d}, 21, 10.0)), g.constant(Tensor::filled({d}, 1.0)),
                          g.constant(Tensor::zeros({d})), 1e-5);
    const auto& v = out.value().data;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / d;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= d;
    EXPECT_LE(std::abs(mean), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);

    const Tensor gamma = random_tensor({d}, 22), beta = random_tensor({d}, 23);
    EXPECT_LE(finite_diff_check(
                  [&](Graph& gg, Var x) {
                      return weighted(gg, layer_norm(x, gg.constant(gamma), gg.constant(beta), 1e-5), 24);
                  },
                  random_tensor({3, d}, 25), 1e-5),
              1e-6);
    const Tensor x = random_tensor({3, d}, 26);
    EXPECT_LE(finite_diff_check(
                  [&](Graph& gg, Var gm) {
                      return weighted(gg, layer_norm(gg.constant(x), gm, gg.constant(beta), 1e-5), 27);
                  },
                  gamma, 1e-5),
              1e-6);
}

TEST(Activation, ReluAndGelu) {
    Graph g;
    auto r = activation(g.constant(Tensor({3}, {-1, 0, 2})), Activation::relu);
    EXPECT_EQ(r.value().data, (std::vector<double>{0, 0, 2}));
    EXPECT_EQ(gelu_value(0.0), 0.0);
    EXPECT_NEAR(gelu_value(3.0), 2.9964, 1e-3);
    // x * Phi(x) reference at a moderate point; the tanh form is within 1e-3.
    const double phi = 0.5 * std::erfc(-1.3 / std::sqrt(2.0));
    EXPECT_NEAR(gelu_value(1.3), 1.3 * phi, 1e-3);
    // Keep away from relu's kink for the check.
    Tensor x = random_tensor({4, 5}, 31);
    for (auto& v : x.data) v += v > 0 ? 0.1 : -0.1;
    for (auto kind : {Activation::relu, Activation::gelu}) {
        EXPECT_LE(finite_diff_check([&](Graph& gg, Var in) { return weighted(gg, activation(in, kind), 32); }, x,
                                    1e-5),
                  1e-6);
    }
}

TEST(BatchNorm, Examples) {
    Graph g;
    auto out = batch_norm_1d(g.constant(Tensor::matrix({{2}, {4}})), g.constant(Tensor::filled({1}, 1.0)),
                             g.constant(Tensor::zeros({1})), 1e-12, Mode::train, nullptr);
    EXPECT_NEAR(out.value().data[0], -1.0, 1e-9);
    EXPECT_NEAR(out.value().data[1], 1.0, 1e-9);

    const Tensor beta = random_tensor({3}, 41);
    auto flat = batch_norm_1d(g.constant(random_tensor({4, 3}, 42)), g.constant(Tensor::zeros({3})),
                              g.constant(beta), 1e-5, Mode::train, nullptr);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(flat.value().at(r, c), beta.data[c]);
    }
}

TEST(BatchNorm, StatisticsRunningStatsAndErrors) {
    Graph g;
    RunningStats stats(3);
    const Tensor x = random_tensor({8, 3}, 43, 10.0);
    auto out = batch_norm_1d(g.constant(x), g.constant(Tensor::filled({3}, 1.0)), g.constant(Tensor::zeros({3})),
                             1e-5, Mode::train, &stats);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0, xm = 0.0, xv = 0.0;
        for (std::size_t r = 0; r < 8; ++r) {
            mean += out.value().at(r, c) / 8;
            xm += x.at(r, c) / 8;
        }
        for (std::size_t r = 0; r < 8; ++r) {
            var += std::pow(out.value().at(r, c) - mean, 2) / 8;
            xv += std::pow(x.at(r, c) - xm, 2) / 7;  // unbiased for the running estimate
        }
        EXPECT_LE(std::abs(mean), 1e-10);
        EXPECT_NEAR(var, 1.0, 1e-6);
        EXPECT_NEAR(stats.mean[c], 0.1 * xm, 1e-12);
        EXPECT_NEAR(stats.var[c], 0.9 + 0.1 * xv, 1e-12);
    }
    // eval mode uses the running estimates
    auto ev = batch_norm_1d(g.constant(Tensor::matrix({{1, 2, 3}})), g.constant(Tensor::filled({3}, 1.0)),
                            g.constant(Tensor::zeros({3})), 1e-5, Mode::eval, &stats);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(ev.value().data[c], (c + 1.0 - stats.mean[c]) / std::sqrt(stats.var[c] + 1e-5), 1e-12);
    }
    EXPECT_THROW(batch_norm_1d(g.constant(Tensor::matrix({{1, 2}})), g.constant(Tensor::filled({2}, 1.0)),
                               g.constant(Tensor::zeros({2})), 1e-5, Mode::train, nullptr),
                 Error);

    const Tensor gamma = random_tensor({3}, 44), beta = random_tensor({3}, 45);
    EXPECT_LE(finite_diff_check(
                  [&](Graph& gg, Var in) {
                      return weighted(gg,
                                      batch_norm_1d(in, gg.constant(gamma), gg.constant(beta), 1e-5, Mode::train,
                                                    nullptr),
                                      46);
                  },
                  random_tensor({5, 3}, 47), 1e-5),
              1e-6);
}

TEST(CrossEntropy, Examples) {
    Graph g;
    const std::vector<int> zero{0}, one{1};
    EXPECT_NEAR(cross_entropy(g.constant(Tensor::matrix({{0, 0}})), one).value().item(), std::log(2.0), 1e-15);
    const double tiny = cross_entropy(g.constant(Tensor::matrix({{10, -10}})), zero).value().item();
    EXPECT_NEAR(tiny, std::log1p(std::exp(-20.0)), 1e-20);
    EXPECT_NEAR(tiny, 2.06e-9, 1e-11);

    const Tensor two = Tensor::matrix({{0.3, -1.2}, {2.0, 0.5}});
    const std::vector<int> labels{1, 0};
    const double both = cross_entropy(g.constant(two), labels).value().item();
    const double a = cross_entropy(g.constant(Tensor::matrix({{0.3, -1.2}})), one).value().item();
    const double b = cross_entropy(g.constant(Tensor::matrix({{2.0, 0.5}})), zero).value().item();
    EXPECT_NEAR(both, (a + b) / 2, 1e-12);

    const std::vector<int> bad{2};
    EXPECT_EQ(error_kind([&] { cross_entropy(g.constant(Tensor::matrix({{0, 0}})), bad); }), "label-out-of-range");
    EXPECT_LE(finite_diff_check([&](Graph&, Var x) { return cross_entropy(x, labels); },
                                Tensor::matrix({{0.1, 0.7}, {-0.4, 0.2}}), 1e-5),
              1e-6);
}

TEST(Backward, SumAndSquare) {
    {
        Graph g;
        auto x = g.leaf(random_tensor({2, 3}, 51));
        g.backward(sum(x));
        for (double v : g.grad(x)) EXPECT_EQ(v, 1.0);
    }
    {
        Graph g;
        auto x = g.leaf(Tensor({3}, {1, 2, 3}));
        g.backward(sum(mul(x, x)));
        EXPECT_EQ(std::vector<double>(g.grad(x).begin(), g.grad(x).end()), (std::vector<double>{2, 4, 6}));
    }
}

TEST(Backward, NonScalarLossAndSingleUse) {
    Graph g;
    auto x = g.leaf(Tensor::zeros({2}));
    EXPECT_EQ(error_kind([&] { g.backward(x); }), "non-scalar-loss");
    Graph h;
    auto y = h.leaf(Tensor::zeros({2}));
    auto loss = sum(y);
    h.backward(loss);
    EXPECT_THROW(h.backward(loss), Error);
}

TEST(Backward, AccumulationIsExactlyAdditive) {
    const Tensor x0 = random_tensor({4}, 61);
    auto f = [](Var x) { return sum(activation(mul(x, x), Activation::gelu)); };
    Graph g1;
    auto a = g1.leaf(x0);
    g1.backward(f(a));
    Graph g2;
    auto b = g2.leaf(x0);
    g2.backward(add(f(b), f(b)));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g2.grad(b)[i], 2.0 * g1.grad(a)[i]);
}

TEST(Backward, ParameterTensorsReceiveGradients) {
    Tensor w = random_tensor({3, 2}, 62);
    w.requires_grad = true;
    const Tensor x = random_tensor({4, 3}, 63);
    for (int rep = 0; rep < 2; ++rep) {
        Graph g;
        g.backward(sum(matmul(g.constant(x), g.input(w))));
    }
    // two graphs, gradients add up in the tensor
    for (std::size_t k = 0; k < 3; ++k) {
        double col = 0.0;
        for (std::size_t r = 0; r < 4; ++r) col += x.at(r, k);
        EXPECT_NEAR(w.grad[k * 2], 2 * col, 1e-12);
    }
    Graph frozen(false);
    w.zero_grad();
    frozen.backward(sum(matmul(frozen.constant(x), frozen.input(w))));
    for (double v : w.grad) EXPECT_EQ(v, 0.0);
}

TEST(Backward, DeterministicAcrossRebuilds) {
    auto run = [] {
        Graph g;
        auto x = g.leaf(random_tensor({3, 4}, 71));
        auto y = softmax_rows(matmul(x, g.constant(random_tensor({4, 4}, 72))));
        g.backward(weighted(g, y, 73));
        return std::vector<double>(g.grad(x).begin(), g.grad(x).end());
    };
    EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, QuadraticIsExact) {
    EXPECT_LE(finite_diff_check([](Graph&, Var x) { return sum(mul(x, x)); }, random_tensor({6}, 81), 1e-5), 1e-8);
}

TEST(Ops, PickTakePositionReshapeScale) {
    const std::vector<int> cols{1, 0};
    EXPECT_LE(finite_diff_check([&](Graph& g, Var x) { return weighted(g, pick(x, cols), 91); },
                                random_tensor({2, 3}, 92), 1e-5),
              1e-6);
    EXPECT_LE(finite_diff_check([](Graph& g, Var x) { return weighted(g, take_position(x, 1), 93); },
                                random_tensor({2, 3, 4}, 94), 1e-5),
              1e-6);
    EXPECT_LE(finite_diff_check([](Graph& g, Var x) { return weighted(g, scale(reshape(x, {6}), -2.5), 95); },
                                random_tensor({2, 3}, 96), 1e-5),
              1e-6);
    EXPECT_LE(finite_diff_check([](Graph&, Var x) { return mean(sub(x, mul(x, x))); }, random_tensor({5}, 97), 1e-5),
              1e-6);
}

TEST(Ops, LinearMatchesMatmulPlusBias) {
    const Tensor x = random_tensor({3, 4}, 101), w = random_tensor({4, 2}, 102), b = random_tensor({2}, 103);
    Graph g;
    const auto& y = linear(g.constant(x), g.constant(w), g.constant(b)).value();
    const auto& m = matmul(g.constant(x), g.constant(w)).value();
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(y.at(r, c), m.at(r, c) + b.data[c], 1e-15);
    }
    EXPECT_LE(finite_diff_check([&](Graph& gg, Var in) { return weighted(gg, linear(in, gg.constant(w), gg.constant(b)), 104); },
                                random_tensor({2, 3, 4}, 105), 1e-5),
              1e-6);
    EXPECT_LE(finite_diff_check([&](Graph& gg, Var wv) { return weighted(gg, linear(gg.constant(x), wv, gg.constant(b)), 106); },
                                w, 1e-5),
              1e-6);
    EXPECT_LE(finite_diff_check([&](Graph& gg, Var bv) { return weighted(gg, linear(gg.constant(x), gg.constant(w), bv), 107); },
                                b, 1e-5),
              1e-6);
}

TEST(Ops, EmbedTokensLooksUpRows) {
    const Tensor table = random_tensor({5, 3}, 111), pos = random_tensor({4, 3}, 112);
    const std::vector<int> ids{1, 4, 0, 0, 1, 2, 3, 0};
    Graph g;
    const auto& e = embed_tokens(g.constant(table), g.constant(pos), ids, 2, 4).value();
    ASSERT_EQ(e.shape, (Shape{2, 4, 3}));
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t s = 0; s < 4; ++s) {
            for (std::size_t h = 0; h < 3; ++h) {
                EXPECT_EQ(e.data[(b * 4 + s) * 3 + h], table.at(ids[b * 4 + s], h) + pos.at(s, h));
            }
        }
    }
    const std::vector<int> bad{7, 0};
    EXPECT_EQ(error_kind([&] { embed_tokens(g.constant(table), g.constant(pos), bad, 1, 2); }), "out-of-vocabulary");
    EXPECT_LE(finite_diff_check([&](Graph& gg, Var t) { return weighted(gg, embed_tokens(t, gg.constant(pos), ids, 2, 4), 113); },
                                table, 1e-5),
              1e-6);
}

TEST(Ops, AttentionMaskAndGradients) {
    const std::size_t B = 2, S = 4, H = 6;
    const Tensor q = random_tensor({B, S, H}, 121), k = random_tensor({B, S, H}, 122), v = random_tensor({B, S, H}, 123);
    const std::vector<unsigned char> mask{1, 1, 1, 0, 1, 1, 0, 0};
    Graph g;
    const auto base = attention(g.constant(q), g.constant(k), g.constant(v), mask, 2).value();
    // Changing masked keys/values leaves every output untouched.
    Tensor k2 = k, v2 = v;
    for (std::size_t h = 0; h < H; ++h) {
        k2.data[(0 * S + 3) * H + h] += 5.0;
        v2.data[(1 * S + 2) * H + h] -= 3.0;
    }
    const auto moved = attention(g.constant(q), g.constant(k2), g.constant(v2), mask, 2).value();
    for (std::size_t i = 0; i < base.data.size(); ++i) EXPECT_NEAR(base.data[i], moved.data[i], 1e-14);

    for (int which = 0; which < 3; ++which) {
        const Tensor x0 = which == 0 ? q : which == 1 ? k : v;
        EXPECT_LE(finite_diff_check(
                      [&](Graph& gg, Var x) {
                          Var qq = which == 0 ? x : gg.constant(q);
                          Var kk = which == 1 ? x : gg.constant(k);
                          Var vv = which == 2 ? x : gg.constant(v);
                          return weighted(gg, attention(qq, kk, vv, mask, 2), 124);
                      },
                      x0, 1e-5),
                  1e-6);
    }
}

TEST(Ops, Dropout) {
    const Tensor x = random_tensor({50, 40}, 131);
    Graph g;
    EXPECT_EQ(dropout(g.constant(x), 0.0, 9).value().data, x.data);
    const auto& d = dropout(g.constant(x), 0.25, 9).value().data;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (d[i] != 0.0) {
            ++kept;
            EXPECT_NEAR(d[i], x.data[i] / 0.75, 1e-15);
        }
    }
    EXPECT_NEAR(static_cast<double>(kept) / x.numel(), 0.75, 0.03);
    EXPECT_EQ(dropout(g.constant(x), 0.25, 9).value().data, d);
    EXPECT_NE(dropout(g.constant(x), 0.25, 10).value().data, d);
    EXPECT_LE(finite_diff_check([](Graph& gg, Var in) { return weighted(gg, dropout(in, 0.5, 3), 132); },
                                random_tensor({4, 4}, 133), 1e-5),
              1e-6);
}

TEST(Graph, DumpListsNodes) {
    Graph g;
    auto x = g.leaf(Tensor::zeros({2, 2}));
    sum(mul(x, x));
    const std::string dump = g.dump();
    EXPECT_NE(dump.find("mul"), std::string::npos) << dump;
    EXPECT_NE(dump.find("sum"), std::string::npos) << dump;
}
