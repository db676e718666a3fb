#include "advbt/contrastive.hpp"

#include <cmath>

#include "advbt/rng.hpp"

namespace advbt {

void BTConfig::validate() const {
    if (!(lambda >= 0.0)) throw Error("invalid-config", "bt lambda must be >= 0");
    if (!(eps > 0.0)) throw Error("invalid-config", "bt eps must be > 0");
}

namespace {

LinearParams uniform_linear(std::size_t in, std::size_t out, rng::Stream& stream) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    LinearParams p{Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
    for (double& w : p.weight.data) w = stream.uniform(-bound, bound);
    for (double& b : p.bias.data) b = stream.uniform(-bound, bound);
    return p;
}

BatchNormParams fresh_norm(std::size_t d) {
    return BatchNormParams{Tensor::filled({d}, 1.0, true), Tensor::zeros({d}, true), RunningStats(d),
                           1e-5};
}

template <typename Head, typename Fn>
void visit_head(Head& h, Fn&& fn) {
    fn("projection.linear1.weight", h.layer1.weight);
    fn("projection.linear1.bias", h.layer1.bias);
    fn("projection.norm1.gamma", h.norm1.gamma);
    fn("projection.norm1.beta", h.norm1.beta);
    fn("projection.linear2.weight", h.layer2.weight);
    fn("projection.linear2.bias", h.layer2.bias);
    fn("projection.norm2.gamma", h.norm2.gamma);
    fn("projection.norm2.beta", h.norm2.beta);
    fn("projection.linear3.weight", h.layer3.weight);
    fn("projection.linear3.bias", h.layer3.bias);
}

}  // namespace

ProjectionHead ProjectionHead::init(std::size_t hidden_dim, std::size_t proj_dim,
                                    std::uint64_t seed) {
    if (hidden_dim == 0 || proj_dim == 0) {
        throw Error("invalid-config", "projection dimensions must be >= 1");
    }
    rng::Stream stream(seed);
    ProjectionHead h;
    h.layer1 = uniform_linear(hidden_dim, hidden_dim, stream);
    h.layer2 = uniform_linear(hidden_dim, hidden_dim, stream);
    h.layer3 = uniform_linear(hidden_dim, proj_dim, stream);
    h.norm1 = fresh_norm(hidden_dim);
    h.norm2 = fresh_norm(hidden_dim);
    return h;
}

void ProjectionHead::for_each_parameter(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_head(*this, fn);
}

void ProjectionHead::for_each_parameter(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_head(*this, fn);
}

void ProjectionHead::zero_grad() {
    for_each_parameter([](const std::string&, Tensor& t) { t.zero_grad(); });
}

Var project(Graph& g, ProjectionHead& head, Var cls, Mode mode) {
    auto stage = [&](Var x, LinearParams& lin, BatchNormParams& bn) {
        Var y = linear(x, g.input(lin.weight), g.input(lin.bias));
        y = batch_norm_1d(y, g.input(bn.gamma), g.input(bn.beta), bn.eps, mode, &bn.stats);
        return activation(y, Activation::relu);
    };
    Var x = stage(cls, head.layer1, head.norm1);
    x = stage(x, head.layer2, head.norm2);
    return linear(x, g.input(head.layer3.weight), g.input(head.layer3.bias));
}

Var batch_center(Var z) {
    const auto& x = z.value();
    if (x.rank() != 2) throw Error("shape-mismatch", "batch_center expects [N, d]");
    const std::size_t n = x.shape[0], d = x.shape[1];
    if (n < 2) throw Error("invalid-argument", "batch_center needs at least 2 rows");
    Tensor out(x.shape, x.data);
    for (std::size_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += x.data[i * d + j];
        mu /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) out.data[i * d + j] -= mu;
    }
    return z.graph->record("batch_center", std::move(out), {z}, [n, d](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gi = ctx.in_grad(0);
        for (std::size_t j = 0; j < d; ++j) {
            double mg = 0.0;
            for (std::size_t i = 0; i < n; ++i) mg += g[i * d + j];
            mg /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) gi[i * d + j] += g[i * d + j] - mg;
        }
    });
}

Var cross_correlation(Var z_clean, Var z_adv, double eps) {
    const auto& a = z_clean.value();
    const auto& b = z_adv.value();
    if (a.rank() != 2 || a.shape != b.shape) {
        throw Error("shape-mismatch", "cross_correlation: shapes " + shape_string(a.shape) +
                                          " and " + shape_string(b.shape));
    }
    if (!(eps > 0.0)) throw Error("invalid-argument", "cross_correlation: eps must be positive");
    const std::size_t n = a.shape[0], d = a.shape[1];
    std::vector<double> norm_a(d, 0.0), norm_b(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            norm_a[j] += a.data[r * d + j] * a.data[r * d + j];
            norm_b[j] += b.data[r * d + j] * b.data[r * d + j];
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        norm_a[j] = std::sqrt(norm_a[j] + eps);
        norm_b[j] = std::sqrt(norm_b[j] + eps);
    }
    Tensor m = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < n; ++r) s += a.data[r * d + i] * b.data[r * d + j];
            m.data[i * d + j] = s / (norm_a[i] * norm_b[j]);
        }
    }
    return z_clean.graph->record(
        "cross_correlation", std::move(m), {z_clean, z_adv},
        [n, d, norm_a = std::move(norm_a), norm_b = std::move(norm_b)](BackwardContext& ctx) {
            auto g = ctx.out_grad();
            const auto& mv = ctx.out().data;
            const auto& a = ctx.in(0).data;
            const auto& b = ctx.in(1).data;
            // dS_ij = G_ij / (|a_i| |b_j|); the norm terms add -(sum_j G_ij M_ij) a_i / |a_i|^2.
            std::vector<double> ds(d * d);
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < d; ++j) ds[i * d + j] = g[i * d + j] / (norm_a[i] * norm_b[j]);
            }
            if (ctx.wants(0)) {
                auto ga = ctx.in_grad(0);
                for (std::size_t i = 0; i < d; ++i) {
                    double gm = 0.0;
                    for (std::size_t j = 0; j < d; ++j) gm += g[i * d + j] * mv[i * d + j];
                    const double coef = gm / (norm_a[i] * norm_a[i]);
                    for (std::size_t r = 0; r < n; ++r) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < d; ++j) acc += ds[i * d + j] * b[r * d + j];
                        ga[r * d + i] += acc - coef * a[r * d + i];
                    }
                }
            }
            if (ctx.wants(1)) {
                auto gb = ctx.in_grad(1);
                for (std::size_t j = 0; j < d; ++j) {
                    double gm = 0.0;
                    for (std::size_t i = 0; i < d; ++i) gm += g[i * d + j] * mv[i * d + j];
                    const double coef = gm / (norm_b[j] * norm_b[j]);
                    for (std::size_t r = 0; r < n; ++r) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < d; ++i) acc += ds[i * d + j] * a[r * d + i];
                        gb[r * d + j] += acc - coef * b[r * d + j];
                    }
                }
            }
        });
}

Var barlow_twins_loss(Var m, const BTConfig& config) {
    config.validate();
    const auto& mv = m.value();
    if (mv.rank() != 2 || mv.shape[0] != mv.shape[1]) {
        throw Error("shape-mismatch", "barlow_twins_loss expects a square matrix");
    }
    const std::size_t d = mv.shape[0];
    double invariance = 0.0, redundancy = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double v = mv.data[i * d + j];
            if (i == j) {
                invariance += (1.0 - v) * (1.0 - v);
            } else {
                redundancy += v * v;
            }
        }
    }
    const double lambda = config.lambda;
    return m.graph->record("barlow_twins", Tensor::scalar(invariance + lambda * redundancy), {m},
                           [d, lambda](BackwardContext& ctx) {
                               const double g = ctx.out_grad()[0];
                               const auto& mv = ctx.in(0).data;
                               auto gi = ctx.in_grad(0);
                               for (std::size_t i = 0; i < d; ++i) {
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double v = mv[i * d + j];
                                       gi[i * d + j] += i == j ? -2.0 * (1.0 - v) * g
                                                               : 2.0 * lambda * v * g;
                                   }
                               }
                           });
}

Var barlow_twins_from_projections(Var z_clean, Var z_adv, const BTConfig& config) {
    Var m = cross_correlation(batch_center(z_clean), batch_center(z_adv), config.eps);
    return barlow_twins_loss(m, config);
}

}  // namespace advbt
