#include <gtest/gtest.h>

#include <cmath>

#include "advbt/error.hpp"
#include "advbt/perturbation.hpp"
#include "test_util.hpp"

using namespace advbt;
using advbt::testing::random_tensor;

TEST(SampleNoise, DegenerateSigma) {
    NoiseSpec spec{0.0, 0.0, 1, 3};
    for (double v : sample_noise(spec, {3, 4}).data) EXPECT_EQ(v, 0.0);
    spec.mu = 5.0;
    for (double v : sample_noise(spec, {2, 2, 2}).data) EXPECT_EQ(v, 5.0);
}

TEST(SampleNoise, MomentsOfStandardNormal) {
    const NoiseSpec spec{0.0, 1.0, 1, 12345};
    const auto t = sample_noise(spec, {100000});
    double mean = 0.0;
    for (double v : t.data) mean += v;
    mean /= t.numel();
    double var = 0.0;
    for (double v : t.data) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / (t.numel() - 1));
    EXPECT_LE(std::abs(mean), 0.02);
    EXPECT_LE(std::abs(sd - 1.0), 0.02);
}

TEST(SampleNoise, ShiftAndScale) {
    const NoiseSpec unit{0.0, 1.0, 1, 8}, shifted{2.0, 3.0, 1, 8};
    const auto a = sample_noise(unit, {50}, {4, 1}), b = sample_noise(shifted, {50}, {4, 1});
    for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(b.data[i], 2.0 + 3.0 * a.data[i], 1e-12);
}

TEST(SampleNoise, DeterministicAndKeyed) {
    const NoiseSpec spec{0.0, 1.0, 1, 77};
    const auto a = sample_noise(spec, {4, 5}, {3, 0});
    EXPECT_EQ(a.data, sample_noise(spec, {4, 5}, {3, 0}).data);
    EXPECT_NE(a.data, sample_noise(spec, {4, 5}, {4, 0}).data);  // next step: fresh noise
    EXPECT_NE(a.data, sample_noise(spec, {4, 5}, {3, 1}).data);  // other stream
    NoiseSpec other = spec;
    other.seed = 78;
    EXPECT_NE(a.data, sample_noise(other, {4, 5}, {3, 0}).data);
}

TEST(NoiseSpec, Validation) {
    EXPECT_NO_THROW((NoiseSpec{0, 1, 4, 0}.validate(4)));
    EXPECT_NO_THROW((NoiseSpec{0, 1, 0, 0}.validate(4)));
    EXPECT_THROW((NoiseSpec{0, 1, 5, 0}.validate(4)), Error);
    EXPECT_THROW((NoiseSpec{0, -1, 1, 0}.validate(4)), Error);
    EXPECT_THROW((NoiseSpec{std::nan(""), 1, 1, 0}.validate(4)), Error);
}

TEST(PerturbHidden, ZeroSigmaIsBitwiseIdentity) {
    const Tensor h = random_tensor({2, 3, 4}, 1);
    const NoiseSpec spec{0.0, 0.0, 1, 9};
    EXPECT_EQ(perturb_hidden(h, spec).data, h.data);
    Graph g;
    Var v = g.constant(h);
    EXPECT_EQ(perturb_hidden(v, spec).value().data, h.data);
}

TEST(PerturbHidden, LeavesInputAloneAndAveragesOut) {
    const Tensor h = random_tensor({3, 4}, 2);
    const Tensor copy = h;
    const NoiseSpec spec{0.0, 1.0, 1, 10};
    std::vector<double> mean(h.numel(), 0.0);
    const int reps = 10000;
    for (int r = 0; r < reps; ++r) {
        const auto p = perturb_hidden(h, spec, {static_cast<std::uint64_t>(r), 0});
        for (std::size_t i = 0; i < h.numel(); ++i) mean[i] += p.data[i] / reps;
    }
    EXPECT_EQ(h.data, copy.data);
    for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(mean[i], h.data[i], 0.05);
}

TEST(PerturbHidden, SeedsDifferAndGradientPassesThrough) {
    const Tensor h = random_tensor({2, 3}, 3);
    EXPECT_NE(perturb_hidden(h, {0, 1, 1, 1}).data, perturb_hidden(h, {0, 1, 1, 2}).data);

    const Tensor w = random_tensor({2, 3}, 4);
    Graph g;
    Var x = g.leaf(h);
    Var p = perturb_hidden(x, NoiseSpec{0, 1, 1, 5});
    g.backward(sum(mul(p, g.constant(w))));
    for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_EQ(g.grad(x)[i], w.data[i]);
}
