#include <gtest/gtest.h>

#include <fstream>

#include "advbt/checkpoint.hpp"
#include "advbt/config.hpp"
#include "advbt/error.hpp"
#include "advbt/trainer.hpp"
#include "test_util.hpp"

using namespace advbt;
using advbt::testing::TempDir;

namespace {

Checkpoint sample_checkpoint() {
    ExperimentConfig cfg;
    cfg.encoder = advbt::testing::tiny_encoder(7, 2);
    cfg.proj_dim = 3;
    cfg.c = 0.3;
    cfg.noise.sigma = 0.75;
    cfg.grid.layers = {1, 2};
    Checkpoint ck;
    ck.vocab = Vocab::from_tokens({"[PAD]", "[CLS]", "[UNK]", "cough", "flu", "head", "stroke"});
    cfg.encoder.vocab_size = ck.vocab.size();
    ck.config = cfg;
    auto m = init_models(cfg);
    ck.model = m.model;
    ck.head = m.head;
    ck.head.norm1.stats.mean[0] = 0.125;
    ck.head.norm2.stats.var[1] = 3.0 / 7.0;
    return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
    const auto ck = sample_checkpoint();
    const auto text = serialize_checkpoint(ck);
    const auto back = parse_checkpoint(text);
    EXPECT_EQ(serialize_checkpoint(back), text);
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(back.vocab, ck.vocab);
    bool same = true;
    std::vector<const Tensor*> a, b;
    ck.model.for_each_parameter([&](const std::string&, const Tensor& t) { a.push_back(&t); });
    back.model.for_each_parameter([&](const std::string&, const Tensor& t) { b.push_back(&t); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i]->data == b[i]->data && a[i]->shape == b[i]->shape;
    EXPECT_TRUE(same);
    EXPECT_EQ(back.head.norm2.stats.var, ck.head.norm2.stats.var);
}

TEST(Checkpoint, FileRoundTripAndErrors) {
    TempDir dir("ckpt");
    const auto ck = sample_checkpoint();
    save_checkpoint(dir.path() / "m.ckpt", ck);
    EXPECT_EQ(serialize_checkpoint(load_checkpoint(dir.path() / "m.ckpt")), serialize_checkpoint(ck));
    try {
        load_checkpoint(dir.path() / "missing.ckpt");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), "file-not-found");
    }
    auto text = serialize_checkpoint(ck);
    EXPECT_THROW(parse_checkpoint(text.substr(0, text.size() / 2)), Error);
    EXPECT_THROW(parse_checkpoint("advbt-checkpoint 9\n"), Error);
    const auto pos = text.find("tensor encoder.classifier.bias");
    ASSERT_NE(pos, std::string::npos);
    auto broken = text;
    broken.replace(pos, 6, "tansor");
    try {
        parse_checkpoint(broken);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), "invalid-checkpoint");
        EXPECT_NE(std::string(e.what()).find("line"), std::string::npos);
    }
}

TEST(Config, RoundTripThroughText) {
    auto cfg = sample_checkpoint().config;
    cfg.encoder.vocab_size = EncoderConfig{}.vocab_size;  // not a config key
    cfg.lr = 1e-5;
    cfg.bt.lambda = 0.005;
    cfg.grid.c_values = {0.1, 0.2, 0.3, 0.4};
    const auto text = format_config(cfg);
    const auto back = apply_key_values(ExperimentConfig{}, parse_key_values(text));
    EXPECT_EQ(back.noise, cfg.noise);
    EXPECT_EQ(back.encoder, cfg.encoder);
    EXPECT_EQ(back.bt, cfg.bt);
    EXPECT_EQ(back.data, cfg.data);
    EXPECT_EQ(back.grid, cfg.grid);
    EXPECT_EQ(back, cfg);
    EXPECT_EQ(format_config(back), text);
}

TEST(Config, FileParsingAndErrors) {
    TempDir dir("config");
    {
        std::ofstream f(dir.path() / "run.cfg");
        f << "# toy run\nseed = 3\n\nc = 0.4   # trailing comment\nnoise.layer = 2\ngrid.layers = 1, 4\n";
    }
    const auto cfg = load_config(dir.path() / "run.cfg");
    EXPECT_EQ(cfg.seed, 3u);
    EXPECT_EQ(cfg.c, 0.4);
    EXPECT_EQ(cfg.noise.layer, 2u);
    EXPECT_EQ(cfg.grid.layers, (std::vector<std::size_t>{1, 4}));
    EXPECT_EQ(cfg.lr, ExperimentConfig{}.lr);

    EXPECT_THROW(apply_key_values({}, {{"no_such_key", "1"}}), Error);
    EXPECT_THROW(apply_key_values({}, {{"c", "abc"}}), Error);
    EXPECT_THROW(apply_key_values({}, {{"epochs", "-2"}}), Error);
    EXPECT_THROW(apply_key_values({}, {{"schema_version", "2"}}), Error);
    EXPECT_THROW(parse_key_values("seed 3\n"), Error);
    EXPECT_THROW(load_config(dir.path() / "nope.cfg"), Error);
}
