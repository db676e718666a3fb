#include "advbt/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advbt/attribution.hpp"
#include "advbt/checkpoint.hpp"
#include "advbt/config.hpp"
#include "advbt/io.hpp"
#include "advbt/rng.hpp"
#include "advbt/trainer.hpp"

namespace advbt {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted = true; }

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t threads = 1;
    std::vector<std::string> sets;  // key=value overrides
};

// Config file (or defaults), then --set pairs, then --seed.
ExperimentConfig effective_config(const Globals& g) {
    ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
    KeyValues overrides;
    for (const auto& s : g.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw Error("invalid-config", "--set expects key=value, got '" + s + "'");
        auto trim = [](std::string v) {
            const auto b = v.find_first_not_of(" \t");
            const auto e = v.find_last_not_of(" \t");
            return b == std::string::npos ? std::string{} : v.substr(b, e - b + 1);
        };
        overrides[trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
    }
    cfg = apply_key_values(cfg, overrides);
    if (g.seed) cfg.seed = *g.seed;
    return cfg;
}

fs::path require_out(const Globals& g) {
    if (g.out.empty()) throw Error("invalid-argument", "--out is required");
    return g.out;
}

std::vector<RawExample> read_corpus(const std::string& path) {
    if (path.empty()) throw Error("invalid-argument", "--data is required");
    return load_corpus(path, corpus_format_for(path));
}

class Manifest {
public:
    Manifest(std::string command, const ExperimentConfig& cfg, fs::path dir)
        : command_(std::move(command)), config_(cfg), dir_(std::move(dir)), started_(utc_now()) {}

    void add_output(const fs::path& relative) { outputs_.push_back(relative.generic_string()); }

    // Written last; lists only files that exist.
    void write(const std::string& status, const std::string& error = {}) const {
        ojson j;
        j["schema_version"] = kConfigSchemaVersion;
        j["tool"] = "advbt";
        j["version"] = kVersion;
        j["command"] = command_;
        j["seed"] = config_.seed;
        ojson conf;
        for (const auto& [k, v] : to_key_values(config_)) conf[k] = v;
        j["config"] = std::move(conf);
        j["started_at"] = started_;
        j["finished_at"] = utc_now();
        ojson outs = ojson::array();
        for (const auto& o : outputs_) {
            if (fs::exists(dir_ / o)) outs.push_back(o);
        }
        j["outputs"] = std::move(outs);
        j["status"] = status;
        if (!error.empty()) j["error"] = error;
        atomic_write_file(dir_ / "manifest.json", j.dump(2) + "\n");
    }

private:
    std::string command_;
    ExperimentConfig config_;
    fs::path dir_;
    std::string started_;
    std::vector<std::string> outputs_;
};

void check_json_file(const fs::path& p) {
    try {
        if (nlohmann::json::parse(read_file(p)).is_discarded()) throw Error("io-error", p.string() + " is not JSON");
    } catch (const nlohmann::json::exception& e) {
        throw Error("io-error", "artifact " + p.string() + " failed validation: " + e.what());
    }
}

void check_checkpoint_file(const fs::path& p, const std::string& expected) {
    if (serialize_checkpoint(load_checkpoint(p)) != expected) {
        throw Error("io-error", "checkpoint " + p.string() + " did not read back identically");
    }
}

struct TrainedRun {
    FitResult fit;
    MetricReport validation, test;
    std::string checkpoint_text;
};

TrainedRun train_one(const ExperimentConfig& cfg, const Dataset& ds, const fs::path& dir, Manifest& manifest,
                     const std::string& prefix) {
    ExperimentConfig run = cfg;
    run.encoder.vocab_size = ds.vocab.size();
    auto models = init_models(run);
    std::vector<EpochRecord> history;
    const fs::path history_path = dir / prefix / "history.csv";
    manifest.add_output(fs::path(prefix) / "history.csv");
    FitHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& rec) {
        history.push_back(rec);
        std::ostringstream os;
        write_history_csv(os, history);
        atomic_write_file(history_path, os.str());
    };
    TrainedRun r;
    r.fit = fit(std::move(models.model), std::move(models.head), ds.train, ds.validation, run, hooks);
    r.validation = evaluate(r.fit.best_model, ds.validation);
    r.test = evaluate(r.fit.best_model, ds.test);

    const Checkpoint ck{run, ds.vocab, r.fit.best_model, r.fit.best_head};
    r.checkpoint_text = serialize_checkpoint(ck);
    const fs::path ck_path = dir / prefix / "checkpoint.ckpt";
    atomic_write_file(ck_path, r.checkpoint_text);
    manifest.add_output(fs::path(prefix) / "checkpoint.ckpt");
    check_checkpoint_file(ck_path, r.checkpoint_text);
    return r;
}

ojson run_json(const ExperimentConfig& cfg, const TrainedRun& r) {
    ojson j;
    j["model_variant"] = model_variant(cfg);
    j["seed"] = cfg.seed;
    j["epochs_ran"] = r.fit.epochs_ran;
    j["best_epoch"] = r.fit.best_epoch;
    j["validation"] = to_json(r.validation);
    j["test"] = to_json(r.test);
    return j;
}

int cmd_train(const Globals& g, const std::string& data, std::size_t folds, std::ostream& out) {
    const ExperimentConfig cfg = effective_config(g);
    const fs::path dir = require_out(g);
    Manifest manifest("train", cfg, dir);
    try {
        const auto raw = read_corpus(data);
        ojson metrics;
        if (folds == 0) {
            const Dataset ds = prepare_dataset(raw, cfg);
            const auto r = train_one(cfg, ds, dir, manifest, "");
            metrics = run_json(cfg, r);
            out << "test f1 " << format_double(r.test.f1) << " after " << r.fit.epochs_ran << " epochs\n";
        } else {
            const auto split = kfold_split(raw.size(), folds, rng::derive_seed(cfg.seed, "folds"));
            std::vector<MetricReport> reports;
            ojson per_fold = ojson::array();
            for (std::size_t f = 0; f < split.size(); ++f) {
                // validation comes out of the fold's training part
                const double val = cfg.data.val_fraction / (1.0 - cfg.data.test_fraction);
                const auto inner = train_val_test_split(split[f].train.size(), val, 0.0,
                                                        rng::derive_seed(cfg.seed, "fold-val-" + std::to_string(f)));
                SplitSpec spec;
                for (auto i : inner.train) spec.train.push_back(split[f].train[i]);
                for (auto i : inner.validation) spec.validation.push_back(split[f].train[i]);
                spec.test = split[f].test;
                const Dataset ds = prepare_dataset(raw, cfg, spec);
                const std::string prefix = "fold" + std::to_string(f + 1);
                const auto r = train_one(cfg, ds, dir, manifest, prefix);
                reports.push_back(r.test);
                per_fold.push_back(run_json(cfg, r));
                out << prefix << " test f1 " << format_double(r.test.f1) << '\n';
            }
            metrics["model_variant"] = model_variant(cfg);
            metrics["seed"] = cfg.seed;
            metrics["folds"] = folds;
            metrics["test"] = to_json(aggregate_folds(reports));
            metrics["runs"] = std::move(per_fold);
        }
        atomic_write_file(dir / "metrics.json", metrics.dump(2) + "\n");
        manifest.add_output("metrics.json");
        check_json_file(dir / "metrics.json");
        manifest.write("ok");
    } catch (const std::exception& e) {
        manifest.write("error", e.what());
        throw;
    }
    return 0;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
    std::vector<T> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
                   item.end());
        if (item.empty()) throw Error("invalid-grid", std::string("empty entry in ") + what);
        if constexpr (std::is_floating_point_v<T>) {
            try {
                out.push_back(parse_double(item));
            } catch (const Error&) {
                throw Error("invalid-grid", std::string(what) + ": '" + item + "' is not a number");
            }
        } else {
            std::size_t used = 0;
            long long v = 0;
            try {
                v = std::stoll(item, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != item.size() || v < 0) {
                throw Error("invalid-grid", std::string(what) + ": '" + item + "' is not a count");
            }
            out.push_back(static_cast<T>(v));
        }
    }
    if (out.empty()) throw Error("invalid-grid", std::string(what) + " is empty");
    return out;
}

int cmd_sweep(const Globals& g, const std::string& data, const std::string& layers_s, const std::string& c_s,
              const std::string& b_s, bool resume, std::size_t max_cells, std::ostream& out) {
    ExperimentConfig cfg = effective_config(g);
    if (!layers_s.empty()) cfg.grid.layers = parse_list<std::size_t>(layers_s, "--layers");
    if (!c_s.empty()) cfg.grid.c_values = parse_list<double>(c_s, "--c-values");
    if (!b_s.empty()) cfg.grid.batch_sizes = parse_list<std::size_t>(b_s, "--batch-sizes");
    // Reject bad grids before reading data or training anything.
    validate_grid(cfg, cfg.grid.layers, cfg.grid.c_values, cfg.grid.batch_sizes);
    const fs::path dir = require_out(g);

    const auto raw = read_corpus(data);
    const Dataset ds = prepare_dataset(raw, cfg);
    cfg.encoder.vocab_size = ds.vocab.size();
    Manifest manifest("sweep", cfg, dir);

    SweepOptions opts;
    opts.out_dir = dir;
    opts.resume = resume;
    opts.threads = g.threads;
    g_interrupted = false;
    auto previous = std::signal(SIGINT, on_sigint);
    std::atomic<std::size_t> started{0};
    opts.should_stop = [&] {
        if (g_interrupted) return true;
        return max_cells > 0 && started++ >= max_cells;
    };
    SweepReport report;
    try {
        report = sweep(cfg, cfg.grid.layers, cfg.grid.c_values, cfg.grid.batch_sizes, ds, opts);
    } catch (...) {
        std::signal(SIGINT, previous);
        throw;
    }
    std::signal(SIGINT, previous);

    std::ostringstream sweep_csv, cells_csv;
    write_sweep_csv(sweep_csv, report.rows);
    write_cells_csv(cells_csv, report, cfg);
    atomic_write_file(dir / "sweep.csv", sweep_csv.str());
    atomic_write_file(dir / "cells.csv", cells_csv.str());
    manifest.add_output("sweep.csv");
    manifest.add_output("cells.csv");
    for (const auto& c : report.cells) {
        manifest.add_output(fs::path("cells") / cell_id(c.cell) / "manifest.json");
    }
    const bool failed = std::any_of(report.cells.begin(), report.cells.end(), [](const CellResult& c) { return !c.ok; });
    const std::size_t resumed = static_cast<std::size_t>(
        std::count_if(report.cells.begin(), report.cells.end(), [](const CellResult& c) { return c.resumed; }));
    out << report.cells.size() << " cells (" << report.trained_cells << " trained, " << resumed
        << " resumed), " << report.rows.size() << " rows\n";
    if (report.interrupted) {
        manifest.write("interrupted");
        return kExitInterrupted;
    }
    manifest.write(failed ? "partial" : "ok");
    return failed ? kExitPartial : 0;
}

std::vector<EncodedExample> encode_corpus(const std::vector<RawExample>& raw, const Checkpoint& ck) {
    const PreprocessOptions opts{ck.config.data.strict_hashtags};
    std::vector<EncodedExample> out;
    out.reserve(raw.size());
    for (const auto& r : raw) {
        out.push_back(tokenize_encode(preprocess(r.text, opts), ck.vocab, ck.config.encoder.max_seq_len,
                                      merge_labels(r)));
    }
    return out;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& data, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const auto examples = encode_corpus(read_corpus(data), ck);
    const auto report = evaluate(ck.model, examples);
    ojson j;
    j["model_variant"] = model_variant(ck.config);
    j["seed"] = ck.config.seed;
    j["metrics"] = to_json(report);
    const std::string text = j.dump(2) + "\n";
    if (!g.out.empty()) {
        atomic_write_file(fs::path(g.out) / "eval.json", text);
        check_json_file(fs::path(g.out) / "eval.json");
    }
    out << text;
    return 0;
}

void check_compatible(const Checkpoint& ck, const ExperimentConfig& expected, const std::string& what) {
    EncoderConfig a = ck.config.encoder, b = expected.encoder;
    a.vocab_size = b.vocab_size = 0;
    if (!(a == b)) {
        throw Error("checkpoint-mismatch", what + " was trained with a different encoder config");
    }
}

int cmd_attribute(const Globals& g, const std::string& checkpoint, const std::string& compare,
                  const std::string& data, bool only_disagreements, std::size_t steps, const std::string& baseline,
                  const std::string& target, std::size_t limit, std::ostream& out) {
    const fs::path dir = require_out(g);
    const Checkpoint ck = load_checkpoint(checkpoint);
    if (!g.config.empty()) check_compatible(ck, load_config(g.config), "checkpoint");
    std::optional<Checkpoint> other;
    if (!compare.empty()) {
        other = load_checkpoint(compare);
        check_compatible(*other, ck.config, "comparison checkpoint");
    }
    if (only_disagreements && !other) {
        throw Error("invalid-argument", "--only-disagreements needs --compare <checkpoint>");
    }
    IGOptions opts;
    opts.steps = steps;
    if (baseline == "zero") {
        opts.baseline = Baseline::zero;
    } else if (baseline != "pad") {
        throw Error("invalid-argument", "--baseline must be pad or zero");
    }
    if (target != "predicted" && target != "true") throw Error("invalid-argument", "--target must be predicted or true");

    const auto raw = read_corpus(data);
    const auto mine = encode_corpus(raw, ck);
    const auto preds = predict(ck.model, mine);
    std::vector<EncodedExample> theirs;
    std::vector<int> other_preds;
    if (other) {
        theirs = encode_corpus(raw, *other);
        other_preds = predict(other->model, theirs);
    }

    std::string body;
    std::size_t shown = 0;
    for (std::size_t i = 0; i < mine.size() && (limit == 0 || shown < limit); ++i) {
        if (only_disagreements && preds[i] == other_preds[i]) continue;
        IGOptions o = opts;
        if (target == "true") o.target = mine[i].label;
        body += "<h2>Example " + std::to_string(i + 1) + "</h2>\n";
        body += "<p class=\"source\">" + html_escape(raw[i].text) + "</p>\n";
        const auto a = integrated_gradients(ck.model, mine[i], ck.vocab, o);
        body += "<h3>" + html_escape(checkpoint) + "</h3>\n" + render_attribution(a, RenderFormat::html);
        if (other) {
            const auto b = integrated_gradients(other->model, theirs[i], other->vocab, o);
            body += "<h3>" + html_escape(compare) + "</h3>\n" + render_attribution(b, RenderFormat::html);
        }
        ++shown;
    }
    const std::string doc = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"/>\n"
                            "<title>Attributions</title>\n</head>\n<body>\n<h1>Attributions</h1>\n" +
                            body + "</body>\n</html>\n";
    atomic_write_file(dir / "attribution.html", doc);
    out << shown << " examples written to " << (dir / "attribution.html").string() << '\n';
    return 0;
}

int cmd_synth(const Globals& g, std::size_t n, double noise_rate, std::ostream& out) {
    if (n < 1) throw Error("invalid-argument", "--n must be >= 1");
    if (g.out.empty()) throw Error("invalid-argument", "--out <file> is required");
    const std::uint64_t seed = effective_config(g).seed;
    const auto examples = synth_generate(n, seed, noise_rate);
    std::ostringstream os;
    write_corpus_jsonl(os, examples);
    atomic_write_file(g.out, os.str());
    out << n << " examples written to " << g.out << '\n';
    return 0;
}

int cmd_preprocess(const Globals& g, const std::string& data, const std::vector<std::string>& texts,
                   bool strict, std::ostream& out) {
    const PreprocessOptions opts{strict};
    if (!data.empty()) {
        auto raw = read_corpus(data);
        for (auto& r : raw) r.text = preprocess(r.text, opts);
        std::ostringstream os;
        write_corpus_jsonl(os, raw);
        if (g.out.empty()) {
            out << os.str();
        } else {
            atomic_write_file(g.out, os.str());
        }
        return 0;
    }
    for (const auto& t : texts) out << preprocess(t, opts) << '\n';
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Adversarial training with a Barlow Twins loss on a toy transformer encoder", "advbt"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the command name
    app.set_version_flag("--version", kVersion);

    Globals g;
    app.add_option("--config", g.config, "Key-value config file");
    app.add_option("--seed", g.seed, "Root seed (overrides the config)");
    app.add_option("--out", g.out, "Output directory (synth/preprocess: output file)");
    app.add_option("--threads", g.threads, "Worker threads for sweeps")->check(CLI::PositiveNumber);
    app.add_option("--set", g.sets, "Override a config key: key=value (repeatable)");

    std::string data, checkpoint, compare, layers, c_values, batch_sizes;
    std::size_t folds = 0, max_cells = 0, n = 300, steps = 64, limit = 0;
    double noise_rate = 0.1;
    bool resume = false, only_dis = false, strict = false;
    std::string baseline = "pad", target = "predicted";
    std::vector<std::string> texts;

    auto* train = app.add_subcommand("train", "Train one model and write checkpoint, history, metrics");
    train->add_option("--data", data, "Corpus (.jsonl or .csv)")->required();
    train->add_option("--folds", folds, "k-fold cross-validation instead of one split");

    auto* sweep_cmd = app.add_subcommand("sweep", "Grid over noise layer, c and batch size");
    sweep_cmd->add_option("--data", data, "Corpus (.jsonl or .csv)")->required();
    sweep_cmd->add_option("--layers", layers, "Comma-separated noise layers");
    sweep_cmd->add_option("--c-values", c_values, "Comma-separated c values");
    sweep_cmd->add_option("--batch-sizes", batch_sizes, "Comma-separated batch sizes");
    sweep_cmd->add_flag("--resume", resume, "Skip cells whose manifest says ok");
    sweep_cmd->add_option("--max-cells", max_cells, "Stop after starting this many cells")->group("");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", data, "Corpus (.jsonl or .csv)")->required();

    auto* attr = app.add_subcommand("attribute", "Integrated-gradients HTML report");
    attr->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    attr->add_option("--compare", compare, "Second checkpoint");
    attr->add_option("--data", data, "Corpus (.jsonl or .csv)")->required();
    attr->add_flag("--only-disagreements", only_dis, "Keep examples where the two models disagree");
    attr->add_option("--steps", steps, "Integration steps")->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20));
    attr->add_option("--baseline", baseline, "pad or zero");
    attr->add_option("--target", target, "predicted or true");
    attr->add_option("--limit", limit, "At most this many examples (0 = all)");

    auto* synth = app.add_subcommand("synth", "Write a synthetic JSONL corpus to --out");
    synth->add_option("--n", n, "Number of examples");
    synth->add_option("--noise-rate", noise_rate, "Fraction of examples with dropped words");

    auto* prep = app.add_subcommand("preprocess", "Clean texts or a corpus");
    prep->add_option("--data", data, "Corpus to clean (JSONL written to --out or stdout)");
    prep->add_option("text", texts, "Texts to clean");
    prep->add_flag("--strict-hashtags", strict, "Drop hashtags entirely");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kVersion << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: usage: " << msg << '\n';
        return kExitUsage;
    }

    try {
        if (*train) return cmd_train(g, data, folds, out);
        if (*sweep_cmd) return cmd_sweep(g, data, layers, c_values, batch_sizes, resume, max_cells, out);
        if (*eval) return cmd_eval(g, checkpoint, data, out);
        if (*attr) return cmd_attribute(g, checkpoint, compare, data, only_dis, steps, baseline, target, limit, out);
        if (*synth) return cmd_synth(g, n, noise_rate, out);
        if (*prep) return cmd_preprocess(g, data, texts, strict, out);
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: " << e.kind() << ": " << msg << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: internal: " << msg << '\n';
        return 1;
    }
    return kExitUsage;
}

}  // namespace advbt
