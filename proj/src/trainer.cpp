#include "advbt/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "advbt/config.hpp"
#include "advbt/io.hpp"
#include "advbt/rng.hpp"

namespace advbt {

void ExperimentConfig::validate() const {
    encoder.validate();
    bt.validate();
    noise.validate(encoder.num_layers);
    if (!(c >= 0.0 && c <= 1.0)) throw Error("invalid-config", "c must be in [0, 1]");
    if (batch_size < 1) throw Error("invalid-config", "batch_size must be >= 1");
    if (use_adv && use_bt && batch_size < 2) {
        throw Error("invalid-config", "batch_size must be >= 2 when the Barlow Twins loss is on");
    }
    if (!(lr > 0.0)) throw Error("invalid-config", "lr must be positive");
    if (!(weight_decay >= 0.0)) throw Error("invalid-config", "weight_decay must be >= 0");
    if (epochs < 1) throw Error("invalid-config", "epochs must be >= 1");
    if (patience < 1) throw Error("invalid-config", "patience must be >= 1");
    if (proj_dim < 1) throw Error("invalid-config", "proj_dim must be >= 1");
}

std::string model_variant(const ExperimentConfig& config) {
    if (!config.use_adv) return "baseline";
    return config.use_bt ? "AT+BT" : "AT";
}

double total_loss(double clean_ce, double adv_ce, double bt, double c) {
    return ((1.0 - c) / 2.0) * (clean_ce + adv_ce) + c * bt;
}

Var total_loss(Var clean_ce, Var adv_ce, std::optional<Var> bt, double c) {
    Var ce = scale(add(clean_ce, adv_ce), (1.0 - c) / 2.0);
    return bt ? add(ce, scale(*bt, c)) : ce;
}

DualForwardResult dual_forward(Graph& g, const EncoderModel& model, ProjectionHead& head,
                               const TokenBatch& batch, const ExperimentConfig& config,
                               std::uint64_t step) {
    if (batch.labels.size() != batch.batch) {
        throw Error("shape-mismatch", "dual_forward needs one label per example");
    }
    const std::uint64_t dropout_base = rng::mix(rng::derive_seed(config.seed, "dropout"), step);
    const ForwardOptions clean_opts{Mode::train, rng::mix(dropout_base, 0)};
    const ForwardOptions adv_opts{Mode::train, rng::mix(dropout_base, 1)};

    DualForwardResult r;
    Var embedded = embed(g, model, batch);
    EncoderOutput clean = encoder_forward(g, model, embedded, batch, {}, {}, clean_opts);
    Var clean_ce = cross_entropy(clean.logits, batch.labels);
    r.logits_clean = clean.logits;
    r.parts.clean_ce = clean_ce.value().item();

    if (!config.use_adv) {
        r.total = clean_ce;
        r.parts.total = r.parts.clean_ce;
        return r;
    }

    const std::size_t tap = config.noise.layer;
    config.noise.validate(model.config.num_layers);
    const NoiseCounter counter{step, 0};
    EncoderOutput adv;
    if (model.config.dropout_rate == 0.0) {
        // Without dropout the adversarial prefix is identical to the clean one.
        Var perturbed = perturb_hidden(clean.states.per_layer[tap], config.noise, counter);
        adv = forward_from(g, model, perturbed, tap, batch, adv_opts);
    } else {
        EncoderOutput prefix = encoder_forward(g, model, embedded, batch, {}, {}, adv_opts);
        Var perturbed = perturb_hidden(prefix.states.per_layer[tap], config.noise, counter);
        adv = forward_from(g, model, perturbed, tap, batch, adv_opts);
    }
    Var adv_ce = cross_entropy(adv.logits, batch.labels);
    r.logits_adv = adv.logits;
    r.parts.adv_ce = adv_ce.value().item();

    std::optional<Var> bt;
    if (config.use_bt) {
        Var z_clean = project(g, head, cls_pool(clean.states), Mode::train);
        Var z_adv = project(g, head, cls_pool(adv.states), Mode::train);
        bt = barlow_twins_from_projections(z_clean, z_adv, config.bt);
        r.parts.bt = bt->value().item();
    }
    r.total = total_loss(clean_ce, adv_ce, bt, config.effective_c());
    r.parts.total = r.total.value().item();
    return r;
}

std::vector<ParamRef> collect_parameters(EncoderModel& model, ProjectionHead* head) {
    std::vector<ParamRef> params;
    model.for_each_parameter(
        [&](const std::string& name, Tensor& t) { params.push_back({name, &t}); });
    if (head) {
        head->for_each_parameter(
            [&](const std::string& name, Tensor& t) { params.push_back({name, &t}); });
    }
    return params;
}

ModelPair init_models(const ExperimentConfig& config) {
    return ModelPair{
        EncoderModel::init(config.encoder, rng::derive_seed(config.seed, "init")),
        ProjectionHead::init(config.encoder.hidden_dim, config.proj_dim,
                             rng::derive_seed(config.seed, "init-head"))};
}

std::vector<int> predict(const EncoderModel& model, std::span<const EncodedExample> examples,
                         std::size_t batch_size) {
    std::vector<int> preds;
    preds.reserve(examples.size());
    const std::size_t classes = model.config.num_classes;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) {
            idx.push_back(i);
        }
        const TokenBatch batch = make_batch(examples, idx);
        Graph g(false);
        const auto out = encoder_forward(g, model, embed(g, model, batch), batch);
        const auto& logits = out.logits.value().data;
        for (std::size_t r = 0; r < batch.batch; ++r) {
            const double* row = logits.data() + r * classes;
            preds.push_back(static_cast<int>(std::max_element(row, row + classes) - row));
        }
    }
    return preds;
}

MetricReport evaluate(const EncoderModel& model, std::span<const EncodedExample> examples,
                      std::size_t batch_size) {
    const auto preds = predict(model, examples, batch_size);
    std::vector<int> labels;
    labels.reserve(examples.size());
    for (const auto& ex : examples) labels.push_back(ex.label);
    return prf1(confusion(preds, labels));
}

bool EarlyStopping::update(std::size_t epoch, double score) {
    improved_ = score > best_;
    if (improved_) {
        best_ = score;
        best_epoch_ = epoch;
        stale_ = 0;
    } else {
        ++stale_;
    }
    return stale_ >= patience_;
}

FitResult fit(EncoderModel model, ProjectionHead head, std::span<const EncodedExample> train,
              std::span<const EncodedExample> validation, const ExperimentConfig& config,
              const FitHooks& hooks) {
    config.validate();
    if (train.empty()) throw Error("empty-split", "training split is empty");
    if (validation.empty()) throw Error("empty-split", "validation split is empty");
    if (model.config != config.encoder) {
        throw Error("invalid-config", "model was built with a different encoder config");
    }

    ExperimentConfig run = config;
    run.noise.seed = rng::derive_seed(config.seed, "noise");
    const bool with_head = config.use_adv && config.use_bt;
    auto params = collect_parameters(model, with_head ? &head : nullptr);
    OptimizerState opt;
    rng::Stream shuffle_stream(rng::derive_seed(config.seed, "shuffle"));
    EarlyStopping stopper(config.patience);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    FitResult result;
    result.best_model = model;
    result.best_head = head;
    std::uint64_t step = 0;
    std::vector<std::size_t> idx;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        rng::shuffle(order, shuffle_stream);
        LossBreakdown sums;
        std::size_t steps_this_epoch = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            // Batch norm in the projection head cannot use a single row.
            if (with_head && end - start < 2) continue;
            idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                       order.begin() + static_cast<std::ptrdiff_t>(end));
            const TokenBatch batch = make_batch(train, idx);
            for (auto& p : params) p.tensor->grad.clear();

            Graph g;
            const auto r = dual_forward(g, model, head, batch, run, step);
            g.backward(r.total);
            optimizer_step(params, opt, config.lr, config.weight_decay);

            sums.total += r.parts.total;
            sums.clean_ce += r.parts.clean_ce;
            sums.adv_ce += r.parts.adv_ce;
            sums.bt += r.parts.bt;
            ++steps_this_epoch;
            if (hooks.on_step) hooks.on_step(StepRecord{epoch, step, r.parts, run.effective_c()});
            ++step;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        if (steps_this_epoch > 0) {
            const auto n = static_cast<double>(steps_this_epoch);
            rec.mean_loss = {sums.total / n, sums.clean_ce / n, sums.adv_ce / n, sums.bt / n};
        }
        if (hooks.validation_f1) {
            rec.validation.f1 = hooks.validation_f1(epoch, model);
        } else {
            rec.validation = evaluate(model, validation);
        }
        const bool stop = stopper.update(epoch, rec.validation.f1);
        if (stopper.improved_last()) {
            result.best_model = model;
            result.best_head = head;
            rec.best = true;
        }
        result.history.push_back(rec);
        result.epochs_ran = epoch;
        if (hooks.on_epoch) hooks.on_epoch(rec);
        if (stop) break;
    }
    result.best_epoch = stopper.best_epoch();
    result.best_val_f1 = stopper.best_score();
    return result;
}

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history) {
    out << "epoch,total,clean_ce,adv_ce,bt,val_precision,val_recall,val_f1,best\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << format_double(r.mean_loss.total) << ','
            << format_double(r.mean_loss.clean_ce) << ',' << format_double(r.mean_loss.adv_ce)
            << ',' << format_double(r.mean_loss.bt) << ',' << format_double(r.validation.precision)
            << ',' << format_double(r.validation.recall) << ','
            << format_double(r.validation.f1) << ',' << (r.best ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Data preparation

Dataset prepare_dataset(std::span<const RawExample> raw, const ExperimentConfig& config) {
    return prepare_dataset(raw, config,
                           train_val_test_split(raw.size(), config.data.val_fraction,
                                                config.data.test_fraction,
                                                rng::derive_seed(config.seed, "split")));
}

Dataset prepare_dataset(std::span<const RawExample> raw, const ExperimentConfig& config,
                        const SplitSpec& split) {
    const PreprocessOptions opts{config.data.strict_hashtags};
    std::vector<std::string> clean(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) clean[i] = preprocess(raw[i].text, opts);

    std::vector<std::string> train_texts;
    train_texts.reserve(split.train.size());
    for (auto i : split.train) train_texts.push_back(clean.at(i));

    Dataset ds;
    ds.vocab = Vocab::build(train_texts, config.data.min_count);
    auto encode = [&](const std::vector<std::size_t>& ids, std::vector<EncodedExample>& out) {
        out.reserve(ids.size());
        for (auto i : ids) {
            out.push_back(tokenize_encode(clean.at(i), ds.vocab, config.encoder.max_seq_len,
                                          merge_labels(raw[i])));
        }
    };
    encode(split.train, ds.train);
    encode(split.validation, ds.validation);
    encode(split.test, ds.test);
    return ds;
}

// ---------------------------------------------------------------------------
// Sweeps

std::string cell_id(const SweepCell& cell) {
    return "L" + std::to_string(cell.layer) + "_C" + format_double(cell.c) + "_B" +
           std::to_string(cell.batch_size);
}

void validate_grid(const ExperimentConfig& base, std::span<const std::size_t> layers,
                   std::span<const double> c_values, std::span<const std::size_t> batch_sizes) {
    if (layers.empty() || c_values.empty() || batch_sizes.empty()) {
        throw Error("invalid-grid", "every sweep axis needs at least one value");
    }
    for (auto l : layers) {
        if (l > base.encoder.num_layers) {
            throw Error("invalid-grid", "layer " + std::to_string(l) + " exceeds the encoder's " +
                                            std::to_string(base.encoder.num_layers) + " layers");
        }
    }
    for (double c : c_values) {
        if (!(c >= 0.0 && c <= 1.0)) throw Error("invalid-grid", "c values must lie in [0, 1]");
    }
    for (auto b : batch_sizes) {
        if (b < 1 || (base.use_adv && base.use_bt && b < 2)) {
            throw Error("invalid-grid", "invalid batch size " + std::to_string(b));
        }
    }
}

namespace {

nlohmann::ordered_json cell_manifest(const CellResult& r, const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["cell"] = {{"layer", r.cell.layer}, {"c", r.cell.c}, {"batch_size", r.cell.batch_size}};
    j["status"] = r.ok ? "ok" : "error";
    j["error"] = r.error;
    j["epochs_ran"] = r.epochs_ran;
    j["validation"] = to_json(r.validation);
    j["test"] = to_json(r.test);
    nlohmann::ordered_json conf;
    for (const auto& [k, v] : to_key_values(cfg)) conf[k] = v;
    j["config"] = std::move(conf);
    return j;
}

MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.support = j.at("support").get<std::size_t>();
    return r;
}

std::optional<CellResult> load_finished_cell(const std::filesystem::path& manifest,
                                             const SweepCell& cell) {
    if (!std::filesystem::exists(manifest)) return std::nullopt;
    try {
        const auto j = nlohmann::json::parse(read_file(manifest));
        if (j.at("status") != "ok") return std::nullopt;
        CellResult r;
        r.cell = cell;
        r.ok = true;
        r.resumed = true;
        r.epochs_ran = j.at("epochs_ran").get<std::size_t>();
        r.validation = report_from_json(j.at("validation"));
        r.test = report_from_json(j.at("test"));
        return r;
    } catch (const std::exception&) {
        return std::nullopt;  // unreadable manifest: retrain the cell
    }
}

CellResult run_cell(const ExperimentConfig& cfg, const SweepCell& cell, const Dataset& dataset,
                    const std::filesystem::path& cell_dir) {
    CellResult r;
    r.cell = cell;
    try {
        auto models = init_models(cfg);
        std::vector<EpochRecord> history;
        FitHooks hooks;
        if (!cell_dir.empty()) {
            hooks.on_epoch = [&](const EpochRecord& rec) {
                history.push_back(rec);
                std::ostringstream os;
                write_history_csv(os, history);
                atomic_write_file(cell_dir / "history.csv", os.str());
            };
        }
        auto fitted = fit(std::move(models.model), std::move(models.head), dataset.train,
                          dataset.validation, cfg, hooks);
        r.validation = evaluate(fitted.best_model, dataset.validation);
        r.test = evaluate(fitted.best_model, dataset.test);
        r.epochs_ran = fitted.epochs_ran;
        r.ok = true;
    } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
    }
    return r;
}

}  // namespace

SweepReport sweep(const ExperimentConfig& base_in, std::span<const std::size_t> layers,
                  std::span<const double> c_values, std::span<const std::size_t> batch_sizes,
                  const Dataset& dataset, const SweepOptions& options) {
    ExperimentConfig base = base_in;
    base.encoder.vocab_size = dataset.vocab.size();
    validate_grid(base, layers, c_values, batch_sizes);
    base.validate();

    std::vector<SweepCell> cells;
    for (auto l : layers) {
        for (double c : c_values) {
            for (auto b : batch_sizes) cells.push_back({l, c, b});
        }
    }

    SweepReport report;
    report.cells.resize(cells.size());
    std::vector<bool> done(cells.size(), false);
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> trained{0};
    std::atomic<bool> interrupted{false};
    std::mutex stop_mutex;

    auto worker = [&] {
        for (;;) {
            {
                std::lock_guard lock(stop_mutex);
                if (interrupted || (options.should_stop && options.should_stop())) {
                    interrupted = true;
                    return;
                }
            }
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            const auto& cell = cells[i];
            ExperimentConfig cfg = base;
            cfg.noise.layer = cell.layer;
            cfg.c = cell.c;
            cfg.batch_size = cell.batch_size;

            std::filesystem::path cell_dir;
            if (!options.out_dir.empty()) cell_dir = options.out_dir / "cells" / cell_id(cell);
            if (options.resume && !cell_dir.empty()) {
                if (auto prev = load_finished_cell(cell_dir / "manifest.json", cell)) {
                    report.cells[i] = *prev;
                    done[i] = true;
                    continue;
                }
            }
            CellResult r = run_cell(cfg, cell, dataset, cell_dir);
            ++trained;
            if (!cell_dir.empty()) {
                atomic_write_file(cell_dir / "manifest.json", cell_manifest(r, cfg).dump(2) + "\n");
            }
            report.cells[i] = std::move(r);
            done[i] = true;
        }
    };

    const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, cells.size()));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }

    report.trained_cells = trained;
    report.interrupted = interrupted || std::find(done.begin(), done.end(), false) != done.end();
    if (report.interrupted) {
        std::vector<CellResult> finished;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (done[i]) finished.push_back(report.cells[i]);
        }
        report.cells = std::move(finished);
    }

    // One row per (layer, c): the batch size with the best validation F1.
    const std::string variant = model_variant(base);
    for (auto l : layers) {
        for (double c : c_values) {
            const CellResult* best = nullptr;
            std::string errors;
            bool any = false;
            for (const auto& cr : report.cells) {
                if (cr.cell.layer != l || cr.cell.c != c) continue;
                any = true;
                if (!cr.ok) {
                    errors += cell_id(cr.cell) + ": " + cr.error + "; ";
                    continue;
                }
                if (!best || cr.validation.f1 > best->validation.f1) best = &cr;
            }
            if (!any) continue;
            SweepRow row;
            row.variant = variant;
            row.layer = l;
            row.c = c;
            row.seed = base.seed;
            if (best) {
                row.batch_size = best->cell.batch_size;
                row.test = best->test;
                row.val_f1 = best->validation.f1;
                row.epochs_ran = best->epochs_ran;
            } else {
                row.error = errors;
                row.test.precision = row.test.recall = row.test.f1 = std::nan("");
            }
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
    out << "model_variant,layer,c,batch_size,precision,recall,f1,epochs_ran,seed\n";
    for (const auto& r : rows) {
        out << r.variant << ',' << r.layer << ',' << format_double(r.c) << ',' << r.batch_size
            << ',' << format_double(r.test.precision) << ',' << format_double(r.test.recall) << ','
            << format_double(r.test.f1) << ',' << r.epochs_ran << ',' << r.seed << '\n';
    }
}

void write_cells_csv(std::ostream& out, const SweepReport& report, const ExperimentConfig& base) {
    out << "model_variant,layer,c,batch_size,status,val_f1,precision,recall,f1,epochs_ran,seed,"
           "error\n";
    for (const auto& r : report.cells) {
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        out << model_variant(base) << ',' << r.cell.layer << ',' << format_double(r.cell.c) << ','
            << r.cell.batch_size << ',' << (r.ok ? "ok" : "error") << ','
            << format_double(r.validation.f1) << ',' << format_double(r.test.precision) << ','
            << format_double(r.test.recall) << ',' << format_double(r.test.f1) << ','
            << r.epochs_ran << ',' << base.seed << ',' << err << '\n';
    }
}

}  // namespace advbt
