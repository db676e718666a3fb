#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advbt/contrastive.hpp"
#include "advbt/encoder.hpp"
#include "advbt/metrics.hpp"
#include "advbt/optimizer.hpp"
#include "advbt/perturbation.hpp"
#include "advbt/textprep.hpp"

namespace advbt {

struct DataConfig {
    double val_fraction = 0.15;
    double test_fraction = 0.15;
    bool strict_hashtags = false;
    std::size_t min_count = 1;
    bool operator==(const DataConfig&) const = default;
};

struct SweepGrid {
    std::vector<std::size_t> layers{1, 4, 7, 10, 13, 16, 19, 22};
    std::vector<double> c_values{0.1, 0.2, 0.3, 0.4};
    std::vector<std::size_t> batch_sizes{16, 24, 32};
    bool operator==(const SweepGrid&) const = default;
};

struct ExperimentConfig {
    NoiseSpec noise;          // noise.seed is derived from `seed` by fit()
    double c = 0.2;           // Barlow Twins weight in the combined loss
    std::size_t batch_size = 16;
    double lr = 3e-4;
    double weight_decay = 0.01;
    std::size_t epochs = 10;
    std::size_t patience = 3;
    std::uint64_t seed = 7;
    BTConfig bt;
    EncoderConfig encoder;
    std::size_t proj_dim = 32;
    bool use_bt = true;
    bool use_adv = true;
    DataConfig data;
    SweepGrid grid;

    void validate() const;
    // Weight of the BT term actually applied: c with BT, 0 without.
    double effective_c() const { return use_adv && use_bt ? c : 0.0; }
    bool operator==(const ExperimentConfig&) const = default;
};

// "baseline", "AT" or "AT+BT".
std::string model_variant(const ExperimentConfig& config);

struct LossBreakdown {
    double total = 0.0;
    double clean_ce = 0.0;
    double adv_ce = 0.0;
    double bt = 0.0;
};

// ((1 - c) / 2) * (clean + adv) + c * bt
double total_loss(double clean_ce, double adv_ce, double bt, double c);
Var total_loss(Var clean_ce, Var adv_ce, std::optional<Var> bt, double c);

struct DualForwardResult {
    LossBreakdown parts;
    Var total;
    Var logits_clean;
    std::optional<Var> logits_adv;
};

// Clean pass, then (if use_adv) the same encoder continued from the tapped
// layer with Gaussian noise added, two cross-entropies, and (if use_bt) the
// Barlow Twins loss over projected [CLS] vectors from one shared head.
// `step` keys the noise and dropout draws.
DualForwardResult dual_forward(Graph& graph, const EncoderModel& model, ProjectionHead& head,
                               const TokenBatch& batch, const ExperimentConfig& config,
                               std::uint64_t step);

std::vector<ParamRef> collect_parameters(EncoderModel& model, ProjectionHead* head);

struct ModelPair {
    EncoderModel model;
    ProjectionHead head;
};

// Fresh encoder and head from the config's root seed ("init" / "init-head" substreams).
ModelPair init_models(const ExperimentConfig& config);

std::vector<int> predict(const EncoderModel& model, std::span<const EncodedExample> examples,
                         std::size_t batch_size = 64);
MetricReport evaluate(const EncoderModel& model, std::span<const EncodedExample> examples,
                      std::size_t batch_size = 64);

// Stops after `patience` consecutive epochs without a strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    // Returns true when training should stop after this epoch.
    bool update(std::size_t epoch, double score);
    std::size_t best_epoch() const noexcept { return best_epoch_; }
    double best_score() const noexcept { return best_; }
    bool improved_last() const noexcept { return improved_; }

private:
    std::size_t patience_;
    std::size_t best_epoch_ = 0;
    double best_ = -1.0;
    std::size_t stale_ = 0;
    bool improved_ = false;
};

struct StepRecord {
    std::size_t epoch = 0;
    std::uint64_t step = 0;
    LossBreakdown loss;
    double c = 0.0;  // effective_c() used for this step
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    LossBreakdown mean_loss;
    MetricReport validation;
    bool best = false;
};

struct FitHooks {
    // Replaces validation F1 for an epoch (tests inject sequences here).
    std::function<double(std::size_t epoch, const EncoderModel&)> validation_f1;
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
    EncoderModel best_model;
    ProjectionHead best_head;
    std::size_t best_epoch = 0;
    double best_val_f1 = 0.0;
    std::size_t epochs_ran = 0;
    std::vector<EpochRecord> history;
};

FitResult fit(EncoderModel model, ProjectionHead head, std::span<const EncodedExample> train,
              std::span<const EncodedExample> validation, const ExperimentConfig& config,
              const FitHooks& hooks = {});

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history);

struct Dataset {
    Vocab vocab;
    std::vector<EncodedExample> train, validation, test;
};

// preprocess -> split (seed substream "split") -> vocab from train -> encode.
Dataset prepare_dataset(std::span<const RawExample> raw, const ExperimentConfig& config);
// Same, with explicit index lists (k-fold).
Dataset prepare_dataset(std::span<const RawExample> raw, const ExperimentConfig& config,
                        const SplitSpec& split);

struct SweepCell {
    std::size_t layer = 1;
    double c = 0.0;
    std::size_t batch_size = 16;
};

std::string cell_id(const SweepCell& cell);

struct CellResult {
    SweepCell cell;
    bool ok = false;
    bool resumed = false;  // loaded from an earlier run
    std::string error;
    MetricReport validation;
    MetricReport test;
    std::size_t epochs_ran = 0;
};

struct SweepRow {
    std::string variant;
    std::size_t layer = 0;
    double c = 0.0;
    std::size_t batch_size = 0;
    MetricReport test;
    double val_f1 = 0.0;
    std::size_t epochs_ran = 0;
    std::uint64_t seed = 0;
    std::string error;
};

struct SweepOptions {
    std::filesystem::path out_dir;  // empty: keep everything in memory
    bool resume = false;
    std::size_t threads = 1;
    std::function<bool()> should_stop;  // checked before each cell starts
};

struct SweepReport {
    std::vector<CellResult> cells;  // grid order: layer, c, batch size
    std::vector<SweepRow> rows;     // one per (layer, c), best validation F1 over batch sizes
    std::size_t trained_cells = 0;
    bool interrupted = false;
};

void validate_grid(const ExperimentConfig& base, std::span<const std::size_t> layers,
                   std::span<const double> c_values, std::span<const std::size_t> batch_sizes);

SweepReport sweep(const ExperimentConfig& base, std::span<const std::size_t> layers,
                  std::span<const double> c_values, std::span<const std::size_t> batch_sizes,
                  const Dataset& dataset, const SweepOptions& options = {});

// model_variant,layer,c,batch_size,precision,recall,f1,epochs_ran,seed (test-split metrics)
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);
void write_cells_csv(std::ostream& out, const SweepReport& report, const ExperimentConfig& base);

}  // namespace advbt
