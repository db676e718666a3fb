#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace advbt {

// Class 1 (health) is the positive class.
struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const noexcept { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

struct MetricReport {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
    std::vector<MetricReport> folds;  // filled by aggregate_folds
};

ConfusionCounts confusion(std::span<const int> preds, std::span<const int> labels);

// Zero denominators give 0 rather than NaN.
MetricReport prf1(const ConfusionCounts& counts);

// Unweighted mean over folds; per-fold reports are kept.
MetricReport aggregate_folds(std::span<const MetricReport> reports);

nlohmann::ordered_json to_json(const MetricReport& report);

}  // namespace advbt
