#include "advbt/metrics.hpp"

#include "advbt/error.hpp"

namespace advbt {

ConfusionCounts confusion(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) {
        throw Error("shape-mismatch", "confusion: " + std::to_string(preds.size()) +
                                          " predictions for " + std::to_string(labels.size()) +
                                          " labels");
    }
    if (preds.empty()) throw Error("invalid-argument", "confusion: no examples");
    ConfusionCounts c;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool p = preds[i] == 1;
        const bool l = labels[i] == 1;
        if (p && l) ++c.tp;
        else if (p) ++c.fp;
        else if (l) ++c.fn;
        else ++c.tn;
    }
    return c;
}

MetricReport prf1(const ConfusionCounts& c) {
    auto ratio = [](std::size_t num, std::size_t den) {
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    MetricReport r;
    r.precision = ratio(c.tp, c.tp + c.fp);
    r.recall = ratio(c.tp, c.tp + c.fn);
    r.f1 = (r.precision + r.recall) > 0.0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
    r.support = c.total();
    return r;
}

MetricReport aggregate_folds(std::span<const MetricReport> reports) {
    if (reports.empty()) throw Error("invalid-argument", "aggregate_folds: no folds");
    MetricReport mean;
    for (const auto& r : reports) {
        mean.precision += r.precision;
        mean.recall += r.recall;
        mean.f1 += r.f1;
        mean.support += r.support;
        MetricReport fold = r;
        fold.folds.clear();
        mean.folds.push_back(std::move(fold));
    }
    const auto k = static_cast<double>(reports.size());
    mean.precision /= k;
    mean.recall /= k;
    mean.f1 /= k;
    return mean;
}

nlohmann::ordered_json to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["precision"] = report.precision;
    j["recall"] = report.recall;
    j["f1"] = report.f1;
    j["support"] = report.support;
    if (!report.folds.empty()) {
        auto folds = nlohmann::ordered_json::array();
        for (const auto& f : report.folds) folds.push_back(to_json(f));
        j["folds"] = std::move(folds);
    }
    return j;
}

}  // namespace advbt
