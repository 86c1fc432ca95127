#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aura/error.hpp"
#include "aura/grid.hpp"

namespace aura::metrics {

/// Raised by hausdorff() when either foreground set is empty.
class UndefinedHausdorff : public DomainError {
public:
    using DomainError::DomainError;
};

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Which rates hit 0/0 and were defined as 1 (empty prediction against empty truth).
struct DefaultedRates {
    bool iou = false;
    bool dice = false;
    bool precision = false;
    bool recall = false;

    bool any() const noexcept { return iou || dice || precision || recall; }
    friend bool operator==(const DefaultedRates&, const DefaultedRates&) = default;
};

struct MetricsReport {
    double iou = 0.0;
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    /// Pixels. Empty when either foreground set is empty.
    std::optional<double> hausdorff;
    DefaultedRates defaulted;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// pixel = 1 iff p >= threshold.
BinaryMask binarize(const ProbabilityMap& pred, double threshold = 0.5);

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt);

/// Fills iou, dice, precision and recall; leaves hausdorff empty.
MetricsReport rates(const ConfusionCounts& counts);

/// Symmetric Hausdorff distance between the foreground pixel sets, Euclidean, in
/// pixels. Exact: built on an exact squared Euclidean distance transform.
double hausdorff(const BinaryMask& pred, const BinaryMask& gt);

/// rates() plus hausdorff(), with an undefined distance recorded as empty.
MetricsReport evaluate(const BinaryMask& pred, const BinaryMask& gt);

struct EvalPair {
    std::string id;
    ProbabilityMap pred;
    BinaryMask gt;
};

struct ImageReport {
    std::string id;
    MetricsReport metrics;
};

struct DatasetReport {
    std::vector<ImageReport> images;
    /// Unweighted mean over images. The Hausdorff mean skips undefined entries.
    MetricsReport mean;
    std::size_t hausdorff_undefined = 0;
};

DatasetReport evaluate_dataset(const std::vector<EvalPair>& pairs, double threshold = 0.5);

/// Unweighted mean of already computed per-image reports.
DatasetReport aggregate(std::vector<ImageReport> images);

nlohmann::json to_json(const MetricsReport& report);
nlohmann::json to_json(const DatasetReport& report);
DatasetReport dataset_report_from_json(const nlohmann::json& doc);

/// Fixed-width table with one row per image plus a "mean" row. Rates are printed as
/// percentages with two decimals.
std::string render_table(const DatasetReport& report);

/// "74.64%" style rendering.
std::string percent(double rate);

} // namespace aura::metrics
