#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aura/config.hpp"
#include "aura/data.hpp"
#include "aura/metrics.hpp"
#include "aura/model.hpp"

namespace aura::training {

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
    int steps = 0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    /// Loss of the very first batch, before any optimiser step.
    double initial_loss = 0.0;
    int best_epoch = -1;
    double best_val_loss = 0.0;
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;

    /// epoch,train_loss,val_loss,seconds with full double precision.
    std::string to_csv() const;
};

/// Preprocessed partitions of one dataset. Built once and shared so that every run
/// of a sweep or ablation sees the same split.
struct PreparedData {
    std::vector<data::Sample> train;
    std::vector<data::Sample> validation;
    std::vector<data::Sample> test;
    data::Manifest manifest;
};

/// ingest -> split -> resize_and_crop -> seeded validation hold-out of
/// floor(validation_fraction * train_count) training samples.
PreparedData prepare(const TrainConfig& cfg);

/// Same as prepare() for samples already in memory (not yet resized).
PreparedData prepare(const TrainConfig& cfg, std::vector<data::Sample> samples);

struct TrainResult {
    model::SegmentationNet model{nullptr}; ///< best-validation-loss weights
    TrainHistory history;
};

struct Checkpoint {
    TrainConfig config;
    std::int64_t step = 0;
    model::SegmentationNet model{nullptr};
};

/// Writes every parameter and buffer together with the config and step counter.
void save_checkpoint(const std::filesystem::path& path, model::SegmentationNet& net, const TrainConfig& cfg,
                     std::int64_t step);
/// Rebuilds the network from the stored config (without re-fetching pretrained
/// weights) and loads the stored tensors. Throws ArchiveError on any mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Called after every epoch; handy for progress output.
using EpochObserver = std::function<void(const EpochRecord&)>;

/// Full training loop on prepared data. Writes `run_dir/checkpoints/{best,last}.ckpt`,
/// `run_dir/history.csv` and `run_dir/split.manifest`.
TrainResult train(const TrainConfig& cfg, const PreparedData& data, const std::filesystem::path& run_dir,
                  const EpochObserver& observer = {});

/// prepare() followed by train().
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& run_dir, const EpochObserver& observer = {});

/// Probability map for one preprocessed image (inference mode).
ProbabilityMap predict(model::SegmentationNet& net, const cv::Mat& image);

/// Mean combined loss over samples in inference mode.
double evaluate_loss(model::SegmentationNet& net, const std::vector<data::Sample>& samples, const TrainConfig& cfg);

metrics::DatasetReport evaluate(model::SegmentationNet& net, const std::vector<data::Sample>& samples,
                                double threshold);

// ---------------------------------------------------------------------------
// Hyperparameter line search

enum class SweepParam { lambda, beta_gamma };

SweepParam sweep_param_from_string(const std::string& name);
std::string to_string(SweepParam param);

/// One grid point. For lambda only `first` is used; for beta_gamma it is (beta, gamma).
struct GridPoint {
    double first = 0.0;
    double second = 0.0;

    std::string label(SweepParam param) const;
};

/// Parses "0,5,10" for lambda or "0.75:0.25,1:0" for beta_gamma.
std::vector<GridPoint> parse_grid(SweepParam param, const std::string& text);

TrainConfig apply_point(TrainConfig cfg, SweepParam param, const GridPoint& point);

struct SweepRow {
    GridPoint point;
    std::string label;
    double best_val_loss = 0.0;
    metrics::DatasetReport validation;
};

/// One training run per grid point with identical seeds and split; rows ranked by
/// validation Dice, best first. Requires a non-empty validation partition.
std::vector<SweepRow> line_search(SweepParam param, const std::vector<GridPoint>& grid, const TrainConfig& base,
                                  const PreparedData& data, const std::filesystem::path& run_root);

std::string render_sweep(SweepParam param, const std::vector<SweepRow>& rows);
nlohmann::json to_json(SweepParam param, const std::vector<SweepRow>& rows);

// ---------------------------------------------------------------------------
// Ablations

struct Variant {
    bool resnet = true;
    bool attention = true;
    bool ac_loss = true;

    std::string label() const;
    friend bool operator==(const Variant&, const Variant&) = default;
};

/// The eight on/off combinations in ablation-table order, ending with the full model.
std::vector<Variant> full_matrix();

/// Accepts "all", or comma-separated labels / short names such as "unet",
/// "unet+resnet+attention", "aura-net".
std::vector<Variant> parse_variants(const std::string& text);

/// The encoder becomes ResNet-18 (pretrained iff the base asks for it) or the plain
/// contracting path; attention follows the toggle; without the AC loss the weights
/// become gamma = 0, beta = 1. Nothing else changes.
TrainConfig apply_variant(TrainConfig cfg, const Variant& variant);

struct AblationRow {
    Variant variant;
    std::string label;
    metrics::DatasetReport test;
};

/// Trains every variant on the same split and evaluates it on the test partition.
std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<Variant>& variants,
                                const PreparedData& data, const std::filesystem::path& run_root);

std::string render_ablation(const std::vector<AblationRow>& rows);
nlohmann::json to_json(const std::vector<AblationRow>& rows);

} // namespace aura::training
