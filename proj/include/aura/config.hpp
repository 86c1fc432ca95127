#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "aura/data.hpp"
#include "aura/loss.hpp"
#include "aura/model.hpp"

namespace aura {

/// Everything a training run depends on.
struct TrainConfig {
    int batch_size = 4;
    double learning_rate = 3e-4;
    int epochs = 100;
    std::string optimizer = "adam";
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;
    double threshold = 0.5; ///< binarisation threshold for evaluation
    loss::LossConfig loss;
    model::ModelConfig model;
    data::DatasetSpec dataset;
    data::AugmentationConfig augmentation;

    /// Validates every section plus cross-section constraints (model input size must
    /// equal the dataset target size).
    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct RunConfig {
    TrainConfig train;
    std::filesystem::path output_dir = "runs/default";
    std::string log_level = "info";

    void validate() const;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Parses a config document. Missing keys take their defaults; unknown keys and
/// ill-typed values raise ConfigError naming the dotted key path.
RunConfig run_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& cfg);

/// Training-only part (no output directory or logging), as stored in checkpoints.
TrainConfig train_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const TrainConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

} // namespace aura
