#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "aura/config.hpp"
#include "aura/data.hpp"
#include "aura/grid.hpp"

namespace fixtures {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Synthetic phase-contrast-like sample: one bright elliptical cell with a dark halo
/// on a noisy background. Fully determined by `seed`.
aura::data::Sample synthetic_cell(int height, int width, std::uint64_t seed, const std::string& id);

/// Writes `count` synthetic samples to `<root>/images/<id>.png` (16-bit) and
/// `<root>/masks/<id>.png` (0/255).
void write_dataset(const std::filesystem::path& root, int count, int height, int width, std::uint64_t seed = 1);

/// Random [0,1] map with values drawn uniformly from [lo, hi].
aura::ProbabilityMap random_map(int h, int w, std::uint64_t seed, double lo = 0.0, double hi = 1.0);
aura::BinaryMask random_mask(int h, int w, std::uint64_t seed, double density = 0.3);

/// Encoder weights to use wherever a pretrained ResNet-18 is required. Prefers a real
/// ImageNet archive (AURA_PRETRAINED_WEIGHTS, then the weight cache) and otherwise
/// writes a deterministic stand-in derived from a seeded initialisation.
std::filesystem::path pretrained_weights();

/// True when pretrained_weights() returned real ImageNet weights.
bool pretrained_is_imagenet();

/// Small configuration suitable for CPU tests.
aura::TrainConfig small_config(const std::filesystem::path& data_root, int size, int train_count, int test_count);

} // namespace fixtures
