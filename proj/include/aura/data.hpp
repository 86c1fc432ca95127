#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "aura/grid.hpp"

namespace aura::data {

/// One image/mask pair. `image` is CV_32FC1 with values in [0,1]; `mask` is CV_8UC1
/// holding only 0 and 1.
struct Sample {
    cv::Mat image;
    cv::Mat mask;
    std::string id;
    std::string dataset_id;
};

struct DatasetSpec {
    std::filesystem::path root;
    int target_size = 512;
    int train_count = 25;
    int test_count = 10;
    std::uint64_t split_seed = 0;
    std::string dataset_id = "1";

    void validate() const;
    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct AugmentationConfig {
    double flip_horizontal_p = 0.5;
    double flip_vertical_p = 0.5;
    bool rotation = true;
    double rotation_degrees = 30.0;
    bool shift = true;
    double shift_fraction = 0.1;
    bool scale = true;
    double scale_fraction = 0.1;
    bool shear = true;
    double shear_degrees = 10.0;
    bool clahe = true;
    double clahe_p = 0.5;
    double clahe_clip_limit = 2.0;
    int clahe_tiles = 8;
    bool elastic = true;
    double elastic_p = 0.5;
    double elastic_max_displacement = 8.0;
    double elastic_sigma = 16.0;
    std::uint64_t seed = 0;

    /// Every transform disabled.
    static AugmentationConfig identity();
    bool geometric_enabled() const;

    void validate() const;
    friend bool operator==(const AugmentationConfig&, const AugmentationConfig&) = default;
};

/// Reads `<root>/images/*` and `<root>/masks/*` (png, tif, tiff) matched by file stem.
/// Samples come back sorted by id, masks binarised with any nonzero value as foreground.
std::vector<Sample> ingest(const DatasetSpec& spec);

/// Loads a grayscale image and rescales it to [0,1] by the range of its pixel type.
cv::Mat read_image(const std::filesystem::path& path);
/// Any nonzero pixel is foreground.
cv::Mat read_mask(const std::filesystem::path& path);

struct Split {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

/// Seeded shuffle, then the first train_count samples train and the next test_count
/// samples test.
Split split(std::vector<Sample> samples, const DatasetSpec& spec);

/// Named partitions of sample ids, persisted as
///   [train]
///   id
///   ...
class Manifest {
public:
    void set(const std::string& partition, std::vector<std::string> ids);
    const std::vector<std::string>& get(const std::string& partition) const;
    bool has(const std::string& partition) const;

    std::string to_text() const;
    static Manifest parse(const std::string& text);
    void write(const std::filesystem::path& path) const;
    static Manifest read(const std::filesystem::path& path);

    friend bool operator==(const Manifest&, const Manifest&) = default;

private:
    std::vector<std::pair<std::string, std::vector<std::string>>> partitions_;
};

std::vector<std::string> ids_of(const std::vector<Sample>& samples);

/// Aspect-preserving resize so the shorter side equals `target` (the other side is
/// rounded to the nearest pixel), then a centre crop of the longer side. Bilinear for
/// the image, nearest-neighbour for the mask.
Sample resize_and_crop(const Sample& sample, int target);

/// Source coordinates for every output pixel, as consumed by cv::remap. Empty maps mean
/// the geometry was left untouched.
struct AugmentRecord {
    cv::Mat map_x;
    cv::Mat map_y;
    /// source = centre + linear * (output - centre + elastic displacement) + translation
    cv::Matx22d linear = cv::Matx22d::eye();
    cv::Vec2d translation{0.0, 0.0};
    bool elastic_applied = false;
    std::uint64_t elastic_seed = 0;
    bool clahe_applied = false;

    bool warped() const { return !map_x.empty(); }
};

struct Augmented {
    Sample sample;
    AugmentRecord record;
};

/// Random flips, rotation, shift, scale, shear and elastic deformation shared by image
/// and mask, plus CLAHE on the image only. Pure function of (sample, cfg, draw_seed).
Augmented augment(const Sample& sample, const AugmentationConfig& cfg, std::uint64_t draw_seed);

/// Re-applies the geometric part of a record to a mask (nearest-neighbour,
/// reflection at the border).
cv::Mat warp_mask(const cv::Mat& mask, const AugmentRecord& record);

/// Smoothed random displacement field scaled so its largest magnitude equals
/// `max_displacement`. Returns {dx, dy}, CV_32FC1.
std::pair<cv::Mat, cv::Mat> elastic_field(int height, int width, double max_displacement, double sigma,
                                          std::uint64_t seed);

/// Contrast-limited adaptive histogram equalisation of a [0,1] image.
cv::Mat clahe(const cv::Mat& image, double clip_limit, int tiles);

BinaryMask to_binary_mask(const cv::Mat& mask);
cv::Mat to_mat(const BinaryMask& mask);

/// Stacks images into [N,C,H,W] float32, replicating the grayscale channel and applying
/// ImageNet normalisation.
torch::Tensor image_batch(const std::vector<const Sample*>& samples, int channels);
/// [N,1,H,W] float32 {0,1}.
torch::Tensor mask_batch(const std::vector<const Sample*>& samples);
torch::Tensor image_tensor(const cv::Mat& image, int channels);

} // namespace aura::data
