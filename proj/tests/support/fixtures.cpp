#include "fixtures.hpp"

#include <cmath>
#include <cstdlib>
#include <random>

#include <unistd.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "aura/archive.hpp"
#include "aura/model.hpp"

namespace fs = std::filesystem;

namespace fixtures {

TempDir::TempDir(const std::string& tag) {
    std::random_device rd;
    for (int attempt = 0; attempt < 100; ++attempt) {
        auto candidate = fs::temp_directory_path() / ("aura-" + tag + "-" + std::to_string(rd()));
        if (fs::create_directories(candidate)) {
            path_ = candidate;
            return;
        }
    }
    throw std::runtime_error("cannot create a temporary directory");
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

aura::data::Sample synthetic_cell(int height, int width, std::uint64_t seed, const std::string& id) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double cy = height * (0.35 + 0.3 * u(gen));
    const double cx = width * (0.35 + 0.3 * u(gen));
    const double ry = std::min(height, width) * (0.15 + 0.12 * u(gen));
    const double rx = std::min(height, width) * (0.15 + 0.12 * u(gen));
    const double angle = 180.0 * u(gen);

    cv::Mat mask = cv::Mat::zeros(height, width, CV_8UC1);
    cv::ellipse(mask, cv::Point2d(cx, cy), cv::Size2d(rx, ry), angle, 0, 360, cv::Scalar(1), cv::FILLED);

    // Dark halo ring just outside the cell, bright interior, noisy background.
    cv::Mat halo = cv::Mat::zeros(height, width, CV_8UC1);
    cv::ellipse(halo, cv::Point2d(cx, cy), cv::Size2d(rx + 3, ry + 3), angle, 0, 360, cv::Scalar(1), 4);
    cv::Mat image(height, width, CV_32FC1);
    std::normal_distribution<float> noise(0.0f, 0.04f);
    for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
            float v = 0.45f + noise(gen);
            if (mask.at<std::uint8_t>(i, j)) v = 0.75f + noise(gen);
            if (halo.at<std::uint8_t>(i, j) && !mask.at<std::uint8_t>(i, j)) v = 0.2f + noise(gen);
            image.at<float>(i, j) = std::clamp(v, 0.0f, 1.0f);
        }
    }
    cv::GaussianBlur(image, image, cv::Size(3, 3), 0.8);
    return {image, mask, id, "synthetic"};
}

void write_dataset(const fs::path& root, int count, int height, int width, std::uint64_t seed) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    for (int k = 0; k < count; ++k) {
        char id[32];
        std::snprintf(id, sizeof id, "cell_%03d", k);
        auto s = synthetic_cell(height, width, seed * 1000003ULL + static_cast<std::uint64_t>(k), id);
        cv::Mat img16;
        s.image.convertTo(img16, CV_16U, 65535.0);
        cv::imwrite((root / "images" / (std::string(id) + ".png")).string(), img16);
        cv::imwrite((root / "masks" / (std::string(id) + ".png")).string(), s.mask * 255);
    }
}

aura::ProbabilityMap random_map(int h, int w, std::uint64_t seed, double lo, double hi) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(h * w));
    for (auto& x : v) x = u(gen);
    return aura::ProbabilityMap(static_cast<std::size_t>(h), static_cast<std::size_t>(w), std::move(v));
}

aura::BinaryMask random_mask(int h, int w, std::uint64_t seed, double density) {
    std::mt19937_64 gen(seed);
    std::bernoulli_distribution b(density);
    std::vector<std::uint8_t> v(static_cast<std::size_t>(h * w));
    for (auto& x : v) x = b(gen) ? 1 : 0;
    return aura::BinaryMask(static_cast<std::size_t>(h), static_cast<std::size_t>(w), std::move(v));
}

namespace {

fs::path imagenet_candidate() {
    if (const char* env = std::getenv("AURA_PRETRAINED_WEIGHTS"); env && *env && fs::exists(env)) {
        return env;
    }
    auto cached = aura::model::weights_cache_dir() / aura::model::kDefaultWeightsFile;
    if (fs::exists(cached)) return cached;
    return {};
}

} // namespace

bool pretrained_is_imagenet() {
    return !imagenet_candidate().empty();
}

fs::path pretrained_weights() {
    if (auto real = imagenet_candidate(); !real.empty()) return real;
    auto path = fs::temp_directory_path() / "aura-standin-resnet18.aura";
    if (!fs::exists(path)) {
        aura::model::ModelConfig mc;
        mc.pretrained = false;
        mc.attention = false;
        mc.input_height = mc.input_width = 64;
        auto net = aura::model::build(mc, 20240101);
        auto tmp = path;
        tmp += "." + std::to_string(::getpid());
        aura::model::save_encoder_weights(net, tmp);
        fs::rename(tmp, path);
    }
    return path;
}

aura::TrainConfig small_config(const fs::path& data_root, int size, int train_count, int test_count) {
    aura::TrainConfig cfg;
    cfg.dataset.root = data_root;
    cfg.dataset.target_size = size;
    cfg.dataset.train_count = train_count;
    cfg.dataset.test_count = test_count;
    cfg.dataset.split_seed = 7;
    cfg.dataset.dataset_id = "synthetic";
    cfg.model.input_height = cfg.model.input_width = size;
    cfg.model.weights.path = pretrained_weights().string();
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.seed = 3;
    return cfg;
}

} // namespace fixtures
