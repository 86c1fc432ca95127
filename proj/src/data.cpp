#include "aura/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "aura/error.hpp"
#include "aura/random.hpp"

namespace aura::data {

namespace fs = std::filesystem;

void DatasetSpec::validate() const {
    if (target_size < 2) throw ConfigError("dataset.target_size must be >= 2");
    if (train_count < 1) throw ConfigError("dataset.train_count must be >= 1");
    if (test_count < 0) throw ConfigError("dataset.test_count must be >= 0");
}

AugmentationConfig AugmentationConfig::identity() {
    AugmentationConfig cfg;
    cfg.flip_horizontal_p = 0.0;
    cfg.flip_vertical_p = 0.0;
    cfg.rotation = false;
    cfg.shift = false;
    cfg.scale = false;
    cfg.shear = false;
    cfg.clahe = false;
    cfg.elastic = false;
    return cfg;
}

bool AugmentationConfig::geometric_enabled() const {
    return flip_horizontal_p > 0.0 || flip_vertical_p > 0.0 || rotation || shift || scale || shear || elastic;
}

void AugmentationConfig::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw ConfigError(std::string("augmentation.") + name + " must lie in [0,1]");
        }
    };
    auto range = [](double v, double hi, const char* name) {
        if (!(std::isfinite(v) && v >= 0.0 && v <= hi)) {
            throw ConfigError(std::string("augmentation.") + name + " must lie in [0," + std::to_string(hi) + "]");
        }
    };
    prob(flip_horizontal_p, "flip_horizontal_p");
    prob(flip_vertical_p, "flip_vertical_p");
    prob(clahe_p, "clahe_p");
    prob(elastic_p, "elastic_p");
    range(rotation_degrees, 180.0, "rotation_degrees");
    range(shift_fraction, 1.0, "shift_fraction");
    range(scale_fraction, 0.9, "scale_fraction");
    range(shear_degrees, 60.0, "shear_degrees");
    if (!(std::isfinite(clahe_clip_limit) && clahe_clip_limit > 0.0)) {
        throw ConfigError("augmentation.clahe_clip_limit must be > 0");
    }
    if (clahe_tiles < 1) throw ConfigError("augmentation.clahe_tiles must be >= 1");
    range(elastic_max_displacement, 1e4, "elastic_max_displacement");
    if (!(std::isfinite(elastic_sigma) && elastic_sigma > 0.0)) {
        throw ConfigError("augmentation.elastic_sigma must be > 0");
    }
}

namespace {

bool is_raster(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

std::map<std::string, fs::path> rasters_by_stem(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) {
        return out;
    }
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_raster(entry.path())) {
            const auto stem = entry.path().stem().string();
            if (!out.emplace(stem, entry.path()).second) {
                throw DataError("two files share the id '" + stem + "' in " + dir.string());
            }
        }
    }
    return out;
}

cv::Mat load(const fs::path& path) {
    cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty()) {
        throw DataError("unreadable image file " + path.string());
    }
    return raw;
}

} // namespace

cv::Mat read_image(const fs::path& path) {
    cv::Mat raw = load(path);
    if (raw.channels() == 3) {
        cv::cvtColor(raw, raw, cv::COLOR_BGR2GRAY);
    } else if (raw.channels() == 4) {
        cv::cvtColor(raw, raw, cv::COLOR_BGRA2GRAY);
    }
    cv::Mat out;
    switch (raw.depth()) {
    case CV_8U:
        raw.convertTo(out, CV_32F, 1.0 / 255.0);
        break;
    case CV_16U:
        raw.convertTo(out, CV_32F, 1.0 / 65535.0);
        break;
    default: {
        raw.convertTo(out, CV_32F);
        double lo = 0.0, hi = 0.0;
        cv::minMaxLoc(out, &lo, &hi);
        if (lo < 0.0 || hi > 1.0) {
            const double span = hi > lo ? hi - lo : 1.0;
            out.convertTo(out, CV_32F, 1.0 / span, -lo / span);
        }
    }
    }
    return out;
}

cv::Mat read_mask(const fs::path& path) {
    cv::Mat raw = load(path);
    if (raw.channels() > 1) {
        std::vector<cv::Mat> planes;
        cv::split(raw, planes);
        cv::Mat any = planes[0] != 0;
        for (std::size_t c = 1; c < planes.size(); ++c) {
            any |= planes[c] != 0;
        }
        raw = any;
    }
    cv::Mat mask = raw != 0;
    mask /= 255;
    return mask;
}

std::vector<Sample> ingest(const DatasetSpec& spec) {
    const auto images = rasters_by_stem(spec.root / "images");
    const auto masks = rasters_by_stem(spec.root / "masks");
    if (images.empty()) {
        throw DataError("no samples found under " + (spec.root / "images").string());
    }
    std::vector<Sample> samples;
    samples.reserve(images.size());
    for (const auto& [id, image_path] : images) {
        auto mask_it = masks.find(id);
        if (mask_it == masks.end()) {
            throw DataError("missing mask for image '" + id + "'");
        }
        Sample s{read_image(image_path), read_mask(mask_it->second), id, spec.dataset_id};
        if (s.image.size() != s.mask.size()) {
            throw DataError("image and mask sizes differ for '" + id + "'");
        }
        samples.push_back(std::move(s));
    }
    return samples; // std::map iteration is already sorted by id
}

std::vector<std::string> ids_of(const std::vector<Sample>& samples) {
    std::vector<std::string> ids;
    ids.reserve(samples.size());
    for (const auto& s : samples) ids.push_back(s.id);
    return ids;
}

Split split(std::vector<Sample> samples, const DatasetSpec& spec) {
    const auto need = static_cast<std::size_t>(spec.train_count) + static_cast<std::size_t>(spec.test_count);
    if (spec.train_count < 1 || spec.test_count < 0 || need > samples.size()) {
        throw DataError("cannot split " + std::to_string(samples.size()) + " samples into " +
                        std::to_string(spec.train_count) + " train + " + std::to_string(spec.test_count) +
                        " test");
    }
    std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix64(spec.split_seed));
    rng.shuffle(order);

    Split out;
    for (std::size_t k = 0; k < need; ++k) {
        auto& dst = k < static_cast<std::size_t>(spec.train_count) ? out.train : out.test;
        dst.push_back(std::move(samples[order[k]]));
    }
    auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
    std::sort(out.train.begin(), out.train.end(), by_id);
    std::sort(out.test.begin(), out.test.end(), by_id);
    return out;
}

void Manifest::set(const std::string& partition, std::vector<std::string> ids) {
    for (auto& [name, list] : partitions_) {
        if (name == partition) {
            list = std::move(ids);
            return;
        }
    }
    partitions_.emplace_back(partition, std::move(ids));
}

const std::vector<std::string>& Manifest::get(const std::string& partition) const {
    for (const auto& [name, list] : partitions_) {
        if (name == partition) return list;
    }
    throw DataError("split manifest has no partition '" + partition + "'");
}

bool Manifest::has(const std::string& partition) const {
    return std::any_of(partitions_.begin(), partitions_.end(), [&](const auto& p) { return p.first == partition; });
}

std::string Manifest::to_text() const {
    std::ostringstream os;
    for (const auto& [name, ids] : partitions_) {
        os << '[' << name << "]\n";
        for (const auto& id : ids) os << id << '\n';
    }
    return os.str();
}

Manifest Manifest::parse(const std::string& text) {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    std::string current;
    bool open = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        if (line.front() == '[' && line.back() == ']') {
            current = line.substr(1, line.size() - 2);
            m.set(current, {});
            open = true;
            continue;
        }
        if (!open) {
            throw DataError("split manifest lists an id before any [partition] header");
        }
        for (auto& [name, ids] : m.partitions_) {
            if (name == current) ids.push_back(line);
        }
    }
    return m;
}

void Manifest::write(const fs::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    out << to_text();
    if (!out) throw DataError("cannot write manifest " + path.string());
}

Manifest Manifest::read(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read manifest " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

Sample resize_and_crop(const Sample& sample, int target) {
    const int h = sample.image.rows;
    const int w = sample.image.cols;
    if (h < 2 || w < 2) {
        throw DataError("sample '" + sample.id + "' is degenerate (" + std::to_string(w) + "x" +
                        std::to_string(h) + ")");
    }
    if (sample.mask.size() != sample.image.size()) {
        throw ShapeError("sample '" + sample.id + "' image and mask sizes differ");
    }
    if (target < 1) {
        throw ConfigError("target size must be positive");
    }
    const double scale = static_cast<double>(target) / std::min(h, w);
    const int rh = h <= w ? target : static_cast<int>(std::lround(h * scale));
    const int rw = w < h ? target : static_cast<int>(std::lround(w * scale));

    Sample out{cv::Mat(), cv::Mat(), sample.id, sample.dataset_id};
    cv::Mat image, mask;
    cv::resize(sample.image, image, cv::Size(rw, rh), 0, 0, cv::INTER_LINEAR);
    cv::resize(sample.mask, mask, cv::Size(rw, rh), 0, 0, cv::INTER_NEAREST);
    const cv::Rect crop((rw - target) / 2, (rh - target) / 2, target, target);
    out.image = image(crop).clone();
    out.mask = (mask(crop) != 0) / 255;
    return out;
}

std::pair<cv::Mat, cv::Mat> elastic_field(int height, int width, double max_displacement, double sigma,
                                          std::uint64_t seed) {
    Rng rng(seed);
    cv::Mat dx(height, width, CV_32F), dy(height, width, CV_32F);
    for (auto* m : {&dx, &dy}) {
        for (int i = 0; i < height; ++i) {
            auto* row = m->ptr<float>(i);
            for (int j = 0; j < width; ++j) row[j] = static_cast<float>(rng.uniform(-1.0, 1.0));
        }
    }
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    const cv::Size ksize(2 * radius + 1, 2 * radius + 1);
    cv::GaussianBlur(dx, dx, ksize, sigma, sigma, cv::BORDER_REFLECT_101);
    cv::GaussianBlur(dy, dy, ksize, sigma, sigma, cv::BORDER_REFLECT_101);
    cv::Mat magnitude;
    cv::magnitude(dx, dy, magnitude);
    double peak = 0.0;
    cv::minMaxLoc(magnitude, nullptr, &peak);
    if (peak > 0.0) {
        dx *= max_displacement / peak;
        dy *= max_displacement / peak;
    }
    return {dx, dy};
}

cv::Mat clahe(const cv::Mat& image, double clip_limit, int tiles) {
    cv::Mat wide;
    image.convertTo(wide, CV_16U, 65535.0);
    auto op = cv::createCLAHE(clip_limit, cv::Size(tiles, tiles));
    cv::Mat equalised;
    op->apply(wide, equalised);
    cv::Mat out;
    equalised.convertTo(out, CV_32F, 1.0 / 65535.0);
    return out;
}

Augmented augment(const Sample& sample, const AugmentationConfig& cfg, std::uint64_t draw_seed) {
    cfg.validate();
    if (sample.image.size() != sample.mask.size()) {
        throw ShapeError("sample '" + sample.id + "' image and mask sizes differ");
    }
    Rng rng(draw_seed);
    // Every parameter is drawn regardless of flags so toggling one transform leaves
    // the draws of the others unchanged.
    const bool hflip = rng.bernoulli(cfg.flip_horizontal_p);
    const bool vflip = rng.bernoulli(cfg.flip_vertical_p);
    const double theta = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees) * std::numbers::pi / 180.0;
    const double shift_x = rng.uniform(-cfg.shift_fraction, cfg.shift_fraction);
    const double shift_y = rng.uniform(-cfg.shift_fraction, cfg.shift_fraction);
    const double zoom = 1.0 + rng.uniform(-cfg.scale_fraction, cfg.scale_fraction);
    const double phi = rng.uniform(-cfg.shear_degrees, cfg.shear_degrees) * std::numbers::pi / 180.0;
    const bool elastic = cfg.elastic && rng.bernoulli(cfg.elastic_p);
    const std::uint64_t elastic_seed = rng.next();
    const bool equalise = cfg.clahe && rng.bernoulli(cfg.clahe_p);

    const int h = sample.image.rows;
    const int w = sample.image.cols;

    // Linear part maps output offsets from the centre to source offsets.
    cv::Matx22d linear(hflip ? -1.0 : 1.0, 0.0, 0.0, vflip ? -1.0 : 1.0);
    if (cfg.scale) linear = cv::Matx22d(zoom, 0.0, 0.0, zoom) * linear;
    if (cfg.shear) linear = cv::Matx22d(1.0, std::tan(phi), 0.0, 1.0) * linear;
    if (cfg.rotation) {
        linear = cv::Matx22d(std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta)) * linear;
    }
    const double tx = cfg.shift ? shift_x * w : 0.0;
    const double ty = cfg.shift ? shift_y * h : 0.0;
    const bool affine = hflip || vflip || cfg.rotation || cfg.shift || cfg.scale || cfg.shear;

    Augmented out{Sample{sample.image.clone(), sample.mask.clone(), sample.id, sample.dataset_id}, {}};
    if (affine || elastic) {
        cv::Mat dx, dy;
        if (elastic) {
            std::tie(dx, dy) = elastic_field(h, w, cfg.elastic_max_displacement, cfg.elastic_sigma, elastic_seed);
        }
        const double cx = (w - 1) / 2.0;
        const double cy = (h - 1) / 2.0;
        cv::Mat map_x(h, w, CV_32F), map_y(h, w, CV_32F);
        for (int i = 0; i < h; ++i) {
            auto* mx = map_x.ptr<float>(i);
            auto* my = map_y.ptr<float>(i);
            for (int j = 0; j < w; ++j) {
                double ox = j - cx;
                double oy = i - cy;
                if (elastic) {
                    ox += dx.at<float>(i, j);
                    oy += dy.at<float>(i, j);
                }
                mx[j] = static_cast<float>(cx + linear(0, 0) * ox + linear(0, 1) * oy + tx);
                my[j] = static_cast<float>(cy + linear(1, 0) * ox + linear(1, 1) * oy + ty);
            }
        }
        out.record.map_x = map_x;
        out.record.map_y = map_y;
        out.record.linear = linear;
        out.record.translation = {tx, ty};
        out.record.elastic_applied = elastic;
        out.record.elastic_seed = elastic_seed;
        cv::remap(sample.image, out.sample.image, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
        out.sample.mask = warp_mask(sample.mask, out.record);
        cv::min(cv::max(out.sample.image, 0.0), 1.0, out.sample.image);
    }
    if (equalise) {
        out.sample.image = clahe(out.sample.image, cfg.clahe_clip_limit, cfg.clahe_tiles);
        out.record.clahe_applied = true;
    }
    return out;
}

cv::Mat warp_mask(const cv::Mat& mask, const AugmentRecord& record) {
    if (!record.warped()) {
        return mask.clone();
    }
    cv::Mat out;
    cv::remap(mask, out, record.map_x, record.map_y, cv::INTER_NEAREST, cv::BORDER_REFLECT_101);
    return (out != 0) / 255;
}

BinaryMask to_binary_mask(const cv::Mat& mask) {
    CV_Assert(mask.type() == CV_8UC1);
    std::vector<std::uint8_t> values(static_cast<std::size_t>(mask.rows) * mask.cols);
    for (int i = 0; i < mask.rows; ++i) {
        const auto* row = mask.ptr<std::uint8_t>(i);
        for (int j = 0; j < mask.cols; ++j) values[static_cast<std::size_t>(i) * mask.cols + j] = row[j] ? 1 : 0;
    }
    return BinaryMask(static_cast<std::size_t>(mask.rows), static_cast<std::size_t>(mask.cols), std::move(values));
}

cv::Mat to_mat(const BinaryMask& mask) {
    cv::Mat out(static_cast<int>(mask.height()), static_cast<int>(mask.width()), CV_8U);
    std::copy(mask.values().begin(), mask.values().end(), out.ptr<std::uint8_t>(0));
    return out;
}

namespace {

constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};

} // namespace

torch::Tensor image_tensor(const cv::Mat& image, int channels) {
    CV_Assert(image.type() == CV_32FC1 && image.isContinuous());
    auto gray = torch::from_blob(const_cast<float*>(image.ptr<float>(0)), {1, image.rows, image.cols},
                                 torch::kFloat32)
                    .clone();
    std::vector<torch::Tensor> planes;
    for (int c = 0; c < channels; ++c) {
        const float mean = channels == 3 ? kMean[c] : 0.449f;
        const float std = channels == 3 ? kStd[c] : 0.226f;
        planes.push_back((gray - mean) / std);
    }
    return torch::cat(planes, 0);
}

torch::Tensor image_batch(const std::vector<const Sample*>& samples, int channels) {
    std::vector<torch::Tensor> items;
    items.reserve(samples.size());
    for (const auto* s : samples) {
        cv::Mat img = s->image.isContinuous() ? s->image : s->image.clone();
        items.push_back(image_tensor(img, channels));
    }
    return torch::stack(items);
}

torch::Tensor mask_batch(const std::vector<const Sample*>& samples) {
    std::vector<torch::Tensor> items;
    items.reserve(samples.size());
    for (const auto* s : samples) {
        cv::Mat m;
        s->mask.convertTo(m, CV_32F);
        items.push_back(torch::from_blob(m.ptr<float>(0), {1, m.rows, m.cols}, torch::kFloat32).clone());
    }
    return torch::stack(items);
}

} // namespace aura::data
