#include "aura/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace aura::metrics {

BinaryMask binarize(const ProbabilityMap& pred, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw DomainError("binarization threshold must lie in (0,1)");
    }
    BinaryMask out(pred.height(), pred.width());
    auto src = pred.values();
    auto dst = out.values();
    std::transform(src.begin(), src.end(), dst.begin(),
                   [threshold](double p) { return static_cast<std::uint8_t>(p >= threshold); });
    return out;
}

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
    if (!pred.same_shape(gt)) {
        throw ShapeError("confusion: prediction and ground truth shapes differ");
    }
    // Index 2*g + p selects tn, fp, fn, tp.
    std::uint64_t bins[4] = {0, 0, 0, 0};
    auto p = pred.values();
    auto g = gt.values();
    for (std::size_t k = 0; k < p.size(); ++k) {
        ++bins[2 * g[k] + p[k]];
    }
    return {.tp = bins[3], .fp = bins[1], .fn = bins[2], .tn = bins[0]};
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den, bool& defaulted) {
    if (den == 0) {
        defaulted = true;
        return 1.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

constexpr double kFar = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) over one line. Sites with
// an infinite value are excluded from the envelope.
void distance_1d(std::vector<double>& f, std::vector<int>& sites, std::vector<double>& bounds) {
    const int n = static_cast<int>(f.size());
    sites.clear();
    bounds.clear();
    for (int q = 0; q < n; ++q) {
        if (f[q] == kFar) {
            continue;
        }
        const double fq = f[q] + static_cast<double>(q) * q;
        while (!sites.empty()) {
            const int v = sites.back();
            const double s = (fq - (f[v] + static_cast<double>(v) * v)) / (2.0 * (q - v));
            if (s <= bounds.back()) {
                sites.pop_back();
                bounds.pop_back();
            } else {
                sites.push_back(q);
                bounds.push_back(s);
                break;
            }
        }
        if (sites.empty()) {
            sites.push_back(q);
            bounds.push_back(-kFar);
        }
    }
    if (sites.empty()) {
        return;
    }
    std::vector<double> src(f);
    std::size_t k = 0;
    for (int q = 0; q < n; ++q) {
        while (k + 1 < sites.size() && bounds[k + 1] < q) {
            ++k;
        }
        const double d = static_cast<double>(q - sites[k]);
        f[q] = d * d + src[sites[k]];
    }
}

// Squared Euclidean distance from every pixel to the nearest foreground pixel of `mask`.
std::vector<double> squared_distance_transform(const BinaryMask& mask) {
    const std::size_t h = mask.height();
    const std::size_t w = mask.width();
    std::vector<double> dist(h * w);
    auto m = mask.values();
    for (std::size_t k = 0; k < dist.size(); ++k) {
        dist[k] = m[k] ? 0.0 : kFar;
    }
    std::vector<double> line;
    std::vector<int> sites;
    std::vector<double> bounds;
    line.resize(h);
    for (std::size_t j = 0; j < w; ++j) {
        for (std::size_t i = 0; i < h; ++i) line[i] = dist[i * w + j];
        distance_1d(line, sites, bounds);
        for (std::size_t i = 0; i < h; ++i) dist[i * w + j] = line[i];
    }
    line.resize(w);
    for (std::size_t i = 0; i < h; ++i) {
        std::copy_n(dist.begin() + static_cast<std::ptrdiff_t>(i * w), w, line.begin());
        distance_1d(line, sites, bounds);
        std::copy(line.begin(), line.end(), dist.begin() + static_cast<std::ptrdiff_t>(i * w));
    }
    return dist;
}

// max over foreground of `from` of the squared distance to the foreground of `to`.
double directed_squared(const BinaryMask& from, const BinaryMask& to) {
    auto dist = squared_distance_transform(to);
    auto m = from.values();
    double worst = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) {
        if (m[k]) worst = std::max(worst, dist[k]);
    }
    return worst;
}

} // namespace

MetricsReport rates(const ConfusionCounts& c) {
    MetricsReport r;
    r.iou = ratio(c.tp, c.tp + c.fp + c.fn, r.defaulted.iou);
    r.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, r.defaulted.dice);
    r.precision = ratio(c.tp, c.tp + c.fp, r.defaulted.precision);
    r.recall = ratio(c.tp, c.tp + c.fn, r.defaulted.recall);
    return r;
}

double hausdorff(const BinaryMask& pred, const BinaryMask& gt) {
    if (!pred.same_shape(gt)) {
        throw ShapeError("hausdorff: prediction and ground truth shapes differ");
    }
    if (pred.empty_foreground() || gt.empty_foreground()) {
        throw UndefinedHausdorff("Hausdorff distance undefined: empty foreground set");
    }
    return std::sqrt(std::max(directed_squared(pred, gt), directed_squared(gt, pred)));
}

MetricsReport evaluate(const BinaryMask& pred, const BinaryMask& gt) {
    auto report = rates(confusion(pred, gt));
    if (!pred.empty_foreground() && !gt.empty_foreground()) {
        report.hausdorff = hausdorff(pred, gt);
    }
    return report;
}

namespace {

// Sums in ascending order so the result does not depend on the order of the images.
double ordered_mean(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
}

} // namespace

DatasetReport aggregate(std::vector<ImageReport> images) {
    if (images.empty()) {
        throw DataError("cannot aggregate an empty evaluation set");
    }
    DatasetReport out;
    std::vector<double> iou, dice, precision, recall, hd;
    for (const auto& img : images) {
        iou.push_back(img.metrics.iou);
        dice.push_back(img.metrics.dice);
        precision.push_back(img.metrics.precision);
        recall.push_back(img.metrics.recall);
        out.mean.defaulted.iou |= img.metrics.defaulted.iou;
        out.mean.defaulted.dice |= img.metrics.defaulted.dice;
        out.mean.defaulted.precision |= img.metrics.defaulted.precision;
        out.mean.defaulted.recall |= img.metrics.defaulted.recall;
        if (img.metrics.hausdorff) {
            hd.push_back(*img.metrics.hausdorff);
        } else {
            ++out.hausdorff_undefined;
        }
    }
    out.mean.iou = ordered_mean(std::move(iou));
    out.mean.dice = ordered_mean(std::move(dice));
    out.mean.precision = ordered_mean(std::move(precision));
    out.mean.recall = ordered_mean(std::move(recall));
    if (!hd.empty()) {
        out.mean.hausdorff = ordered_mean(std::move(hd));
    }
    out.images = std::move(images);
    return out;
}

DatasetReport evaluate_dataset(const std::vector<EvalPair>& pairs, double threshold) {
    if (pairs.empty()) {
        throw DataError("evaluation set is empty");
    }
    std::vector<ImageReport> images;
    images.reserve(pairs.size());
    for (const auto& pair : pairs) {
        if (!pair.pred.same_shape(pair.gt)) {
            throw ShapeError("evaluation pair '" + pair.id + "' has mismatched shapes");
        }
        images.push_back({pair.id, evaluate(binarize(pair.pred, threshold), pair.gt)});
    }
    return aggregate(std::move(images));
}

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json doc = {
        {"iou", r.iou},
        {"dice", r.dice},
        {"precision", r.precision},
        {"recall", r.recall},
        {"hausdorff", r.hausdorff ? nlohmann::json(*r.hausdorff) : nlohmann::json(nullptr)},
    };
    if (r.defaulted.any()) {
        auto& flags = doc["defaulted"] = nlohmann::json::array();
        if (r.defaulted.iou) flags.push_back("iou");
        if (r.defaulted.dice) flags.push_back("dice");
        if (r.defaulted.precision) flags.push_back("precision");
        if (r.defaulted.recall) flags.push_back("recall");
    }
    return doc;
}

nlohmann::json to_json(const DatasetReport& report) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& img : report.images) {
        auto row = to_json(img.metrics);
        row["id"] = img.id;
        images.push_back(std::move(row));
    }
    auto mean = to_json(report.mean);
    mean["hausdorff_undefined"] = report.hausdorff_undefined;
    mean["count"] = report.images.size();
    return {{"images", std::move(images)}, {"aggregate", std::move(mean)}};
}

namespace {

MetricsReport report_from_json(const nlohmann::json& doc) {
    MetricsReport r;
    r.iou = doc.at("iou").get<double>();
    r.dice = doc.at("dice").get<double>();
    r.precision = doc.at("precision").get<double>();
    r.recall = doc.at("recall").get<double>();
    if (!doc.at("hausdorff").is_null()) {
        r.hausdorff = doc.at("hausdorff").get<double>();
    }
    if (doc.contains("defaulted")) {
        for (const auto& flag : doc.at("defaulted")) {
            const auto name = flag.get<std::string>();
            r.defaulted.iou |= name == "iou";
            r.defaulted.dice |= name == "dice";
            r.defaulted.precision |= name == "precision";
            r.defaulted.recall |= name == "recall";
        }
    }
    return r;
}

} // namespace

DatasetReport dataset_report_from_json(const nlohmann::json& doc) {
    DatasetReport out;
    try {
        for (const auto& row : doc.at("images")) {
            out.images.push_back({row.at("id").get<std::string>(), report_from_json(row)});
        }
        out.mean = report_from_json(doc.at("aggregate"));
        out.hausdorff_undefined = doc.at("aggregate").at("hausdorff_undefined").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed metrics document: ") + e.what());
    }
    return out;
}

std::string percent(double rate) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << rate * 100.0 << '%';
    return os.str();
}

std::string render_table(const DatasetReport& report) {
    std::size_t id_width = 4;
    for (const auto& img : report.images) {
        id_width = std::max(id_width, img.id.size());
    }
    std::ostringstream os;
    auto row = [&](const std::string& id, const MetricsReport& m) {
        os << std::left << std::setw(static_cast<int>(id_width)) << id << std::right;
        os << std::setw(10) << percent(m.iou) << std::setw(10) << percent(m.dice)
           << std::setw(11) << percent(m.precision) << std::setw(10) << percent(m.recall);
        std::ostringstream hd;
        if (m.hausdorff) {
            hd << std::fixed << std::setprecision(2) << *m.hausdorff;
        } else {
            hd << "undef";
        }
        os << std::setw(9) << hd.str() << '\n';
    };
    os << std::left << std::setw(static_cast<int>(id_width)) << "id" << std::right << std::setw(10)
       << "IoU" << std::setw(10) << "Dice" << std::setw(11) << "Precision" << std::setw(10) << "Recall"
       << std::setw(9) << "HD" << '\n';
    for (const auto& img : report.images) {
        row(img.id, img.metrics);
    }
    row("mean", report.mean);
    return os.str();
}

} // namespace aura::metrics
