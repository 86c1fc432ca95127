#include "aura/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "aura/error.hpp"
#include "aura/log.hpp"
#include "aura/loss.hpp"
#include "aura/random.hpp"

namespace aura::training {

namespace fs = std::filesystem;

std::string TrainHistory::to_csv() const {
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,seconds\n";
    char line[160];
    for (const auto& r : epochs) {
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.seconds);
        os << line;
    }
    return os.str();
}

PreparedData prepare(const TrainConfig& cfg, std::vector<data::Sample> samples) {
    cfg.validate();
    auto parts = data::split(std::move(samples), cfg.dataset);
    PreparedData out;
    const int size = cfg.dataset.target_size;
    for (auto& s : parts.test) {
        out.test.push_back(data::resize_and_crop(s, size));
    }
    std::vector<data::Sample> train;
    for (auto& s : parts.train) {
        train.push_back(data::resize_and_crop(s, size));
    }

    const auto holdout = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(train.size())));
    if (holdout >= train.size()) {
        throw ConfigError("validation hold-out would leave no training samples");
    }
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.dataset.split_seed, "validation", 0));
    rng.shuffle(order);
    std::vector<bool> is_val(train.size(), false);
    for (std::size_t k = 0; k < holdout; ++k) is_val[order[k]] = true;
    for (std::size_t i = 0; i < train.size(); ++i) {
        (is_val[i] ? out.validation : out.train).push_back(std::move(train[i]));
    }

    out.manifest.set("train", data::ids_of(out.train));
    out.manifest.set("validation", data::ids_of(out.validation));
    out.manifest.set("test", data::ids_of(out.test));
    return out;
}

PreparedData prepare(const TrainConfig& cfg) {
    cfg.validate();
    return prepare(cfg, data::ingest(cfg.dataset));
}

void save_checkpoint(const fs::path& path, model::SegmentationNet& net, const TrainConfig& cfg, std::int64_t step) {
    archive::Archive out;
    out.header = {{"kind", "checkpoint"}, {"config", to_json(cfg)}, {"step", step}};
    out.tensors = net->state();
    archive::write(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
    auto stored = archive::read(path);
    if (stored.header.value("kind", "") != "checkpoint") {
        throw ArchiveError(path.string() + " is not a model checkpoint");
    }
    Checkpoint ck;
    try {
        ck.config = train_config_from_json(stored.header.at("config"));
        ck.step = stored.header.at("step").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ArchiveError(path.string() + ": malformed checkpoint header: " + e.what());
    }
    auto layout = ck.config.model;
    layout.pretrained = false; // stored tensors already include the encoder
    ck.model = model::SegmentationNet(layout);
    ck.model->load_state(stored.tensors);
    ck.model->eval();
    return ck;
}

namespace {

std::vector<const data::Sample*> pointers(const std::vector<data::Sample>& samples, std::size_t begin, std::size_t end) {
    std::vector<const data::Sample*> out;
    for (std::size_t k = begin; k < end; ++k) out.push_back(&samples[k]);
    return out;
}

std::vector<archive::NamedTensor> snapshot(model::SegmentationNet& net) {
    auto state = net->state();
    for (auto& nt : state) nt.value = nt.value.detach().clone();
    return state;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    out << text;
    if (!out) throw DataError("cannot write " + path.string());
}

} // namespace

double evaluate_loss(model::SegmentationNet& net, const std::vector<data::Sample>& samples, const TrainConfig& cfg) {
    if (samples.empty()) {
        throw DataError("cannot evaluate a loss on an empty sample set");
    }
    torch::NoGradGuard no_grad;
    net->eval();
    double total = 0.0;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t b = 0; b < samples.size(); b += batch) {
        const auto end = std::min(samples.size(), b + batch);
        auto ptrs = pointers(samples, b, end);
        auto probs = net->forward(data::image_batch(ptrs, cfg.model.in_channels));
        total += loss::combined_loss(probs, data::mask_batch(ptrs), cfg.loss).item<double>() *
                 static_cast<double>(end - b);
    }
    return total / static_cast<double>(samples.size());
}

TrainResult train(const TrainConfig& cfg, const PreparedData& prepared, const fs::path& run_dir,
                  const EpochObserver& observer) {
    cfg.validate();
    if (prepared.train.empty()) {
        throw DataError("training partition is empty");
    }
    fs::create_directories(run_dir / "checkpoints");
    prepared.manifest.write(run_dir / "split.manifest");
    write_text(run_dir / "config.snapshot", to_json(cfg).dump(2) + "\n");
    at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);

    TrainResult result;
    result.model = model::build(cfg.model, cfg.seed);
    auto& net = result.model;
    torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));

    std::set<std::string> test_ids;
    if (prepared.manifest.has("test")) {
        const auto& ids = prepared.manifest.get("test");
        test_ids.insert(ids.begin(), ids.end());
    }
    const auto& val_set = prepared.validation.empty() ? prepared.train : prepared.validation;
    auto& history = result.history;
    history.best_checkpoint = run_dir / "checkpoints" / "best.ckpt";
    history.last_checkpoint = run_dir / "checkpoints" / "last.ckpt";
    std::vector<archive::NamedTensor> best_state;
    std::int64_t step = 0;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(prepared.train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng(derive_seed(cfg.seed, "batch-order", static_cast<std::uint64_t>(epoch))).shuffle(order);

        net->train();
        EpochRecord record;
        record.epoch = epoch;
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += batch) {
            const auto end = std::min(order.size(), b + batch);
            std::vector<data::Sample> drawn;
            std::string ids;
            for (std::size_t k = b; k < end; ++k) {
                const auto& sample = prepared.train[order[k]];
                if (test_ids.contains(sample.id)) {
                    throw TrainingError("split isolation violated: test sample '" + sample.id +
                                        "' reached a training batch");
                }
                drawn.push_back(data::augment(sample, cfg.augmentation,
                                              derive_seed(cfg.augmentation.seed, sample.id,
                                                          static_cast<std::uint64_t>(epoch)))
                                    .sample);
                ids += (ids.empty() ? "" : ",") + sample.id;
            }
            auto ptrs = pointers(drawn, 0, drawn.size());
            auto probs = net->forward(data::image_batch(ptrs, cfg.model.in_channels));
            const auto where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b / batch) +
                               " (samples " + ids + ")";
            torch::Tensor loss;
            try {
                loss = loss::combined_loss(probs, data::mask_batch(ptrs), cfg.loss);
            } catch (const DomainError& e) {
                // A non-finite prediction is rejected by the loss itself.
                throw TrainingError("non-finite loss at " + where + ": " + e.what());
            }
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw TrainingError("non-finite loss at " + where);
            }
            if (step == 0) {
                history.initial_loss = value;
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            ++step;
            ++record.steps;
            loss_sum += value * static_cast<double>(drawn.size());
        }
        record.train_loss = loss_sum / static_cast<double>(order.size());
        record.val_loss = evaluate_loss(net, val_set, cfg);
        record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

        if (history.best_epoch < 0 || record.val_loss < history.best_val_loss) {
            history.best_epoch = epoch;
            history.best_val_loss = record.val_loss;
            save_checkpoint(history.best_checkpoint, net, cfg, step);
            best_state = snapshot(net);
        }
        history.epochs.push_back(record);
        write_text(run_dir / "history.csv", history.to_csv());
        char line[128];
        std::snprintf(line, sizeof line, "epoch %d train %.6f val %.6f (%.1fs)", epoch, record.train_loss,
                      record.val_loss, record.seconds);
        log::debug(line);
        if (observer) observer(record);
    }
    save_checkpoint(history.last_checkpoint, net, cfg, step);
    net->load_state(best_state);
    net->eval();
    return result;
}

TrainResult train(const TrainConfig& cfg, const fs::path& run_dir, const EpochObserver& observer) {
    return train(cfg, prepare(cfg), run_dir, observer);
}

ProbabilityMap predict(model::SegmentationNet& net, const cv::Mat& image) {
    torch::NoGradGuard no_grad;
    net->eval();
    cv::Mat img = image.isContinuous() ? image : image.clone();
    auto probs = net->forward(data::image_tensor(img, net->config().in_channels).unsqueeze(0))[0][0];
    auto flat = probs.to(torch::kFloat64).contiguous();
    std::vector<double> values(flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel());
    return ProbabilityMap(static_cast<std::size_t>(probs.size(0)), static_cast<std::size_t>(probs.size(1)),
                          std::move(values));
}

metrics::DatasetReport evaluate(model::SegmentationNet& net, const std::vector<data::Sample>& samples,
                                double threshold) {
    if (samples.empty()) {
        throw DataError("evaluation set is empty");
    }
    std::vector<metrics::EvalPair> pairs;
    pairs.reserve(samples.size());
    for (const auto& s : samples) {
        pairs.push_back({s.id, predict(net, s.image), data::to_binary_mask(s.mask)});
    }
    return metrics::evaluate_dataset(pairs, threshold);
}

// ---------------------------------------------------------------------------

namespace {

std::string number(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

std::string slug(std::string text) {
    for (auto& c : text) {
        const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '=' || c == '-' || c == '+';
        if (!keep) c = '_';
    }
    return text;
}

std::vector<std::string> split_list(const std::string& text, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, sep)) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        out.push_back(item);
    }
    return out;
}

double parse_number(const std::string& text) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("grid value '" + text + "' is not a number");
    }
}

} // namespace

SweepParam sweep_param_from_string(const std::string& name) {
    if (name == "lambda") return SweepParam::lambda;
    if (name == "beta_gamma") return SweepParam::beta_gamma;
    throw ConfigError("sweep parameter must be 'lambda' or 'beta_gamma', got '" + name + "'");
}

std::string to_string(SweepParam param) {
    return param == SweepParam::lambda ? "lambda" : "beta_gamma";
}

std::string GridPoint::label(SweepParam param) const {
    if (param == SweepParam::lambda) return "lambda=" + number(first);
    return "beta=" + number(first) + ",gamma=" + number(second);
}

std::vector<GridPoint> parse_grid(SweepParam param, const std::string& text) {
    std::vector<GridPoint> grid;
    for (const auto& item : split_list(text, ',')) {
        if (item.empty()) continue;
        GridPoint p;
        if (param == SweepParam::lambda) {
            p.first = parse_number(item);
        } else {
            auto parts = split_list(item, ':');
            if (parts.size() != 2) {
                throw ConfigError("beta_gamma grid entries look like beta:gamma, got '" + item + "'");
            }
            p.first = parse_number(parts[0]);
            p.second = parse_number(parts[1]);
        }
        grid.push_back(p);
    }
    if (grid.empty()) {
        throw ConfigError("sweep grid is empty");
    }
    return grid;
}

TrainConfig apply_point(TrainConfig cfg, SweepParam param, const GridPoint& point) {
    if (param == SweepParam::lambda) {
        cfg.loss.lambda = point.first;
    } else {
        cfg.loss.beta = point.first;
        cfg.loss.gamma = point.second;
    }
    cfg.loss.validate();
    return cfg;
}

std::vector<SweepRow> line_search(SweepParam param, const std::vector<GridPoint>& grid, const TrainConfig& base,
                                  const PreparedData& data, const fs::path& run_root) {
    if (grid.empty()) {
        throw ConfigError("sweep grid is empty");
    }
    if (data.validation.empty()) {
        throw ConfigError("line search ranks runs on the validation partition; set train.validation_fraction > 0");
    }
    std::vector<SweepRow> rows;
    for (const auto& point : grid) {
        const auto cfg = apply_point(base, param, point);
        const auto label = point.label(param);
        log::info("sweep: training " + label);
        auto run = train(cfg, data, run_root / slug(label));
        auto report = evaluate(run.model, data.validation, cfg.threshold);
        write_text(run_root / slug(label) / "metrics.json", metrics::to_json(report).dump(2) + "\n");
        rows.push_back({point, label, run.history.best_val_loss, std::move(report)});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
        return a.validation.mean.dice > b.validation.mean.dice;
    });
    return rows;
}

std::string render_sweep(SweepParam param, const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(6) << "rank" << std::setw(28) << to_string(param) << std::right << std::setw(12)
       << "val Dice" << std::setw(12) << "val IoU" << std::setw(16) << "best val loss" << '\n';
    int rank = 1;
    for (const auto& r : rows) {
        os << std::left << std::setw(6) << rank++ << std::setw(28) << r.label << std::right << std::setw(12)
           << metrics::percent(r.validation.mean.dice) << std::setw(12) << metrics::percent(r.validation.mean.iou)
           << std::setw(16) << std::setprecision(6) << r.best_val_loss << '\n';
    }
    return os.str();
}

nlohmann::json to_json(SweepParam param, const std::vector<SweepRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row = {{"label", r.label},
                              {"best_val_loss", r.best_val_loss},
                              {"validation", metrics::to_json(r.validation)}};
        if (param == SweepParam::lambda) {
            row["lambda"] = r.point.first;
        } else {
            row["beta"] = r.point.first;
            row["gamma"] = r.point.second;
        }
        out.push_back(std::move(row));
    }
    return {{"param", to_string(param)}, {"rows", std::move(out)}};
}

// ---------------------------------------------------------------------------

std::string Variant::label() const {
    if (resnet && attention && ac_loss) return "AURA-net";
    std::string out = "U-net";
    if (resnet) out += "+ResNet";
    if (attention) out += "+Attention";
    if (ac_loss) out += "+AC loss";
    return out;
}

std::vector<Variant> full_matrix() {
    return {
        {false, false, false}, {true, false, false}, {false, true, false}, {false, false, true},
        {true, false, true},   {false, true, true},  {true, true, false},  {true, true, true},
    };
}

std::vector<Variant> parse_variants(const std::string& text) {
    auto normalise = [](std::string s) {
        std::string out;
        for (char c : s) {
            if (c != ' ' && c != '-' && c != '_') out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
        return out;
    };
    if (normalise(text) == "all") return full_matrix();
    std::vector<Variant> out;
    for (const auto& raw : split_list(text, ',')) {
        const auto token = normalise(raw);
        if (token.empty()) continue;
        if (token == "auranet") {
            out.push_back({true, true, true});
            continue;
        }
        auto parts = split_list(token, '+');
        if (parts.empty() || parts.front() != "unet") {
            throw ConfigError("unknown ablation variant '" + raw + "'");
        }
        Variant v{false, false, false};
        for (std::size_t k = 1; k < parts.size(); ++k) {
            if (parts[k] == "resnet") v.resnet = true;
            else if (parts[k] == "attention") v.attention = true;
            else if (parts[k] == "acloss" || parts[k] == "ac") v.ac_loss = true;
            else throw ConfigError("unknown ablation component '" + parts[k] + "' in '" + raw + "'");
        }
        out.push_back(v);
    }
    if (out.empty()) {
        throw ConfigError("no ablation variants selected");
    }
    return out;
}

TrainConfig apply_variant(TrainConfig cfg, const Variant& v) {
    const bool wants_pretrained = cfg.model.pretrained;
    cfg.model.encoder = v.resnet ? model::EncoderKind::resnet18 : model::EncoderKind::plain_unet;
    cfg.model.pretrained = v.resnet && wants_pretrained;
    cfg.model.attention = v.attention;
    if (!v.ac_loss) {
        cfg.loss = loss::pixelwise_only(cfg.loss);
    }
    return cfg;
}

std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<Variant>& variants,
                                const PreparedData& data, const fs::path& run_root) {
    if (variants.empty()) {
        throw ConfigError("no ablation variants selected");
    }
    if (data.test.empty()) {
        throw DataError("ablation needs a non-empty test partition");
    }
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        const auto cfg = apply_variant(base, v);
        log::info("ablation: training " + v.label());
        auto run = train(cfg, data, run_root / slug(v.label()));
        auto report = evaluate(run.model, data.test, cfg.threshold);
        write_text(run_root / slug(v.label()) / "metrics.json", metrics::to_json(report).dump(2) + "\n");
        rows.push_back({v, v.label(), std::move(report)});
    }
    return rows;
}

std::string render_ablation(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(26) << "" << std::right << std::setw(10) << "IoU" << std::setw(10) << "Dice"
       << std::setw(11) << "Precision" << std::setw(10) << "Recall" << std::setw(9) << "HD" << '\n';
    for (const auto& r : rows) {
        const auto& m = r.test.mean;
        std::ostringstream hd;
        if (m.hausdorff) {
            hd << std::fixed << std::setprecision(2) << *m.hausdorff;
        } else {
            hd << "undef";
        }
        os << std::left << std::setw(26) << r.label << std::right << std::setw(10) << metrics::percent(m.iou)
           << std::setw(10) << metrics::percent(m.dice) << std::setw(11) << metrics::percent(m.precision)
           << std::setw(10) << metrics::percent(m.recall) << std::setw(9) << hd.str() << '\n';
    }
    return os.str();
}

nlohmann::json to_json(const std::vector<AblationRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"label", r.label},
                       {"resnet", r.variant.resnet},
                       {"attention", r.variant.attention},
                       {"ac_loss", r.variant.ac_loss},
                       {"test", metrics::to_json(r.test)}});
    }
    return out;
}

} // namespace aura::training
