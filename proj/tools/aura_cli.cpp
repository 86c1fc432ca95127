// aura: train, evaluate and apply AURA-net segmentation models.
//
// Exit codes: 0 success, 2 configuration or usage error, 1 any other failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "aura/config.hpp"
#include "aura/error.hpp"
#include "aura/log.hpp"
#include "aura/metrics.hpp"
#include "aura/training.hpp"

namespace fs = std::filesystem;
using namespace aura;

namespace {

constexpr int kRuntimeError = 1;
constexpr int kConfigError = 2;

// Flags shared by the commands that start from a config file.
struct RunFlags {
    std::string config;
    std::optional<int> epochs;
    std::optional<std::string> output;
    std::optional<std::string> data;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> log_level;

    void attach(CLI::App* cmd) {
        cmd->add_option("-c,--config", config, "JSON run configuration")->required()->check(CLI::ExistingFile);
        cmd->add_option("--epochs", epochs, "override train.epochs");
        cmd->add_option("-o,--output", output, "override output_dir");
        cmd->add_option("--data", data, "override dataset.root");
        cmd->add_option("--seed", seed, "override train.seed");
        cmd->add_option("--log-level", log_level, "trace, debug, info, warn, error or off");
    }

    RunConfig load() const {
        auto cfg = load_run_config(config);
        if (epochs) cfg.train.epochs = *epochs;
        if (output) cfg.output_dir = *output;
        if (data) cfg.train.dataset.root = *data;
        if (seed) cfg.train.seed = *seed;
        if (log_level) cfg.log_level = *log_level;
        cfg.validate();
        log::set_level(cfg.log_level);
        return cfg;
    }
};

void write_json(const fs::path& path, const nlohmann::json& doc) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << doc.dump(2) << '\n';
    if (!out) throw DataError("cannot write " + path.string());
}

int cmd_train(const RunFlags& flags) {
    const auto cfg = flags.load();
    auto data = training::prepare(cfg.train);
    auto run = training::train(cfg.train, data, cfg.output_dir, [&](const training::EpochRecord& r) {
        char line[160];
        std::snprintf(line, sizeof line, "epoch %d/%d  train %.6f  val %.6f  %.1fs", r.epoch + 1, cfg.train.epochs,
                      r.train_loss, r.val_loss, r.seconds);
        log::info(line);
    });
    std::cout << "best epoch " << run.history.best_epoch + 1 << " (val loss " << run.history.best_val_loss
              << "), checkpoint " << run.history.best_checkpoint.string() << '\n';
    if (!data.test.empty()) {
        auto report = training::evaluate(run.model, data.test, cfg.train.threshold);
        write_json(cfg.output_dir / "metrics.json", metrics::to_json(report));
        std::cout << metrics::render_table(report);
    } else {
        log::warn("test partition is empty; metrics.json not written");
    }
    return 0;
}

struct EvalFlags {
    std::string checkpoint;
    std::optional<std::string> data;
    std::string partition = "test";
    std::optional<double> threshold;
    std::optional<std::string> output;
    std::string log_level = "info";
};

int cmd_eval(const EvalFlags& flags) {
    log::set_level(flags.log_level);
    auto ck = training::load_checkpoint(flags.checkpoint);
    auto cfg = ck.config;
    if (flags.data) cfg.dataset.root = *flags.data;
    const double threshold = flags.threshold.value_or(cfg.threshold);
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("--threshold must lie in (0,1)");

    std::vector<data::Sample> samples;
    if (flags.partition == "all") {
        for (auto& s : data::ingest(cfg.dataset)) samples.push_back(data::resize_and_crop(s, cfg.dataset.target_size));
    } else {
        auto prepared = training::prepare(cfg);
        if (flags.partition == "test") samples = std::move(prepared.test);
        else if (flags.partition == "validation") samples = std::move(prepared.validation);
        else samples = std::move(prepared.train);
    }
    if (samples.empty()) throw DataError("the " + flags.partition + " partition is empty");

    auto report = training::evaluate(ck.model, samples, threshold);
    const auto out = flags.output ? fs::path(*flags.output) : fs::path(flags.checkpoint).parent_path().parent_path() / "metrics.json";
    write_json(out, metrics::to_json(report));
    std::cout << metrics::render_table(report);
    return 0;
}

struct PredictFlags {
    std::string checkpoint;
    std::string images;
    std::string out;
    std::optional<double> threshold;
    bool overlay = false;
    std::string log_level = "info";
};

bool is_image(const fs::path& p) {
    auto ext = p.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext == ".png" || ext == ".tif" || ext == ".tiff" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

// Prediction boundary in red over the preprocessed grey image.
cv::Mat render_overlay(const cv::Mat& image, const cv::Mat& mask) {
    cv::Mat grey, colour;
    image.convertTo(grey, CV_8U, 255.0);
    cv::cvtColor(grey, colour, cv::COLOR_GRAY2BGR);
    cv::Mat eroded, edge;
    cv::erode(mask, eroded, cv::getStructuringElement(cv::MORPH_RECT, cv::Size(3, 3)), cv::Point(-1, -1), 1,
              cv::BORDER_CONSTANT, cv::Scalar(0));
    cv::subtract(mask, eroded, edge);
    colour.setTo(cv::Scalar(0, 0, 255), edge);
    return colour;
}

int cmd_predict(const PredictFlags& flags) {
    log::set_level(flags.log_level);
    auto ck = training::load_checkpoint(flags.checkpoint);
    const double threshold = flags.threshold.value_or(ck.config.threshold);
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("--threshold must lie in (0,1)");
    if (!fs::is_directory(flags.images)) throw DataError(flags.images + " is not a directory");

    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(flags.images)) {
        if (entry.is_regular_file() && is_image(entry.path())) inputs.push_back(entry.path());
    }
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) throw DataError("no images found in " + flags.images);
    fs::create_directories(flags.out);

    const int size = ck.config.dataset.target_size;
    for (const auto& path : inputs) {
        auto image = data::read_image(path);
        data::Sample sample{image, cv::Mat::zeros(image.size(), CV_8UC1), path.stem().string(), ""};
        auto prepared = data::resize_and_crop(sample, size);
        auto mask = data::to_mat(metrics::binarize(training::predict(ck.model, prepared.image), threshold));
        const auto stem = path.stem().string();
        if (!cv::imwrite((fs::path(flags.out) / (stem + ".png")).string(), mask * 255)) {
            throw DataError("cannot write mask for " + stem);
        }
        if (flags.overlay) {
            cv::imwrite((fs::path(flags.out) / (stem + "_overlay.png")).string(), render_overlay(prepared.image, mask));
        }
        log::debug("predicted " + stem);
    }
    std::cout << "wrote " << inputs.size() << " mask(s) to " << flags.out << '\n';
    return 0;
}

int cmd_ablate(const RunFlags& flags, const std::string& variants) {
    const auto cfg = flags.load();
    const auto selected = training::parse_variants(variants);
    auto data = training::prepare(cfg.train);
    auto rows = training::ablate(cfg.train, selected, data, cfg.output_dir);
    write_json(cfg.output_dir / "ablation.json", training::to_json(rows));
    std::cout << training::render_ablation(rows);
    return 0;
}

int cmd_sweep(const RunFlags& flags, const std::string& param_name, const std::string& grid_text) {
    const auto cfg = flags.load();
    const auto param = training::sweep_param_from_string(param_name);
    const auto grid = training::parse_grid(param, grid_text);
    auto data = training::prepare(cfg.train);
    auto rows = training::line_search(param, grid, cfg.train, data, cfg.output_dir);
    write_json(cfg.output_dir / "sweep.json", training::to_json(param, rows));
    std::cout << training::render_sweep(param, rows);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"AURA-net: attention U-net with a pretrained ResNet-18 encoder and an active-contour loss"};
    app.require_subcommand(1);

    RunFlags train_flags;
    auto* train = app.add_subcommand("train", "train a model from a config file");
    train_flags.attach(train);

    EvalFlags eval_flags;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and write metrics.json");
    eval->add_option("--checkpoint", eval_flags.checkpoint)->required()->check(CLI::ExistingFile);
    eval->add_option("--data", eval_flags.data, "dataset root (default: the one stored in the checkpoint)");
    eval->add_option("--partition", eval_flags.partition, "test, validation, train or all")
        ->check(CLI::IsMember({"test", "validation", "train", "all"}));
    eval->add_option("--threshold", eval_flags.threshold);
    eval->add_option("-o,--output", eval_flags.output, "metrics file (default: <run>/metrics.json)");
    eval->add_option("--log-level", eval_flags.log_level);

    PredictFlags predict_flags;
    auto* predict = app.add_subcommand("predict", "write 0/255 masks for a directory of images");
    predict->add_option("--checkpoint", predict_flags.checkpoint)->required()->check(CLI::ExistingFile);
    predict->add_option("--images", predict_flags.images)->required();
    predict->add_option("-o,--out", predict_flags.out)->required();
    predict->add_option("--threshold", predict_flags.threshold);
    predict->add_flag("--overlay", predict_flags.overlay, "also write <id>_overlay.png");
    predict->add_option("--log-level", predict_flags.log_level);

    RunFlags ablate_flags;
    std::string variants = "all";
    auto* ablate = app.add_subcommand("ablate", "train and test ablation variants on one split");
    ablate_flags.attach(ablate);
    ablate->add_option("--variants", variants, "'all' or a comma list such as 'unet,unet+resnet,aura-net'");

    RunFlags sweep_flags;
    std::string param, grid;
    auto* sweep = app.add_subcommand("sweep", "line search over lambda or (beta, gamma)");
    sweep_flags.attach(sweep);
    sweep->add_option("--param", param, "lambda or beta_gamma")->required();
    sweep->add_option("--grid", grid, "e.g. 0,5,10 or 0.75:0.25,1:0")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kConfigError;
    }

    try {
        if (train->parsed()) return cmd_train(train_flags);
        if (eval->parsed()) return cmd_eval(eval_flags);
        if (predict->parsed()) return cmd_predict(predict_flags);
        if (ablate->parsed()) return cmd_ablate(ablate_flags, variants);
        if (sweep->parsed()) return cmd_sweep(sweep_flags, param, grid);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntimeError;
    }
    return kRuntimeError;
}
