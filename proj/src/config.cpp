#include "aura/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "aura/error.hpp"

namespace aura {

using nlohmann::json;

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("train.learning_rate must be > 0");
    }
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (optimizer != "adam") throw ConfigError("train.optimizer must be 'adam'");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("train.validation_fraction must lie in [0,1)");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("train.threshold must lie in (0,1)");
    loss.validate();
    model.validate();
    dataset.validate();
    augmentation.validate();
    if (model.input_height != dataset.target_size || model.input_width != dataset.target_size) {
        throw ConfigError("model.input_size must equal dataset.target_size (" + std::to_string(dataset.target_size) +
                          ")");
    }
}

void RunConfig::validate() const {
    train.validate();
    static const std::set<std::string> levels = {"trace", "debug", "info", "warn", "error", "off"};
    if (!levels.contains(log_level)) {
        throw ConfigError("log_level must be one of trace, debug, info, warn, error, off");
    }
}

namespace {

// Reads the keys of one JSON object, remembering which were consumed so that the
// leftovers can be reported as unknown.
class Section {
public:
    Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
        if (!doc_.is_object()) {
            throw ConfigError((path_.empty() ? std::string("config") : path_) + " must be an object");
        }
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!doc_.contains(key)) return;
        seen_.insert(key);
        try {
            out = doc_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + dotted(key) + "' has the wrong type");
        }
    }

    bool has(const char* key) const { return doc_.contains(key); }

    Section child(const char* key) {
        seen_.insert(key);
        return Section(doc_.at(key), dotted(key));
    }

    std::string dotted(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& item : doc_.items()) {
            if (!seen_.contains(item.key())) {
                throw ConfigError("unknown config key '" + dotted(item.key()) + "'");
            }
        }
    }

private:
    const json& doc_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_loss(Section s, loss::LossConfig& c) {
    s.read("lambda", c.lambda);
    s.read("alpha", c.alpha);
    s.read("beta", c.beta);
    s.read("gamma", c.gamma);
    s.read("epsilon", c.epsilon);
    s.read("prob_clamp", c.prob_clamp);
    s.read("dice_smooth", c.dice_smooth);
    s.finish();
}

json write_loss(const loss::LossConfig& c) {
    return {{"lambda", c.lambda},   {"alpha", c.alpha},           {"beta", c.beta},
            {"gamma", c.gamma},     {"epsilon", c.epsilon},       {"prob_clamp", c.prob_clamp},
            {"dice_smooth", c.dice_smooth}};
}

void read_model(Section s, model::ModelConfig& c, int target_size) {
    std::string encoder = model::to_string(c.encoder);
    s.read("encoder", encoder);
    c.encoder = model::encoder_from_string(encoder);
    s.read("pretrained", c.pretrained);
    s.read("attention", c.attention);
    s.read("in_channels", c.in_channels);
    s.read("base_channels", c.base_channels);
    s.read("depth", c.depth);
    s.read("freeze_encoder_bn", c.freeze_encoder_bn);
    std::vector<int> size = {target_size, target_size};
    s.read("input_size", size);
    if (size.size() != 2) {
        throw ConfigError("config key '" + s.dotted("input_size") + "' must be [height, width]");
    }
    c.input_height = size[0];
    c.input_width = size[1];
    if (s.has("weights")) {
        auto w = s.child("weights");
        w.read("path", c.weights.path);
        w.read("url", c.weights.url);
        w.read("sha256", c.weights.sha256);
        w.finish();
    }
    s.finish();
}

json write_model(const model::ModelConfig& c) {
    return {{"encoder", model::to_string(c.encoder)},
            {"pretrained", c.pretrained},
            {"attention", c.attention},
            {"in_channels", c.in_channels},
            {"base_channels", c.base_channels},
            {"depth", c.depth},
            {"freeze_encoder_bn", c.freeze_encoder_bn},
            {"input_size", {c.input_height, c.input_width}},
            {"weights", {{"path", c.weights.path}, {"url", c.weights.url}, {"sha256", c.weights.sha256}}}};
}

void read_dataset(Section s, data::DatasetSpec& c) {
    std::string root = c.root.string();
    s.read("root", root);
    c.root = root;
    s.read("target_size", c.target_size);
    s.read("train_count", c.train_count);
    s.read("test_count", c.test_count);
    s.read("split_seed", c.split_seed);
    s.read("dataset_id", c.dataset_id);
    s.finish();
}

json write_dataset(const data::DatasetSpec& c) {
    return {{"root", c.root.string()},         {"target_size", c.target_size}, {"train_count", c.train_count},
            {"test_count", c.test_count},      {"split_seed", c.split_seed},   {"dataset_id", c.dataset_id}};
}

void read_augmentation(Section s, data::AugmentationConfig& c) {
    s.read("flip_horizontal_p", c.flip_horizontal_p);
    s.read("flip_vertical_p", c.flip_vertical_p);
    s.read("rotation", c.rotation);
    s.read("rotation_degrees", c.rotation_degrees);
    s.read("shift", c.shift);
    s.read("shift_fraction", c.shift_fraction);
    s.read("scale", c.scale);
    s.read("scale_fraction", c.scale_fraction);
    s.read("shear", c.shear);
    s.read("shear_degrees", c.shear_degrees);
    s.read("clahe", c.clahe);
    s.read("clahe_p", c.clahe_p);
    s.read("clahe_clip_limit", c.clahe_clip_limit);
    s.read("clahe_tiles", c.clahe_tiles);
    s.read("elastic", c.elastic);
    s.read("elastic_p", c.elastic_p);
    s.read("elastic_max_displacement", c.elastic_max_displacement);
    s.read("elastic_sigma", c.elastic_sigma);
    s.read("seed", c.seed);
    s.finish();
}

json write_augmentation(const data::AugmentationConfig& c) {
    return {{"flip_horizontal_p", c.flip_horizontal_p},
            {"flip_vertical_p", c.flip_vertical_p},
            {"rotation", c.rotation},
            {"rotation_degrees", c.rotation_degrees},
            {"shift", c.shift},
            {"shift_fraction", c.shift_fraction},
            {"scale", c.scale},
            {"scale_fraction", c.scale_fraction},
            {"shear", c.shear},
            {"shear_degrees", c.shear_degrees},
            {"clahe", c.clahe},
            {"clahe_p", c.clahe_p},
            {"clahe_clip_limit", c.clahe_clip_limit},
            {"clahe_tiles", c.clahe_tiles},
            {"elastic", c.elastic},
            {"elastic_p", c.elastic_p},
            {"elastic_max_displacement", c.elastic_max_displacement},
            {"elastic_sigma", c.elastic_sigma},
            {"seed", c.seed}};
}

void read_train_section(Section s, TrainConfig& c) {
    s.read("batch_size", c.batch_size);
    s.read("learning_rate", c.learning_rate);
    s.read("epochs", c.epochs);
    s.read("optimizer", c.optimizer);
    s.read("seed", c.seed);
    s.read("validation_fraction", c.validation_fraction);
    s.read("threshold", c.threshold);
    s.finish();
}

json write_train_section(const TrainConfig& c) {
    return {{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
            {"epochs", c.epochs},         {"optimizer", c.optimizer},
            {"seed", c.seed},             {"validation_fraction", c.validation_fraction},
            {"threshold", c.threshold}};
}

// Reads the five training sections from `top`, leaving other keys to the caller.
void read_train_config(Section& top, TrainConfig& c) {
    if (top.has("dataset")) read_dataset(top.child("dataset"), c.dataset);
    if (top.has("model")) {
        read_model(top.child("model"), c.model, c.dataset.target_size);
    } else {
        c.model.input_height = c.model.input_width = c.dataset.target_size;
    }
    if (top.has("loss")) read_loss(top.child("loss"), c.loss);
    if (top.has("augmentation")) read_augmentation(top.child("augmentation"), c.augmentation);
    if (top.has("train")) read_train_section(top.child("train"), c);
}

} // namespace

TrainConfig train_config_from_json(const json& doc) {
    TrainConfig cfg;
    Section top(doc, "");
    read_train_config(top, cfg);
    top.finish();
    cfg.validate();
    return cfg;
}

json to_json(const TrainConfig& cfg) {
    return {{"dataset", write_dataset(cfg.dataset)},
            {"model", write_model(cfg.model)},
            {"loss", write_loss(cfg.loss)},
            {"augmentation", write_augmentation(cfg.augmentation)},
            {"train", write_train_section(cfg)}};
}

RunConfig run_config_from_json(const json& doc) {
    RunConfig cfg;
    Section top(doc, "");
    read_train_config(top, cfg.train);
    std::string out = cfg.output_dir.string();
    top.read("output_dir", out);
    cfg.output_dir = out;
    top.read("log_level", cfg.log_level);
    top.finish();
    cfg.validate();
    return cfg;
}

json to_json(const RunConfig& cfg) {
    auto doc = to_json(cfg.train);
    doc["output_dir"] = cfg.output_dir.string();
    doc["log_level"] = cfg.log_level;
    return doc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(doc);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    out << to_json(cfg).dump(2) << '\n';
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
}

} // namespace aura
