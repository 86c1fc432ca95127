#include "aura/model.hpp"

#include <cfloat>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>

#include <curl/curl.h>
#include "aura/log.hpp"

#include "aura/error.hpp"

namespace aura::model {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string to_string(EncoderKind kind) {
    return kind == EncoderKind::resnet18 ? "resnet18" : "plain_unet";
}

EncoderKind encoder_from_string(const std::string& name) {
    if (name == "resnet18") return EncoderKind::resnet18;
    if (name == "plain_unet") return EncoderKind::plain_unet;
    throw ConfigError("model.encoder must be 'plain_unet' or 'resnet18', got '" + name + "'");
}

void ModelConfig::validate() const {
    if (pretrained && encoder != EncoderKind::resnet18) {
        throw ConfigError("model.pretrained requires model.encoder = resnet18");
    }
    if (in_channels < 1) throw ConfigError("model.in_channels must be >= 1");
    if (base_channels < 1) throw ConfigError("model.base_channels must be >= 1");
    if (depth < 1 || depth > 8) throw ConfigError("model.depth must be in [1,8]");
    if (input_height < 1 || input_width < 1) throw ConfigError("model.input_size must be positive");
    const int factor = downsampling_factor();
    if (input_height % factor != 0 || input_width % factor != 0) {
        throw ConfigError("model.input_size " + std::to_string(input_height) + "x" +
                          std::to_string(input_width) + " is not divisible by the downsampling factor " +
                          std::to_string(factor));
    }
}

int ModelConfig::downsampling_factor() const {
    return encoder == EncoderKind::resnet18 ? 32 : (1 << depth);
}

namespace {

nn::Sequential conv_bn_relu(int in, int out, int kernel = 3) {
    return nn::Sequential(
        nn::Conv2d(nn::Conv2dOptions(in, out, kernel).padding(kernel / 2).bias(false)),
        nn::BatchNorm2d(out),
        nn::ReLU(nn::ReLUOptions(true)));
}

nn::Sequential double_conv(int in, int out) {
    auto seq = conv_bn_relu(in, out);
    seq->extend(*conv_bn_relu(out, out));
    return seq;
}

torch::Tensor resize_to(const torch::Tensor& x, int64_t height, int64_t width) {
    if (x.size(2) == height && x.size(3) == width) {
        return x;
    }
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

class PlainEncoder : public Encoder {
public:
    PlainEncoder(int in_channels, int base, int depth) {
        stages_ = register_module("stages", nn::ModuleList());
        int prev = in_channels;
        for (int k = 0; k <= depth; ++k) {
            // The bridge keeps the width of the deepest skip.
            const int width = base << std::min(k, depth - 1);
            stages_->push_back(double_conv(prev, width));
            widths_.push_back(width);
            prev = width;
        }
    }

    std::vector<torch::Tensor> features(const torch::Tensor& input) override {
        std::vector<torch::Tensor> out;
        auto x = input;
        for (std::size_t k = 0; k < stages_->size(); ++k) {
            if (k > 0) {
                x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2).stride(2));
            }
            x = stages_[k]->as<nn::Sequential>()->forward(x);
            out.push_back(x);
        }
        return out;
    }

    std::vector<int> skip_channels() const override { return {widths_.begin(), widths_.end() - 1}; }
    int bridge_channels() const override { return widths_.back(); }
    int finest_stride() const override { return 1; }

private:
    nn::ModuleList stages_{nullptr};
    std::vector<int> widths_;
};

class BasicBlockImpl : public nn::Module {
public:
    BasicBlockImpl(int in, int out, int stride) {
        conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
        bn1 = register_module("bn1", nn::BatchNorm2d(out));
        conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
        bn2 = register_module("bn2", nn::BatchNorm2d(out));
        if (stride != 1 || in != out) {
            downsample = register_module(
                "downsample", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                             nn::BatchNorm2d(out)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto out = torch::relu(bn1(conv1(x)));
        out = bn2(conv2(out));
        return torch::relu(out + (downsample ? downsample->forward(x) : x));
    }

    nn::Conv2d conv1{nullptr}, conv2{nullptr};
    nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
    nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

// Module names follow torchvision so ImageNet checkpoints map one to one.
class ResNet18Encoder : public Encoder {
public:
    explicit ResNet18Encoder(int in_channels) {
        conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, 64, 7).stride(2).padding(3).bias(false)));
        bn1_ = register_module("bn1", nn::BatchNorm2d(64));
        const int widths[4] = {64, 128, 256, 512};
        int prev = 64;
        for (int s = 0; s < 4; ++s) {
            const int stride = s == 0 ? 1 : 2;
            layers_[s] = register_module("layer" + std::to_string(s + 1),
                                         nn::Sequential(BasicBlock(prev, widths[s], stride),
                                                        BasicBlock(widths[s], widths[s], 1)));
            prev = widths[s];
        }
    }

    std::vector<torch::Tensor> features(const torch::Tensor& input) override {
        std::vector<torch::Tensor> out;
        auto x = torch::relu(bn1_(conv1_(input)));
        out.push_back(x); // /2
        x = F::max_pool2d(x, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
        for (auto& layer : layers_) {
            x = layer->forward(x);
            out.push_back(x); // /4, /8, /16, bridge /32
        }
        return out;
    }

    std::vector<int> skip_channels() const override { return {64, 64, 128, 256}; }
    int bridge_channels() const override { return 512; }
    int finest_stride() const override { return 2; }

private:
    nn::Conv2d conv1_{nullptr};
    nn::BatchNorm2d bn1_{nullptr};
    nn::Sequential layers_[4] = {nn::Sequential(nullptr), nn::Sequential(nullptr), nn::Sequential(nullptr),
                                 nn::Sequential(nullptr)};
};

class DecoderBlockImpl : public nn::Module {
public:
    DecoderBlockImpl(int in, int skip, int out) {
        up_conv = register_module("up_conv", conv_bn_relu(in, out));
        fuse = register_module("fuse", double_conv(out + skip, out));
    }

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip) {
        auto up = up_conv->forward(resize_to(x, skip.size(2), skip.size(3)));
        return fuse->forward(torch::cat({up, skip}, 1));
    }

    nn::Sequential up_conv{nullptr}, fuse{nullptr};
};
TORCH_MODULE(DecoderBlock);

std::vector<archive::NamedTensor> collect(const nn::Module& m) {
    std::vector<archive::NamedTensor> out;
    for (const auto& p : m.named_parameters(true)) {
        out.push_back({p.key(), p.value()});
    }
    for (const auto& b : m.named_buffers(true)) {
        out.push_back({b.key(), b.value()});
    }
    return out;
}

} // namespace

AttentionGateImpl::AttentionGateImpl(int skip_channels, int gate_channels, int inter_channels) {
    proj_g = register_module("proj_g", nn::Conv2d(nn::Conv2dOptions(gate_channels, inter_channels, 1)));
    proj_x = register_module("proj_x", nn::Conv2d(nn::Conv2dOptions(skip_channels, inter_channels, 1)));
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(inter_channels, 1, 1)));
}

torch::Tensor AttentionGateImpl::coefficients(const torch::Tensor& skip, const torch::Tensor& gate) {
    if (skip.dim() != 4 || gate.dim() != 4 || skip.size(0) != gate.size(0)) {
        throw ShapeError("attention gate expects [N,C,H,W] skip and gate with equal batch size");
    }
    if (skip.size(1) != proj_x->options.in_channels() || gate.size(1) != proj_g->options.in_channels()) {
        throw ShapeError("attention gate channel mismatch");
    }
    auto g = resize_to(gate, skip.size(2), skip.size(3));
    return torch::sigmoid(head(torch::relu(proj_g(g) + proj_x(skip))));
}

torch::Tensor AttentionGateImpl::forward(const torch::Tensor& skip, const torch::Tensor& gate) {
    return skip * coefficients(skip, gate);
}

SegmentationNetImpl::SegmentationNetImpl(const ModelConfig& config) : config_(config) {
    config_.validate();
    if (config_.encoder == EncoderKind::resnet18) {
        encoder_ = std::make_shared<ResNet18Encoder>(config_.in_channels);
    } else {
        encoder_ = std::make_shared<PlainEncoder>(config_.in_channels, config_.base_channels, config_.depth);
    }
    register_module("encoder", encoder_);

    const auto skips = encoder_->skip_channels();
    decoder_ = register_module("decoder", nn::ModuleList());
    if (config_.attention) {
        gates_ = register_module("gates", nn::ModuleList());
    }
    // Decoder widths follow the classic U-net ladder (w, 2w, 4w, ... from fine to
    // coarse) whatever the encoder, so the ResNet variants keep the plain decoder's
    // capacity. For the plain encoder these equal the skip widths.
    const int w = config_.encoder == EncoderKind::resnet18 ? 64 : config_.base_channels;
    int in = encoder_->bridge_channels();
    for (int level = static_cast<int>(skips.size()) - 1; level >= 0; --level) {
        const int skip = skips[static_cast<std::size_t>(level)];
        const int out = w << level;
        if (config_.attention) {
            gates_->push_back(AttentionGate(skip, in, std::max(1, skip / 2)));
        }
        decoder_->push_back(DecoderBlock(in, skip, out));
        in = out;
    }
    if (encoder_->finest_stride() > 1) {
        final_up_ = register_module("final_up", double_conv(in, w));
    }
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, 1, 1)));
}

torch::Tensor SegmentationNetImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != config_.in_channels) {
        throw ShapeError("model expects an [N," + std::to_string(config_.in_channels) + ",H,W] batch");
    }
    const int factor = config_.downsampling_factor();
    if (x.size(2) % factor != 0 || x.size(3) % factor != 0) {
        throw ShapeError("input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                         " is not divisible by " + std::to_string(factor));
    }
    auto feats = encoder_->features(x);
    auto y = feats.back();
    const std::size_t levels = decoder_->size();
    for (std::size_t i = 0; i < levels; ++i) {
        auto skip = feats[levels - 1 - i];
        if (config_.attention) {
            skip = gates_[i]->as<AttentionGate>()->forward(skip, y);
        }
        y = decoder_[i]->as<DecoderBlock>()->forward(y, skip);
    }
    if (final_up_) {
        y = final_up_->forward(resize_to(y, x.size(2), x.size(3)));
    }
    const bool single = y.scalar_type() == torch::kFloat32;
    const double lo = single ? FLT_MIN : DBL_MIN;
    const double hi = single ? std::nextafter(1.0f, 0.0f) : std::nextafter(1.0, 0.0);
    return torch::sigmoid(head_(y)).clamp(lo, hi);
}

void SegmentationNetImpl::train(bool on) {
    nn::Module::train(on);
    if (on && config_.freeze_encoder_bn) {
        for (auto& m : encoder_->modules(false)) {
            if (m->as<nn::BatchNorm2d>() != nullptr) {
                m->eval();
            }
        }
    }
}

std::int64_t SegmentationNetImpl::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) {
        n += p.numel();
    }
    return n;
}

std::vector<archive::NamedTensor> SegmentationNetImpl::state() const {
    return collect(*this);
}

std::vector<archive::NamedTensor> SegmentationNetImpl::encoder_state() const {
    return collect(*encoder_);
}

namespace {

void copy_into(const std::vector<archive::NamedTensor>& targets,
               const std::function<const torch::Tensor*(const std::string&)>& lookup, const char* what) {
    torch::NoGradGuard no_grad;
    for (const auto& target : targets) {
        const auto* src = lookup(target.name);
        if (src == nullptr) {
            throw ArchiveError(std::string(what) + " layout mismatch: missing tensor '" + target.name + "'");
        }
        if (src->sizes() != target.value.sizes()) {
            throw ArchiveError(std::string(what) + " layout mismatch: tensor '" + target.name + "' has shape " +
                               c10::str(src->sizes()) + ", model expects " + c10::str(target.value.sizes()));
        }
        target.value.copy_(src->to(target.value.scalar_type()));
    }
}

} // namespace

void SegmentationNetImpl::load_state(const std::vector<archive::NamedTensor>& tensors) {
    std::map<std::string, const torch::Tensor*> index;
    for (const auto& nt : tensors) {
        index[nt.name] = &nt.value;
    }
    auto own = state();
    if (own.size() != tensors.size()) {
        throw ArchiveError("checkpoint layout mismatch: " + std::to_string(tensors.size()) +
                           " tensors stored, model has " + std::to_string(own.size()));
    }
    copy_into(own, [&](const std::string& name) -> const torch::Tensor* {
        auto it = index.find(name);
        return it == index.end() ? nullptr : it->second;
    }, "checkpoint");
}

std::string load_pretrained_encoder(SegmentationNet& net, const archive::Archive& weights) {
    if (net->config().encoder != EncoderKind::resnet18) {
        throw ConfigError("pretrained weights apply to the resnet18 encoder only");
    }
    auto targets = net->encoder_state();
    copy_into(targets, [&](const std::string& name) { return weights.find(name); }, "pretrained encoder");
    const auto checksum = archive::tensors_checksum(net->encoder_state());
    log::info("loaded pretrained encoder (" + std::to_string(targets.size()) + " tensors), sha256 " + checksum);
    return checksum;
}

void save_encoder_weights(SegmentationNet& net, const std::filesystem::path& path) {
    archive::Archive out;
    out.header = {{"kind", "encoder-weights"}, {"encoder", to_string(net->config().encoder)}};
    out.tensors = net->encoder_state();
    archive::write(path, out);
}

SegmentationNet build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    torch::manual_seed(seed);
    SegmentationNet net(config);
    if (config.pretrained) {
        const auto path = resolve_pretrained(config.weights);
        load_pretrained_encoder(net, archive::read(path));
    }
    return net;
}

std::filesystem::path weights_cache_dir() {
    if (const char* env = std::getenv("AURA_WEIGHTS_CACHE"); env && *env) {
        return env;
    }
    if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg && *xdg) {
        return std::filesystem::path(xdg) / "aura-net";
    }
    const char* home = std::getenv("HOME");
    return std::filesystem::path(home ? home : ".") / ".cache" / "aura-net";
}

std::filesystem::path resolve_pretrained(const PretrainedSource& source) {
    std::filesystem::path path;
    if (!source.path.empty()) {
        path = source.path;
        if (!std::filesystem::exists(path)) {
            throw ArchiveError("pretrained weights not found at " + path.string());
        }
    } else {
        std::string name = kDefaultWeightsFile;
        if (!source.url.empty()) {
            auto stem = source.url.substr(0, source.url.find('?'));
            name = stem.substr(stem.find_last_of('/') + 1);
            if (name.empty()) name = kDefaultWeightsFile;
        }
        path = weights_cache_dir() / name;
        if (!std::filesystem::exists(path)) {
            if (source.url.empty()) {
                throw ArchiveError("no pretrained ResNet-18 weights: " + path.string() +
                                   " is missing and no download URL is configured "
                                   "(see tools/export_resnet18_weights.py)");
            }
            log::info("downloading pretrained weights from " + source.url);
            fetch_url(source.url, path);
        }
    }
    if (!source.sha256.empty()) {
        const auto actual = archive::sha256_file(path);
        if (actual != source.sha256) {
            throw ArchiveError("checksum failure for " + path.string() + ": expected " + source.sha256 +
                               ", found " + actual);
        }
    }
    return path;
}

namespace {

std::size_t write_chunk(char* data, std::size_t size, std::size_t count, void* user) {
    auto* out = static_cast<std::ofstream*>(user);
    out->write(data, static_cast<std::streamsize>(size * count));
    return *out ? size * count : 0;
}

} // namespace

void fetch_url(const std::string& url, const std::filesystem::path& destination) {
    static const bool curl_ready = curl_global_init(CURL_GLOBAL_DEFAULT) == CURLE_OK;
    if (!curl_ready) {
        throw ArchiveError("libcurl initialisation failed");
    }
    if (destination.has_parent_path()) {
        std::filesystem::create_directories(destination.parent_path());
    }
    auto tmp = destination;
    tmp += ".download";
    CURLcode rc;
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ArchiveError("cannot write " + tmp.string());
        }
        std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> curl(curl_easy_init(), curl_easy_cleanup);
        curl_easy_setopt(curl.get(), CURLOPT_URL, url.c_str());
        curl_easy_setopt(curl.get(), CURLOPT_FOLLOWLOCATION, 1L);
        curl_easy_setopt(curl.get(), CURLOPT_FAILONERROR, 1L);
        curl_easy_setopt(curl.get(), CURLOPT_WRITEFUNCTION, write_chunk);
        curl_easy_setopt(curl.get(), CURLOPT_WRITEDATA, &out);
        rc = curl_easy_perform(curl.get());
    }
    if (rc != CURLE_OK) {
        std::filesystem::remove(tmp);
        throw ArchiveError("download of " + url + " failed: " + curl_easy_strerror(rc));
    }
    std::filesystem::rename(tmp, destination);
}

} // namespace aura::model
