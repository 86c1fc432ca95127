#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "aura/archive.hpp"

namespace aura::model {

enum class EncoderKind { plain_unet, resnet18 };

std::string to_string(EncoderKind kind);
/// Throws ConfigError for unknown names.
EncoderKind encoder_from_string(const std::string& name);

/// Where ImageNet ResNet-18 weights come from. `path` wins over the cache lookup;
/// `url` is only contacted when the cached copy is missing.
struct PretrainedSource {
    std::string path;
    std::string url;
    std::string sha256;

    friend bool operator==(const PretrainedSource&, const PretrainedSource&) = default;
};

struct ModelConfig {
    EncoderKind encoder = EncoderKind::resnet18;
    bool pretrained = true;
    bool attention = true;
    int in_channels = 3;
    int base_channels = 64; ///< plain encoder only; the ResNet widths are fixed
    int depth = 4;          ///< plain encoder only
    int input_height = 512;
    int input_width = 512;
    bool freeze_encoder_bn = false;
    PretrainedSource weights;

    void validate() const;
    /// Total spatial reduction between input and bridge (32 for ResNet-18).
    int downsampling_factor() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Additive attention on a skip connection:
///   A = sigmoid(head(relu(proj_g(gate) + proj_x(skip)))),  out = skip * A.
/// A gating signal at a coarser resolution is bilinearly resampled to the skip size
/// first.
class AttentionGateImpl : public torch::nn::Module {
public:
    AttentionGateImpl(int skip_channels, int gate_channels, int inter_channels);

    torch::Tensor forward(const torch::Tensor& skip, const torch::Tensor& gate);
    /// Per-pixel coefficients A, shape [N,1,H,W].
    torch::Tensor coefficients(const torch::Tensor& skip, const torch::Tensor& gate);

    torch::nn::Conv2d proj_g{nullptr};
    torch::nn::Conv2d proj_x{nullptr};
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(AttentionGate);

/// Common surface of the two contracting paths.
class Encoder : public torch::nn::Module {
public:
    /// Skip features from fine to coarse followed by the bridge.
    virtual std::vector<torch::Tensor> features(const torch::Tensor& x) = 0;
    virtual std::vector<int> skip_channels() const = 0;
    virtual int bridge_channels() const = 0;
    /// Spatial reduction of the finest skip relative to the input.
    virtual int finest_stride() const = 0;
};

class SegmentationNetImpl : public torch::nn::Module {
public:
    explicit SegmentationNetImpl(const ModelConfig& config);

    /// [N,C,H,W] image batch to [N,1,H,W] probabilities in (0,1).
    torch::Tensor forward(const torch::Tensor& x);

    void train(bool on = true) override;

    const ModelConfig& config() const { return config_; }
    Encoder& encoder() { return *encoder_; }
    std::shared_ptr<Encoder> encoder_ptr() { return encoder_; }

    std::int64_t parameter_count() const;
    /// Parameters and buffers in registration order.
    std::vector<archive::NamedTensor> state() const;
    std::vector<archive::NamedTensor> encoder_state() const;
    /// Copies `tensors` into the matching parameters/buffers. Every entry of the
    /// model's state must be present with an identical shape.
    void load_state(const std::vector<archive::NamedTensor>& tensors);

private:
    ModelConfig config_;
    std::shared_ptr<Encoder> encoder_;
    torch::nn::ModuleList decoder_{nullptr};
    torch::nn::ModuleList gates_{nullptr};
    torch::nn::Sequential final_up_{nullptr};
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(SegmentationNet);

/// Builds a network with parameters initialised from `seed`. When the config asks
/// for a pretrained encoder, the ResNet-18 weights are resolved and loaded.
SegmentationNet build(const ModelConfig& config, std::uint64_t seed = 0);

/// Replaces encoder weights (parameters and batch-norm statistics) from an archive
/// in torchvision ResNet-18 naming ("conv1.weight", "layer1.0.bn1.running_mean", ...).
/// Extra archive entries such as the classifier are ignored. Returns the checksum of
/// the loaded tensors, which is also logged.
std::string load_pretrained_encoder(SegmentationNet& net, const archive::Archive& weights);

/// Writes the encoder state in the same layout load_pretrained_encoder() reads.
void save_encoder_weights(SegmentationNet& net, const std::filesystem::path& path);

/// Directory used for cached weight archives: $AURA_WEIGHTS_CACHE, else
/// $XDG_CACHE_HOME/aura-net, else ~/.cache/aura-net.
std::filesystem::path weights_cache_dir();

inline constexpr const char* kDefaultWeightsFile = "resnet18_imagenet.aura";

/// Local path, cached copy, or download, in that order, verifying the SHA-256 when
/// one is configured.
std::filesystem::path resolve_pretrained(const PretrainedSource& source);

/// Plain download helper (http, https, file URLs).
void fetch_url(const std::string& url, const std::filesystem::path& destination);

} // namespace aura::model
