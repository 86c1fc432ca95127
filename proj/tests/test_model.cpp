#include "support/test.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>

#include "aura/archive.hpp"
#include "aura/error.hpp"
#include "aura/loss.hpp"
#include "aura/model.hpp"
#include "support/fixtures.hpp"

using namespace aura;
using model::EncoderKind;
using model::ModelConfig;

namespace {

ModelConfig variant(bool resnet, bool attention, int size = 64) {
    ModelConfig c;
    c.encoder = resnet ? EncoderKind::resnet18 : EncoderKind::plain_unet;
    c.pretrained = false;
    c.attention = attention;
    c.input_height = c.input_width = size;
    return c;
}

std::string checksum(const model::SegmentationNet& net) { return archive::tensors_checksum(net->state()); }

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

struct EnvGuard {
    std::string name;
    std::string old;
    bool had = false;
    EnvGuard(std::string n, const std::string& value) : name(std::move(n)) {
        if (const char* v = std::getenv(name.c_str())) {
            had = true;
            old = v;
        }
        ::setenv(name.c_str(), value.c_str(), 1);
    }
    ~EnvGuard() {
        if (had) ::setenv(name.c_str(), old.c_str(), 1);
        else ::unsetenv(name.c_str());
    }
};

} // namespace

TEST_CASE("config validation") {
    auto c = variant(false, true);
    c.pretrained = true;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = variant(true, true, 48);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = variant(false, true, 48);
    CHECK_NOTHROW(c.validate());
    CHECK(variant(true, false).downsampling_factor() == 32);
    CHECK(variant(false, false).downsampling_factor() == 16);
    CHECK(model::encoder_from_string(model::to_string(EncoderKind::plain_unet)) == EncoderKind::plain_unet);
    CHECK_THROWS_AS(model::encoder_from_string("vgg"), ConfigError);
}

TEST_CASE("forward shape and range for every architecture") {
    torch::NoGradGuard no_grad;
    for (bool resnet : {false, true}) {
        for (bool attention : {false, true}) {
            auto net = model::build(variant(resnet, attention), 1);
            net->eval();
            auto out = net->forward(torch::rand({2, 3, 64, 64}));
            CAPTURE(resnet);
            CAPTURE(attention);
            CHECK(out.sizes() == torch::IntArrayRef({2, 1, 64, 64}));
            CHECK(out.gt(0).all().item<bool>());
            CHECK(out.lt(1).all().item<bool>());
            // Non-square inputs keep their size too.
            CHECK(net->forward(torch::rand({1, 3, 64, 96})).sizes() == torch::IntArrayRef({1, 1, 64, 96}));
        }
    }
}

TEST_CASE("outputs stay strictly inside (0,1) when the head saturates") {
    torch::NoGradGuard no_grad;
    auto net = model::build(variant(false, false, 32), 2);
    net->eval();
    for (auto& p : net->named_parameters()) {
        if (p.key().rfind("head", 0) == 0 && p.key().find("bias") != std::string::npos) {
            p.value().fill_(1e4);
        }
    }
    auto hi = net->forward(torch::rand({1, 3, 32, 32}));
    CHECK(hi.lt(1).all().item<bool>());
    for (auto& p : net->named_parameters()) {
        if (p.key().rfind("head", 0) == 0 && p.key().find("bias") != std::string::npos) {
            p.value().fill_(-1e4);
        }
    }
    auto lo = net->forward(torch::rand({1, 3, 32, 32}));
    CHECK(lo.gt(0).all().item<bool>());
}

TEST_CASE("forward rejects inputs that break the contract") {
    auto net = model::build(variant(true, true), 1);
    net->eval();
    torch::NoGradGuard no_grad;
    CHECK_THROWS_AS(net->forward(torch::rand({1, 3, 48, 64})), ShapeError);
    CHECK_THROWS_AS(net->forward(torch::rand({1, 1, 64, 64})), ShapeError);
    CHECK_THROWS_AS(net->forward(torch::rand({3, 64, 64})), ShapeError);
}

TEST_CASE("inference is deterministic and batch independent") {
    torch::NoGradGuard no_grad;
    auto net = model::build(variant(true, true), 4);
    net->eval();
    auto x = torch::rand({1, 3, 64, 64});
    auto out = net->forward(torch::cat({x, x}));
    CHECK(torch::equal(out[0], out[1]));
    CHECK(torch::equal(net->forward(x), net->forward(x)));
}

TEST_CASE("build is reproducible from the seed") {
    for (bool resnet : {false, true}) {
        auto a = model::build(variant(resnet, true), 11);
        auto b = model::build(variant(resnet, true), 11);
        auto c = model::build(variant(resnet, true), 12);
        CHECK(checksum(a) == checksum(b));
        CHECK(checksum(a) != checksum(c));
    }
    // With a pretrained encoder the encoder part does not depend on the seed.
    auto cfg = variant(true, true);
    cfg.pretrained = true;
    cfg.weights.path = fixtures::pretrained_weights().string();
    auto p1 = model::build(cfg, 1);
    auto p2 = model::build(cfg, 2);
    CHECK(archive::tensors_checksum(p1->encoder_state()) == archive::tensors_checksum(p2->encoder_state()));
    CHECK(checksum(p1) != checksum(p2));
}

TEST_CASE("parameter counts follow the variant structure") {
    auto plain = model::build(variant(false, false));
    auto plain_att = model::build(variant(false, true));
    auto res = model::build(variant(true, false));
    auto aura_net = model::build(variant(true, true));
    CHECK(aura_net->parameter_count() > plain->parameter_count());
    CHECK(plain_att->parameter_count() > plain->parameter_count());
    CHECK(aura_net->parameter_count() > res->parameter_count());

    // Attention only adds gate parameters; encoder shapes are untouched.
    auto enc_a = res->encoder_state();
    auto enc_b = aura_net->encoder_state();
    REQUIRE(enc_a.size() == enc_b.size());
    for (std::size_t k = 0; k < enc_a.size(); ++k) {
        CHECK(enc_a[k].name == enc_b[k].name);
        CHECK(enc_a[k].value.sizes() == enc_b[k].value.sizes());
    }
    std::int64_t gate_params = 0;
    for (const auto& p : aura_net->named_parameters()) {
        if (p.key().rfind("gates.", 0) == 0) gate_params += p.value().numel();
    }
    CHECK(gate_params == aura_net->parameter_count() - res->parameter_count());
}

TEST_CASE("ResNet-18 encoder uses torchvision names and widths") {
    auto net = model::build(variant(true, false));
    auto state = net->encoder_state();
    auto has = [&](const std::string& name, std::vector<std::int64_t> shape) {
        for (const auto& nt : state) {
            if (nt.name == name) return nt.value.sizes() == torch::IntArrayRef(shape);
        }
        return false;
    };
    CHECK(has("conv1.weight", {64, 3, 7, 7}));
    CHECK(has("bn1.running_mean", {64}));
    CHECK(has("layer1.0.conv1.weight", {64, 64, 3, 3}));
    CHECK(has("layer2.0.downsample.0.weight", {128, 64, 1, 1}));
    CHECK(has("layer3.1.bn2.weight", {256}));
    CHECK(has("layer4.1.conv2.weight", {512, 512, 3, 3}));
    CHECK(net->encoder().skip_channels() == std::vector<int>{64, 64, 128, 256});
    CHECK(net->encoder().bridge_channels() == 512);
}

TEST_CASE("attention gate matches a scalar reference") {
    torch::manual_seed(5);
    model::AttentionGate gate(2, 3, 2);
    gate->to(torch::kFloat64);
    auto skip = torch::randn({1, 2, 3, 4}, torch::kFloat64);
    auto sig = torch::randn({1, 3, 3, 4}, torch::kFloat64);
    torch::NoGradGuard no_grad;
    auto coeff = gate->coefficients(skip, sig);
    auto out = gate->forward(skip, sig);

    auto wg = gate->proj_g->weight.view({2, 3});
    auto bg = gate->proj_g->bias;
    auto wx = gate->proj_x->weight.view({2, 2});
    auto bx = gate->proj_x->bias;
    auto wh = gate->head->weight.view({2});
    const double bh = gate->head->bias.item<double>();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 4; ++j) {
            double z = bh;
            for (int k = 0; k < 2; ++k) {
                double a = bg[k].item<double>() + bx[k].item<double>();
                for (int c = 0; c < 3; ++c) a += wg[k][c].item<double>() * sig[0][c][i][j].item<double>();
                for (int c = 0; c < 2; ++c) a += wx[k][c].item<double>() * skip[0][c][i][j].item<double>();
                z += wh[k].item<double>() * std::max(a, 0.0);
            }
            const double expected = 1.0 / (1.0 + std::exp(-z));
            const double got = coeff[0][0][i][j].item<double>();
            CHECK(got == doctest::Approx(expected).epsilon(1e-12));
            CHECK(got > 0.0);
            CHECK(got < 1.0);
            for (int c = 0; c < 2; ++c) {
                CHECK(out[0][c][i][j].item<double>() == doctest::Approx(skip[0][c][i][j].item<double>() * expected).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("attention gate saturation limits and resampling") {
    torch::manual_seed(6);
    model::AttentionGate gate(4, 8, 2);
    auto skip = torch::randn({2, 4, 8, 8});
    auto coarse = torch::randn({2, 8, 4, 4});
    torch::NoGradGuard no_grad;
    CHECK(gate->forward(skip, coarse).sizes() == skip.sizes());
    gate->head->bias.fill_(1e4);
    CHECK(torch::equal(gate->forward(skip, coarse), skip));
    gate->head->bias.fill_(-1e4);
    CHECK(gate->forward(skip, coarse).abs().max().item<double>() == 0.0);
    CHECK_THROWS_AS(gate->forward(torch::randn({2, 3, 8, 8}), coarse), ShapeError);
}

TEST_CASE("every parameter receives gradient") {
    for (bool resnet : {false, true}) {
        for (bool attention : {false, true}) {
            auto net = model::build(variant(resnet, attention), 3);
            net->train();
            auto x = torch::rand({2, 3, 64, 64});
            auto y = (torch::rand({2, 1, 64, 64}) > 0.5).to(torch::kFloat32);
            loss::combined_loss(net->forward(x), y, loss::LossConfig{}).backward();
            for (const auto& p : net->named_parameters()) {
                CAPTURE(p.key());
                REQUIRE(p.value().grad().defined());
                CHECK(p.value().grad().abs().max().item<double>() > 0.0);
            }
        }
    }
}

TEST_CASE("frozen encoder batch norm keeps its running statistics") {
    auto cfg = variant(true, false);
    cfg.freeze_encoder_bn = true;
    auto net = model::build(cfg, 1);
    net->train();
    auto before = archive::tensors_checksum(net->encoder_state());
    net->forward(torch::rand({2, 3, 64, 64}));
    CHECK(archive::tensors_checksum(net->encoder_state()) == before);

    auto open = model::build(variant(true, false), 1);
    open->train();
    auto open_before = archive::tensors_checksum(open->encoder_state());
    open->forward(torch::rand({2, 3, 64, 64}));
    CHECK(archive::tensors_checksum(open->encoder_state()) != open_before);
}

TEST_CASE("pretrained encoder load and save round trip") {
    fixtures::TempDir tmp("model");
    const auto weights = fixtures::pretrained_weights();
    auto net = model::build(variant(true, true), 9);
    auto decoder_before = archive::tensors_checksum(net->state());
    auto stored = archive::read(weights);
    const auto sum = model::load_pretrained_encoder(net, stored);
    CHECK(sum.size() == 64);
    CHECK(archive::tensors_checksum(net->encoder_state()) == sum);
    CHECK(archive::tensors_checksum(net->state()) != decoder_before);

    model::save_encoder_weights(net, tmp / "again.aura");
    auto reread = archive::read(tmp / "again.aura");
    CHECK(archive::tensors_checksum(reread.tensors) == archive::tensors_checksum(net->encoder_state()));
    if (!fixtures::pretrained_is_imagenet()) {
        CHECK(file_bytes(tmp / "again.aura") == file_bytes(weights));
    }

    // Decoder and gates are untouched by the load.
    auto fresh = model::build(variant(true, true), 9);
    auto fresh_state = fresh->state();
    auto loaded_state = net->state();
    for (std::size_t k = 0; k < fresh_state.size(); ++k) {
        if (fresh_state[k].name.rfind("encoder.", 0) == 0) continue;
        CHECK(torch::equal(fresh_state[k].value, loaded_state[k].value));
    }

    // Pretrained and random encoders are distinguishable.
    torch::NoGradGuard no_grad;
    net->eval();
    fresh->eval();
    auto x = torch::rand({1, 3, 64, 64});
    CHECK_FALSE(torch::equal(net->forward(x), fresh->forward(x)));
}

TEST_CASE("pretrained loading rejects bad archives") {
    auto net = model::build(variant(true, false));
    archive::Archive partial = archive::read(fixtures::pretrained_weights());
    partial.tensors.pop_back();
    CHECK_THROWS_AS(model::load_pretrained_encoder(net, partial), ArchiveError);

    archive::Archive reshaped = archive::read(fixtures::pretrained_weights());
    reshaped.tensors.front().value = torch::zeros({1});
    CHECK_THROWS_AS(model::load_pretrained_encoder(net, reshaped), ArchiveError);

    auto plain = model::build(variant(false, false));
    CHECK_THROWS_AS(model::load_pretrained_encoder(plain, archive::read(fixtures::pretrained_weights())), ConfigError);
}

TEST_CASE("weight resolution: path, cache, download and checksum") {
    fixtures::TempDir tmp("weights");
    EnvGuard cache("AURA_WEIGHTS_CACHE", (tmp / "cache").string());
    CHECK(model::weights_cache_dir() == tmp / "cache");

    const auto weights = fixtures::pretrained_weights();
    const auto digest = archive::sha256_file(weights);
    model::PretrainedSource src;
    src.path = weights.string();
    src.sha256 = digest;
    CHECK(model::resolve_pretrained(src) == weights);
    src.sha256 = std::string(64, '0');
    CHECK_THROWS_AS(model::resolve_pretrained(src), ArchiveError);

    src = {};
    src.path = (tmp / "missing.aura").string();
    CHECK_THROWS_AS(model::resolve_pretrained(src), ArchiveError);

    // Empty cache and no URL.
    CHECK_THROWS_AS(model::resolve_pretrained(model::PretrainedSource{}), ArchiveError);

    // file:// download lands in the cache and is then reused.
    src = {};
    src.url = "file://" + weights.string();
    src.sha256 = digest;
    const auto fetched = model::resolve_pretrained(src);
    CHECK(fetched.parent_path() == tmp / "cache");
    CHECK(archive::sha256_file(fetched) == digest);
    src.url = "file://" + (tmp / "nowhere" / weights.filename()).string();
    CHECK(model::resolve_pretrained(src) == fetched);

    src = {};
    src.url = "file://" + (tmp / "nothing-here.aura").string();
    CHECK_THROWS_AS(model::resolve_pretrained(src), ArchiveError);
}
