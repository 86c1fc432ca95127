#include "support/test.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "aura/error.hpp"
#include "aura/loss.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace aura;
using aura::loss::LossConfig;

namespace {

oracle::Raster raster(const ProbabilityMap& m) {
    oracle::Raster r;
    r.h = static_cast<int>(m.height());
    r.w = static_cast<int>(m.width());
    r.v.assign(m.values().begin(), m.values().end());
    return r;
}

ProbabilityMap map_of(std::size_t h, std::size_t w, std::vector<double> v) {
    return ProbabilityMap(h, w, std::move(v));
}

double rel(double a, double b) {
    const double s = std::max(std::fabs(a), std::fabs(b));
    return s == 0.0 ? 0.0 : std::fabs(a - b) / s;
}

torch::Tensor t(const ProbabilityMap& m) { return loss::to_tensor(m); }

} // namespace

TEST_CASE("length_term worked examples") {
    CHECK(loss::length_term(ProbabilityMap(4, 4, 0.5), 1e-6) == doctest::Approx(9e-3).epsilon(1e-12));
    CHECK(loss::length_term(map_of(2, 2, {0, 1, 0, 1}), 1e-6) == doctest::Approx(std::sqrt(1.0 + 1e-6)).epsilon(1e-14));
    // Lower bound from the epsilon floor.
    auto p = fixtures::random_map(6, 9, 11);
    CHECK(loss::length_term(p, 1e-6) >= 5 * 8 * std::sqrt(1e-6));
}

TEST_CASE("length_term rejects degenerate and non-finite input") {
    CHECK_THROWS_AS(loss::length_term(ProbabilityMap(1, 5, 0.3), 1e-6), ShapeError);
    CHECK_THROWS_AS(loss::length_term(ProbabilityMap(5, 1, 0.3), 1e-6), ShapeError);
    CHECK_THROWS_AS(loss::length_term(ProbabilityMap(3, 3, 0.3), 0.0), DomainError);
    auto bad = torch::full({3, 3}, 0.5, torch::kFloat64);
    bad[1][1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(loss::length_term(bad, 1e-6), DomainError);
    CHECK_THROWS_AS(loss::length_term(torch::full({3, 3}, 1.5), 1e-6), DomainError);
}

TEST_CASE("area_term worked examples") {
    auto m = fixtures::random_mask(7, 5, 3).to_probability();
    CHECK(loss::area_term(m, m) == 0.0);
    CHECK(loss::area_term(ProbabilityMap(3, 3, 1.0), ProbabilityMap(3, 3, 0.0)) == 9.0);
    CHECK(loss::area_term(map_of(1, 1, {0.5}), map_of(1, 1, {1.0})) == 0.5);
    CHECK_THROWS_AS(loss::area_term(ProbabilityMap(3, 3), ProbabilityMap(3, 4)), ShapeError);
}

TEST_CASE("ac_loss worked examples") {
    LossConfig cfg;
    auto zero = ProbabilityMap(4, 4, 0.0);
    CHECK(loss::ac_loss(zero, zero, cfg) == doctest::Approx(9e-3).epsilon(1e-12));
    cfg.lambda = 0.0;
    auto p = fixtures::random_map(8, 8, 5);
    auto g = fixtures::random_map(8, 8, 6);
    CHECK(loss::ac_loss(p, g, cfg) == loss::length_term(p, cfg.epsilon));
}

TEST_CASE("bce_loss worked examples") {
    auto ones = ProbabilityMap(2, 2, 1.0);
    CHECK(loss::bce_loss(ones, ones, 1e-7) == doctest::Approx(-std::log(1.0 - 1e-7)).epsilon(1e-9));
    auto g = fixtures::random_mask(6, 6, 9).to_probability();
    CHECK(loss::bce_loss(ProbabilityMap(6, 6, 0.5), g, 1e-7) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(loss::bce_loss(ones, ones, 0.5), DomainError);
    CHECK_THROWS_AS(loss::bce_loss(ones, ones, 0.0), DomainError);
}

TEST_CASE("dice_loss worked examples") {
    auto a = map_of(2, 3, {1, 1, 0, 0, 0, 0});
    auto b = map_of(2, 3, {0, 0, 0, 1, 1, 0});
    CHECK(loss::dice_loss(a, a, 0.0) == 0.0);
    CHECK(loss::dice_loss(a, b, 0.0) == 1.0);
    auto empty = ProbabilityMap(3, 3, 0.0);
    CHECK(loss::dice_loss(empty, empty, 0.0) == 0.0);
    CHECK(loss::dice_loss(empty, empty, 1.0) == 0.0);
    CHECK_THROWS_AS(loss::dice_loss(a, a, -1.0), DomainError);
}

TEST_CASE("combined_loss worked examples") {
    LossConfig cfg;
    auto zero = ProbabilityMap(4, 4, 0.0);
    const double expected = 0.25 * 9e-3 + 0.75 * (0.5 * -std::log(1.0 - 1e-7) + 0.0);
    CHECK(loss::combined_loss(zero, zero, cfg) == doctest::Approx(expected).epsilon(1e-10));

    auto p = fixtures::random_map(8, 8, 21);
    auto g = fixtures::random_mask(8, 8, 22).to_probability();
    const double composed = 0.25 * loss::ac_loss(p, g, cfg) +
                            0.75 * (0.5 * loss::bce_loss(p, g, cfg.prob_clamp) + 0.5 * loss::dice_loss(p, g, cfg.dice_smooth));
    CHECK(rel(loss::combined_loss(p, g, cfg), composed) < 1e-12);

    LossConfig bce_only = loss::pixelwise_only(cfg);
    bce_only.alpha = 1.0;
    CHECK(loss::combined_loss(t(p), t(g), bce_only).item<double>() == loss::bce_loss(t(p), t(g), cfg.prob_clamp).item<double>());
}

TEST_CASE("vectorised losses match the double-loop references") {
    std::mt19937_64 gen(2024);
    LossConfig cfg;
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 2 + static_cast<int>(gen() % 10);
        const int w = 2 + static_cast<int>(gen() % 10);
        auto p = fixtures::random_map(h, w, gen());
        auto g = (trial % 2 == 0) ? fixtures::random_mask(h, w, gen()).to_probability() : fixtures::random_map(h, w, gen());
        const auto rp = raster(p);
        const auto rg = raster(g);
        CHECK(rel(loss::length_term(t(p), cfg.epsilon).item<double>(), oracle::length_term(rp, cfg.epsilon)) < 1e-12);
        CHECK(rel(loss::area_term(t(p), t(g)).item<double>(), oracle::area_term(rp, rg)) < 1e-12);
        CHECK(rel(loss::ac_loss(t(p), t(g), cfg).item<double>(), oracle::ac_loss(rp, rg, cfg.lambda, cfg.epsilon)) < 1e-12);
        CHECK(rel(loss::bce_loss(t(p), t(g), cfg.prob_clamp).item<double>(), oracle::bce_loss(rp, rg, cfg.prob_clamp)) < 1e-12);
        CHECK(rel(loss::dice_loss(t(p), t(g), cfg.dice_smooth).item<double>(), oracle::dice_loss(rp, rg, cfg.dice_smooth)) <
              1e-12);
        CHECK(rel(loss::combined_loss(t(p), t(g), cfg).item<double>(),
                  oracle::combined_loss(rp, rg, cfg.lambda, cfg.alpha, cfg.beta, cfg.gamma, cfg.epsilon, cfg.prob_clamp,
                                        cfg.dice_smooth)) < 1e-12);
    }
}

TEST_CASE("batched input averages the per-image losses") {
    LossConfig cfg;
    std::vector<torch::Tensor> preds;
    std::vector<torch::Tensor> gts;
    double mean = 0.0;
    for (int k = 0; k < 3; ++k) {
        auto p = fixtures::random_map(6, 7, 100 + k);
        auto g = fixtures::random_mask(6, 7, 200 + k).to_probability();
        preds.push_back(t(p));
        gts.push_back(t(g));
        mean += loss::combined_loss(p, g, cfg) / 3.0;
    }
    auto pb = torch::stack(preds);
    auto gb = torch::stack(gts);
    CHECK(rel(loss::combined_loss(pb, gb, cfg).item<double>(), mean) < 1e-12);
    CHECK(rel(loss::combined_loss(pb.unsqueeze(1), gb.unsqueeze(1), cfg).item<double>(), mean) < 1e-12);
    CHECK_THROWS_AS(loss::combined_loss(pb, gb.unsqueeze(1), cfg), ShapeError);
    CHECK_THROWS_AS(loss::combined_loss(pb.unsqueeze(0).unsqueeze(0), gb.unsqueeze(0).unsqueeze(0), cfg), ShapeError);
}

TEST_CASE("loss properties") {
    std::mt19937_64 gen(77);
    LossConfig cfg;
    for (int trial = 0; trial < 50; ++trial) {
        const int h = 3 + static_cast<int>(gen() % 8);
        const int w = 3 + static_cast<int>(gen() % 8);
        auto p = fixtures::random_map(h, w, gen());
        auto g = fixtures::random_map(h, w, gen());
        auto pc = t(p);
        auto gc = t(g);

        SUBCASE("nonnegative") {
            CHECK(loss::length_term(pc, cfg.epsilon).item<double>() >= 0.0);
            CHECK(loss::area_term(pc, gc).item<double>() >= 0.0);
            CHECK(loss::bce_loss(pc, gc, cfg.prob_clamp).item<double>() >= 0.0);
            CHECK(loss::dice_loss(pc, gc, cfg.dice_smooth).item<double>() >= 0.0);
            CHECK(loss::combined_loss(pc, gc, cfg).item<double>() >= 0.0);
        }
        SUBCASE("area term is symmetric under joint complement") {
            CHECK(rel(loss::area_term(1.0 - pc, 1.0 - gc).item<double>(), loss::area_term(pc, gc).item<double>()) < 1e-12);
        }
        SUBCASE("area term is bounded by 2HW") {
            CHECK(loss::area_term(pc, gc).item<double>() <= 2.0 * h * w);
        }
        SUBCASE("length term is invariant under complement") {
            CHECK(rel(loss::length_term(1.0 - pc, cfg.epsilon).item<double>(), loss::length_term(pc, cfg.epsilon).item<double>()) <
                  1e-12);
        }
        SUBCASE("pixel-wise degeneration is bit-identical") {
            LossConfig c = cfg;
            c.alpha = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
            c = loss::pixelwise_only(c);
            const double got = loss::combined_loss(pc, gc, c).item<double>();
            const double want = (c.alpha * loss::bce_loss(pc, gc, c.prob_clamp) +
                                 (1.0 - c.alpha) * loss::dice_loss(pc, gc, c.dice_smooth))
                                    .item<double>();
            CHECK(got == want);
        }
    }
}

TEST_CASE("flipping a correct pixel never lowers the area term") {
    std::mt19937_64 gen(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto gm = fixtures::random_mask(6, 6, gen());
        auto g = gm.to_probability();
        auto p = g; // start from a perfect prediction, then corrupt a few pixels
        for (int k = 0; k < 5; ++k) {
            const auto idx = gen() % p.size();
            p.values()[idx] = 1.0 - p.values()[idx];
        }
        const double before = loss::area_term(p, g);
        // Flip one currently-correct pixel to incorrect.
        std::size_t idx = gen() % p.size();
        while (p.values()[idx] != g.values()[idx]) idx = (idx + 1) % p.size();
        p.values()[idx] = 1.0 - p.values()[idx];
        CHECK(loss::area_term(p, g) >= before);
    }
}

TEST_CASE("analytic gradients match finite differences") {
    LossConfig cfg;
    const std::vector<std::pair<std::string, gradcheck::LossFn>> fns = {
        {"length_term", [&](const auto& p, const auto&) { return loss::length_term(p, cfg.epsilon); }},
        {"area_term", [&](const auto& p, const auto& g) { return loss::area_term(p, g); }},
        {"ac_loss", [&](const auto& p, const auto& g) { return loss::ac_loss(p, g, cfg); }},
        {"bce_loss", [&](const auto& p, const auto& g) { return loss::bce_loss(p, g, cfg.prob_clamp); }},
        {"dice_loss", [&](const auto& p, const auto& g) { return loss::dice_loss(p, g, cfg.dice_smooth); }},
        {"combined_loss", [&](const auto& p, const auto& g) { return loss::combined_loss(p, g, cfg); }},
    };
    for (const auto& [name, fn] : fns) {
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            // Interior draws: near p = 0 the h = 1e-4 central difference of log p carries
            // a truncation error of about h^2 / (3 p^2), which is the reference's error,
            // not the gradient's.
            auto p = t(fixtures::random_map(8, 8, 1000 + seed, 0.05, 0.95));
            auto g = t(fixtures::random_mask(8, 8, 2000 + seed).to_probability());
            CAPTURE(name);
            CAPTURE(seed);
            CHECK(gradcheck::compare(fn, p, g, torch::kFloat64).max_rel_error < 1e-5);
            CHECK(gradcheck::compare(fn, p, g, torch::kFloat32).max_rel_error < 1e-3);
        }
    }
}

TEST_CASE("length-term reference error shrinks at the truncation rate") {
    // Where neighbouring pixels nearly agree the integrand is stiff, and the h = 1e-4
    // central difference is off by O(h^2). A tenfold smaller step must cut the gap by
    // about a hundred, and the analytic gradient must then agree to 1e-5.
    LossConfig cfg;
    auto fn = [&](const torch::Tensor& p, const torch::Tensor&) { return loss::length_term(p, cfg.epsilon); };
    for (std::uint64_t k = 0; k < 20; ++k) {
        auto p = t(fixtures::random_map(8, 8, 7000 + k, 0.05, 0.95));
        auto g = t(fixtures::random_mask(8, 8, 8000 + k).to_probability());
        const auto coarse = gradcheck::compare(fn, p, g, torch::kFloat64, 1e-4);
        const auto fine = gradcheck::compare(fn, p, g, torch::kFloat64, 1e-5);
        CAPTURE(k);
        CHECK(fine.max_rel_error < 1e-5);
        if (coarse.max_rel_error > 1e-6) {
            CHECK(coarse.max_rel_error / fine.max_rel_error > 50.0);
        }
    }
}

TEST_CASE("gradients stay accurate close to the BCE clamp") {
    LossConfig cfg;
    auto fn = [&](const torch::Tensor& p, const torch::Tensor& g) { return loss::combined_loss(p, g, cfg); };
    auto p = t(fixtures::random_map(8, 8, 31, 1e-3, 0.02));
    auto g = t(fixtures::random_mask(8, 8, 32).to_probability());
    CHECK(gradcheck::compare(fn, p, g, torch::kFloat64, 1e-6).max_rel_error < 1e-5);
}

TEST_CASE("gradients of batched losses are scaled per image") {
    LossConfig cfg;
    auto p = torch::stack({t(fixtures::random_map(5, 5, 1)), t(fixtures::random_map(5, 5, 2))}).requires_grad_(true);
    auto g = torch::stack({t(fixtures::random_map(5, 5, 3)), t(fixtures::random_map(5, 5, 4))});
    loss::combined_loss(p, g, cfg).backward();
    for (int k = 0; k < 2; ++k) {
        auto single = p[k].detach().clone().requires_grad_(true);
        loss::combined_loss(single, g[k], cfg).backward();
        CHECK(torch::allclose(p.grad()[k], single.grad() / 2.0, 1e-12, 1e-14));
    }
}

TEST_CASE("BCE gradient vanishes outside the clamp") {
    auto p = torch::tensor({0.0, 1e-9, 0.5, 1.0}, torch::kFloat64).view({2, 2}).requires_grad_(true);
    auto g = torch::tensor({1.0, 1.0, 1.0, 0.0}, torch::kFloat64).view({2, 2});
    loss::bce_loss(p, g, 1e-7).backward();
    auto grad = p.grad().view({-1});
    CHECK(grad[0].item<double>() == 0.0);
    CHECK(grad[1].item<double>() == 0.0);
    CHECK(grad[2].item<double>() == doctest::Approx(-1.0 / 0.5 / 4.0));
    CHECK(grad[3].item<double>() == 0.0);
}

TEST_CASE("LossConfig validation names the field") {
    LossConfig cfg;
    cfg.alpha = 1.5;
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("alpha") != std::string::npos);
    }
    cfg = {};
    cfg.epsilon = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.gamma = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
