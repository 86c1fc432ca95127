#include "aura/loss.hpp"

#include <string>

#include "aura/error.hpp"

namespace aura::loss {

using torch::indexing::None;
using torch::indexing::Slice;
using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

void LossConfig::validate() const {
    auto require = [](bool ok, const char* field, const char* rule) {
        if (!ok) {
            throw ConfigError(std::string("loss.") + field + " must be " + rule);
        }
    };
    require(std::isfinite(lambda) && lambda >= 0.0, "lambda", ">= 0");
    require(std::isfinite(alpha) && alpha >= 0.0 && alpha <= 1.0, "alpha", "in [0,1]");
    require(std::isfinite(beta) && beta >= 0.0, "beta", ">= 0");
    require(std::isfinite(gamma) && gamma >= 0.0, "gamma", ">= 0");
    require(std::isfinite(epsilon) && epsilon > 0.0, "epsilon", "> 0");
    require(prob_clamp > 0.0 && prob_clamp < 0.5, "prob_clamp", "in (0, 0.5)");
    require(std::isfinite(dice_smooth) && dice_smooth >= 0.0, "dice_smooth", ">= 0");
}

LossConfig pixelwise_only(LossConfig cfg) {
    cfg.gamma = 0.0;
    cfg.beta = 1.0;
    return cfg;
}

namespace {

// Brings [H,W], [N,H,W] and [N,1,H,W] inputs to [N,H,W].
torch::Tensor as_batch(const torch::Tensor& t, const char* what) {
    switch (t.dim()) {
    case 2:
        return t.unsqueeze(0);
    case 3:
        return t;
    case 4:
        if (t.size(1) == 1) {
            return t.squeeze(1);
        }
        break;
    default:
        break;
    }
    throw ShapeError(std::string(what) + " must be [H,W], [N,H,W] or [N,1,H,W], got " +
                     std::to_string(t.dim()) + "-d tensor");
}

void check_values(const torch::Tensor& t, const char* what) {
    if (!t.is_floating_point()) {
        throw DomainError(std::string(what) + " must be a floating point tensor");
    }
    if (t.numel() == 0) {
        throw ShapeError(std::string(what) + " is empty");
    }
    torch::NoGradGuard no_grad;
    if (!torch::isfinite(t).all().item<bool>()) {
        throw DomainError(std::string(what) + " contains non-finite values");
    }
    if ((t.min().item<double>() < 0.0) || (t.max().item<double>() > 1.0)) {
        throw DomainError(std::string(what) + " values must lie in [0,1]");
    }
}

torch::Tensor checked_pred(const torch::Tensor& pred) {
    auto p = as_batch(pred, "prediction");
    check_values(p, "prediction");
    return p;
}

std::pair<torch::Tensor, torch::Tensor> checked_pair(const torch::Tensor& pred, const torch::Tensor& gt) {
    if (pred.sizes() != gt.sizes()) {
        throw ShapeError("prediction and ground truth shapes differ");
    }
    auto p = checked_pred(pred);
    auto g = as_batch(gt, "ground truth");
    g = g.to(p.dtype()).detach();
    check_values(g, "ground truth");
    return {p, g};
}

// Broadcasts a per-image [N] upstream gradient over [N,H,W].
torch::Tensor per_image(const torch::Tensor& grad_out) {
    return grad_out.view({-1, 1, 1});
}

struct LengthTermFn : public torch::autograd::Function<LengthTermFn> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& pred, double epsilon) {
        auto corner = pred.index({Slice(), Slice(None, -1), Slice(None, -1)});
        auto dx = pred.index({Slice(), Slice(1, None), Slice(None, -1)}) - corner;
        auto dy = pred.index({Slice(), Slice(None, -1), Slice(1, None)}) - corner;
        auto root = torch::sqrt(torch::abs(dx * dx + dy * dy) + epsilon);
        ctx->save_for_backward({dx, dy, root});
        ctx->saved_data["shape"] = pred.sizes();
        return root.sum({1, 2});
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        auto saved = ctx->get_saved_variables();
        auto g = per_image(grad_outputs[0]);
        auto u = saved[0] / saved[2] * g;
        auto v = saved[1] / saved[2] * g;
        auto grad = torch::zeros(ctx->saved_data["shape"].toIntVector(), u.options());
        grad.index({Slice(), Slice(None, -1), Slice(None, -1)}).sub_(u + v);
        grad.index({Slice(), Slice(1, None), Slice(None, -1)}).add_(u);
        grad.index({Slice(), Slice(None, -1), Slice(1, None)}).add_(v);
        return {grad, torch::Tensor()};
    }
};

struct AreaTermFn : public torch::autograd::Function<AreaTermFn> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& pred, const torch::Tensor& gt) {
        auto outside = (1.0 - gt).square();
        auto inside = gt.square();
        auto missed_out = (pred * outside).sum({1, 2});
        auto missed_in = ((1.0 - pred) * inside).sum({1, 2});
        ctx->save_for_backward({outside, inside, missed_out, missed_in});
        return missed_out.abs() + missed_in.abs();
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        auto saved = ctx->get_saved_variables();
        // d|s|/ds taken as +1 at s = 0; both sums are nonnegative on [0,1] inputs.
        auto sign_out = torch::where(saved[2] < 0, -1.0, 1.0).to(saved[0].dtype());
        auto sign_in = torch::where(saved[3] < 0, -1.0, 1.0).to(saved[0].dtype());
        auto grad = per_image(sign_out) * saved[0] - per_image(sign_in) * saved[1];
        return {grad * per_image(grad_outputs[0]), torch::Tensor()};
    }
};

struct BceFn : public torch::autograd::Function<BceFn> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& pred, const torch::Tensor& gt, double clamp) {
        auto p = pred.clamp(clamp, 1.0 - clamp);
        auto per_pixel = -(gt * torch::log(p) + (1.0 - gt) * torch::log1p(-p));
        ctx->save_for_backward({pred, gt});
        ctx->saved_data["clamp"] = clamp;
        return per_pixel.mean({1, 2});
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        auto saved = ctx->get_saved_variables();
        const auto& pred = saved[0];
        const auto& gt = saved[1];
        const double clamp = ctx->saved_data["clamp"].toDouble();
        const double pixels = static_cast<double>(pred.size(1) * pred.size(2));
        auto p = pred.clamp(clamp, 1.0 - clamp);
        auto active = torch::logical_and(pred > clamp, pred < 1.0 - clamp).to(pred.dtype());
        auto grad = (p - gt) / (p * (1.0 - p)) * active / pixels;
        return {grad * per_image(grad_outputs[0]), torch::Tensor(), torch::Tensor()};
    }
};

struct DiceFn : public torch::autograd::Function<DiceFn> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& pred, const torch::Tensor& gt, double smooth) {
        auto numer = 2.0 * (pred * gt).sum({1, 2}) + smooth;
        auto denom = pred.sum({1, 2}) + gt.sum({1, 2}) + smooth;
        auto defined = denom > 0;
        auto safe_denom = torch::where(defined, denom, torch::ones_like(denom));
        auto ratio = torch::where(defined, numer / safe_denom, torch::ones_like(denom));
        ctx->save_for_backward({gt, numer, safe_denom, defined});
        return 1.0 - ratio;
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        auto saved = ctx->get_saved_variables();
        const auto& gt = saved[0];
        auto numer = per_image(saved[1]);
        auto denom = per_image(saved[2]);
        auto defined = per_image(saved[3]).to(gt.dtype());
        auto grad = (numer - 2.0 * gt * denom) / (denom * denom) * defined;
        return {grad * per_image(grad_outputs[0]), torch::Tensor(), torch::Tensor()};
    }
};

torch::Tensor length_unchecked(const torch::Tensor& p, double epsilon) {
    if (p.size(1) < 2 || p.size(2) < 2) {
        throw ShapeError("length term needs at least a 2x2 prediction");
    }
    if (!(epsilon > 0.0)) {
        throw DomainError("length term epsilon must be > 0");
    }
    return LengthTermFn::apply(p, epsilon).mean();
}

torch::Tensor ac_unchecked(const torch::Tensor& p, const torch::Tensor& g, const LossConfig& cfg) {
    auto length = length_unchecked(p, cfg.epsilon);
    if (cfg.lambda == 0.0) {
        return length;
    }
    return length + cfg.lambda * AreaTermFn::apply(p, g).mean();
}

void check_clamp(double clamp) {
    if (!(clamp > 0.0 && clamp < 0.5)) {
        throw DomainError("BCE clamp must lie in (0, 0.5)");
    }
}

void check_smooth(double smooth) {
    if (!(std::isfinite(smooth) && smooth >= 0.0)) {
        throw DomainError("Dice smoothing must be >= 0");
    }
}

} // namespace

torch::Tensor length_term(const torch::Tensor& pred, double epsilon) {
    return length_unchecked(checked_pred(pred), epsilon);
}

torch::Tensor area_term(const torch::Tensor& pred, const torch::Tensor& gt) {
    auto [p, g] = checked_pair(pred, gt);
    return AreaTermFn::apply(p, g).mean();
}

torch::Tensor ac_loss(const torch::Tensor& pred, const torch::Tensor& gt, const LossConfig& cfg) {
    cfg.validate();
    auto [p, g] = checked_pair(pred, gt);
    return ac_unchecked(p, g, cfg);
}

torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& gt, double clamp) {
    check_clamp(clamp);
    auto [p, g] = checked_pair(pred, gt);
    return BceFn::apply(p, g, clamp).mean();
}

torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& gt, double smooth) {
    check_smooth(smooth);
    auto [p, g] = checked_pair(pred, gt);
    return DiceFn::apply(p, g, smooth).mean();
}

torch::Tensor combined_loss(const torch::Tensor& pred, const torch::Tensor& gt, const LossConfig& cfg) {
    cfg.validate();
    auto [p, g] = checked_pair(pred, gt);
    auto bce = BceFn::apply(p, g, cfg.prob_clamp).mean();
    auto dice = DiceFn::apply(p, g, cfg.dice_smooth).mean();
    auto pixelwise = cfg.beta * (cfg.alpha * bce + (1.0 - cfg.alpha) * dice);
    if (cfg.gamma == 0.0) {
        return pixelwise;
    }
    return cfg.gamma * ac_unchecked(p, g, cfg) + pixelwise;
}

torch::Tensor to_tensor(const Grid<double>& grid) {
    auto values = grid.values();
    return torch::from_blob(const_cast<double*>(values.data()),
                            {static_cast<int64_t>(grid.height()), static_cast<int64_t>(grid.width())},
                            torch::kFloat64)
        .clone();
}

namespace {

template <typename Fn>
double evaluate(Fn&& fn) {
    torch::NoGradGuard no_grad;
    return fn().template item<double>();
}

} // namespace

double length_term(const ProbabilityMap& pred, double epsilon) {
    return evaluate([&] { return length_term(to_tensor(pred), epsilon); });
}

double area_term(const ProbabilityMap& pred, const ProbabilityMap& gt) {
    return evaluate([&] { return area_term(to_tensor(pred), to_tensor(gt)); });
}

double ac_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, const LossConfig& cfg) {
    return evaluate([&] { return ac_loss(to_tensor(pred), to_tensor(gt), cfg); });
}

double bce_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, double clamp) {
    return evaluate([&] { return bce_loss(to_tensor(pred), to_tensor(gt), clamp); });
}

double dice_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, double smooth) {
    return evaluate([&] { return dice_loss(to_tensor(pred), to_tensor(gt), smooth); });
}

double combined_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, const LossConfig& cfg) {
    return evaluate([&] { return combined_loss(to_tensor(pred), to_tensor(gt), cfg); });
}

} // namespace aura::loss
