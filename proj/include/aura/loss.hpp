#pragma once

#include <torch/torch.h>

#include "aura/grid.hpp"

/// Segmentation losses: the region-based active-contour term (contour length plus
/// area mismatch), pixel-wise BCE, soft Dice, and their weighted composition.
///
/// Tensor overloads accept predictions shaped [H,W], [N,H,W] or [N,1,H,W] with a
/// ground truth of the same shape. Each loss is evaluated per image and the batch
/// result is the mean over images. Every term carries a closed-form backward pass,
/// so `backward()` through these functions never relies on autograd tracing of the
/// loss internals.
namespace aura::loss {

struct LossConfig {
    double lambda = 5.0;   ///< area weight inside the active-contour loss
    double alpha = 0.5;    ///< BCE share of the pixel-wise block
    double beta = 0.75;    ///< pixel-wise block weight
    double gamma = 0.25;   ///< active-contour block weight
    double epsilon = 1e-6; ///< keeps the length integrand differentiable at zero gradient
    double prob_clamp = 1e-7;
    double dice_smooth = 1.0;

    /// Throws ConfigError naming the first offending field.
    void validate() const;

    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

/// Default weights with the active-contour block disabled: the loss is the
/// pixel-wise block alone (gamma = 0, beta = 1).
LossConfig pixelwise_only(LossConfig cfg);

// Contour length: sum over the (H-1)x(W-1) overlap of sqrt(|dx^2 + dy^2| + eps), with
// forward differences dx = p[i+1][j] - p[i][j], dy = p[i][j+1] - p[i][j].
torch::Tensor length_term(const torch::Tensor& pred, double epsilon);

// |sum p (1-g)^2| + |sum (1-p) g^2|
torch::Tensor area_term(const torch::Tensor& pred, const torch::Tensor& gt);

torch::Tensor ac_loss(const torch::Tensor& pred, const torch::Tensor& gt, const LossConfig& cfg);

/// Per-pixel mean binary cross-entropy on probabilities clamped to [clamp, 1-clamp].
torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& gt, double clamp);

/// 1 - (2 sum pg + smooth) / (sum p + sum g + smooth). A zero denominator counts as a
/// perfect match.
torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& gt, double smooth);

/// gamma * ac + beta * (alpha * bce + (1 - alpha) * dice). The active-contour block is
/// skipped entirely when gamma == 0.
torch::Tensor combined_loss(const torch::Tensor& pred, const torch::Tensor& gt, const LossConfig& cfg);

// Double-precision evaluations on single rasters.
double length_term(const ProbabilityMap& pred, double epsilon);
double area_term(const ProbabilityMap& pred, const ProbabilityMap& gt);
double ac_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, const LossConfig& cfg);
double bce_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, double clamp);
double dice_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, double smooth);
double combined_loss(const ProbabilityMap& pred, const ProbabilityMap& gt, const LossConfig& cfg);

/// [H,W] double tensor copy of a raster.
torch::Tensor to_tensor(const Grid<double>& grid);

} // namespace aura::loss
