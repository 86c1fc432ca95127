#include "aura/grid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "aura/error.hpp"

namespace aura {

namespace {

void check_dims(std::size_t height, std::size_t width, std::size_t count) {
    if (height == 0 || width == 0) {
        throw ShapeError("raster must be at least 1x1");
    }
    if (height * width != count) {
        throw ShapeError("raster has " + std::to_string(count) + " values, expected " +
                         std::to_string(height) + "x" + std::to_string(width));
    }
}

} // namespace

ProbabilityMap::ProbabilityMap(std::size_t height, std::size_t width, double fill)
    : Grid<double>(height, width, fill) {
    validate();
}

ProbabilityMap::ProbabilityMap(std::size_t height, std::size_t width, std::vector<double> values)
    : Grid<double>(height, width, std::move(values)) {
    validate();
}

void ProbabilityMap::validate() const {
    check_dims(height_, width_, values_.size());
    for (double v : values_) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw DomainError("probability map value " + std::to_string(v) + " outside [0,1]");
        }
    }
}

BinaryMask::BinaryMask(std::size_t height, std::size_t width, std::uint8_t fill)
    : Grid<std::uint8_t>(height, width, fill) {
    validate();
}

BinaryMask::BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> values)
    : Grid<std::uint8_t>(height, width, std::move(values)) {
    validate();
}

void BinaryMask::validate() const {
    check_dims(height_, width_, values_.size());
    if (std::any_of(values_.begin(), values_.end(), [](std::uint8_t v) { return v > 1; })) {
        throw DomainError("binary mask values must be 0 or 1");
    }
}

std::size_t BinaryMask::foreground_count() const noexcept {
    return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::uint8_t{1}));
}

ProbabilityMap BinaryMask::to_probability() const {
    std::vector<double> soft(values_.begin(), values_.end());
    return ProbabilityMap(height_, width_, std::move(soft));
}

} // namespace aura
