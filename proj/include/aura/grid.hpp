#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace aura {

/// Row-major 2-D raster. Row index i runs over height, column index j over width.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t height, std::size_t width, T fill = T{})
        : height_(height), width_(width), values_(height * width, fill) {}

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }

    T& operator()(std::size_t i, std::size_t j) { return values_[i * width_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return values_[i * width_ + j]; }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }

    bool same_shape(const auto& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    friend bool operator==(const Grid&, const Grid&) = default;

protected:
    Grid(std::size_t height, std::size_t width, std::vector<T> values)
        : height_(height), width_(width), values_(std::move(values)) {}

    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<T> values_;
};

/// Per-pixel foreground probabilities. Every value is finite and in [0,1].
class ProbabilityMap : public Grid<double> {
public:
    ProbabilityMap() = default;
    ProbabilityMap(std::size_t height, std::size_t width, double fill = 0.0);
    /// Throws DomainError / ShapeError when the invariants do not hold.
    ProbabilityMap(std::size_t height, std::size_t width, std::vector<double> values);

    /// Writes through operator() bypass validation; call this after bulk edits.
    void validate() const;
};

/// Per-pixel {0,1} labelling.
class BinaryMask : public Grid<std::uint8_t> {
public:
    BinaryMask() = default;
    BinaryMask(std::size_t height, std::size_t width, std::uint8_t fill = 0);
    BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> values);

    std::size_t foreground_count() const noexcept;
    bool empty_foreground() const noexcept { return foreground_count() == 0; }

    /// Soft view of the mask, for the loss functions.
    ProbabilityMap to_probability() const;

    void validate() const;
};

} // namespace aura
