#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sf/errors.hpp"

namespace sf::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major array with an optional gradient buffer.
///
/// Values are checked for finiteness on construction; a tensor holding NaN or
/// Inf is never observable.
template <typename Real>
struct BasicTensor {
    Shape shape;
    std::vector<Real> values;
    bool requires_grad = false;
    std::optional<std::vector<Real>> grad;

    BasicTensor() = default;

    BasicTensor(Shape s, std::vector<Real> v, bool needs_grad = false)
        : shape(std::move(s)), values(std::move(v)), requires_grad(needs_grad) {
        if (element_count(shape) != values.size()) {
            throw ContractViolation("tensor shape " + shape_string(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
        }
        for (Real x : values) {
            if (!std::isfinite(x)) {
                throw NumericFailure("tensor constructed with non-finite value");
            }
        }
    }

    static BasicTensor zeros(Shape s, bool needs_grad = false) {
        const std::size_t n = element_count(s);
        return BasicTensor(std::move(s), std::vector<Real>(n, Real{0}), needs_grad);
    }

    static BasicTensor scalar(Real x, bool needs_grad = false) {
        return BasicTensor(Shape{}, std::vector<Real>{x}, needs_grad);
    }

    std::size_t size() const noexcept { return values.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    bool is_scalar() const noexcept { return values.size() == 1 && shape.size() <= 1; }

    Real item() const {
        if (values.size() != 1) {
            throw ContractViolation("item() on tensor of shape " + shape_string(shape));
        }
        return values[0];
    }

    std::span<const Real> view() const noexcept { return values; }
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

}  // namespace sf::diff
