#pragma once

// Test-only central finite-difference oracle. Evaluates a scalar function of
// flat parameter vectors without touching the reverse-mode machinery.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace sf::testing {

using ScalarFn = std::function<double(const std::vector<std::vector<double>>&)>;

inline std::vector<std::vector<double>> central_differences(const ScalarFn& f,
                                                             std::vector<std::vector<double>> params,
                                                             double h = 1e-4) {
    std::vector<std::vector<double>> out;
    for (std::size_t p = 0; p < params.size(); ++p) {
        std::vector<double> g(params[p].size());
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double saved = params[p][i];
            params[p][i] = saved + h;
            const double up = f(params);
            params[p][i] = saved - h;
            const double down = f(params);
            params[p][i] = saved;
            g[i] = (up - down) / (2.0 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

// |a-b| / max(|a|,|b|, floor); the floor keeps near-zero entries from
// dominating.
inline double relative_error(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace sf::testing
