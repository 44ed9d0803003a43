#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace tsdm {

/// A batch of one-dimensional series: `count` rows of `length` samples,
/// row-major. Holds clean data, noised data, noise draws and model outputs
/// alike.
struct SignalBatch {
    int count = 0;
    int length = 0;
    std::vector<double> values;

    SignalBatch() = default;
    SignalBatch(int count_, int length_)
        : count(count_), length(length_) {
        if (count_ < 0 || length_ <= 0)
            throw std::invalid_argument("signal batch: count must be >= 0 and length > 0");
        values.assign(static_cast<std::size_t>(count_) * length_, 0.0);
    }

    double& at(int n, int i) { return values[static_cast<std::size_t>(n) * length + i]; }
    double at(int n, int i) const { return values[static_cast<std::size_t>(n) * length + i]; }

    double* row(int n) { return values.data() + static_cast<std::size_t>(n) * length; }
    const double* row(int n) const { return values.data() + static_cast<std::size_t>(n) * length; }

    std::size_t size() const { return values.size(); }

    bool same_shape(const SignalBatch& o) const { return count == o.count && length == o.length; }

    bool all_finite() const {
        for (double x : values)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline void require_same_shape(const SignalBatch& a, const SignalBatch& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                    std::to_string(a.count) + "x" + std::to_string(a.length) +
                                    " vs " + std::to_string(b.count) + "x" +
                                    std::to_string(b.length) + ")");
}

}  // namespace tsdm
