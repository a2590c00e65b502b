#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gbt {

/// Dense (batch, channels, depth, height, width) array of doubles,
/// contiguous row-major with width fastest. Training and verification run
/// in 64-bit; file payloads quantize to 32-bit at the serialization layer.
struct Tensor5 {
    std::array<int, 5> shape{0, 0, 0, 0, 0};
    std::vector<double> data;

    Tensor5() = default;
    Tensor5(int n, int c, int d, int h, int w)
        : shape{n, c, d, h, w},
          data(static_cast<std::size_t>(n) * c * d * h * w, 0.0) {}

    static Tensor5 zeros_like(const Tensor5& t) {
        Tensor5 out;
        out.shape = t.shape;
        out.data.assign(t.data.size(), 0.0);
        return out;
    }

    std::int64_t size() const {
        return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2] *
               shape[3] * shape[4];
    }

    std::int64_t spatial_size() const {
        return static_cast<std::int64_t>(shape[2]) * shape[3] * shape[4];
    }

    std::int64_t index(int n, int c, int d, int h, int w) const {
        return (((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + d) *
                    shape[3] +
                h) *
                   shape[4] +
               w;
    }

    double& at(int n, int c, int d, int h, int w) {
        return data[static_cast<std::size_t>(index(n, c, d, h, w))];
    }
    double at(int n, int c, int d, int h, int w) const {
        return data[static_cast<std::size_t>(index(n, c, d, h, w))];
    }

    bool same_shape(const Tensor5& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void check_same_shape(const Tensor5& a, const Tensor5& b,
                             const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

/// y += x, elementwise.
inline void accumulate(Tensor5& y, const Tensor5& x) {
    check_same_shape(y, x, "accumulate");
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
}

}  // namespace gbt
