#pragma once

// Helpers and independent reference implementations shared by the unit
// tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "icvseg/inference.hpp"
#include "icvseg/tensor.hpp"

namespace icvseg::testing {

class TempDir {
public:
    explicit TempDir(const std::string& tag = "icvseg") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(rd()) + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<std::uint8_t> file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero
/// up to rounding from producing huge ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

template <typename T>
BasicTensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    BasicTensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(u(rng));
    return t;
}

/// Central difference of `loss` with respect to `x`, restoring x afterwards.
template <typename F>
double central_difference(double& x, double h, F&& loss) {
    const double saved = x;
    x = saved + h;
    const double up = loss();
    x = saved - h;
    const double down = loss();
    x = saved;
    return (up - down) / (2.0 * h);
}

/// Direct nested-loop valid cross-correlation, [N,C,H,W] input.
inline TensorD naive_conv2d(const TensorD& input, const TensorD& weights, const TensorD& bias, std::size_t stride) {
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t co = weights.dim(0), k = weights.dim(2);
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    TensorD out({n, co, oh, ow});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    double sum = bias[o];
                    for (std::size_t i = 0; i < c; ++i)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx)
                                sum += input.at({b, i, y * stride + ky, x * stride + kx}) * weights.at({o, i, ky, kx});
                    out.at({b, o, y, x}) = sum;
                }
    return out;
}

struct FloodFillResult {
    std::vector<std::uint8_t> largest;
    std::vector<std::size_t> sizes;  // in order of discovery (increasing minimum index)
};

/// Breadth-first labeling scanning voxels in linear order. The first
/// component found with the maximal size is kept.
inline FloodFillResult flood_fill_largest(const BinaryVolume& volume, Connectivity connectivity) {
    const auto [nx, ny, nz] = volume.extents;
    std::vector<int> label(volume.voxels.size(), -1);
    FloodFillResult r;
    r.largest.assign(volume.voxels.size(), 0);
    std::vector<std::size_t> queue;
    int best = -1;
    for (std::size_t seed = 0; seed < volume.voxels.size(); ++seed) {
        if (!volume.voxels[seed] || label[seed] >= 0) continue;
        const int id = int(r.sizes.size());
        queue.assign(1, seed);
        label[seed] = id;
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const std::size_t v = queue[head];
            const long x = long(v % nx), y = long((v / nx) % ny), z = long(v / (nx * ny));
            for (long dz = -1; dz <= 1; ++dz)
                for (long dy = -1; dy <= 1; ++dy)
                    for (long dx = -1; dx <= 1; ++dx) {
                        const long steps = std::labs(dx) + std::labs(dy) + std::labs(dz);
                        if (steps == 0 || (connectivity == Connectivity::six && steps > 1)) continue;
                        const long qx = x + dx, qy = y + dy, qz = z + dz;
                        if (qx < 0 || qy < 0 || qz < 0 || qx >= long(nx) || qy >= long(ny) || qz >= long(nz)) continue;
                        const std::size_t q = std::size_t(qx) + nx * (std::size_t(qy) + ny * std::size_t(qz));
                        if (volume.voxels[q] && label[q] < 0) {
                            label[q] = id;
                            queue.push_back(q);
                        }
                    }
        }
        r.sizes.push_back(queue.size());
        if (best < 0 || queue.size() > r.sizes[std::size_t(best)]) best = id;
    }
    if (best >= 0)
        for (std::size_t i = 0; i < label.size(); ++i) r.largest[i] = label[i] == best;
    return r;
}

inline BinaryVolume random_binary(const Extents& extents, double density, std::mt19937_64& rng) {
    BinaryVolume v{extents, std::vector<std::uint8_t>(extents[0] * extents[1] * extents[2])};
    std::bernoulli_distribution on(density);
    for (auto& x : v.voxels) x = on(rng);
    return v;
}

}  // namespace icvseg::testing
