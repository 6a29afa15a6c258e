#include "icvseg/inference.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "icvseg/error.hpp"
#include "icvseg/sampling.hpp"

namespace icvseg {

namespace {

void classify_slice(const Volume& volume, std::size_t z, const ParameterSet<float>& params, const NetworkSpec& spec,
                    const InferenceOptions& options, float* out) {
    const std::size_t rows = volume.extents[1], cols = volume.extents[0], stride = options.pixel_stride;
    const float* plane = volume.voxels.data() + z * rows * cols;
    std::vector<std::pair<std::size_t, std::size_t>> grid;
    for (std::size_t r = 0; r < rows; r += stride)
        for (std::size_t c = 0; c < cols; c += stride) grid.emplace_back(r, c);

    for (std::size_t start = 0; start < grid.size(); start += options.batch_size) {
        const std::size_t n = std::min(options.batch_size, grid.size() - start);
        BranchInputs<float> inputs;
        for (std::size_t b = 0; b < kBranches; ++b) {
            const std::size_t s = spec.patch_sizes[b];
            inputs[b] = Tensor({n, 1, s, s});
            for (std::size_t i = 0; i < n; ++i)
                copy_reflected_window(plane, rows, cols, grid[start + i].first, grid[start + i].second, s,
                                      inputs[b].data().data() + i * s * s);
        }
        const Tensor probs = predict(params, spec, inputs);
        for (std::size_t i = 0; i < n; ++i) {
            const auto [r, c] = grid[start + i];
            out[r * cols + c] = probs[i * kClasses + 1];
        }
    }
    if (stride == 1) return;
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t gr = nearest_grid(r, stride, rows);
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t gc = nearest_grid(c, stride, cols);
            if (gr != r || gc != c) out[r * cols + c] = out[gr * cols + gc];
        }
    }
}

}  // namespace

std::size_t BinaryVolume::count() const {
    return std::size_t(std::count(voxels.begin(), voxels.end(), std::uint8_t{1}));
}

std::size_t nearest_grid(std::size_t i, std::size_t stride, std::size_t extent) {
    const std::size_t last = ((extent - 1) / stride) * stride;
    return std::min(((i + (stride - 1) / 2) / stride) * stride, last);
}

ProbabilityVolume segment_volume(const Volume& volume, const ParameterSet<float>& params, const NetworkSpec& spec,
                                 const InferenceOptions& options) {
    if (options.pixel_stride == 0 || options.batch_size == 0 || options.workers == 0)
        throw ConfigError("stride, batch size and worker count must be positive");
    check_params(params, spec);
    const Volume normalized = normalize_intensity(volume);
    ProbabilityVolume result;
    result.extents = normalized.extents;
    result.probs.assign(normalized.voxel_count(), 0.0f);
    const std::size_t plane = normalized.extents[0] * normalized.extents[1];
    const std::size_t slices = normalized.extents[2];

    auto work = [&](std::size_t worker) {
        for (std::size_t z = worker; z < slices; z += options.workers)
            classify_slice(normalized, z, params, spec, options, result.probs.data() + z * plane);
    };
    if (options.workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(options.workers);
        for (std::size_t w = 0; w < options.workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    work(w);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return result;
}

BinaryVolume threshold(const ProbabilityVolume& probs) {
    BinaryVolume out{probs.extents, std::vector<std::uint8_t>(probs.probs.size())};
    for (std::size_t i = 0; i < probs.probs.size(); ++i) out.voxels[i] = probs.probs[i] > 0.5f ? 1 : 0;
    return out;
}

SegmentationMask largest_component_3d(const BinaryVolume& binary, Connectivity connectivity) {
    const auto [nx, ny, nz] = binary.extents;
    if (binary.voxels.size() != nx * ny * nz) throw std::invalid_argument("binary volume does not match its extents");

    // Two-pass union-find over the already-visited half of the neighborhood.
    std::vector<std::array<int, 3>> half;
    for (int dz = -1; dz <= 0; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
                const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
                if (connectivity == Connectivity::six && manhattan != 1) continue;
                half.push_back({dx, dy, dz});
            }

    std::vector<std::uint32_t> parent(binary.voxels.size());
    std::iota(parent.begin(), parent.end(), 0u);
    auto find = [&parent](std::uint32_t i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    };
    auto unite = [&](std::uint32_t a, std::uint32_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b) std::swap(a, b);
        parent[a] = b;  // root is always the smallest index of the component
    };

    for (std::size_t z = 0; z < nz; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                const std::size_t i = x + nx * (y + ny * z);
                if (!binary.voxels[i]) continue;
                for (const auto& d : half) {
                    const auto qx = std::ptrdiff_t(x) + d[0], qy = std::ptrdiff_t(y) + d[1],
                               qz = std::ptrdiff_t(z) + d[2];
                    if (qx < 0 || qy < 0 || qz < 0 || qx >= std::ptrdiff_t(nx) || qy >= std::ptrdiff_t(ny)) continue;
                    const std::size_t j = std::size_t(qx) + nx * (std::size_t(qy) + ny * std::size_t(qz));
                    if (binary.voxels[j]) unite(std::uint32_t(i), std::uint32_t(j));
                }
            }

    std::vector<std::size_t> size(binary.voxels.size(), 0);
    SegmentationMask result;
    result.mask.extents = binary.extents;
    result.mask.voxels.assign(binary.voxels.size(), 0);
    std::size_t best_root = 0, best_size = 0;
    for (std::size_t i = 0; i < binary.voxels.size(); ++i) {
        if (!binary.voxels[i]) continue;
        const std::uint32_t r = find(std::uint32_t(i));
        if (r == i) ++result.components;
        ++size[r];
    }
    // Roots are minimum indices, so scanning roots in increasing order and
    // requiring a strictly larger size implements the tie-break.
    for (std::size_t i = 0; i < binary.voxels.size(); ++i)
        if (binary.voxels[i] && parent[i] == i && size[i] > best_size) {
            best_size = size[i];
            best_root = i;
        }
    result.kept_size = best_size;
    result.empty = best_size == 0;
    if (!result.empty)
        for (std::size_t i = 0; i < binary.voxels.size(); ++i)
            if (binary.voxels[i] && find(std::uint32_t(i)) == best_root) result.mask.voxels[i] = 1;
    result.provenance = "threshold=argmax(p>0.5);component=largest-" +
                        std::to_string(static_cast<int>(connectivity)) + "-connected";
    return result;
}

}  // namespace icvseg
