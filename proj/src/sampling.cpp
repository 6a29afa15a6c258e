#include "icvseg/sampling.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

#include "icvseg/error.hpp"

namespace icvseg {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Draws `count` items from `pool`: distinct when the pool is large enough.
std::vector<std::size_t> draw(std::vector<std::size_t>& pool, std::size_t count, std::mt19937_64& rng) {
    std::vector<std::size_t> out;
    out.reserve(count);
    if (pool.size() >= count) {
        for (std::size_t i = 0; i < count; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
            out.push_back(pool[i]);
        }
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t i = 0; i < count; ++i) out.push_back(pool[pick(rng)]);
    }
    return out;
}

}  // namespace

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = std::ptrdiff_t(2 * (n - 1));
    i %= period;
    if (i < 0) i += period;
    return std::size_t(i < std::ptrdiff_t(n) ? i : period - i);
}

void copy_reflected_window(const float* plane, std::size_t rows, std::size_t cols, std::size_t row, std::size_t col,
                           std::size_t size, float* dst) {
    const auto half = std::ptrdiff_t(size / 2);
    const auto r0 = std::ptrdiff_t(row) - half;
    const auto c0 = std::ptrdiff_t(col) - half;
    const bool cols_inside = c0 >= 0 && c0 + std::ptrdiff_t(size) <= std::ptrdiff_t(cols);
    for (std::size_t r = 0; r < size; ++r) {
        const float* line = plane + reflect_index(r0 + std::ptrdiff_t(r), rows) * cols;
        if (cols_inside) {
            std::copy_n(line + c0, size, dst);
        } else {
            for (std::size_t c = 0; c < size; ++c) dst[c] = line[reflect_index(c0 + std::ptrdiff_t(c), cols)];
        }
        dst += size;
    }
}

PatchTriple extract_patch_triple(const Image2D& slice, std::size_t row, std::size_t col,
                                 const std::array<std::size_t, kBranches>& patch_sizes) {
    if (row >= slice.rows || col >= slice.cols)
        throw std::out_of_range("patch center (" + std::to_string(row) + "," + std::to_string(col) +
                                ") outside slice " + std::to_string(slice.rows) + "x" + std::to_string(slice.cols));
    PatchTriple triple;
    for (std::size_t b = 0; b < kBranches; ++b) {
        const std::size_t s = patch_sizes[b];
        if (s % 2 == 0) throw std::invalid_argument("patch size " + std::to_string(s) + " is even");
        Image2D& p = triple.patches[b];
        p.rows = p.cols = s;
        p.pixels.resize(s * s);
        copy_reflected_window(slice.pixels.data(), slice.rows, slice.cols, row, col, s, p.pixels.data());
    }
    triple.source.row = row;
    triple.source.col = col;
    return triple;
}

std::uint64_t epoch_seed(std::uint64_t base_seed, std::uint64_t epoch) {
    return splitmix64(base_seed + 0x9E3779B97F4A7C15ull * (epoch + 1));
}

EpochPlan build_epoch_plan(std::span<const LabeledScan> scans, std::size_t per_class, std::uint64_t seed) {
    if (per_class == 0) throw ConfigError("samples per class must be positive");
    EpochPlan plan;
    plan.seed = seed;
    std::mt19937_64 rng(seed);
    for (std::size_t s = 0; s < scans.size(); ++s) {
        const AnnotatedMask& mask = scans[s].mask;
        const std::size_t plane = mask.extents[0] * mask.extents[1];
        std::vector<std::size_t> positives, negatives;
        for (std::size_t z : mask.annotated_slices) {
            if (z >= mask.extents[2]) throw DataError("scan " + scans[s].id + ": annotated slice outside volume");
            for (std::size_t i = z * plane; i < (z + 1) * plane; ++i) (mask.voxels[i] ? positives : negatives).push_back(i);
        }
        if (positives.empty() || negatives.empty())
            throw DataError("scan " + scans[s].id + " has no " + (positives.empty() ? "positive" : "negative") +
                            " voxels on its annotated slices");
        for (int label : {1, 0}) {
            for (std::size_t i : draw(label ? positives : negatives, per_class, rng)) {
                const std::size_t z = i / plane, in_plane = i % plane;
                plan.entries.push_back({s, z, in_plane / mask.extents[0], in_plane % mask.extents[0], label});
            }
        }
    }
    std::shuffle(plan.entries.begin(), plan.entries.end(), rng);
    return plan;
}

MinibatchStream::MinibatchStream(std::span<const LabeledScan> scans, const EpochPlan& plan, std::size_t batch_size,
                                 const NetworkSpec& spec)
    : scans_(scans), plan_(plan), batch_size_(batch_size), patch_sizes_(spec.patch_sizes) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
}

std::size_t MinibatchStream::batch_count() const {
    return (plan_.entries.size() + batch_size_ - 1) / batch_size_;
}

std::optional<Minibatch> MinibatchStream::next() {
    if (cursor_ >= plan_.entries.size()) return std::nullopt;
    const std::size_t n = std::min(batch_size_, plan_.entries.size() - cursor_);
    Minibatch batch;
    for (std::size_t b = 0; b < kBranches; ++b) batch.inputs[b] = Tensor({n, 1, patch_sizes_[b], patch_sizes_[b]});
    batch.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const PlanEntry& e = plan_.entries[cursor_ + i];
        if (e.scan >= scans_.size()) throw DataError("corrupt plan: scan index " + std::to_string(e.scan));
        const Volume& img = scans_[e.scan].image;
        if (e.slice >= img.extents[2] || e.row >= img.extents[1] || e.col >= img.extents[0])
            throw DataError("corrupt plan: coordinate outside scan " + scans_[e.scan].id);
        const float* plane = img.voxels.data() + e.slice * img.extents[0] * img.extents[1];
        for (std::size_t b = 0; b < kBranches; ++b) {
            const std::size_t s = patch_sizes_[b];
            copy_reflected_window(plane, img.extents[1], img.extents[0], e.row, e.col, s,
                                  batch.inputs[b].data().data() + i * s * s);
        }
        batch.labels[i] = e.label;
    }
    cursor_ += n;
    return batch;
}

}  // namespace icvseg
