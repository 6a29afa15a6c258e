#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icvseg/network.hpp"
#include "icvseg/volume.hpp"

namespace icvseg {

struct PatchSource {
    std::size_t scan = 0;
    std::size_t slice = 0;
    std::size_t row = 0;
    std::size_t col = 0;
};

/// Three co-centered square patches, smallest first.
struct PatchTriple {
    std::array<Image2D, kBranches> patches;
    PatchSource source;
    int label = -1;  // -1 when unlabeled
};

/// Mirror index without edge repeat (dcb|abcd|cba), iterated for offsets
/// larger than the image.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

/// Copies the size x size window centered at (row, col) of a reflect-padded
/// plane into `dst`.
void copy_reflected_window(const float* plane, std::size_t rows, std::size_t cols, std::size_t row, std::size_t col,
                           std::size_t size, float* dst);

PatchTriple extract_patch_triple(const Image2D& slice, std::size_t row, std::size_t col,
                                 const std::array<std::size_t, kBranches>& patch_sizes);

/// A normalized image and its sparse reference.
struct LabeledScan {
    std::string id;
    Volume image;
    AnnotatedMask mask;
};

struct PlanEntry {
    std::size_t scan = 0;
    std::size_t slice = 0;
    std::size_t row = 0;
    std::size_t col = 0;
    int label = 0;

    bool operator==(const PlanEntry&) const = default;
};

struct EpochPlan {
    std::uint64_t seed = 0;
    std::vector<PlanEntry> entries;
};

/// Seed of epoch `epoch`: splitmix64(base_seed + 0x9E3779B97F4A7C15 * (epoch + 1)).
std::uint64_t epoch_seed(std::uint64_t base_seed, std::uint64_t epoch);

/// For every scan, exactly `per_class` positive and `per_class` negative
/// coordinates drawn from annotated slices (without replacement when the
/// class is large enough, with replacement otherwise), then shuffled.
EpochPlan build_epoch_plan(std::span<const LabeledScan> scans, std::size_t per_class, std::uint64_t seed);

/// Lazily extracts patch triples for consecutive runs of `batch_size` plan
/// entries; the last batch may be shorter.
class MinibatchStream : public MinibatchSource {
public:
    MinibatchStream(std::span<const LabeledScan> scans, const EpochPlan& plan, std::size_t batch_size,
                    const NetworkSpec& spec);

    std::optional<Minibatch> next() override;
    std::size_t batch_count() const;

private:
    std::span<const LabeledScan> scans_;
    const EpochPlan& plan_;
    std::size_t batch_size_;
    std::array<std::size_t, kBranches> patch_sizes_;
    std::size_t cursor_ = 0;
};

}  // namespace icvseg
