#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "icvseg/network.hpp"
#include "icvseg/volume.hpp"

namespace icvseg {

/// Per-voxel ICV probability, x-fastest like Volume.
struct ProbabilityVolume {
    Extents extents{};
    std::vector<float> probs;
};

struct BinaryVolume {
    Extents extents{};
    std::vector<std::uint8_t> voxels;

    std::size_t count() const;
};

enum class Connectivity { six = 6, twenty_six = 26 };

struct SegmentationMask {
    BinaryVolume mask;
    std::size_t components = 0;      // before filtering
    std::size_t kept_size = 0;
    bool empty = true;
    std::string provenance;
};

struct InferenceOptions {
    std::size_t pixel_stride = 1;
    std::size_t workers = 1;
    std::size_t batch_size = 512;
};

/// Classifies every pixel on the stride grid of every slice from its patch
/// triple; off-grid pixels copy their nearest grid pixel (ties toward the
/// lower index). Slices are dealt to workers round-robin; every voxel is
/// written by exactly one worker so results do not depend on `workers`.
/// An unnormalized input is normalized first.
ProbabilityVolume segment_volume(const Volume& volume, const ParameterSet<float>& params, const NetworkSpec& spec,
                                 const InferenceOptions& options = {});

/// Positive iff the ICV probability is strictly above 0.5.
BinaryVolume threshold(const ProbabilityVolume& probs);

/// Keeps the largest connected component. Equal sizes resolve to the
/// component containing the smallest linear voxel index.
SegmentationMask largest_component_3d(const BinaryVolume& binary, Connectivity connectivity = Connectivity::twenty_six);

/// Nearest stride-grid coordinate used to fill off-grid pixels.
std::size_t nearest_grid(std::size_t i, std::size_t stride, std::size_t extent);

}  // namespace icvseg
