#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace icvseg {

enum class Orientation { axial, coronal, sagittal };
inline constexpr std::array<Orientation, 3> kOrientations = {Orientation::axial, Orientation::coronal,
                                                             Orientation::sagittal};

std::string_view to_string(Orientation o);
Orientation parse_orientation(std::string_view text);

enum class VoxelType { int16, float32 };

enum class VolumeRole { image, mask };

/// Sidecar metadata carried next to every NIfTI file.
struct VolumeMetadata {
    std::string patient_id;
    Orientation orientation = Orientation::axial;
    VolumeRole role = VolumeRole::image;
    std::vector<std::size_t> annotated_slices;  // masks only
    bool normalized = false;                    // set by normalize_intensity

    bool operator==(const VolumeMetadata&) const = default;
};

using Extents = std::array<std::size_t, 3>;

/// Scalar volume indexed (x, y, z) with x fastest; z is the through-plane
/// axis regardless of the anatomical orientation tag.
struct Volume {
    Extents extents{};
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // mm
    VoxelType storage = VoxelType::float32;
    VolumeMetadata meta;
    std::vector<float> voxels;

    Volume() = default;
    Volume(Extents e, std::array<float, 3> s, float fill = 0.0f);

    std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + extents[0] * (y + extents[1] * z);
    }
    float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
    float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }

    /// Throws DataError on non-positive spacing or a voxel-count mismatch.
    void validate() const;
};

/// Binary reference labels plus the slices (along z) that carry them.
struct AnnotatedMask {
    Extents extents{};
    std::vector<std::uint8_t> voxels;
    std::vector<std::size_t> annotated_slices;

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + extents[0] * (y + extents[1] * z);
    }
    bool is_annotated(std::size_t z) const;
    /// Nonzero voxels only on annotated slices, binary values, sorted unique
    /// slice indices inside the z extent. Throws DataError otherwise.
    void validate() const;
};

/// 2D in-plane image; rows run along y, columns along x.
struct Image2D {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> pixels;

    float at(std::size_t row, std::size_t col) const { return pixels[row * cols + col]; }
};

// ------------------------------------------------------------------ file I/O

/// `<stem>.meta` next to the NIfTI file.
std::filesystem::path sidecar_path(const std::filesystem::path& nifti_path);

/// Single-file NIfTI-1 (.nii, n+1 magic), 3D, int16 or float32. Reads the
/// sidecar when present; otherwise the patient id defaults to the stem.
Volume read_volume(const std::filesystem::path& path);
/// Writes voxels in `volume.storage` format plus the sidecar. int16 values
/// are rounded and clamped.
void write_volume(const std::filesystem::path& path, const Volume& volume);

void write_sidecar(const std::filesystem::path& path, const VolumeMetadata& meta);
std::optional<VolumeMetadata> read_sidecar(const std::filesystem::path& path);

/// Reference mask from a mask-role volume; requires annotated slices.
AnnotatedMask to_mask(const Volume& volume);
/// int16 mask volume sharing geometry and patient metadata with `like`.
Volume mask_volume(const AnnotatedMask& mask, const Volume& like);

// ---------------------------------------------------------------- geometry

Image2D extract_slice(const Volume& volume, std::size_t z);

/// Spacing widened through its shortest decimal form, so 0.7f becomes 0.7.
std::array<double, 3> spacing_mm(const Volume& volume);

/// Zero mean, unit variance over voxels > 0; the same affine map is applied
/// to every voxel. A volume already flagged normalized is returned as is.
Volume normalize_intensity(const Volume& volume);

/// `count` indices spread evenly over [first, last], rounded to the nearest
/// integer and deduplicated in order. count == 1 picks the midpoint.
std::vector<std::size_t> select_annotated_slices(std::size_t extent, std::size_t first, std::size_t last,
                                                 std::size_t count = 10);
/// Same, over the z range where `labels` (x-fastest) is nonzero.
std::vector<std::size_t> select_annotated_slices(const Extents& extents, const std::vector<std::uint8_t>& labels,
                                                 std::size_t count = 10);

struct DatasetSplit {
    std::vector<std::string> train_patients;
    std::vector<std::string> test_patients;

    bool is_test(const std::string& patient) const;
};

/// Sorted patient ids; the last `test_count` become the test set.
DatasetSplit split_patients(std::vector<std::string> patients, std::size_t test_count);

}  // namespace icvseg
