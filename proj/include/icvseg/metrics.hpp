#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icvseg/inference.hpp"
#include "icvseg/volume.hpp"

namespace icvseg {

/// 2|A n B| / (|A| + |B|); two empty sets score 1.
double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

/// Cohen's kappa over the 2x2 agreement table of two binary raters on the
/// same n-voxel domain. Empty when chance agreement is 1 and the raters
/// disagree (undefined).
std::optional<double> cohen_kappa(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

/// Mask voxels with a face neighbor outside the mask (or outside the volume).
std::vector<std::array<std::size_t, 3>> boundary_voxels(const BinaryVolume& mask);

/// max over boundary(from) of the distance to the nearest boundary(to) voxel,
/// in mm. Throws DataError when either mask is empty.
double directed_hausdorff_mm(const BinaryVolume& from, const BinaryVolume& to, const std::array<double, 3>& spacing);
double hausdorff_mm(const BinaryVolume& a, const BinaryVolume& b, const std::array<double, 3>& spacing);

struct ScanMetrics {
    std::string scan_id;
    std::string patient_id;
    Orientation orientation = Orientation::axial;
    double dice = 0.0;             // pooled over all annotated slices
    double dice_slice_mean = 0.0;  // mean of per-slice 2D Dice
    std::optional<double> hausdorff_mm;
    std::optional<double> kappa;
    std::vector<std::size_t> evaluated_slices;
};

/// All metrics on the reference's annotated slices only; prediction voxels
/// elsewhere are ignored.
ScanMetrics evaluate_scan(const AnnotatedMask& reference, const BinaryVolume& prediction,
                          const std::array<double, 3>& spacing);

struct GroupAverage {
    std::string regime;
    Orientation orientation = Orientation::axial;
    std::size_t scans = 0;
    double dice = 0.0;
    std::optional<double> hausdorff_mm;  // mean over scans where defined
    std::optional<double> kappa;
};

/// Per-scan metrics tagged with a training-regime label such as
/// "7 axial, 7 coronal, 7 sagittal".
class MetricsReport {
public:
    void add(const std::string& regime, ScanMetrics metrics);

    const std::vector<std::pair<std::string, ScanMetrics>>& rows() const { return rows_; }
    /// Averages keyed by (regime, orientation) in first-seen order.
    std::vector<GroupAverage> averages() const;
    std::optional<GroupAverage> average(const std::string& regime, Orientation orientation) const;

    /// `[scan <id>]` and `[average <regime> / <orientation>]` sections of
    /// key=value lines.
    std::string to_records() const;
    /// Mean Dice per regime (rows) and test orientation (columns).
    std::string to_table() const;

private:
    std::vector<std::pair<std::string, ScanMetrics>> rows_;
};

}  // namespace icvseg
