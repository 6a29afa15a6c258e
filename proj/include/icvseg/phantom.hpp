#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icvseg/volume.hpp"

namespace icvseg {

/// Points are in patient coordinates (mm): left-right, anterior-posterior,
/// superior-inferior, origin at the field-of-view center.
using PatientPoint = std::array<double, 3>;

struct Clutter {
    PatientPoint center{};
    std::array<double, 3> radii{};  // one long axis
    float intensity = 0.0f;
};

/// Underlying anatomy shared by all scans of one patient.
struct PatientGeometry {
    PatientPoint icv_center{};
    std::array<double, 3> icv_radii{};  // semi-axes along LR, AP, SI
    double rim_mm = 2.5;
    std::vector<Clutter> clutter;
    std::array<std::array<double, 4>, 4> texture{};  // per wave: kx, ky, kz, phase

    double icv_volume_mm3() const;
    /// Ellipsoid test: sum(((p - c) / r)^2) <= 1.
    bool inside_icv(const PatientPoint& p) const;
};

struct PhantomConfig {
    Extents extents{128, 128, 32};
    std::array<float, 3> spacing{0.7f, 0.7f, 2.5f};
    std::array<double, 2> radius_mm{16.0, 26.0};
    std::array<std::size_t, 2> clutter_count{3, 8};
    double noise = 0.04;
    Orientation orientation = Orientation::axial;
    std::uint64_t seed = 1;
    std::size_t annotated_slices = 10;

    /// Throws ConfigError when the largest ellipsoid plus rim and a 2-voxel
    /// margin cannot fit along every scan axis.
    void validate() const;
};

struct PhantomScan {
    std::string id;
    PatientGeometry geometry;
    Volume image;
    AnnotatedMask reference;               // restricted to annotated slices
    std::vector<std::uint8_t> full_mask;   // exact ellipsoid interior
};

/// Scan axis -> patient axis for an orientation (x, y in-plane, z through).
std::array<std::size_t, 3> patient_axes(Orientation orientation);
/// Voxel center in patient coordinates.
PatientPoint voxel_to_patient(const PhantomConfig& config, std::size_t x, std::size_t y, std::size_t z);

PatientGeometry sample_geometry(const PhantomConfig& config);
PhantomScan render_phantom(const PhantomConfig& config, const PatientGeometry& geometry, const std::string& patient_id);
/// Geometry drawn from config.seed, rendered in config.orientation.
PhantomScan generate_phantom(const PhantomConfig& config);

struct PhantomDataset {
    std::vector<std::string> patients;
    std::vector<PhantomScan> scans;  // patient-major, orientations axial, coronal, sagittal
};

/// Patient p uses seed splitmix(base_seed, p); each patient gets one scan
/// per orientation, all rendered from the same geometry.
PhantomDataset generate_dataset(std::size_t patients, std::size_t scans_per_patient, std::uint64_t base_seed,
                                PhantomConfig base = {});

/// `<id>.nii` images, `<id>_ref.nii` reference masks, each with a sidecar.
void write_dataset(const std::filesystem::path& dir, const PhantomDataset& dataset);

std::string scan_id(const std::string& patient, Orientation orientation);
std::uint64_t patient_seed(std::uint64_t base_seed, std::size_t patient);

}  // namespace icvseg
