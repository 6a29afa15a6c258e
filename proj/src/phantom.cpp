#include "icvseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "icvseg/error.hpp"

namespace icvseg {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Half-extent (mm) available around the FOV center along each patient axis,
// taking the tightest scan axis over all orientations.
double min_half_fov(const PhantomConfig& c) {
    double m = 1e300;
    for (std::size_t a = 0; a < 3; ++a) m = std::min(m, 0.5 * double(c.extents[a]) * c.spacing[a]);
    return m;
}

double max_margin_mm(const PhantomConfig& c) {
    return 2.0 * std::max({double(c.spacing[0]), double(c.spacing[1]), double(c.spacing[2])});
}

double ellipsoid_value(const PatientPoint& p, const PatientPoint& c, const std::array<double, 3>& r) {
    double s = 0.0;
    for (std::size_t a = 0; a < 3; ++a) {
        const double d = (p[a] - c[a]) / r[a];
        s += d * d;
    }
    return s;
}

double texture_value(const PatientGeometry& g, const PatientPoint& p) {
    double v = 0.0;
    for (const auto& w : g.texture) v += std::cos(w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + w[3]);
    return v / double(g.texture.size());
}

}  // namespace

double PatientGeometry::icv_volume_mm3() const {
    return 4.0 / 3.0 * std::numbers::pi * icv_radii[0] * icv_radii[1] * icv_radii[2];
}

bool PatientGeometry::inside_icv(const PatientPoint& p) const {
    return ellipsoid_value(p, icv_center, icv_radii) <= 1.0;
}

void PhantomConfig::validate() const {
    for (std::size_t a = 0; a < 3; ++a) {
        if (extents[a] < 8) throw ConfigError("phantom extents must be at least 8 voxels");
        if (!(spacing[a] > 0.0f)) throw ConfigError("phantom spacing must be positive");
    }
    if (!(radius_mm[0] > 0.0 && radius_mm[0] <= radius_mm[1])) throw ConfigError("invalid phantom radius range");
    if (clutter_count[0] > clutter_count[1]) throw ConfigError("invalid clutter count range");
    if (!(noise >= 0.0)) throw ConfigError("phantom noise level must be nonnegative");
    if (annotated_slices == 0 || annotated_slices > extents[2]) throw ConfigError("invalid annotated slice count");
    const double needed = radius_mm[1] + 2.5 + max_margin_mm(*this);
    if (needed > min_half_fov(*this))
        throw ConfigError("phantom radius " + std::to_string(radius_mm[1]) + " mm plus rim and a 2-voxel margin (" +
                          std::to_string(needed) + " mm) exceeds the half field of view " +
                          std::to_string(min_half_fov(*this)) + " mm");
}

std::array<std::size_t, 3> patient_axes(Orientation orientation) {
    switch (orientation) {
        case Orientation::axial: return {0, 1, 2};     // x=LR, y=AP, z=SI
        case Orientation::coronal: return {0, 2, 1};   // x=LR, y=SI, z=AP
        case Orientation::sagittal: return {1, 2, 0};  // x=AP, y=SI, z=LR
    }
    return {0, 1, 2};
}

PatientPoint voxel_to_patient(const PhantomConfig& c, std::size_t x, std::size_t y, std::size_t z) {
    const std::array<std::size_t, 3> idx{x, y, z};
    const auto axes = patient_axes(c.orientation);
    PatientPoint p{};
    for (std::size_t a = 0; a < 3; ++a)
        p[axes[a]] = (double(idx[a]) - 0.5 * double(c.extents[a] - 1)) * double(c.spacing[a]);
    return p;
}

PatientGeometry sample_geometry(const PhantomConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    PatientGeometry g;
    const double half = min_half_fov(config);
    const double margin = max_margin_mm(config);
    for (std::size_t a = 0; a < 3; ++a) {
        g.icv_radii[a] = config.radius_mm[0] + unit(rng) * (config.radius_mm[1] - config.radius_mm[0]);
        const double slack = std::max(0.0, half - margin - g.rim_mm - g.icv_radii[a]);
        g.icv_center[a] = (2.0 * unit(rng) - 1.0) * slack;
    }
    for (auto& w : g.texture) {
        // wavelengths between 15 and 40 mm in a random direction
        const double k = 2.0 * std::numbers::pi / (15.0 + 25.0 * unit(rng));
        const double theta = std::acos(2.0 * unit(rng) - 1.0), phi = 2.0 * std::numbers::pi * unit(rng);
        w = {k * std::sin(theta) * std::cos(phi), k * std::sin(theta) * std::sin(phi), k * std::cos(theta),
             2.0 * std::numbers::pi * unit(rng)};
    }
    std::uniform_int_distribution<std::size_t> count(config.clutter_count[0], config.clutter_count[1]);
    const std::size_t wanted = count(rng);
    const std::array<double, 3> head{g.icv_radii[0] + g.rim_mm, g.icv_radii[1] + g.rim_mm, g.icv_radii[2] + g.rim_mm};
    for (std::size_t attempt = 0; g.clutter.size() < wanted && attempt < 10000; ++attempt) {
        Clutter c;
        const std::size_t long_axis = std::size_t(unit(rng) * 3.0) % 3;
        for (std::size_t a = 0; a < 3; ++a) c.radii[a] = a == long_axis ? 12.0 + 12.0 * unit(rng) : 2.0 + 3.0 * unit(rng);
        for (std::size_t a = 0; a < 3; ++a) c.center[a] = (2.0 * unit(rng) - 1.0) * (half - margin);
        c.intensity = float(0.5 + 0.25 * unit(rng));
        // keep clear of the head: the clutter's bounding sphere stays outside
        // the rim ellipsoid grown by that radius
        const double reach = *std::max_element(c.radii.begin(), c.radii.end()) + 1.0;
        const std::array<double, 3> grown{head[0] + reach, head[1] + reach, head[2] + reach};
        if (ellipsoid_value(c.center, g.icv_center, grown) <= 1.0) continue;
        g.clutter.push_back(c);
    }
    return g;
}

PhantomScan render_phantom(const PhantomConfig& config, const PatientGeometry& g, const std::string& patient_id) {
    config.validate();
    PhantomScan scan;
    scan.id = scan_id(patient_id, config.orientation);
    scan.geometry = g;
    Volume& v = scan.image;
    v = Volume(config.extents, config.spacing);
    v.storage = VoxelType::float32;
    v.meta.patient_id = patient_id;
    v.meta.orientation = config.orientation;
    scan.full_mask.assign(v.voxel_count(), 0);

    std::mt19937_64 noise_rng(splitmix64(config.seed ^ (0xA5A5u + std::uint64_t(config.orientation))));
    std::normal_distribution<double> noise(0.0, config.noise > 0.0 ? config.noise : 1.0);
    const double half = min_half_fov(config);
    const std::array<double, 3> body{0.95 * half, 0.95 * half, 0.95 * half};
    const std::array<double, 3> rim{g.icv_radii[0] + g.rim_mm, g.icv_radii[1] + g.rim_mm, g.icv_radii[2] + g.rim_mm};
    for (std::size_t z = 0; z < config.extents[2]; ++z)
        for (std::size_t y = 0; y < config.extents[1]; ++y)
            for (std::size_t x = 0; x < config.extents[0]; ++x) {
                const PatientPoint p = voxel_to_patient(config, x, y, z);
                const double tex = texture_value(g, p);
                double value = 0.0;
                if (g.inside_icv(p)) {
                    value = 0.6 + 0.1 * tex;
                    scan.full_mask[v.index(x, y, z)] = 1;
                } else if (ellipsoid_value(p, g.icv_center, rim) <= 1.0) {
                    value = 1.0;
                } else {
                    if (ellipsoid_value(p, {0, 0, 0}, body) <= 1.0) value = 0.3 + 0.05 * tex;
                    for (const Clutter& c : g.clutter)
                        if (ellipsoid_value(p, c.center, c.radii) <= 1.0) value = c.intensity;
                }
                if (config.noise > 0.0) value += noise(noise_rng);
                v.at(x, y, z) = float(value);
            }

    AnnotatedMask& ref = scan.reference;
    ref.extents = config.extents;
    ref.annotated_slices = select_annotated_slices(config.extents, scan.full_mask, config.annotated_slices);
    ref.voxels.assign(scan.full_mask.size(), 0);
    const std::size_t plane = config.extents[0] * config.extents[1];
    for (std::size_t z : ref.annotated_slices)
        std::copy_n(scan.full_mask.begin() + std::ptrdiff_t(z * plane), plane, ref.voxels.begin() + std::ptrdiff_t(z * plane));
    return scan;
}

PhantomScan generate_phantom(const PhantomConfig& config) {
    return render_phantom(config, sample_geometry(config), "phantom");
}

std::string scan_id(const std::string& patient, Orientation orientation) {
    return patient + "_" + std::string(to_string(orientation));
}

std::uint64_t patient_seed(std::uint64_t base_seed, std::size_t patient) {
    return splitmix64(base_seed ^ splitmix64(patient + 1));
}

PhantomDataset generate_dataset(std::size_t patients, std::size_t scans_per_patient, std::uint64_t base_seed,
                                PhantomConfig base) {
    if (patients < 2) throw ConfigError("a phantom dataset needs at least 2 patients, got " + std::to_string(patients));
    if (scans_per_patient == 0 || scans_per_patient > kOrientations.size())
        throw ConfigError("scans per patient must be between 1 and 3");
    PhantomDataset ds;
    for (std::size_t p = 0; p < patients; ++p) {
        char name[32];
        std::snprintf(name, sizeof name, "p%02zu", p);
        ds.patients.emplace_back(name);
        PhantomConfig config = base;
        config.seed = patient_seed(base_seed, p);
        const PatientGeometry geometry = sample_geometry(config);
        for (std::size_t s = 0; s < scans_per_patient; ++s) {
            config.orientation = kOrientations[s];
            ds.scans.push_back(render_phantom(config, geometry, name));
        }
    }
    return ds;
}

void write_dataset(const std::filesystem::path& dir, const PhantomDataset& dataset) {
    std::filesystem::create_directories(dir);
    for (const PhantomScan& scan : dataset.scans) {
        write_volume(dir / (scan.id + ".nii"), scan.image);
        write_volume(dir / (scan.id + "_ref.nii"), mask_volume(scan.reference, scan.image));
    }
}

}  // namespace icvseg
