#include "icvseg/volume.hpp"

#include <algorithm>
#include <charconv>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "icvseg/error.hpp"
#include "icvseg/keyvalue.hpp"

namespace icvseg {

namespace {

// NIfTI-1 header field offsets.
constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffDescrip = 148;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffSrowX = 280;
constexpr std::size_t kOffMagic = 344;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

class HeaderView {
public:
    HeaderView(std::uint8_t* bytes, bool swap) : bytes_(bytes), swap_(swap) {}

    template <typename T>
    T get(std::size_t offset) const {
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, bytes_ + offset, sizeof(T));
        if (swap_) std::reverse(raw, raw + sizeof(T));
        T v;
        std::memcpy(&v, raw, sizeof(T));
        return v;
    }

    template <typename T>
    void put(std::size_t offset, T v) {
        std::memcpy(bytes_ + offset, &v, sizeof(T));
    }

private:
    std::uint8_t* bytes_;
    bool swap_;
};

static_assert(std::endian::native == std::endian::little, "NIfTI writer assumes a little-endian host");

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string_view role_name(VolumeRole r) { return r == VolumeRole::mask ? "mask" : "image"; }

}  // namespace

std::string_view to_string(Orientation o) {
    switch (o) {
        case Orientation::axial: return "axial";
        case Orientation::coronal: return "coronal";
        case Orientation::sagittal: return "sagittal";
    }
    return "axial";
}

Orientation parse_orientation(std::string_view text) {
    for (Orientation o : kOrientations)
        if (to_string(o) == text) return o;
    throw DataError("unknown orientation '" + std::string(text) + "' (expected axial, coronal or sagittal)");
}

Volume::Volume(Extents e, std::array<float, 3> s, float fill)
    : extents(e), spacing(s), voxels(e[0] * e[1] * e[2], fill) {}

void Volume::validate() const {
    for (std::size_t a = 0; a < 3; ++a) {
        if (extents[a] == 0) throw DataError("volume extent along axis " + std::to_string(a) + " is zero");
        if (!(spacing[a] > 0.0f) || !std::isfinite(spacing[a]))
            throw DataError("volume spacing along axis " + std::to_string(a) + " must be positive");
    }
    if (voxels.size() != voxel_count())
        throw DataError("volume holds " + std::to_string(voxels.size()) + " voxels, extents need " +
                        std::to_string(voxel_count()));
}

bool AnnotatedMask::is_annotated(std::size_t z) const {
    return std::binary_search(annotated_slices.begin(), annotated_slices.end(), z);
}

void AnnotatedMask::validate() const {
    if (voxels.size() != extents[0] * extents[1] * extents[2])
        throw DataError("mask voxel count does not match its extents");
    for (std::size_t i = 0; i < annotated_slices.size(); ++i) {
        if (annotated_slices[i] >= extents[2])
            throw DataError("annotated slice " + std::to_string(annotated_slices[i]) + " outside z extent " +
                            std::to_string(extents[2]));
        if (i && annotated_slices[i] <= annotated_slices[i - 1])
            throw DataError("annotated slices must be strictly increasing");
    }
    const std::size_t plane = extents[0] * extents[1];
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        if (voxels[i] > 1) throw DataError("mask is not binary");
        if (voxels[i] && !is_annotated(i / plane))
            throw DataError("mask voxel on unannotated slice " + std::to_string(i / plane));
    }
}

std::filesystem::path sidecar_path(const std::filesystem::path& nifti_path) {
    std::filesystem::path p = nifti_path;
    return p.replace_extension(".meta");
}

void write_sidecar(const std::filesystem::path& path, const VolumeMetadata& meta) {
    KeyValues kv;
    kv.set("patient_id", meta.patient_id);
    kv.set("orientation", std::string(to_string(meta.orientation)));
    kv.set("role", std::string(role_name(meta.role)));
    if (meta.role == VolumeRole::mask && !meta.annotated_slices.empty())
        kv.set("annotated_slices", join_uints(meta.annotated_slices));
    if (meta.normalized) kv.set("normalized", "1");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write sidecar " + path.string());
    out << kv.to_string();
}

std::optional<VolumeMetadata> read_sidecar(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) return std::nullopt;
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    KeyValues kv;
    try {
        kv = KeyValues::parse(text);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    VolumeMetadata meta;
    meta.patient_id = kv.get_or("patient_id", path.stem().string());
    meta.orientation = parse_orientation(kv.get_or("orientation", "axial"));
    const std::string role = kv.get_or("role", "image");
    if (role == "mask") {
        meta.role = VolumeRole::mask;
    } else if (role != "image") {
        throw DataError(path.string() + ": unknown role '" + role + "'");
    }
    if (kv.contains("annotated_slices")) meta.annotated_slices = parse_uint_list(kv.get("annotated_slices"));
    meta.normalized = kv.get_or("normalized", "0") == "1";
    return meta;
}

Volume read_volume(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes = read_file(path);
    if (bytes.size() < kHeaderSize) throw DataError(path.string() + ": file too short for a NIfTI-1 header");

    std::int32_t sizeof_hdr;
    std::memcpy(&sizeof_hdr, bytes.data(), 4);
    bool swap = false;
    if (sizeof_hdr != std::int32_t(kHeaderSize)) {
        if (std::int32_t(__builtin_bswap32(std::uint32_t(sizeof_hdr))) != std::int32_t(kHeaderSize))
            throw DataError(path.string() + ": not a NIfTI-1 file (sizeof_hdr " + std::to_string(sizeof_hdr) + ")");
        swap = true;
    }
    const char* magic = reinterpret_cast<const char*>(bytes.data() + kOffMagic);
    if (std::memcmp(magic, "ni1\0", 4) == 0)
        throw DataError(path.string() + ": two-file NIfTI (.hdr/.img) is not supported");
    if (std::memcmp(magic, "n+1\0", 4) != 0) throw DataError(path.string() + ": wrong NIfTI magic");

    HeaderView h(bytes.data(), swap);
    const auto ndim = h.get<std::int16_t>(kOffDim);
    if (ndim != 3)
        throw DataError(path.string() + ": unsupported dimensionality dim[0]=" + std::to_string(ndim) +
                        " (only 3D volumes)");
    Volume v;
    for (std::size_t a = 0; a < 3; ++a) {
        const auto e = h.get<std::int16_t>(kOffDim + 2 * (a + 1));
        if (e <= 0) throw DataError(path.string() + ": non-positive extent dim[" + std::to_string(a + 1) + "]");
        v.extents[a] = std::size_t(e);
        v.spacing[a] = h.get<float>(kOffPixdim + 4 * (a + 1));
    }
    const auto datatype = h.get<std::int16_t>(kOffDatatype);
    std::size_t bytes_per_voxel = 0;
    if (datatype == kDtInt16) {
        v.storage = VoxelType::int16;
        bytes_per_voxel = 2;
    } else if (datatype == kDtFloat32) {
        v.storage = VoxelType::float32;
        bytes_per_voxel = 4;
    } else {
        throw DataError(path.string() + ": unsupported datatype " + std::to_string(datatype) +
                        " (int16 or float32 only)");
    }
    const float vox_offset = h.get<float>(kOffVoxOffset);
    if (!(vox_offset >= float(kHeaderSize)) || vox_offset != std::floor(vox_offset))
        throw DataError(path.string() + ": invalid vox_offset");
    const std::size_t offset = std::size_t(vox_offset);
    const std::size_t n = v.extents[0] * v.extents[1] * v.extents[2];
    if (bytes.size() < offset + n * bytes_per_voxel) throw DataError(path.string() + ": truncated voxel data");

    v.voxels.resize(n);
    const std::uint8_t* src = bytes.data() + offset;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint8_t raw[4];
        std::memcpy(raw, src + i * bytes_per_voxel, bytes_per_voxel);
        if (swap) std::reverse(raw, raw + bytes_per_voxel);
        if (v.storage == VoxelType::int16) {
            std::int16_t s;
            std::memcpy(&s, raw, 2);
            v.voxels[i] = float(s);
        } else {
            std::memcpy(&v.voxels[i], raw, 4);
        }
    }
    const float slope = h.get<float>(kOffSclSlope);
    const float inter = h.get<float>(kOffSclInter);
    if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f)) {
        for (float& x : v.voxels) x = x * slope + inter;
        v.storage = VoxelType::float32;
    }
    v.validate();

    if (auto meta = read_sidecar(sidecar_path(path))) {
        v.meta = std::move(*meta);
    } else {
        v.meta.patient_id = path.stem().string();
    }
    return v;
}

void write_volume(const std::filesystem::path& path, const Volume& volume) {
    volume.validate();
    for (std::size_t a = 0; a < 3; ++a)
        if (volume.extents[a] > 32767) throw DataError("extent too large for NIfTI-1");
    const std::size_t bpv = volume.storage == VoxelType::int16 ? 2 : 4;
    std::vector<std::uint8_t> bytes(kVoxOffset + volume.voxel_count() * bpv, 0);
    HeaderView h(bytes.data(), false);
    h.put<std::int32_t>(0, std::int32_t(kHeaderSize));
    bytes[38] = 'r';
    h.put<std::int16_t>(kOffDim, 3);
    for (std::size_t a = 0; a < 7; ++a)
        h.put<std::int16_t>(kOffDim + 2 * (a + 1), a < 3 ? std::int16_t(volume.extents[a]) : std::int16_t(1));
    h.put<std::int16_t>(kOffDatatype, volume.storage == VoxelType::int16 ? kDtInt16 : kDtFloat32);
    h.put<std::int16_t>(kOffBitpix, std::int16_t(bpv * 8));
    h.put<float>(kOffPixdim, 1.0f);
    for (std::size_t a = 0; a < 3; ++a) h.put<float>(kOffPixdim + 4 * (a + 1), volume.spacing[a]);
    h.put<float>(kOffVoxOffset, float(kVoxOffset));
    h.put<float>(kOffSclSlope, 1.0f);
    h.put<float>(kOffSclInter, 0.0f);
    bytes[kOffXyztUnits] = 2;  // mm
    std::memcpy(bytes.data() + kOffDescrip, "icvseg", 6);
    h.put<std::int16_t>(kOffSformCode, 1);
    for (std::size_t r = 0; r < 3; ++r) h.put<float>(kOffSrowX + 16 * r + 4 * r, volume.spacing[r]);
    std::memcpy(bytes.data() + kOffMagic, "n+1\0", 4);

    std::uint8_t* dst = bytes.data() + kVoxOffset;
    for (float x : volume.voxels) {
        if (volume.storage == VoxelType::int16) {
            const float clamped = std::clamp(std::round(x), -32768.0f, 32767.0f);
            const auto s = std::int16_t(clamped);
            std::memcpy(dst, &s, 2);
            dst += 2;
        } else {
            std::memcpy(dst, &x, 4);
            dst += 4;
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw DataError("failed writing " + path.string());
    write_sidecar(sidecar_path(path), volume.meta);
}

AnnotatedMask to_mask(const Volume& volume) {
    if (volume.meta.role != VolumeRole::mask)
        throw DataError("volume of patient " + volume.meta.patient_id + " is not a mask (sidecar role)");
    if (volume.meta.annotated_slices.empty())
        throw DataError("mask of patient " + volume.meta.patient_id + " has no annotated_slices in its sidecar");
    AnnotatedMask mask;
    mask.extents = volume.extents;
    mask.annotated_slices = volume.meta.annotated_slices;
    mask.voxels.resize(volume.voxel_count());
    for (std::size_t i = 0; i < mask.voxels.size(); ++i) {
        const float x = volume.voxels[i];
        if (x != 0.0f && x != 1.0f) throw DataError("mask voxel value " + format_double(x) + " is not binary");
        mask.voxels[i] = x != 0.0f;
    }
    mask.validate();
    return mask;
}

Volume mask_volume(const AnnotatedMask& mask, const Volume& like) {
    if (mask.extents != like.extents) throw DataError("mask extents differ from the reference volume");
    Volume v(mask.extents, like.spacing);
    v.storage = VoxelType::int16;
    v.meta.patient_id = like.meta.patient_id;
    v.meta.orientation = like.meta.orientation;
    v.meta.role = VolumeRole::mask;
    v.meta.annotated_slices = mask.annotated_slices;
    for (std::size_t i = 0; i < mask.voxels.size(); ++i) v.voxels[i] = mask.voxels[i] ? 1.0f : 0.0f;
    return v;
}

Image2D extract_slice(const Volume& volume, std::size_t z) {
    if (z >= volume.extents[2])
        throw std::out_of_range("slice " + std::to_string(z) + " outside z extent " + std::to_string(volume.extents[2]));
    Image2D img;
    img.rows = volume.extents[1];
    img.cols = volume.extents[0];
    const std::size_t plane = img.rows * img.cols;
    img.pixels.assign(volume.voxels.begin() + std::ptrdiff_t(z * plane),
                      volume.voxels.begin() + std::ptrdiff_t((z + 1) * plane));
    return img;
}

std::array<double, 3> spacing_mm(const Volume& volume) {
    std::array<double, 3> out{};
    for (std::size_t a = 0; a < 3; ++a) {
        char buf[32];
        const auto end = std::to_chars(buf, buf + sizeof buf, volume.spacing[a]).ptr;
        std::from_chars(buf, end, out[a]);
    }
    return out;
}

Volume normalize_intensity(const Volume& volume) {
    if (volume.meta.normalized) return volume;
    double sum = 0.0;
    std::size_t count = 0;
    for (float x : volume.voxels)
        if (x > 0.0f) {
            sum += x;
            ++count;
        }
    if (count == 0) throw DataError("cannot normalize volume of " + volume.meta.patient_id + ": no voxel above zero");
    const double mean = sum / double(count);
    double sq = 0.0;
    for (float x : volume.voxels)
        if (x > 0.0f) sq += (x - mean) * (x - mean);
    const double var = sq / double(count);
    if (var < 1e-12)
        throw DataError("cannot normalize volume of " + volume.meta.patient_id + ": positive voxels are constant");
    const double inv_std = 1.0 / std::sqrt(var);
    Volume out = volume;
    out.storage = VoxelType::float32;
    out.meta.normalized = true;
    for (float& x : out.voxels) x = float((x - mean) * inv_std);
    return out;
}

std::vector<std::size_t> select_annotated_slices(std::size_t extent, std::size_t first, std::size_t last,
                                                 std::size_t count) {
    if (count == 0) throw std::invalid_argument("annotated slice count must be positive");
    if (count > extent)
        throw std::invalid_argument("cannot annotate " + std::to_string(count) + " slices of a volume with " +
                                    std::to_string(extent));
    if (first > last || last >= extent) throw std::invalid_argument("slice range outside the volume");
    std::vector<std::size_t> out;
    if (count == 1) {
        out.push_back(std::size_t(std::lround((double(first) + double(last)) / 2.0)));
        return out;
    }
    const double step = double(last - first) / double(count - 1);
    for (std::size_t i = 0; i < count; ++i) {
        const auto idx = std::size_t(std::lround(double(first) + step * double(i)));
        if (out.empty() || out.back() != idx) out.push_back(idx);
    }
    return out;
}

std::vector<std::size_t> select_annotated_slices(const Extents& extents, const std::vector<std::uint8_t>& labels,
                                                 std::size_t count) {
    const std::size_t plane = extents[0] * extents[1];
    if (labels.size() != plane * extents[2]) throw std::invalid_argument("label array does not match extents");
    std::size_t first = extents[2], last = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i]) {
            first = std::min(first, i / plane);
            last = std::max(last, i / plane);
        }
    if (first == extents[2]) throw std::invalid_argument("cannot select annotated slices of an empty label volume");
    return select_annotated_slices(extents[2], first, last, count);
}

bool DatasetSplit::is_test(const std::string& patient) const {
    return std::find(test_patients.begin(), test_patients.end(), patient) != test_patients.end();
}

DatasetSplit split_patients(std::vector<std::string> patients, std::size_t test_count) {
    std::sort(patients.begin(), patients.end());
    patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
    if (test_count >= patients.size())
        throw ConfigError("split needs more than " + std::to_string(test_count) + " patients, got " +
                          std::to_string(patients.size()));
    DatasetSplit split;
    split.train_patients.assign(patients.begin(), patients.end() - std::ptrdiff_t(test_count));
    split.test_patients.assign(patients.end() - std::ptrdiff_t(test_count), patients.end());
    return split;
}

}  // namespace icvseg
