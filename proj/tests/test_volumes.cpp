#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "icvseg/error.hpp"
#include "icvseg/volume.hpp"
#include "support.hpp"

using namespace icvseg;

namespace {

Volume random_volume(Extents e, std::mt19937_64& rng, VoxelType type = VoxelType::float32) {
    Volume v(e, {0.7f, 0.7f, 2.5f});
    v.storage = type;
    v.meta.patient_id = "p07";
    v.meta.orientation = Orientation::coronal;
    std::uniform_real_distribution<float> u(-100.0f, 1000.0f);
    for (auto& x : v.voxels) x = type == VoxelType::int16 ? std::round(u(rng)) : u(rng);
    return v;
}

std::string read_error(const std::filesystem::path& p) {
    try {
        read_volume(p);
    } catch (const DataError& e) {
        return e.what();
    }
    return "";
}

void patch_bytes(const std::filesystem::path& p, std::size_t offset, const void* data, std::size_t n) {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(std::streamoff(offset));
    f.write(static_cast<const char*>(data), std::streamsize(n));
}

}  // namespace

TEST_CASE("float32 volume round trip is bitwise") {
    testing::TempDir dir;
    std::mt19937_64 rng(1);
    const Volume v = random_volume({8, 8, 4}, rng);
    write_volume(dir / "v.nii", v);
    const Volume back = read_volume(dir / "v.nii");
    CHECK(back.extents == v.extents);
    CHECK(back.spacing == v.spacing);
    CHECK(std::memcmp(back.voxels.data(), v.voxels.data(), v.voxels.size() * sizeof(float)) == 0);
    CHECK(back.meta == v.meta);
    CHECK(back.storage == VoxelType::float32);
}

TEST_CASE("int16 volume read then written keeps the data section byte for byte") {
    testing::TempDir dir;
    std::mt19937_64 rng(2);
    const Volume v = random_volume({5, 6, 7}, rng, VoxelType::int16);
    write_volume(dir / "a.nii", v);
    write_volume(dir / "b.nii", read_volume(dir / "a.nii"));
    const auto a = testing::file_bytes(dir / "a.nii"), b = testing::file_bytes(dir / "b.nii");
    REQUIRE(a.size() == 352 + 2 * v.voxel_count());
    CHECK(std::equal(a.begin() + 352, a.end(), b.begin() + 352, b.end()));
}

TEST_CASE("unsupported files get distinct diagnostics") {
    testing::TempDir dir;
    std::mt19937_64 rng(3);
    write_volume(dir / "v.nii", random_volume({4, 4, 4}, rng));

    std::filesystem::copy_file(dir / "v.nii", dir / "4d.nii");
    const std::int16_t four = 4;
    patch_bytes(dir / "4d.nii", 40, &four, 2);
    CHECK(read_error(dir / "4d.nii").find("dimensionality") != std::string::npos);

    std::filesystem::copy_file(dir / "v.nii", dir / "magic.nii");
    patch_bytes(dir / "magic.nii", 344, "xyz", 4);
    CHECK(read_error(dir / "magic.nii").find("magic") != std::string::npos);

    std::filesystem::copy_file(dir / "v.nii", dir / "f64.nii");
    const std::int16_t float64 = 64;
    patch_bytes(dir / "f64.nii", 70, &float64, 2);
    CHECK(read_error(dir / "f64.nii").find("datatype") != std::string::npos);

    std::ofstream(dir / "short.nii") << "tiny";
    CHECK(read_error(dir / "short.nii").find("too short") != std::string::npos);
    CHECK_THROWS_AS(read_volume(dir / "absent.nii"), DataError);
}

TEST_CASE("sidecar carries patient, orientation, role and annotated slices") {
    testing::TempDir dir;
    AnnotatedMask m;
    m.extents = {4, 4, 6};
    m.voxels.assign(96, 0);
    m.voxels[m.index(1, 2, 3)] = 1;
    m.annotated_slices = {1, 3, 5};
    Volume like({4, 4, 6}, {1.0f, 1.0f, 2.0f});
    like.meta.patient_id = "p02";
    like.meta.orientation = Orientation::sagittal;
    write_volume(dir / "m.nii", mask_volume(m, like));

    std::ifstream in(sidecar_path(dir / "m.nii"));
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.find("patient_id=p02") != std::string::npos);
    CHECK(text.find("orientation=sagittal") != std::string::npos);
    CHECK(text.find("role=mask") != std::string::npos);
    CHECK(text.find("annotated_slices=1,3,5") != std::string::npos);

    const AnnotatedMask back = to_mask(read_volume(dir / "m.nii"));
    CHECK(back.voxels == m.voxels);
    CHECK(back.annotated_slices == m.annotated_slices);
}

TEST_CASE("annotated masks keep labels on annotated slices") {
    AnnotatedMask m;
    m.extents = {2, 2, 3};
    m.voxels.assign(12, 0);
    m.annotated_slices = {0, 2};
    m.voxels[m.index(0, 0, 2)] = 1;
    CHECK_NOTHROW(m.validate());
    m.voxels[m.index(1, 1, 1)] = 1;
    CHECK_THROWS_AS(m.validate(), DataError);
}

TEST_CASE("slices partition the volume and map voxel (x,y,z) to pixel (x,y)") {
    std::mt19937_64 rng(4);
    const Volume v = random_volume({7, 5, 3}, rng);
    std::vector<float> rebuilt;
    for (std::size_t z = 0; z < 3; ++z) {
        const Image2D s = extract_slice(v, z);
        CHECK(s.rows == 5);
        CHECK(s.cols == 7);
        rebuilt.insert(rebuilt.end(), s.pixels.begin(), s.pixels.end());
    }
    CHECK(rebuilt == v.voxels);
    for (int probe = 0; probe < 50; ++probe) {
        const std::size_t x = rng() % 7, y = rng() % 5, z = rng() % 3;
        CHECK(extract_slice(v, z).at(y, x) == v.at(x, y, z));
    }
    const Volume flat({3, 3, 2}, {1, 1, 1}, 4.0f);
    for (float p : extract_slice(flat, 1).pixels) CHECK(p == 4.0f);
    CHECK_THROWS_AS(extract_slice(v, 3), std::out_of_range);
}

TEST_CASE("normalization over positive support") {
    std::mt19937_64 rng(5);
    Volume v = random_volume({10, 10, 10}, rng);
    for (std::size_t i = 0; i < v.voxels.size(); i += 3) v.voxels[i] = 0.0f;
    for (auto& x : v.voxels) x = std::max(x, 0.0f);
    const Volume n = normalize_intensity(v);
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        if (v.voxels[i] > 0.0f) {
            sum += n.voxels[i];
            sq += double(n.voxels[i]) * n.voxels[i];
            ++count;
        }
    const double mean = sum / double(count);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(sq / double(count) - mean * mean) - 1.0) < 1e-5);
    CHECK(n.meta.normalized);
    CHECK(normalize_intensity(n).voxels == n.voxels);

    // A positive affine change of the support leaves the normalized support unchanged.
    Volume shifted = v;
    for (auto& x : shifted.voxels)
        if (x > 0.0f) x = 3.0f * x + 2.0f;
    const Volume ns = normalize_intensity(shifted);
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        if (v.voxels[i] > 0.0f) CHECK(std::abs(ns.voxels[i] - n.voxels[i]) < 1e-5);

    CHECK_THROWS_AS(normalize_intensity(Volume({4, 4, 4}, {1, 1, 1}, 0.0f)), DataError);
    CHECK_THROWS_AS(normalize_intensity(Volume({4, 4, 4}, {1, 1, 1}, 5.0f)), DataError);
}

TEST_CASE("annotated slice selection") {
    const auto s = select_annotated_slices(80, 10, 55, 10);
    CHECK(s == std::vector<std::size_t>{10, 15, 20, 25, 30, 35, 40, 45, 50, 55});
    const auto all = select_annotated_slices(12, 0, 11, 12);
    CHECK(all.size() == 12);
    CHECK(all.front() == 0);
    CHECK(all.back() == 11);
    CHECK(select_annotated_slices(80, 10, 56, 1) == std::vector<std::size_t>{33});
    CHECK_THROWS(select_annotated_slices(8, 0, 7, 9));
    // Range narrower than the count deduplicates.
    CHECK(select_annotated_slices(20, 4, 6, 5) == std::vector<std::size_t>{4, 5, 6});
}

TEST_CASE("patient split is disjoint and by patient") {
    const DatasetSplit s = split_patients({"p03", "p01", "p02", "p00", "p01"}, 1);
    CHECK(s.train_patients == std::vector<std::string>{"p00", "p01", "p02"});
    CHECK(s.test_patients == std::vector<std::string>{"p03"});
    CHECK(s.is_test("p03"));
    CHECK_FALSE(s.is_test("p00"));
}
