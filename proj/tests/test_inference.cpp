#include <doctest.h>

#include "icvseg/adam.hpp"
#include "icvseg/inference.hpp"
#include "icvseg/metrics.hpp"
#include "icvseg/sampling.hpp"
#include "support.hpp"

using namespace icvseg;

namespace {

LabeledScan bright_blob(std::size_t n, std::size_t depth, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> noise(0.0f, 0.1f);
    LabeledScan s;
    s.id = "blob";
    s.image = Volume({n, n, depth}, {1, 1, 1});
    s.mask.extents = s.image.extents;
    s.mask.voxels.assign(s.image.voxel_count(), 0);
    for (std::size_t z = 0; z < depth; ++z) s.mask.annotated_slices.push_back(z);
    const double c = double(n - 1) / 2.0, r = double(n) / 4.0;
    for (std::size_t z = 0; z < depth; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const bool in = (x - c) * (x - c) + (y - c) * (y - c) <= r * r;
                s.image.at(x, y, z) = (in ? 1.0f : 0.2f) + noise(rng);
                s.mask.voxels[s.mask.index(x, y, z)] = in;
            }
    s.image = normalize_intensity(s.image);
    return s;
}

// A tiny network trained briefly on a bright disc; running statistics are populated.
ParameterSet<float> trained_tiny(const LabeledScan& scan, std::size_t epochs) {
    const NetworkSpec spec = NetworkSpec::tiny();
    auto params = init_params<float>(spec, 3);
    auto adam = AdamState<float>::zeros_like(params.trainable());
    std::mt19937_64 rng(4);
    std::span<const LabeledScan> scans(&scan, 1);
    for (std::size_t e = 0; e < epochs; ++e) {
        const EpochPlan plan = build_epoch_plan(scans, 128, epoch_seed(1, e));
        MinibatchStream stream(scans, plan, 32, spec);
        train_epoch(params, spec, stream, adam, rng);
    }
    return params;
}

BinaryVolume binary(Extents e, std::initializer_list<std::array<std::size_t, 3>> on) {
    BinaryVolume b{e, std::vector<std::uint8_t>(e[0] * e[1] * e[2], 0)};
    for (const auto& p : on) b.voxels[p[0] + e[0] * (p[1] + e[1] * p[2])] = 1;
    return b;
}

}  // namespace

TEST_CASE("nearest grid rounds ties down and stays on the grid") {
    CHECK(nearest_grid(0, 2, 9) == 0);
    CHECK(nearest_grid(1, 2, 9) == 0);
    CHECK(nearest_grid(3, 4, 9) == 4);
    CHECK(nearest_grid(2, 4, 9) == 0);
    CHECK(nearest_grid(8, 4, 9) == 8);
    // Beyond the last grid point on a 10-wide axis with stride 4 (grid 0, 4, 8).
    CHECK(nearest_grid(9, 4, 10) == 8);
    for (std::size_t i = 0; i < 17; ++i) CHECK(nearest_grid(i, 3, 17) % 3 == 0);
}

TEST_CASE("segmentation covers every voxel and respects the stride grid") {
    const LabeledScan scan = bright_blob(11, 2, 1);
    const NetworkSpec spec = NetworkSpec::tiny();
    const auto params = trained_tiny(scan, 1);

    const ProbabilityVolume full = segment_volume(scan.image, params, spec, {1, 1, 7});
    CHECK(full.extents == scan.image.extents);
    REQUIRE(full.probs.size() == scan.image.voxel_count());
    for (float p : full.probs) {
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
    }

    const ProbabilityVolume coarse = segment_volume(scan.image, params, spec, {2, 1, 7});
    for (std::size_t z = 0; z < 2; ++z)
        for (std::size_t y = 0; y < 11; ++y)
            for (std::size_t x = 0; x < 11; ++x) {
                const std::size_t i = x + 11 * (y + 11 * z);
                const std::size_t g = nearest_grid(x, 2, 11) + 11 * (nearest_grid(y, 2, 11) + 11 * z);
                CHECK(coarse.probs[i] == doctest::Approx(full.probs[g]).epsilon(1e-5));
            }
}

TEST_CASE("results do not depend on the worker count") {
    const LabeledScan scan = bright_blob(13, 5, 2);
    const NetworkSpec spec = NetworkSpec::tiny();
    const auto params = trained_tiny(scan, 1);
    const auto one = segment_volume(scan.image, params, spec, {1, 1, 64});
    const auto four = segment_volume(scan.image, params, spec, {1, 4, 64});
    CHECK(one.probs == four.probs);
}

TEST_CASE("a briefly trained tiny network finds a bright disc") {
    const LabeledScan scan = bright_blob(24, 2, 3);
    const auto params = trained_tiny(scan, 100);
    const auto seg = largest_component_3d(threshold(segment_volume(scan.image, params, NetworkSpec::tiny())));
    const ScanMetrics m = evaluate_scan(scan.mask, seg.mask, {1, 1, 1});
    CHECK(m.dice > 0.85);
}

TEST_CASE("threshold is strict at one half") {
    const ProbabilityVolume p{{3, 1, 1}, {0.4f, 0.6f, 0.5f}};
    CHECK(threshold(p).voxels == std::vector<std::uint8_t>{0, 1, 0});
}

TEST_CASE("largest component keeps the bigger blob") {
    const Extents e{8, 8, 1};
    const BinaryVolume b = binary(e, {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}, {4, 0, 0}, {6, 6, 0}, {7, 6, 0}, {7, 7, 0}});
    const SegmentationMask m = largest_component_3d(b, Connectivity::six);
    CHECK(m.components == 2);
    CHECK(m.kept_size == 5);
    CHECK(m.mask.count() == 5);
    CHECK(m.mask.voxels[0] == 1);
    CHECK(m.mask.voxels[6 + 8 * 6] == 0);
    CHECK_FALSE(m.empty);
}

TEST_CASE("diagonal neighbors join only under 26-connectivity") {
    const BinaryVolume b = binary({3, 3, 3}, {{0, 0, 0}, {1, 1, 1}});
    CHECK(largest_component_3d(b, Connectivity::twenty_six).components == 1);
    CHECK(largest_component_3d(b, Connectivity::twenty_six).kept_size == 2);
    const SegmentationMask six = largest_component_3d(b, Connectivity::six);
    CHECK(six.components == 2);
    CHECK(six.kept_size == 1);
    // Tie goes to the component holding the smallest linear index.
    CHECK(six.mask.voxels[0] == 1);
}

TEST_CASE("an empty input yields an empty flagged mask") {
    const SegmentationMask m = largest_component_3d(binary({4, 4, 4}, {}));
    CHECK(m.empty);
    CHECK(m.components == 0);
    CHECK(m.mask.count() == 0);
}

TEST_CASE("largest component agrees with a flood-fill oracle") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 40; ++trial) {
        const BinaryVolume b = testing::random_binary({9, 7, 5}, 0.35, rng);
        for (const Connectivity c : {Connectivity::six, Connectivity::twenty_six}) {
            const auto oracle = testing::flood_fill_largest(b, c);
            const SegmentationMask m = largest_component_3d(b, c);
            CHECK(m.mask.voxels == oracle.largest);
            CHECK(m.components == oracle.sizes.size());
        }
    }
}
