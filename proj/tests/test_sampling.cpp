#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "icvseg/error.hpp"
#include "icvseg/sampling.hpp"
#include "support.hpp"

using namespace icvseg;

namespace {

Image2D ramp(std::size_t rows, std::size_t cols) {
    Image2D im{rows, cols, std::vector<float>(rows * cols)};
    for (std::size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = float(i);
    return im;
}

// A disc of ICV on every annotated slice of a small volume.
LabeledScan disc_scan(const std::string& id, std::size_t n, std::size_t depth, double radius,
                      std::vector<std::size_t> annotated, std::mt19937_64& rng) {
    LabeledScan s;
    s.id = id;
    s.image = Volume({n, n, depth}, {1, 1, 1});
    s.mask.extents = s.image.extents;
    s.mask.voxels.assign(s.image.voxel_count(), 0);
    s.mask.annotated_slices = std::move(annotated);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    const double c = double(n - 1) / 2.0;
    for (std::size_t z = 0; z < depth; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const bool in = (x - c) * (x - c) + (y - c) * (y - c) <= radius * radius;
                s.image.at(x, y, z) = (in ? 2.0f : 0.0f) + noise(rng);
                if (in && s.mask.is_annotated(z)) s.mask.voxels[s.mask.index(x, y, z)] = 1;
            }
    return s;
}

}  // namespace

TEST_CASE("reflect index mirrors without repeating the edge") {
    CHECK(reflect_index(-1, 4) == 1);
    CHECK(reflect_index(-3, 4) == 3);
    CHECK(reflect_index(4, 4) == 2);
    CHECK(reflect_index(6, 4) == 0);
    CHECK(reflect_index(-7, 4) == 1);
    CHECK(reflect_index(0, 1) == 0);
    CHECK(reflect_index(-5, 1) == 0);
    for (std::ptrdiff_t i = -40; i < 40; ++i) CHECK(reflect_index(i, 5) < 5);
}

TEST_CASE("patches from a single pixel slice are constant") {
    const Image2D one{1, 1, {9.0f}};
    const auto t = extract_patch_triple(one, 0, 0, {3, 5, 7});
    for (const auto& p : t.patches)
        for (float v : p.pixels) CHECK(v == 9.0f);
}

TEST_CASE("interior patch is the plain window and sizes are smallest first") {
    const Image2D im = ramp(12, 12);
    const auto t = extract_patch_triple(im, 6, 5, {3, 5, 7});
    CHECK(t.patches[0].rows == 3);
    CHECK(t.patches[2].cols == 7);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) CHECK(t.patches[0].at(r, c) == im.at(5 + r, 4 + c));
    for (const auto& p : t.patches) CHECK(p.at(p.rows / 2, p.cols / 2) == im.at(6, 5));
}

TEST_CASE("corner patch reflects across both edges") {
    const Image2D im = ramp(4, 4);
    const auto t = extract_patch_triple(im, 0, 0, {5, 5, 5});
    // rows -2..2 map to 2,1,0,1,2; same for columns
    const std::size_t map[5] = {2, 1, 0, 1, 2};
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) CHECK(t.patches[0].at(r, c) == im.at(map[r], map[c]));
}

TEST_CASE("even patch sizes and outside centers are rejected") {
    const Image2D im = ramp(4, 4);
    CHECK_THROWS_AS(extract_patch_triple(im, 1, 1, {3, 4, 5}), std::invalid_argument);
    CHECK_THROWS_AS(extract_patch_triple(im, 4, 0, {3, 5, 7}), std::out_of_range);
}

TEST_CASE("epoch plan is balanced per scan and stays on annotated reference labels") {
    std::mt19937_64 rng(11);
    std::vector<LabeledScan> scans;
    for (int i = 0; i < 7; ++i) scans.push_back(disc_scan("s" + std::to_string(i), 24, 8, 6.0, {1, 3, 6}, rng));
    const EpochPlan plan = build_epoch_plan(scans, 100, 99);
    CHECK(plan.entries.size() == 1400);
    std::map<std::pair<std::size_t, int>, std::size_t> tally;
    for (const auto& e : plan.entries) {
        ++tally[{e.scan, e.label}];
        const auto& m = scans[e.scan].mask;
        CHECK(m.is_annotated(e.slice));
        CHECK(int(m.voxels[m.index(e.col, e.row, e.slice)]) == e.label);
    }
    CHECK(tally.size() == 14);
    for (const auto& [key, n] : tally) CHECK(n == 100);

    // Large classes are sampled without replacement.
    std::set<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> unique;
    for (const auto& e : plan.entries) unique.insert({e.scan, e.slice, e.row, e.col});
    CHECK(unique.size() == plan.entries.size());
}

TEST_CASE("a class smaller than the request is drawn with replacement") {
    std::mt19937_64 rng(12);
    LabeledScan s = disc_scan("few", 10, 2, 0.0, {0}, rng);
    std::fill(s.mask.voxels.begin(), s.mask.voxels.end(), 0);
    s.mask.voxels[s.mask.index(1, 1, 0)] = 1;
    s.mask.voxels[s.mask.index(2, 7, 0)] = 1;
    s.mask.voxels[s.mask.index(8, 3, 0)] = 1;
    const EpochPlan plan = build_epoch_plan(std::span<const LabeledScan>(&s, 1), 10, 5);
    std::size_t positives = 0;
    for (const auto& e : plan.entries) positives += e.label == 1;
    CHECK(positives == 10);
    CHECK(plan.entries.size() == 20);
}

TEST_CASE("a scan without one of the classes is named in the error") {
    std::mt19937_64 rng(13);
    LabeledScan s = disc_scan("blank07", 10, 2, 3.0, {0}, rng);
    std::fill(s.mask.voxels.begin(), s.mask.voxels.end(), 0);
    try {
        build_epoch_plan(std::span<const LabeledScan>(&s, 1), 5, 1);
        FAIL("expected a throw");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("blank07") != std::string::npos);
    }
}

TEST_CASE("plans are reproducible per seed and differ across epochs") {
    std::mt19937_64 rng(14);
    std::vector<LabeledScan> scans{disc_scan("a", 20, 4, 5.0, {0, 2}, rng), disc_scan("b", 20, 4, 4.0, {1, 3}, rng)};
    const auto a = build_epoch_plan(scans, 30, epoch_seed(3, 0));
    const auto b = build_epoch_plan(scans, 30, epoch_seed(3, 0));
    const auto c = build_epoch_plan(scans, 30, epoch_seed(3, 1));
    CHECK(a.entries == b.entries);
    CHECK(a.entries != c.entries);
    CHECK(epoch_seed(3, 0) != epoch_seed(4, 0));
}

TEST_CASE("minibatch stream slices the plan and extracts centered patches") {
    std::mt19937_64 rng(15);
    std::vector<LabeledScan> scans{disc_scan("a", 20, 3, 5.0, {0, 2}, rng)};
    const EpochPlan plan = build_epoch_plan(scans, 5, 8);
    const NetworkSpec spec = NetworkSpec::tiny();
    MinibatchStream stream(scans, plan, 4, spec);
    CHECK(stream.batch_count() == 3);

    std::vector<std::size_t> sizes;
    std::size_t offset = 0;
    while (auto batch = stream.next()) {
        sizes.push_back(batch->size());
        for (std::size_t i = 0; i < batch->size(); ++i) {
            const PlanEntry& e = plan.entries[offset + i];
            CHECK(batch->labels[i] == e.label);
            for (std::size_t b = 0; b < kBranches; ++b) {
                const std::size_t s = spec.patch_sizes[b];
                CHECK(batch->inputs[b].shape() == Shape{batch->size(), 1, s, s});
                const float centre = batch->inputs[b][i * s * s + (s / 2) * s + s / 2];
                CHECK(centre == scans[0].image.at(e.col, e.row, e.slice));
            }
        }
        offset += batch->size();
    }
    CHECK(sizes == std::vector<std::size_t>{4, 4, 2});
    CHECK_FALSE(stream.next().has_value());
}
