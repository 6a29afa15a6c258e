#include <doctest.h>

#include <cmath>

#include "icvseg/error.hpp"
#include "icvseg/metrics.hpp"
#include "support.hpp"

using namespace icvseg;

namespace {

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

BinaryVolume box(Extents e, Extents lo, Extents hi) {
    BinaryVolume b{e, std::vector<std::uint8_t>(e[0] * e[1] * e[2], 0)};
    for (std::size_t z = lo[2]; z < hi[2]; ++z)
        for (std::size_t y = lo[1]; y < hi[1]; ++y)
            for (std::size_t x = lo[0]; x < hi[0]; ++x) b.voxels[x + e[0] * (y + e[1] * z)] = 1;
    return b;
}

ScanMetrics row(const std::string& id, Orientation o, double d, std::optional<double> hd) {
    ScanMetrics m;
    m.scan_id = id;
    m.patient_id = id.substr(0, 3);
    m.orientation = o;
    m.dice = d;
    m.hausdorff_mm = hd;
    m.kappa = d;
    return m;
}

}  // namespace

TEST_CASE("dice by hand") {
    CHECK(dice(bits({1, 1, 0, 0}), bits({1, 0, 1, 0})) == 0.5);
    CHECK(dice(bits({1, 1, 1}), bits({1, 1, 1})) == 1.0);
    CHECK(dice(bits({0, 0}), bits({0, 0})) == 1.0);
    CHECK(dice(bits({1, 0}), bits({0, 0})) == 0.0);
    CHECK_THROWS_AS(dice(bits({1}), bits({1, 0})), std::invalid_argument);
}

TEST_CASE("dice is symmetric and bounded on random masks") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 100; ++t) {
        const auto a = testing::random_binary({6, 5, 4}, 0.4, rng).voxels;
        const auto b = testing::random_binary({6, 5, 4}, 0.4, rng).voxels;
        const double d = dice(a, b);
        CHECK(d == dice(b, a));
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
        CHECK(dice(a, a) == 1.0);
    }
}

TEST_CASE("kappa by hand and under rater swap") {
    // table: both 1 = 2, a only = 1, b only = 1, neither = 4; p_o = 3/4, p_e = 34/64
    const auto a = bits({1, 1, 1, 0, 0, 0, 0, 0});
    const auto b = bits({1, 1, 0, 1, 0, 0, 0, 0});
    CHECK(*cohen_kappa(a, b) == doctest::Approx(7.0 / 15.0).epsilon(1e-12));
    CHECK(*cohen_kappa(a, a) == doctest::Approx(1.0));
    CHECK(*cohen_kappa(bits({0, 0}), bits({0, 0})) == 1.0);
    CHECK(*cohen_kappa(bits({1, 1}), bits({0, 0})) == 0.0);

    std::mt19937_64 rng(2);
    for (int t = 0; t < 100; ++t) {
        const auto x = testing::random_binary({7, 3, 2}, 0.5, rng).voxels;
        const auto y = testing::random_binary({7, 3, 2}, 0.5, rng).voxels;
        const auto k1 = cohen_kappa(x, y), k2 = cohen_kappa(y, x);
        REQUIRE(k1.has_value() == k2.has_value());
        if (k1) {
            CHECK(*k1 == doctest::Approx(*k2).epsilon(1e-12));
            CHECK(*k1 <= 1.0);
            CHECK(*k1 >= -1.0);
        }
    }
}

TEST_CASE("hausdorff: identity, shift and anisotropic spacing") {
    const Extents e{12, 10, 6};
    const BinaryVolume a = box(e, {2, 2, 1}, {6, 6, 4});
    CHECK(hausdorff_mm(a, a, {1, 1, 1}) == 0.0);
    const BinaryVolume shifted = box(e, {5, 2, 1}, {9, 6, 4});
    CHECK(hausdorff_mm(a, shifted, {0.5, 1, 1}) == doctest::Approx(1.5));
    const BinaryVolume up = box(e, {2, 2, 2}, {6, 6, 5});
    CHECK(hausdorff_mm(a, up, {0.7, 0.7, 2.5}) == doctest::Approx(2.5));
    CHECK_THROWS_AS(hausdorff_mm(a, box(e, {0, 0, 0}, {0, 0, 0}), {1, 1, 1}), DataError);
}

TEST_CASE("hausdorff matches an all-pairs oracle on boundary voxels and is symmetric") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 30; ++t) {
        const BinaryVolume a = testing::random_binary({6, 6, 4}, 0.3, rng);
        const BinaryVolume b = testing::random_binary({6, 6, 4}, 0.3, rng);
        if (a.count() == 0 || b.count() == 0) continue;
        const std::array<double, 3> sp{0.7, 0.9, 2.5};
        auto directed = [&](const BinaryVolume& from, const BinaryVolume& to) {
            double worst = 0.0;
            for (const auto& p : boundary_voxels(from)) {
                double best = INFINITY;
                for (const auto& q : boundary_voxels(to)) {
                    double s = 0.0;
                    for (int k = 0; k < 3; ++k) s += std::pow((double(p[k]) - double(q[k])) * sp[k], 2);
                    best = std::min(best, std::sqrt(s));
                }
                worst = std::max(worst, best);
            }
            return worst;
        };
        const double h = hausdorff_mm(a, b, sp);
        CHECK(h == doctest::Approx(std::max(directed(a, b), directed(b, a))).epsilon(1e-12));
        CHECK(h == hausdorff_mm(b, a, sp));
        CHECK(directed_hausdorff_mm(a, b, sp) == doctest::Approx(directed(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("boundary voxels of a solid box are its surface") {
    const BinaryVolume b = box({5, 5, 5}, {0, 0, 0}, {5, 5, 5});
    CHECK(boundary_voxels(b).size() == 125 - 27);
}

TEST_CASE("evaluation ignores slices without reference labels") {
    AnnotatedMask ref;
    ref.extents = {4, 4, 3};
    ref.voxels.assign(48, 0);
    ref.annotated_slices = {1};
    for (std::size_t i = 0; i < 4; ++i) ref.voxels[ref.index(i, 1, 1)] = 1;
    BinaryVolume pred{ref.extents, ref.voxels};
    for (std::size_t i = 0; i < 16; ++i) pred.voxels[i] = 1;  // slice 0 is unlabeled
    const ScanMetrics m = evaluate_scan(ref, pred, {1, 1, 1});
    CHECK(m.dice == 1.0);
    CHECK(m.dice_slice_mean == 1.0);
    CHECK(*m.hausdorff_mm == 0.0);
    CHECK(m.evaluated_slices == std::vector<std::size_t>{1});

    const ScanMetrics empty = evaluate_scan(ref, BinaryVolume{ref.extents, std::vector<std::uint8_t>(48, 0)}, {1, 1, 1});
    CHECK(empty.dice == 0.0);
    CHECK_FALSE(empty.hausdorff_mm.has_value());
}

TEST_CASE("report averages per regime and orientation and lays out a table") {
    MetricsReport r;
    r.add("7 axial", row("p08_axial", Orientation::axial, 0.9, 2.0));
    r.add("7 axial", row("p09_axial", Orientation::axial, 0.8, std::nullopt));
    r.add("7 axial", row("p08_coronal", Orientation::coronal, 0.5, 4.0));
    r.add("mixed", row("p08_axial", Orientation::axial, 0.95, 1.0));

    const auto avg = r.average("7 axial", Orientation::axial);
    REQUIRE(avg.has_value());
    CHECK(avg->scans == 2);
    CHECK(avg->dice == doctest::Approx(0.85));
    CHECK(*avg->hausdorff_mm == 2.0);
    CHECK_FALSE(r.average("mixed", Orientation::sagittal).has_value());
    CHECK(r.averages().size() == 3);

    const std::string table = r.to_table();
    std::istringstream lines(table);
    std::string header, first, second;
    std::getline(lines, header);
    std::getline(lines, first);
    std::getline(lines, second);
    CHECK(header.find("Training set composition") == 0);
    CHECK(header.find("Axial") < header.find("Coronal"));
    CHECK(header.find("Coronal") < header.find("Sagittal"));
    CHECK(first.find("7 axial") == 0);
    CHECK(first.find("0.85") != std::string::npos);
    CHECK(first.find("0.50") != std::string::npos);
    CHECK(first.back() == '-');
    CHECK(second.find("mixed") == 0);
    CHECK(second.find("0.95") != std::string::npos);

    const std::string records = r.to_records();
    CHECK(records.find("[scan p09_axial]") != std::string::npos);
    CHECK(records.find("hausdorff_mm=undefined") != std::string::npos);
    CHECK(records.find("[average mixed / axial]") != std::string::npos);
}
