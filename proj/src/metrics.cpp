#include "icvseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "icvseg/error.hpp"
#include "icvseg/keyvalue.hpp"

namespace icvseg {

namespace {

void require_same_size(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("masks differ in size: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
}

std::string optional_text(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string("undefined");
}

std::string fixed(double v, int digits) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    require_same_size(a, b);
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] != 0;
        nb += b[i] != 0;
        both += a[i] && b[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(both) / double(na + nb);
}

std::optional<double> cohen_kappa(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    require_same_size(a, b);
    if (a.empty()) throw std::invalid_argument("kappa over an empty domain");
    double table[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < a.size(); ++i) table[a[i] != 0][b[i] != 0] += 1.0;
    const double n = double(a.size());
    const double p_o = (table[0][0] + table[1][1]) / n;
    const double pa = (table[1][0] + table[1][1]) / n;
    const double pb = (table[0][1] + table[1][1]) / n;
    const double p_e = pa * pb + (1.0 - pa) * (1.0 - pb);
    if (p_e >= 1.0) {
        if (p_o >= 1.0) return 1.0;
        return std::nullopt;
    }
    return (p_o - p_e) / (1.0 - p_e);
}

std::vector<std::array<std::size_t, 3>> boundary_voxels(const BinaryVolume& mask) {
    const auto [nx, ny, nz] = mask.extents;
    auto inside = [&](std::ptrdiff_t x, std::ptrdiff_t y, std::ptrdiff_t z) {
        if (x < 0 || y < 0 || z < 0 || x >= std::ptrdiff_t(nx) || y >= std::ptrdiff_t(ny) || z >= std::ptrdiff_t(nz))
            return false;
        return mask.voxels[std::size_t(x) + nx * (std::size_t(y) + ny * std::size_t(z))] != 0;
    };
    std::vector<std::array<std::size_t, 3>> out;
    for (std::size_t z = 0; z < nz; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                const auto px = std::ptrdiff_t(x), py = std::ptrdiff_t(y), pz = std::ptrdiff_t(z);
                if (!inside(px, py, pz)) continue;
                if (!inside(px - 1, py, pz) || !inside(px + 1, py, pz) || !inside(px, py - 1, pz) ||
                    !inside(px, py + 1, pz) || !inside(px, py, pz - 1) || !inside(px, py, pz + 1))
                    out.push_back({x, y, z});
            }
    return out;
}

double directed_hausdorff_mm(const BinaryVolume& from, const BinaryVolume& to, const std::array<double, 3>& spacing) {
    if (from.extents != to.extents) throw std::invalid_argument("hausdorff: masks differ in extents");
    const auto src = boundary_voxels(from);
    const auto dst = boundary_voxels(to);
    if (src.empty() || dst.empty()) throw DataError("hausdorff distance of an empty mask is undefined");
    double worst = 0.0;
    for (const auto& p : src) {
        double nearest = std::numeric_limits<double>::infinity();
        for (const auto& q : dst) {
            double d2 = 0.0;
            for (std::size_t a = 0; a < 3; ++a) {
                const double d = (double(p[a]) - double(q[a])) * spacing[a];
                d2 += d * d;
            }
            nearest = std::min(nearest, d2);
            if (nearest <= worst) break;  // cannot raise the maximum any more
        }
        worst = std::max(worst, nearest);
    }
    return std::sqrt(worst);
}

double hausdorff_mm(const BinaryVolume& a, const BinaryVolume& b, const std::array<double, 3>& spacing) {
    return std::max(directed_hausdorff_mm(a, b, spacing), directed_hausdorff_mm(b, a, spacing));
}

ScanMetrics evaluate_scan(const AnnotatedMask& reference, const BinaryVolume& prediction,
                          const std::array<double, 3>& spacing) {
    if (reference.extents != prediction.extents) throw DataError("prediction extents differ from the reference");
    if (reference.annotated_slices.empty()) throw DataError("reference has no annotated slices");
    const std::size_t plane = reference.extents[0] * reference.extents[1];

    std::vector<std::uint8_t> ref_domain, pred_domain;
    BinaryVolume ref_restricted{reference.extents, std::vector<std::uint8_t>(reference.voxels.size(), 0)};
    BinaryVolume pred_restricted = ref_restricted;
    ScanMetrics m;
    m.evaluated_slices = reference.annotated_slices;
    double slice_dice_sum = 0.0;
    for (std::size_t z : reference.annotated_slices) {
        const auto begin = std::ptrdiff_t(z * plane);
        std::span<const std::uint8_t> r(reference.voxels.data() + begin, plane);
        std::span<const std::uint8_t> p(prediction.voxels.data() + begin, plane);
        ref_domain.insert(ref_domain.end(), r.begin(), r.end());
        for (std::uint8_t v : p) pred_domain.push_back(v != 0);
        std::copy(r.begin(), r.end(), ref_restricted.voxels.begin() + begin);
        std::copy(pred_domain.end() - std::ptrdiff_t(plane), pred_domain.end(), pred_restricted.voxels.begin() + begin);
        slice_dice_sum += dice(r, std::span<const std::uint8_t>(pred_domain.data() + pred_domain.size() - plane, plane));
    }
    m.dice = dice(ref_domain, pred_domain);
    m.dice_slice_mean = slice_dice_sum / double(reference.annotated_slices.size());
    m.kappa = cohen_kappa(ref_domain, pred_domain);
    if (ref_restricted.count() > 0 && pred_restricted.count() > 0)
        m.hausdorff_mm = hausdorff_mm(ref_restricted, pred_restricted, spacing);
    return m;
}

void MetricsReport::add(const std::string& regime, ScanMetrics metrics) {
    rows_.emplace_back(regime, std::move(metrics));
}

std::vector<GroupAverage> MetricsReport::averages() const {
    std::vector<GroupAverage> groups;
    std::vector<std::size_t> hd_count, kappa_count;
    for (const auto& [regime, m] : rows_) {
        auto it = std::find_if(groups.begin(), groups.end(), [&](const GroupAverage& g) {
            return g.regime == regime && g.orientation == m.orientation;
        });
        if (it == groups.end()) {
            groups.push_back({regime, m.orientation, 0, 0.0, std::nullopt, std::nullopt});
            hd_count.push_back(0);
            kappa_count.push_back(0);
            it = groups.end() - 1;
        }
        const std::size_t g = std::size_t(it - groups.begin());
        ++it->scans;
        it->dice += m.dice;
        if (m.hausdorff_mm) {
            it->hausdorff_mm = it->hausdorff_mm.value_or(0.0) + *m.hausdorff_mm;
            ++hd_count[g];
        }
        if (m.kappa) {
            it->kappa = it->kappa.value_or(0.0) + *m.kappa;
            ++kappa_count[g];
        }
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
        groups[g].dice /= double(groups[g].scans);
        if (groups[g].hausdorff_mm) *groups[g].hausdorff_mm /= double(hd_count[g]);
        if (groups[g].kappa) *groups[g].kappa /= double(kappa_count[g]);
    }
    return groups;
}

std::optional<GroupAverage> MetricsReport::average(const std::string& regime, Orientation orientation) const {
    for (const auto& g : averages())
        if (g.regime == regime && g.orientation == orientation) return g;
    return std::nullopt;
}

std::string MetricsReport::to_records() const {
    std::ostringstream os;
    for (const auto& [regime, m] : rows_) {
        KeyValues kv;
        kv.set("regime", regime);
        kv.set("patient_id", m.patient_id);
        kv.set("orientation", std::string(to_string(m.orientation)));
        kv.set("dice", format_double(m.dice));
        kv.set("dice_slice_mean", format_double(m.dice_slice_mean));
        kv.set("hausdorff_mm", optional_text(m.hausdorff_mm));
        kv.set("kappa", optional_text(m.kappa));
        kv.set("evaluated_slices", join_uints(m.evaluated_slices));
        os << "[scan " << m.scan_id << "]\n" << kv.to_string() << "\n";
    }
    for (const auto& g : averages()) {
        KeyValues kv;
        kv.set("scans", std::to_string(g.scans));
        kv.set("dice", format_double(g.dice));
        kv.set("hausdorff_mm", optional_text(g.hausdorff_mm));
        kv.set("kappa", optional_text(g.kappa));
        os << "[average " << g.regime << " / " << to_string(g.orientation) << "]\n" << kv.to_string() << "\n";
    }
    return os.str();
}

std::string MetricsReport::to_table() const {
    const auto groups = averages();
    std::vector<std::string> regimes;
    for (const auto& g : groups)
        if (std::find(regimes.begin(), regimes.end(), g.regime) == regimes.end()) regimes.push_back(g.regime);
    std::size_t width = std::string("Training set composition").size();
    for (const auto& r : regimes) width = std::max(width, r.size());

    std::ostringstream os;
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
    auto right = [](const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };
    os << pad("Training set composition", width) << right("Axial", 10) << right("Coronal", 10) << right("Sagittal", 10)
       << "\n";
    for (const auto& r : regimes) {
        os << pad(r, width);
        for (Orientation o : kOrientations) {
            auto it = std::find_if(groups.begin(), groups.end(),
                                   [&](const GroupAverage& g) { return g.regime == r && g.orientation == o; });
            os << right(it == groups.end() ? "-" : fixed(it->dice, 2), 10);
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace icvseg
