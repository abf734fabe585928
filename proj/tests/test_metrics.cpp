#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"

#include "abdkit/error.hpp"
#include "abdkit/metrics.hpp"
#include "abdkit/phantom.hpp"

using namespace abdkit;

namespace {

using Mask = std::vector<std::uint8_t>;

Mask random_mask(std::mt19937& rng, int rows, int cols, double density) {
    std::bernoulli_distribution on(density);
    Mask m(static_cast<std::size_t>(rows) * cols);
    for (auto& v : m) v = on(rng);
    return m;
}

// Oracles written from the definitions, sharing nothing with the library.
double dice_oracle(const Mask& a, const Mask& b) {
    double inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] && b[i]) ? 1 : 0;
        sa += a[i] ? 1 : 0;
        sb += b[i] ? 1 : 0;
    }
    return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

double iou_oracle(const Mask& a, const Mask& b) {
    double inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] && b[i]) ? 1 : 0;
        uni += (a[i] || b[i]) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : inter / uni;
}

std::vector<std::pair<int, int>> edge_oracle(const Mask& m, int rows, int cols) {
    std::vector<std::pair<int, int>> out;
    auto get = [&](int r, int c) { return r >= 0 && c >= 0 && r < rows && c < cols && m[static_cast<std::size_t>(r * cols + c)]; };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (get(r, c) && (!get(r - 1, c) || !get(r + 1, c) || !get(r, c - 1) || !get(r, c + 1))) out.emplace_back(r, c);
        }
    }
    return out;
}

double directed_oracle(const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
                       double sy, double sx) {
    std::vector<double> d;
    for (auto [r, c] : from) {
        double best = std::numeric_limits<double>::infinity();
        for (auto [r2, c2] : to) best = std::min(best, std::hypot((r - r2) * sy, (c - c2) * sx));
        d.push_back(best);
    }
    std::sort(d.begin(), d.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(d.size()) - 1e-9));
    return d[rank - 1];
}

double hd95_oracle(const Mask& a, const Mask& b, int rows, int cols, double sy, double sx) {
    const auto ea = edge_oracle(a, rows, cols), eb = edge_oracle(b, rows, cols);
    return std::max(directed_oracle(ea, eb, sy, sx), directed_oracle(eb, ea, sy, sx));
}

}  // namespace

TEST_CASE("dice and iou hand cases") {
    Mask a(10, 0), b(10, 0);
    CHECK(dice(a, b) == 1.0);
    CHECK(iou(a, b) == 1.0);
    a[0] = 1;
    CHECK(dice(a, b) == 0.0);
    CHECK(iou(a, b) == 0.0);
    CHECK(dice(a, a) == 1.0);

    // |a| = 4, |b| = 6, |a n b| = 3, |a u b| = 7
    a = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
    b = {0, 1, 1, 1, 1, 1, 1, 0, 0, 0};
    CHECK(dice(a, b) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(iou(a, b) == doctest::Approx(3.0 / 7.0).epsilon(1e-15));
    CHECK_THROWS_AS(dice(a, Mask(9, 0)), ShapeError);
}

TEST_CASE("dice/iou/hd95 match brute-force oracles on 100 random 32x32 pairs") {
    for (unsigned seed = 0; seed < 100; ++seed) {
        std::mt19937 rng(seed);
        std::uniform_real_distribution<double> dens(0.05, 0.6), spc(0.5, 3.0);
        Mask a = random_mask(rng, 32, 32, dens(rng));
        Mask b = random_mask(rng, 32, 32, dens(rng));
        a[0] = 1;
        b[1023] = 1;
        const double sy = seed % 2 ? 1.0 : spc(rng), sx = seed % 2 ? 1.0 : spc(rng);
        const double d = dice(a, b), j = iou(a, b);
        REQUIRE(std::abs(d - dice_oracle(a, b)) <= 1e-9);
        REQUIRE(std::abs(j - iou_oracle(a, b)) <= 1e-9);
        REQUIRE(std::abs(d - 2 * j / (1 + j)) <= 1e-12);
        const double h = hd95(a, b, 32, 32, sy, sx);
        REQUIRE(std::abs(h - hd95_oracle(a, b, 32, 32, sy, sx)) <= 1e-9);
        // symmetry
        REQUIRE(dice(b, a) == d);
        REQUIRE(iou(b, a) == j);
        REQUIRE(hd95(b, a, 32, 32, sy, sx) == h);
    }
}

TEST_CASE("hd95 on sparse and blob masks vs oracle") {
    for (unsigned seed = 0; seed < 30; ++seed) {
        std::mt19937 rng(seed + 1000);
        std::uniform_int_distribution<int> pos(0, 39);
        Mask a(40 * 40, 0), b(40 * 40, 0);
        for (int i = 0; i < 3; ++i) {
            const int cy = pos(rng), cx = pos(rng), r = 1 + pos(rng) % 6;
            for (int y = 0; y < 40; ++y)
                for (int x = 0; x < 40; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) a[static_cast<std::size_t>(y * 40 + x)] = 1;
        }
        for (int i = 0; i < 5; ++i) b[static_cast<std::size_t>(pos(rng) * 40 + pos(rng))] = 1;
        REQUIRE(std::abs(hd95(a, b, 40, 40, 0.7, 1.9) - hd95_oracle(a, b, 40, 40, 0.7, 1.9)) <= 1e-9);
    }
}

TEST_CASE("hd95 fixtures and errors") {
    Mask a(4 * 5, 0), b(4 * 5, 0);
    a[0] = 1;            // (0, 0)
    b[3 * 5 + 4] = 1;    // (3, 4)
    CHECK(hd95(a, b, 4, 5, 1.0, 1.0) == 5.0);
    CHECK(hd95(a, a, 4, 5, 1.0, 1.0) == 0.0);
    CHECK_THROWS_AS(hd95(a, Mask(20, 0), 4, 5, 1.0, 1.0), UndefinedMetricError);
    CHECK_THROWS_AS(hd95(a, b, 5, 5, 1.0, 1.0), ShapeError);
    // anisotropic: 3 rows at 2 mm, 4 cols at 0.5 mm
    CHECK(hd95(a, b, 4, 5, 2.0, 0.5) == doctest::Approx(std::hypot(6.0, 2.0)).epsilon(1e-15));
}

TEST_CASE("metric invariances") {
    std::mt19937 rng(3);
    for (int t = 0; t < 20; ++t) {
        Mask a = random_mask(rng, 24, 24, 0.3), b = random_mask(rng, 24, 24, 0.3);
        a[100] = b[200] = 1;
        // identical permutation of both masks' pixels
        std::vector<std::size_t> perm(a.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Mask pa(a.size()), pb(b.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            pa[i] = a[perm[i]];
            pb[i] = b[perm[i]];
        }
        CHECK(dice(pa, pb) == dice(a, b));
        CHECK(iou(pa, pb) == iou(a, b));

        // rigid translation on a larger empty canvas
        Mask ta(40 * 40, 0), tb(40 * 40, 0);
        for (int r = 0; r < 24; ++r)
            for (int c = 0; c < 24; ++c) {
                ta[static_cast<std::size_t>((r + 9) * 40 + c + 5)] = a[static_cast<std::size_t>(r * 24 + c)];
                tb[static_cast<std::size_t>((r + 9) * 40 + c + 5)] = b[static_cast<std::size_t>(r * 24 + c)];
            }
        // boundary pixels on the 24x24 frame edge are edges only because of the grid;
        // compare on masks that do not touch the frame
        Mask ia(24 * 24, 0), ib(24 * 24, 0);
        for (int r = 1; r < 23; ++r)
            for (int c = 1; c < 23; ++c) {
                ia[static_cast<std::size_t>(r * 24 + c)] = a[static_cast<std::size_t>(r * 24 + c)];
                ib[static_cast<std::size_t>(r * 24 + c)] = b[static_cast<std::size_t>(r * 24 + c)];
            }
        ia[25] = ib[26] = 1;
        Mask sa(40 * 40, 0), sb(40 * 40, 0);
        for (int r = 0; r < 24; ++r)
            for (int c = 0; c < 24; ++c) {
                sa[static_cast<std::size_t>((r + 9) * 40 + c + 5)] = ia[static_cast<std::size_t>(r * 24 + c)];
                sb[static_cast<std::size_t>((r + 9) * 40 + c + 5)] = ib[static_cast<std::size_t>(r * 24 + c)];
            }
        CHECK(hd95(sa, sb, 40, 40, 1.3, 0.8) == doctest::Approx(hd95(ia, ib, 24, 24, 1.3, 0.8)).epsilon(1e-12));

        // nested a' = a n b inside b
        Mask nested(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) nested[i] = a[i] && b[i];
        const double na = static_cast<double>(std::count(nested.begin(), nested.end(), 1));
        const double nb = static_cast<double>(std::count(b.begin(), b.end(), 1));
        CHECK(dice(nested, b) == 2 * na / (na + nb));
    }
}

TEST_CASE("segmentation scores: per-slice and pooled, absent classes") {
    LabelMask t(8, 8), p(8, 8);
    for (int c = 0; c < 8; ++c) {
        t.at(1, c) = 1;
        p.at(1, c) = 1;
        t.at(5, c) = 2;
    }
    p.at(5, 0) = 2;
    const LabelMask empty(8, 8);
    const auto s = score_segmentation({t, empty}, {p, empty}, 1.0, 1.0, false);
    CHECK(s.aggregation == "per_slice_mean");
    CHECK(s.per_class[0].dsc == 1.0);
    CHECK(s.per_class[1].dsc == doctest::Approx((2.0 / 9.0 + 1.0) / 2));
    CHECK(s.per_class[2].dsc == 1.0);  // absent everywhere
    CHECK_FALSE(s.per_class[2].hd95.has_value());
    CHECK(s.per_class[0].hd95_slices == 1);
    const auto pooled = score_segmentation({t, empty}, {p, empty}, 1.0, 1.0, true);
    CHECK(pooled.per_class[1].dsc == doctest::Approx(2.0 / 9.0));

    LabelMask only(8, 8);
    only.at(0, 0) = 3;
    const auto u = score_segmentation({only}, {empty}, 1.0, 1.0, false);
    CHECK(u.per_class[2].hd95_undefined == 1);
    CHECK(u.per_class[2].dsc == 0.0);
    CHECK(to_json(u)["vfa"]["hd95_mm"].is_null());
    CHECK(format_seg_table(s).find("DSC") != std::string::npos);
}

TEST_CASE("localization table") {
    LocEvalInput exact{40, 40, 90, 90, 2.0, 2.0};
    auto t = loc_eval_table({exact, exact});
    CHECK(t.start.avg_mm == 0.0);
    CHECK(t.start.max_mm == 0.0);
    CHECK(t.start.pct_le_5mm == 100.0);
    CHECK(t.end.pct_le_10mm == 100.0);

    // start errors {2, 4, 12} mm with 1 mm spacing
    t = loc_eval_table({{12, 10, 0, 0, 1, 1}, {6, 10, 0, 0, 1, 1}, {22, 10, 0, 0, 1, 1}});
    CHECK(t.start.avg_mm == 6.0);
    CHECK(t.start.max_mm == 12.0);
    CHECK(t.start.pct_le_5mm == doctest::Approx(200.0 / 3));
    CHECK(t.start.pct_le_10mm == doctest::Approx(200.0 / 3));
    CHECK(format_loc_row(t.start) == "6.00 & 12.00 & 66.7% & 66.7%");

    // inclusive thresholds exactly at 5 and 10 mm
    const auto r = loc_eval_row({5.0, 10.0});
    CHECK(r.pct_le_5mm == 50.0);
    CHECK(r.pct_le_10mm == 100.0);
    CHECK_THROWS_AS(loc_eval_table({}), ContractError);

    // published reference row, used as a formatting fixture over 40 cases
    std::vector<double> errs{21.97, 20.0, 9.0, 8.0};
    const double rest = (3.08 * 40 - (21.97 + 20.0 + 9.0 + 8.0)) / 36;
    REQUIRE(rest <= 5.0);
    errs.resize(40, rest);
    CHECK(format_loc_row(loc_eval_row(errs)) == "3.08 & 21.97 & 90.0% & 95.0%");
}

TEST_CASE("quantify arithmetic") {
    const Dims d{10, 20, 20};
    std::vector<float> vox(d.count(), -100.0f);
    const Volume v(d, {5.0, 2.0, 2.0}, vox);
    std::vector<LabelMask> masks(10, LabelMask(20, 20));
    for (auto& m : masks)
        for (int i = 0; i < 100; ++i) m.labels[static_cast<std::size_t>(i)] = 1;
    masks[0].labels[300] = 2;

    const auto rep = quantify(masks, v);
    CHECK(rep.slices[3].area_cm2[0] == 4.0);
    CHECK(rep.volume_cm3[0] == 20.0);
    CHECK(rep.slices[0].area_cm2[1] == 0.04);
    CHECK(rep.slices[0].mean_hu[0] == -100.0);
    CHECK_FALSE(rep.slices[0].mean_hu[2].has_value());

    double sum = 0;
    for (const auto& s : rep.slices) sum += s.area_cm2[0] * 5.0 / 10.0;
    CHECK(std::abs(sum - rep.volume_cm3[0]) <= 1e-9);

    const auto zero = quantify(std::vector<LabelMask>(10, LabelMask(20, 20)), v);
    for (int k = 0; k < 3; ++k) {
        CHECK(zero.volume_cm3[static_cast<std::size_t>(k)] == 0.0);
        CHECK(zero.voxels[static_cast<std::size_t>(k)] == 0u);
    }
    CHECK_THROWS_AS(quantify(std::vector<LabelMask>(1, LabelMask(20, 21)), v), ShapeError);
    CHECK_THROWS_AS(quantify(masks, v, 1), RangeError);
}

TEST_CASE("quantification on phantoms: analytic ring areas and range additivity") {
    PhantomSpec s;
    s.dims = {16, 128, 128};
    s.abdomen_start = 4;
    s.abdomen_end = 11;
    s.noise_sigma_hu = 10;
    const Phantom p = generate(s);
    const auto rep = quantify(p.masks, p.volume);
    const double diag_cm = std::hypot(s.spacing.sy, s.spacing.sx) / 10.0;
    auto perim = [](double a, double b) {
        const double h = (a - b) * (a - b) / ((a + b) * (a + b));
        return std::numbers::pi * (a + b) * (1 + 3 * h / (10 + std::sqrt(4 - 3 * h)));
    };
    for (int k = s.abdomen_start; k <= s.abdomen_end; ++k) {
        const auto g = slice_geometry(s, k);
        const double ring_cm2 =
            std::numbers::pi * (g.muscle_outer.ry * g.muscle_outer.rx - g.muscle_inner.ry * g.muscle_inner.rx) / 100.0;
        const double band = (perim(g.muscle_outer.ry, g.muscle_outer.rx) + perim(g.muscle_inner.ry, g.muscle_inner.rx)) /
                            10.0 * diag_cm;
        CHECK(std::abs(rep.slices[static_cast<std::size_t>(k)].area_cm2[0] - ring_cm2) <= band);
    }

    for (int split : {1, 7, 15}) {
        const std::vector<LabelMask> lo(p.masks.begin(), p.masks.begin() + split);
        const std::vector<LabelMask> hi(p.masks.begin() + split, p.masks.end());
        const auto a = quantify(lo, p.volume, 0);
        const auto b = quantify(hi, p.volume, split);
        CHECK(combine(a, b) == rep);
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(a.voxels[k] + b.voxels[k] == rep.voxels[k]);
            CHECK(std::abs(a.volume_cm3[k] + b.volume_cm3[k] - rep.volume_cm3[k]) <= 1e-12 * rep.volume_cm3[k]);
        }
    }
    CHECK_THROWS_AS(combine(rep, rep), ValidationError);
}

TEST_CASE("report export: JSON round trip and CSV format") {
    PhantomSpec s;
    s.dims = {6, 64, 64};
    s.spacing = {3.0, 4.0, 4.0};
    s.abdomen_start = 1;
    s.abdomen_end = 4;
    s.abdomen_radii = {90.0, 110.0};
    s.noise_sigma_hu = 7.5;
    const Phantom p = generate(s);
    const auto rep = quantify(p.masks, p.volume);
    testing::TempDir dir;
    export_report(rep, ReportFormat::json, dir / "r.json");
    std::ifstream in(dir / "r.json");
    CHECK(report_from_json(nlohmann::json::parse(in)) == rep);

    export_report(rep, ReportFormat::csv, dir / "r.csv");
    std::ifstream csv(dir / "r.csv");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(csv, line)) lines.push_back(line);
    REQUIRE(lines.size() == 7);
    CHECK(lines[0] == "slice_index,muscle_cm2,sfa_cm2,vfa_cm2,muscle_hu,sfa_hu,vfa_hu");
    // 6 significant digits, '.' separator
    std::istringstream row(lines[2]);
    std::string cell;
    std::getline(row, cell, ',');
    CHECK(cell == "1");
    std::getline(row, cell, ',');
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", rep.slices[1].area_cm2[0]);
    CHECK(cell == buf);
    for (const auto& l : lines) CHECK(l.find(';') == std::string::npos);

    LabelMask m(2, 2);
    const Volume tiny({1, 2, 2}, {1, 1, 1}, std::vector<float>(4, 0.0f));
    CHECK(report_csv(quantify({m}, tiny)) ==
          "slice_index,muscle_cm2,sfa_cm2,vfa_cm2,muscle_hu,sfa_hu,vfa_hu\n0,0,0,0,,,\n");
    m.labels = {1, 1, 1, 2};
    CHECK(report_csv(quantify({m}, tiny)).ends_with("0,0.03,0.01,0,0,0,\n"));
    CHECK_THROWS_AS(export_report(rep, ReportFormat::csv, dir / "missing" / "r.csv"), IoError);
}
