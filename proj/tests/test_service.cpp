#include <atomic>
#include <cmath>
#include <random>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "test_util.hpp"

#include "abdkit/phantom.hpp"
#include "abdkit/png.hpp"
#include "abdkit/service.hpp"
#include "abdkit/study.hpp"

using namespace abdkit;
using nlohmann::json;

namespace {

PhantomSpec small_phantom() {
    PhantomSpec s;
    s.dims = {12, 64, 64};
    s.spacing = {5.0, 4.0, 4.0};
    s.abdomen_start = 3;
    s.abdomen_end = 8;
    s.abdomen_radii = {90, 110};
    s.noise_sigma_hu = 10.0;
    return s;
}

// Distance from a pixel centre to segment ab, from the endpoint distances and the
// perpendicular distance when the foot of the perpendicular falls inside the segment.
bool near_polyline(double px, double py, const std::vector<std::array<double, 2>>& pts, double r) {
    auto d2 = [](double ax, double ay, double bx, double by) { return (ax - bx) * (ax - bx) + (ay - by) * (ay - by); };
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (d2(px, py, pts[i][0], pts[i][1]) <= r * r) return true;
        if (i + 1 == pts.size()) break;
        const double ax = pts[i][0], ay = pts[i][1], bx = pts[i + 1][0], by = pts[i + 1][1];
        const double len2 = d2(ax, ay, bx, by);
        if (len2 == 0) continue;
        const double dot_a = (px - ax) * (bx - ax) + (py - ay) * (by - ay);
        const double dot_b = (px - bx) * (ax - bx) + (py - by) * (ay - by);
        if (dot_a < 0 || dot_b < 0) continue;
        const double cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        if (cross * cross <= r * r * len2 * (1 + 1e-12)) return true;
    }
    return false;
}

// A 5 x 5 block painted as five one-row strokes of radius 0.5.
EditBatch block_edit(long base, int slice, int top, int left, int label) {
    EditBatch b;
    b.base_version = base;
    b.slice_index = slice;
    for (int r = 0; r < 5; ++r) {
        b.strokes.push_back({label, 0.5, {{double(left), double(top + r)}, {double(left + 4), double(top + r)}}});
    }
    return b;
}

struct Running {
    explicit Running(const std::filesystem::path& root) : service(ServiceOptions{root, {}}) {
        port = service.bind_any_port("127.0.0.1");
        REQUIRE(port > 0);
        thread = std::thread([this] { service.run(); });
        service.wait_until_ready();
    }
    ~Running() {
        service.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(30, 0);
        return c;
    }

    Service service;
    int port = 0;
    std::thread thread;
};

}  // namespace

TEST_CASE("png round trip") {
    std::vector<std::uint8_t> px(6 * 5);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 8);
    const std::string gray = png::encode_gray(6, 5, px);
    const auto g = png::decode({reinterpret_cast<const std::uint8_t*>(gray.data()), gray.size()});
    CHECK(g.rows == 6);
    CHECK(g.cols == 5);
    CHECK_FALSE(g.indexed);
    CHECK(g.pixels == px);

    std::vector<std::uint8_t> labels{0, 1, 2, 3, 3, 2};
    const std::string idx = png::encode_indexed(2, 3, labels, kMaskPalette);
    const auto m = png::decode({reinterpret_cast<const std::uint8_t*>(idx.data()), idx.size()});
    CHECK(m.indexed);
    CHECK(m.pixels == labels);
    REQUIRE(m.palette.size() == 4);
    CHECK(m.palette[0].a == 0);
    CHECK(m.palette[1].r == 255);
    CHECK(m.palette[3].b == 255);

    labels[0] = 4;
    CHECK_THROWS_AS(png::encode_indexed(2, 3, labels, kMaskPalette), RangeError);
    const std::string junk = "\x89PNG\r\n\x1a\n garbage";
    CHECK_THROWS_AS(png::decode({reinterpret_cast<const std::uint8_t*>(junk.data()), junk.size()}), FormatError);
}

TEST_CASE("round brush rasterization") {
    LabelMask m(9, 9);
    CHECK(rasterize_stroke(m, {1, 2.0, {{4, 4}}}) == 13);
    CHECK(m.at(4, 6) == 1);
    CHECK(m.at(5, 5) == 1);
    CHECK(m.at(6, 6) == 0);
    CHECK(m.count(Tissue::muscle) == 13);
    CHECK(rasterize_stroke(m, {1, 2.0, {{4, 4}}}) == 0);  // already painted

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> coord(0.0, 31.0), rad(0.3, 4.0);
    std::uniform_int_distribution<int> npts(1, 5), lab(0, 3);
    for (int trial = 0; trial < 200; ++trial) {
        Stroke s{lab(rng), rad(rng), {}};
        const int n = npts(rng);
        for (int i = 0; i < n; ++i) s.points.push_back({coord(rng), coord(rng)});
        LabelMask a(32, 32);
        for (auto& v : a.labels) v = static_cast<std::uint8_t>((lab(rng) + 1) % 4);
        const LabelMask before = a;
        const std::size_t changed = rasterize_stroke(a, s);
        std::size_t expect_changed = 0;
        for (int r = 0; r < 32; ++r) {
            for (int c = 0; c < 32; ++c) {
                const bool in = near_polyline(c, r, s.points, s.brush_radius_px);
                const std::uint8_t want = in ? static_cast<std::uint8_t>(s.label) : before.at(r, c);
                expect_changed += want != before.at(r, c);
                REQUIRE(a.at(r, c) == want);
            }
        }
        CHECK(changed == expect_changed);
    }
}

TEST_CASE("edit batch parsing") {
    const json good = {{"base_version", 2},
                       {"slice_index", 1},
                       {"strokes", {{{"label", 1}, {"brush_radius_px", 1.5}, {"points", {{1, 2}, {3.5, 4}}}}}}};
    const EditBatch b = parse_edit_batch(good);
    CHECK(b.base_version == 2);
    CHECK(b.strokes.at(0).points.at(1)[0] == 3.5);
    CHECK(parse_edit_batch(to_json(b)) == b);

    try {
        const json bad = json::parse(
            R"({"base_version": -1, "strokes": [{"label": 9, "brush_radius_px": 0, "points": [[1]]}]})");
        parse_edit_batch(bad);
        FAIL("expected rejection");
    } catch (const EditRejected& e) {
        std::vector<std::string> fields;
        for (const auto& f : e.errors()) fields.push_back(f.field);
        CHECK(fields == std::vector<std::string>{"base_version", "slice_index", "strokes[0].label",
                                                 "strokes[0].brush_radius_px", "strokes[0].points[0]"});
    }
    CHECK_THROWS_AS(parse_edit_batch(json::array()), EditRejected);
    CHECK_THROWS_AS(parse_edit_batch({{"base_version", 0}, {"slice_index", 0}, {"strokes", json::array()}}), EditRejected);

    EditBatch oob = b;
    oob.strokes[0].points[1] = {8.0, 2.0};
    CHECK_NOTHROW(check_bounds(b, {2, 8, 8}));
    CHECK_THROWS_AS(check_bounds(oob, {2, 8, 8}), EditRejected);
    oob = b;
    oob.slice_index = 2;
    CHECK_THROWS_AS(check_bounds(oob, {2, 8, 8}), EditRejected);
}

TEST_CASE("study: edits, atomicity, replay, persistence") {
    testing::TempDir root;
    const Phantom p = generate(small_phantom());
    auto study = create_study(root.path(), "s1", p.volume, {Localization{3, 8, "manual"}, {}, {}});
    CHECK(study->snapshot()->version == 0);
    CHECK(study->snapshot()->masks[0].count(Tissue::background) == 64u * 64u);  // outside the localized range
    CHECK(study->snapshot()->masks[5].count(Tissue::muscle) > 0);
    CHECK_THROWS_AS(create_study(root.path(), "s1", p.volume), ValidationError);
    CHECK_THROWS_AS(create_study(root.path(), "../x", p.volume), ValidationError);

    const TissueReport r0 = study->report();
    // corner block is air in every slice
    CHECK(study->apply(block_edit(0, 5, 0, 0, 1)) == 1);
    const TissueReport r1 = study->report();
    CHECK(r1.slices[5].pixels[0] == r0.slices[5].pixels[0] + 25);
    CHECK(r1.slices[5].area_cm2[0] - r0.slices[5].area_cm2[0] == 25 * 4.0 * 4.0 / 100);

    CHECK_THROWS_AS(study->apply(block_edit(0, 5, 10, 10, 2)), VersionConflict);
    EditBatch half = block_edit(1, 5, 10, 10, 2);
    half.strokes.push_back({3, 1.0, {{70.0, 3.0}}});
    const auto before = study->snapshot();
    CHECK_THROWS_AS(study->apply(half), EditRejected);
    CHECK(study->snapshot() == before);
    CHECK(study->snapshot()->version == 1);

    CHECK(study->apply(block_edit(1, 6, 20, 30, 3)) == 2);
    CHECK(study->resegment() == 3);
    CHECK(study->apply(block_edit(3, 4, 50, 50, 0)) == 4);
    CHECK(study->replay() == study->snapshot()->masks);

    const auto reopened = Study::open(root / "s1");
    CHECK(reopened->snapshot()->version == 4);
    CHECK(reopened->snapshot()->masks == study->snapshot()->masks);
    CHECK(reopened->localization() == study->localization());

    StudyStore store(root.path());
    CHECK(store.ids() == std::vector<std::string>{"s1"});
    CHECK(store.get("nope") == nullptr);
    CHECK(store.get("s1") != nullptr);
}

TEST_CASE("mask planes and windowing") {
    std::vector<LabelMask> masks(3, LabelMask(4, 5));
    masks[1].at(2, 3) = 2;
    const LabelMask cor = mask_plane(masks, Plane::coronal, 2);
    CHECK(cor.rows == 3);
    CHECK(cor.cols == 5);
    CHECK(cor.at(1, 3) == 2);
    const LabelMask sag = mask_plane(masks, Plane::sagittal, 3);
    CHECK(sag.cols == 4);
    CHECK(sag.at(1, 2) == 2);
    CHECK_THROWS_AS(mask_plane(masks, Plane::axial, 3), RangeError);

    ViewSlice2D s;
    s.rows = 1;
    s.cols = 4;
    s.pixels = {-1000.0f, -160.0f, 40.0f, 500.0f};
    CHECK(window_to_u8(s, {40, 400}) == std::vector<std::uint8_t>{0, 0, 128, 255});
}

TEST_CASE("http api") {
    testing::TempDir root;
    const Phantom p = generate(small_phantom());
    create_study(root.path(), "case-a", p.volume, {Localization{3, 8, "model"}, {}, {}});
    Running srv(root.path());
    auto cli = srv.client();

    auto res = cli.Get("/api/studies");
    REQUIRE(res);
    CHECK(res->status == 200);
    const json list = json::parse(res->body);
    REQUIRE(list.size() == 1);
    CHECK(list[0]["id"] == "case-a");

    res = cli.Get("/api/studies/case-a");
    REQUIRE(res);
    const json info = json::parse(res->body);
    CHECK(info["dims"] == json({12, 64, 64}));
    CHECK(info["spacing"] == json({5.0, 4.0, 4.0}));
    CHECK(info["localization"]["start"] == 3);
    CHECK(info["mask_version"] == 0);
    CHECK(cli.Get("/api/studies/missing")->status == 404);
    CHECK(cli.Get("/api/studies/missing/report")->status == 404);

    res = cli.Get("/api/studies/case-a/slice?plane=coronal&index=32&window=40,400");
    REQUIRE(res);
    CHECK(res->status == 200);
    const auto img = png::decode({reinterpret_cast<const std::uint8_t*>(res->body.data()), res->body.size()});
    CHECK(img.rows == 12);
    CHECK(img.cols == 64);
    CHECK(img.pixels == window_to_u8(extract_plane(p.volume, Plane::coronal, 32), {40, 400}));
    CHECK(cli.Get("/api/studies/case-a/slice?plane=axial&index=12")->status == 422);
    CHECK(cli.Get("/api/studies/case-a/slice?plane=oblique&index=1")->status == 422);
    CHECK(cli.Get("/api/studies/case-a/slice?index=1&window=40")->status == 422);
    CHECK(cli.Get("/api/studies/case-a/slice?index=x")->status == 422);

    res = cli.Get("/api/studies/case-a/mask?plane=axial&index=5&format=raw");
    REQUIRE(res);
    CHECK(res->get_header_value("X-Mask-Version") == "0");
    const auto study = srv.service.store().get("case-a");
    const auto& m5 = study->snapshot()->masks[5];
    CHECK(res->body == std::string(m5.labels.begin(), m5.labels.end()));
    res = cli.Get("/api/studies/case-a/mask?plane=sagittal&index=30");
    REQUIRE(res);
    const auto mimg = png::decode({reinterpret_cast<const std::uint8_t*>(res->body.data()), res->body.size()});
    CHECK(mimg.indexed);
    CHECK(mimg.pixels == mask_plane(study->snapshot()->masks, Plane::sagittal, 30).labels);

    // report delta after painting 25 background pixels as muscle
    const json rep0 = json::parse(cli.Get("/api/studies/case-a/report")->body);
    res = cli.Post("/api/studies/case-a/edits", to_json(block_edit(0, 5, 0, 0, 1)).dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["new_version"] == 1);
    const json rep1 = json::parse(cli.Get("/api/studies/case-a/report")->body);
    const TissueReport a = report_from_json(rep0), b = report_from_json(rep1);
    CHECK(b.slices[5].area_cm2[0] - a.slices[5].area_cm2[0] == 25 * 4.0 * 4.0 / 100);
    CHECK(b.voxels[0] == a.voxels[0] + 25);
    CHECK(rep1 == to_json(study->report()));

    res = cli.Post("/api/studies/case-a/edits", R"({"base_version": 1, "slice_index": 5, "strokes": [{"label": 7}]})",
                   "application/json");
    REQUIRE(res);
    CHECK(res->status == 422);
    CHECK(json::parse(res->body)["errors"].size() == 3);  // label, radius, points
    CHECK(cli.Post("/api/studies/case-a/edits", "{nope", "application/json")->status == 422);
    CHECK(cli.Post("/api/studies/case-a/edits", to_json(block_edit(1, 5, 0, 62, 2)).dump(), "application/json")->status ==
          422);  // runs off the right edge
    CHECK(study->snapshot()->version == 1);

    res = cli.Post("/api/studies/case-a/resegment", "", "application/json");
    REQUIRE(res);
    CHECK(json::parse(res->body)["new_version"] == 2);
    CHECK(study->replay() == study->snapshot()->masks);
}

TEST_CASE("http api: concurrent edits on the same base version") {
    testing::TempDir root;
    create_study(root.path(), "c", generate(small_phantom()).volume, {Localization{3, 8, "model"}, {}, {}});
    Running srv(root.path());
    for (long round = 0; round < 10; ++round) {
        std::atomic<int> ok{0}, conflict{0}, other{0};
        auto post = [&](int label) {
            auto cli = srv.client();
            const auto res = cli.Post("/api/studies/c/edits", to_json(block_edit(round, 4, 20, 20, label)).dump(),
                                      "application/json");
            if (res && res->status == 200) ++ok;
            else if (res && res->status == 409) ++conflict;
            else ++other;
        };
        std::thread t1(post, 1), t2(post, 2);
        t1.join();
        t2.join();
        CHECK(ok == 1);
        CHECK(conflict == 1);
        CHECK(other == 0);
    }
    const auto study = srv.service.store().get("c");
    CHECK(study->snapshot()->version == 10);
    CHECK(study->replay() == study->snapshot()->masks);
}
