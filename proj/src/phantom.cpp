#include "abdkit/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "abdkit/error.hpp"

namespace abdkit {

namespace {

bool inside(const EllipseRadii& e, double y, double x) {
    if (e.ry <= 0.0 || e.rx <= 0.0) return false;
    const double a = y / e.ry, b = x / e.rx;
    return a * a + b * b <= 1.0;
}

EllipseRadii shrink(const EllipseRadii& e, double t) { return {e.ry - t, e.rx - t}; }

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::vector<Blob> place_blobs(const PhantomSpec& spec, int slice, const EllipseRadii& core) {
    std::vector<Blob> blobs;
    const double margin = spec.blob_radius_mm + std::max(spec.spacing.sy, spec.spacing.sx);
    const EllipseRadii allowed = shrink(core, margin);
    if (spec.blob_count <= 0 || allowed.ry <= 0.0 || allowed.rx <= 0.0) return blobs;
    std::mt19937_64 rng(mix(spec.seed, static_cast<std::uint64_t>(slice) + 1));
    std::uniform_real_distribution<double> uy(-allowed.ry, allowed.ry), ux(-allowed.rx, allowed.rx);
    const double min_gap = 2.0 * spec.blob_radius_mm + 2.0 * std::max(spec.spacing.sy, spec.spacing.sx);
    for (int attempt = 0; attempt < 200 && static_cast<int>(blobs.size()) < spec.blob_count; ++attempt) {
        const Blob b{uy(rng), ux(rng), spec.blob_radius_mm};
        if (!inside(allowed, b.cy, b.cx)) continue;
        const bool clear = std::all_of(blobs.begin(), blobs.end(), [&](const Blob& o) {
            return std::hypot(o.cy - b.cy, o.cx - b.cx) >= min_gap;
        });
        if (clear) blobs.push_back(b);
    }
    return blobs;
}

}  // namespace

std::string to_string(PhantomFamily f) {
    return f == PhantomFamily::standard ? "standard" : "view_dependent";
}

PhantomFamily phantom_family_from_string(const std::string& s) {
    if (s == "standard") return PhantomFamily::standard;
    if (s == "view_dependent" || s == "view-dependent") return PhantomFamily::view_dependent;
    throw ValidationError("unknown phantom family '" + s + "'");
}

std::vector<EllipseRadii> default_radius_profile(const PhantomSpec& spec) {
    std::vector<EllipseRadii> out(static_cast<std::size_t>(spec.dims.d));
    const EllipseRadii r = spec.abdomen_radii;
    for (int k = 0; k < spec.dims.d; ++k) {
        const bool in_abdomen = k >= spec.abdomen_start && k <= spec.abdomen_end;
        if (spec.family == PhantomFamily::view_dependent) {
            out[static_cast<std::size_t>(k)] = in_abdomen ? r : EllipseRadii{r.rx, r.ry};
            continue;
        }
        if (in_abdomen) {
            const double span = std::max(1, spec.abdomen_end - spec.abdomen_start);
            const double f = 1.0 + 0.03 * std::sin(std::numbers::pi * (k - spec.abdomen_start) / span);
            out[static_cast<std::size_t>(k)] = {r.ry * f, r.rx * f};
        } else {
            const int dist = k < spec.abdomen_start ? spec.abdomen_start - k : k - spec.abdomen_end;
            const double f = std::max(0.5, 0.8 - 0.01 * dist);
            out[static_cast<std::size_t>(k)] = {r.ry * f, r.rx * f};
        }
    }
    return out;
}

SliceGeometry slice_geometry(const PhantomSpec& spec, int slice) {
    if (slice < 0 || slice >= spec.dims.d) throw RangeError("phantom slice out of range");
    const EllipseRadii body = spec.body_radius_profile.empty()
                                  ? default_radius_profile(spec)[static_cast<std::size_t>(slice)]
                                  : spec.body_radius_profile[static_cast<std::size_t>(slice)];
    const bool in_abdomen = slice >= spec.abdomen_start && slice <= spec.abdomen_end;
    SliceGeometry g;
    g.has_sfa = in_abdomen || spec.family == PhantomFamily::view_dependent;
    g.body = body;
    g.muscle_outer = g.has_sfa ? shrink(body, spec.sfa_thickness_mm) : body;
    g.muscle_inner = shrink(g.muscle_outer, spec.muscle_thickness_mm);
    g.core = shrink(g.muscle_inner, spec.lining_thickness_mm);
    if (in_abdomen && spec.family == PhantomFamily::standard) g.blobs = place_blobs(spec, slice, g.core);
    return g;
}

void validate(const PhantomSpec& spec) {
    if (spec.dims.d < 1 || spec.dims.h < 4 || spec.dims.w < 4) throw ValidationError("phantom dims too small");
    validate_spacing(spec.spacing);
    if (spec.abdomen_start < 0 || spec.abdomen_start > spec.abdomen_end || spec.abdomen_end >= spec.dims.d) {
        throw ValidationError("abdomen range must satisfy 0 <= start <= end < D");
    }
    if (!(spec.sfa_thickness_mm > 0) || !(spec.muscle_thickness_mm > 0) || !(spec.lining_thickness_mm > 0)) {
        throw ValidationError("tissue thicknesses must be positive");
    }
    if (!spec.body_radius_profile.empty() && static_cast<int>(spec.body_radius_profile.size()) != spec.dims.d) {
        throw ValidationError("body_radius_profile needs one entry per slice");
    }
    if (spec.noise_sigma_hu < 0) throw ValidationError("noise sigma must be >= 0");
    const double max_ry = (spec.dims.h - 1) / 2.0 * spec.spacing.sy;
    const double max_rx = (spec.dims.w - 1) / 2.0 * spec.spacing.sx;
    for (int k = 0; k < spec.dims.d; ++k) {
        const SliceGeometry g = slice_geometry(spec, k);
        if (g.body.ry > max_ry || g.body.rx > max_rx) {
            throw ValidationError("body ellipse of slice " + std::to_string(k) + " does not fit inside the grid");
        }
        if (g.core.ry <= 0 || g.core.rx <= 0) {
            throw ValidationError("tissue rings of slice " + std::to_string(k) + " leave no visceral core");
        }
    }
}

Phantom generate(const PhantomSpec& spec) {
    validate(spec);
    const Dims& n = spec.dims;
    std::vector<float> vox(n.count());
    std::vector<LabelMask> masks;
    masks.reserve(static_cast<std::size_t>(n.d));
    for (int k = 0; k < n.d; ++k) {
        const SliceGeometry g = slice_geometry(spec, k);
        LabelMask m(n.h, n.w);
        for (int r = 0; r < n.h; ++r) {
            const double y = pixel_y_mm(spec, r);
            for (int c = 0; c < n.w; ++c) {
                const double x = pixel_x_mm(spec, c);
                Tissue label = Tissue::background;
                float hu = spec.hu.air;
                if (!inside(g.body, y, x)) {
                    // air
                } else if (g.has_sfa && !inside(g.muscle_outer, y, x)) {
                    label = Tissue::sfa;
                    hu = spec.hu.fat;
                } else if (!inside(g.muscle_inner, y, x)) {
                    label = Tissue::muscle;
                    hu = spec.hu.muscle;
                } else if (!inside(g.core, y, x) ||
                           std::any_of(g.blobs.begin(), g.blobs.end(), [&](const Blob& b) {
                               return std::hypot(y - b.cy, x - b.cx) <= b.r;
                           })) {
                    label = Tissue::vfa;
                    hu = spec.hu.fat;
                } else {
                    hu = spec.hu.visceral;
                }
                m.at(r, c) = static_cast<std::uint8_t>(label);
                vox[static_cast<std::size_t>(k) * n.h * n.w + static_cast<std::size_t>(r) * n.w + c] = hu;
            }
        }
        masks.push_back(std::move(m));
    }
    if (spec.noise_sigma_hu > 0) {
        std::mt19937_64 rng(mix(spec.seed, 0xA5A5ull));
        std::normal_distribution<double> noise(0.0, spec.noise_sigma_hu);
        for (auto& v : vox) v = static_cast<float>(std::clamp(v + noise(rng), double{kMinHu}, double{kMaxHu}));
    }
    return {Volume(n, spec.spacing, std::move(vox)), {spec.abdomen_start, spec.abdomen_end}, std::move(masks)};
}

std::vector<CorpusCase> sample_corpus(int n, const PhantomSpec& base, const CorpusJitter& jitter, std::uint64_t seed) {
    if (n < 1) throw ValidationError("corpus size must be >= 1");
    std::mt19937_64 rng(seed);
    std::vector<int> start_perm(static_cast<std::size_t>(n)), end_perm(static_cast<std::size_t>(n));
    std::iota(start_perm.begin(), start_perm.end(), 0);
    std::iota(end_perm.begin(), end_perm.end(), 0);
    std::shuffle(start_perm.begin(), start_perm.end(), rng);
    std::shuffle(end_perm.begin(), end_perm.end(), rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    // stratum i of [-j, j] has width 2j/n; one draw per stratum
    auto stratified = [&](int j, int stratum) {
        return static_cast<int>(std::lround(-j + 2.0 * j * (stratum + u(rng)) / n));
    };
    std::vector<CorpusCase> out;
    for (int i = 0; i < n; ++i) {
        PhantomSpec s = base;
        s.body_radius_profile.clear();
        s.seed = mix(seed, static_cast<std::uint64_t>(i) + 17);
        const int ds = stratified(jitter.start_slices, start_perm[static_cast<std::size_t>(i)]);
        const int de = stratified(jitter.end_slices, end_perm[static_cast<std::size_t>(i)]);
        s.abdomen_start = std::clamp(base.abdomen_start + ds, 0, base.dims.d - 1);
        s.abdomen_end = std::clamp(base.abdomen_end + de, s.abdomen_start, base.dims.d - 1);
        const double f = 1.0 + jitter.radius_scale * (2.0 * u(rng) - 1.0);
        s.abdomen_radii = {base.abdomen_radii.ry * f, base.abdomen_radii.rx * f};
        char id[32];
        std::snprintf(id, sizeof id, "case_%03d", i);
        out.push_back({id, s, {s.abdomen_start, s.abdomen_end}});
    }
    return out;
}

nlohmann::json spec_to_json(const PhantomSpec& s) {
    nlohmann::json j = {
        {"dims", {s.dims.d, s.dims.h, s.dims.w}},
        {"spacing", {s.spacing.sz, s.spacing.sy, s.spacing.sx}},
        {"abdomen_start", s.abdomen_start},
        {"abdomen_end", s.abdomen_end},
        {"family", to_string(s.family)},
        {"abdomen_radii", {s.abdomen_radii.ry, s.abdomen_radii.rx}},
        {"sfa_thickness_mm", s.sfa_thickness_mm},
        {"muscle_thickness_mm", s.muscle_thickness_mm},
        {"lining_thickness_mm", s.lining_thickness_mm},
        {"blob_count", s.blob_count},
        {"blob_radius_mm", s.blob_radius_mm},
        {"hu", {{"air", s.hu.air}, {"fat", s.hu.fat}, {"muscle", s.hu.muscle}, {"visceral", s.hu.visceral}}},
        {"noise_sigma_hu", s.noise_sigma_hu},
        {"seed", s.seed},
    };
    if (!s.body_radius_profile.empty()) {
        auto& p = j["body_radius_profile"] = nlohmann::json::array();
        for (const auto& r : s.body_radius_profile) p.push_back({r.ry, r.rx});
    }
    return j;
}

PhantomSpec spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    try {
        const auto d = j.at("dims").get<std::array<int, 3>>();
        const auto sp = j.at("spacing").get<std::array<double, 3>>();
        s.dims = {d[0], d[1], d[2]};
        s.spacing = {sp[0], sp[1], sp[2]};
        s.abdomen_start = j.at("abdomen_start").get<int>();
        s.abdomen_end = j.at("abdomen_end").get<int>();
        s.family = phantom_family_from_string(j.value("family", "standard"));
        const auto r = j.at("abdomen_radii").get<std::array<double, 2>>();
        s.abdomen_radii = {r[0], r[1]};
        s.sfa_thickness_mm = j.at("sfa_thickness_mm").get<double>();
        s.muscle_thickness_mm = j.at("muscle_thickness_mm").get<double>();
        s.lining_thickness_mm = j.at("lining_thickness_mm").get<double>();
        s.blob_count = j.at("blob_count").get<int>();
        s.blob_radius_mm = j.at("blob_radius_mm").get<double>();
        const auto& hu = j.at("hu");
        s.hu = {hu.at("air").get<float>(), hu.at("fat").get<float>(), hu.at("muscle").get<float>(),
                hu.at("visceral").get<float>()};
        s.noise_sigma_hu = j.at("noise_sigma_hu").get<double>();
        s.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("body_radius_profile")) {
            for (const auto& e : j.at("body_radius_profile")) {
                const auto p = e.get<std::array<double, 2>>();
                s.body_radius_profile.push_back({p[0], p[1]});
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad phantom spec JSON: ") + e.what());
    }
    return s;
}

nlohmann::json generate_corpus(const std::filesystem::path& out_dir, int n, const PhantomSpec& base,
                               const CorpusJitter& jitter, std::uint64_t seed) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    nlohmann::json manifest = {{"version", 1}, {"family", to_string(base.family)}, {"cases", nlohmann::json::array()}};
    for (const auto& c : sample_corpus(n, base, jitter, seed)) {
        const Phantom p = generate(c.spec);
        const std::string vol_name = c.id + ".rawv";
        const std::string mask_name = c.id + "_mask.rawv";
        save_volume(out_dir / vol_name, p.volume);
        save_mask_stack(out_dir / mask_name, p.masks, p.volume.spacing());
        manifest["cases"].push_back({{"id", c.id},
                                     {"volume", vol_name},
                                     {"masks", mask_name},
                                     {"label", {{"start", c.label.start_idx}, {"end", c.label.end_idx}}},
                                     {"spec", spec_to_json(c.spec)}});
    }
    std::ofstream out(out_dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + out_dir.string());
    out << manifest.dump(2) << '\n';
    return manifest;
}

void validate_manifest(const nlohmann::json& m) {
    auto fail = [](const std::string& what) { throw ValidationError("manifest: " + what); };
    if (!m.is_object()) fail("not an object");
    if (!m.contains("version") || m["version"] != 1) fail("version must be 1");
    if (!m.contains("cases") || !m["cases"].is_array() || m["cases"].empty()) fail("cases must be a nonempty array");
    for (const auto& c : m["cases"]) {
        for (const char* key : {"id", "volume", "masks"}) {
            if (!c.contains(key) || !c[key].is_string()) fail(std::string("case field '") + key + "' must be a string");
        }
        if (!c.contains("label") || !c["label"].contains("start") || !c["label"].contains("end") ||
            !c["label"]["start"].is_number_integer() || !c["label"]["end"].is_number_integer()) {
            fail("case label needs integer start and end");
        }
        if (!c.contains("spec") || !c["spec"].is_object()) fail("case spec must be an object");
        const PhantomSpec s = spec_from_json(c["spec"]);
        validate_label({c["label"]["start"].get<int>(), c["label"]["end"].get<int>()}, s.dims.d);
    }
}

PhantomSpec toy_localization_spec(PhantomFamily family) {
    PhantomSpec s;
    s.dims = {128, 32, 32};
    s.spacing = {2.5, 10.0, 10.0};
    s.abdomen_start = 36;
    s.abdomen_end = 91;
    s.family = family;
    s.abdomen_radii = {100.0, 135.0};
    s.sfa_thickness_mm = 20.0;
    s.muscle_thickness_mm = 15.0;
    s.lining_thickness_mm = 10.0;
    s.blob_count = 3;
    s.blob_radius_mm = 12.0;
    return s;
}

}  // namespace abdkit
