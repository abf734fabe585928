#include "abdkit/segment.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "abdkit/error.hpp"

namespace abdkit {

using morph::Binary;
using morph::Connectivity;

void validate(const SegParams& p) {
    if (p.fat_range.lo > p.fat_range.hi || p.muscle_range.lo > p.muscle_range.hi) {
        throw ConfigError("HU ranges must have lo <= hi");
    }
    if (p.fat_range.lo <= p.muscle_range.hi && p.muscle_range.lo <= p.fat_range.hi) {
        throw ConfigError("fat_range and muscle_range overlap");
    }
    if (!(p.closing_radius_mm > 0)) throw ConfigError("closing_radius_mm must be > 0");
    if (p.min_component_mm2 < 0) throw ConfigError("min_component_mm2 must be >= 0");
}

nlohmann::json to_json(const SegParams& p) {
    return {{"fat_range", {p.fat_range.lo, p.fat_range.hi}},
            {"muscle_range", {p.muscle_range.lo, p.muscle_range.hi}},
            {"body_threshold", p.body_threshold},
            {"closing_radius_mm", p.closing_radius_mm},
            {"min_component_mm2", p.min_component_mm2}};
}

SegParams seg_params_from_json(const nlohmann::json& j) {
    SegParams p;
    try {
        if (j.contains("fat_range")) p.fat_range = {j["fat_range"].at(0).get<double>(), j["fat_range"].at(1).get<double>()};
        if (j.contains("muscle_range")) {
            p.muscle_range = {j["muscle_range"].at(0).get<double>(), j["muscle_range"].at(1).get<double>()};
        }
        p.body_threshold = j.value("body_threshold", p.body_threshold);
        p.closing_radius_mm = j.value("closing_radius_mm", p.closing_radius_mm);
        p.min_component_mm2 = j.value("min_component_mm2", p.min_component_mm2);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad segmentation parameters: ") + e.what());
    }
    validate(p);
    return p;
}

BodyMask body_mask(const ViewSlice2D& slice, const SegParams& params) {
    Binary above(slice.rows, slice.cols);
    for (std::size_t i = 0; i < above.px.size(); ++i) above.px[i] = slice.pixels[i] > params.body_threshold;
    BodyMask out;
    out.empty = above.count() == 0;
    if (out.empty) {
        out.mask = above;
        return out;
    }
    out.mask = morph::fill_holes(morph::largest_component(above, Connectivity::eight));
    return out;
}

SliceSegmentation segment_slice(const ViewSlice2D& slice, const SegParams& params) {
    validate(params);
    if (slice.pixels.size() != static_cast<std::size_t>(slice.rows) * slice.cols) {
        throw ShapeError("slice pixel count does not match rows x cols");
    }
    SliceSegmentation result;
    result.mask = LabelMask(slice.rows, slice.cols);
    const BodyMask body = body_mask(slice, params);
    if (body.empty) {
        result.degenerate = true;
        return result;
    }
    const int rows = slice.rows, cols = slice.cols;
    Binary fat(rows, cols), muscle_raw(rows, cols);
    for (std::size_t i = 0; i < fat.px.size(); ++i) {
        if (!body.mask.px[i]) continue;
        fat.px[i] = params.fat_range.contains(slice.pixels[i]);
        muscle_raw.px[i] = params.muscle_range.contains(slice.pixels[i]);
    }
    const double px_area = slice.row_spacing * slice.col_spacing;
    const auto min_px = static_cast<std::size_t>(std::ceil(params.min_component_mm2 / px_area - 1e-9));
    // speckle near the wall would otherwise be bridged by the closing and pinch off pockets of fat
    muscle_raw = morph::remove_small(muscle_raw, min_px, Connectivity::eight);
    const Binary wall = morph::close(muscle_raw, morph::disk(params.closing_radius_mm, slice.row_spacing, slice.col_spacing));
    const Binary outside = morph::outside_region(wall);

    // muscle-range components with an 8-neighbour in the outside region
    const morph::Components cc = morph::label_components(muscle_raw, Connectivity::eight);
    std::vector<std::uint8_t> touches(static_cast<std::size_t>(cc.count()) + 1, 0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const int id = cc.label[static_cast<std::size_t>(r) * cols + c];
            if (id == 0 || touches[static_cast<std::size_t>(id)]) continue;
            for (int dr = -1; dr <= 1 && !touches[static_cast<std::size_t>(id)]; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    if (outside.inside(r + dr, c + dc) && outside.at(r + dr, c + dc)) {
                        touches[static_cast<std::size_t>(id)] = 1;
                        break;
                    }
                }
            }
        }
    }
    Binary muscle(rows, cols);
    for (std::size_t i = 0; i < muscle.px.size(); ++i) {
        muscle.px[i] = touches[static_cast<std::size_t>(cc.label[i])] && cc.label[i] != 0;
    }
    // Fat that the closing itself filled in is a pocket of the wall surface unless
    // no muscle-free path leads to it from outside.
    const Binary open_reach = morph::outside_region(muscle);
    Binary sfa(rows, cols), vfa(rows, cols);
    for (std::size_t i = 0; i < muscle.px.size(); ++i) {
        const bool filled = wall.px[i] && !muscle_raw.px[i];
        const bool out = outside.px[i] || (filled && open_reach.px[i]);
        sfa.px[i] = fat.px[i] && out;
        vfa.px[i] = fat.px[i] && !out;
    }

    muscle = morph::remove_small(muscle, min_px, Connectivity::eight);
    sfa = morph::remove_small(sfa, min_px, Connectivity::eight);
    vfa = morph::remove_small(vfa, min_px, Connectivity::eight);

    for (std::size_t i = 0; i < muscle.px.size(); ++i) {
        if (muscle.px[i]) result.mask.labels[i] = static_cast<std::uint8_t>(Tissue::muscle);
        else if (sfa.px[i]) result.mask.labels[i] = static_cast<std::uint8_t>(Tissue::sfa);
        else if (vfa.px[i]) result.mask.labels[i] = static_cast<std::uint8_t>(Tissue::vfa);
    }
    return result;
}

std::vector<LabelMask> segment_volume(const Volume& v, const SegParams& params, int threads,
                                      std::vector<int>* degenerate) {
    validate(params);
    const int d = v.dims().d;
    std::vector<SliceSegmentation> out(static_cast<std::size_t>(d));
    auto work = [&](int first, int step) {
        for (int k = first; k < d; k += step) out[static_cast<std::size_t>(k)] = segment_slice(extract_plane(v, Plane::axial, k), params);
    };
    const int n = std::clamp(threads, 1, std::max(1, d));
    if (n == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < n; ++t) pool.emplace_back(work, t, n);
    }
    std::vector<LabelMask> masks;
    masks.reserve(out.size());
    for (int k = 0; k < d; ++k) {
        if (degenerate && out[static_cast<std::size_t>(k)].degenerate) degenerate->push_back(k);
        masks.push_back(std::move(out[static_cast<std::size_t>(k)].mask));
    }
    return masks;
}

}  // namespace abdkit
