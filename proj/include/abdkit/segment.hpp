#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"

#include "abdkit/label_mask.hpp"
#include "abdkit/morphology.hpp"
#include "abdkit/volume.hpp"

namespace abdkit {

/// Closed HU interval.
struct HuRange {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double hu) const { return hu >= lo && hu <= hi; }
};

struct SegParams {
    HuRange fat_range{-190.0, -30.0};
    HuRange muscle_range{-29.0, 150.0};
    double body_threshold = -500.0;
    double closing_radius_mm = 5.0;
    double min_component_mm2 = 10.0;
};

/// Throws ConfigError for overlapping ranges or a nonpositive closing radius.
void validate(const SegParams& p);

nlohmann::json to_json(const SegParams& p);
/// Missing keys keep their defaults; the result is validated.
SegParams seg_params_from_json(const nlohmann::json& j);

struct BodyMask {
    morph::Binary mask;
    bool empty = false;  ///< no pixel above the threshold
};

/// Threshold, largest 8-connected component, holes filled.
BodyMask body_mask(const ViewSlice2D& slice, const SegParams& params);

struct SliceSegmentation {
    LabelMask mask;
    bool degenerate = false;  ///< empty body; mask is all background
};

/// Threshold + morphology segmentation of one raw-HU axial slice.
///
/// Fat is split by a 4-connected flood from the image border through pixels
/// outside the closed muscle wall: reached fat is SFA, the rest VFA. Muscle is
/// the muscle-range components touching that outside region, which keeps
/// visceral soft tissue enclosed by the wall out of the muscle class.
SliceSegmentation segment_slice(const ViewSlice2D& slice, const SegParams& params = {});

/// Segments every axial slice. Slices are independent; `threads` <= 1 runs serially.
/// Indices of degenerate slices are appended to `degenerate` when given.
std::vector<LabelMask> segment_volume(const Volume& v, const SegParams& params = {}, int threads = 1,
                                      std::vector<int>* degenerate = nullptr);

}  // namespace abdkit
