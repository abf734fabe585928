#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "abdkit/heatmap.hpp"
#include "abdkit/label_mask.hpp"
#include "abdkit/volume.hpp"

namespace abdkit {

/// Semi-axes of an axis-aligned ellipse in mm (ry along rows, rx along columns).
struct EllipseRadii {
    double ry = 0.0;
    double rx = 0.0;
};

enum class PhantomFamily {
    /// Outside the abdomen the body shrinks and loses its subcutaneous fat ring.
    standard,
    /// Every slice has the same tissue areas; the abdomen differs only by the
    /// body's orientation, which the coronal/sagittal silhouettes reveal.
    view_dependent,
};

std::string to_string(PhantomFamily f);
PhantomFamily phantom_family_from_string(const std::string& s);

struct PhantomHu {
    float air = -1000.0f;
    float fat = -100.0f;
    float muscle = 50.0f;
    float visceral = 30.0f;
};

struct PhantomSpec {
    Dims dims{48, 128, 128};
    Spacing spacing{5.0, 2.5, 2.5};
    int abdomen_start = 12;
    int abdomen_end = 35;
    PhantomFamily family = PhantomFamily::standard;
    /// Body outline per slice. Empty means default_radius_profile(*this).
    std::vector<EllipseRadii> body_radius_profile;
    /// Body semi-axes inside the abdomen when the profile is defaulted.
    EllipseRadii abdomen_radii{110.0, 140.0};
    double sfa_thickness_mm = 20.0;
    double muscle_thickness_mm = 15.0;
    /// Visceral fat lining just inside the muscle wall.
    double lining_thickness_mm = 10.0;
    int blob_count = 6;
    double blob_radius_mm = 8.0;
    PhantomHu hu;
    double noise_sigma_hu = 0.0;
    std::uint64_t seed = 1;
};

/// Circular fat blob inside the visceral core, centre in mm relative to the slice centre.
struct Blob {
    double cy = 0.0;
    double cx = 0.0;
    double r = 0.0;
};

/// Analytic layout of one axial slice; all ellipses share the slice centre.
struct SliceGeometry {
    bool has_sfa = false;
    EllipseRadii body;          ///< outer skin
    EllipseRadii muscle_outer;  ///< equals body when !has_sfa
    EllipseRadii muscle_inner;
    EllipseRadii core;          ///< inside the fat lining
    std::vector<Blob> blobs;
};

struct Phantom {
    Volume volume;
    LocLabel label;
    std::vector<LabelMask> masks;  ///< one per slice, noise-free ground truth
};

std::vector<EllipseRadii> default_radius_profile(const PhantomSpec& spec);

/// Checks the spec invariants; throws ValidationError on a geometry overflow or bad range.
void validate(const PhantomSpec& spec);

SliceGeometry slice_geometry(const PhantomSpec& spec, int slice);

/// Physical offset (mm) of a pixel centre from the slice centre.
inline double pixel_y_mm(const PhantomSpec& s, int row) { return (row - (s.dims.h - 1) / 2.0) * s.spacing.sy; }
inline double pixel_x_mm(const PhantomSpec& s, int col) { return (col - (s.dims.w - 1) / 2.0) * s.spacing.sx; }

Phantom generate(const PhantomSpec& spec);

struct CorpusJitter {
    int start_slices = 12;    ///< start offset drawn from [-start_slices, start_slices]
    int end_slices = 12;
    double radius_scale = 0.1;  ///< body radii scaled by a factor in [1 - r, 1 + r]
};

struct CorpusCase {
    std::string id;
    PhantomSpec spec;
    LocLabel label;
};

/// Deterministic list of n specs with stratified start/end offsets, so n >= 8
/// always yields several distinct start indices.
std::vector<CorpusCase> sample_corpus(int n, const PhantomSpec& base, const CorpusJitter& jitter, std::uint64_t seed);

/// Writes <id>.rawv and <id>_mask.rawv per case plus manifest.json; returns the manifest.
nlohmann::json generate_corpus(const std::filesystem::path& out_dir, int n, const PhantomSpec& base,
                               const CorpusJitter& jitter, std::uint64_t seed);

nlohmann::json spec_to_json(const PhantomSpec& spec);
PhantomSpec spec_from_json(const nlohmann::json& j);

/// Throws ValidationError unless `manifest` follows the documented schema.
void validate_manifest(const nlohmann::json& manifest);

/// Defaults used by the toy localization experiments (128 x 32 x 32 grid).
PhantomSpec toy_localization_spec(PhantomFamily family = PhantomFamily::standard);

}  // namespace abdkit
