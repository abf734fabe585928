#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "abdkit/label_mask.hpp"
#include "abdkit/volume.hpp"

namespace abdkit {

// --- overlap / distance ------------------------------------------------------

/// 2|a n b| / (|a| + |b|); 1 when both are empty. Masks are nonzero = set.
double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);
/// |a n b| / |a u b|; 1 when both are empty.
double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

/// Symmetric 95th-percentile Hausdorff distance in mm between mask boundaries
/// (pixels with a 4-neighbour outside the mask or the grid). Nearest-rank
/// percentile. Throws UndefinedMetricError if either mask is empty.
double hd95(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, int rows, int cols, double sy,
            double sx);

/// Boundary pixels of a rows x cols mask as flat indices, raster order.
std::vector<int> boundary_pixels(const std::vector<std::uint8_t>& m, int rows, int cols);

struct ClassScores {
    double dsc = 0.0;
    double iou = 0.0;
    std::optional<double> hd95;  ///< empty when undefined on every slice
    int hd95_slices = 0;         ///< slices contributing to hd95
    int hd95_undefined = 0;      ///< slices where exactly one mask was empty
};

/// Scores per class in Tissue order (muscle, SFA, VFA) and their macro average.
struct SegScores {
    std::array<ClassScores, 3> per_class;
    ClassScores macro;
    /// "per_slice_mean": dsc/iou averaged over slices; "pooled": counts summed first.
    std::string aggregation;
};

/// hd95 is always averaged over slices where both masks are nonempty.
SegScores score_segmentation(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& truth, double sy,
                             double sx, bool pooled);

nlohmann::json to_json(const SegScores& s);
std::string format_seg_table(const SegScores& s);

// --- localization evaluation -------------------------------------------------

struct LocEvalInput {
    double pred_start = 0, gt_start = 0;
    double pred_end = 0, gt_end = 0;
    double s_res = 1.0;  ///< slice spacing of the network grid (mm)
    double s_ori = 1.0;  ///< slice spacing of the original volume (mm)
};

struct LocEvalRow {
    double avg_mm = 0;
    double max_mm = 0;
    double pct_le_5mm = 0;
    double pct_le_10mm = 0;
};

struct LocEvalTable {
    LocEvalRow start;
    LocEvalRow end;
    int cases = 0;
};

/// Aggregates l1_error_mm errors per endpoint; percentages are inclusive.
LocEvalTable loc_eval_table(const std::vector<LocEvalInput>& cases);
/// Same aggregation over precomputed errors in mm.
LocEvalRow loc_eval_row(const std::vector<double>& errors_mm);

/// "avg & max & p5% & p10%" with two decimals for mm and one for percentages.
std::string format_loc_row(const LocEvalRow& r);
std::string format_loc_table(const std::string& method, const LocEvalTable& t);
nlohmann::json to_json(const LocEvalTable& t);

// --- quantification ----------------------------------------------------------

struct SliceTissue {
    int slice_index = 0;
    std::array<std::size_t, 3> pixels{};
    std::array<double, 3> area_cm2{};
    std::array<double, 3> hu_sum{};
    /// Mean HU under each class; empty when the class has no pixels.
    std::array<std::optional<double>, 3> mean_hu;

    bool operator==(const SliceTissue&) const = default;
};

struct TissueReport {
    Spacing spacing;
    std::string spacing_source = "volume";
    std::vector<SliceTissue> slices;
    std::array<std::size_t, 3> voxels{};
    std::array<double, 3> volume_cm3{};
    std::array<std::optional<double>, 3> mean_hu;

    int slice_count() const { return static_cast<int>(slices.size()); }
    bool operator==(const TissueReport&) const = default;
};

/// masks[i] labels axial slice first_slice + i of `volume`.
TissueReport quantify(const std::vector<LabelMask>& masks, const Volume& volume, int first_slice = 0);

/// Concatenates reports over adjacent or disjoint slice ranges of the same volume.
TissueReport combine(const TissueReport& a, const TissueReport& b);

enum class ReportFormat { csv, json };

nlohmann::json to_json(const TissueReport& r);
TissueReport report_from_json(const nlohmann::json& j);
std::string report_csv(const TissueReport& r);
void export_report(const TissueReport& r, ReportFormat format, const std::filesystem::path& path);

}  // namespace abdkit
