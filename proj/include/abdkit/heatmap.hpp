#pragma once

#include <optional>
#include <span>
#include <vector>

namespace abdkit {

/// Abdomen start/end slice indices on a stated grid.
struct LocLabel {
    int start_idx = 0;
    int end_idx = 0;

    bool operator==(const LocLabel&) const = default;
};

/// Throws RangeError unless 0 <= start <= end < length.
void validate_label(const LocLabel& label, int length);

/// Probability vector over slice indices. `sigma` is set for Gaussian targets.
struct HeatmapTarget {
    std::vector<double> probs;
    std::optional<double> sigma;
};

/// exp(-(i - center)^2 / (2 sigma^2)) sampled on [0, length), renormalized to sum 1.
HeatmapTarget encode_gaussian(int center, int length, double sigma);
/// Indicator vector at `center` (the "0-1" target).
HeatmapTarget encode_onehot(int center, int length);

enum class DecodeMode { argmax, expectation };

/// argmax: lowest index attaining the maximum. expectation: sum of i * p_i.
double decode(std::span<const double> probs, DecodeMode mode = DecodeMode::argmax);

/// |pred * s_res - gt * s_ori| in mm.
double l1_error_mm(double pred, double gt, double s_res, double s_ori);

/// Maps an index on the resampled grid to the original grid: round(pred * s_res / s_ori).
int to_original_index(double pred, double s_res, double s_ori);

}  // namespace abdkit
