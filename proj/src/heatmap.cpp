#include "abdkit/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "abdkit/error.hpp"

namespace abdkit {

namespace {

void check_center(int center, int length) {
    if (length < 1) throw RangeError("heatmap length must be >= 1");
    if (center < 0 || center >= length) {
        throw RangeError("center " + std::to_string(center) + " outside [0, " + std::to_string(length) + ")");
    }
}

}  // namespace

void validate_label(const LocLabel& label, int length) {
    if (label.start_idx < 0 || label.start_idx > label.end_idx || label.end_idx >= length) {
        throw RangeError("label (" + std::to_string(label.start_idx) + ", " + std::to_string(label.end_idx) +
                         ") invalid for length " + std::to_string(length));
    }
}

HeatmapTarget encode_gaussian(int center, int length, double sigma) {
    check_center(center, length);
    if (!(sigma > 0.0)) throw RangeError("sigma must be > 0");
    HeatmapTarget t;
    t.sigma = sigma;
    t.probs.resize(static_cast<std::size_t>(length));
    double z = 0.0;
    for (int i = 0; i < length; ++i) {
        const double d = i - center;
        z += t.probs[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
    for (double& p : t.probs) p /= z;
    return t;
}

HeatmapTarget encode_onehot(int center, int length) {
    check_center(center, length);
    HeatmapTarget t;
    t.probs.assign(static_cast<std::size_t>(length), 0.0);
    t.probs[static_cast<std::size_t>(center)] = 1.0;
    return t;
}

double decode(std::span<const double> probs, DecodeMode mode) {
    if (probs.empty()) throw RangeError("cannot decode an empty heatmap");
    if (mode == DecodeMode::argmax) {
        return static_cast<double>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    }
    double e = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) e += static_cast<double>(i) * probs[i];
    return e;
}

double l1_error_mm(double pred, double gt, double s_res, double s_ori) {
    if (!(s_res > 0.0) || !(s_ori > 0.0)) throw ValidationError("spacings must be positive");
    return std::abs(pred * s_res - gt * s_ori);
}

int to_original_index(double pred, double s_res, double s_ori) {
    if (!(s_res > 0.0) || !(s_ori > 0.0)) throw ValidationError("spacings must be positive");
    return static_cast<int>(std::lround(pred * s_res / s_ori));
}

}  // namespace abdkit
