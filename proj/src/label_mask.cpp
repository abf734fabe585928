#include "abdkit/label_mask.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "abdkit/error.hpp"

namespace abdkit {

const char* tissue_name(Tissue t) {
    switch (t) {
    case Tissue::background: return "background";
    case Tissue::muscle: return "muscle";
    case Tissue::sfa: return "sfa";
    case Tissue::vfa: return "vfa";
    }
    return "?";
}

std::size_t LabelMask::count(Tissue t) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(t)));
}

std::vector<std::uint8_t> LabelMask::binary(Tissue t) const {
    std::vector<std::uint8_t> out(labels.size());
    std::transform(labels.begin(), labels.end(), out.begin(),
                   [t](std::uint8_t l) { return static_cast<std::uint8_t>(l == static_cast<std::uint8_t>(t)); });
    return out;
}

void save_mask_stack(const std::filesystem::path& path, const std::vector<LabelMask>& masks, const Spacing& spacing) {
    if (masks.empty()) throw ValidationError("cannot save an empty mask stack");
    const int rows = masks.front().rows, cols = masks.front().cols;
    std::vector<float> values;
    values.reserve(masks.size() * static_cast<std::size_t>(rows) * cols);
    for (const auto& m : masks) {
        if (m.rows != rows || m.cols != cols) throw ValidationError("mask stack has inconsistent slice dims");
        values.insert(values.end(), m.labels.begin(), m.labels.end());
    }
    const Dims dims{static_cast<int>(masks.size()), rows, cols};
    if (path.extension() == ".nii") write_nifti(path, dims, spacing, VoxelType::uint8, values);
    else write_rawv(path, dims, spacing, VoxelType::uint8, values);
}

std::vector<LabelMask> ingest_mask_stack(const std::filesystem::path& path, Dims expected) {
    const RawGrid g = read_grid(path);
    if (g.type != VoxelType::uint8) {
        throw ValidationError("mask file " + path.string() + " must be uint8, got " + to_string(g.type));
    }
    if (g.dims.h != expected.h || g.dims.w != expected.w || (expected.d != 0 && g.dims.d != expected.d)) {
        std::ostringstream os;
        os << "mask dims " << g.dims.d << "x" << g.dims.h << "x" << g.dims.w << " do not match expected "
           << expected.d << "x" << expected.h << "x" << expected.w;
        throw ValidationError(os.str());
    }
    std::set<int> bad;
    for (float v : g.values) {
        if (v > 3.0f) bad.insert(static_cast<int>(v));
    }
    if (!bad.empty()) {
        std::ostringstream os;
        os << "unknown label value(s) in " << path.string() << ":";
        for (int b : bad) os << ' ' << b;
        throw ValidationError(os.str());
    }
    std::vector<LabelMask> out;
    const std::size_t plane = static_cast<std::size_t>(g.dims.h) * g.dims.w;
    for (int d = 0; d < g.dims.d; ++d) {
        LabelMask m(g.dims.h, g.dims.w);
        for (std::size_t i = 0; i < plane; ++i) m.labels[i] = static_cast<std::uint8_t>(g.values[d * plane + i]);
        out.push_back(std::move(m));
    }
    return out;
}

LabelMask ingest_mask(const std::filesystem::path& path, int rows, int cols) {
    auto stack = ingest_mask_stack(path, {1, rows, cols});
    return std::move(stack.front());
}

}  // namespace abdkit
