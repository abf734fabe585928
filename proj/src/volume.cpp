#include "abdkit/volume.hpp"

#include <algorithm>
#include <cmath>

#include "abdkit/error.hpp"

namespace abdkit {

void validate_spacing(const Spacing& s) {
    for (double v : {s.sz, s.sy, s.sx}) {
        if (!std::isfinite(v) || v <= 0.0) {
            throw ValidationError("spacing components must be positive and finite");
        }
    }
}

Volume::Volume(Dims dims, Spacing spacing, std::vector<float> voxels, IntensityDomain domain)
    : dims_(dims), spacing_(spacing), domain_(domain), voxels_(std::move(voxels)) {
    if (dims_.d < 1 || dims_.h < 1 || dims_.w < 1) {
        throw ValidationError("volume dims must all be >= 1");
    }
    validate_spacing(spacing_);
    if (voxels_.size() != dims_.count()) {
        throw ValidationError("voxel count " + std::to_string(voxels_.size()) + " != D*H*W " +
                              std::to_string(dims_.count()));
    }
    const float lo = domain_ == IntensityDomain::raw_hu ? kMinHu : 0.0f;
    const float hi = domain_ == IntensityDomain::raw_hu ? kMaxHu : 1.0f;
    for (float x : voxels_) {
        if (!(x >= lo && x <= hi)) {
            throw ValidationError("voxel value outside the range of its intensity domain");
        }
    }
}

std::string to_string(Plane p) {
    switch (p) {
    case Plane::axial: return "axial";
    case Plane::coronal: return "coronal";
    case Plane::sagittal: return "sagittal";
    }
    return "?";
}

Plane plane_from_string(const std::string& s) {
    if (s == "axial" || s == "transverse") return Plane::axial;
    if (s == "coronal") return Plane::coronal;
    if (s == "sagittal") return Plane::sagittal;
    throw ValidationError("unknown plane '" + s + "'");
}

namespace {

struct AxisSample {
    int i0;
    int i1;
    double t;
};

// align-corners false: output cell i sits at input coordinate (i + 0.5) * in / out - 0.5
std::vector<AxisSample> axis_samples(int in, int out) {
    std::vector<AxisSample> s(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
        double x = (i + 0.5) * scale - 0.5;
        x = std::clamp(x, 0.0, static_cast<double>(in - 1));
        int i0 = static_cast<int>(std::floor(x));
        int i1 = std::min(i0 + 1, in - 1);
        s[static_cast<std::size_t>(i)] = {i0, i1, x - i0};
    }
    return s;
}

}  // namespace

Volume resample_trilinear(const Volume& v, Dims target) {
    if (target.d < 1 || target.h < 1 || target.w < 1) {
        throw RangeError("resample target dims must all be >= 1");
    }
    const Dims& in = v.dims();
    const auto zs = axis_samples(in.d, target.d);
    const auto ys = axis_samples(in.h, target.h);
    const auto xs = axis_samples(in.w, target.w);

    std::vector<float> out(target.count());
    std::size_t o = 0;
    for (const auto& z : zs) {
        for (const auto& y : ys) {
            for (const auto& x : xs) {
                auto lerp_x = [&](int d, int h) {
                    return (1.0 - x.t) * v.at(d, h, x.i0) + x.t * v.at(d, h, x.i1);
                };
                const double c0 = (1.0 - y.t) * lerp_x(z.i0, y.i0) + y.t * lerp_x(z.i0, y.i1);
                const double c1 = (1.0 - y.t) * lerp_x(z.i1, y.i0) + y.t * lerp_x(z.i1, y.i1);
                out[o++] = static_cast<float>((1.0 - z.t) * c0 + z.t * c1);
            }
        }
    }
    const Spacing& s = v.spacing();
    Spacing os{s.sz * in.d / target.d, s.sy * in.h / target.h, s.sx * in.w / target.w};
    return Volume(target, os, std::move(out), v.domain());
}

Volume window_normalize(const Volume& v, const WindowSpec& w) {
    if (v.domain() != IntensityDomain::raw_hu) {
        throw ContractError("window_normalize expects a raw HU volume");
    }
    if (!(w.width > 0.0)) {
        throw ValidationError("window width must be > 0");
    }
    const double lo = w.level - w.width / 2.0;
    std::vector<float> out(v.voxels().size());
    std::transform(v.voxels().begin(), v.voxels().end(), out.begin(), [&](float hu) {
        return static_cast<float>(std::clamp((hu - lo) / w.width, 0.0, 1.0));
    });
    return Volume(v.dims(), v.spacing(), std::move(out), IntensityDomain::normalized_unit);
}

ViewSlice2D extract_plane(const Volume& v, Plane plane, int index) {
    const Dims& n = v.dims();
    const Spacing& s = v.spacing();
    ViewSlice2D out;
    out.plane = plane;
    switch (plane) {
    case Plane::axial:
        if (index < 0 || index >= n.d) throw RangeError("axial index out of range");
        out.rows = n.h;
        out.cols = n.w;
        out.row_spacing = s.sy;
        out.col_spacing = s.sx;
        out.pixels.assign(v.voxels().begin() + static_cast<std::ptrdiff_t>(v.index(index, 0, 0)),
                          v.voxels().begin() + static_cast<std::ptrdiff_t>(v.index(index, 0, 0) +
                                                                           static_cast<std::size_t>(n.h) * n.w));
        break;
    case Plane::coronal:
        if (index < 0 || index >= n.h) throw RangeError("coronal index out of range");
        out.rows = n.d;
        out.cols = n.w;
        out.row_spacing = s.sz;
        out.col_spacing = s.sx;
        out.pixels.resize(static_cast<std::size_t>(n.d) * n.w);
        for (int d = 0; d < n.d; ++d)
            for (int w = 0; w < n.w; ++w) out.pixels[static_cast<std::size_t>(d) * n.w + w] = v.at(d, index, w);
        break;
    case Plane::sagittal:
        if (index < 0 || index >= n.w) throw RangeError("sagittal index out of range");
        out.rows = n.d;
        out.cols = n.h;
        out.row_spacing = s.sz;
        out.col_spacing = s.sy;
        out.pixels.resize(static_cast<std::size_t>(n.d) * n.h);
        for (int d = 0; d < n.d; ++d)
            for (int h = 0; h < n.h; ++h) out.pixels[static_cast<std::size_t>(d) * n.h + h] = v.at(d, h, index);
        break;
    }
    return out;
}

CenterViews extract_center_views(const Volume& v) {
    return {extract_plane(v, Plane::coronal, v.dims().h / 2), extract_plane(v, Plane::sagittal, v.dims().w / 2)};
}

std::vector<ViewSlice2D> extract_axial_range(const Volume& v, int start, int end) {
    if (start > end || start < 0 || end >= v.dims().d) {
        throw RangeError("axial range [" + std::to_string(start) + ", " + std::to_string(end) +
                         "] invalid for D=" + std::to_string(v.dims().d));
    }
    std::vector<ViewSlice2D> out;
    out.reserve(static_cast<std::size_t>(end - start + 1));
    for (int k = start; k <= end; ++k) out.push_back(extract_plane(v, Plane::axial, k));
    return out;
}

}  // namespace abdkit
