#include "abdkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "abdkit/error.hpp"
#include "abdkit/heatmap.hpp"

namespace abdkit {

namespace {

struct Counts {
    std::size_t a = 0, b = 0, both = 0;
};

Counts overlap(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) throw ShapeError("mask sizes differ");
    Counts n;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        n.a += x;
        n.b += y;
        n.both += x && y;
    }
    return n;
}

double dice_of(const Counts& n) {
    if (n.a + n.b == 0) return 1.0;
    return 2.0 * static_cast<double>(n.both) / static_cast<double>(n.a + n.b);
}

double iou_of(const Counts& n) {
    const std::size_t uni = n.a + n.b - n.both;
    if (uni == 0) return 1.0;
    return static_cast<double>(n.both) / static_cast<double>(uni);
}

// 1D squared distance transform: out[q] = min_p w*(q-p)^2 + f[p], over finite f.
void dt1d(const double* f, double* out, int n, int stride, double w, std::vector<int>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.clear();
    z.clear();
    auto F = [&](int p) { return f[static_cast<std::ptrdiff_t>(p) * stride]; };
    for (int q = 0; q < n; ++q) {
        if (F(q) == inf) continue;
        while (!v.empty()) {
            const int p = v.back();
            const double s = ((F(q) + w * q * q) - (F(p) + w * p * p)) / (2.0 * w * (q - p));
            if (s <= z.back()) {
                v.pop_back();
                z.pop_back();
            } else {
                z.push_back(s);
                v.push_back(q);
                break;
            }
        }
        if (v.empty()) {
            v.push_back(q);
            z.assign(1, -inf);
        }
    }
    if (v.empty()) {
        for (int q = 0; q < n; ++q) out[static_cast<std::ptrdiff_t>(q) * stride] = inf;
        return;
    }
    // z[i] is where v[i] starts to win; v.size() == z.size()
    std::size_t k = 0;
    for (int q = 0; q < n; ++q) {
        while (k + 1 < v.size() && z[k + 1] < q) ++k;
        const double d = q - v[k];
        out[static_cast<std::ptrdiff_t>(q) * stride] = w * d * d + F(v[k]);
    }
}

// Squared mm distance from every pixel to the nearest seed pixel.
std::vector<double> squared_edt(const std::vector<int>& seeds, int rows, int cols, double sy, double sx) {
    std::vector<double> f(static_cast<std::size_t>(rows) * cols, std::numeric_limits<double>::infinity());
    for (int s : seeds) f[static_cast<std::size_t>(s)] = 0.0;
    std::vector<double> tmp(f.size());
    std::vector<int> v;
    std::vector<double> z;
    for (int c = 0; c < cols; ++c) dt1d(f.data() + c, tmp.data() + c, rows, cols, sy * sy, v, z);
    for (int r = 0; r < rows; ++r) {
        dt1d(tmp.data() + static_cast<std::size_t>(r) * cols, f.data() + static_cast<std::size_t>(r) * cols, cols, 1,
             sx * sx, v, z);
    }
    return f;
}

double directed_p95(const std::vector<int>& from, const std::vector<double>& dist2) {
    std::vector<double> d;
    d.reserve(from.size());
    for (int i : from) d.push_back(std::sqrt(dist2[static_cast<std::size_t>(i)]));
    const std::size_t k = (95 * d.size() + 99) / 100;  // ceil(0.95 n), 1-based
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    return d[k - 1];
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

constexpr std::array<const char*, 3> kKeys = {"muscle", "sfa", "vfa"};

}  // namespace

double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) { return dice_of(overlap(a, b)); }
double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) { return iou_of(overlap(a, b)); }

std::vector<int> boundary_pixels(const std::vector<std::uint8_t>& m, int rows, int cols) {
    std::vector<int> out;
    auto on = [&](int r, int c) {
        return r >= 0 && c >= 0 && r < rows && c < cols && m[static_cast<std::size_t>(r) * cols + c] != 0;
    };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (!on(r, c)) continue;
            if (!on(r - 1, c) || !on(r + 1, c) || !on(r, c - 1) || !on(r, c + 1)) out.push_back(r * cols + c);
        }
    }
    return out;
}

double hd95(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, int rows, int cols, double sy,
            double sx) {
    const auto n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    if (a.size() != n || b.size() != n) throw ShapeError("mask size does not match rows x cols");
    if (!(sy > 0) || !(sx > 0)) throw ValidationError("spacing must be positive");
    const auto ba = boundary_pixels(a, rows, cols);
    const auto bb = boundary_pixels(b, rows, cols);
    if (ba.empty() || bb.empty()) throw UndefinedMetricError("hd95 is undefined for an empty mask");
    const double ab = directed_p95(ba, squared_edt(bb, rows, cols, sy, sx));
    const double ba_ = directed_p95(bb, squared_edt(ba, rows, cols, sy, sx));
    return std::max(ab, ba_);
}

SegScores score_segmentation(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& truth, double sy,
                             double sx, bool pooled) {
    if (pred.size() != truth.size()) throw ShapeError("prediction and truth have different slice counts");
    if (pred.empty()) throw ContractError("no slices to score");
    SegScores out;
    out.aggregation = pooled ? "pooled" : "per_slice_mean";
    for (std::size_t ci = 0; ci < 3; ++ci) {
        const Tissue t = kTissueClasses[ci];
        ClassScores& cs = out.per_class[ci];
        Counts total;
        double dsum = 0, isum = 0, hsum = 0;
        for (std::size_t k = 0; k < pred.size(); ++k) {
            if (pred[k].rows != truth[k].rows || pred[k].cols != truth[k].cols) throw ShapeError("slice dims differ");
            const auto pa = pred[k].binary(t), ta = truth[k].binary(t);
            const Counts c = overlap(pa, ta);
            total.a += c.a;
            total.b += c.b;
            total.both += c.both;
            dsum += dice_of(c);
            isum += iou_of(c);
            if (c.a > 0 && c.b > 0) {
                hsum += hd95(pa, ta, pred[k].rows, pred[k].cols, sy, sx);
                ++cs.hd95_slices;
            } else if (c.a + c.b > 0) {
                ++cs.hd95_undefined;
            }
        }
        const double n = static_cast<double>(pred.size());
        cs.dsc = pooled ? dice_of(total) : dsum / n;
        cs.iou = pooled ? iou_of(total) : isum / n;
        if (cs.hd95_slices > 0) cs.hd95 = hsum / cs.hd95_slices;
    }
    double hs = 0;
    int hn = 0;
    for (const auto& cs : out.per_class) {
        out.macro.dsc += cs.dsc / 3.0;
        out.macro.iou += cs.iou / 3.0;
        if (cs.hd95) {
            hs += *cs.hd95;
            ++hn;
        }
        out.macro.hd95_slices += cs.hd95_slices;
        out.macro.hd95_undefined += cs.hd95_undefined;
    }
    if (hn > 0) out.macro.hd95 = hs / hn;
    return out;
}

nlohmann::json to_json(const SegScores& s) {
    nlohmann::json j = {{"aggregation", s.aggregation}};
    auto one = [](const ClassScores& c) {
        return nlohmann::json{{"dsc", c.dsc},
                              {"iou", c.iou},
                              {"hd95_mm", opt_json(c.hd95)},
                              {"hd95_slices", c.hd95_slices},
                              {"hd95_undefined", c.hd95_undefined}};
    };
    for (std::size_t i = 0; i < 3; ++i) j[kKeys[i]] = one(s.per_class[i]);
    j["average"] = one(s.macro);
    return j;
}

std::string format_seg_table(const SegScores& s) {
    std::ostringstream o;
    o << "Metric  Muscle  SFA     VFA     Avg.   (" << s.aggregation << ")\n";
    auto row = [&](const char* name, auto get) {
        o << name;
        for (const auto& c : s.per_class) o << "  " << get(c);
        o << "  " << get(s.macro) << '\n';
    };
    row("DSC   ", [](const ClassScores& c) { return fmt("%.3f ", c.dsc); });
    row("95 HD ", [](const ClassScores& c) { return c.hd95 ? fmt("%.3f ", *c.hd95) : std::string("  n/a "); });
    row("IoU   ", [](const ClassScores& c) { return fmt("%.3f ", c.iou); });
    return o.str();
}

LocEvalRow loc_eval_row(const std::vector<double>& errors) {
    if (errors.empty()) throw ContractError("localization table needs at least one case");
    LocEvalRow r;
    std::size_t le5 = 0, le10 = 0;
    for (double e : errors) {
        r.avg_mm += e;
        r.max_mm = std::max(r.max_mm, e);
        // tolerance absorbs spacing products such as 3 * 1.666...
        le5 += e <= 5.0 + 1e-9;
        le10 += e <= 10.0 + 1e-9;
    }
    const double n = static_cast<double>(errors.size());
    r.avg_mm /= n;
    r.pct_le_5mm = 100.0 * static_cast<double>(le5) / n;
    r.pct_le_10mm = 100.0 * static_cast<double>(le10) / n;
    return r;
}

LocEvalTable loc_eval_table(const std::vector<LocEvalInput>& cases) {
    if (cases.empty()) throw ContractError("localization table needs at least one case");
    std::vector<double> es, ee;
    for (const auto& c : cases) {
        es.push_back(l1_error_mm(c.pred_start, c.gt_start, c.s_res, c.s_ori));
        ee.push_back(l1_error_mm(c.pred_end, c.gt_end, c.s_res, c.s_ori));
    }
    return {loc_eval_row(es), loc_eval_row(ee), static_cast<int>(cases.size())};
}

std::string format_loc_row(const LocEvalRow& r) {
    return fmt("%.2f", r.avg_mm) + " & " + fmt("%.2f", r.max_mm) + " & " + fmt("%.1f%%", r.pct_le_5mm) + " & " +
           fmt("%.1f%%", r.pct_le_10mm);
}

std::string format_loc_table(const std::string& method, const LocEvalTable& t) {
    return "Method & Start Ave.(mm) & Max(mm) & <=5mm & <=10mm & End Ave.(mm) & Max(mm) & <=5mm & <=10mm\n" + method +
           " & " + format_loc_row(t.start) + " & " + format_loc_row(t.end) + "\n";
}

nlohmann::json to_json(const LocEvalTable& t) {
    auto row = [](const LocEvalRow& r) {
        return nlohmann::json{
            {"avg_mm", r.avg_mm}, {"max_mm", r.max_mm}, {"pct_le_5mm", r.pct_le_5mm}, {"pct_le_10mm", r.pct_le_10mm}};
    };
    return {{"cases", t.cases}, {"start", row(t.start)}, {"end", row(t.end)}};
}

TissueReport quantify(const std::vector<LabelMask>& masks, const Volume& volume, int first_slice) {
    const Dims& d = volume.dims();
    if (first_slice < 0 || first_slice + static_cast<int>(masks.size()) > d.d) {
        throw RangeError("mask slices fall outside the volume");
    }
    TissueReport rep;
    rep.spacing = volume.spacing();
    const double px_cm2 = rep.spacing.sy * rep.spacing.sx / 100.0;
    std::array<double, 3> hu_total{};
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const LabelMask& m = masks[i];
        if (m.rows != d.h || m.cols != d.w) throw ShapeError("mask dims do not match the volume's axial dims");
        SliceTissue s;
        s.slice_index = first_slice + static_cast<int>(i);
        for (int r = 0; r < m.rows; ++r) {
            for (int c = 0; c < m.cols; ++c) {
                const int lab = m.at(r, c);
                if (lab < 1 || lab > 3) continue;
                ++s.pixels[static_cast<std::size_t>(lab - 1)];
                s.hu_sum[static_cast<std::size_t>(lab - 1)] += volume.at(s.slice_index, r, c);
            }
        }
        for (std::size_t k = 0; k < 3; ++k) {
            s.area_cm2[k] = static_cast<double>(s.pixels[k]) * px_cm2;
            if (s.pixels[k]) s.mean_hu[k] = s.hu_sum[k] / static_cast<double>(s.pixels[k]);
            rep.voxels[k] += s.pixels[k];
            hu_total[k] += s.hu_sum[k];
        }
        rep.slices.push_back(s);
    }
    for (std::size_t k = 0; k < 3; ++k) {
        rep.volume_cm3[k] = static_cast<double>(rep.voxels[k]) * px_cm2 * rep.spacing.sz / 10.0;
        if (rep.voxels[k]) rep.mean_hu[k] = hu_total[k] / static_cast<double>(rep.voxels[k]);
    }
    return rep;
}

TissueReport combine(const TissueReport& a, const TissueReport& b) {
    if (!(a.spacing == b.spacing)) throw ValidationError("reports have different spacing");
    TissueReport out;
    out.spacing = a.spacing;
    out.spacing_source = a.spacing_source;
    out.slices = a.slices;
    out.slices.insert(out.slices.end(), b.slices.begin(), b.slices.end());
    std::sort(out.slices.begin(), out.slices.end(),
              [](const SliceTissue& x, const SliceTissue& y) { return x.slice_index < y.slice_index; });
    for (std::size_t i = 1; i < out.slices.size(); ++i) {
        if (out.slices[i].slice_index == out.slices[i - 1].slice_index) throw ValidationError("reports overlap");
    }
    const double px_cm2 = out.spacing.sy * out.spacing.sx / 100.0;
    for (std::size_t k = 0; k < 3; ++k) {
        double hu = 0;
        for (const auto& s : out.slices) {
            out.voxels[k] += s.pixels[k];
            hu += s.hu_sum[k];
        }
        out.volume_cm3[k] = static_cast<double>(out.voxels[k]) * px_cm2 * out.spacing.sz / 10.0;
        if (out.voxels[k]) out.mean_hu[k] = hu / static_cast<double>(out.voxels[k]);
    }
    return out;
}

nlohmann::json to_json(const TissueReport& r) {
    nlohmann::json slices = nlohmann::json::array();
    for (const auto& s : r.slices) {
        nlohmann::json js = {{"slice_index", s.slice_index}};
        for (std::size_t k = 0; k < 3; ++k) {
            js[kKeys[k]] = {{"pixels", s.pixels[k]},
                            {"area_cm2", s.area_cm2[k]},
                            {"hu_sum", s.hu_sum[k]},
                            {"mean_hu", opt_json(s.mean_hu[k])}};
        }
        slices.push_back(js);
    }
    nlohmann::json agg = nlohmann::json::object();
    for (std::size_t k = 0; k < 3; ++k) {
        agg[kKeys[k]] = {{"voxels", r.voxels[k]}, {"volume_cm3", r.volume_cm3[k]}, {"mean_hu", opt_json(r.mean_hu[k])}};
    }
    return {{"spacing", {r.spacing.sz, r.spacing.sy, r.spacing.sx}},
            {"spacing_source", r.spacing_source},
            {"slice_count", r.slice_count()},
            {"slices", slices},
            {"aggregate", agg}};
}

TissueReport report_from_json(const nlohmann::json& j) {
    TissueReport r;
    try {
        const auto sp = j.at("spacing").get<std::array<double, 3>>();
        r.spacing = {sp[0], sp[1], sp[2]};
        r.spacing_source = j.at("spacing_source").get<std::string>();
        for (const auto& js : j.at("slices")) {
            SliceTissue s;
            s.slice_index = js.at("slice_index").get<int>();
            for (std::size_t k = 0; k < 3; ++k) {
                const auto& c = js.at(kKeys[k]);
                s.pixels[k] = c.at("pixels").get<std::size_t>();
                s.area_cm2[k] = c.at("area_cm2").get<double>();
                s.hu_sum[k] = c.at("hu_sum").get<double>();
                s.mean_hu[k] = opt_from(c.at("mean_hu"));
            }
            r.slices.push_back(s);
        }
        const auto& agg = j.at("aggregate");
        for (std::size_t k = 0; k < 3; ++k) {
            const auto& c = agg.at(kKeys[k]);
            r.voxels[k] = c.at("voxels").get<std::size_t>();
            r.volume_cm3[k] = c.at("volume_cm3").get<double>();
            r.mean_hu[k] = opt_from(c.at("mean_hu"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad report JSON: ") + e.what());
    }
    return r;
}

std::string report_csv(const TissueReport& r) {
    std::string out = "slice_index,muscle_cm2,sfa_cm2,vfa_cm2,muscle_hu,sfa_hu,vfa_hu\n";
    for (const auto& s : r.slices) {
        out += std::to_string(s.slice_index);
        for (double a : s.area_cm2) out += "," + fmt("%.6g", a);
        for (const auto& h : s.mean_hu) out += "," + (h ? fmt("%.6g", *h) : std::string());
        out += '\n';
    }
    return out;
}

void export_report(const TissueReport& r, ReportFormat format, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report to " + path.string());
    if (format == ReportFormat::csv) {
        out << report_csv(r);
    } else {
        out << to_json(r).dump(2) << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace abdkit
