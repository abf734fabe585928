#include "abdkit/study.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>

namespace abdkit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out.flush()) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void save_masks_atomic(const fs::path& path, const std::vector<LabelMask>& masks, const Spacing& spacing) {
    const fs::path tmp = path.string() + ".tmp";
    save_mask_stack(tmp, masks, spacing);
    fs::rename(tmp, path);
}

json localization_json(const std::optional<Localization>& l) {
    if (!l) return nullptr;
    return {{"start", l->start}, {"end", l->end}, {"method", l->method}};
}

std::optional<Localization> localization_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    return Localization{j.at("start").get<int>(), j.at("end").get<int>(), j.value("method", "")};
}

void validate_localization(const std::optional<Localization>& l, int slices) {
    if (l && (l->start < 0 || l->start > l->end || l->end >= slices)) {
        throw ValidationError("localization must satisfy 0 <= start <= end < " + std::to_string(slices));
    }
}

json meta_json(const std::string& id, const Volume& v, const std::optional<Localization>& loc, long version,
               const SegParams& p) {
    const auto& d = v.dims();
    const auto& s = v.spacing();
    return {{"id", id},
            {"dims", {d.d, d.h, d.w}},
            {"spacing", {s.sz, s.sy, s.sx}},
            {"localization", localization_json(loc)},
            {"mask_version", version},
            {"seg_params", to_json(p)}};
}

void paint(std::vector<LabelMask>& masks, const EditBatch& b) {
    LabelMask& m = masks[static_cast<std::size_t>(b.slice_index)];
    for (const Stroke& s : b.strokes) rasterize_stroke(m, s);
}

}  // namespace

EditRejected::EditRejected(std::vector<FieldError> errors)
    : ValidationError([&] {
          std::string msg = "edit batch rejected:";
          for (const auto& e : errors) msg += " " + e.field + ": " + e.message + ";";
          return msg;
      }()),
      errors_(std::move(errors)) {}

VersionConflict::VersionConflict(long base, long current)
    : Error("edit based on mask version " + std::to_string(base) + ", current is " + std::to_string(current)),
      current_(current) {}

EditBatch parse_edit_batch(const json& j) {
    std::vector<FieldError> errs;
    EditBatch b;
    if (!j.is_object()) throw EditRejected(std::vector<FieldError>{{"", "body must be a JSON object"}});
    auto integer = [&](const char* key, long lo, long& out) {
        if (!j.contains(key)) {
            errs.push_back({key, "missing"});
        } else if (!j[key].is_number_integer()) {
            errs.push_back({key, "must be an integer"});
        } else if (j[key].get<long>() < lo) {
            errs.push_back({key, "must be >= " + std::to_string(lo)});
        } else {
            out = j[key].get<long>();
        }
    };
    long slice = 0;
    integer("base_version", 0, b.base_version);
    integer("slice_index", 0, slice);
    b.slice_index = static_cast<int>(std::min<long>(slice, 1L << 30));
    if (!j.contains("strokes") || !j["strokes"].is_array() || j["strokes"].empty()) {
        errs.push_back({"strokes", "must be a nonempty array"});
    } else {
        const json& arr = j["strokes"];
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::string at = "strokes[" + std::to_string(i) + "]";
            const json& s = arr[i];
            if (!s.is_object()) {
                errs.push_back({at, "must be an object"});
                continue;
            }
            Stroke st;
            if (!s.contains("label") || !s["label"].is_number_integer() || s["label"].get<long>() < 0 ||
                s["label"].get<long>() > 3) {
                errs.push_back({at + ".label", "must be one of 0, 1, 2, 3"});
            } else {
                st.label = s["label"].get<int>();
            }
            if (!s.contains("brush_radius_px") || !s["brush_radius_px"].is_number() ||
                !(s["brush_radius_px"].get<double>() > 0) || !(s["brush_radius_px"].get<double>() <= 1024)) {
                errs.push_back({at + ".brush_radius_px", "must be a number in (0, 1024]"});
            } else {
                st.brush_radius_px = s["brush_radius_px"].get<double>();
            }
            if (!s.contains("points") || !s["points"].is_array() || s["points"].empty()) {
                errs.push_back({at + ".points", "must be a nonempty array of [x, y] pairs"});
            } else {
                for (std::size_t k = 0; k < s["points"].size(); ++k) {
                    const json& p = s["points"][k];
                    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number() ||
                        !std::isfinite(p[0].get<double>()) || !std::isfinite(p[1].get<double>())) {
                        errs.push_back({at + ".points[" + std::to_string(k) + "]", "must be [x, y] with finite numbers"});
                        continue;
                    }
                    st.points.push_back({p[0].get<double>(), p[1].get<double>()});
                }
            }
            b.strokes.push_back(std::move(st));
        }
    }
    if (!errs.empty()) throw EditRejected(std::move(errs));
    return b;
}

json to_json(const EditBatch& b) {
    json strokes = json::array();
    for (const Stroke& s : b.strokes) {
        json pts = json::array();
        for (const auto& p : s.points) pts.push_back({p[0], p[1]});
        strokes.push_back({{"label", s.label}, {"brush_radius_px", s.brush_radius_px}, {"points", pts}});
    }
    return {{"base_version", b.base_version}, {"slice_index", b.slice_index}, {"strokes", strokes}};
}

std::size_t rasterize_stroke(LabelMask& mask, const Stroke& stroke) {
    if (stroke.points.empty()) return 0;
    const double r = stroke.brush_radius_px;
    const double r2 = r * r;
    double x0 = stroke.points[0][0], x1 = x0, y0 = stroke.points[0][1], y1 = y0;
    for (const auto& p : stroke.points) {
        x0 = std::min(x0, p[0]);
        x1 = std::max(x1, p[0]);
        y0 = std::min(y0, p[1]);
        y1 = std::max(y1, p[1]);
    }
    const int c_lo = std::max(0, static_cast<int>(std::floor(x0 - r)));
    const int c_hi = std::min(mask.cols - 1, static_cast<int>(std::ceil(x1 + r)));
    const int r_lo = std::max(0, static_cast<int>(std::floor(y0 - r)));
    const int r_hi = std::min(mask.rows - 1, static_cast<int>(std::ceil(y1 + r)));
    const auto label = static_cast<std::uint8_t>(stroke.label);
    std::size_t changed = 0;
    for (int row = r_lo; row <= r_hi; ++row) {
        for (int col = c_lo; col <= c_hi; ++col) {
            bool hit = false;
            for (std::size_t i = 0; i < stroke.points.size() && !hit; ++i) {
                const auto& a = stroke.points[i];
                const auto& b = i + 1 < stroke.points.size() ? stroke.points[i + 1] : a;
                const double dx = b[0] - a[0], dy = b[1] - a[1];
                const double len2 = dx * dx + dy * dy;
                double t = 0.0;
                if (len2 > 0) t = std::clamp(((col - a[0]) * dx + (row - a[1]) * dy) / len2, 0.0, 1.0);
                const double ex = col - (a[0] + t * dx), ey = row - (a[1] + t * dy);
                hit = ex * ex + ey * ey <= r2;
            }
            if (hit && mask.at(row, col) != label) {
                mask.at(row, col) = label;
                ++changed;
            }
        }
    }
    return changed;
}

void check_bounds(const EditBatch& b, const Dims& dims) {
    std::vector<FieldError> errs;
    if (b.slice_index < 0 || b.slice_index >= dims.d) {
        errs.push_back({"slice_index", "must be in [0, " + std::to_string(dims.d) + ")"});
    }
    for (std::size_t i = 0; i < b.strokes.size(); ++i) {
        for (std::size_t k = 0; k < b.strokes[i].points.size(); ++k) {
            const auto& p = b.strokes[i].points[k];
            if (p[0] < 0 || p[0] > dims.w - 1 || p[1] < 0 || p[1] > dims.h - 1) {
                errs.push_back({"strokes[" + std::to_string(i) + "].points[" + std::to_string(k) + "]",
                                "outside the " + std::to_string(dims.w) + " x " + std::to_string(dims.h) + " slice"});
            }
        }
    }
    if (!errs.empty()) throw EditRejected(std::move(errs));
}

json to_json(const StudySummary& s) {
    return {{"id", s.id},
            {"dims", {s.dims.d, s.dims.h, s.dims.w}},
            {"spacing", {s.spacing.sz, s.spacing.sy, s.spacing.sx}},
            {"localization", localization_json(s.localization)},
            {"mask_version", s.mask_version}};
}

std::vector<LabelMask> baseline_masks(const Volume& v, const std::optional<Localization>& loc, const SegParams& p) {
    const Dims& d = v.dims();
    std::vector<LabelMask> masks(static_cast<std::size_t>(d.d), LabelMask(d.h, d.w));
    const int lo = loc ? loc->start : 0, hi = loc ? loc->end : d.d - 1;
    for (int k = lo; k <= hi; ++k) {
        masks[static_cast<std::size_t>(k)] = segment_slice(extract_plane(v, Plane::axial, k), p).mask;
    }
    return masks;
}

std::shared_ptr<Study> Study::open(const fs::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IoError("cannot read " + (dir / "meta.json").string());
    std::shared_ptr<Study> s(new Study());
    s->dir_ = dir;
    try {
        const json meta = json::parse(in);
        s->id_ = meta.at("id").get<std::string>();
        s->localization_ = localization_from_json(meta.at("localization"));
        s->seg_params_ = seg_params_from_json(meta.value("seg_params", json::object()));
        s->volume_ = load_volume(dir / "volume.rawv");
        auto state = std::make_shared<MaskState>();
        state->version = meta.at("mask_version").get<long>();
        state->masks = ingest_mask_stack(dir / "masks.rawv", s->volume_.dims());
        s->state_ = std::move(state);
    } catch (const json::exception& e) {
        throw FormatError((dir / "meta.json").string() + ": " + e.what());
    }
    return s;
}

std::shared_ptr<const MaskState> Study::snapshot() const { return std::atomic_load(&state_); }

void Study::publish(std::shared_ptr<const MaskState> next) { std::atomic_store(&state_, std::move(next)); }

StudySummary Study::summary() const {
    return {id_, volume_.dims(), volume_.spacing(), localization_, snapshot()->version};
}

void Study::persist(const MaskState& state, const json& log_entry) {
    save_masks_atomic(dir_ / "masks.rawv", state.masks, volume_.spacing());
    {
        std::ofstream log(dir_ / "edits.jsonl", std::ios::app);
        if (!log) throw IoError("cannot append to " + (dir_ / "edits.jsonl").string());
        log << log_entry.dump() << '\n';
        if (!log.flush()) throw IoError("write failed for " + (dir_ / "edits.jsonl").string());
    }
    write_text_atomic(dir_ / "meta.json", meta_json(id_, volume_, localization_, state.version, seg_params_).dump(2));
}

long Study::apply(const EditBatch& batch) {
    check_bounds(batch, volume_.dims());
    std::lock_guard lock(write_mutex_);
    const auto current = snapshot();
    if (batch.base_version != current->version) throw VersionConflict(batch.base_version, current->version);
    auto next = std::make_shared<MaskState>(*current);
    paint(next->masks, batch);
    next->version = current->version + 1;
    persist(*next, {{"version", next->version}, {"timestamp", utc_timestamp()}, {"batch", to_json(batch)}});
    publish(next);
    return next->version;
}

long Study::resegment() {
    std::lock_guard lock(write_mutex_);
    const auto current = snapshot();
    auto next = std::make_shared<MaskState>();
    next->masks = baseline_masks(volume_, localization_, seg_params_);
    next->version = current->version + 1;
    persist(*next, {{"version", next->version}, {"timestamp", utc_timestamp()}, {"resegment", to_json(seg_params_)}});
    publish(next);
    return next->version;
}

std::vector<LabelMask> Study::replay() const {
    std::vector<LabelMask> masks = ingest_mask_stack(dir_ / "masks_initial.rawv", volume_.dims());
    std::ifstream log(dir_ / "edits.jsonl");
    if (!log) throw IoError("cannot read " + (dir_ / "edits.jsonl").string());
    std::string line;
    long expected = 1;
    while (std::getline(log, line)) {
        if (line.empty()) continue;
        json entry;
        try {
            entry = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError("edit log line " + std::to_string(expected) + ": " + e.what());
        }
        if (entry.value("version", -1L) != expected) {
            throw FormatError("edit log is out of sequence at version " + std::to_string(expected));
        }
        if (entry.contains("batch")) {
            const EditBatch b = parse_edit_batch(entry["batch"]);
            check_bounds(b, volume_.dims());
            paint(masks, b);
        } else if (entry.contains("resegment")) {
            masks = baseline_masks(volume_, localization_, seg_params_from_json(entry["resegment"]));
        } else {
            throw FormatError("edit log entry " + std::to_string(expected) + " has no batch");
        }
        ++expected;
    }
    return masks;
}

TissueReport Study::report() const { return quantify(snapshot()->masks, volume_, 0); }

std::shared_ptr<Study> create_study(const fs::path& root, const std::string& id, const Volume& volume,
                                    const StudyInit& init) {
    if (!valid_study_id(id)) throw ValidationError("invalid study id '" + id + "'");
    validate_localization(init.localization, volume.dims().d);
    validate(init.seg_params);
    const fs::path dir = root / id;
    if (fs::exists(dir)) throw ValidationError("study '" + id + "' already exists");
    std::vector<LabelMask> masks = init.masks.empty() ? baseline_masks(volume, init.localization, init.seg_params) : init.masks;
    const Dims& d = volume.dims();
    if (static_cast<int>(masks.size()) != d.d) throw ValidationError("mask stack and volume differ in slice count");
    for (const auto& m : masks) {
        if (m.rows != d.h || m.cols != d.w) throw ValidationError("mask slice dims differ from the volume");
    }
    fs::create_directories(dir);
    save_volume(dir / "volume.rawv", volume);
    save_mask_stack(dir / "masks_initial.rawv", masks, volume.spacing());
    save_mask_stack(dir / "masks.rawv", masks, volume.spacing());
    std::ofstream(dir / "edits.jsonl", std::ios::trunc);
    write_text_atomic(dir / "meta.json", meta_json(id, volume, init.localization, 0, init.seg_params).dump(2));
    return Study::open(dir);
}

bool valid_study_id(const std::string& id) {
    if (id.empty() || id.size() > 128 || id[0] == '.') return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
    });
}

StudyStore::StudyStore(fs::path root) : root_(std::move(root)) {
    if (!fs::is_directory(root_)) throw IoError("study root " + root_.string() + " is not a directory");
}

std::vector<std::string> StudyStore::ids() const {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(root_)) {
        const std::string name = e.path().filename().string();
        if (e.is_directory() && valid_study_id(name) && fs::exists(e.path() / "meta.json")) out.push_back(name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::shared_ptr<Study> StudyStore::get(const std::string& id) {
    if (!valid_study_id(id)) return nullptr;
    std::lock_guard lock(mutex_);
    if (auto it = open_.find(id); it != open_.end()) return it->second;
    const fs::path dir = root_ / id;
    if (!fs::exists(dir / "meta.json")) return nullptr;
    auto s = Study::open(dir);
    open_[id] = s;
    return s;
}

}  // namespace abdkit
