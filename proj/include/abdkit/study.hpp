#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "abdkit/error.hpp"
#include "abdkit/label_mask.hpp"
#include "abdkit/metrics.hpp"
#include "abdkit/segment.hpp"
#include "abdkit/volume.hpp"

namespace abdkit {

/// One brush stroke on an axial slice. Points are (x, y) = (column, row) pixel coordinates.
struct Stroke {
    int label = 0;
    double brush_radius_px = 1.0;
    std::vector<std::array<double, 2>> points;

    bool operator==(const Stroke&) const = default;
};

struct EditBatch {
    long base_version = 0;
    int slice_index = 0;
    std::vector<Stroke> strokes;

    bool operator==(const EditBatch&) const = default;
};

struct FieldError {
    std::string field;
    std::string message;
};

/// Malformed edit batch; carries one entry per offending field.
class EditRejected : public ValidationError {
public:
    explicit EditRejected(std::vector<FieldError> errors);
    const std::vector<FieldError>& errors() const noexcept { return errors_; }

private:
    std::vector<FieldError> errors_;
};

/// The batch was based on a mask version that is no longer current.
class VersionConflict : public Error {
public:
    VersionConflict(long base, long current);
    long current() const noexcept { return current_; }

private:
    long current_;
};

/// Parses the wire form {"base_version", "slice_index", "strokes": [{"label", "brush_radius_px", "points": [[x, y], ...]}]}.
/// Throws EditRejected listing every structural problem.
EditBatch parse_edit_batch(const nlohmann::json& j);
nlohmann::json to_json(const EditBatch& b);

/// Paints every pixel whose centre lies within brush_radius_px of the polyline.
/// Returns the number of pixels whose label changed.
std::size_t rasterize_stroke(LabelMask& mask, const Stroke& stroke);

/// Throws EditRejected if a stroke leaves the slice or the slice index is out of range.
void check_bounds(const EditBatch& b, const Dims& dims);

struct Localization {
    int start = 0;
    int end = 0;
    std::string method;  ///< "model", "manual", ...

    bool operator==(const Localization&) const = default;
};

/// Immutable mask state; readers hold it while a writer publishes the next one.
struct MaskState {
    long version = 0;
    std::vector<LabelMask> masks;
};

struct StudySummary {
    std::string id;
    Dims dims;
    Spacing spacing;
    std::optional<Localization> localization;
    long mask_version = 0;
};

nlohmann::json to_json(const StudySummary& s);

/// A study directory: volume.rawv, masks_initial.rawv, masks.rawv, edits.jsonl, meta.json.
class Study {
public:
    static std::shared_ptr<Study> open(const std::filesystem::path& dir);

    const std::string& id() const { return id_; }
    const std::filesystem::path& dir() const { return dir_; }
    const Volume& volume() const { return volume_; }
    const std::optional<Localization>& localization() const { return localization_; }
    const SegParams& seg_params() const { return seg_params_; }

    std::shared_ptr<const MaskState> snapshot() const;
    StudySummary summary() const;

    /// Applies all strokes or none. Returns the new mask version.
    /// Throws EditRejected (bad geometry) or VersionConflict.
    long apply(const EditBatch& batch);
    /// Reruns the baseline segmenter over the localized range and bumps the version.
    long resegment();

    /// Rebuilds the mask stack from masks_initial.rawv and the edit log.
    std::vector<LabelMask> replay() const;
    /// Quantification of the current masks over every slice.
    TissueReport report() const;

private:
    Study() = default;
    void publish(std::shared_ptr<const MaskState> next);
    void persist(const MaskState& state, const nlohmann::json& log_entry);

    std::string id_;
    std::filesystem::path dir_;
    Volume volume_;
    std::optional<Localization> localization_;
    SegParams seg_params_;
    std::mutex write_mutex_;
    std::shared_ptr<const MaskState> state_;
};

struct StudyInit {
    std::optional<Localization> localization;
    /// Initial masks; when empty the baseline segmenter labels the localized slices.
    std::vector<LabelMask> masks;
    SegParams seg_params;
};

/// Creates <root>/<id>/ and returns the opened study. Throws ValidationError if it already exists.
std::shared_ptr<Study> create_study(const std::filesystem::path& root, const std::string& id, const Volume& volume,
                                    const StudyInit& init = {});

/// Baseline masks for a study: segmented slices inside the range, background elsewhere.
std::vector<LabelMask> baseline_masks(const Volume& v, const std::optional<Localization>& loc, const SegParams& p);

/// Studies under a root directory (ABDKIT_DATA_DIR), opened on first use.
class StudyStore {
public:
    explicit StudyStore(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::vector<std::string> ids() const;
    /// nullptr when no such study exists.
    std::shared_ptr<Study> get(const std::string& id);

private:
    std::filesystem::path root_;
    std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Study>> open_;
};

/// Study ids are restricted to [A-Za-z0-9_.-] and may not start with '.'.
bool valid_study_id(const std::string& id);

}  // namespace abdkit
