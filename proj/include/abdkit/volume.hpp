#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace abdkit {

inline constexpr float kMinHu = -1024.0f;
inline constexpr float kMaxHu = 3071.0f;

/// Physical voxel size in mm. `sz` runs along the slice axis.
struct Spacing {
    double sz = 1.0;
    double sy = 1.0;
    double sx = 1.0;

    bool operator==(const Spacing&) const = default;
};

/// Grid extents: D slices of H rows by W columns.
struct Dims {
    int d = 0;
    int h = 0;
    int w = 0;

    std::size_t count() const {
        return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    bool operator==(const Dims&) const = default;
};

enum class IntensityDomain { raw_hu, normalized_unit };

/// Dense D x H x W scalar volume, W fastest. Immutable once constructed.
class Volume {
public:
    Volume() = default;
    /// Validates spacing, voxel count and the value range of `domain`.
    Volume(Dims dims, Spacing spacing, std::vector<float> voxels,
           IntensityDomain domain = IntensityDomain::raw_hu);

    const Dims& dims() const noexcept { return dims_; }
    const Spacing& spacing() const noexcept { return spacing_; }
    IntensityDomain domain() const noexcept { return domain_; }
    std::span<const float> voxels() const noexcept { return voxels_; }

    float at(int d, int h, int w) const {
        return voxels_[(static_cast<std::size_t>(d) * dims_.h + h) * dims_.w + w];
    }
    std::size_t index(int d, int h, int w) const {
        return (static_cast<std::size_t>(d) * dims_.h + h) * dims_.w + w;
    }

private:
    Dims dims_;
    Spacing spacing_;
    IntensityDomain domain_ = IntensityDomain::raw_hu;
    std::vector<float> voxels_;
};

void validate_spacing(const Spacing& s);

enum class Plane { axial, coronal, sagittal };

std::string to_string(Plane p);
Plane plane_from_string(const std::string& s);

/// A 2D cut through a volume. Rows of coronal/sagittal views run along the slice axis.
struct ViewSlice2D {
    Plane plane = Plane::axial;
    int rows = 0;
    int cols = 0;
    std::vector<float> pixels;
    double row_spacing = 1.0;  ///< mm between rows
    double col_spacing = 1.0;  ///< mm between columns

    float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }
};

struct WindowSpec {
    double level = 40.0;
    double width = 400.0;
};

/// Trilinear resampling on the voxel grid (align-corners false).
/// Output spacing is scaled so that dims * spacing stays constant on every axis.
Volume resample_trilinear(const Volume& v, Dims target);

/// Maps HU to [0, 1]: clamp((hu - (level - width / 2)) / width, 0, 1).
Volume window_normalize(const Volume& v, const WindowSpec& w);

struct CenterViews {
    ViewSlice2D coronal;   ///< D x W, row index floor(H / 2)
    ViewSlice2D sagittal;  ///< D x H, column index floor(W / 2)
};

CenterViews extract_center_views(const Volume& v);

/// Any plane at a given index; bounds-checked.
ViewSlice2D extract_plane(const Volume& v, Plane plane, int index);

/// Axial slices start..end inclusive.
std::vector<ViewSlice2D> extract_axial_range(const Volume& v, int start, int end);

// --- file I/O -------------------------------------------------------------

enum class VoxelType { uint8, int16, float32 };

std::string to_string(VoxelType t);

/// Raw grid as stored on disk, before any HU interpretation.
struct RawGrid {
    Dims dims;
    Spacing spacing;
    VoxelType type = VoxelType::float32;
    std::vector<float> values;
};

/// Reads a RAWV or uncompressed little-endian NIfTI-1 file (detected by content).
RawGrid read_grid(const std::filesystem::path& path);

/// Reads a CT volume; values are clamped to the 12-bit HU range.
Volume load_volume(const std::filesystem::path& path);

/// RAWV writer. Values must be representable in `type`.
void write_rawv(const std::filesystem::path& path, Dims dims, const Spacing& spacing, VoxelType type,
                std::span<const float> values);
void write_nifti(const std::filesystem::path& path, Dims dims, const Spacing& spacing, VoxelType type,
                 std::span<const float> values);

/// Saves as float32 RAWV (or NIfTI when the extension is .nii); RAWV round trips bit-exactly.
void save_volume(const std::filesystem::path& path, const Volume& v);

}  // namespace abdkit
