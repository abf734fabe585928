#pragma once

#include <cstdint>
#include <vector>

namespace abdkit::morph {

/// Row-major binary image; nonzero is foreground.
struct Binary {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> px;

    Binary() = default;
    Binary(int r, int c, std::uint8_t fill = 0) : rows(r), cols(c), px(static_cast<std::size_t>(r) * c, fill) {}

    std::uint8_t at(int r, int c) const { return px[static_cast<std::size_t>(r) * cols + c]; }
    std::uint8_t& at(int r, int c) { return px[static_cast<std::size_t>(r) * cols + c]; }
    bool inside(int r, int c) const { return r >= 0 && c >= 0 && r < rows && c < cols; }
    std::size_t count() const;
    bool operator==(const Binary&) const = default;
};

enum class Connectivity { four = 4, eight = 8 };

struct Components {
    std::vector<int> label;  ///< 0 background, 1..n component id
    std::vector<std::size_t> size;  ///< size[id], size[0] unused
    int count() const { return static_cast<int>(size.size()) - 1; }
};

Components label_components(const Binary& b, Connectivity conn);

/// Largest component (ties go to the one found first in raster order); empty if none.
Binary largest_component(const Binary& b, Connectivity conn);

/// Sets every background pixel not 4-reachable from the image border.
Binary fill_holes(const Binary& b);

/// Background pixels 4-reachable from the border without crossing the foreground.
Binary outside_region(const Binary& wall);

/// Drops components smaller than `min_pixels`.
Binary remove_small(const Binary& b, std::size_t min_pixels, Connectivity conn);

/// Elliptical structuring element for a physical radius: all (dy, dx) with
/// (dy*sy)^2 + (dx*sx)^2 <= r^2.
struct Offset {
    int dy;
    int dx;
};
std::vector<Offset> disk(double radius_mm, double sy, double sx);

Binary dilate(const Binary& b, const std::vector<Offset>& se);
/// Out-of-image pixels count as background.
Binary erode(const Binary& b, const std::vector<Offset>& se);
/// Closing computed on an internally padded canvas, so the result does not
/// depend on how much background surrounds the foreground.
Binary close(const Binary& b, const std::vector<Offset>& se);

}  // namespace abdkit::morph
