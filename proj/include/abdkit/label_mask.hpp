#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "abdkit/volume.hpp"

namespace abdkit {

enum class Tissue : std::uint8_t { background = 0, muscle = 1, sfa = 2, vfa = 3 };

inline constexpr std::array<Tissue, 3> kTissueClasses = {Tissue::muscle, Tissue::sfa, Tissue::vfa};

const char* tissue_name(Tissue t);

/// Per-pixel labels of one axial slice: 0 background, 1 muscle, 2 SFA, 3 VFA.
struct LabelMask {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> labels;

    LabelMask() = default;
    LabelMask(int r, int c) : rows(r), cols(c), labels(static_cast<std::size_t>(r) * c, 0) {}

    std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * cols + c]; }
    std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t count(Tissue t) const;
    /// Binary mask of one class.
    std::vector<std::uint8_t> binary(Tissue t) const;

    bool operator==(const LabelMask&) const = default;
};

/// Writes a stack of equally sized masks as a uint8 volume (RAWV, or NIfTI for .nii).
void save_mask_stack(const std::filesystem::path& path, const std::vector<LabelMask>& masks, const Spacing& spacing);

/// Reads a uint8 mask volume and validates dims and the label alphabet.
/// `expected` dims with d == 0 accept any slice count.
std::vector<LabelMask> ingest_mask_stack(const std::filesystem::path& path, Dims expected);

/// Single-slice form: the file must hold exactly one rows x cols slice.
LabelMask ingest_mask(const std::filesystem::path& path, int rows, int cols);

}  // namespace abdkit
