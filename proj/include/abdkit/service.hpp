#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "abdkit/png.hpp"
#include "abdkit/study.hpp"

namespace abdkit {

/// Overlay palette for mask PNGs: background transparent, muscle red, SFA yellow, VFA blue.
inline constexpr png::Rgba kMaskPalette[4] = {{0, 0, 0, 0}, {255, 0, 0, 255}, {255, 255, 0, 255}, {0, 0, 255, 255}};

/// Maps HU to 0..255 through a window: round(255 * clamp((hu - (level - width / 2)) / width, 0, 1)).
std::vector<std::uint8_t> window_to_u8(const ViewSlice2D& slice, const WindowSpec& w);

/// Axial, coronal or sagittal cut through a mask stack, laid out like extract_plane.
LabelMask mask_plane(const std::vector<LabelMask>& masks, Plane plane, int index);

struct ServiceOptions {
    std::filesystem::path data_dir;
    /// Optional directory served under / (the refinement UI build).
    std::filesystem::path static_dir;
};

/// HTTP API over a StudyStore. Requests run on the server's worker threads.
class Service {
public:
    explicit Service(ServiceOptions options);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    StudyStore& store();

    /// Binds and serves until stop(); returns false if the address cannot be bound.
    bool listen(const std::string& host, int port);
    /// Binds to a free port and returns it; call run() afterwards.
    int bind_any_port(const std::string& host);
    bool run();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace abdkit
