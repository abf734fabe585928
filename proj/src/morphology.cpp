#include "abdkit/morphology.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace abdkit::morph {

namespace {

constexpr int kDr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
constexpr int kDc[8] = {0, 0, -1, 1, -1, 1, -1, 1};

// BFS from every seed through pixels where passable(r, c) holds.
template <class Pass>
Binary flood(int rows, int cols, const std::vector<int>& seeds, Pass passable, int nbrs) {
    Binary seen(rows, cols);
    std::vector<int> stack;
    for (int s : seeds) {
        if (!seen.px[static_cast<std::size_t>(s)] && passable(s / cols, s % cols)) {
            seen.px[static_cast<std::size_t>(s)] = 1;
            stack.push_back(s);
        }
    }
    while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int r = cur / cols, c = cur % cols;
        for (int k = 0; k < nbrs; ++k) {
            const int nr = r + kDr[k], nc = c + kDc[k];
            if (nr < 0 || nc < 0 || nr >= rows || nc >= cols) continue;
            const int n = nr * cols + nc;
            if (seen.px[static_cast<std::size_t>(n)] || !passable(nr, nc)) continue;
            seen.px[static_cast<std::size_t>(n)] = 1;
            stack.push_back(n);
        }
    }
    return seen;
}

std::vector<int> border_pixels(int rows, int cols) {
    std::vector<int> out;
    for (int c = 0; c < cols; ++c) {
        out.push_back(c);
        out.push_back((rows - 1) * cols + c);
    }
    for (int r = 1; r + 1 < rows; ++r) {
        out.push_back(r * cols);
        out.push_back(r * cols + cols - 1);
    }
    return out;
}

}  // namespace

std::size_t Binary::count() const {
    return static_cast<std::size_t>(std::count_if(px.begin(), px.end(), [](std::uint8_t v) { return v != 0; }));
}

Components label_components(const Binary& b, Connectivity conn) {
    const int nbrs = static_cast<int>(conn);
    Components out;
    out.label.assign(b.px.size(), 0);
    out.size.push_back(0);
    std::vector<int> stack;
    for (int start = 0; start < static_cast<int>(b.px.size()); ++start) {
        if (!b.px[static_cast<std::size_t>(start)] || out.label[static_cast<std::size_t>(start)]) continue;
        const int id = static_cast<int>(out.size.size());
        std::size_t n = 0;
        out.label[static_cast<std::size_t>(start)] = id;
        stack.push_back(start);
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            ++n;
            const int r = cur / b.cols, c = cur % b.cols;
            for (int k = 0; k < nbrs; ++k) {
                const int nr = r + kDr[k], nc = c + kDc[k];
                if (!b.inside(nr, nc)) continue;
                const auto i = static_cast<std::size_t>(nr * b.cols + nc);
                if (!b.px[i] || out.label[i]) continue;
                out.label[i] = id;
                stack.push_back(static_cast<int>(i));
            }
        }
        out.size.push_back(n);
    }
    return out;
}

Binary largest_component(const Binary& b, Connectivity conn) {
    const Components cc = label_components(b, conn);
    Binary out(b.rows, b.cols);
    if (cc.count() == 0) return out;
    int best = 1;
    for (int id = 2; id <= cc.count(); ++id) {
        if (cc.size[static_cast<std::size_t>(id)] > cc.size[static_cast<std::size_t>(best)]) best = id;
    }
    for (std::size_t i = 0; i < out.px.size(); ++i) out.px[i] = cc.label[i] == best;
    return out;
}

Binary outside_region(const Binary& wall) {
    if (wall.rows == 0 || wall.cols == 0) return wall;
    return flood(wall.rows, wall.cols, border_pixels(wall.rows, wall.cols),
                 [&](int r, int c) { return wall.at(r, c) == 0; }, 4);
}

Binary fill_holes(const Binary& b) {
    const Binary out_reach = outside_region(b);
    Binary out(b.rows, b.cols);
    for (std::size_t i = 0; i < out.px.size(); ++i) out.px[i] = b.px[i] || !out_reach.px[i];
    return out;
}

Binary remove_small(const Binary& b, std::size_t min_pixels, Connectivity conn) {
    const Components cc = label_components(b, conn);
    Binary out(b.rows, b.cols);
    for (std::size_t i = 0; i < out.px.size(); ++i) {
        const int id = cc.label[i];
        out.px[i] = id != 0 && cc.size[static_cast<std::size_t>(id)] >= min_pixels;
    }
    return out;
}

std::vector<Offset> disk(double radius_mm, double sy, double sx) {
    std::vector<Offset> se;
    const int ry = static_cast<int>(std::floor(radius_mm / sy));
    const int rx = static_cast<int>(std::floor(radius_mm / sx));
    for (int dy = -ry; dy <= ry; ++dy) {
        for (int dx = -rx; dx <= rx; ++dx) {
            if ((dy * sy) * (dy * sy) + (dx * sx) * (dx * sx) <= radius_mm * radius_mm + 1e-9) se.push_back({dy, dx});
        }
    }
    return se;
}

Binary dilate(const Binary& b, const std::vector<Offset>& se) {
    Binary out(b.rows, b.cols);
    for (int r = 0; r < b.rows; ++r) {
        for (int c = 0; c < b.cols; ++c) {
            if (!b.at(r, c)) continue;
            for (const auto& o : se) {
                const int nr = r + o.dy, nc = c + o.dx;
                if (out.inside(nr, nc)) out.at(nr, nc) = 1;
            }
        }
    }
    return out;
}

Binary erode(const Binary& b, const std::vector<Offset>& se) {
    Binary out(b.rows, b.cols);
    for (int r = 0; r < b.rows; ++r) {
        for (int c = 0; c < b.cols; ++c) {
            bool all = true;
            for (const auto& o : se) {
                const int nr = r + o.dy, nc = c + o.dx;
                if (!b.inside(nr, nc) || !b.at(nr, nc)) {
                    all = false;
                    break;
                }
            }
            out.at(r, c) = all;
        }
    }
    return out;
}

Binary close(const Binary& b, const std::vector<Offset>& se) {
    int py = 0, px = 0;
    for (const auto& o : se) {
        py = std::max(py, std::abs(o.dy));
        px = std::max(px, std::abs(o.dx));
    }
    Binary padded(b.rows + 2 * py, b.cols + 2 * px);
    for (int r = 0; r < b.rows; ++r) {
        for (int c = 0; c < b.cols; ++c) padded.at(r + py, c + px) = b.at(r, c);
    }
    const Binary closed = erode(dilate(padded, se), se);
    Binary out(b.rows, b.cols);
    for (int r = 0; r < b.rows; ++r) {
        for (int c = 0; c < b.cols; ++c) out.at(r, c) = closed.at(r + py, c + px);
    }
    return out;
}

}  // namespace abdkit::morph
