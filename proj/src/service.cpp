#include "abdkit/service.hpp"

#include <charconv>
#include <cmath>

#include "httplib.h"

namespace abdkit {

using nlohmann::json;

std::vector<std::uint8_t> window_to_u8(const ViewSlice2D& slice, const WindowSpec& w) {
    std::vector<std::uint8_t> out(slice.pixels.size());
    const double lo = w.level - w.width / 2.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double t = std::clamp((slice.pixels[i] - lo) / w.width, 0.0, 1.0);
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * t));
    }
    return out;
}

LabelMask mask_plane(const std::vector<LabelMask>& masks, Plane plane, int index) {
    if (masks.empty()) throw RangeError("empty mask stack");
    const int d = static_cast<int>(masks.size()), h = masks[0].rows, w = masks[0].cols;
    const int limit = plane == Plane::axial ? d : plane == Plane::coronal ? h : w;
    if (index < 0 || index >= limit) {
        throw RangeError(to_string(plane) + " index " + std::to_string(index) + " outside [0, " + std::to_string(limit) + ")");
    }
    if (plane == Plane::axial) return masks[static_cast<std::size_t>(index)];
    LabelMask out(d, plane == Plane::coronal ? w : h);
    for (int k = 0; k < d; ++k) {
        for (int j = 0; j < out.cols; ++j) {
            out.at(k, j) = plane == Plane::coronal ? masks[static_cast<std::size_t>(k)].at(index, j)
                                                   : masks[static_cast<std::size_t>(k)].at(j, index);
        }
    }
    return out;
}

namespace {

// Query parameter problems are answered with 422 and a field list.
struct BadQuery {
    std::string field;
    std::string message;
};

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
}

void send_field_errors(httplib::Response& res, const std::vector<FieldError>& errors) {
    json arr = json::array();
    for (const auto& e : errors) arr.push_back({{"field", e.field}, {"message", e.message}});
    send_json(res, 422, {{"error", "validation failed"}, {"errors", arr}});
}

int int_param(const httplib::Request& req, const char* name) {
    if (!req.has_param(name)) throw BadQuery{name, "missing"};
    const std::string v = req.get_param_value(name);
    int out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw BadQuery{name, "must be an integer"};
    return out;
}

Plane plane_param(const httplib::Request& req) {
    const std::string p = req.has_param("plane") ? req.get_param_value("plane") : "axial";
    if (p == "axial") return Plane::axial;
    if (p == "coronal") return Plane::coronal;
    if (p == "sagittal") return Plane::sagittal;
    throw BadQuery{"plane", "must be axial, coronal or sagittal"};
}

WindowSpec window_param(const httplib::Request& req) {
    WindowSpec w;
    if (!req.has_param("window")) return w;
    const std::string v = req.get_param_value("window");
    const auto comma = v.find(',');
    try {
        if (comma == std::string::npos) throw std::invalid_argument("no comma");
        std::size_t used = 0;
        w.level = std::stod(v.substr(0, comma), &used);
        if (used != comma) throw std::invalid_argument("level");
        const std::string rest = v.substr(comma + 1);
        w.width = std::stod(rest, &used);
        if (used != rest.size()) throw std::invalid_argument("width");
    } catch (const std::exception&) {
        throw BadQuery{"window", "must be level,width"};
    }
    if (!std::isfinite(w.level) || !(w.width > 0) || !std::isfinite(w.width)) {
        throw BadQuery{"window", "width must be positive and both values finite"};
    }
    return w;
}

void check_index(Plane plane, int index, const Dims& d) {
    const int limit = plane == Plane::axial ? d.d : plane == Plane::coronal ? d.h : d.w;
    if (index < 0 || index >= limit) {
        throw BadQuery{"index", "must be in [0, " + std::to_string(limit) + ") for the " + to_string(plane) + " plane"};
    }
}

}  // namespace

struct Service::Impl {
    ServiceOptions options;
    StudyStore store;
    httplib::Server server;

    explicit Impl(ServiceOptions o) : options(std::move(o)), store(options.data_dir) { routes(); }

    // Resolves the {id} capture; sends 404 and returns nullptr when unknown.
    std::shared_ptr<Study> study(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        auto s = store.get(id);
        if (!s) send_error(res, 404, "unknown study '" + id + "'");
        return s;
    }

    template <class Fn>
    httplib::Server::Handler guarded(Fn fn) {
        return [this, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                fn(req, res);
            } catch (const BadQuery& q) {
                send_field_errors(res, {{q.field, q.message}});
            } catch (const EditRejected& e) {
                send_field_errors(res, e.errors());
            } catch (const VersionConflict& e) {
                send_json(res, 409, {{"error", e.what()}, {"current_version", e.current()}});
            } catch (const ValidationError& e) {
                send_error(res, 422, e.what());
            } catch (const RangeError& e) {
                send_error(res, 422, e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, e.what());
            }
        };
    }

    void routes() {
        server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
        server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            res.status = 204;
        });

        server.Get("/api/studies", guarded([this](const httplib::Request&, httplib::Response& res) {
            json arr = json::array();
            for (const auto& id : store.ids()) {
                if (auto s = store.get(id)) arr.push_back(to_json(s->summary()));
            }
            send_json(res, 200, arr);
        }));

        server.Get(R"(/api/studies/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            if (auto s = study(req, res)) send_json(res, 200, to_json(s->summary()));
        }));

        server.Get(R"(/api/studies/([^/]+)/slice)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto s = study(req, res);
            if (!s) return;
            const Plane plane = plane_param(req);
            const int index = int_param(req, "index");
            const WindowSpec w = window_param(req);
            check_index(plane, index, s->volume().dims());
            const ViewSlice2D slice = extract_plane(s->volume(), plane, index);
            res.set_content(png::encode_gray(slice.rows, slice.cols, window_to_u8(slice, w)), "image/png");
        }));

        server.Get(R"(/api/studies/([^/]+)/mask)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto s = study(req, res);
            if (!s) return;
            const Plane plane = plane_param(req);
            const int index = int_param(req, "index");
            const std::string format = req.has_param("format") ? req.get_param_value("format") : "png";
            if (format != "png" && format != "raw") throw BadQuery{"format", "must be png or raw"};
            check_index(plane, index, s->volume().dims());
            const auto snap = s->snapshot();
            const LabelMask m = mask_plane(snap->masks, plane, index);
            res.set_header("X-Mask-Version", std::to_string(snap->version));
            res.set_header("X-Rows", std::to_string(m.rows));
            res.set_header("X-Cols", std::to_string(m.cols));
            if (format == "raw") {
                res.set_content(std::string(m.labels.begin(), m.labels.end()), "application/octet-stream");
            } else {
                res.set_content(png::encode_indexed(m.rows, m.cols, m.labels, kMaskPalette), "image/png");
            }
        }));

        server.Post(R"(/api/studies/([^/]+)/edits)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto s = study(req, res);
            if (!s) return;
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::exception& e) {
                send_field_errors(res, {{"", std::string("body is not valid JSON: ") + e.what()}});
                return;
            }
            const long v = s->apply(parse_edit_batch(body));
            send_json(res, 200, {{"new_version", v}});
        }));

        server.Post(R"(/api/studies/([^/]+)/resegment)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            if (auto s = study(req, res)) send_json(res, 200, {{"new_version", s->resegment()}});
        }));

        server.Get(R"(/api/studies/([^/]+)/report)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto s = study(req, res);
            if (!s) return;
            const auto snap = s->snapshot();
            res.set_header("X-Mask-Version", std::to_string(snap->version));
            send_json(res, 200, to_json(quantify(snap->masks, s->volume(), 0)));
        }));

        if (!options.static_dir.empty() && !server.set_mount_point("/", options.static_dir.string())) {
            throw IoError("cannot serve static files from " + options.static_dir.string());
        }
    }
};

Service::Service(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}
Service::~Service() { stop(); }

StudyStore& Service::store() { return impl_->store; }

bool Service::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }
int Service::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }
bool Service::run() { return impl_->server.listen_after_bind(); }
void Service::stop() {
    if (impl_) impl_->server.stop();
}
void Service::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace abdkit
