#include "abdkit/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "abdkit/error.hpp"

namespace abdkit::ad {

namespace {

constexpr char kMagic[4] = {'A', 'B', 'D', 'T'};

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

}  // namespace

void save_blob(const std::filesystem::path& path, const TensorBlob& blob) {
    nlohmann::json manifest = {{"tensors", nlohmann::json::array()}, {"meta", blob.meta}};
    for (const auto& t : blob.tensors) {
        manifest["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"dtype", "float32"}});
    }
    const std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const auto len = static_cast<std::uint32_t>(text.size());
    out.write(kMagic, 4);
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : blob.tensors) {
        std::vector<float> f(t.tensor.numel());
        for (std::size_t i = 0; i < f.size(); ++i) {
            const double v = t.tensor[i];
            if (!std::isfinite(v) || std::abs(v) > std::numeric_limits<float>::max()) {
                throw ValidationError("tensor '" + t.name + "' holds a value not representable as float32");
            }
            f[i] = static_cast<float>(v);
        }
        out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

TensorBlob load_blob(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(path.string() + ": not a tensor blob");
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 4, 4);
    if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw FormatError(path.string() + ": truncated manifest");
    TensorBlob blob;
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(8, len));
        blob.meta = manifest.value("meta", nlohmann::json::object());
        std::size_t offset = 8 + len;
        for (const auto& e : manifest.at("tensors")) {
            if (e.at("dtype") != "float32") throw FormatError("unsupported tensor dtype " + e.at("dtype").dump());
            Shape shape = e.at("shape").get<Shape>();
            for (int d : shape) {
                if (d < 0) throw FormatError("negative tensor extent");
            }
            const std::size_t n = shape_numel(shape);
            if (bytes.size() < offset + n * sizeof(float)) throw FormatError(path.string() + ": truncated payload");
            std::vector<float> f(n);
            std::memcpy(f.data(), bytes.data() + offset, n * sizeof(float));
            offset += n * sizeof(float);
            blob.tensors.push_back({e.at("name").get<std::string>(), Tensor(std::move(shape), {f.begin(), f.end()})});
        }
        if (offset != bytes.size()) throw FormatError(path.string() + ": trailing bytes after payload");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad manifest: " + e.what());
    }
    return blob;
}

}  // namespace abdkit::ad
