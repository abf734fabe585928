#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "abdkit/error.hpp"
#include "abdkit/volume.hpp"

static_assert(std::endian::native == std::endian::little, "file codecs assume a little-endian host");

namespace abdkit {

namespace {

constexpr std::array<char, 8> kRawvMagic = {'R', 'A', 'W', 'V', '\0', '\0', '\0', '\1'};
constexpr std::size_t kNiftiHeaderSize = 348;

std::vector<char> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

std::int32_t bswap32(std::int32_t v) {
    const auto u = static_cast<std::uint32_t>(v);
    return static_cast<std::int32_t>((u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24));
}

template <typename T>
T load_le(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void store_le(std::vector<char>& buf, std::size_t offset, T v) {
    std::memcpy(buf.data() + offset, &v, sizeof(T));
}

std::size_t voxel_size(VoxelType t) {
    switch (t) {
    case VoxelType::uint8: return 1;
    case VoxelType::int16: return 2;
    case VoxelType::float32: return 4;
    }
    return 0;
}

VoxelType voxel_type_from_string(const std::string& s) {
    if (s == "uint8") return VoxelType::uint8;
    if (s == "int16") return VoxelType::int16;
    if (s == "float32") return VoxelType::float32;
    throw UnsupportedError("unsupported RAWV dtype '" + s + "'");
}

std::vector<float> decode_payload(const char* p, std::size_t n, VoxelType t) {
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (t) {
        case VoxelType::uint8: out[i] = static_cast<unsigned char>(p[i]); break;
        case VoxelType::int16: out[i] = load_le<std::int16_t>(p + 2 * i); break;
        case VoxelType::float32: out[i] = load_le<float>(p + 4 * i); break;
        }
    }
    return out;
}

void encode_payload(std::vector<char>& buf, std::size_t offset, std::span<const float> values, VoxelType t) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float v = values[i];
        switch (t) {
        case VoxelType::uint8:
            if (!(v >= 0.0f && v <= 255.0f) || v != std::floor(v))
                throw ValidationError("value not representable as uint8");
            buf[offset + i] = static_cast<char>(static_cast<unsigned char>(v));
            break;
        case VoxelType::int16:
            if (!(v >= -32768.0f && v <= 32767.0f) || v != std::floor(v))
                throw ValidationError("value not representable as int16");
            store_le<std::int16_t>(buf, offset + 2 * i, static_cast<std::int16_t>(v));
            break;
        case VoxelType::float32: store_le<float>(buf, offset + 4 * i, v); break;
        }
    }
}

void check_dims(Dims d) {
    if (d.d < 1 || d.h < 1 || d.w < 1) throw FormatError("dims must all be >= 1");
}

RawGrid parse_rawv(const std::vector<char>& bytes) {
    if (bytes.size() < kRawvMagic.size() + 4) throw FormatError("RAWV file truncated before header");
    const auto hdr_len = load_le<std::uint32_t>(bytes.data() + 8);
    const std::size_t payload_at = 12 + static_cast<std::size_t>(hdr_len);
    if (bytes.size() < payload_at) throw FormatError("RAWV header truncated");

    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + static_cast<std::ptrdiff_t>(payload_at));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("RAWV header is not valid JSON: ") + e.what());
    }
    RawGrid g;
    try {
        const auto dims = hdr.at("dims").get<std::array<int, 3>>();
        const auto sp = hdr.at("spacing").get<std::array<double, 3>>();
        g.dims = {dims[0], dims[1], dims[2]};
        g.spacing = {sp[0], sp[1], sp[2]};
        g.type = voxel_type_from_string(hdr.at("dtype").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("RAWV header missing or mistyped field: ") + e.what());
    }
    check_dims(g.dims);
    validate_spacing(g.spacing);
    const std::size_t n = g.dims.count();
    if (bytes.size() != payload_at + n * voxel_size(g.type)) {
        throw FormatError("RAWV payload size does not match dims and dtype");
    }
    g.values = decode_payload(bytes.data() + payload_at, n, g.type);
    return g;
}

RawGrid parse_nifti(const std::vector<char>& bytes) {
    if (bytes.size() < kNiftiHeaderSize + 4) throw FormatError("NIfTI header truncated");
    const char* h = bytes.data();
    const auto sizeof_hdr = load_le<std::int32_t>(h);
    if (sizeof_hdr != 348) {
        if (bswap32(sizeof_hdr) == 348) throw UnsupportedError("big-endian NIfTI is not supported");
        throw FormatError("bad NIfTI sizeof_hdr");
    }
    if (std::memcmp(h + 344, "n+1\0", 4) != 0) {
        throw UnsupportedError("only single-file NIfTI-1 (.nii) is supported");
    }
    const auto ndim = load_le<std::int16_t>(h + 40);
    if (ndim < 2 || ndim > 7) throw FormatError("bad NIfTI dim[0]");
    std::array<int, 8> dim{};
    for (int i = 0; i < 8; ++i) dim[static_cast<std::size_t>(i)] = load_le<std::int16_t>(h + 40 + 2 * i);
    for (int i = 4; i <= ndim; ++i) {
        if (dim[static_cast<std::size_t>(i)] > 1) throw UnsupportedError("NIfTI with more than 3 dimensions");
    }
    RawGrid g;
    g.dims = {ndim >= 3 ? dim[3] : 1, dim[2], dim[1]};
    check_dims(g.dims);

    switch (load_le<std::int16_t>(h + 70)) {
    case 2: g.type = VoxelType::uint8; break;
    case 4: g.type = VoxelType::int16; break;
    case 16: g.type = VoxelType::float32; break;
    default: throw UnsupportedError("NIfTI datatype must be uint8, int16 or float32");
    }
    const float psx = load_le<float>(h + 80);
    const float psy = load_le<float>(h + 84);
    const float psz = ndim >= 3 ? load_le<float>(h + 88) : 1.0f;
    g.spacing = {std::abs(psz) > 0 ? psz : 0.0, psy, psx};
    validate_spacing(g.spacing);

    const auto vox_offset = static_cast<std::size_t>(load_le<float>(h + 108));
    if (vox_offset < kNiftiHeaderSize) throw FormatError("bad NIfTI vox_offset");
    const std::size_t n = g.dims.count();
    if (bytes.size() < vox_offset + n * voxel_size(g.type)) throw FormatError("NIfTI voxel payload truncated");
    g.values = decode_payload(bytes.data() + vox_offset, n, g.type);

    const float slope = load_le<float>(h + 112);
    const float inter = load_le<float>(h + 116);
    if (slope != 0.0f && std::isfinite(slope) && (slope != 1.0f || inter != 0.0f)) {
        for (auto& v : g.values) v = v * slope + inter;
    }
    return g;
}

}  // namespace

std::string to_string(VoxelType t) {
    switch (t) {
    case VoxelType::uint8: return "uint8";
    case VoxelType::int16: return "int16";
    case VoxelType::float32: return "float32";
    }
    return "?";
}

RawGrid read_grid(const std::filesystem::path& path) {
    const auto bytes = read_all(path);
    if (bytes.size() >= kRawvMagic.size() && std::equal(kRawvMagic.begin(), kRawvMagic.end(), bytes.begin())) {
        return parse_rawv(bytes);
    }
    if (bytes.size() >= 4 && (load_le<std::int32_t>(bytes.data()) == 348 ||
                              bswap32(load_le<std::int32_t>(bytes.data())) == 348)) {
        return parse_nifti(bytes);
    }
    throw FormatError("unrecognized file magic in " + path.string());
}

Volume load_volume(const std::filesystem::path& path) {
    RawGrid g = read_grid(path);
    for (auto& v : g.values) {
        if (!std::isfinite(v)) throw ValidationError("non-finite voxel in " + path.string());
        v = std::clamp(v, kMinHu, kMaxHu);
    }
    return Volume(g.dims, g.spacing, std::move(g.values), IntensityDomain::raw_hu);
}

void write_rawv(const std::filesystem::path& path, Dims dims, const Spacing& spacing, VoxelType type,
                std::span<const float> values) {
    if (values.size() != dims.count()) throw ValidationError("value count does not match dims");
    const nlohmann::json hdr = {{"dims", {dims.d, dims.h, dims.w}},
                                {"spacing", {spacing.sz, spacing.sy, spacing.sx}},
                                {"dtype", to_string(type)}};
    const std::string text = hdr.dump();
    std::vector<char> buf(12 + text.size() + values.size() * voxel_size(type));
    std::copy(kRawvMagic.begin(), kRawvMagic.end(), buf.begin());
    store_le<std::uint32_t>(buf, 8, static_cast<std::uint32_t>(text.size()));
    std::copy(text.begin(), text.end(), buf.begin() + 12);
    encode_payload(buf, 12 + text.size(), values, type);
    write_all(path, buf);
}

void write_nifti(const std::filesystem::path& path, Dims dims, const Spacing& spacing, VoxelType type,
                 std::span<const float> values) {
    if (values.size() != dims.count()) throw ValidationError("value count does not match dims");
    if (dims.d > 32767 || dims.h > 32767 || dims.w > 32767) throw ValidationError("dims exceed NIfTI-1 limits");
    constexpr std::size_t vox_offset = 352;
    std::vector<char> buf(vox_offset + values.size() * voxel_size(type), '\0');
    store_le<std::int32_t>(buf, 0, 348);
    const std::array<std::int16_t, 8> dim = {3, static_cast<std::int16_t>(dims.w), static_cast<std::int16_t>(dims.h),
                                             static_cast<std::int16_t>(dims.d), 1, 1, 1, 1};
    for (std::size_t i = 0; i < dim.size(); ++i) store_le<std::int16_t>(buf, 40 + 2 * i, dim[i]);
    const std::int16_t code = type == VoxelType::uint8 ? 2 : type == VoxelType::int16 ? 4 : 16;
    store_le<std::int16_t>(buf, 70, code);
    store_le<std::int16_t>(buf, 72, static_cast<std::int16_t>(8 * voxel_size(type)));
    const std::array<float, 4> pixdim = {1.0f, static_cast<float>(spacing.sx), static_cast<float>(spacing.sy),
                                         static_cast<float>(spacing.sz)};
    for (std::size_t i = 0; i < pixdim.size(); ++i) store_le<float>(buf, 76 + 4 * i, pixdim[i]);
    store_le<float>(buf, 108, static_cast<float>(vox_offset));
    store_le<float>(buf, 112, 1.0f);
    store_le<float>(buf, 116, 0.0f);
    buf[123] = 10;  // xyzt_units: mm, s
    std::memcpy(buf.data() + 344, "n+1\0", 4);
    encode_payload(buf, vox_offset, values, type);
    write_all(path, buf);
}

void save_volume(const std::filesystem::path& path, const Volume& v) {
    if (path.extension() == ".nii") {
        write_nifti(path, v.dims(), v.spacing(), VoxelType::float32, v.voxels());
    } else {
        write_rawv(path, v.dims(), v.spacing(), VoxelType::float32, v.voxels());
    }
}

}  // namespace abdkit
