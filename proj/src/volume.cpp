#include "gbt/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gbt/rng.hpp"

namespace gbt {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'G', 'B', 'T', 'V'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kDtypeImage = 0;
constexpr std::uint8_t kDtypeLabels = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint8_t u8() {
        need(1, "header");
        return bytes_[pos_++];
    }
    std::uint16_t u16() {
        need(2, "header");
        std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_]) |
                          static_cast<std::uint16_t>(bytes_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4, "header");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }

    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::uint8_t* cursor() const { return bytes_.data() + pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size())
            throw CodecError(CodecErrorKind::truncated_payload,
                             std::string("gbtv: truncated ") + what);
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

struct Header {
    std::uint8_t dtype = 0;
    std::array<int, 3> dims{};
    std::array<float, 3> spacing{};
    std::array<float, 3> origin{};
    std::uint32_t num_classes = 0;
};

void encode_header(std::vector<std::uint8_t>& out, std::uint8_t dtype,
                   const std::array<int, 3>& dims,
                   const std::array<float, 3>& spacing,
                   const std::array<float, 3>& origin,
                   std::uint32_t num_classes) {
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    put_u16(out, kVersion);
    out.push_back(dtype);
    out.push_back(0);  // reserved
    for (int d : dims) put_u32(out, static_cast<std::uint32_t>(d));
    for (float s : spacing) put_f32(out, s);
    for (float o : origin) put_f32(out, o);
    put_u32(out, num_classes);
}

Header decode_header(Reader& r) {
    std::array<std::uint8_t, 4> magic{};
    for (auto& m : magic) m = r.u8();
    if (magic != kMagic)
        throw CodecError(CodecErrorKind::bad_magic, "gbtv: bad magic bytes");
    const std::uint16_t version = r.u16();
    if (version != kVersion)
        throw CodecError(CodecErrorKind::version_mismatch,
                         "gbtv: unsupported version " + std::to_string(version));
    Header h;
    h.dtype = r.u8();
    if (h.dtype != kDtypeImage && h.dtype != kDtypeLabels)
        throw CodecError(CodecErrorKind::bad_header,
                         "gbtv: unknown dtype code " + std::to_string(h.dtype));
    (void)r.u8();  // reserved
    for (auto& d : h.dims) {
        const std::uint32_t v = r.u32();
        if (v == 0 || v > 1u << 24)
            throw CodecError(CodecErrorKind::bad_header, "gbtv: bad dims");
        d = static_cast<int>(v);
    }
    for (auto& s : h.spacing) {
        s = r.f32();
        if (!(s > 0.0f) || !std::isfinite(s))
            throw CodecError(CodecErrorKind::bad_header, "gbtv: bad spacing");
    }
    for (auto& o : h.origin) o = r.f32();
    h.num_classes = r.u32();
    return h;
}

void check_payload_size(const Reader& r, std::size_t expected) {
    if (r.remaining() < expected)
        throw CodecError(CodecErrorKind::truncated_payload,
                         "gbtv: truncated payload (" +
                             std::to_string(r.remaining()) + " of " +
                             std::to_string(expected) + " bytes)");
    if (r.remaining() > expected)
        throw CodecError(CodecErrorKind::payload_size_mismatch,
                         "gbtv: dims/data-length disagreement (" +
                             std::to_string(r.remaining()) + " payload bytes, " +
                             std::to_string(expected) + " expected)");
}

VoxelGrid decode_image_body(Reader& r, const Header& h) {
    if (h.num_classes != 0)
        throw CodecError(CodecErrorKind::bad_header,
                         "gbtv: image with nonzero num_classes");
    VoxelGrid g;
    g.dims = h.dims;
    g.spacing = h.spacing;
    g.origin = h.origin;
    const std::int64_t n = g.voxel_count();
    check_payload_size(r, static_cast<std::size_t>(n) * 4);
    g.data.resize(static_cast<std::size_t>(n));
    const std::uint8_t* p = r.cursor();
    for (std::int64_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
        g.data[static_cast<std::size_t>(i)] = std::bit_cast<float>(bits);
    }
    return g;
}

LabelMap decode_labels_body(Reader& r, const Header& h) {
    if (h.num_classes == 0)
        throw CodecError(CodecErrorKind::bad_header,
                         "gbtv: label map with num_classes = 0");
    LabelMap m;
    m.dims = h.dims;
    m.spacing = h.spacing;
    m.origin = h.origin;
    m.num_classes = static_cast<int>(h.num_classes);
    const std::int64_t n = m.voxel_count();
    check_payload_size(r, static_cast<std::size_t>(n));
    m.labels.assign(r.cursor(), r.cursor() + n);
    for (std::uint8_t v : m.labels)
        if (v >= h.num_classes)
            throw CodecError(CodecErrorKind::bad_labels,
                             "gbtv: label value " + std::to_string(v) +
                                 " >= num_classes");
    return m;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CodecError(CodecErrorKind::io_failure,
                         "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw CodecError(CodecErrorKind::io_failure,
                         "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw CodecError(CodecErrorKind::io_failure,
                         "short write to " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_gbtv(const VoxelGrid& grid) {
    std::vector<std::uint8_t> out;
    out.reserve(36 + grid.data.size() * 4);
    encode_header(out, kDtypeImage, grid.dims, grid.spacing, grid.origin, 0);
    for (float v : grid.data) put_f32(out, v);
    return out;
}

std::vector<std::uint8_t> encode_gbtv(const LabelMap& labels) {
    std::vector<std::uint8_t> out;
    out.reserve(36 + labels.labels.size());
    encode_header(out, kDtypeLabels, labels.dims, labels.spacing, labels.origin,
                  static_cast<std::uint32_t>(labels.num_classes));
    out.insert(out.end(), labels.labels.begin(), labels.labels.end());
    return out;
}

VoxelGrid decode_gbtv_image(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const Header h = decode_header(r);
    if (h.dtype != kDtypeImage)
        throw CodecError(CodecErrorKind::wrong_dtype,
                         "gbtv: expected image, found label map");
    return decode_image_body(r, h);
}

LabelMap decode_gbtv_labels(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const Header h = decode_header(r);
    if (h.dtype != kDtypeLabels)
        throw CodecError(CodecErrorKind::wrong_dtype,
                         "gbtv: expected label map, found image");
    return decode_labels_body(r, h);
}

std::variant<VoxelGrid, LabelMap> decode_gbtv(
    std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const Header h = decode_header(r);
    if (h.dtype == kDtypeImage) return decode_image_body(r, h);
    return decode_labels_body(r, h);
}

void save_gbtv(const VoxelGrid& grid, const std::filesystem::path& path) {
    write_file(path, encode_gbtv(grid));
}

void save_gbtv(const LabelMap& labels, const std::filesystem::path& path) {
    write_file(path, encode_gbtv(labels));
}

VoxelGrid load_gbtv_image(const std::filesystem::path& path) {
    return decode_gbtv_image(read_file(path));
}

LabelMap load_gbtv_labels(const std::filesystem::path& path) {
    return decode_gbtv_labels(read_file(path));
}

std::variant<VoxelGrid, LabelMap> load_gbtv(const std::filesystem::path& path) {
    return decode_gbtv(read_file(path));
}

// ---------------------------------------------------------------------------

namespace {

std::array<int, 3> resampled_dims(const std::array<int, 3>& dims,
                                  const std::array<float, 3>& spacing,
                                  double target) {
    std::array<int, 3> out{};
    for (int a = 0; a < 3; ++a) {
        const double exact = dims[a] * static_cast<double>(spacing[a]) / target;
        out[a] = std::max(1, static_cast<int>(std::lround(exact)));
    }
    return out;
}

void check_positive_spacing(double target) {
    if (!(target > 0.0))
        throw std::invalid_argument("resample_isotropic: target spacing <= 0");
}

}  // namespace

VoxelGrid resample_isotropic(const VoxelGrid& grid, double target_spacing_mm) {
    check_positive_spacing(target_spacing_mm);
    VoxelGrid out;
    out.dims = resampled_dims(grid.dims, grid.spacing, target_spacing_mm);
    const auto t = static_cast<float>(target_spacing_mm);
    out.spacing = {t, t, t};
    out.origin = grid.origin;
    out.data.resize(static_cast<std::size_t>(out.voxel_count()));

    const auto [D, H, W] = grid.dims;
    std::int64_t o = 0;
    for (int d = 0; d < out.dims[0]; ++d) {
        const double ud = d * target_spacing_mm / grid.spacing[0];
        const int d0 = std::clamp(static_cast<int>(std::floor(ud)), 0, D - 1);
        const int d1 = std::min(d0 + 1, D - 1);
        const double fd = std::clamp(ud - d0, 0.0, 1.0);
        for (int h = 0; h < out.dims[1]; ++h) {
            const double uh = h * target_spacing_mm / grid.spacing[1];
            const int h0 = std::clamp(static_cast<int>(std::floor(uh)), 0, H - 1);
            const int h1 = std::min(h0 + 1, H - 1);
            const double fh = std::clamp(uh - h0, 0.0, 1.0);
            for (int w = 0; w < out.dims[2]; ++w, ++o) {
                const double uw = w * target_spacing_mm / grid.spacing[2];
                const int w0 =
                    std::clamp(static_cast<int>(std::floor(uw)), 0, W - 1);
                const int w1 = std::min(w0 + 1, W - 1);
                const double fw = std::clamp(uw - w0, 0.0, 1.0);

                const double c000 = grid.at(d0, h0, w0), c001 = grid.at(d0, h0, w1);
                const double c010 = grid.at(d0, h1, w0), c011 = grid.at(d0, h1, w1);
                const double c100 = grid.at(d1, h0, w0), c101 = grid.at(d1, h0, w1);
                const double c110 = grid.at(d1, h1, w0), c111 = grid.at(d1, h1, w1);

                const double c00 = c000 + fw * (c001 - c000);
                const double c01 = c010 + fw * (c011 - c010);
                const double c10 = c100 + fw * (c101 - c100);
                const double c11 = c110 + fw * (c111 - c110);
                const double c0 = c00 + fh * (c01 - c00);
                const double c1 = c10 + fh * (c11 - c10);
                out.data[static_cast<std::size_t>(o)] =
                    static_cast<float>(c0 + fd * (c1 - c0));
            }
        }
    }
    return out;
}

LabelMap resample_isotropic(const LabelMap& labels, double target_spacing_mm) {
    check_positive_spacing(target_spacing_mm);
    LabelMap out;
    out.dims = resampled_dims(labels.dims, labels.spacing, target_spacing_mm);
    const auto t = static_cast<float>(target_spacing_mm);
    out.spacing = {t, t, t};
    out.origin = labels.origin;
    out.num_classes = labels.num_classes;
    out.labels.resize(static_cast<std::size_t>(out.voxel_count()));

    std::int64_t o = 0;
    for (int d = 0; d < out.dims[0]; ++d) {
        const int sd = std::clamp(
            static_cast<int>(std::lround(d * target_spacing_mm / labels.spacing[0])),
            0, labels.dims[0] - 1);
        for (int h = 0; h < out.dims[1]; ++h) {
            const int sh = std::clamp(
                static_cast<int>(
                    std::lround(h * target_spacing_mm / labels.spacing[1])),
                0, labels.dims[1] - 1);
            for (int w = 0; w < out.dims[2]; ++w, ++o) {
                const int sw = std::clamp(
                    static_cast<int>(
                        std::lround(w * target_spacing_mm / labels.spacing[2])),
                    0, labels.dims[2] - 1);
                out.labels[static_cast<std::size_t>(o)] = labels.at(sd, sh, sw);
            }
        }
    }
    return out;
}

VoxelGrid znormalize(const VoxelGrid& grid) {
    const std::int64_t n = grid.voxel_count();
    double sum = 0.0;
    for (float v : grid.data) sum += v;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (float v : grid.data) {
        const double d = v - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));

    VoxelGrid out = grid;
    if (sd < 1e-8) {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
        return out;
    }
    const double inv = 1.0 / sd;
    for (auto& v : out.data) v = static_cast<float>((v - mean) * inv);
    return out;
}

namespace {

template <typename T>
std::vector<T> crop_and_flip(const std::vector<T>& src,
                             const std::array<int, 3>& dims,
                             const std::array<int, 3>& offset,
                             const std::array<int, 3>& crop,
                             const std::array<bool, 3>& flip) {
    std::vector<T> out(static_cast<std::size_t>(crop[0]) * crop[1] * crop[2]);
    std::int64_t o = 0;
    for (int d = 0; d < crop[0]; ++d) {
        const int sd = offset[0] + (flip[0] ? crop[0] - 1 - d : d);
        for (int h = 0; h < crop[1]; ++h) {
            const int sh = offset[1] + (flip[1] ? crop[1] - 1 - h : h);
            const std::int64_t row =
                (static_cast<std::int64_t>(sd) * dims[1] + sh) * dims[2];
            if (!flip[2]) {
                const std::int64_t base = row + offset[2];
                for (int w = 0; w < crop[2]; ++w, ++o)
                    out[static_cast<std::size_t>(o)] =
                        src[static_cast<std::size_t>(base + w)];
            } else {
                const std::int64_t base = row + offset[2] + crop[2] - 1;
                for (int w = 0; w < crop[2]; ++w, ++o)
                    out[static_cast<std::size_t>(o)] =
                        src[static_cast<std::size_t>(base - w)];
            }
        }
    }
    return out;
}

}  // namespace

std::pair<VoxelGrid, LabelMap> augment(const VoxelGrid& grid,
                                       const LabelMap& labels,
                                       const AugmentSpec& spec) {
    if (grid.dims != labels.dims)
        throw std::invalid_argument("augment: image/label dims differ");
    for (int a = 0; a < 3; ++a)
        if (spec.crop_dims[a] < 1 || spec.crop_dims[a] > grid.dims[a])
            throw std::invalid_argument("augment: crop larger than volume");

    Rng rng(spec.rng_seed);
    std::array<int, 3> offset{};
    for (int a = 0; a < 3; ++a) {
        const int slack = grid.dims[a] - spec.crop_dims[a];
        offset[a] = slack == 0 ? 0
                               : static_cast<int>(rng.below(
                                     static_cast<std::uint64_t>(slack) + 1));
    }
    std::array<bool, 3> flip{false, false, false};
    for (int a = 0; a < 3; ++a)
        if (spec.flip_axes[a]) flip[a] = rng.coin();

    VoxelGrid gout;
    gout.dims = spec.crop_dims;
    gout.spacing = grid.spacing;
    gout.origin = grid.origin;
    gout.data = crop_and_flip(grid.data, grid.dims, offset, spec.crop_dims, flip);

    LabelMap lout;
    lout.dims = spec.crop_dims;
    lout.spacing = labels.spacing;
    lout.origin = labels.origin;
    lout.num_classes = labels.num_classes;
    lout.labels =
        crop_and_flip(labels.labels, labels.dims, offset, spec.crop_dims, flip);
    return {std::move(gout), std::move(lout)};
}

}  // namespace gbt
