#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "medvae/common.hpp"

namespace medvae {

// Grayscale 2D image, values in [0,1], stored row-major [H][W] (B=1).
struct Image2D {
    int64_t height = 0;
    int64_t width = 0;
    int64_t channels = 1;
    std::vector<double> values;

    double at(int64_t r, int64_t c) const { return values[static_cast<size_t>(r * width + c)]; }
    double& at(int64_t r, int64_t c) { return values[static_cast<size_t>(r * width + c)]; }
};

// 3D volume with extents H, W, S, stored row-major [H][W][S] (B=1 unless set).
struct Volume3D {
    int64_t height = 0;
    int64_t width = 0;
    int64_t slices = 0;
    int64_t channels = 1;
    std::vector<double> values;

    double at(int64_t r, int64_t c, int64_t s) const {
        return values[static_cast<size_t>((r * width + c) * slices + s)];
    }
    double& at(int64_t r, int64_t c, int64_t s) {
        return values[static_cast<size_t>((r * width + c) * slices + s)];
    }
};

// Per-axis (offset, extent) pairs; 2 axes for images, 3 for volumes.
struct BoundingBox {
    std::vector<std::pair<int64_t, int64_t>> axes;

    std::string to_string() const {
        std::string s;
        for (const auto& [off, ext] : axes) {
            if (!s.empty()) s += ",";
            s += std::to_string(off) + "," + std::to_string(ext);
        }
        return s;
    }
};

struct ManifestRecord {
    std::string path;  // resolved to an absolute-ish path on load
    std::optional<int> label;
    std::vector<BoundingBox> boxes;
};

struct DatasetManifest {
    std::string split;  // "train" or "test"
    std::vector<ManifestRecord> records;
};

// ---------------------------------------------------------------------------
// PGM (P5, 8- or 16-bit)
// ---------------------------------------------------------------------------

namespace detail {

inline int pgm_next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok.empty() ? EOF : 0;
}

}  // namespace detail

inline Image2D load_image2d(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("pgm: cannot open " + path);
    std::string tok;
    if (detail::pgm_next_token(in, tok) == EOF || tok != "P5")
        throw FormatError("pgm: malformed header (magic) in " + path);
    int64_t w = 0, h = 0, maxval = 0;
    auto parse_int = [&](int64_t& out, const char* what) {
        if (detail::pgm_next_token(in, tok) == EOF)
            throw FormatError(std::string("pgm: malformed header (") + what + ") in " + path);
        try {
            out = std::stoll(tok);
        } catch (...) {
            throw FormatError(std::string("pgm: malformed header (") + what + ") in " + path);
        }
    };
    parse_int(w, "width");
    parse_int(h, "height");
    parse_int(maxval, "maxval");
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
        throw FormatError("pgm: invalid dimensions or maxval in " + path);
    const bool wide = maxval > 255;
    const size_t n = static_cast<size_t>(w * h);
    std::vector<uint8_t> raw(n * (wide ? 2 : 1));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(in.gcount()) != raw.size())
        throw FormatError("pgm: truncated payload in " + path);
    Image2D img;
    img.height = h;
    img.width = w;
    img.values.resize(n);
    const double scale = 1.0 / static_cast<double>(maxval);
    if (wide) {
        for (size_t i = 0; i < n; ++i) {
            const uint16_t v = static_cast<uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
            img.values[i] = static_cast<double>(v) * scale;
        }
    } else {
        for (size_t i = 0; i < n; ++i) img.values[i] = static_cast<double>(raw[i]) * scale;
    }
    return img;
}

inline void save_image2d(const std::string& path, const Image2D& img, int64_t maxval = 65535) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("pgm: cannot write " + path);
    out << "P5\n" << img.width << " " << img.height << "\n" << maxval << "\n";
    const bool wide = maxval > 255;
    for (double v : img.values) {
        const double c = std::min(std::max(v, 0.0), 1.0);
        const auto q = static_cast<uint32_t>(std::lround(c * static_cast<double>(maxval)));
        if (wide) {
            out.put(static_cast<char>((q >> 8) & 0xff));
            out.put(static_cast<char>(q & 0xff));
        } else {
            out.put(static_cast<char>(q & 0xff));
        }
    }
}

// ---------------------------------------------------------------------------
// MVV volume format: 'MVV1', u8 ndim(=3), u32le H, W, S, u32le B,
// payload H*W*S*B float32 LE, row-major over (H, W, S, B).
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32le(std::ostream& out, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline uint32_t get_u32le(std::istream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32le(std::ostream& out, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32le(out, v);
}

inline float get_f32le(std::istream& in) {
    const uint32_t v = get_u32le(in);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace detail

inline void save_volume3d(const std::string& path, const Volume3D& vol) {
    if (vol.channels != 1)
        throw FormatError("mvv: only single-channel volumes are written (got B=" +
                          std::to_string(vol.channels) + ")");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("mvv: cannot write " + path);
    out.write("MVV1", 4);
    out.put(3);
    detail::put_u32le(out, static_cast<uint32_t>(vol.height));
    detail::put_u32le(out, static_cast<uint32_t>(vol.width));
    detail::put_u32le(out, static_cast<uint32_t>(vol.slices));
    detail::put_u32le(out, static_cast<uint32_t>(vol.channels));
    for (double v : vol.values) detail::put_f32le(out, static_cast<float>(v));
}

inline Volume3D load_volume3d(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("mvv: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "MVV1", 4) != 0)
        throw FormatError("mvv: magic mismatch in " + path);
    const int ndim = in.get();
    if (ndim != 3) throw FormatError("mvv: unexpected ndim " + std::to_string(ndim) + " in " + path);
    Volume3D vol;
    vol.height = detail::get_u32le(in);
    vol.width = detail::get_u32le(in);
    vol.slices = detail::get_u32le(in);
    vol.channels = detail::get_u32le(in);
    if (!in) throw FormatError("mvv: truncated header in " + path);
    if (vol.channels != 1) throw FormatError("mvv: only B=1 supported, got " + std::to_string(vol.channels));
    const int64_t n = vol.height * vol.width * vol.slices * vol.channels;
    vol.values.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        vol.values[static_cast<size_t>(i)] = static_cast<double>(detail::get_f32le(in));
        if (!in) throw FormatError("mvv: payload length mismatch in " + path);
    }
    // must be exactly at EOF
    in.get();
    if (!in.eof()) throw FormatError("mvv: payload length mismatch (trailing bytes) in " + path);
    return vol;
}

// ---------------------------------------------------------------------------
// Crops, patches, regions
// ---------------------------------------------------------------------------

inline Volume3D center_crop(const Volume3D& vol, int64_t th, int64_t tw, int64_t ts) {
    if (th > vol.height || tw > vol.width || ts > vol.slices)
        throw ShapeError("center_crop: target " + shape_str({th, tw, ts}) + " exceeds source " +
                         shape_str({vol.height, vol.width, vol.slices}));
    const int64_t oh = (vol.height - th) / 2;
    const int64_t ow = (vol.width - tw) / 2;
    const int64_t os = (vol.slices - ts) / 2;
    Volume3D out;
    out.height = th;
    out.width = tw;
    out.slices = ts;
    out.values.resize(static_cast<size_t>(th * tw * ts));
    for (int64_t r = 0; r < th; ++r)
        for (int64_t c = 0; c < tw; ++c)
            for (int64_t s = 0; s < ts; ++s) out.at(r, c, s) = vol.at(r + oh, c + ow, s + os);
    return out;
}

inline Volume3D random_cubic_patch(const Volume3D& vol, int64_t edge, Rng& rng) {
    if (edge > vol.height || edge > vol.width || edge > vol.slices)
        throw ShapeError("random_cubic_patch: edge " + std::to_string(edge) + " exceeds volume " +
                         shape_str({vol.height, vol.width, vol.slices}));
    const int64_t oh = static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(vol.height - edge + 1)));
    const int64_t ow = static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(vol.width - edge + 1)));
    const int64_t os = static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(vol.slices - edge + 1)));
    Volume3D out;
    out.height = edge;
    out.width = edge;
    out.slices = edge;
    out.values.resize(static_cast<size_t>(edge * edge * edge));
    for (int64_t r = 0; r < edge; ++r)
        for (int64_t c = 0; c < edge; ++c)
            for (int64_t s = 0; s < edge; ++s) out.at(r, c, s) = vol.at(r + oh, c + ow, s + os);
    return out;
}

inline Volume3D random_cubic_patch(const Volume3D& vol, int64_t edge, uint64_t seed) {
    Rng rng(seed);
    return random_cubic_patch(vol, edge, rng);
}

inline Image2D extract_region(const Image2D& img, const BoundingBox& box) {
    if (box.axes.size() != 2) throw ShapeError("extract_region: expected a 2-axis box");
    const auto [r0, hh] = box.axes[0];
    const auto [c0, ww] = box.axes[1];
    if (r0 < 0 || c0 < 0 || hh < 1 || ww < 1 || r0 + hh > img.height || c0 + ww > img.width)
        throw ShapeError("extract_region: box " + box.to_string() + " out of bounds for " +
                         shape_str({img.height, img.width}));
    Image2D out;
    out.height = hh;
    out.width = ww;
    out.values.resize(static_cast<size_t>(hh * ww));
    for (int64_t r = 0; r < hh; ++r)
        for (int64_t c = 0; c < ww; ++c) out.at(r, c) = img.at(r + r0, c + c0);
    return out;
}

inline Volume3D extract_region(const Volume3D& vol, const BoundingBox& box) {
    if (box.axes.size() != 3) throw ShapeError("extract_region: expected a 3-axis box");
    const auto [r0, hh] = box.axes[0];
    const auto [c0, ww] = box.axes[1];
    const auto [s0, dd] = box.axes[2];
    if (r0 < 0 || c0 < 0 || s0 < 0 || hh < 1 || ww < 1 || dd < 1 || r0 + hh > vol.height ||
        c0 + ww > vol.width || s0 + dd > vol.slices)
        throw ShapeError("extract_region: box " + box.to_string() + " out of bounds");
    Volume3D out;
    out.height = hh;
    out.width = ww;
    out.slices = dd;
    out.values.resize(static_cast<size_t>(hh * ww * dd));
    for (int64_t r = 0; r < hh; ++r)
        for (int64_t c = 0; c < ww; ++c)
            for (int64_t s = 0; s < dd; ++s) out.at(r, c, s) = vol.at(r + r0, c + c0, s + s0);
    return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
    std::ofstream out(path);
    if (!out) throw FormatError("manifest: cannot write " + path);
    for (const auto& rec : m.records) {
        out << rec.path << "\t";
        if (rec.label) out << *rec.label;
        if (!rec.boxes.empty()) {
            out << "\t";
            for (size_t i = 0; i < rec.boxes.size(); ++i) {
                if (i) out << ";";
                out << rec.boxes[i].to_string();
            }
        }
        out << "\n";
    }
}

inline DatasetManifest load_manifest(const std::string& path, const std::string& split = "train") {
    std::ifstream in(path);
    if (!in) throw FormatError("manifest: cannot open " + path);
    const auto base = std::filesystem::path(path).parent_path();
    DatasetManifest m;
    m.split = split;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            const size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        ManifestRecord rec;
        std::filesystem::path p(fields[0]);
        rec.path = p.is_absolute() ? p.string() : (base / p).string();
        if (fields.size() > 1 && !fields[1].empty()) rec.label = std::stoi(fields[1]);
        if (fields.size() > 2 && !fields[2].empty()) {
            std::stringstream ss(fields[2]);
            std::string boxstr;
            while (std::getline(ss, boxstr, ';')) {
                BoundingBox box;
                std::stringstream bs(boxstr);
                std::string num;
                std::vector<int64_t> nums;
                while (std::getline(bs, num, ',')) nums.push_back(std::stoll(num));
                if (nums.size() != 4 && nums.size() != 6)
                    throw FormatError("manifest: bad box '" + boxstr + "' in " + path);
                for (size_t i = 0; i + 1 < nums.size(); i += 2) box.axes.emplace_back(nums[i], nums[i + 1]);
                rec.boxes.push_back(box);
            }
        }
        if (!std::filesystem::exists(rec.path))
            throw FormatError("manifest: path does not exist: " + rec.path);
        m.records.push_back(std::move(rec));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Toy dataset synthesis
// ---------------------------------------------------------------------------

enum class ToyKind { Blob2D, Ring2D, Sphere3D, Plane3D };

inline ToyKind toy_kind_from_string(const std::string& s) {
    if (s == "blob2d") return ToyKind::Blob2D;
    if (s == "ring2d") return ToyKind::Ring2D;
    if (s == "sphere3d") return ToyKind::Sphere3D;
    if (s == "plane3d") return ToyKind::Plane3D;
    throw ConfigError("unknown toy dataset kind '" + s + "'");
}

inline bool toy_kind_is_3d(ToyKind k) { return k == ToyKind::Sphere3D || k == ToyKind::Plane3D; }

namespace detail {

constexpr double kToyBackground = 0.1;
constexpr double kToyNoise = 0.01;

inline void toy_background(std::vector<double>& v, Rng& rng) {
    // gentle random ramp plus pixel noise so negatives are not constant
    const double a = 0.05 * rng.uniform();
    for (size_t i = 0; i < v.size(); ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(v.size());
        v[i] = kToyBackground + a * t + kToyNoise * (2.0 * rng.uniform() - 1.0);
    }
}

// Coverage-style soft edge: 1 inside, 0 outside, linear over ~1px.
inline double soft_step(double signed_dist) {
    if (signed_dist <= -0.5) return 1.0;
    if (signed_dist >= 0.5) return 0.0;
    return 0.5 - signed_dist;
}

}  // namespace detail

struct ToySample2D {
    Image2D image;
    int label = 0;
    std::optional<BoundingBox> box;
};

struct ToySample3D {
    Volume3D volume;
    int label = 0;
    std::optional<BoundingBox> box;
};

inline ToySample2D make_toy_image(ToyKind kind, int64_t h, int64_t w, bool positive, Rng& rng) {
    ToySample2D out;
    out.image.height = h;
    out.image.width = w;
    out.image.values.resize(static_cast<size_t>(h * w));
    detail::toy_background(out.image.values, rng);
    out.label = positive ? 1 : 0;
    if (!positive) return out;

    const double rmin = static_cast<double>(std::min(h, w)) / 6.0;
    const double rmax = static_cast<double>(std::min(h, w)) / 4.0;
    const double radius = rmin + (rmax - rmin) * rng.uniform();
    const double margin = radius + 2.0;
    const double cy = margin + (static_cast<double>(h) - 2.0 * margin) * rng.uniform();
    const double cx = margin + (static_cast<double>(w) - 2.0 * margin) * rng.uniform();
    const double brightness = 0.6 + 0.35 * rng.uniform();
    const double rin = 0.55 * radius;  // ring2d only

    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
            const double dy = static_cast<double>(r) - cy;
            const double dx = static_cast<double>(c) - cx;
            const double d = std::sqrt(dy * dy + dx * dx);
            double cov = 0.0;
            if (kind == ToyKind::Blob2D) {
                cov = detail::soft_step(d - radius);
            } else {
                cov = detail::soft_step(d - radius) * detail::soft_step(rin - d);
            }
            if (cov > 0.0) {
                double& px = out.image.at(r, c);
                px = px + cov * (brightness - px);
            }
        }
    const int64_t r0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - radius - 1)));
    const int64_t c0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - radius - 1)));
    const int64_t r1 = std::min<int64_t>(h, static_cast<int64_t>(std::ceil(cy + radius + 1)));
    const int64_t c1 = std::min<int64_t>(w, static_cast<int64_t>(std::ceil(cx + radius + 1)));
    out.box = BoundingBox{{{r0, r1 - r0}, {c0, c1 - c0}}};
    return out;
}

inline ToySample3D make_toy_volume(ToyKind kind, int64_t h, int64_t w, int64_t s, bool positive,
                                   Rng& rng) {
    ToySample3D out;
    out.volume.height = h;
    out.volume.width = w;
    out.volume.slices = s;
    out.volume.values.resize(static_cast<size_t>(h * w * s));
    detail::toy_background(out.volume.values, rng);
    out.label = positive ? 1 : 0;
    if (!positive) return out;

    const double brightness = 0.6 + 0.35 * rng.uniform();
    if (kind == ToyKind::Sphere3D) {
        const int64_t mind = std::min({h, w, s});
        // radius >= 2 so the sphere spans at least 3 slices along every axis
        const double rmin = std::max(2.0, static_cast<double>(mind) / 6.0);
        const double rmax = std::max(rmin + 0.5, static_cast<double>(mind) / 4.0);
        const double radius = rmin + (rmax - rmin) * rng.uniform();
        const double margin = radius + 2.0;
        const double cy = margin + (static_cast<double>(h) - 2.0 * margin) * rng.uniform();
        const double cx = margin + (static_cast<double>(w) - 2.0 * margin) * rng.uniform();
        const double cz = margin + (static_cast<double>(s) - 2.0 * margin) * rng.uniform();
        for (int64_t r = 0; r < h; ++r)
            for (int64_t c = 0; c < w; ++c)
                for (int64_t z = 0; z < s; ++z) {
                    const double dy = static_cast<double>(r) - cy;
                    const double dx = static_cast<double>(c) - cx;
                    const double dz = static_cast<double>(z) - cz;
                    const double d = std::sqrt(dy * dy + dx * dx + dz * dz);
                    const double cov = detail::soft_step(d - radius);
                    if (cov > 0.0) {
                        double& px = out.volume.at(r, c, z);
                        px = px + cov * (brightness - px);
                    }
                }
        auto lo = [](double cc, double rad) {
            return std::max<int64_t>(0, static_cast<int64_t>(std::floor(cc - rad - 1)));
        };
        auto hi = [](double cc, double rad, int64_t ext) {
            return std::min<int64_t>(ext, static_cast<int64_t>(std::ceil(cc + rad + 1)));
        };
        out.box = BoundingBox{{{lo(cy, radius), hi(cy, radius, h) - lo(cy, radius)},
                               {lo(cx, radius), hi(cx, radius, w) - lo(cx, radius)},
                               {lo(cz, radius), hi(cz, radius, s) - lo(cz, radius)}}};
    } else {  // Plane3D: bright slab of thickness 2 normal to a random axis
        const int axis = static_cast<int>(rng.uniform_below(3));
        const int64_t ext = axis == 0 ? h : (axis == 1 ? w : s);
        const int64_t pos = 1 + static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(ext - 3)));
        for (int64_t r = 0; r < h; ++r)
            for (int64_t c = 0; c < w; ++c)
                for (int64_t z = 0; z < s; ++z) {
                    const int64_t q = axis == 0 ? r : (axis == 1 ? c : z);
                    if (q == pos || q == pos + 1) {
                        double& px = out.volume.at(r, c, z);
                        px = px + (brightness - px);
                    }
                }
        BoundingBox box{{{0, h}, {0, w}, {0, s}}};
        box.axes[static_cast<size_t>(axis)] = {pos, 2};
        out.box = box;
    }
    return out;
}

// Writes `n` samples plus a manifest file named `<split>.tsv` under `dir`.
// Deterministic function of (kind, n, size, class_balance, seed).
inline DatasetManifest generate_toy_dataset(const std::string& dir, ToyKind kind, int64_t n,
                                            const std::vector<int64_t>& size, double class_balance,
                                            uint64_t seed, const std::string& split = "train") {
    if (n < 2) throw ConfigError("generate_toy_dataset: n must be >= 2");
    if (class_balance <= 0.0 || class_balance >= 1.0)
        throw ConfigError("generate_toy_dataset: class_balance must be in (0,1)");
    const bool is3d = toy_kind_is_3d(kind);
    if (size.size() != (is3d ? 3u : 2u))
        throw ConfigError("generate_toy_dataset: size rank does not match kind");
    for (int64_t e : size)
        if (e < 16) throw ConfigError("generate_toy_dataset: size must be >= 16 per axis");

    std::filesystem::create_directories(dir);
    Rng rng(seed);
    const int64_t n_pos = static_cast<int64_t>(std::llround(static_cast<double>(n) * class_balance));
    DatasetManifest m;
    m.split = split;
    for (int64_t i = 0; i < n; ++i) {
        const bool positive = i < n_pos;
        ManifestRecord rec;
        char name[64];
        if (is3d) {
            std::snprintf(name, sizeof(name), "%s_%05lld.mvv", split.c_str(),
                          static_cast<long long>(i));
            auto sample = make_toy_volume(kind, size[0], size[1], size[2], positive, rng);
            save_volume3d((std::filesystem::path(dir) / name).string(), sample.volume);
            rec.label = sample.label;
            if (sample.box) rec.boxes.push_back(*sample.box);
        } else {
            std::snprintf(name, sizeof(name), "%s_%05lld.pgm", split.c_str(),
                          static_cast<long long>(i));
            auto sample = make_toy_image(kind, size[0], size[1], positive, rng);
            save_image2d((std::filesystem::path(dir) / name).string(), sample.image);
            rec.label = sample.label;
            if (sample.box) rec.boxes.push_back(*sample.box);
        }
        rec.path = name;
        m.records.push_back(std::move(rec));
    }
    const auto mpath = (std::filesystem::path(dir) / (split + ".tsv")).string();
    save_manifest(mpath, m);
    return load_manifest(mpath, split);
}

}  // namespace medvae
