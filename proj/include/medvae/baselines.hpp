#pragma once

#include <cmath>
#include <vector>

#include "medvae/imageio.hpp"
#include "medvae/vae.hpp"

namespace medvae {

enum class InterpMethod { Nearest, Bilinear, Bicubic };

inline InterpMethod interp_method_from_string(const std::string& s) {
    if (s == "nearest") return InterpMethod::Nearest;
    if (s == "bilinear" || s == "trilinear") return InterpMethod::Bilinear;
    if (s == "bicubic" || s == "tricubic") return InterpMethod::Bicubic;
    throw ConfigError("unknown interpolation method '" + s + "'");
}

namespace detail {

// Catmull-Rom weight (a = -0.5).
inline double cubic_weight(double t) {
    constexpr double a = -0.5;
    t = std::fabs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

// Resamples the middle axis of a [pre][n_in][post] array to n_out with
// half-pixel (align-corners-false) sampling and edge clamping.
inline std::vector<double> resample_axis(const std::vector<double>& src, int64_t pre, int64_t n_in,
                                         int64_t post, int64_t n_out, InterpMethod method) {
    std::vector<double> dst(static_cast<size_t>(pre * n_out * post));
    const double r = static_cast<double>(n_in) / static_cast<double>(n_out);
    auto clampi = [n_in](int64_t i) { return std::min(std::max(i, int64_t{0}), n_in - 1); };
    for (int64_t o = 0; o < n_out; ++o) {
        const double center = (static_cast<double>(o) + 0.5) * r - 0.5;
        int64_t taps[4] = {0, 0, 0, 0};
        double wts[4] = {0, 0, 0, 0};
        int n_taps = 0;
        switch (method) {
            case InterpMethod::Nearest: {
                taps[0] = clampi(static_cast<int64_t>(std::floor(center + 0.5)));
                wts[0] = 1.0;
                n_taps = 1;
                break;
            }
            case InterpMethod::Bilinear: {
                const double c = std::min(std::max(center, 0.0), static_cast<double>(n_in - 1));
                const int64_t i0 = static_cast<int64_t>(std::floor(c));
                const double f = c - static_cast<double>(i0);
                taps[0] = i0;
                taps[1] = clampi(i0 + 1);
                wts[0] = 1.0 - f;
                wts[1] = f;
                n_taps = 2;
                break;
            }
            case InterpMethod::Bicubic: {
                const int64_t i0 = static_cast<int64_t>(std::floor(center));
                for (int k = 0; k < 4; ++k) {
                    const int64_t i = i0 - 1 + k;
                    taps[k] = clampi(i);
                    wts[k] = cubic_weight(center - static_cast<double>(i));
                }
                n_taps = 4;
                break;
            }
        }
        for (int64_t p = 0; p < pre; ++p)
            for (int64_t q = 0; q < post; ++q) {
                double acc = 0.0;
                for (int k = 0; k < n_taps; ++k)
                    acc += wts[k] * src[(p * n_in + taps[k]) * post + q];
                dst[(p * n_out + o) * post + q] = acc;
            }
    }
    return dst;
}

}  // namespace detail

inline Image2D interp_resize(const Image2D& img, InterpMethod method, int64_t oh, int64_t ow) {
    if (oh < 1 || ow < 1) throw ShapeError("interp_resize: target dims must be >= 1");
    // separable: rows, then columns
    auto tmp = detail::resample_axis(img.values, 1, img.height, img.width, oh, method);
    auto out = detail::resample_axis(tmp, oh, img.width, 1, ow, method);
    Image2D res;
    res.height = oh;
    res.width = ow;
    res.values = std::move(out);
    return res;
}

inline Volume3D interp_resize(const Volume3D& vol, InterpMethod method, int64_t oh, int64_t ow,
                              int64_t os) {
    if (oh < 1 || ow < 1 || os < 1) throw ShapeError("interp_resize: target dims must be >= 1");
    auto a = detail::resample_axis(vol.values, 1, vol.height, vol.width * vol.slices, oh, method);
    auto b = detail::resample_axis(a, oh, vol.width, vol.slices, ow, method);
    auto c = detail::resample_axis(b, oh * ow, vol.slices, 1, os, method);
    Volume3D res;
    res.height = oh;
    res.width = ow;
    res.slices = os;
    res.values = std::move(c);
    return res;
}

// Down-then-up comparison path: the low-res image plays the latent role.
struct Roundtrip2D {
    Image2D low;
    Image2D reconstruction;
};

inline Roundtrip2D baseline_downsize_roundtrip(const Image2D& img, InterpMethod method, int64_t f) {
    VAEConfig probe{2, f, 1, 32, 8};
    probe.validate();
    const int64_t a = probe.per_axis_factor();
    if (img.height % a != 0 || img.width % a != 0)
        throw ShapeError("baseline roundtrip: extents " + shape_str({img.height, img.width}) +
                         " not divisible by per-axis factor " + std::to_string(a));
    Roundtrip2D out;
    out.low = interp_resize(img, method, img.height / a, img.width / a);
    out.reconstruction = interp_resize(out.low, method, img.height, img.width);
    return out;
}

struct Roundtrip3D {
    Volume3D low;
    Volume3D reconstruction;
};

inline Roundtrip3D baseline_downsize_roundtrip(const Volume3D& vol, InterpMethod method, int64_t f) {
    VAEConfig probe{3, f, 1, 32, 8};
    probe.validate();
    const int64_t a = probe.per_axis_factor();
    if (vol.height % a != 0 || vol.width % a != 0 || vol.slices % a != 0)
        throw ShapeError("baseline roundtrip: volume extents not divisible by per-axis factor " +
                         std::to_string(a));
    Roundtrip3D out;
    out.low = interp_resize(vol, method, vol.height / a, vol.width / a, vol.slices / a);
    out.reconstruction = interp_resize(out.low, method, vol.height, vol.width, vol.slices);
    return out;
}

// ---------------------------------------------------------------------------
// 2D-on-3D stitching
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor slice_to_tensor(const Volume3D& vol, int64_t s) {
    std::vector<double> data(static_cast<size_t>(vol.height * vol.width));
    for (int64_t y = 0; y < vol.height; ++y)
        for (int64_t x = 0; x < vol.width; ++x) data[y * vol.width + x] = vol.at(y, x, s);
    return Tensor({1, 1, vol.height, vol.width}, std::move(data));
}

}  // namespace detail

// Per-slice deterministic encoding stacked along depth, then linearly
// interpolated along depth so the stitched latent matches the 3D model's
// latent shape. target_depth <= 0 derives the depth from the target config.
inline Tensor stitch_2d_latents(const VAEModel& model2d, const Volume3D& vol,
                                const VAEConfig& target_3d, int64_t target_depth = 0) {
    if (model2d.config.ndim != 2) throw ConfigError("stitch: a 2D model is required");
    VAEConfig t3 = target_3d;
    t3.validate();
    if (t3.ndim != 3) throw ConfigError("stitch: target config must be 3D");
    if (model2d.config.per_axis_factor() != t3.per_axis_factor())
        throw ConfigError("stitch: 2D per-axis factor " +
                          std::to_string(model2d.config.per_axis_factor()) +
                          " does not match target 3D per-axis factor " +
                          std::to_string(t3.per_axis_factor()));
    if (model2d.config.latent_channels != t3.latent_channels)
        throw ConfigError("stitch: latent channel mismatch");
    const auto target_dims = latent_shape(t3, {vol.height, vol.width, vol.slices});
    const int64_t td = target_depth > 0 ? target_depth : target_dims[2];

    NoGradGuard ng;
    std::vector<Tensor> slice_latents;
    slice_latents.reserve(static_cast<size_t>(vol.slices));
    for (int64_t s = 0; s < vol.slices; ++s)
        slice_latents.push_back(encode(model2d, detail::slice_to_tensor(vol, s)).mu);
    const Shape& ls = slice_latents[0].shape();  // [1,C,h,w]
    const int64_t C = ls[1], h = ls[2], w = ls[3];

    // stack along a new trailing depth axis
    std::vector<double> stacked(static_cast<size_t>(C * h * w * vol.slices));
    for (int64_t s = 0; s < vol.slices; ++s) {
        const double* src = slice_latents[static_cast<size_t>(s)].data().data();
        for (int64_t i = 0; i < C * h * w; ++i) stacked[i * vol.slices + s] = src[i];
    }
    if (td == vol.slices) return Tensor({1, C, h, w, vol.slices}, std::move(stacked));
    auto interped = detail::resample_axis(stacked, C * h * w, vol.slices, 1, td, InterpMethod::Bilinear);
    return Tensor({1, C, h, w, td}, std::move(interped));
}

// Slice-wise encode -> decode, stacked back into a volume (raw, unclamped).
inline Tensor stitch_2d_reconstructions(const VAEModel& model2d, const Volume3D& vol) {
    if (model2d.config.ndim != 2) throw ConfigError("stitch: a 2D model is required");
    NoGradGuard ng;
    std::vector<double> out(static_cast<size_t>(vol.height * vol.width * vol.slices));
    for (int64_t s = 0; s < vol.slices; ++s) {
        Tensor x = detail::slice_to_tensor(vol, s);
        Tensor xhat = decode(model2d, encode(model2d, x).mu);
        const double* src = xhat.data().data();
        for (int64_t y = 0; y < vol.height; ++y)
            for (int64_t x2 = 0; x2 < vol.width; ++x2)
                out[(y * vol.width + x2) * vol.slices + s] = src[y * vol.width + x2];
    }
    return Tensor({1, 1, vol.height, vol.width, vol.slices}, std::move(out));
}

}  // namespace medvae
