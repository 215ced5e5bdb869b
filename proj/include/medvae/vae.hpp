#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "medvae/common.hpp"
#include "medvae/imageio.hpp"
#include "medvae/tensor.hpp"

namespace medvae {

// ---------------------------------------------------------------------------
// Configuration and latent-shape arithmetic
// ---------------------------------------------------------------------------

struct VAEConfig {
    int ndim = 2;                 // 2 or 3
    int64_t f = 16;               // downsizing factor over area (2D) / volume (3D)
    int64_t latent_channels = 1;  // C
    int64_t base_width = 32;
    int64_t groups = 8;

    int64_t per_axis_factor() const {
        int64_t a = 1;
        while (a * a < f && ndim == 2) a *= 2;
        while (a * a * a < f && ndim == 3) a *= 2;
        return a;
    }

    int64_t stages() const {
        int64_t a = per_axis_factor(), s = 0;
        while (a > 1) {
            a /= 2;
            ++s;
        }
        return s;
    }

    void validate() const {
        if (ndim != 2 && ndim != 3) throw ConfigError("vae config: ndim must be 2 or 3");
        if (latent_channels < 1) throw ConfigError("vae config: latent channels must be >= 1");
        if (base_width < 1 || base_width % groups != 0)
            throw ConfigError("vae config: base width must be a positive multiple of the group count");
        const int64_t a = per_axis_factor();
        const int64_t vol = ndim == 2 ? a * a : a * a * a;
        if (vol != f)
            throw ConfigError("vae config: downsizing factor " + std::to_string(f) +
                              " has no power-of-2 per-axis factor for ndim=" + std::to_string(ndim));
    }
};

inline VAEConfig vae_preset(const std::string& name) {
    VAEConfig c;
    if (name == "2d_f16_c1") {
        c = {2, 16, 1, 32, 8};
    } else if (name == "2d_f16_c3") {
        c = {2, 16, 3, 32, 8};
    } else if (name == "2d_f64_c1") {
        c = {2, 64, 1, 32, 8};
    } else if (name == "2d_f64_c4") {
        c = {2, 64, 4, 32, 8};
    } else if (name == "3d_f64_c1") {
        c = {3, 64, 1, 32, 8};
    } else if (name == "3d_f512_c1") {
        c = {3, 512, 1, 32, 8};
    } else {
        throw ConfigError("unknown model preset '" + name + "'");
    }
    return c;
}

// Latent dims in paper order (spatial..., C). Input dims are spatial only.
inline std::vector<int64_t> latent_shape(const VAEConfig& cfg, const std::vector<int64_t>& input_dims) {
    cfg.validate();
    if (static_cast<int>(input_dims.size()) != cfg.ndim)
        throw ShapeError("latent_shape: expected " + std::to_string(cfg.ndim) + " spatial dims, got " +
                         std::to_string(input_dims.size()));
    const int64_t a = cfg.per_axis_factor();
    std::vector<int64_t> out;
    for (int64_t d : input_dims) {
        if (d % a != 0)
            throw ShapeError("latent_shape: extent " + std::to_string(d) +
                             " not divisible by per-axis factor " + std::to_string(a));
        out.push_back(d / a);
    }
    out.push_back(cfg.latent_channels);
    return out;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct LoraAdapter {
    Tensor A;  // [rank, fan_in]
    Tensor B;  // [fan_out, rank], zero-initialized
    int64_t rank = 0;
};

struct ConvLayer {
    Tensor weight;  // [Cout, Cin, k...]
    Tensor bias;    // [Cout]
    int64_t stride = 1;
    int64_t pad = 1;
    std::optional<LoraAdapter> lora;

    Tensor effective_weight() const {
        if (!lora) return weight;
        Tensor delta = matmul(lora->B, lora->A);
        return add(weight, reshape(delta, weight.shape()));
    }

    Tensor forward(const Tensor& x, int ndim) const {
        Tensor w = effective_weight();
        return conv(x, w, stride, pad, ndim, &bias);
    }

    int64_t fan_in() const {
        int64_t f = 1;
        for (size_t i = 1; i < weight.shape().size(); ++i) f *= weight.shape()[i];
        return f;
    }
    int64_t fan_out() const { return weight.shape()[0]; }
};

struct NormLayer {
    Tensor gamma;
    Tensor beta;
    int64_t groups = 8;

    Tensor forward(const Tensor& x) const { return group_norm(x, gamma, beta, groups); }
};

struct ResBlock {
    NormLayer n1;
    ConvLayer c1;
    NormLayer n2;
    ConvLayer c2;

    Tensor forward(const Tensor& x, int ndim) const {
        Tensor h = c1.forward(silu(n1.forward(x)), ndim);
        h = c2.forward(silu(n2.forward(h)), ndim);
        return add(x, h);
    }
};

struct EncoderStage {
    ResBlock rb1, rb2;
    ConvLayer down;  // stride-2
};

struct DecoderStage {
    ConvLayer up;  // conv after nearest x2 upsample
    ResBlock rb1, rb2;
};

// Residual projection head: z + c2(silu(c1(z))), c2 zero-initialized so the
// head is an exact identity at initialization.
struct ProjectionHead {
    ConvLayer c1;
    ConvLayer c2;

    Tensor forward(const Tensor& z) const {
        Tensor h = c2.forward(silu(c1.forward(z, 2)), 2);
        return add(z, h);
    }
};

struct LatentDist {
    Tensor mu;
    Tensor logvar;  // clamped to [-30, 20] at construction
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct VAEModel {
    VAEConfig config;
    ConvLayer enc_in;
    std::vector<EncoderStage> enc_stages;
    ResBlock enc_mid;
    NormLayer enc_norm_out;
    ConvLayer enc_out;  // -> 2C channels (mu, logvar)
    ConvLayer dec_in;   // C -> deepest width
    ResBlock dec_mid;
    std::vector<DecoderStage> dec_stages;
    NormLayer dec_norm_out;
    ConvLayer dec_out;  // -> 1 channel
    std::optional<ProjectionHead> head;

    // Stable traversal order; checkpoints and optimizers rely on it.
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
        auto conv_params = [&](const std::string& prefix, ConvLayer& c) {
            fn(prefix + ".w", c.weight);
            fn(prefix + ".b", c.bias);
            if (c.lora) {
                fn(prefix + ".lora_a", c.lora->A);
                fn(prefix + ".lora_b", c.lora->B);
            }
        };
        auto norm_params = [&](const std::string& prefix, NormLayer& n) {
            fn(prefix + ".g", n.gamma);
            fn(prefix + ".be", n.beta);
        };
        auto res_params = [&](const std::string& prefix, ResBlock& r) {
            norm_params(prefix + ".n1", r.n1);
            conv_params(prefix + ".c1", r.c1);
            norm_params(prefix + ".n2", r.n2);
            conv_params(prefix + ".c2", r.c2);
        };
        conv_params("enc.in", enc_in);
        for (size_t i = 0; i < enc_stages.size(); ++i) {
            const std::string p = "enc.s" + std::to_string(i);
            res_params(p + ".rb1", enc_stages[i].rb1);
            res_params(p + ".rb2", enc_stages[i].rb2);
            conv_params(p + ".down", enc_stages[i].down);
        }
        res_params("enc.mid", enc_mid);
        norm_params("enc.norm_out", enc_norm_out);
        conv_params("enc.out", enc_out);
        conv_params("dec.in", dec_in);
        res_params("dec.mid", dec_mid);
        for (size_t i = 0; i < dec_stages.size(); ++i) {
            const std::string p = "dec.s" + std::to_string(i);
            conv_params(p + ".up", dec_stages[i].up);
            res_params(p + ".rb1", dec_stages[i].rb1);
            res_params(p + ".rb2", dec_stages[i].rb2);
        }
        norm_params("dec.norm_out", dec_norm_out);
        conv_params("dec.out", dec_out);
        if (head) {
            conv_params("head.c1", head->c1);
            conv_params("head.c2", head->c2);
        }
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for_each_param([&](const std::string&, Tensor& t) { out.push_back(t); });
        return out;
    }

    std::vector<Tensor> trainable_parameters() {
        std::vector<Tensor> out;
        for_each_param([&](const std::string&, Tensor& t) {
            if (t.requires_grad()) out.push_back(t);
        });
        return out;
    }

    void set_trainable(bool flag) {
        for_each_param([&](const std::string&, Tensor& t) { t.set_requires_grad(flag); });
    }

    int64_t trainable_param_count() {
        int64_t n = 0;
        for_each_param([&](const std::string&, Tensor& t) {
            if (t.requires_grad()) n += t.numel();
        });
        return n;
    }
};

namespace detail {

inline Tensor kaiming_conv(Shape shape, Rng& rng) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    return Tensor::randn(std::move(shape), rng, stddev, true);
}

inline ConvLayer make_conv(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, int ndim,
                           Rng& rng, bool zero_init = false) {
    ConvLayer c;
    Shape ks{cout, cin};
    for (int a = 0; a < ndim; ++a) ks.push_back(k);
    c.weight = zero_init ? Tensor::zeros(ks, true) : kaiming_conv(ks, rng);
    c.bias = Tensor::zeros({cout}, true);
    c.stride = stride;
    c.pad = pad;
    return c;
}

inline NormLayer make_norm(int64_t channels, int64_t groups) {
    NormLayer n;
    n.gamma = Tensor::full({channels}, 1.0, true);
    n.beta = Tensor::zeros({channels}, true);
    n.groups = groups;
    return n;
}

inline ResBlock make_resblock(int64_t channels, int64_t groups, int ndim, Rng& rng) {
    ResBlock r;
    r.n1 = make_norm(channels, groups);
    r.c1 = make_conv(channels, channels, 3, 1, 1, ndim, rng);
    r.n2 = make_norm(channels, groups);
    r.c2 = make_conv(channels, channels, 3, 1, 1, ndim, rng);
    return r;
}

inline int64_t stage_width(const VAEConfig& cfg, int64_t stage) {
    return cfg.base_width * std::min<int64_t>(int64_t{1} << stage, 4);
}

}  // namespace detail

inline VAEModel make_vae(VAEConfig cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    VAEModel m;
    m.config = cfg;
    const int nd = cfg.ndim;
    const int64_t S = cfg.stages();
    const int64_t C = cfg.latent_channels;

    m.enc_in = detail::make_conv(1, detail::stage_width(cfg, 0), 3, 1, 1, nd, rng);
    for (int64_t i = 0; i < S; ++i) {
        EncoderStage st;
        const int64_t w = detail::stage_width(cfg, i);
        st.rb1 = detail::make_resblock(w, cfg.groups, nd, rng);
        st.rb2 = detail::make_resblock(w, cfg.groups, nd, rng);
        st.down = detail::make_conv(w, detail::stage_width(cfg, i + 1), 3, 2, 1, nd, rng);
        m.enc_stages.push_back(std::move(st));
    }
    const int64_t deep = detail::stage_width(cfg, S);
    m.enc_mid = detail::make_resblock(deep, cfg.groups, nd, rng);
    m.enc_norm_out = detail::make_norm(deep, cfg.groups);
    m.enc_out = detail::make_conv(deep, 2 * C, 3, 1, 1, nd, rng, /*zero_init=*/true);

    m.dec_in = detail::make_conv(C, deep, 3, 1, 1, nd, rng);
    m.dec_mid = detail::make_resblock(deep, cfg.groups, nd, rng);
    for (int64_t i = S - 1; i >= 0; --i) {
        DecoderStage st;
        const int64_t w = detail::stage_width(cfg, i);
        st.up = detail::make_conv(detail::stage_width(cfg, i + 1), w, 3, 1, 1, nd, rng);
        st.rb1 = detail::make_resblock(w, cfg.groups, nd, rng);
        st.rb2 = detail::make_resblock(w, cfg.groups, nd, rng);
        m.dec_stages.push_back(std::move(st));
    }
    m.dec_norm_out = detail::make_norm(detail::stage_width(cfg, 0), cfg.groups);
    m.dec_out = detail::make_conv(detail::stage_width(cfg, 0), 1, 3, 1, 1, nd, rng, /*zero_init=*/true);
    return m;
}

inline ProjectionHead make_projection_head(int64_t latent_channels, int64_t hidden, uint64_t seed) {
    Rng rng(seed);
    ProjectionHead h;
    h.c1 = detail::make_conv(latent_channels, hidden, 3, 1, 1, 2, rng);
    h.c2 = detail::make_conv(hidden, latent_channels, 3, 1, 1, 2, rng, /*zero_init=*/true);
    return h;
}

// ---------------------------------------------------------------------------
// Encode / decode / sample / project
// ---------------------------------------------------------------------------

inline LatentDist encode(const VAEModel& m, const Tensor& x) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != m.config.ndim + 2)
        throw ShapeError("encode: input rank " + std::to_string(s.size()) + " does not match ndim " +
                         std::to_string(m.config.ndim));
    if (s[1] != 1) throw ShapeError("encode: expected single-channel input (B=1)");
    const int64_t a = m.config.per_axis_factor();
    for (int i = 0; i < m.config.ndim; ++i)
        if (s[2 + i] % a != 0)
            throw ShapeError("encode: spatial extent " + std::to_string(s[2 + i]) +
                             " not divisible by per-axis factor " + std::to_string(a));
    const int nd = m.config.ndim;
    Tensor h = m.enc_in.forward(x, nd);
    for (const auto& st : m.enc_stages) {
        h = st.rb1.forward(h, nd);
        h = st.rb2.forward(h, nd);
        h = st.down.forward(h, nd);
    }
    h = m.enc_mid.forward(h, nd);
    h = silu(m.enc_norm_out.forward(h));
    h = m.enc_out.forward(h, nd);
    const int64_t C = m.config.latent_channels;
    LatentDist d;
    d.mu = narrow_channels(h, 0, C);
    d.logvar = clamp(narrow_channels(h, C, C), -30.0, 20.0);
    return d;
}

inline Tensor reparameterize(const LatentDist& d, Rng& rng) {
    Tensor eps = Tensor::randn(d.mu.shape(), rng);
    return add(d.mu, mul(exp_op(mul_scalar(d.logvar, 0.5)), eps));
}

// Deterministic mode: z == mu exactly.
inline Tensor reparameterize_deterministic(const LatentDist& d) { return d.mu; }

inline Tensor decode(const VAEModel& m, const Tensor& z) {
    const Shape& s = z.shape();
    if (static_cast<int>(s.size()) != m.config.ndim + 2)
        throw ShapeError("decode: latent rank does not match model ndim");
    if (s[1] != m.config.latent_channels)
        throw ShapeError("decode: latent has " + std::to_string(s[1]) + " channels, model expects " +
                         std::to_string(m.config.latent_channels));
    const int nd = m.config.ndim;
    Tensor h = m.dec_in.forward(z, nd);
    h = m.dec_mid.forward(h, nd);
    for (const auto& st : m.dec_stages) {
        h = upsample_nearest(h, 2, nd);
        h = st.up.forward(h, nd);
        h = st.rb1.forward(h, nd);
        h = st.rb2.forward(h, nd);
    }
    h = silu(m.dec_norm_out.forward(h));
    h = m.dec_out.forward(h, nd);
    return h;
}

inline Tensor project_latent(const ProjectionHead& head, const Tensor& z) {
    if (z.shape().size() != 4) throw ShapeError("project_latent: expected a 2D latent [N,C,h,w]");
    if (z.shape()[1] != head.c1.weight.shape()[1])
        throw ShapeError("project_latent: latent channel count does not match head");
    return head.forward(z);
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

inline void apply_lora(VAEModel& m, int64_t rank, uint64_t seed = 0) {
    if (m.config.ndim != 2) throw ConfigError("apply_lora: adapters attach to 2D models");
    if (rank < 1) throw ConfigError("apply_lora: rank must be >= 1");
    Rng rng(seed ^ 0x10ada5eedULL);
    // Freeze everything, then attach trainable adapter pairs to every conv
    // wide enough to host the rank. Narrower convs stay frozen un-adapted; a
    // rank that fits no conv at all is rejected.
    m.set_trainable(false);
    int64_t adapted = 0;
    auto attach = [&](ConvLayer& c) {
        const int64_t fi = c.fan_in();
        const int64_t fo = c.fan_out();
        if (rank > std::min(fi, fo)) return;
        LoraAdapter ad;
        ad.rank = rank;
        ad.A = Tensor::randn({rank, fi}, rng, std::sqrt(1.0 / static_cast<double>(fi)), true);
        ad.B = Tensor::zeros({fo, rank}, true);
        c.lora = std::move(ad);
        ++adapted;
    };
    attach(m.enc_in);
    for (auto& st : m.enc_stages) {
        attach(st.rb1.c1);
        attach(st.rb1.c2);
        attach(st.rb2.c1);
        attach(st.rb2.c2);
        attach(st.down);
    }
    attach(m.enc_mid.c1);
    attach(m.enc_mid.c2);
    attach(m.enc_out);
    attach(m.dec_in);
    attach(m.dec_mid.c1);
    attach(m.dec_mid.c2);
    for (auto& st : m.dec_stages) {
        attach(st.up);
        attach(st.rb1.c1);
        attach(st.rb1.c2);
        attach(st.rb2.c1);
        attach(st.rb2.c2);
    }
    attach(m.dec_out);
    if (adapted == 0)
        throw ConfigError("apply_lora: rank " + std::to_string(rank) +
                          " exceeds min(fan_in, fan_out) of every convolution");
}

// Folds B*A into each base kernel; merged forward == adapted forward.
inline void merge_lora(VAEModel& m) {
    auto merge = [](ConvLayer& c) {
        if (!c.lora) return;
        NoGradGuard ng;
        Tensor delta = matmul(c.lora->B, c.lora->A);
        auto w = c.weight.mutable_data();
        auto d = delta.data();
        for (size_t i = 0; i < w.size(); ++i) w[i] += d[i];
        c.lora.reset();
    };
    merge(m.enc_in);
    for (auto& st : m.enc_stages) {
        merge(st.rb1.c1);
        merge(st.rb1.c2);
        merge(st.rb2.c1);
        merge(st.rb2.c2);
        merge(st.down);
    }
    merge(m.enc_mid.c1);
    merge(m.enc_mid.c2);
    merge(m.enc_out);
    merge(m.dec_in);
    merge(m.dec_mid.c1);
    merge(m.dec_mid.c2);
    for (auto& st : m.dec_stages) {
        merge(st.up);
        merge(st.rb1.c1);
        merge(st.rb1.c2);
        merge(st.rb2.c1);
        merge(st.rb2.c2);
    }
    merge(m.dec_out);
    m.set_trainable(true);
}

// Closed-form count of adapter parameters: sum over convs of r*(fan_in+fan_out).
inline int64_t lora_param_count(VAEModel& m) {
    int64_t n = 0;
    m.for_each_param([&](const std::string& name, Tensor& t) {
        if (name.ends_with(".lora_a") || name.ends_with(".lora_b")) n += t.numel();
    });
    return n;
}

// ---------------------------------------------------------------------------
// 2D -> 3D kernel-centering inflation
// ---------------------------------------------------------------------------

namespace detail {

// [Cout,Cin,kh,kw] -> [Cout,Cin,kh,kw,ks]: 2D weights live at the central
// index of the new slice axis (our volume layout is [N,C,H,W,S]).
inline Tensor inflate_kernel(const Tensor& w2d) {
    const Shape& s = w2d.shape();
    const int64_t k = s[2];
    if (s[2] != s[3]) throw ShapeError("inflate: only square kernels can be inflated");
    if (k % 2 == 0)
        throw ShapeError("inflate: kernel extent " + std::to_string(k) + " is even (no central slice)");
    const int64_t center = k / 2;
    Shape out_shape{s[0], s[1], k, k, k};
    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)), 0.0);
    const double* W = w2d.data().data();
    for (int64_t o = 0; o < s[0] * s[1]; ++o)
        for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx)
                out[(((o * k) + ky) * k + kx) * k + center] = W[(o * k + ky) * k + kx];
    return Tensor(out_shape, std::move(out), true);
}

inline ConvLayer inflate_conv(const ConvLayer& c2d) {
    ConvLayer c;
    NoGradGuard ng;
    c.weight = inflate_kernel(c2d.lora ? c2d.effective_weight() : c2d.weight);
    c.weight.set_requires_grad(true);
    c.bias = Tensor(c2d.bias.shape(), {c2d.bias.data().begin(), c2d.bias.data().end()}, true);
    c.stride = c2d.stride;
    c.pad = c2d.pad;
    return c;
}

inline NormLayer inflate_norm(const NormLayer& n2d) {
    NormLayer n;
    n.gamma = Tensor(n2d.gamma.shape(), {n2d.gamma.data().begin(), n2d.gamma.data().end()}, true);
    n.beta = Tensor(n2d.beta.shape(), {n2d.beta.data().begin(), n2d.beta.data().end()}, true);
    n.groups = n2d.groups;
    return n;
}

inline ResBlock inflate_res(const ResBlock& r2d) {
    ResBlock r;
    r.n1 = inflate_norm(r2d.n1);
    r.c1 = inflate_conv(r2d.c1);
    r.n2 = inflate_norm(r2d.n2);
    r.c2 = inflate_conv(r2d.c2);
    return r;
}

}  // namespace detail

// Lifts a 2D VAE to 3D, preserving the per-axis factor: 2D f=16 -> 3D f=64,
// 2D f=64 -> 3D f=512. LoRA adapters, if present, are folded into the
// inflated kernels. The projection head (a 2D construct) is dropped.
inline VAEModel inflate_2d_to_3d(const VAEModel& m2d) {
    if (m2d.config.ndim != 2) throw ConfigError("inflate: model is not 2D");
    VAEModel m;
    m.config = m2d.config;
    m.config.ndim = 3;
    const int64_t a = m2d.config.per_axis_factor();
    m.config.f = a * a * a;
    m.config.validate();

    m.enc_in = detail::inflate_conv(m2d.enc_in);
    for (const auto& st : m2d.enc_stages) {
        EncoderStage s3;
        s3.rb1 = detail::inflate_res(st.rb1);
        s3.rb2 = detail::inflate_res(st.rb2);
        s3.down = detail::inflate_conv(st.down);
        m.enc_stages.push_back(std::move(s3));
    }
    m.enc_mid = detail::inflate_res(m2d.enc_mid);
    m.enc_norm_out = detail::inflate_norm(m2d.enc_norm_out);
    m.enc_out = detail::inflate_conv(m2d.enc_out);
    m.dec_in = detail::inflate_conv(m2d.dec_in);
    m.dec_mid = detail::inflate_res(m2d.dec_mid);
    for (const auto& st : m2d.dec_stages) {
        DecoderStage s3;
        s3.up = detail::inflate_conv(st.up);
        s3.rb1 = detail::inflate_res(st.rb1);
        s3.rb2 = detail::inflate_res(st.rb2);
        m.dec_stages.push_back(std::move(s3));
    }
    m.dec_norm_out = detail::inflate_norm(m2d.dec_norm_out);
    m.dec_out = detail::inflate_conv(m2d.dec_out);
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoint format MVC1
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u64le(std::ostream& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64le(std::istream& in) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(in.get())) << (8 * i);
    return v;
}

inline void put_f64le(std::ostream& out, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64le(out, v);
}

inline double get_f64le(std::istream& in) {
    const uint64_t v = get_u64le(in);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace detail

inline void save_model(std::ostream& out, VAEModel& m) {
    out.write("MVC1", 4);
    out.put(static_cast<char>(m.config.ndim));
    detail::put_u32le(out, static_cast<uint32_t>(m.config.f));
    detail::put_u32le(out, static_cast<uint32_t>(m.config.latent_channels));
    detail::put_u32le(out, static_cast<uint32_t>(m.config.base_width));
    detail::put_u32le(out, static_cast<uint32_t>(m.config.stages()));
    detail::put_u32le(out, static_cast<uint32_t>(m.config.groups));
    std::vector<std::pair<std::string, Tensor*>> table;
    m.for_each_param([&](const std::string& name, Tensor& t) { table.emplace_back(name, &t); });
    detail::put_u32le(out, static_cast<uint32_t>(table.size()));
    for (auto& [name, t] : table) {
        detail::put_u32le(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32le(out, static_cast<uint32_t>(t->shape().size()));
        for (int64_t e : t->shape()) detail::put_u32le(out, static_cast<uint32_t>(e));
        for (double v : t->data()) detail::put_f64le(out, v);
    }
}

inline void save_model(const std::string& path, VAEModel& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("checkpoint: cannot write " + path);
    save_model(out, m);
}

inline VAEModel load_model(std::istream& in, const std::string& where = "<stream>") {
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "MVC1", 4) != 0)
        throw FormatError("checkpoint: magic mismatch in " + where);
    VAEConfig cfg;
    cfg.ndim = in.get();
    cfg.f = detail::get_u32le(in);
    cfg.latent_channels = detail::get_u32le(in);
    cfg.base_width = detail::get_u32le(in);
    const auto stages = detail::get_u32le(in);
    cfg.groups = detail::get_u32le(in);
    if (!in) throw FormatError("checkpoint: truncated config block in " + where);
    cfg.validate();
    if (static_cast<int64_t>(stages) != cfg.stages())
        throw FormatError("checkpoint: stage count inconsistent with downsizing factor in " + where);

    const uint32_t count = detail::get_u32le(in);
    std::map<std::string, std::pair<Shape, std::vector<double>>> table;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::get_u32le(in);
        if (!in || name_len > 4096) throw FormatError("checkpoint: corrupt name length in " + where);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint32_t rank = detail::get_u32le(in);
        if (!in || rank > 8) throw FormatError("checkpoint: corrupt tensor rank in " + where);
        Shape shape;
        for (uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get_u32le(in));
        const int64_t n = numel_of(shape);
        std::vector<double> data(static_cast<size_t>(n));
        for (int64_t j = 0; j < n; ++j) data[static_cast<size_t>(j)] = detail::get_f64le(in);
        if (!in) throw FormatError("checkpoint: truncated parameter payload in " + where);
        table[name] = {std::move(shape), std::move(data)};
    }

    VAEModel m = make_vae(cfg, /*seed=*/0);
    if (table.count("head.c1.w")) {
        const int64_t hidden = table["head.c1.w"].first[0];
        m.head = make_projection_head(cfg.latent_channels, hidden, 0);
    }
    int64_t lora_rank = 0;
    for (const auto& [name, entry] : table)
        if (name.ends_with(".lora_a")) {
            lora_rank = entry.first[0];
            break;
        }
    if (lora_rank > 0) apply_lora(m, lora_rank);

    size_t filled = 0;
    m.for_each_param([&](const std::string& name, Tensor& t) {
        auto it = table.find(name);
        if (it == table.end()) throw FormatError("checkpoint: missing parameter '" + name + "' in " + where);
        if (it->second.first != t.shape())
            throw FormatError("checkpoint: shape mismatch for '" + name + "' in " + where);
        auto dst = t.mutable_data();
        std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
        ++filled;
    });
    if (filled != table.size())
        throw FormatError("checkpoint: unknown extra parameters in " + where);
    return m;
}

inline VAEModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path);
    return load_model(in, path);
}

// FNV-1a over every parameter payload; used for freeze-invariance checks.
inline uint64_t param_hash(VAEModel& m) {
    uint64_t h = 1469598103934665603ull;
    m.for_each_param([&](const std::string& name, Tensor& t) {
        for (char c : name) {
            h ^= static_cast<uint8_t>(c);
            h *= 1099511628211ull;
        }
        for (double v : t.data()) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 1099511628211ull;
            }
        }
    });
    return h;
}

// ---------------------------------------------------------------------------
// Image/volume <-> tensor bridges
// ---------------------------------------------------------------------------

inline Tensor image_to_tensor(const Image2D& img) {
    return Tensor({1, 1, img.height, img.width}, img.values);
}

inline Tensor batch_images(const std::vector<Image2D>& imgs) {
    if (imgs.empty()) throw ShapeError("batch_images: empty batch");
    const int64_t h = imgs[0].height, w = imgs[0].width;
    std::vector<double> data;
    data.reserve(imgs.size() * static_cast<size_t>(h * w));
    for (const auto& im : imgs) {
        if (im.height != h || im.width != w) throw ShapeError("batch_images: inconsistent extents");
        data.insert(data.end(), im.values.begin(), im.values.end());
    }
    return Tensor({static_cast<int64_t>(imgs.size()), 1, h, w}, std::move(data));
}

inline Image2D tensor_to_image(const Tensor& t, bool clamp01 = true) {
    const Shape& s = t.shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != 1)
        throw ShapeError("tensor_to_image: expected [1,1,H,W], got " + shape_str(s));
    Image2D img;
    img.height = s[2];
    img.width = s[3];
    img.values.assign(t.data().begin(), t.data().end());
    if (clamp01)
        for (auto& v : img.values) v = std::min(std::max(v, 0.0), 1.0);
    return img;
}

inline Tensor volume_to_tensor(const Volume3D& vol) {
    return Tensor({1, 1, vol.height, vol.width, vol.slices}, vol.values);
}

inline Volume3D tensor_to_volume(const Tensor& t, bool clamp01 = true) {
    const Shape& s = t.shape();
    if (s.size() != 5 || s[0] != 1 || s[1] != 1)
        throw ShapeError("tensor_to_volume: expected [1,1,H,W,S], got " + shape_str(s));
    Volume3D vol;
    vol.height = s[2];
    vol.width = s[3];
    vol.slices = s[4];
    vol.values.assign(t.data().begin(), t.data().end());
    if (clamp01)
        for (auto& v : vol.values) v = std::min(std::max(v, 0.0), 1.0);
    return vol;
}

}  // namespace medvae
