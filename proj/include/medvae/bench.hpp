#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "medvae/evalsuite.hpp"
#include "medvae/imageio.hpp"
#include "medvae/vae.hpp"

namespace medvae {

// ---------------------------------------------------------------------------
// MVL latent file: 'MVL1' | u8 ndim | u32 f | u32 C | (ndim+1) u32 extents
// (spatial..., C) | float32 LE payload, row-major over (spatial..., C).
// ---------------------------------------------------------------------------

struct LatentMeta {
    int ndim = 2;
    int64_t f = 1;
    int64_t channels = 1;
    std::vector<int64_t> spatial;

    int64_t payload_bytes() const {
        int64_t n = channels;
        for (int64_t e : spatial) n *= e;
        return n * 4;
    }
};

// latent tensor layout is channels-first [1,C,spatial...]; on disk the payload
// is row-major over (spatial..., C) matching the header extent order.
inline void write_latent(const std::string& path, const Tensor& latent, int64_t f) {
    const Shape& s = latent.shape();
    if (s.size() < 4 || s[0] != 1)
        throw ShapeError("write_latent: expected [1,C,spatial...], got " + shape_str(s));
    const int ndim = static_cast<int>(s.size()) - 2;
    if (ndim != 2 && ndim != 3) throw ShapeError("write_latent: ndim must be 2 or 3");
    const int64_t C = s[1];
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("latent: cannot write " + path);
    out.write("MVL1", 4);
    out.put(static_cast<char>(ndim));
    detail::put_u32le(out, static_cast<uint32_t>(f));
    detail::put_u32le(out, static_cast<uint32_t>(C));
    for (int a = 0; a < ndim; ++a) detail::put_u32le(out, static_cast<uint32_t>(s[2 + a]));
    detail::put_u32le(out, static_cast<uint32_t>(C));
    int64_t P = 1;
    for (int a = 0; a < ndim; ++a) P *= s[2 + a];
    const double* d = latent.data().data();
    for (int64_t p = 0; p < P; ++p)
        for (int64_t c = 0; c < C; ++c)
            detail::put_f32le(out, static_cast<float>(d[c * P + p]));
}

inline std::pair<Tensor, LatentMeta> read_latent(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("latent: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "MVL1", 4) != 0)
        throw FormatError("latent: magic mismatch in " + path);
    LatentMeta meta;
    meta.ndim = in.get();
    if (meta.ndim != 2 && meta.ndim != 3) throw FormatError("latent: bad ndim in " + path);
    meta.f = detail::get_u32le(in);
    meta.channels = detail::get_u32le(in);
    for (int a = 0; a < meta.ndim; ++a) meta.spatial.push_back(detail::get_u32le(in));
    const int64_t c_extent = detail::get_u32le(in);
    if (!in) throw FormatError("latent: truncated header in " + path);
    if (c_extent != meta.channels)
        throw FormatError("latent: header channel extent disagrees with C in " + path);
    int64_t P = 1;
    for (int64_t e : meta.spatial) P *= e;
    std::vector<double> data(static_cast<size_t>(P * meta.channels));
    for (int64_t p = 0; p < P; ++p)
        for (int64_t c = 0; c < meta.channels; ++c) {
            data[static_cast<size_t>(c * P + p)] = static_cast<double>(detail::get_f32le(in));
            if (!in) throw FormatError("latent: payload length mismatch in " + path);
        }
    in.get();
    if (!in.eof()) throw FormatError("latent: payload length mismatch (trailing bytes) in " + path);
    Shape shape{1, meta.channels};
    for (int64_t e : meta.spatial) shape.push_back(e);
    return {Tensor(std::move(shape), std::move(data)), meta};
}

// (source element count x 4 bytes) / latent payload bytes; equals f when C=1.
inline double storage_ratio(const std::vector<int64_t>& source_dims, const LatentMeta& meta) {
    int64_t n = 1;
    for (int64_t e : source_dims) n *= e;
    return static_cast<double>(n * 4) / static_cast<double>(meta.payload_bytes());
}

// ---------------------------------------------------------------------------
// Forward-pass benchmarking
// ---------------------------------------------------------------------------

struct BenchReport {
    std::string id;
    std::vector<int64_t> input_dims;
    int64_t batch = 1;
    int64_t repetitions = 0;
    int64_t warmup = 0;
    double latency_ms = 0.0;   // median over timed repetitions
    double throughput = 0.0;   // batch / latency(s), exact by construction
    int64_t max_batch = 0;     // 0 unless bench_max_batch ran
    double timer_resolution_ns = 0.0;
};

inline double timer_resolution_ns() {
    using period = std::chrono::steady_clock::period;
    return 1e9 * static_cast<double>(period::num) / static_cast<double>(period::den);
}

inline BenchReport bench_forward(const std::string& id, const std::vector<int64_t>& input_dims,
                                 int64_t batch, int64_t repetitions, int64_t warmup,
                                 const std::function<void()>& forward) {
    if (batch < 1) throw ConfigError("bench: batch must be >= 1");
    if (repetitions < 3) throw ConfigError("bench: repetitions must be >= 3");
    for (int64_t i = 0; i < warmup; ++i) forward();
    std::vector<double> samples;
    samples.reserve(static_cast<size_t>(repetitions));
    for (int64_t i = 0; i < repetitions; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        forward();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    const double median = samples.size() % 2 == 1
                              ? samples[samples.size() / 2]
                              : 0.5 * (samples[samples.size() / 2 - 1] + samples[samples.size() / 2]);
    BenchReport rep;
    rep.id = id;
    rep.input_dims = input_dims;
    rep.batch = batch;
    rep.repetitions = repetitions;
    rep.warmup = warmup;
    rep.latency_ms = median;
    rep.throughput = static_cast<double>(batch) / (median / 1000.0);
    rep.timer_resolution_ns = timer_resolution_ns();
    return rep;
}

// Largest power-of-two batch whose predicted footprint fits the budget.
inline int64_t bench_max_batch(const std::function<uint64_t(int64_t)>& footprint_bytes,
                               uint64_t budget_bytes) {
    if (footprint_bytes(1) > budget_bytes)
        throw ConfigError("bench: a single sample exceeds the memory budget");
    int64_t batch = 1;
    while (batch < (int64_t{1} << 40) && footprint_bytes(batch * 2) <= budget_bytes) batch *= 2;
    return batch;
}

// ---------------------------------------------------------------------------
// Analytic footprint models: parameters + per-sample activations, 8 bytes per
// element (the engine computes in f64).
// ---------------------------------------------------------------------------

inline uint64_t probe_footprint_bytes(const Probe& probe, int64_t h, int64_t w, int64_t batch) {
    uint64_t params = 0;
    for (const auto& c : probe.convs)
        params += static_cast<uint64_t>(c.weight.numel() + c.bias.numel());
    params += static_cast<uint64_t>(probe.head_w.numel() + probe.head_b.numel());
    uint64_t acts = static_cast<uint64_t>(h * w);  // input
    int64_t ch = 1, hh = h, ww = w;
    for (const auto& c : probe.convs) {
        hh = detail::conv_out_extent(hh, c.weight.shape()[2], c.stride, c.pad);
        ww = detail::conv_out_extent(ww, c.weight.shape()[3], c.stride, c.pad);
        ch = c.weight.shape()[0];
        acts += static_cast<uint64_t>(ch * hh * ww);
    }
    acts += static_cast<uint64_t>(ch);                         // pooled features
    acts += static_cast<uint64_t>(probe.head_w.shape()[1]);    // logits
    return (params + static_cast<uint64_t>(batch) * acts) * 8;
}

inline uint64_t vae_footprint_bytes(const VAEModel& m, const std::vector<int64_t>& spatial,
                                    int64_t batch) {
    uint64_t params = 0;
    const_cast<VAEModel&>(m).for_each_param(
        [&](const std::string&, Tensor& t) { params += static_cast<uint64_t>(t.numel()); });
    const int64_t S = m.config.stages();
    uint64_t acts = 0;
    auto spatial_numel = [&](int64_t shift) {
        int64_t n = 1;
        for (int64_t e : spatial) n *= (e >> shift);
        return n;
    };
    acts += static_cast<uint64_t>(spatial_numel(0));  // input
    for (int64_t i = 0; i <= S; ++i) {
        // two residual blocks (4 conv activations) plus stage transition
        const int64_t w = detail::stage_width(m.config, i);
        acts += static_cast<uint64_t>(5 * w * spatial_numel(i));
    }
    acts += static_cast<uint64_t>(2 * m.config.latent_channels * spatial_numel(S));  // mu/logvar
    // decoder mirrors the encoder
    for (int64_t i = S; i >= 0; --i) {
        const int64_t w = detail::stage_width(m.config, i);
        acts += static_cast<uint64_t>(5 * w * spatial_numel(i));
    }
    acts += static_cast<uint64_t>(spatial_numel(0));  // output
    return (params + static_cast<uint64_t>(batch) * acts) * 8;
}

inline void write_bench_report_csv(const std::string& path, const std::vector<BenchReport>& reports) {
    std::ofstream out(path);
    if (!out) throw FormatError("bench report: cannot write " + path);
    out << "id,input_dims,batch,repetitions,warmup,latency_ms,throughput,max_batch,timer_resolution_"
           "ns\n";
    out.precision(17);
    for (const auto& r : reports) {
        out << r.id << ",";
        for (size_t i = 0; i < r.input_dims.size(); ++i) out << (i ? "x" : "") << r.input_dims[i];
        out << "," << r.batch << "," << r.repetitions << "," << r.warmup << "," << r.latency_ms << ","
            << r.throughput << "," << r.max_batch << "," << r.timer_resolution_ns << "\n";
    }
}

}  // namespace medvae
