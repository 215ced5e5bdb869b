#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "medvae/imageio.hpp"
#include "medvae/optim.hpp"
#include "medvae/tensor.hpp"
#include "medvae/vae.hpp"

namespace medvae {

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

inline double psnr(std::span<const double> x, std::span<const double> y, double peak = 1.0) {
    if (x.size() != y.size()) throw ShapeError("psnr: length mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < x.size(); ++i) mse += (x[i] - y[i]) * (x[i] - y[i]);
    mse /= static_cast<double>(x.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr(const Image2D& a, const Image2D& b, double peak = 1.0) {
    if (a.height != b.height || a.width != b.width) throw ShapeError("psnr: image shape mismatch");
    return psnr(std::span<const double>(a.values), std::span<const double>(b.values), peak);
}

inline double psnr(const Volume3D& a, const Volume3D& b, double peak = 1.0) {
    if (a.height != b.height || a.width != b.width || a.slices != b.slices)
        throw ShapeError("psnr: volume shape mismatch");
    return psnr(std::span<const double>(a.values), std::span<const double>(b.values), peak);
}

inline std::vector<double> region_psnr(const Image2D& x, const Image2D& xhat,
                                       const std::vector<BoundingBox>& boxes, double peak = 1.0) {
    std::vector<double> out;
    out.reserve(boxes.size());
    for (const auto& b : boxes) out.push_back(psnr(extract_region(x, b), extract_region(xhat, b), peak));
    return out;
}

// ---------------------------------------------------------------------------
// MS-SSIM (2D and 3D via separable Gaussian filtering, valid mode)
// ---------------------------------------------------------------------------

struct MsSsimOptions {
    int max_scales = 5;
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double peak = 1.0;
};

struct MsSsimResult {
    double value = 0.0;
    int scales_used = 0;
};

namespace detail {

inline std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> w(static_cast<size_t>(n));
    const double c = (n - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        w[static_cast<size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Valid-mode separable filtering along one axis of [pre][n][post].
inline std::vector<double> filter_axis_valid(const std::vector<double>& src, int64_t pre, int64_t n,
                                             int64_t post, const std::vector<double>& win) {
    const int64_t k = static_cast<int64_t>(win.size());
    const int64_t n_out = n - k + 1;
    std::vector<double> dst(static_cast<size_t>(pre * n_out * post), 0.0);
    for (int64_t p = 0; p < pre; ++p)
        for (int64_t o = 0; o < n_out; ++o) {
            double* drow = dst.data() + (p * n_out + o) * post;
            for (int64_t t = 0; t < k; ++t) {
                const double w = win[static_cast<size_t>(t)];
                const double* srow = src.data() + (p * n + o + t) * post;
                for (int64_t q = 0; q < post; ++q) drow[q] += w * srow[q];
            }
        }
    return dst;
}

inline std::vector<double> gaussian_filter_nd(const std::vector<double>& src,
                                              std::vector<int64_t> dims,
                                              const std::vector<double>& win,
                                              std::vector<int64_t>& out_dims) {
    std::vector<double> cur = src;
    const int64_t k = static_cast<int64_t>(win.size());
    out_dims = dims;
    for (size_t axis = 0; axis < dims.size(); ++axis) {
        int64_t pre = 1, post = 1;
        for (size_t i = 0; i < axis; ++i) pre *= out_dims[i];
        for (size_t i = axis + 1; i < out_dims.size(); ++i) post *= out_dims[i];
        cur = filter_axis_valid(cur, pre, out_dims[axis], post, win);
        out_dims[axis] = out_dims[axis] - k + 1;
    }
    return cur;
}

// 2x average pooling on every axis, floor extents.
inline std::vector<double> avg_pool2_nd(const std::vector<double>& src, std::vector<int64_t>& dims) {
    std::vector<int64_t> od(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) od[i] = dims[i] / 2;
    const size_t nd = dims.size();
    int64_t total = 1;
    for (int64_t e : od) total *= e;
    std::vector<double> dst(static_cast<size_t>(total), 0.0);
    const double inv = 1.0 / static_cast<double>(int64_t{1} << nd);
    std::vector<int64_t> idx(nd, 0);
    for (int64_t flat = 0; flat < total; ++flat) {
        int64_t rem = flat;
        for (size_t i = nd; i-- > 0;) {
            idx[i] = rem % od[i];
            rem /= od[i];
        }
        double acc = 0.0;
        for (int64_t corner = 0; corner < (int64_t{1} << nd); ++corner) {
            int64_t off = 0;
            for (size_t i = 0; i < nd; ++i) {
                const int64_t bit = (corner >> (nd - 1 - i)) & 1;
                off = off * dims[i] + (idx[i] * 2 + bit);
            }
            acc += src[static_cast<size_t>(off)];
        }
        dst[static_cast<size_t>(flat)] = acc * inv;
    }
    dims = od;
    return dst;
}

struct SsimScale {
    double cs = 0.0;
    double ssim = 0.0;
};

inline SsimScale ssim_scale(const std::vector<double>& x, const std::vector<double>& y,
                            const std::vector<int64_t>& dims, const MsSsimOptions& o) {
    const auto win = gaussian_window(o.window, o.sigma);
    std::vector<int64_t> fd;
    auto mx = gaussian_filter_nd(x, dims, win, fd);
    auto my = gaussian_filter_nd(y, dims, win, fd);
    std::vector<double> xx(x.size()), yy(y.size()), xy(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    auto mxx = gaussian_filter_nd(xx, dims, win, fd);
    auto myy = gaussian_filter_nd(yy, dims, win, fd);
    auto mxy = gaussian_filter_nd(xy, dims, win, fd);
    const double c1 = (o.k1 * o.peak) * (o.k1 * o.peak);
    const double c2 = (o.k2 * o.peak) * (o.k2 * o.peak);
    double cs_sum = 0.0, ssim_sum = 0.0;
    for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = mxx[i] - mx[i] * mx[i];
        const double vy = myy[i] - my[i] * my[i];
        const double cxy = mxy[i] - mx[i] * my[i];
        const double cs = (2.0 * cxy + c2) / (vx + vy + c2);
        const double l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    const double n = static_cast<double>(mx.size());
    return {cs_sum / n, ssim_sum / n};
}

inline const std::vector<double>& msssim_weights() {
    static const std::vector<double> w{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    return w;
}

}  // namespace detail

inline MsSsimResult ms_ssim(std::vector<double> x, std::vector<double> y, std::vector<int64_t> dims,
                            const MsSsimOptions& opts = {}) {
    if (x.size() != y.size()) throw ShapeError("ms_ssim: length mismatch");
    int64_t min_extent = dims.empty() ? 0 : dims[0];
    int64_t total = 1;
    for (int64_t d : dims) {
        min_extent = std::min(min_extent, d);
        total *= d;
    }
    if (total != static_cast<int64_t>(x.size())) throw ShapeError("ms_ssim: dims do not match data");
    // largest scale count with a valid window at the coarsest level
    int scales = 0;
    for (int m = 1; m <= opts.max_scales; ++m) {
        if ((min_extent >> (m - 1)) >= opts.window) scales = m;
    }
    if (scales == 0)
        throw ShapeError("ms_ssim: min extent " + std::to_string(min_extent) +
                         " too small for window " + std::to_string(opts.window));
    const auto& wfull = detail::msssim_weights();
    std::vector<double> w(wfull.begin(), wfull.begin() + scales);
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& v : w) v /= wsum;

    double value = 1.0;
    for (int m = 1; m <= scales; ++m) {
        auto sc = detail::ssim_scale(x, y, dims, opts);
        if (m < scales) {
            value *= std::pow(std::max(sc.cs, 0.0), w[static_cast<size_t>(m - 1)]);
            std::vector<int64_t> dx = dims, dy = dims;
            x = detail::avg_pool2_nd(x, dx);
            y = detail::avg_pool2_nd(y, dy);
            dims = dx;
        } else {
            value *= std::pow(std::max(sc.ssim, 0.0), w[static_cast<size_t>(m - 1)]);
        }
    }
    return {value, scales};
}

inline MsSsimResult ms_ssim(const Image2D& a, const Image2D& b, const MsSsimOptions& opts = {}) {
    if (a.height != b.height || a.width != b.width) throw ShapeError("ms_ssim: image shape mismatch");
    return ms_ssim(a.values, b.values, {a.height, a.width}, opts);
}

inline MsSsimResult ms_ssim(const Volume3D& a, const Volume3D& b, const MsSsimOptions& opts = {}) {
    if (a.height != b.height || a.width != b.width || a.slices != b.slices)
        throw ShapeError("ms_ssim: volume shape mismatch");
    return ms_ssim(a.values, b.values, {a.height, a.width, a.slices}, opts);
}

// ---------------------------------------------------------------------------
// AUROC (Mann-Whitney, ties counted half)
// ---------------------------------------------------------------------------

inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auroc: score/label count mismatch");
    int64_t n_pos = 0, n_neg = 0;
    for (int l : labels) {
        if (l == 1)
            ++n_pos;
        else if (l == 0)
            ++n_neg;
        else
            throw ShapeError("auroc: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0) throw ShapeError("auroc: both classes must be present");
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    // average ranks over tie groups
    std::vector<double> rank(scores.size(), 0.0);
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_pos = 0.0;
    for (size_t k = 0; k < scores.size(); ++k)
        if (labels[k] == 1) rank_pos += rank[k];
    const double u = rank_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct MacroAurocResult {
    double value = 0.0;
    std::vector<int> skipped_classes;  // classes with no positives in labels
};

inline MacroAurocResult macro_auroc(const std::vector<std::vector<double>>& scores,
                                    const std::vector<int>& labels, int num_classes) {
    if (scores.size() != labels.size()) throw ShapeError("macro_auroc: score/label count mismatch");
    int present = 0;
    MacroAurocResult out;
    double sum = 0.0;
    for (int k = 0; k < num_classes; ++k) {
        std::vector<double> s;
        std::vector<int> y;
        int pos = 0;
        for (size_t i = 0; i < labels.size(); ++i) {
            s.push_back(scores[i][static_cast<size_t>(k)]);
            const int bin = labels[i] == k ? 1 : 0;
            pos += bin;
            y.push_back(bin);
        }
        if (pos == 0 || pos == static_cast<int>(labels.size())) {
            out.skipped_classes.push_back(k);
            continue;
        }
        sum += auroc(s, y);
        ++present;
    }
    if (present == 0)
        throw ShapeError("macro_auroc: need at least two classes present in labels");
    out.value = sum / static_cast<double>(present);
    return out;
}

// ---------------------------------------------------------------------------
// Linear probe on latents: frozen random conv backbone + trainable linear head
// ---------------------------------------------------------------------------

constexpr uint64_t kProbeBackboneSeed = 2002;

struct LabeledLatentDataset {
    std::vector<Tensor> inputs;  // [1,1,h,w] after channel-mean preprocessing
    std::vector<int> labels;
    std::string split;

    static LabeledLatentDataset from_latents(const std::vector<Tensor>& latents,
                                             const std::vector<int>& labels,
                                             const std::string& split = "train") {
        if (latents.size() != labels.size())
            throw ShapeError("latent dataset: label count mismatch");
        LabeledLatentDataset d;
        d.split = split;
        d.labels = labels;
        NoGradGuard ng;
        for (const auto& z : latents) {
            Tensor t = z;
            if (t.shape().size() != 4) throw ShapeError("latent dataset: expected [1,C,h,w] latents");
            if (t.shape()[1] != 1) t = channel_mean(t);
            d.inputs.push_back(t.detach());
        }
        return d;
    }
};

struct ProbeConfig {
    int64_t epochs = 40;
    int64_t batch = 16;
    double lr = 1e-4;
    bool weighted_sampling = false;
    uint64_t seed = 0;
    int64_t backbone_width = 16;
    uint64_t backbone_seed = kProbeBackboneSeed;
};

struct Probe {
    std::vector<ConvLayer> convs;  // frozen, stride-2
    Tensor head_w;                 // [F, K] (K = 1 for binary)
    Tensor head_b;                 // [K]
    int num_classes = 2;

    int64_t feature_dim() const { return convs.back().weight.shape()[0]; }

    Tensor features(const Tensor& x) const {
        Tensor h = x;
        for (const auto& c : convs) h = silu(c.forward(h, 2));
        return spatial_mean(h);
    }

    Tensor logits(const Tensor& x) const { return linear(features(x), head_w, &head_b); }
};

inline Probe make_probe(const ProbeConfig& cfg, int num_classes) {
    Rng rng(cfg.backbone_seed ^ 0x9e0beULL);
    Probe p;
    p.num_classes = num_classes;
    const int64_t w = cfg.backbone_width;
    p.convs.push_back(detail::make_conv(1, w, 3, 2, 1, 2, rng));
    p.convs.push_back(detail::make_conv(w, 2 * w, 3, 2, 1, 2, rng));
    p.convs.push_back(detail::make_conv(2 * w, 2 * w, 3, 2, 1, 2, rng));
    for (auto& c : p.convs) {
        c.weight.set_requires_grad(false);
        c.bias.set_requires_grad(false);
    }
    const int64_t k = num_classes == 2 ? 1 : num_classes;
    p.head_w = Tensor::zeros({2 * w, k}, true);
    p.head_b = Tensor::zeros({k}, true);
    return p;
}

struct ProbeTrainStats {
    std::vector<int64_t> class_draws;  // sampler diagnostics
    double final_loss = 0.0;
};

namespace detail {

inline Tensor batch_latents(const LabeledLatentDataset& d, const std::vector<size_t>& idx) {
    std::vector<double> buf;
    const Shape& s = d.inputs[0].shape();
    buf.reserve(idx.size() * static_cast<size_t>(s[2] * s[3]));
    for (size_t i : idx) {
        const auto& t = d.inputs[i];
        if (t.shape() != s) throw ShapeError("probe: inconsistent latent extents in dataset");
        buf.insert(buf.end(), t.data().begin(), t.data().end());
    }
    return Tensor({static_cast<int64_t>(idx.size()), 1, s[2], s[3]}, std::move(buf));
}

}  // namespace detail

inline ProbeTrainStats train_probe(Probe& probe, const ProbeConfig& cfg,
                                   const LabeledLatentDataset& train) {
    if (train.inputs.empty()) throw ShapeError("train_probe: empty dataset");
    int distinct = 0;
    std::vector<int64_t> counts(static_cast<size_t>(std::max(probe.num_classes, 2)), 0);
    for (int l : train.labels) {
        if (l < 0 || l >= static_cast<int>(counts.size()))
            throw ShapeError("train_probe: label out of range");
        if (counts[static_cast<size_t>(l)]++ == 0) ++distinct;
    }
    if (distinct < 2) throw ShapeError("train_probe: training set contains a single class");

    // weighted sampling: per-draw probability proportional to 1/count(class)
    std::vector<double> cum(train.inputs.size());
    {
        double acc = 0.0;
        for (size_t i = 0; i < train.inputs.size(); ++i) {
            const double w = cfg.weighted_sampling
                                 ? 1.0 / static_cast<double>(counts[static_cast<size_t>(train.labels[i])])
                                 : 1.0;
            acc += w;
            cum[i] = acc;
        }
        for (auto& v : cum) v /= acc;
    }
    Rng rng(cfg.seed);
    auto draw = [&]() {
        const double u = rng.uniform();
        return static_cast<size_t>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    };

    ProbeTrainStats stats;
    stats.class_draws.assign(counts.size(), 0);
    std::vector<Tensor> params{probe.head_w, probe.head_b};
    AdamW opt(AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, 0.01});
    const int64_t steps_per_epoch =
        (static_cast<int64_t>(train.inputs.size()) + cfg.batch - 1) / cfg.batch;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int64_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<size_t> idx;
            idx.reserve(static_cast<size_t>(cfg.batch));
            for (int64_t b = 0; b < cfg.batch; ++b) {
                const size_t i = draw();
                stats.class_draws[static_cast<size_t>(train.labels[i])]++;
                idx.push_back(i);
            }
            Tensor x = detail::batch_latents(train, idx);
            Tensor logits = probe.logits(x);
            Tensor loss;
            if (probe.num_classes == 2) {
                std::vector<double> targets;
                for (size_t i : idx) targets.push_back(static_cast<double>(train.labels[i]));
                loss = bce_logits(logits, targets);
            } else {
                std::vector<int> labels;
                for (size_t i : idx) labels.push_back(train.labels[i]);
                loss = softmax_cross_entropy(logits, labels);
            }
            if (!std::isfinite(loss.item()))
                throw TrainingError("train_probe: non-finite loss");
            AdamW::zero_grad(params);
            backward(loss);
            opt.step(params);
            stats.final_loss = loss.item();
        }
    }
    return stats;
}

struct ProbeEvalResult {
    double auroc_value = 0.0;
    std::vector<int> skipped_classes;
};

inline ProbeEvalResult eval_probe(const Probe& probe, const LabeledLatentDataset& test) {
    if (test.inputs.empty()) throw ShapeError("eval_probe: empty dataset");
    NoGradGuard ng;
    ProbeEvalResult out;
    if (probe.num_classes == 2) {
        std::vector<double> scores;
        for (const auto& x : test.inputs) {
            Tensor l = probe.logits(x);
            scores.push_back(sigmoid(l).item());
        }
        out.auroc_value = auroc(scores, test.labels);
    } else {
        std::vector<std::vector<double>> scores;
        for (const auto& x : test.inputs) {
            Tensor l = probe.logits(x);
            std::vector<double> row(l.data().begin(), l.data().end());
            // softmax per row
            double zmax = row[0];
            for (double v : row) zmax = std::max(zmax, v);
            double denom = 0.0;
            for (auto& v : row) {
                v = std::exp(v - zmax);
                denom += v;
            }
            for (auto& v : row) v /= denom;
            scores.push_back(std::move(row));
        }
        auto mr = macro_auroc(scores, test.labels, probe.num_classes);
        out.auroc_value = mr.value;
        out.skipped_classes = mr.skipped_classes;
    }
    return out;
}

// Mean +- std over seeds; the paper's three-seed reporting convention.
struct ProbeReport {
    std::vector<uint64_t> seeds;
    std::vector<double> per_seed;
    double mean = 0.0;
    double stddev = 0.0;
};

inline ProbeReport probe_protocol(const ProbeConfig& base_cfg, const LabeledLatentDataset& train,
                                  const LabeledLatentDataset& test, int num_classes,
                                  const std::vector<uint64_t>& seeds) {
    ProbeReport rep;
    rep.seeds = seeds;
    for (uint64_t s : seeds) {
        ProbeConfig cfg = base_cfg;
        cfg.seed = s;
        Probe p = make_probe(cfg, num_classes);
        train_probe(p, cfg, train);
        rep.per_seed.push_back(eval_probe(p, test).auroc_value);
    }
    double sum = 0.0;
    for (double v : rep.per_seed) sum += v;
    rep.mean = sum / static_cast<double>(rep.per_seed.size());
    double var = 0.0;
    for (double v : rep.per_seed) var += (v - rep.mean) * (v - rep.mean);
    rep.stddev = std::sqrt(var / static_cast<double>(rep.per_seed.size()));
    return rep;
}

// ---------------------------------------------------------------------------
// Metric report (per-sample rows; aggregates recomputable from rows)
// ---------------------------------------------------------------------------

struct MetricRow {
    int64_t index = 0;
    double psnr_db = 0.0;
    double ms_ssim_value = 0.0;
    int scales = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    uint64_t seed = 0;

    double psnr_mean() const {
        double s = 0.0;
        for (const auto& r : rows) s += r.psnr_db;
        return s / static_cast<double>(rows.size());
    }
    double msssim_mean() const {
        double s = 0.0;
        for (const auto& r : rows) s += r.ms_ssim_value;
        return s / static_cast<double>(rows.size());
    }
    double psnr_std() const {
        const double m = psnr_mean();
        double v = 0.0;
        for (const auto& r : rows) v += (r.psnr_db - m) * (r.psnr_db - m);
        return std::sqrt(v / static_cast<double>(rows.size()));
    }
    double msssim_std() const {
        const double m = msssim_mean();
        double v = 0.0;
        for (const auto& r : rows) v += (r.ms_ssim_value - m) * (r.ms_ssim_value - m);
        return std::sqrt(v / static_cast<double>(rows.size()));
    }
};

inline void write_metric_report_csv(const std::string& path, const MetricReport& rep) {
    std::ofstream out(path);
    if (!out) throw FormatError("metric report: cannot write " + path);
    out << "index,psnr,ms_ssim,scales,seed\n";
    out.precision(17);
    for (const auto& r : rep.rows)
        out << r.index << "," << r.psnr_db << "," << r.ms_ssim_value << "," << r.scales << ","
            << rep.seed << "\n";
}

}  // namespace medvae
