#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "medvae/imageio.hpp"
#include "medvae/losses.hpp"
#include "medvae/optim.hpp"
#include "medvae/vae.hpp"

namespace medvae {

// One canonical frozen embedder per experiment; Stage 1, Stage 2 and the
// evaluation CLI must all see the same b(.)
constexpr uint64_t kEmbedderSeed = 1001;

enum class TrainStage : uint8_t { S1_2D = 0, S2_2D = 1, S2_3D = 2, DecoderFinetune = 3 };

inline TrainStage train_stage_from_string(const std::string& s) {
    if (s == "s1_2d") return TrainStage::S1_2D;
    if (s == "s2_2d") return TrainStage::S2_2D;
    if (s == "s2_3d") return TrainStage::S2_3D;
    if (s == "decoder_finetune") return TrainStage::DecoderFinetune;
    throw ConfigError("unknown training stage '" + s + "'");
}

struct TrainConfig {
    TrainStage stage = TrainStage::S1_2D;
    int64_t steps = 300;
    int64_t batch = 8;
    double lr = 1e-4;
    double disc_lr = 0.0;  // 0: same as lr
    double weight_decay = 0.01;
    double grad_clip = 0.0;  // 0: off
    uint64_t seed = 0;
    LossWeights weights;
    int64_t patch_edge = 16;        // stage 2 3D
    int64_t target_f = 0;           // stage 2 3D: expected 3D downsizing factor (0: derive)
    int64_t head_hidden = 16;       // stage 2 2D projection head width
    int64_t checkpoint_every = 0;   // 0: final only

    void validate() const {
        if (steps < 1) throw ConfigError("train config: steps must be > 0");
        if (batch < 1) throw ConfigError("train config: batch must be >= 1");
        if (lr <= 0) throw ConfigError("train config: lr must be > 0");
    }
};

struct LossLogRow {
    int64_t step = 0;
    double total = 0, rec = 0, perc = 0, kl = 0, emb = 0, adv = 0;
};

inline void save_loss_log_csv(const std::string& path, const std::vector<LossLogRow>& log) {
    std::ofstream out(path);
    if (!out) throw FormatError("loss log: cannot write " + path);
    out << "step,loss_total,loss_rec,loss_perc,loss_kl,loss_emb,loss_adv\n";
    out.precision(17);
    for (const auto& r : log)
        out << r.step << "," << r.total << "," << r.rec << "," << r.perc << "," << r.kl << "," << r.emb
            << "," << r.adv << "\n";
}

// Everything a resumed run needs to continue bit-exactly.
struct TrainState {
    TrainStage stage = TrainStage::S1_2D;
    int64_t step = 0;
    Rng rng;
    VAEModel model;
    Discriminator disc;
    bool has_disc = false;
    AdamW opt_gen;
    AdamW opt_disc;
    std::vector<LossLogRow> log;
};

// ---------------------------------------------------------------------------
// Data containers (desk scale: fully materialized)
// ---------------------------------------------------------------------------

struct ImageSet {
    std::vector<Image2D> images;

    static ImageSet from_manifest(const DatasetManifest& m) {
        ImageSet s;
        for (const auto& rec : m.records) s.images.push_back(load_image2d(rec.path));
        return s;
    }
};

struct VolumeSet {
    std::vector<Volume3D> volumes;

    static VolumeSet from_manifest(const DatasetManifest& m) {
        VolumeSet s;
        for (const auto& rec : m.records) s.volumes.push_back(load_volume3d(rec.path));
        return s;
    }
};

struct LatentTargetSet {
    std::vector<Tensor> latents;   // [1,C,h,w,s]
    std::vector<Tensor> targets;   // [1,1,H,W,S]
};

namespace detail {

inline Tensor sample_image_batch(const ImageSet& data, int64_t batch, Rng& rng) {
    std::vector<Image2D> pick;
    pick.reserve(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i)
        pick.push_back(data.images[rng.uniform_below(data.images.size())]);
    return batch_images(pick);
}

inline Tensor sample_patch_batch(const VolumeSet& data, int64_t edge, int64_t batch, Rng& rng) {
    std::vector<double> buf;
    buf.reserve(static_cast<size_t>(batch * edge * edge * edge));
    for (int64_t i = 0; i < batch; ++i) {
        const auto& vol = data.volumes[rng.uniform_below(data.volumes.size())];
        Volume3D p = random_cubic_patch(vol, edge, rng);
        buf.insert(buf.end(), p.values.begin(), p.values.end());
    }
    return Tensor({batch, 1, edge, edge, edge}, std::move(buf));
}

inline void guard_finite(double loss, int64_t step) {
    if (!std::isfinite(loss))
        throw TrainingError("training diverged: non-finite loss at step " + std::to_string(step));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage loss evaluation (shared by trainers and tests)
// ---------------------------------------------------------------------------

// Stage-1 2D loss on a batch. rng == nullptr evaluates deterministically (z = mu).
inline Stage1Breakdown stage1_batch_loss(const VAEModel& model, const FeatureEmbedder& emb,
                                         const Discriminator* disc, const LossWeights& w,
                                         const Tensor& x, Rng* rng, int64_t step) {
    LatentDist dist = encode(model, x);
    Tensor z = rng ? reparameterize(dist, *rng) : reparameterize_deterministic(dist);
    Tensor xhat = decode(model, z);
    return stage1_total(w, emb, disc, x, xhat, dist, step);
}

// Stage-2 3D loss: per-slice reconstruction/perceptual/adversarial plus KL.
// Mirrors stage 1 with per-slice aggregation and no embedding-consistency term.
inline Stage1Breakdown stage2_3d_batch_loss(const VAEModel& model, const FeatureEmbedder& emb,
                                            const Discriminator* disc, const LossWeights& w,
                                            const Tensor& x, Rng* rng, int64_t step) {
    LatentDist dist = encode(model, x);
    Tensor z = rng ? reparameterize(dist, *rng) : reparameterize_deterministic(dist);
    Tensor vhat = decode(model, z);
    Stage1Breakdown out;
    Tensor rec = per_slice_loss([](const Tensor& a, const Tensor& b) { return l1(a, b); }, x, vhat);
    Tensor perc = per_slice_loss(
        [&](const Tensor& a, const Tensor& b) { return perceptual_loss(emb, a, b); }, x, vhat);
    Tensor kl = kl_penalty(dist);
    out.rec = rec.item();
    out.perc = perc.item();
    out.kl = kl.item();
    Tensor total = add(add(mul_scalar(rec, w.w_rec), mul_scalar(perc, w.w_perc)),
                       mul_scalar(kl, w.w_kl));
    if (disc && step >= w.adv_start_step) {
        const int64_t S = vhat.shape().back();
        Tensor adv = Tensor::scalar(0.0);
        for (int64_t s = 0; s < S; ++s) adv = add(adv, gen_loss(*disc, slice_last(vhat, s)));
        adv = mul_scalar(adv, 1.0 / static_cast<double>(S));
        out.adv = adv.item();
        total = add(total, mul_scalar(adv, w.w_adv));
    }
    out.total = total;
    return out;
}

// ---------------------------------------------------------------------------
// Trainers
// ---------------------------------------------------------------------------

using CheckpointHook = std::function<void(const TrainState&)>;

inline void train_stage1(TrainState& st, const TrainConfig& cfg, const ImageSet& data,
                         const FeatureEmbedder& emb, const CheckpointHook& hook = nullptr) {
    cfg.validate();
    if (st.model.config.ndim != 2) throw TrainingError("stage 1 expects a 2D model");
    if (data.images.empty()) throw TrainingError("stage 1: empty dataset");
    auto gen_params = st.model.trainable_parameters();
    auto disc_params = st.disc.parameters();
    const int64_t end = cfg.steps;
    for (; st.step < end; ++st.step) {
        Tensor x = detail::sample_image_batch(data, cfg.batch, st.rng);
        auto parts = stage1_batch_loss(st.model, emb, st.has_disc ? &st.disc : nullptr, cfg.weights, x,
                                       &st.rng, st.step);
        detail::guard_finite(parts.total.item(), st.step);
        AdamW::zero_grad(gen_params);
        backward(parts.total);
        if (cfg.grad_clip > 0) AdamW::clip_grad_norm(gen_params, cfg.grad_clip);
        st.opt_gen.step(gen_params);

        if (st.has_disc && st.step >= cfg.weights.adv_start_step) {
            LatentDist dist = encode(st.model, x);
            Tensor z = reparameterize_deterministic(dist);
            Tensor fake = decode(st.model, z).detach();
            Tensor dl = disc_loss(st.disc, x, fake);
            detail::guard_finite(dl.item(), st.step);
            AdamW::zero_grad(disc_params);
            backward(dl);
            if (cfg.grad_clip > 0) AdamW::clip_grad_norm(disc_params, cfg.grad_clip);
            st.opt_disc.step(disc_params);
        }
        st.log.push_back({st.step, parts.total.item(), parts.rec, parts.perc, parts.kl, parts.emb,
                          parts.adv});
        if (hook && cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0) hook(st);
    }
    if (hook) hook(st);
}

inline void train_stage2_2d(TrainState& st, const TrainConfig& cfg, const ImageSet& data,
                            const FeatureEmbedder& emb, const CheckpointHook& hook = nullptr) {
    cfg.validate();
    if (st.model.config.ndim != 2) throw TrainingError("stage 2 (2D) expects a 2D model");
    if (!st.model.head) throw TrainingError("stage 2 (2D) state is missing the projection head");
    if (data.images.empty()) throw TrainingError("stage 2 (2D): empty dataset");
    auto head_params = st.model.trainable_parameters();
    const int64_t end = cfg.steps;
    for (; st.step < end; ++st.step) {
        Tensor x = detail::sample_image_batch(data, cfg.batch, st.rng);
        LatentDist dist = encode(st.model, x);
        Tensor zbar = project_latent(*st.model.head, dist.mu);
        Tensor loss = embedding_consistency(emb, x, zbar);
        detail::guard_finite(loss.item(), st.step);
        AdamW::zero_grad(head_params);
        backward(loss);
        if (cfg.grad_clip > 0) AdamW::clip_grad_norm(head_params, cfg.grad_clip);
        st.opt_gen.step(head_params);
        st.log.push_back({st.step, loss.item(), 0, 0, 0, loss.item(), 0});
        if (hook && cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0) hook(st);
    }
    if (hook) hook(st);
}

inline void train_stage2_3d(TrainState& st, const TrainConfig& cfg, const VolumeSet& data,
                            const FeatureEmbedder& emb, const CheckpointHook& hook = nullptr) {
    cfg.validate();
    if (st.model.config.ndim != 3)
        throw TrainingError("stage 2 (3D) expects an inflated 3D model; load a 2D base through "
                            "init_stage2_3d or the inflate-3d command first");
    if (data.volumes.empty()) throw TrainingError("stage 2 (3D): empty dataset");
    auto gen_params = st.model.trainable_parameters();
    auto disc_params = st.disc.parameters();
    const int64_t end = cfg.steps;
    for (; st.step < end; ++st.step) {
        Tensor x = detail::sample_patch_batch(data, cfg.patch_edge, cfg.batch, st.rng);
        auto parts = stage2_3d_batch_loss(st.model, emb, st.has_disc ? &st.disc : nullptr, cfg.weights,
                                          x, &st.rng, st.step);
        detail::guard_finite(parts.total.item(), st.step);
        AdamW::zero_grad(gen_params);
        backward(parts.total);
        if (cfg.grad_clip > 0) AdamW::clip_grad_norm(gen_params, cfg.grad_clip);
        st.opt_gen.step(gen_params);

        if (st.has_disc && st.step >= cfg.weights.adv_start_step) {
            LatentDist dist = encode(st.model, x);
            Tensor fake = decode(st.model, reparameterize_deterministic(dist)).detach();
            const int64_t S = fake.shape().back();
            Tensor dl = Tensor::scalar(0.0);
            for (int64_t s = 0; s < S; ++s)
                dl = add(dl, disc_loss(st.disc, slice_last(x, s), slice_last(fake, s)));
            dl = mul_scalar(dl, 1.0 / static_cast<double>(S));
            detail::guard_finite(dl.item(), st.step);
            AdamW::zero_grad(disc_params);
            backward(dl);
            if (cfg.grad_clip > 0) AdamW::clip_grad_norm(disc_params, cfg.grad_clip);
            st.opt_disc.step(disc_params);
        }
        st.log.push_back({st.step, parts.total.item(), parts.rec, parts.perc, parts.kl, 0, parts.adv});
        if (hook && cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0) hook(st);
    }
    if (hook) hook(st);
}

inline void train_decoder_finetune(TrainState& st, const TrainConfig& cfg, const LatentTargetSet& data,
                                   const FeatureEmbedder& emb, const CheckpointHook& hook = nullptr) {
    cfg.validate();
    if (st.model.config.ndim != 3)
        throw TrainingError("decoder fine-tuning expects a 3D model (inflate the 2D base first)");
    if (data.latents.empty() || data.latents.size() != data.targets.size())
        throw TrainingError("decoder fine-tuning: empty or mismatched latent/target pairs");
    auto dec_params = st.model.trainable_parameters();
    const int64_t end = cfg.steps;
    for (; st.step < end; ++st.step) {
        const size_t idx = static_cast<size_t>(st.rng.uniform_below(data.latents.size()));
        const Tensor& z = data.latents[idx];
        const Tensor& target = data.targets[idx];
        Tensor vhat = decode(st.model, z);
        if (vhat.shape() != target.shape())
            throw ShapeError("decoder fine-tuning: decoded shape " + shape_str(vhat.shape()) +
                             " does not match target " + shape_str(target.shape()));
        Tensor rec = per_slice_loss([](const Tensor& a, const Tensor& b) { return l1(a, b); }, target,
                                    vhat);
        Tensor perc = per_slice_loss(
            [&](const Tensor& a, const Tensor& b) { return perceptual_loss(emb, a, b); }, target, vhat);
        Tensor loss = add(mul_scalar(rec, cfg.weights.w_rec), mul_scalar(perc, cfg.weights.w_perc));
        detail::guard_finite(loss.item(), st.step);
        AdamW::zero_grad(dec_params);
        backward(loss);
        if (cfg.grad_clip > 0) AdamW::clip_grad_norm(dec_params, cfg.grad_clip);
        st.opt_gen.step(dec_params);
        st.log.push_back({st.step, loss.item(), rec.item(), perc.item(), 0, 0, 0});
        if (hook && cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0) hook(st);
    }
    if (hook) hook(st);
}

// ---------------------------------------------------------------------------
// State initializers (freeze patterns live here so resume can re-apply them)
// ---------------------------------------------------------------------------

inline bool model_has_lora(VAEModel& m) {
    bool found = false;
    m.for_each_param([&](const std::string& name, Tensor&) {
        if (name.ends_with(".lora_a")) found = true;
    });
    return found;
}

inline void apply_stage_freezing(TrainState& st) {
    switch (st.stage) {
        case TrainStage::S1_2D:
        case TrainStage::S2_3D:
            // all model parameters trainable unless LoRA adapters own the run
            if (!model_has_lora(st.model)) st.model.set_trainable(true);
            break;
        case TrainStage::S2_2D:
            st.model.set_trainable(false);
            if (st.model.head) {
                st.model.head->c1.weight.set_requires_grad(true);
                st.model.head->c1.bias.set_requires_grad(true);
                st.model.head->c2.weight.set_requires_grad(true);
                st.model.head->c2.bias.set_requires_grad(true);
            }
            break;
        case TrainStage::DecoderFinetune:
            st.model.for_each_param([](const std::string& name, Tensor& t) {
                t.set_requires_grad(name.rfind("dec.", 0) == 0);
            });
            break;
    }
}

inline TrainState init_stage1(const TrainConfig& cfg, VAEModel model) {
    TrainState st;
    st.stage = TrainStage::S1_2D;
    st.rng.reseed(cfg.seed);
    st.model = std::move(model);
    st.disc = make_discriminator(cfg.seed ^ 0xd15cULL);
    st.has_disc = true;
    AdamWOptions gen_opts{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    AdamWOptions disc_opts{cfg.disc_lr > 0 ? cfg.disc_lr : cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    st.opt_gen = AdamW(gen_opts);
    st.opt_disc = AdamW(disc_opts);
    apply_stage_freezing(st);
    return st;
}

inline TrainState init_stage2_2d(const TrainConfig& cfg, VAEModel stage1_model) {
    if (stage1_model.config.ndim != 2) throw TrainingError("stage 2 (2D) needs a 2D stage-1 checkpoint");
    TrainState st;
    st.stage = TrainStage::S2_2D;
    st.rng.reseed(cfg.seed);
    st.model = std::move(stage1_model);
    if (st.model.enc_in.lora) merge_lora(st.model);
    if (!st.model.head)
        st.model.head = make_projection_head(st.model.config.latent_channels, cfg.head_hidden,
                                             cfg.seed ^ 0x4eadULL);
    st.has_disc = false;
    st.opt_gen = AdamW(AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    apply_stage_freezing(st);
    return st;
}

inline TrainState init_stage2_3d(const TrainConfig& cfg, const VAEModel& stage1_2d) {
    if (stage1_2d.config.ndim != 2) throw TrainingError("stage 2 (3D) seeds from a 2D stage-1 checkpoint");
    VAEModel m3 = inflate_2d_to_3d(stage1_2d);
    if (cfg.target_f != 0 && cfg.target_f != m3.config.f)
        throw TrainingError("stage 2 (3D): 2D base with f=" + std::to_string(stage1_2d.config.f) +
                            " inflates to 3D f=" + std::to_string(m3.config.f) + ", not requested f=" +
                            std::to_string(cfg.target_f));
    TrainState st;
    st.stage = TrainStage::S2_3D;
    st.rng.reseed(cfg.seed);
    st.model = std::move(m3);
    st.disc = make_discriminator(cfg.seed ^ 0xd15cULL);
    st.has_disc = true;
    AdamWOptions gen_opts{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    AdamWOptions disc_opts{cfg.disc_lr > 0 ? cfg.disc_lr : cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    st.opt_gen = AdamW(gen_opts);
    st.opt_disc = AdamW(disc_opts);
    apply_stage_freezing(st);
    return st;
}

inline TrainState init_decoder_finetune(const TrainConfig& cfg, VAEModel model3d) {
    TrainState st;
    st.stage = TrainStage::DecoderFinetune;
    if (model3d.config.ndim != 3)
        throw TrainingError("decoder fine-tuning expects a 3D model (2D checkpoint given; inflate first)");
    st.rng.reseed(cfg.seed);
    st.model = std::move(model3d);
    st.has_disc = false;
    st.opt_gen = AdamW(AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    apply_stage_freezing(st);
    return st;
}

// ---------------------------------------------------------------------------
// Trainer-state checkpoints ('MVS1'): bit-exact resume including rng state
// ---------------------------------------------------------------------------

namespace detail {

inline void put_adamw(std::ostream& out, const AdamW& opt) {
    const auto st = opt.save();
    put_u64le(out, static_cast<uint64_t>(st.t));
    put_u32le(out, static_cast<uint32_t>(st.m.size()));
    for (size_t p = 0; p < st.m.size(); ++p) {
        put_u64le(out, st.m[p].size());
        for (double v : st.m[p]) put_f64le(out, v);
        for (double v : st.v[p]) put_f64le(out, v);
    }
}

inline AdamW get_adamw(std::istream& in, const AdamWOptions& opts) {
    AdamW::State st;
    st.t = static_cast<int64_t>(get_u64le(in));
    const uint32_t count = get_u32le(in);
    st.m.resize(count);
    st.v.resize(count);
    for (uint32_t p = 0; p < count; ++p) {
        const uint64_t n = get_u64le(in);
        st.m[p].resize(n);
        st.v[p].resize(n);
        for (auto& v : st.m[p]) v = get_f64le(in);
        for (auto& v : st.v[p]) v = get_f64le(in);
    }
    AdamW opt(opts);
    opt.restore(st);
    return opt;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, TrainState& st, const TrainConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("trainer checkpoint: cannot write " + path);
    out.write("MVS1", 4);
    out.put(static_cast<char>(st.stage));
    detail::put_u64le(out, static_cast<uint64_t>(st.step));
    const auto rs = st.rng.save();
    for (int i = 0; i < 4; ++i) detail::put_u64le(out, rs.s[i]);
    out.put(static_cast<char>(rs.has_spare));
    detail::put_f64le(out, rs.spare);
    // hyperparameters needed to rebuild the optimizers
    detail::put_f64le(out, cfg.lr);
    detail::put_f64le(out, cfg.disc_lr);
    detail::put_f64le(out, cfg.weight_decay);
    save_model(out, st.model);
    out.put(st.has_disc ? 1 : 0);
    if (st.has_disc) {
        st.disc.for_each_param([&](const std::string&, Tensor& t) {
            detail::put_u64le(out, static_cast<uint64_t>(t.numel()));
            for (double v : t.data()) detail::put_f64le(out, v);
        });
    }
    detail::put_adamw(out, st.opt_gen);
    detail::put_adamw(out, st.opt_disc);
    detail::put_u64le(out, st.log.size());
    for (const auto& r : st.log) {
        detail::put_u64le(out, static_cast<uint64_t>(r.step));
        detail::put_f64le(out, r.total);
        detail::put_f64le(out, r.rec);
        detail::put_f64le(out, r.perc);
        detail::put_f64le(out, r.kl);
        detail::put_f64le(out, r.emb);
        detail::put_f64le(out, r.adv);
    }
}

inline TrainState load_checkpoint(const std::string& path, TrainConfig& cfg_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("trainer checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "MVS1", 4) != 0)
        throw FormatError("trainer checkpoint: magic mismatch in " + path);
    TrainState st;
    st.stage = static_cast<TrainStage>(in.get());
    st.step = static_cast<int64_t>(detail::get_u64le(in));
    Rng::State rs{};
    for (int i = 0; i < 4; ++i) rs.s[i] = detail::get_u64le(in);
    rs.has_spare = static_cast<uint8_t>(in.get());
    rs.spare = detail::get_f64le(in);
    st.rng.restore(rs);
    cfg_out.lr = detail::get_f64le(in);
    cfg_out.disc_lr = detail::get_f64le(in);
    cfg_out.weight_decay = detail::get_f64le(in);
    st.model = load_model(in, path);
    st.has_disc = in.get() != 0;
    if (st.has_disc) {
        st.disc = make_discriminator(0);
        st.disc.for_each_param([&](const std::string& name, Tensor& t) {
            const uint64_t n = detail::get_u64le(in);
            if (n != static_cast<uint64_t>(t.numel()))
                throw FormatError("trainer checkpoint: discriminator size mismatch at " + name);
            auto d = t.mutable_data();
            for (auto& v : d) v = detail::get_f64le(in);
        });
    }
    AdamWOptions gen_opts{cfg_out.lr, 0.9, 0.999, 1e-8, cfg_out.weight_decay};
    AdamWOptions disc_opts{cfg_out.disc_lr > 0 ? cfg_out.disc_lr : cfg_out.lr, 0.9, 0.999, 1e-8,
                           cfg_out.weight_decay};
    st.opt_gen = detail::get_adamw(in, gen_opts);
    st.opt_disc = detail::get_adamw(in, disc_opts);
    const uint64_t rows = detail::get_u64le(in);
    if (!in) throw FormatError("trainer checkpoint: truncated in " + path);
    for (uint64_t i = 0; i < rows; ++i) {
        LossLogRow r;
        r.step = static_cast<int64_t>(detail::get_u64le(in));
        r.total = detail::get_f64le(in);
        r.rec = detail::get_f64le(in);
        r.perc = detail::get_f64le(in);
        r.kl = detail::get_f64le(in);
        r.emb = detail::get_f64le(in);
        r.adv = detail::get_f64le(in);
        st.log.push_back(r);
    }
    if (!in) throw FormatError("trainer checkpoint: truncated loss log in " + path);
    apply_stage_freezing(st);
    return st;
}

// Dispatches a loaded state to its stage trainer.
inline void resume_training(TrainState& st, const TrainConfig& cfg, const ImageSet* images,
                            const VolumeSet* volumes, const LatentTargetSet* pairs,
                            const FeatureEmbedder& emb, const CheckpointHook& hook = nullptr) {
    switch (st.stage) {
        case TrainStage::S1_2D:
            if (!images) throw TrainingError("resume: stage 1 needs 2D images");
            train_stage1(st, cfg, *images, emb, hook);
            break;
        case TrainStage::S2_2D:
            if (!images) throw TrainingError("resume: stage 2 (2D) needs 2D images");
            train_stage2_2d(st, cfg, *images, emb, hook);
            break;
        case TrainStage::S2_3D:
            if (!volumes) throw TrainingError("resume: stage 2 (3D) needs volumes");
            train_stage2_3d(st, cfg, *volumes, emb, hook);
            break;
        case TrainStage::DecoderFinetune:
            if (!pairs) throw TrainingError("resume: decoder fine-tuning needs latent/target pairs");
            train_decoder_finetune(st, cfg, *pairs, emb, hook);
            break;
    }
}

}  // namespace medvae
