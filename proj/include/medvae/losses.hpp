#pragma once

#include <functional>
#include <vector>

#include "medvae/tensor.hpp"
#include "medvae/vae.hpp"

namespace medvae {

// ---------------------------------------------------------------------------
// FeatureEmbedder: frozen seeded-random conv stack standing in for the
// pretrained embedding network. Exposes per-layer feature maps for the
// perceptual distance and a pooled unit-normalized embedding b(.).
// ---------------------------------------------------------------------------

struct FeatureEmbedder {
    std::vector<ConvLayer> convs;  // stride-2 stack, silu activations
    int64_t input_extent = 32;

    int64_t embedding_dim() const { return convs.back().weight.shape()[0]; }

    // Inputs of any channel count / extent are funneled to the declared input
    // contract: channel-mean to one channel, then bilinear resize.
    Tensor adapt_input(const Tensor& x) const {
        if (x.shape().size() != 4)
            throw ShapeError("embedder: expected [N,C,H,W], got " + shape_str(x.shape()));
        Tensor h = x;
        if (h.shape()[1] != 1) h = channel_mean(h);
        if (h.shape()[2] != input_extent || h.shape()[3] != input_extent)
            h = resize_bilinear2d(h, input_extent, input_extent);
        return h;
    }

    std::vector<Tensor> features(const Tensor& x) const {
        Tensor h = adapt_input(x);
        std::vector<Tensor> feats;
        for (const auto& c : convs) {
            h = silu(c.forward(h, 2));
            feats.push_back(h);
        }
        return feats;
    }

    // Pooled, unit-normalized embedding vector b(x) of fixed length E. The
    // tiny eps keeps ||b|| = 1 to well below 1e-10 while still guarding the
    // all-zero-feature corner.
    Tensor embed(const Tensor& x) const {
        Tensor h = adapt_input(x);
        for (const auto& c : convs) h = silu(c.forward(h, 2));
        Tensor pooled = spatial_mean(h);  // [N, E]
        return channel_unit_normalize(pooled, 1e-30);
    }
};

inline FeatureEmbedder make_embedder(uint64_t seed, int64_t input_extent = 32, int64_t width = 12) {
    Rng rng(seed ^ 0xe3bedde7ULL);
    FeatureEmbedder e;
    e.input_extent = input_extent;
    e.convs.push_back(detail::make_conv(1, width, 3, 2, 1, 2, rng));
    e.convs.push_back(detail::make_conv(width, 2 * width, 3, 2, 1, 2, rng));
    e.convs.push_back(detail::make_conv(2 * width, 4 * width, 3, 2, 1, 2, rng));
    for (auto& c : e.convs) {
        c.weight.set_requires_grad(false);
        c.bias.set_requires_grad(false);
    }
    return e;
}

// ---------------------------------------------------------------------------
// Patch discriminator: stride-2 conv stack ending in a 1-channel score map.
// ---------------------------------------------------------------------------

struct Discriminator {
    ConvLayer c1, c2, c3;

    Tensor forward(const Tensor& x) const {
        Tensor h = leaky_relu(c1.forward(x, 2), 0.2);
        h = leaky_relu(c2.forward(h, 2), 0.2);
        return c3.forward(h, 2);  // score map, one score per receptive-field patch
    }

    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
        fn("disc.c1.w", c1.weight);
        fn("disc.c1.b", c1.bias);
        fn("disc.c2.w", c2.weight);
        fn("disc.c2.b", c2.bias);
        fn("disc.c3.w", c3.weight);
        fn("disc.c3.b", c3.bias);
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for_each_param([&](const std::string&, Tensor& t) { out.push_back(t); });
        return out;
    }
};

inline Discriminator make_discriminator(uint64_t seed, int64_t width = 32) {
    Rng rng(seed ^ 0xd15c0ULL);
    Discriminator d;
    d.c1 = detail::make_conv(1, width, 3, 2, 1, 2, rng);
    d.c2 = detail::make_conv(width, 2 * width, 3, 2, 1, 2, rng);
    d.c3 = detail::make_conv(2 * width, 1, 3, 2, 1, 2, rng);
    return d;
}

inline uint64_t discriminator_hash(Discriminator& d) {
    uint64_t h = 1469598103934665603ull;
    d.for_each_param([&](const std::string&, Tensor& t) {
        for (double v : t.data()) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            h ^= bits;
            h *= 1099511628211ull;
        }
    });
    return h;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

struct LossWeights {
    double w_rec = 1.0;
    double w_perc = 1.0;
    double w_kl = 1e-6;
    double w_emb = 0.1;
    double w_adv = 0.5;
    int64_t adv_start_step = 3125;
};

// Sum over embedder layers of the mean squared distance between channel-wise
// unit-normalized feature maps.
inline Tensor perceptual_loss(const FeatureEmbedder& emb, const Tensor& x, const Tensor& xhat) {
    if (x.shape() != xhat.shape())
        throw ShapeError("perceptual_loss: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(xhat.shape()));
    auto fx = emb.features(x);
    auto fy = emb.features(xhat);
    Tensor total = Tensor::scalar(0.0);
    for (size_t l = 0; l < fx.size(); ++l) {
        Tensor dx = sub(channel_unit_normalize(fx[l]), channel_unit_normalize(fy[l]));
        total = add(total, mean_all(mul(dx, dx)));
    }
    return total;
}

// Closed-form KL(N(mu, sigma^2) || N(0,1)), mean over latent elements.
inline Tensor kl_penalty(const LatentDist& d) {
    if (d.mu.shape() != d.logvar.shape()) throw ShapeError("kl_penalty: mu/logvar shape mismatch");
    Tensor var = exp_op(d.logvar);
    Tensor mu2 = mul(d.mu, d.mu);
    Tensor term = add(sub(add_scalar(d.logvar, 1.0), mu2), neg(var));
    return mul_scalar(mean_all(term), -0.5);
}

// Hinge adversarial pair. Callers hand the discriminator a detached fake for
// its own update.
inline Tensor disc_loss(const Discriminator& d, const Tensor& x_real, const Tensor& x_fake) {
    Tensor sr = d.forward(x_real);
    Tensor sf = d.forward(x_fake);
    Tensor lr = mean_all(relu(add_scalar(neg(sr), 1.0)));
    Tensor lf = mean_all(relu(add_scalar(sf, 1.0)));
    return add(lr, lf);
}

inline Tensor gen_loss(const Discriminator& d, const Tensor& x_fake) {
    return neg(mean_all(d.forward(x_fake)));
}

// Squared L2 distance between unit-norm embeddings; range [0,4].
inline Tensor embedding_consistency(const FeatureEmbedder& emb, const Tensor& a, const Tensor& b_img) {
    Tensor ba = emb.embed(a);
    Tensor bb = emb.embed(b_img);
    Tensor d = sub(ba, bb);
    const double inv_n = 1.0 / static_cast<double>(ba.shape()[0]);
    return mul_scalar(sum_all(mul(d, d)), inv_n);
}

// Stage-1 composite objective with the adversarial term gated on step.
struct Stage1Breakdown {
    Tensor total;
    double rec = 0, perc = 0, kl = 0, emb = 0, adv = 0;
};

inline Stage1Breakdown stage1_total(const LossWeights& w, const FeatureEmbedder& emb,
                                    const Discriminator* disc, const Tensor& x, const Tensor& xhat,
                                    const LatentDist& dist, int64_t step) {
    if (step < 0) throw ConfigError("stage1_total: step must be >= 0");
    Stage1Breakdown out;
    Tensor rec = l1(x, xhat);
    Tensor perc = perceptual_loss(emb, x, xhat);
    Tensor kl = kl_penalty(dist);
    Tensor ec = embedding_consistency(emb, x, xhat);
    out.rec = rec.item();
    out.perc = perc.item();
    out.kl = kl.item();
    out.emb = ec.item();
    Tensor total = add(add(mul_scalar(rec, w.w_rec), mul_scalar(perc, w.w_perc)),
                       add(mul_scalar(kl, w.w_kl), mul_scalar(ec, w.w_emb)));
    if (disc && step >= w.adv_start_step) {
        Tensor adv = gen_loss(*disc, xhat);
        out.adv = adv.item();
        total = add(total, mul_scalar(adv, w.w_adv));
    }
    out.total = total;
    return out;
}

// Applies a 2D loss to matching slices of two volumes (last axis) and averages.
inline Tensor per_slice_loss(const std::function<Tensor(const Tensor&, const Tensor&)>& loss_fn,
                             const Tensor& vol, const Tensor& vol_hat) {
    if (vol.shape() != vol_hat.shape())
        throw ShapeError("per_slice_loss: shape mismatch " + shape_str(vol.shape()) + " vs " +
                         shape_str(vol_hat.shape()));
    if (vol.shape().size() != 5) throw ShapeError("per_slice_loss: expected [N,C,H,W,S] volumes");
    const int64_t S = vol.shape().back();
    Tensor acc = Tensor::scalar(0.0);
    for (int64_t s = 0; s < S; ++s)
        acc = add(acc, loss_fn(slice_last(vol, s), slice_last(vol_hat, s)));
    return mul_scalar(acc, 1.0 / static_cast<double>(S));
}

}  // namespace medvae
