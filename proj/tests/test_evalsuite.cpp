#include <gtest/gtest.h>

#include <cmath>

#include "medvae/evalsuite.hpp"

using namespace medvae;

namespace {

Image2D rand_img(Rng& rng, int64_t h, int64_t w) {
    Image2D img;
    img.height = h;
    img.width = w;
    img.values.resize(static_cast<size_t>(h * w));
    for (auto& v : img.values) v = rng.uniform();
    return img;
}

// ---------------------------------------------------------------------------
// Independent MS-SSIM reference: direct 2D windowed sums, no separability, no
// shared code with the implementation under test.
// ---------------------------------------------------------------------------

struct RefImage {
    int64_t h, w;
    std::vector<double> v;
    double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * w + c)]; }
};

RefImage ref_downsample2(const RefImage& img) {
    RefImage out{img.h / 2, img.w / 2, {}};
    out.v.resize(static_cast<size_t>(out.h * out.w));
    for (int64_t r = 0; r < out.h; ++r)
        for (int64_t c = 0; c < out.w; ++c)
            out.v[static_cast<size_t>(r * out.w + c)] =
                0.25 * (img.at(2 * r, 2 * c) + img.at(2 * r, 2 * c + 1) + img.at(2 * r + 1, 2 * c) +
                        img.at(2 * r + 1, 2 * c + 1));
    return out;
}

void ref_ssim_cs(const RefImage& x, const RefImage& y, double& mean_ssim, double& mean_cs) {
    const int W = 11;
    const double sigma = 1.5;
    double win[11][11];
    double wsum = 0.0;
    for (int i = 0; i < W; ++i)
        for (int j = 0; j < W; ++j) {
            const double di = i - 5.0, dj = j - 5.0;
            win[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
            wsum += win[i][j];
        }
    for (int i = 0; i < W; ++i)
        for (int j = 0; j < W; ++j) win[i][j] /= wsum;
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const int64_t oh = x.h - W + 1, ow = x.w - W + 1;
    double ssim_sum = 0.0, cs_sum = 0.0;
    for (int64_t r = 0; r < oh; ++r)
        for (int64_t c = 0; c < ow; ++c) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int i = 0; i < W; ++i)
                for (int j = 0; j < W; ++j) {
                    const double a = x.at(r + i, c + j), b = y.at(r + i, c + j);
                    mx += win[i][j] * a;
                    my += win[i][j] * b;
                    mxx += win[i][j] * a * a;
                    myy += win[i][j] * b * b;
                    mxy += win[i][j] * a * b;
                }
            const double vx = mxx - mx * mx, vy = myy - my * my, cxy = mxy - mx * my;
            const double cs = (2 * cxy + c2) / (vx + vy + c2);
            const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
            ssim_sum += l * cs;
            cs_sum += cs;
        }
    mean_ssim = ssim_sum / static_cast<double>(oh * ow);
    mean_cs = cs_sum / static_cast<double>(oh * ow);
}

double ref_msssim(RefImage x, RefImage y) {
    const double wfull[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    int scales = 0;
    for (int m = 1; m <= 5; ++m)
        if ((std::min(x.h, x.w) >> (m - 1)) >= 11) scales = m;
    double wsum = 0.0;
    for (int m = 0; m < scales; ++m) wsum += wfull[m];
    double value = 1.0;
    for (int m = 1; m <= scales; ++m) {
        double ssim, cs;
        ref_ssim_cs(x, y, ssim, cs);
        if (m < scales) {
            value *= std::pow(std::max(cs, 0.0), wfull[m - 1] / wsum);
            x = ref_downsample2(x);
            y = ref_downsample2(y);
        } else {
            value *= std::pow(std::max(ssim, 0.0), wfull[m - 1] / wsum);
        }
    }
    return value;
}

}  // namespace

TEST(Psnr, IdenticalGivesInfinitySentinel) {
    Rng rng(1);
    Image2D a = rand_img(rng, 8, 8);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
}

TEST(Psnr, TwentyDecibelExample) {
    // MSE = 0.01 with peak 1 -> exactly 20 dB
    std::vector<double> x(100, 0.5), y(100, 0.6);
    EXPECT_NEAR(psnr(std::span<const double>(x), std::span<const double>(y)), 20.0, 1e-12);
}

TEST(Psnr, MatchesTwoLineRecomputation) {
    Rng rng(2);
    for (int t = 0; t < 10; ++t) {
        Image2D a = rand_img(rng, 6, 7);
        Image2D b = rand_img(rng, 6, 7);
        double mse = 0.0;
        for (size_t i = 0; i < a.values.size(); ++i)
            mse += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
        mse /= static_cast<double>(a.values.size());
        EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(1.0 / mse), 1e-10);
    }
}

TEST(Psnr, StrictlyDecreasesWithNoiseAmplitude) {
    Rng rng(3);
    Image2D x = rand_img(rng, 16, 16);
    std::vector<double> noise(x.values.size());
    for (auto& v : noise) v = rng.normal();
    double prev = std::numeric_limits<double>::infinity();
    for (double amp : {0.01, 0.02, 0.05, 0.1}) {
        Image2D y = x;
        for (size_t i = 0; i < y.values.size(); ++i) y.values[i] += amp * noise[i];
        const double p = psnr(x, y);
        EXPECT_LT(p, prev);
        prev = p;
    }
}

TEST(RegionPsnr, FullImageBoxEqualsWholeImage) {
    Rng rng(4);
    Image2D x = rand_img(rng, 12, 12);
    Image2D y = rand_img(rng, 12, 12);
    auto per_box = region_psnr(x, y, {BoundingBox{{{0, 12}, {0, 12}}}});
    ASSERT_EQ(per_box.size(), 1u);
    EXPECT_NEAR(per_box[0], psnr(x, y), 1e-12);
}

TEST(RegionPsnr, CorruptionInsideBoxScoresLowerThanFullImage) {
    Rng rng(5);
    Image2D x = rand_img(rng, 16, 16);
    Image2D y = x;
    BoundingBox box{{{4, 4}, {4, 4}}};
    for (int64_t r = 4; r < 8; ++r)
        for (int64_t c = 4; c < 8; ++c) y.at(r, c) += 0.3;
    const double whole = psnr(x, y);
    const double region = region_psnr(x, y, {box})[0];
    EXPECT_LT(region, whole);
    // identical region gives the sentinel
    BoundingBox clean{{{0, 2}, {0, 2}}};
    EXPECT_TRUE(std::isinf(region_psnr(x, y, {clean})[0]));
}

TEST(MsSsim, IdentityIsOneAndSymmetric) {
    Rng rng(6);
    Image2D a = rand_img(rng, 32, 32);
    Image2D b = rand_img(rng, 32, 32);
    EXPECT_NEAR(ms_ssim(a, a).value, 1.0, 1e-12);
    EXPECT_NEAR(ms_ssim(a, b).value, ms_ssim(b, a).value, 1e-12);
    const double v = ms_ssim(a, b).value;
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
}

TEST(MsSsim, MatchesIndependentReference) {
    Rng rng(7);
    for (int t = 0; t < 10; ++t) {
        const int64_t h = 24 + static_cast<int64_t>(rng.uniform_below(41));  // 24..64
        const int64_t w = 24 + static_cast<int64_t>(rng.uniform_below(41));
        Image2D a = rand_img(rng, h, w);
        Image2D b = a;
        for (auto& v : b.values) v = std::min(1.0, std::max(0.0, v + 0.1 * rng.normal()));
        auto got = ms_ssim(a, b);
        RefImage ra{h, w, a.values}, rb{h, w, b.values};
        const double want = ref_msssim(ra, rb);
        EXPECT_NEAR(got.value, want, 1e-6) << "h=" << h << " w=" << w;
    }
}

TEST(MsSsim, ScalesReducedForSmallImages) {
    Rng rng(8);
    Image2D a = rand_img(rng, 24, 24);
    Image2D b = rand_img(rng, 24, 24);
    auto r = ms_ssim(a, b);
    EXPECT_EQ(r.scales_used, 2);  // 24 >= 11, 12 >= 11, 6 < 11
    Image2D tiny = rand_img(rng, 10, 10);
    EXPECT_THROW(ms_ssim(tiny, tiny), ShapeError);
}

TEST(MsSsim, VolumesSupported) {
    Rng rng(9);
    Volume3D a, b;
    a.height = a.width = a.slices = 16;
    a.values.resize(16 * 16 * 16);
    for (auto& v : a.values) v = rng.uniform();
    b = a;
    for (auto& v : b.values) v = std::min(1.0, std::max(0.0, v + 0.05 * rng.normal()));
    auto r = ms_ssim(a, b);
    EXPECT_EQ(r.scales_used, 1);
    EXPECT_GT(r.value, 0.0);
    EXPECT_LE(r.value, 1.0);
    EXPECT_NEAR(ms_ssim(a, a).value, 1.0, 1e-12);
}

TEST(Auroc, PerfectOrderingGivesOne) {
    EXPECT_DOUBLE_EQ(auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
}

TEST(Auroc, SpecExampleGivesThreeQuarters) {
    EXPECT_DOUBLE_EQ(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}), 0.75);
}

TEST(Auroc, AllEqualScoresGiveHalf) {
    EXPECT_DOUBLE_EQ(auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}), 0.5);
}

TEST(Auroc, MatchesBruteForcePairOracle) {
    Rng rng(10);
    for (int t = 0; t < 10; ++t) {
        const int n = 30;
        std::vector<double> scores;
        std::vector<int> labels;
        for (int i = 0; i < n; ++i) {
            scores.push_back(std::round(rng.uniform() * 20.0) / 20.0);  // force ties
            labels.push_back(rng.uniform() < 0.4 ? 1 : 0);
        }
        int n_pos = 0;
        for (int l : labels) n_pos += l;
        if (n_pos == 0 || n_pos == n) continue;
        double wins = 0.0;
        int64_t pairs = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (labels[i] != 1 || labels[j] != 0) continue;
                ++pairs;
                if (scores[i] > scores[j])
                    wins += 1.0;
                else if (scores[i] == scores[j])
                    wins += 0.5;
            }
        EXPECT_DOUBLE_EQ(auroc(scores, labels), wins / static_cast<double>(pairs));
    }
}

TEST(Auroc, MonotoneTransformInvariant) {
    Rng rng(11);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        scores.push_back(rng.normal());
        labels.push_back(rng.uniform() < 0.5 ? 1 : 0);
    }
    labels[0] = 1;
    labels[1] = 0;
    const double base = auroc(scores, labels);
    std::vector<double> transformed;
    for (double s : scores) transformed.push_back(std::exp(2.0 * s) + 7.0);
    EXPECT_DOUBLE_EQ(auroc(transformed, labels), base);
}

TEST(Auroc, SingleClassRejected) {
    EXPECT_THROW(auroc({0.1, 0.2}, {1, 1}), ShapeError);
}

TEST(MacroAuroc, PerfectOneHotGivesOne) {
    std::vector<std::vector<double>> scores{{0.9, 0.05, 0.05}, {0.1, 0.8, 0.1}, {0.05, 0.05, 0.9},
                                            {0.8, 0.1, 0.1},  {0.2, 0.7, 0.1}, {0.1, 0.2, 0.7}};
    std::vector<int> labels{0, 1, 2, 0, 1, 2};
    EXPECT_DOUBLE_EQ(macro_auroc(scores, labels, 3).value, 1.0);
}

TEST(MacroAuroc, UniformScoresGiveHalf) {
    std::vector<std::vector<double>> scores(6, std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
    std::vector<int> labels{0, 1, 2, 0, 1, 2};
    EXPECT_DOUBLE_EQ(macro_auroc(scores, labels, 3).value, 0.5);
}

TEST(MacroAuroc, MatchesPerClassPairOracle) {
    Rng rng(12);
    const int n = 24, k = 3;
    std::vector<std::vector<double>> scores;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
        std::vector<double> row;
        for (int c = 0; c < k; ++c) row.push_back(rng.uniform());
        scores.push_back(row);
        labels.push_back(static_cast<int>(rng.uniform_below(k)));
    }
    for (int c = 0; c < k; ++c) labels[static_cast<size_t>(c)] = c;  // every class present
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
        std::vector<double> s;
        std::vector<int> y;
        for (int i = 0; i < n; ++i) {
            s.push_back(scores[static_cast<size_t>(i)][static_cast<size_t>(c)]);
            y.push_back(labels[static_cast<size_t>(i)] == c ? 1 : 0);
        }
        sum += auroc(s, y);
    }
    EXPECT_NEAR(macro_auroc(scores, labels, k).value, sum / k, 1e-12);
}

TEST(MacroAuroc, AbsentClassSkippedWithWarning) {
    std::vector<std::vector<double>> scores{{0.9, 0.05, 0.05}, {0.1, 0.8, 0.1}, {0.2, 0.7, 0.1},
                                            {0.8, 0.1, 0.1}};
    std::vector<int> labels{0, 1, 1, 0};  // class 2 absent
    auto r = macro_auroc(scores, labels, 3);
    ASSERT_EQ(r.skipped_classes.size(), 1u);
    EXPECT_EQ(r.skipped_classes[0], 2);
    EXPECT_DOUBLE_EQ(r.value, 1.0);
}

TEST(ChannelMean, IdentityAndConstantExamples) {
    Tensor one_channel({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor m = channel_mean(one_channel);
    for (int64_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(m.data()[i], one_channel.data()[i]);
    // channels (1,3) -> 2 everywhere
    Tensor two({1, 2, 2, 2}, {1, 1, 1, 1, 3, 3, 3, 3});
    Tensor m2 = channel_mean(two);
    ASSERT_EQ(m2.shape(), (Shape{1, 1, 2, 2}));
    for (double v : m2.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(ChannelMean, MatchesLoopOracle) {
    Rng rng(13);
    Tensor z = Tensor::randn({1, 4, 3, 5}, rng);
    Tensor m = channel_mean(z);
    for (int64_t p = 0; p < 15; ++p) {
        double want = 0.0;
        for (int64_t c = 0; c < 4; ++c) want += z.data()[c * 15 + p];
        EXPECT_NEAR(m.data()[p], want / 4.0, 1e-12);
    }
}

namespace {

LabeledLatentDataset separable_latents(int n, double shift, uint64_t seed, const char* split) {
    Rng rng(seed);
    std::vector<Tensor> latents;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
        const int label = i % 2;
        Tensor z = Tensor::randn({1, 1, 8, 8}, rng, 0.5);
        auto d = z.mutable_data();
        for (auto& v : d) v += label ? shift : -shift;
        latents.push_back(z);
        labels.push_back(label);
    }
    return LabeledLatentDataset::from_latents(latents, labels, split);
}

}  // namespace

TEST(Probe, LinearlySeparableLatentsReachPerfectAuroc) {
    auto train = separable_latents(80, 1.0, 21, "train");
    auto test = separable_latents(40, 1.0, 22, "test");
    ProbeConfig cfg;
    cfg.epochs = 30;
    cfg.seed = 1;
    Probe p = make_probe(cfg, 2);
    train_probe(p, cfg, train);
    EXPECT_DOUBLE_EQ(eval_probe(p, test).auroc_value, 1.0);
}

namespace {

// Null experiment: latents carry zero label information (labels are coin
// flips independent of the noise inputs), so a trained probe must sit at
// chance on held-out data.
LabeledLatentDataset shuffled_label_latents(int n, uint64_t seed, const char* split) {
    Rng rng(seed);
    std::vector<Tensor> latents;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
        latents.push_back(Tensor::randn({1, 1, 8, 8}, rng, 0.5));
        labels.push_back(static_cast<int>(rng.uniform_below(2)));
    }
    return LabeledLatentDataset::from_latents(latents, labels, split);
}

}  // namespace

TEST(Probe, LabelShuffledTrainingIsChance) {
    auto train = shuffled_label_latents(200, 24, "train");
    auto test = shuffled_label_latents(400, 25, "test");
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        ProbeConfig cfg;
        cfg.epochs = 10;
        cfg.seed = seed;
        Probe p = make_probe(cfg, 2);
        train_probe(p, cfg, train);
        const double a = eval_probe(p, test).auroc_value;
        EXPECT_GE(a, 0.4) << "seed " << seed;
        EXPECT_LE(a, 0.6) << "seed " << seed;
    }
}

TEST(Probe, WeightedSamplingEqualizesImbalancedClasses) {
    // 9:1 imbalance; drawn class ratio within 3 sigma of 1:1
    Rng rng(26);
    std::vector<Tensor> latents;
    std::vector<int> labels;
    for (int i = 0; i < 100; ++i) {
        latents.push_back(Tensor::randn({1, 1, 8, 8}, rng, 0.5));
        labels.push_back(i < 90 ? 0 : 1);
    }
    auto train = LabeledLatentDataset::from_latents(latents, labels, "train");
    ProbeConfig cfg;
    cfg.epochs = 20;
    cfg.batch = 16;
    cfg.weighted_sampling = true;
    cfg.seed = 3;
    Probe p = make_probe(cfg, 2);
    auto stats = train_probe(p, cfg, train);
    const int64_t total = stats.class_draws[0] + stats.class_draws[1];
    const double expected = static_cast<double>(total) / 2.0;
    const double sigma = std::sqrt(static_cast<double>(total) * 0.25);
    EXPECT_NEAR(static_cast<double>(stats.class_draws[1]), expected, 3.0 * sigma);
}

TEST(Probe, SingleClassTrainingRejected) {
    Rng rng(27);
    std::vector<Tensor> latents;
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) {
        latents.push_back(Tensor::randn({1, 1, 8, 8}, rng));
        labels.push_back(1);
    }
    auto train = LabeledLatentDataset::from_latents(latents, labels, "train");
    ProbeConfig cfg;
    Probe p = make_probe(cfg, 2);
    EXPECT_THROW(train_probe(p, cfg, train), ShapeError);
}

TEST(Probe, ThreeSeedProtocolReportsMeanAndStd) {
    auto train = separable_latents(60, 0.4, 28, "train");
    auto test = separable_latents(30, 0.4, 29, "test");
    ProbeConfig cfg;
    cfg.epochs = 10;
    auto rep = probe_protocol(cfg, train, test, 2, {1, 2, 3});
    ASSERT_EQ(rep.per_seed.size(), 3u);
    double sum = 0.0;
    for (double v : rep.per_seed) sum += v;
    EXPECT_NEAR(rep.mean, sum / 3.0, 1e-12);
    EXPECT_GE(rep.stddev, 0.0);
}

TEST(MetricReport, AggregatesMatchRowRecomputation) {
    MetricReport rep;
    rep.rows = {{0, 30.0, 0.9, 3}, {1, 34.0, 0.95, 3}, {2, 28.0, 0.85, 3}};
    EXPECT_NEAR(rep.psnr_mean(), (30.0 + 34.0 + 28.0) / 3.0, 1e-12);
    double m = rep.psnr_mean(), v = 0.0;
    for (const auto& r : rep.rows) v += (r.psnr_db - m) * (r.psnr_db - m);
    EXPECT_NEAR(rep.psnr_std(), std::sqrt(v / 3.0), 1e-12);
}
