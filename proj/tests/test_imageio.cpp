#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "medvae/imageio.hpp"

using namespace medvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("medvae_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_bytes(const fs::path& p, const std::vector<uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Pgm, Parses8Bit) {
    auto dir = temp_dir("pgm8");
    auto p = dir / "a.pgm";
    std::vector<uint8_t> bytes{'P', '5', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n', 0, 255, 128, 64};
    write_bytes(p, bytes);
    Image2D img = load_image2d(p.string());
    ASSERT_EQ(img.height, 2);
    ASSERT_EQ(img.width, 2);
    EXPECT_DOUBLE_EQ(img.at(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(img.at(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(img.at(1, 0), 128.0 / 255.0);
    EXPECT_DOUBLE_EQ(img.at(1, 1), 64.0 / 255.0);
}

TEST(Pgm, Parses16Bit) {
    auto dir = temp_dir("pgm16");
    auto p = dir / "a.pgm";
    // 1x1, maxval 65535, single big-endian sample of 65535
    std::vector<uint8_t> bytes{'P', '5', '\n', '1', ' ', '1', '\n', '6', '5', '5', '3', '5', '\n', 0xff, 0xff};
    write_bytes(p, bytes);
    Image2D img = load_image2d(p.string());
    EXPECT_DOUBLE_EQ(img.at(0, 0), 1.0);
}

TEST(Pgm, TruncatedPayloadRejected) {
    auto dir = temp_dir("pgmtrunc");
    auto p = dir / "a.pgm";
    std::vector<uint8_t> bytes{'P', '5', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n', 0, 255};
    write_bytes(p, bytes);
    EXPECT_THROW(load_image2d(p.string()), FormatError);
}

TEST(Pgm, MalformedHeaderRejected) {
    auto dir = temp_dir("pgmbad");
    auto p = dir / "a.pgm";
    write_bytes(p, {'P', '6', '\n', '1', ' ', '1', '\n', '2', '5', '5', '\n', 0});
    EXPECT_THROW(load_image2d(p.string()), FormatError);
}

TEST(Pgm, SaveLoadRoundTripQuantized) {
    auto dir = temp_dir("pgmrt");
    Image2D img;
    img.height = 3;
    img.width = 4;
    img.values.resize(12);
    Rng rng(3);
    for (auto& v : img.values) v = rng.uniform();
    auto p = dir / "b.pgm";
    save_image2d(p.string(), img);
    Image2D back = load_image2d(p.string());
    for (size_t i = 0; i < img.values.size(); ++i)
        EXPECT_NEAR(back.values[i], img.values[i], 1.0 / 65535.0);
}

TEST(Mvv, RoundTripBitExact) {
    auto dir = temp_dir("mvv");
    Volume3D vol;
    vol.height = 4;
    vol.width = 5;
    vol.slices = 3;
    vol.values.resize(60);
    Rng rng(9);
    for (auto& v : vol.values) v = rng.uniform();
    auto p1 = dir / "v1.mvv";
    auto p2 = dir / "v2.mvv";
    save_volume3d(p1.string(), vol);
    Volume3D back = load_volume3d(p1.string());
    save_volume3d(p2.string(), back);
    EXPECT_EQ(read_bytes(p1), read_bytes(p2));
}

TEST(Mvv, PayloadLengthMismatchRejected) {
    auto dir = temp_dir("mvvshort");
    Volume3D vol;
    vol.height = 4;
    vol.width = 4;
    vol.slices = 4;
    vol.values.assign(64, 0.5);
    auto p = dir / "v.mvv";
    save_volume3d(p.string(), vol);
    auto bytes = read_bytes(p);
    bytes.resize(bytes.size() - 4);  // drop one float: 63 payload values
    write_bytes(p, bytes);
    EXPECT_THROW(load_volume3d(p.string()), FormatError);
}

TEST(Mvv, MagicMismatchRejected) {
    auto dir = temp_dir("mvvmagic");
    auto p = dir / "v.mvv";
    write_bytes(p, {'M', 'V', 'X', '1', 3});
    EXPECT_THROW(load_volume3d(p.string()), FormatError);
}

TEST(Mvv, AllZeroVolume) {
    auto dir = temp_dir("mvvzero");
    Volume3D vol;
    vol.height = 4;
    vol.width = 4;
    vol.slices = 4;
    vol.values.assign(64, 0.0);
    auto p = dir / "v.mvv";
    save_volume3d(p.string(), vol);
    Volume3D back = load_volume3d(p.string());
    for (double v : back.values) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(CenterCrop, IdentityWhenTargetEqualsSource) {
    Volume3D vol;
    vol.height = vol.width = vol.slices = 8;
    vol.values.resize(512);
    Rng rng(2);
    for (auto& v : vol.values) v = rng.uniform();
    Volume3D out = center_crop(vol, 8, 8, 8);
    EXPECT_EQ(out.values, vol.values);
}

TEST(CenterCrop, OffsetsFloorForOddMargin) {
    // coordinate-indexed volume: value = (r*100 + c*10 + s)
    Volume3D vol;
    vol.height = vol.width = vol.slices = 10;
    vol.values.resize(1000);
    for (int64_t r = 0; r < 10; ++r)
        for (int64_t c = 0; c < 10; ++c)
            for (int64_t s = 0; s < 10; ++s) vol.at(r, c, s) = static_cast<double>(r * 100 + c * 10 + s);
    Volume3D out = center_crop(vol, 8, 8, 8);
    // offsets (1,1,1)
    EXPECT_DOUBLE_EQ(out.at(0, 0, 0), 111.0);
    for (int64_t r = 0; r < 8; ++r)
        for (int64_t c = 0; c < 8; ++c)
            for (int64_t s = 0; s < 8; ++s)
                EXPECT_DOUBLE_EQ(out.at(r, c, s), vol.at(r + 1, c + 1, s + 1));
}

TEST(CenterCrop, TargetExceedsSourceRejected) {
    Volume3D vol;
    vol.height = vol.width = vol.slices = 8;
    vol.values.resize(512, 0.0);
    EXPECT_THROW(center_crop(vol, 9, 8, 8), ShapeError);
}

TEST(RandomCubicPatch, WholeVolumeWhenEdgeEqualsExtent) {
    Volume3D vol;
    vol.height = vol.width = vol.slices = 8;
    vol.values.resize(512);
    Rng rng(5);
    for (auto& v : vol.values) v = rng.uniform();
    Volume3D out = random_cubic_patch(vol, 8, uint64_t{1234});
    EXPECT_EQ(out.values, vol.values);
}

TEST(RandomCubicPatch, DeterministicUnderSeed) {
    Volume3D vol;
    vol.height = vol.width = vol.slices = 12;
    vol.values.resize(12 * 12 * 12);
    Rng rng(5);
    for (auto& v : vol.values) v = rng.uniform();
    Volume3D a = random_cubic_patch(vol, 6, uint64_t{42});
    Volume3D b = random_cubic_patch(vol, 6, uint64_t{42});
    EXPECT_EQ(a.values, b.values);
}

TEST(RandomCubicPatch, OffsetsUniformWithin3Sigma) {
    // extent 16, edge 8: 9 valid offsets per axis; 10^4 draws
    Volume3D vol;
    vol.height = vol.width = vol.slices = 16;
    vol.values.resize(16 * 16 * 16);
    for (int64_t r = 0; r < 16; ++r)
        for (int64_t c = 0; c < 16; ++c)
            for (int64_t s = 0; s < 16; ++s) vol.at(r, c, s) = static_cast<double>(r * 1000 + c + s * 37);
    Rng rng(777);
    const int draws = 10000;
    std::vector<int> count_r(9, 0);
    for (int i = 0; i < draws; ++i) {
        Volume3D p = random_cubic_patch(vol, 8, rng);
        // recover the row offset from the coordinate encoding at (0,0,0) and (0,0,1)
        const double v0 = p.at(0, 0, 0);
        const double v1 = p.at(0, 0, 1);
        const int64_t s_off = static_cast<int64_t>(std::lround((v1 - v0))) / 37 > 0
                                  ? static_cast<int64_t>(std::lround(v0)) % 37
                                  : 0;
        (void)s_off;
        // row offset = floor(value / 1000) at local (0, c=0, s=0) minus c+37s parts
        // simpler: scan the original volume is overkill; decode r from v0 knowing c,s<16
        const int64_t r_off = static_cast<int64_t>(std::lround(v0)) / 1000;
        ASSERT_GE(r_off, 0);
        ASSERT_LE(r_off, 8);
        count_r[static_cast<size_t>(r_off)]++;
    }
    const double p = 1.0 / 9.0;
    const double expected = draws * p;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(count_r[static_cast<size_t>(k)], expected, 3.0 * sigma);
}

TEST(ExtractRegion, FullImageIdentity) {
    Image2D img;
    img.height = 5;
    img.width = 7;
    img.values.resize(35);
    Rng rng(6);
    for (auto& v : img.values) v = rng.uniform();
    Image2D out = extract_region(img, BoundingBox{{{0, 5}, {0, 7}}});
    EXPECT_EQ(out.values, img.values);
}

TEST(ExtractRegion, SinglePixel) {
    Image2D img;
    img.height = 4;
    img.width = 4;
    img.values.resize(16);
    for (size_t i = 0; i < 16; ++i) img.values[i] = static_cast<double>(i);
    Image2D out = extract_region(img, BoundingBox{{{2, 1}, {3, 1}}});
    ASSERT_EQ(out.height, 1);
    ASSERT_EQ(out.width, 1);
    EXPECT_DOUBLE_EQ(out.at(0, 0), img.at(2, 3));
}

TEST(ExtractRegion, MatchesLoopOracleOnRandomBoxes) {
    Rng rng(8);
    Image2D img;
    img.height = 12;
    img.width = 9;
    img.values.resize(static_cast<size_t>(12 * 9));
    for (auto& v : img.values) v = rng.uniform();
    for (int t = 0; t < 10; ++t) {
        const int64_t h = 1 + static_cast<int64_t>(rng.uniform_below(12));
        const int64_t w = 1 + static_cast<int64_t>(rng.uniform_below(9));
        const int64_t r0 = static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(12 - h + 1)));
        const int64_t c0 = static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(9 - w + 1)));
        Image2D out = extract_region(img, BoundingBox{{{r0, h}, {c0, w}}});
        for (int64_t r = 0; r < h; ++r)
            for (int64_t c = 0; c < w; ++c) EXPECT_DOUBLE_EQ(out.at(r, c), img.at(r0 + r, c0 + c));
    }
}

TEST(ExtractRegion, OutOfBoundsRejected) {
    Image2D img;
    img.height = 4;
    img.width = 4;
    img.values.resize(16, 0.0);
    EXPECT_THROW(extract_region(img, BoundingBox{{{2, 3}, {0, 4}}}), ShapeError);
}

TEST(ToyDataset, DeterministicUnderSeed) {
    auto d1 = temp_dir("toy_a");
    auto d2 = temp_dir("toy_b");
    auto m1 = generate_toy_dataset(d1.string(), ToyKind::Blob2D, 6, {32, 32}, 0.5, 99, "train");
    auto m2 = generate_toy_dataset(d2.string(), ToyKind::Blob2D, 6, {32, 32}, 0.5, 99, "train");
    ASSERT_EQ(m1.records.size(), m2.records.size());
    for (size_t i = 0; i < m1.records.size(); ++i)
        EXPECT_EQ(read_bytes(m1.records[i].path), read_bytes(m2.records[i].path));
}

TEST(ToyDataset, ClassBalanceExact) {
    auto dir = temp_dir("toy_bal");
    auto m = generate_toy_dataset(dir.string(), ToyKind::Blob2D, 100, {32, 32}, 0.5, 7, "train");
    int pos = 0;
    for (const auto& r : m.records) pos += (r.label && *r.label == 1) ? 1 : 0;
    EXPECT_EQ(pos, 50);
}

TEST(ToyDataset, PositiveBoxBrighterThanBackground) {
    auto dir = temp_dir("toy_box");
    auto m = generate_toy_dataset(dir.string(), ToyKind::Blob2D, 20, {32, 32}, 0.5, 11, "train");
    double inside_sum = 0.0, outside_sum = 0.0;
    int64_t inside_n = 0, outside_n = 0;
    for (const auto& r : m.records) {
        if (!r.label || *r.label != 1) continue;
        ASSERT_FALSE(r.boxes.empty());
        Image2D img = load_image2d(r.path);
        const auto& box = r.boxes[0];
        for (int64_t y = 0; y < img.height; ++y)
            for (int64_t x = 0; x < img.width; ++x) {
                const bool inside = y >= box.axes[0].first && y < box.axes[0].first + box.axes[0].second &&
                                    x >= box.axes[1].first && x < box.axes[1].first + box.axes[1].second;
                if (inside) {
                    inside_sum += img.at(y, x);
                    ++inside_n;
                } else {
                    outside_sum += img.at(y, x);
                    ++outside_n;
                }
            }
    }
    EXPECT_GT(inside_sum / static_cast<double>(inside_n), outside_sum / static_cast<double>(outside_n));
}

TEST(ToyDataset, Sphere3DSpansThreeSlices) {
    auto dir = temp_dir("toy_sph");
    auto m = generate_toy_dataset(dir.string(), ToyKind::Sphere3D, 4, {16, 16, 16}, 0.5, 3, "train");
    for (const auto& r : m.records) {
        if (!r.label || *r.label != 1) continue;
        ASSERT_EQ(r.boxes[0].axes.size(), 3u);
        EXPECT_GE(r.boxes[0].axes[2].second, 3);
    }
}

TEST(ToyDataset, InvalidBalanceRejected) {
    auto dir = temp_dir("toy_badbal");
    EXPECT_THROW(generate_toy_dataset(dir.string(), ToyKind::Blob2D, 10, {32, 32}, 0.0, 1, "train"),
                 ConfigError);
    EXPECT_THROW(generate_toy_dataset(dir.string(), ToyKind::Blob2D, 10, {32, 32}, 1.0, 1, "train"),
                 ConfigError);
}
