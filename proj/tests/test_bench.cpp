#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "medvae/bench.hpp"
#include "medvae/config.hpp"

using namespace medvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("medvae_bench_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(LatentFile, WriteReadWriteBytesIdentical) {
    auto dir = temp_dir("rt");
    Rng rng(1);
    Tensor z = Tensor::randn({1, 3, 4, 5}, rng);
    const auto p1 = dir / "a.mvl";
    const auto p2 = dir / "b.mvl";
    write_latent(p1.string(), z, 16);
    auto [back, meta] = read_latent(p1.string());
    EXPECT_EQ(meta.f, 16);
    EXPECT_EQ(meta.channels, 3);
    EXPECT_EQ(meta.spatial, (std::vector<int64_t>{4, 5}));
    write_latent(p2.string(), back, meta.f);
    EXPECT_EQ(read_bytes(p1), read_bytes(p2));
}

TEST(LatentFile, PayloadSizeArithmetic) {
    // 64x64 source, f=16, C=1 -> 16x16 latent -> 1024 payload bytes + header
    auto dir = temp_dir("size");
    Tensor z = Tensor::zeros({1, 1, 16, 16});
    const auto p = dir / "z.mvl";
    write_latent(p.string(), z, 16);
    // header: 4 magic + 1 ndim + 4 f + 4 C + 3*4 extents = 25 bytes
    EXPECT_EQ(fs::file_size(p), 25u + 16u * 16u * 4u);
    auto [_, meta] = read_latent(p.string());
    EXPECT_EQ(meta.payload_bytes(), 1024);
}

TEST(LatentFile, TamperedPayloadRejected) {
    auto dir = temp_dir("tamper");
    Tensor z = Tensor::zeros({1, 1, 4, 4});
    const auto p = dir / "z.mvl";
    write_latent(p.string(), z, 16);
    auto bytes = read_bytes(p);
    bytes.resize(bytes.size() - 4);
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.close();
    EXPECT_THROW(read_latent(p.string()), FormatError);
}

TEST(LatentFile, MagicMismatchRejected) {
    auto dir = temp_dir("magic");
    const auto p = dir / "z.mvl";
    std::ofstream(p, std::ios::binary) << "MVLX";
    EXPECT_THROW(read_latent(p.string()), FormatError);
}

TEST(StorageRatio, PaperFactors) {
    LatentMeta m2d;
    m2d.ndim = 2;
    m2d.f = 64;
    m2d.channels = 1;
    m2d.spatial = {8, 8};
    EXPECT_DOUBLE_EQ(storage_ratio({64, 64}, m2d), 64.0);

    LatentMeta m3d;
    m3d.ndim = 3;
    m3d.f = 512;
    m3d.channels = 1;
    m3d.spatial = {8, 8, 8};
    EXPECT_DOUBLE_EQ(storage_ratio({64, 64, 64}, m3d), 512.0);

    LatentMeta mc3;
    mc3.ndim = 2;
    mc3.f = 16;
    mc3.channels = 3;
    mc3.spatial = {16, 16};
    EXPECT_DOUBLE_EQ(storage_ratio({64, 64}, mc3), 16.0 / 3.0);
}

TEST(BenchForward, ThroughputTimesLatencyIsBatch) {
    auto rep = bench_forward("noop", {8, 8}, 4, 5, 1, []() {
        volatile double acc = 0.0;
        for (int i = 0; i < 10000; ++i) acc += static_cast<double>(i);
    });
    EXPECT_DOUBLE_EQ(rep.throughput * rep.latency_ms / 1000.0, 4.0);
    EXPECT_GT(rep.latency_ms, 0.0);
    EXPECT_GT(rep.timer_resolution_ns, 0.0);
}

TEST(BenchForward, TooFewRepetitionsRejected) {
    EXPECT_THROW(bench_forward("x", {1}, 1, 2, 0, []() {}), ConfigError);
}

TEST(BenchMaxBatch, DoublingSearch) {
    // footprint: 10 + 3*batch; budget 40 -> batch 8 fits (34), 16 does not (58)
    auto footprint = [](int64_t b) { return static_cast<uint64_t>(10 + 3 * b); };
    EXPECT_EQ(bench_max_batch(footprint, 40), 8);
    EXPECT_EQ(bench_max_batch(footprint, 58), 16);
    EXPECT_THROW(bench_max_batch(footprint, 12), ConfigError);
}

TEST(BenchMaxBatch, SmallerInputNeverDecreasesResult) {
    ProbeConfig cfg;
    Probe probe = make_probe(cfg, 2);
    const uint64_t budget = 8ull << 20;
    const int64_t full = bench_max_batch(
        [&](int64_t b) { return probe_footprint_bytes(probe, 64, 64, b); }, budget);
    const int64_t half = bench_max_batch(
        [&](int64_t b) { return probe_footprint_bytes(probe, 32, 32, b); }, budget);
    const int64_t quarter = bench_max_batch(
        [&](int64_t b) { return probe_footprint_bytes(probe, 16, 16, b); }, budget);
    EXPECT_GE(half, full);
    EXPECT_GE(quarter, half);
}

TEST(Config, KeyValueParsingAndUnknownKeysFatal) {
    auto dir = temp_dir("cfg");
    const auto p = dir / "a.cfg";
    std::ofstream(p) << "# comment line\n"
                     << "steps = 40\n"
                     << "lr = 2e-3   # trailing comment\n"
                     << "name = toy\n";
    KeyValueConfig cfg = KeyValueConfig::from_file(p.string());
    EXPECT_EQ(cfg.get_int("steps", 0), 40);
    EXPECT_DOUBLE_EQ(cfg.get_double("lr", 0.0), 2e-3);
    EXPECT_THROW(cfg.reject_unknown(), ConfigError);  // 'name' never consumed
    EXPECT_EQ(cfg.get_string("name", ""), "toy");
    EXPECT_NO_THROW(cfg.reject_unknown());
}

TEST(Config, SeedOverrideFromEnvironment) {
    setenv("MEDVAE_SEED", "777", 1);
    EXPECT_EQ(apply_seed_override(5), 777u);
    unsetenv("MEDVAE_SEED");
    EXPECT_EQ(apply_seed_override(5), 5u);
}
