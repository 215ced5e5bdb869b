// medvae command-line tool: dataset synthesis, two-stage training, encoding,
// decoding, baselines, evaluation, and benchmarking.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "medvae/baselines.hpp"
#include "medvae/bench.hpp"
#include "medvae/config.hpp"
#include "medvae/evalsuite.hpp"
#include "medvae/training.hpp"

namespace fs = std::filesystem;
using namespace medvae;

namespace {

std::vector<int64_t> parse_dims(const std::string& s) {
    std::vector<int64_t> dims;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, 'x')) dims.push_back(std::stoll(tok));
    return dims;
}

std::vector<uint64_t> parse_seeds(const std::string& s) {
    std::vector<uint64_t> seeds;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) seeds.push_back(std::stoull(tok));
    if (seeds.empty()) throw ConfigError("empty seed list");
    return seeds;
}

struct LoadedTrainConfig {
    TrainConfig train;
    VAEConfig model;
    int64_t lora_rank = 0;
};

LoadedTrainConfig read_train_config(const std::string& path) {
    KeyValueConfig kv = KeyValueConfig::from_file(path);
    LoadedTrainConfig out;
    out.train.steps = kv.get_int("steps", out.train.steps);
    out.train.batch = kv.get_int("batch", out.train.batch);
    out.train.lr = kv.get_double("lr", out.train.lr);
    out.train.disc_lr = kv.get_double("disc_lr", out.train.disc_lr);
    out.train.weight_decay = kv.get_double("weight_decay", out.train.weight_decay);
    out.train.grad_clip = kv.get_double("grad_clip", out.train.grad_clip);
    out.train.seed = apply_seed_override(static_cast<uint64_t>(kv.get_int("seed", 0)));
    out.train.weights.w_rec = kv.get_double("w_rec", out.train.weights.w_rec);
    out.train.weights.w_perc = kv.get_double("w_perc", out.train.weights.w_perc);
    out.train.weights.w_kl = kv.get_double("w_kl", out.train.weights.w_kl);
    out.train.weights.w_emb = kv.get_double("w_emb", out.train.weights.w_emb);
    out.train.weights.w_adv = kv.get_double("w_adv", out.train.weights.w_adv);
    out.train.weights.adv_start_step = kv.get_int("adv_start_step", out.train.weights.adv_start_step);
    out.train.patch_edge = kv.get_int("patch_edge", out.train.patch_edge);
    out.train.target_f = kv.get_int("target_f", out.train.target_f);
    out.train.head_hidden = kv.get_int("head_hidden", out.train.head_hidden);
    out.train.checkpoint_every = kv.get_int("checkpoint_every", out.train.checkpoint_every);
    out.model.ndim = 2;
    out.model.f = kv.get_int("f", 16);
    out.model.latent_channels = kv.get_int("latent_channels", 1);
    out.model.base_width = kv.get_int("base_width", 32);
    out.model.groups = kv.get_int("groups", 8);
    out.lora_rank = kv.get_int("lora_rank", 0);
    kv.reject_unknown();
    return out;
}

bool is_volume_path(const std::string& p) { return fs::path(p).extension() == ".mvv"; }

// z (optionally sampled), projected through the head when present.
Tensor encode_for_downstream(const VAEModel& model, const Tensor& x, bool sample, uint64_t seed,
                             bool use_head) {
    NoGradGuard ng;
    LatentDist d = encode(model, x);
    Tensor z;
    if (sample) {
        Rng rng(seed);
        z = reparameterize(d, rng);
    } else {
        z = reparameterize_deterministic(d);
    }
    if (use_head && model.head && model.config.ndim == 2) z = project_latent(*model.head, z);
    return z;
}

void write_probe_csv(const std::string& path, const std::string& method, int64_t f, int64_t C,
                     const ProbeReport& rep) {
    std::ofstream out(path);
    if (!out) throw FormatError("probe report: cannot write " + path);
    out << "method,f,C,seed,auroc\n";
    out.precision(17);
    for (size_t i = 0; i < rep.per_seed.size(); ++i)
        out << method << "," << f << "," << C << "," << rep.seeds[i] << "," << rep.per_seed[i] << "\n";
}

LabeledLatentDataset probe_inputs(const std::string& input_kind, const DatasetManifest& manifest,
                                  const VAEModel* model, InterpMethod method, int64_t f,
                                  const std::string& split) {
    std::vector<Tensor> inputs;
    std::vector<int> labels;
    for (const auto& rec : manifest.records) {
        if (!rec.label) throw ConfigError("eval-probe: manifest record without a label: " + rec.path);
        labels.push_back(*rec.label);
        if (is_volume_path(rec.path))
            throw ConfigError("eval-probe: the shipped probe is 2D; volume manifests are not supported");
        Image2D img = load_image2d(rec.path);
        if (input_kind == "highres") {
            inputs.push_back(image_to_tensor(img));
        } else if (input_kind == "interp") {
            VAEConfig probe_cfg{2, f, 1, 32, 8};
            probe_cfg.validate();
            const int64_t a = probe_cfg.per_axis_factor();
            Image2D low = interp_resize(img, method, img.height / a, img.width / a);
            inputs.push_back(image_to_tensor(low));
        } else if (input_kind == "vae") {
            if (!model) throw ConfigError("eval-probe: --model is required for --input vae");
            inputs.push_back(encode_for_downstream(*model, image_to_tensor(img), false, 0, true));
        } else {
            throw ConfigError("eval-probe: unknown --input '" + input_kind + "'");
        }
    }
    return LabeledLatentDataset::from_latents(inputs, labels, split);
}

int num_classes_of(const DatasetManifest& train, const DatasetManifest& test) {
    int max_label = 0;
    for (const auto* m : {&train, &test})
        for (const auto& rec : m->records)
            if (rec.label) max_label = std::max(max_label, *rec.label);
    return max_label + 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"medvae: 2D/3D autoencoders that downsize images into latent representations"};
    app.require_subcommand(1);

    try {
        // ------------------------------------------------------------------ gen-data
        auto* gen = app.add_subcommand("gen-data", "synthesize a deterministic toy dataset");
        std::string gen_kind = "blob2d", gen_out, gen_size = "32x32";
        int64_t gen_train = 200, gen_test = 100;
        double gen_balance = 0.5;
        uint64_t gen_seed = 0;
        gen->add_option("--kind", gen_kind, "blob2d|ring2d|sphere3d|plane3d");
        gen->add_option("--out", gen_out, "output directory")->required();
        gen->add_option("--size", gen_size, "HxW or HxWxS");
        gen->add_option("--n-train", gen_train, "training samples");
        gen->add_option("--n-test", gen_test, "test samples");
        gen->add_option("--balance", gen_balance, "positive class fraction");
        gen->add_option("--seed", gen_seed, "rng seed");
        gen->callback([&]() {
            const uint64_t seed = apply_seed_override(gen_seed);
            const ToyKind kind = toy_kind_from_string(gen_kind);
            const auto dims = parse_dims(gen_size);
            generate_toy_dataset(gen_out, kind, gen_train, dims, gen_balance, seed, "train");
            generate_toy_dataset(gen_out, kind, gen_test, dims, gen_balance, seed + 1, "test");
            std::cout << "wrote " << gen_train << "+" << gen_test << " samples under " << gen_out
                      << "\n";
        });

        // ------------------------------------------------------------------ train-stage1
        auto* ts1 = app.add_subcommand("train-stage1", "stage-1 base autoencoder training (2D)");
        std::string ts1_cfg, ts1_train, ts1_out, ts1_state, ts1_log;
        ts1->add_option("--config", ts1_cfg, "key=value training config")->required();
        ts1->add_option("--train", ts1_train, "training manifest")->required();
        ts1->add_option("--out-model", ts1_out, "output model checkpoint (MVC1)")->required();
        ts1->add_option("--out-state", ts1_state, "output trainer state (MVS1)");
        ts1->add_option("--loss-log", ts1_log, "loss log CSV");
        ts1->callback([&]() {
            auto lc = read_train_config(ts1_cfg);
            lc.train.stage = TrainStage::S1_2D;
            VAEModel model = make_vae(lc.model, lc.train.seed);
            if (lc.lora_rank > 0) apply_lora(model, lc.lora_rank, lc.train.seed);
            ImageSet data = ImageSet::from_manifest(load_manifest(ts1_train));
            FeatureEmbedder emb = make_embedder(kEmbedderSeed);
            TrainState st = init_stage1(lc.train, std::move(model));
            CheckpointHook hook;
            if (!ts1_state.empty())
                hook = [&](const TrainState& s) {
                    save_checkpoint(ts1_state, const_cast<TrainState&>(s), lc.train);
                };
            train_stage1(st, lc.train, data, emb, hook);
            save_model(ts1_out, st.model);
            if (!ts1_log.empty()) save_loss_log_csv(ts1_log, st.log);
            std::cout << "stage-1 done: " << st.step << " steps, final loss " << st.log.back().total
                      << "\n";
        });

        // ------------------------------------------------------------------ train-stage2-2d
        auto* ts2 = app.add_subcommand("train-stage2-2d", "stage-2 projection-head training (2D)");
        std::string ts2_cfg, ts2_base, ts2_train, ts2_out, ts2_log;
        ts2->add_option("--config", ts2_cfg)->required();
        ts2->add_option("--base", ts2_base, "stage-1 model checkpoint")->required();
        ts2->add_option("--train", ts2_train)->required();
        ts2->add_option("--out-model", ts2_out)->required();
        ts2->add_option("--loss-log", ts2_log);
        ts2->callback([&]() {
            auto lc = read_train_config(ts2_cfg);
            lc.train.stage = TrainStage::S2_2D;
            VAEModel base = load_model(ts2_base);
            ImageSet data = ImageSet::from_manifest(load_manifest(ts2_train));
            FeatureEmbedder emb = make_embedder(kEmbedderSeed);
            TrainState st = init_stage2_2d(lc.train, std::move(base));
            train_stage2_2d(st, lc.train, data, emb);
            save_model(ts2_out, st.model);
            if (!ts2_log.empty()) save_loss_log_csv(ts2_log, st.log);
            std::cout << "stage-2 (2D) done: " << st.step << " steps, final loss "
                      << st.log.back().total << "\n";
        });

        // ------------------------------------------------------------------ inflate-3d
        auto* inf = app.add_subcommand("inflate-3d", "lift a 2D checkpoint to 3D (kernel centering)");
        std::string inf_in, inf_out;
        inf->add_option("--model", inf_in)->required();
        inf->add_option("--out", inf_out)->required();
        inf->callback([&]() {
            VAEModel m2 = load_model(inf_in);
            VAEModel m3 = inflate_2d_to_3d(m2);
            save_model(inf_out, m3);
            std::cout << "inflated f=" << m2.config.f << " (2D) -> f=" << m3.config.f << " (3D)\n";
        });

        // ------------------------------------------------------------------ train-stage2-3d
        auto* ts3 = app.add_subcommand("train-stage2-3d", "stage-2 3D fine-tuning on cubic patches");
        std::string ts3_cfg, ts3_base, ts3_train, ts3_out, ts3_log;
        ts3->add_option("--config", ts3_cfg)->required();
        ts3->add_option("--base2d", ts3_base, "stage-1 2D model checkpoint")->required();
        ts3->add_option("--train", ts3_train, "volume manifest")->required();
        ts3->add_option("--out-model", ts3_out)->required();
        ts3->add_option("--loss-log", ts3_log);
        ts3->callback([&]() {
            auto lc = read_train_config(ts3_cfg);
            lc.train.stage = TrainStage::S2_3D;
            VAEModel base = load_model(ts3_base);
            VolumeSet data = VolumeSet::from_manifest(load_manifest(ts3_train));
            FeatureEmbedder emb = make_embedder(kEmbedderSeed);
            TrainState st = init_stage2_3d(lc.train, base);
            train_stage2_3d(st, lc.train, data, emb);
            save_model(ts3_out, st.model);
            if (!ts3_log.empty()) save_loss_log_csv(ts3_log, st.log);
            std::cout << "stage-2 (3D) done: " << st.step << " steps, final loss "
                      << st.log.back().total << "\n";
        });

        // ------------------------------------------------------------------ decoder-finetune
        auto* dft = app.add_subcommand("decoder-finetune",
                                       "fine-tune an inflated decoder on stitched 2D latents");
        std::string dft_cfg, dft_base, dft_train, dft_out, dft_log;
        dft->add_option("--config", dft_cfg)->required();
        dft->add_option("--base2d", dft_base, "stage-1 2D model checkpoint")->required();
        dft->add_option("--train", dft_train, "volume manifest")->required();
        dft->add_option("--out-model", dft_out)->required();
        dft->add_option("--loss-log", dft_log);
        dft->callback([&]() {
            auto lc = read_train_config(dft_cfg);
            lc.train.stage = TrainStage::DecoderFinetune;
            VAEModel base2d = load_model(dft_base);
            VAEModel m3 = inflate_2d_to_3d(base2d);
            VolumeSet vols = VolumeSet::from_manifest(load_manifest(dft_train));
            LatentTargetSet pairs;
            for (const auto& vol : vols.volumes) {
                pairs.latents.push_back(stitch_2d_latents(base2d, vol, m3.config));
                pairs.targets.push_back(volume_to_tensor(vol));
            }
            FeatureEmbedder emb = make_embedder(kEmbedderSeed);
            TrainState st = init_decoder_finetune(lc.train, std::move(m3));
            train_decoder_finetune(st, lc.train, pairs, emb);
            save_model(dft_out, st.model);
            if (!dft_log.empty()) save_loss_log_csv(dft_log, st.log);
            std::cout << "decoder fine-tuning done: " << st.step << " steps, final loss "
                      << st.log.back().total << "\n";
        });

        // ------------------------------------------------------------------ encode
        auto* enc = app.add_subcommand("encode", "encode an image/volume into a latent file");
        std::string enc_model, enc_in, enc_out;
        bool enc_sample = false, enc_no_head = false;
        uint64_t enc_seed = 0;
        enc->add_option("--model", enc_model)->required();
        enc->add_option("--in", enc_in)->required();
        enc->add_option("--out", enc_out)->required();
        enc->add_flag("--sample", enc_sample, "sample the posterior instead of using mu");
        enc->add_flag("--no-head", enc_no_head, "skip the stage-2 projection head");
        enc->add_option("--seed", enc_seed, "sampling seed");
        enc->callback([&]() {
            VAEModel model = load_model(enc_model);
            Tensor x = is_volume_path(enc_in) ? volume_to_tensor(load_volume3d(enc_in))
                                              : image_to_tensor(load_image2d(enc_in));
            Tensor z = encode_for_downstream(model, x, enc_sample, apply_seed_override(enc_seed),
                                             !enc_no_head);
            write_latent(enc_out, z, model.config.f);
            std::cout << "latent " << shape_str(z.shape()) << " -> " << enc_out << "\n";
        });

        // ------------------------------------------------------------------ decode
        auto* dec = app.add_subcommand("decode", "decode a latent file back to an image/volume");
        std::string dec_model, dec_in, dec_out;
        dec->add_option("--model", dec_model)->required();
        dec->add_option("--in", dec_in)->required();
        dec->add_option("--out", dec_out)->required();
        dec->callback([&]() {
            VAEModel model = load_model(dec_model);
            auto [z, meta] = read_latent(dec_in);
            if (meta.ndim != model.config.ndim)
                throw FormatError("decode: latent ndim does not match model");
            if (meta.channels != model.config.latent_channels)
                throw FormatError("decode: latent channel count does not match model");
            NoGradGuard ng;
            Tensor xhat = decode(model, z);
            if (model.config.ndim == 2)
                save_image2d(dec_out, tensor_to_image(xhat));
            else
                save_volume3d(dec_out, tensor_to_volume(xhat));
            std::cout << "decoded " << shape_str(xhat.shape()) << " -> " << dec_out << "\n";
        });

        // ------------------------------------------------------------------ baseline
        auto* bl = app.add_subcommand("baseline", "interpolation downsize/upsize round trip");
        std::string bl_method = "bicubic", bl_in, bl_low, bl_recon;
        int64_t bl_f = 16;
        bl->add_option("--method", bl_method, "nearest|bilinear|bicubic");
        bl->add_option("--f", bl_f, "downsizing factor");
        bl->add_option("--in", bl_in)->required();
        bl->add_option("--out-low", bl_low);
        bl->add_option("--out-recon", bl_recon);
        bl->callback([&]() {
            const InterpMethod m = interp_method_from_string(bl_method);
            if (is_volume_path(bl_in)) {
                auto rt = baseline_downsize_roundtrip(load_volume3d(bl_in), m, bl_f);
                if (!bl_low.empty()) save_volume3d(bl_low, rt.low);
                if (!bl_recon.empty()) save_volume3d(bl_recon, rt.reconstruction);
            } else {
                auto rt = baseline_downsize_roundtrip(load_image2d(bl_in), m, bl_f);
                if (!bl_low.empty()) save_image2d(bl_low, rt.low);
                if (!bl_recon.empty()) save_image2d(bl_recon, rt.reconstruction);
            }
            std::cout << "baseline " << bl_method << " f=" << bl_f << " done\n";
        });

        // ------------------------------------------------------------------ eval-recon
        auto* er = app.add_subcommand("eval-recon", "reconstruction quality metrics over a manifest");
        std::string er_method = "vae", er_model, er_data, er_out, er_region;
        int64_t er_f = 16;
        uint64_t er_seed = 0;
        bool er_stitch = false;
        er->add_option("--method", er_method, "vae|nearest|bilinear|bicubic");
        er->add_option("--model", er_model, "model checkpoint (vae method)");
        er->add_option("--f", er_f, "downsizing factor (interpolation methods)");
        er->add_option("--data", er_data)->required();
        er->add_option("--out", er_out, "metric report CSV")->required();
        er->add_option("--region-csv", er_region, "per-box region PSNR CSV");
        er->add_flag("--stitch", er_stitch, "slice-stitch a 2D model over volumes");
        er->add_option("--seed", er_seed);
        er->callback([&]() {
            DatasetManifest manifest = load_manifest(er_data, "test");
            if (manifest.records.empty()) throw ConfigError("eval-recon: empty manifest");
            VAEModel model;
            const bool use_vae = er_method == "vae";
            if (use_vae) {
                if (er_model.empty()) throw ConfigError("eval-recon: --model required for vae method");
                model = load_model(er_model);
            }
            MetricReport rep;
            rep.seed = apply_seed_override(er_seed);
            std::ofstream region_out;
            if (!er_region.empty()) {
                region_out.open(er_region);
                region_out << "index,box,psnr\n";
                region_out.precision(17);
            }
            int64_t idx = 0;
            for (const auto& rec : manifest.records) {
                MetricRow row;
                row.index = idx;
                if (is_volume_path(rec.path)) {
                    Volume3D vol = load_volume3d(rec.path);
                    Volume3D recon;
                    if (use_vae && er_stitch) {
                        recon = tensor_to_volume(stitch_2d_reconstructions(model, vol));
                    } else if (use_vae) {
                        NoGradGuard ng;
                        Tensor x = volume_to_tensor(vol);
                        recon = tensor_to_volume(decode(model, encode(model, x).mu));
                    } else {
                        recon = baseline_downsize_roundtrip(
                                    vol, interp_method_from_string(er_method), er_f)
                                    .reconstruction;
                    }
                    row.psnr_db = psnr(vol, recon);
                    auto ms = ms_ssim(vol, recon);
                    row.ms_ssim_value = ms.value;
                    row.scales = ms.scales_used;
                } else {
                    Image2D img = load_image2d(rec.path);
                    Image2D recon;
                    if (use_vae) {
                        NoGradGuard ng;
                        Tensor x = image_to_tensor(img);
                        recon = tensor_to_image(decode(model, encode(model, x).mu));
                    } else {
                        recon = baseline_downsize_roundtrip(
                                    img, interp_method_from_string(er_method), er_f)
                                    .reconstruction;
                    }
                    row.psnr_db = psnr(img, recon);
                    auto ms = ms_ssim(img, recon);
                    row.ms_ssim_value = ms.value;
                    row.scales = ms.scales_used;
                    if (region_out.is_open() && !rec.boxes.empty()) {
                        auto per_box = region_psnr(img, recon, rec.boxes);
                        for (size_t b = 0; b < per_box.size(); ++b)
                            region_out << idx << "," << rec.boxes[b].to_string() << "," << per_box[b]
                                       << "\n";
                    }
                }
                rep.rows.push_back(row);
                ++idx;
            }
            write_metric_report_csv(er_out, rep);
            std::cout << "eval-recon: n=" << rep.rows.size() << " psnr " << rep.psnr_mean() << " +- "
                      << rep.psnr_std() << " ms-ssim " << rep.msssim_mean() << " +- "
                      << rep.msssim_std() << "\n";
        });

        // ------------------------------------------------------------------ eval-probe
        auto* ep = app.add_subcommand("eval-probe", "latent-quality probe with AUROC reporting");
        std::string ep_input = "vae", ep_method = "bicubic", ep_model, ep_train, ep_test, ep_out;
        std::string ep_seeds = "1,2,3";
        int64_t ep_f = 16, ep_epochs = 40, ep_batch = 16;
        double ep_lr = 1e-4;
        bool ep_weighted = false;
        ep->add_option("--input", ep_input, "highres|interp|vae");
        ep->add_option("--method", ep_method, "interpolation method for --input interp");
        ep->add_option("--model", ep_model, "model checkpoint for --input vae");
        ep->add_option("--f", ep_f, "downsizing factor for --input interp");
        ep->add_option("--train", ep_train)->required();
        ep->add_option("--test", ep_test)->required();
        ep->add_option("--out", ep_out)->required();
        ep->add_option("--seeds", ep_seeds, "comma-separated probe seeds");
        ep->add_option("--epochs", ep_epochs);
        ep->add_option("--batch", ep_batch);
        ep->add_option("--lr", ep_lr);
        ep->add_flag("--weighted", ep_weighted, "inverse-frequency weighted sampling");
        ep->callback([&]() {
            DatasetManifest train_m = load_manifest(ep_train, "train");
            DatasetManifest test_m = load_manifest(ep_test, "test");
            VAEModel model;
            VAEModel* model_ptr = nullptr;
            int64_t f = ep_f, C = 1;
            if (ep_input == "vae") {
                model = load_model(ep_model);
                model_ptr = &model;
                f = model.config.f;
                C = model.config.latent_channels;
            } else if (ep_input == "highres") {
                f = 1;
            }
            const InterpMethod m = interp_method_from_string(ep_method);
            auto train_d = probe_inputs(ep_input, train_m, model_ptr, m, f, "train");
            auto test_d = probe_inputs(ep_input, test_m, model_ptr, m, f, "test");
            ProbeConfig cfg;
            cfg.epochs = ep_epochs;
            cfg.batch = ep_batch;
            cfg.lr = ep_lr;
            cfg.weighted_sampling = ep_weighted;
            const int k = num_classes_of(train_m, test_m);
            auto rep = probe_protocol(cfg, train_d, test_d, k, parse_seeds(ep_seeds));
            write_probe_csv(ep_out, ep_input == "interp" ? ep_method : ep_input, f, C, rep);
            std::cout << "eval-probe: auroc " << rep.mean << " +- " << rep.stddev << " over "
                      << rep.per_seed.size() << " seeds\n";
        });

        // ------------------------------------------------------------------ bench
        auto* bn = app.add_subcommand("bench", "latency/throughput/max-batch benchmarks");
        std::string bn_out, bn_fs = "1,16,64", bn_model;
        int64_t bn_size = 64, bn_batch = 1, bn_reps = 7, bn_warmup = 2, bn_budget_mb = 256;
        bn->add_option("--out", bn_out, "bench report CSV")->required();
        bn->add_option("--input-size", bn_size, "full-resolution extent");
        bn->add_option("--f", bn_fs, "comma-separated downsizing factors");
        bn->add_option("--batch", bn_batch);
        bn->add_option("--reps", bn_reps);
        bn->add_option("--warmup", bn_warmup);
        bn->add_option("--budget-mb", bn_budget_mb, "memory budget for max-batch search");
        bn->add_option("--model", bn_model, "also bench this checkpoint's encode path");
        bn->callback([&]() {
            std::vector<BenchReport> reports;
            Rng rng(12345);
            for (uint64_t fv : parse_seeds(bn_fs)) {
                VAEConfig probe_cfg{2, static_cast<int64_t>(fv), 1, 32, 8};
                probe_cfg.validate();
                const int64_t a = probe_cfg.per_axis_factor();
                if (bn_size % a != 0)
                    throw ConfigError("bench: input size not divisible by per-axis factor");
                const int64_t e = bn_size / a;
                ProbeConfig pc;
                Probe probe = make_probe(pc, 2);
                Tensor x = Tensor::randn({bn_batch, 1, e, e}, rng, 0.3);
                auto rep = bench_forward("probe_f" + std::to_string(fv), {e, e}, bn_batch, bn_reps,
                                         bn_warmup, [&]() {
                                             NoGradGuard ng;
                                             Tensor out = probe.logits(x);
                                             (void)out;
                                         });
                rep.max_batch = bench_max_batch(
                    [&](int64_t b) { return probe_footprint_bytes(probe, e, e, b); },
                    static_cast<uint64_t>(bn_budget_mb) << 20);
                reports.push_back(rep);
            }
            if (!bn_model.empty()) {
                VAEModel model = load_model(bn_model);
                std::vector<int64_t> dims(static_cast<size_t>(model.config.ndim), bn_size);
                Shape xs{bn_batch, 1};
                for (int64_t d : dims) xs.push_back(d);
                Tensor x = Tensor::randn(xs, rng, 0.3);
                auto rep = bench_forward("vae_encode_f" + std::to_string(model.config.f), dims,
                                         bn_batch, bn_reps, bn_warmup, [&]() {
                                             NoGradGuard ng;
                                             LatentDist d = encode(model, x);
                                             (void)d;
                                         });
                rep.max_batch = bench_max_batch(
                    [&](int64_t b) { return vae_footprint_bytes(model, dims, b); },
                    static_cast<uint64_t>(bn_budget_mb) << 20);
                reports.push_back(rep);
            }
            write_bench_report_csv(bn_out, reports);
            for (const auto& r : reports)
                std::cout << r.id << ": latency " << r.latency_ms << " ms, throughput "
                          << r.throughput << " /s, max batch " << r.max_batch << "\n";
        });

        // ------------------------------------------------------------------ ablate
        auto* ab = app.add_subcommand("ablate",
                                      "stage-1-only vs stage-2 probe comparison (one seed set)");
        std::string ab_s1, ab_s2, ab_train, ab_test, ab_out, ab_seeds = "1,2,3";
        int64_t ab_epochs = 40, ab_batch = 16;
        double ab_lr = 1e-4;
        ab->add_option("--stage1", ab_s1, "stage-1 checkpoint")->required();
        ab->add_option("--stage2", ab_s2, "stage-2 checkpoint (with projection head)")->required();
        ab->add_option("--train", ab_train)->required();
        ab->add_option("--test", ab_test)->required();
        ab->add_option("--out", ab_out)->required();
        ab->add_option("--seeds", ab_seeds);
        ab->add_option("--epochs", ab_epochs);
        ab->add_option("--batch", ab_batch);
        ab->add_option("--lr", ab_lr);
        ab->callback([&]() {
            DatasetManifest train_m = load_manifest(ab_train, "train");
            DatasetManifest test_m = load_manifest(ab_test, "test");
            VAEModel s1 = load_model(ab_s1);
            VAEModel s2 = load_model(ab_s2);
            ProbeConfig cfg;
            cfg.epochs = ab_epochs;
            cfg.batch = ab_batch;
            cfg.lr = ab_lr;
            const int k = num_classes_of(train_m, test_m);
            const auto seeds = parse_seeds(ab_seeds);
            auto latents_for = [&](VAEModel& m, const DatasetManifest& man, bool head,
                                   const char* split) {
                std::vector<Tensor> inputs;
                std::vector<int> labels;
                for (const auto& rec : man.records) {
                    if (!rec.label) throw ConfigError("ablate: unlabeled record " + rec.path);
                    labels.push_back(*rec.label);
                    Image2D img = load_image2d(rec.path);
                    inputs.push_back(encode_for_downstream(m, image_to_tensor(img), false, 0, head));
                }
                return LabeledLatentDataset::from_latents(inputs, labels, split);
            };
            std::ofstream out(ab_out);
            if (!out) throw FormatError("ablate: cannot write " + ab_out);
            out << "method,f,C,seed,auroc\n";
            out.precision(17);
            struct Row {
                const char* method;
                VAEModel* model;
                bool head;
            };
            std::vector<Row> rows{{"stage1_base", &s1, false}, {"stage2_medvae", &s2, true}};
            for (auto& r : rows) {
                auto train_d = latents_for(*r.model, train_m, r.head, "train");
                auto test_d = latents_for(*r.model, test_m, r.head, "test");
                auto rep = probe_protocol(cfg, train_d, test_d, k, seeds);
                for (size_t i = 0; i < rep.per_seed.size(); ++i)
                    out << r.method << "," << r.model->config.f << ","
                        << r.model->config.latent_channels << "," << rep.seeds[i] << ","
                        << rep.per_seed[i] << "\n";
                std::cout << r.method << ": auroc " << rep.mean << " +- " << rep.stddev << "\n";
            }
        });

        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
