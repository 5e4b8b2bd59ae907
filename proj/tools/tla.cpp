// Command line front end: train / diagnose / gradcheck / selftest.
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "tla/experiment.hpp"
#include "tla/selftest.hpp"

namespace {

struct Overrides {
    std::string config_path;
    std::string seed;
    std::string tl_align;
    std::string mix;
    std::string out;
    std::string precision;
};

void add_common(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--config", ov.config_path, "run configuration file (key = value lines)");
    cmd->add_option("--seed", ov.seed, "override train.seed");
    cmd->add_option("--tl-align", ov.tl_align, "on|off: train on the attention-propagated target");
    cmd->add_option("--mix", ov.mix, "cutmix|mixup|random|block|none");
    cmd->add_option("--out", ov.out, "output directory");
    cmd->add_option("--precision", ov.precision, "f32|f64");
}

tla::RunConfig resolve(const Overrides& ov) {
    tla::RunConfig rc;
    if (!ov.config_path.empty()) rc = tla::load_run_config(ov.config_path);
    if (!ov.seed.empty()) rc.train.seed = std::stoull(ov.seed);
    if (!ov.tl_align.empty()) rc.train.tl_align = tla::parse_on_off(ov.tl_align);
    if (!ov.mix.empty()) rc.train.mix = tla::parse_mix_strategy(ov.mix);
    if (!ov.out.empty()) rc.out_dir = ov.out;
    if (!ov.precision.empty()) rc.precision = tla::parse_precision(ov.precision);
    return rc;
}

tla::Image noise_image(std::uint64_t seed, int size) {
    tla::Rng rng(seed);
    tla::Image img(size, size, 1);
    for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

int cmd_gradcheck(std::uint64_t seed, int probes) {
    tla::ModelConfig mc;
    mc.image_size = 16;
    mc.patch_size = 8;
    mc.channels = 1;
    mc.depth = 2;
    mc.dim = 8;
    mc.heads = 2;
    mc.mlp_ratio = 2;
    mc.num_classes = 3;

    tla::Rng init = tla::Rng::derive(seed, 0x6C);
    tla::ModelParams<double> params = tla::init_params<double>(mc, init);

    const tla::Image x1 = noise_image(tla::mix64(seed + 1), mc.image_size);
    const tla::Image x2 = noise_image(tla::mix64(seed + 2), mc.image_size);
    tla::Rng mix_rng = tla::Rng::derive(seed, 0x6D);
    const tla::MixedSample mixed = tla::cutmix(x1, x2, 0, 1, mix_rng);

    tla::ForwardTrace<double> tr;
    tla::model_forward(params, mixed.image, tr);
    const tla::LabelMatrix y0 = tla::init_label_map(mixed.spec, mc.patch_size, mc.num_classes);
    const tla::Matrix<double> target =
        tla::final_target(tla::align_forward(y0, tr.attention, mc.pooling));

    const tla::GradCheckReport rep =
        tla::gradient_check(params, mixed.image, target, probes, 1e-5, tla::mix64(seed + 3));
    std::printf("gradcheck: %d probes, max rel err %.3e (worst %s: analytic %.6e, numeric %.6e)\n",
                rep.probes, rep.max_rel_error, rep.worst_tensor.c_str(), rep.worst_analytic,
                rep.worst_numeric);

    const tla::StopGradReport sg = tla::stop_gradient_check(params, mixed);
    std::printf("stop-gradient: frozen-target rel err %.3e, live-target loss shift %.3e\n",
                sg.frozen_max_rel, sg.live_target_shift);

    const bool ok =
        rep.max_rel_error < 1e-4 && sg.frozen_max_rel < 1e-4 && sg.live_target_shift > 0.0;
    std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"small vision transformer trainer with attention-propagated mixed labels"};
    app.require_subcommand(1);

    Overrides train_ov, diag_ov;
    bool log_mixing = false;

    CLI::App* train = app.add_subcommand("train", "train a model and write run artifacts");
    add_common(train, train_ov);
    train->add_flag("--log-mixing", log_mixing, "also write mixlog.jsonl");

    std::string ckpt_path;
    CLI::App* diag = app.add_subcommand("diagnose", "alignment diagnostics from a checkpoint");
    add_common(diag, diag_ov);
    diag->add_option("--checkpoint", ckpt_path, "checkpoint to inspect (default <out>/checkpoint.bin)");

    std::uint64_t gc_seed = 7;
    int gc_probes = 60;
    CLI::App* gradc = app.add_subcommand("gradcheck", "finite-difference check of the backward pass");
    gradc->add_option("--seed", gc_seed, "rng seed for params, image and probe picks");
    gradc->add_option("--probes", gc_probes, "minimum number of probed entries");

    CLI::App* self = app.add_subcommand("selftest", "run the built-in invariant battery");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            tla::RunConfig rc = resolve(train_ov);
            if (log_mixing) rc.log_mixing = true;
            const tla::RunOutcome out = tla::run_experiment(rc);
            std::printf("run %s finished: %zu epochs, final test acc %.4f\n", out.hash.c_str(),
                        out.metrics.size(), out.metrics.back().test_acc);
            return 0;
        }
        if (diag->parsed()) {
            tla::RunConfig rc = resolve(diag_ov);
            const std::string ckpt =
                ckpt_path.empty() ? (tla::run_paths(rc.out_dir).checkpoint.string()) : ckpt_path;
            tla::diagnose_checkpoint(rc, ckpt);
            return 0;
        }
        if (gradc->parsed()) return cmd_gradcheck(gc_seed, gc_probes);
        if (self->parsed()) return tla::run_selftest() == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
