// End-to-end runs: resolve the dataset, train, and leave a reproducible
// artifact trail (canonical config copy, metrics.jsonl, checkpoint.bin,
// diagnostics.jsonl, optional mixlog.jsonl). Every serialized file starts
// with a {"config_hash": ...} line; none of them contains wall-clock times,
// so two runs of the same config produce byte-identical files.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tla/checkpoint.hpp"
#include "tla/config.hpp"
#include "tla/dataset.hpp"
#include "tla/diagnostics.hpp"
#include "tla/trainer.hpp"

namespace tla {

struct RunPaths {
    std::filesystem::path dir;
    std::filesystem::path config;
    std::filesystem::path metrics;
    std::filesystem::path checkpoint;
    std::filesystem::path diagnostics;
    std::filesystem::path mixlog;
    std::filesystem::path samples;
};

inline RunPaths run_paths(const std::string& out_dir) {
    RunPaths p;
    p.dir = out_dir;
    p.config = p.dir / "config.txt";
    p.metrics = p.dir / "metrics.jsonl";
    p.checkpoint = p.dir / "checkpoint.bin";
    p.diagnostics = p.dir / "diagnostics.jsonl";
    p.mixlog = p.dir / "mixlog.jsonl";
    p.samples = p.dir / "samples";
    return p;
}

struct RunOutcome {
    RunPaths paths;
    std::string hash;
    std::vector<EpochMetrics> metrics;
};

namespace detail {

constexpr std::uint64_t kTagSynthTrain = 0x707A;
constexpr std::uint64_t kTagSynthTest = 0x707B;
constexpr std::uint64_t kTagDiag = 0xD1A6;

inline void apply_limit(Dataset& ds, int limit) {
    if (limit > 0 && static_cast<std::size_t>(limit) < ds.size()) {
        ds.images.resize(limit);
        ds.labels.resize(limit);
    }
}

inline Dataset load_split(const RunConfig& rc, bool train_split) {
    const DataConfig& dc = rc.data;
    Dataset ds;
    if (dc.source == "synth") {
        const int per = train_split ? dc.synth_train_per_class : dc.synth_test_per_class;
        const std::uint64_t seed =
            Rng::derive(rc.train.seed, train_split ? kTagSynthTrain : kTagSynthTest).next_u64();
        ds = synth_dataset(dc.synth_classes, per, dc.synth_image_size, dc.synth_noise, seed);
        if (dc.synth_image_size != rc.model.image_size)
            for (Image& img : ds.images) img = pad_image(img, rc.model.image_size);
    } else {
        ds = train_split ? load_idx(dc.train_images, dc.train_labels, rc.model.image_size)
                         : load_idx(dc.test_images, dc.test_labels, rc.model.image_size);
    }
    apply_limit(ds, train_split ? dc.train_limit : dc.test_limit);
    if (ds.num_classes > rc.model.num_classes)
        throw std::runtime_error("dataset has " + std::to_string(ds.num_classes) +
                                 " classes but the model head has " +
                                 std::to_string(rc.model.num_classes));
    return ds;
}

inline std::ofstream open_artifact(const std::filesystem::path& p, const std::string& hash,
                                   bool binary = false) {
    std::ofstream out(p, binary ? std::ios::binary : std::ios::out);
    if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
    if (!binary) out << nlohmann::json{{"config_hash", hash}}.dump() << "\n";
    return out;
}

inline nlohmann::json metrics_json(const EpochMetrics& em) {
    // wall_seconds stays console-only on purpose
    return {{"epoch", em.epoch},
            {"lr", em.lr},
            {"train_loss", em.train_loss},
            {"train_acc", em.train_acc},
            {"test_acc", em.test_acc},
            {"rmse_mean", em.rmse_mean},
            {"rmse_active_mean", em.rmse_active_mean}};
}

}  // namespace detail

// Eight held-out mixed samples: layer-by-layer ratio trajectories plus a
// per-layer presence summary of the mean attention. Shared by train runs and
// the standalone diagnose command.
template <typename T>
void write_diagnostics(const ModelParams<T>& params, const Dataset& test, const RunConfig& rc,
                       const std::string& hash, const RunPaths& paths,
                       const EpochMetrics* final_epoch, bool dump_images) {
    std::ofstream out = detail::open_artifact(paths.diagnostics, hash);
    const ModelConfig& mc = params.cfg;
    const int unit = rc.train.mix_unit > 0 ? rc.train.mix_unit : mc.patch_size;
    const std::size_t n = test.size();
    const std::size_t count = std::min<std::size_t>(8, n);

    ForwardTrace<T> tm, ta, tb;
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t ia = k * n / count;
        std::size_t ib = ia;
        for (std::size_t step = 1; step < n; ++step) {
            const std::size_t cand = (ia + step) % n;
            if (test.labels[cand] != test.labels[ia]) {
                ib = cand;
                break;
            }
        }
        Rng mix_rng = Rng::derive(rc.train.seed, detail::kTagDiag, k);
        const MixedSample mixed =
            detail::sample_mix(test.images[ia], test.labels[ia], test.images[ib], test.labels[ib],
                               rc.train, unit, mix_rng);

        model_forward(params, mixed.image, tm);
        model_forward(params, test.images[ia], ta);
        model_forward(params, test.images[ib], tb);
        const LabelMatrix y0 = init_label_map(mixed.spec, mc.patch_size, mc.num_classes);
        const AlignedTarget aligned = align_forward(y0, tm.attention, mc.pooling);
        const RatioTrajectory traj = ratio_trajectory(tm, ta, tb, aligned, mixed.spec);

        nlohmann::json layers = nlohmann::json::array();
        for (std::size_t l = 0; l < traj.lambda_align.size(); ++l)
            layers.push_back({{"layer", l},
                              {"lambda_align", traj.lambda_align[l]},
                              {"lambda_similarity", traj.lambda_similarity[l]}});
        out << nlohmann::json{{"type", "trajectory"},
                              {"sample", k},
                              {"index_a", ia},
                              {"index_b", ib},
                              {"class_a", mixed.spec.class_a},
                              {"class_b", mixed.spec.class_b},
                              {"strategy", to_string(mixed.spec.strategy)},
                              {"lambda_mix", traj.lambda_mix},
                              {"layers", layers}}
                   .dump()
            << "\n";

        if (k == 0) {
            for (std::size_t l = 0; l < tm.attention.depth(); ++l) {
                std::vector<Matrix<double>> heads;
                for (const auto& h : tm.attention.layers[l]) heads.push_back(h.template cast<double>());
                const PresenceReport rep = token_presence(mean_head(heads));
                double lo = rep.presence[0], hi = rep.presence[0], sum = 0;
                for (double v : rep.presence) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                    sum += v;
                }
                out << nlohmann::json{{"type", "presence"},
                                      {"layer", l},
                                      {"min", lo},
                                      {"mean", sum / rep.presence.size()},
                                      {"max", hi},
                                      {"total", rep.total}}
                           .dump()
                    << "\n";
            }
        }
        if (dump_images) dump_mixed_sample(paths.samples, "sample_" + std::to_string(k), mixed);
    }

    if (final_epoch)
        out << nlohmann::json{{"type", "rmse"},
                              {"epoch", final_epoch->epoch},
                              {"mean", final_epoch->rmse_mean},
                              {"mean_active", final_epoch->rmse_active_mean}}
                   .dump()
            << "\n";
}

namespace detail {

template <typename T>
RunOutcome run_experiment_typed(const RunConfig& rc) {
    rc.model.validate();
    rc.train.validate();
    RunOutcome outcome;
    outcome.paths = run_paths(rc.out_dir);
    outcome.hash = config_hash(rc);
    std::filesystem::create_directories(outcome.paths.dir);

    {
        std::ofstream cfg(outcome.paths.config);
        if (!cfg) throw std::runtime_error("cannot open " + outcome.paths.config.string());
        cfg << serialize_run_config(rc);
    }

    const Dataset train_set = load_split(rc, true);
    const Dataset test_set = load_split(rc, false);
    std::printf("dataset: %zu train / %zu test, %d classes, %dx%d\n", train_set.size(),
                test_set.size(), rc.model.num_classes, rc.model.image_size, rc.model.image_size);
    std::fflush(stdout);

    std::ofstream metrics = open_artifact(outcome.paths.metrics, outcome.hash);
    auto on_epoch = [&](const EpochMetrics& em) {
        metrics << metrics_json(em).dump() << "\n";
        metrics.flush();
        std::printf("epoch %3d/%d  lr %.3e  loss %.4f  train %.3f  test %.3f  rmse %.4f  (%.1fs)\n",
                    em.epoch, rc.train.epochs, em.lr, em.train_loss, em.train_acc, em.test_acc,
                    em.rmse_mean, em.wall_seconds);
        std::fflush(stdout);
    };

    TrainResult<T> result =
        train_model<T>(rc.model, rc.train, train_set, test_set, rc.log_mixing, on_epoch);
    outcome.metrics = result.metrics;
    metrics.close();

    save_checkpoint(result.params, outcome.paths.checkpoint.string());

    if (rc.log_mixing) {
        std::ofstream ml = open_artifact(outcome.paths.mixlog, outcome.hash);
        for (const MixLogEntry& e : result.mix_log)
            ml << nlohmann::json{{"epoch", e.epoch},
                                 {"slot", e.slot},
                                 {"sample", e.sample},
                                 {"partner", e.partner},
                                 {"strategy", to_string(e.strategy)},
                                 {"lambda", e.lambda},
                                 {"class_a", e.class_a},
                                 {"class_b", e.class_b},
                                 {"rect", {e.rect.x, e.rect.y, e.rect.w, e.rect.h}}}
                      .dump()
               << "\n";
    }

    const EpochMetrics* last = outcome.metrics.empty() ? nullptr : &outcome.metrics.back();
    write_diagnostics(result.params, test_set, rc, outcome.hash, outcome.paths, last, false);
    return outcome;
}

}  // namespace detail

inline RunOutcome run_experiment(const RunConfig& rc) {
    return rc.precision == Precision::f64 ? detail::run_experiment_typed<double>(rc)
                                          : detail::run_experiment_typed<float>(rc);
}

// Re-derive the diagnostics (and sample dumps) from a saved checkpoint.
inline RunOutcome diagnose_checkpoint(const RunConfig& rc, const std::string& checkpoint_path) {
    RunOutcome outcome;
    outcome.paths = run_paths(rc.out_dir);
    outcome.hash = config_hash(rc);
    std::filesystem::create_directories(outcome.paths.dir);

    const ModelParams<double> params = load_checkpoint<double>(checkpoint_path);
    if (params.cfg.image_size != rc.model.image_size ||
        params.cfg.num_classes != rc.model.num_classes)
        throw std::runtime_error("checkpoint " + checkpoint_path + " was trained as " +
                                 std::to_string(params.cfg.image_size) + "px/" +
                                 std::to_string(params.cfg.num_classes) +
                                 " classes, config says " + std::to_string(rc.model.image_size) +
                                 "px/" + std::to_string(rc.model.num_classes));

    RunConfig effective = rc;
    effective.model = params.cfg;
    const Dataset test_set = detail::load_split(effective, false);
    write_diagnostics(params, test_set, effective, outcome.hash, outcome.paths, nullptr, true);
    std::printf("diagnostics written to %s\n", outcome.paths.diagnostics.string().c_str());
    return outcome;
}

}  // namespace tla
