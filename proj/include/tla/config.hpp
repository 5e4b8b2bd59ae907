// Flat `key = value` run configuration. One canonical serialization exists so
// a config can be hashed, written next to the run artifacts, and reloaded
// losslessly.
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "tla/mixing.hpp"
#include "tla/trainer.hpp"
#include "tla/vit.hpp"

namespace tla {

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline const char* to_string(Pooling p) {
    return p == Pooling::class_token ? "class_token" : "global_pool";
}

struct DataConfig {
    std::string source = "synth";  // synth | idx
    std::string train_images, train_labels, test_images, test_labels;
    int train_limit = 0;  // 0 keeps everything
    int test_limit = 0;
    int synth_classes = 10;
    int synth_train_per_class = 1000;
    int synth_test_per_class = 200;
    int synth_image_size = 28;
    double synth_noise = 0.25;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    Precision precision = Precision::f32;
    bool log_mixing = false;
    std::string out_dir = "out";
};

// ---- value parsers ----------------------------------------------------------

inline MixStrategy parse_mix_strategy(const std::string& s) {
    if (s == "cutmix") return MixStrategy::cutmix;
    if (s == "mixup") return MixStrategy::mixup;
    if (s == "random") return MixStrategy::random_patch;
    if (s == "block") return MixStrategy::block_wise;
    if (s == "none") return MixStrategy::none;
    throw std::invalid_argument("unknown mix strategy '" + s +
                                "' (want cutmix|mixup|random|block|none)");
}

inline bool parse_on_off(const std::string& s) {
    if (s == "on") return true;
    if (s == "off") return false;
    throw std::invalid_argument("expected on|off, got '" + s + "'");
}

inline Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw std::invalid_argument("expected f32|f64, got '" + s + "'");
}

inline Pooling parse_pooling(const std::string& s) {
    if (s == "class_token") return Pooling::class_token;
    if (s == "global_pool") return Pooling::global_pool;
    throw std::invalid_argument("expected class_token|global_pool, got '" + s + "'");
}

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd_momentum;
    if (s == "adamw") return OptimizerKind::adamw;
    throw std::invalid_argument("expected sgd|adamw, got '" + s + "'");
}

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] inline void config_fail(int line, const std::string& msg) {
    throw std::runtime_error("config line " + std::to_string(line) + ": " + msg);
}

inline long long parse_ll(const std::string& v, int line) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        config_fail(line, "expected an integer, got '" + v + "'");
    return out;
}

inline std::uint64_t parse_u64(const std::string& v, int line) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        config_fail(line, "expected an unsigned integer, got '" + v + "'");
    return out;
}

inline double parse_f64(const std::string& v, int line) {
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        config_fail(line, "expected a number, got '" + v + "'");
    return out;
}

inline std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw std::logic_error("fmt_double: to_chars failed");
    return std::string(buf, p);
}

inline void apply_key(RunConfig& rc, const std::string& key, const std::string& val, int line) {
    auto as_int = [&] { return static_cast<int>(parse_ll(val, line)); };
    auto enum_or_fail = [&](auto&& parse) {
        try {
            return parse(val);
        } catch (const std::invalid_argument& e) {
            config_fail(line, e.what());
        }
    };

    if (key == "model.image_size") rc.model.image_size = as_int();
    else if (key == "model.patch_size") rc.model.patch_size = as_int();
    else if (key == "model.channels") rc.model.channels = as_int();
    else if (key == "model.depth") rc.model.depth = as_int();
    else if (key == "model.dim") rc.model.dim = as_int();
    else if (key == "model.heads") rc.model.heads = as_int();
    else if (key == "model.mlp_ratio") rc.model.mlp_ratio = as_int();
    else if (key == "model.classes") rc.model.num_classes = as_int();
    else if (key == "model.pooling") rc.model.pooling = enum_or_fail(parse_pooling);
    else if (key == "train.epochs") rc.train.epochs = as_int();
    else if (key == "train.batch_size") rc.train.batch_size = as_int();
    else if (key == "train.lr") rc.train.lr = parse_f64(val, line);
    else if (key == "train.weight_decay") rc.train.weight_decay = parse_f64(val, line);
    else if (key == "train.momentum") rc.train.momentum = parse_f64(val, line);
    else if (key == "train.optimizer") rc.train.optimizer = enum_or_fail(parse_optimizer);
    else if (key == "train.mix") rc.train.mix = enum_or_fail(parse_mix_strategy);
    else if (key == "train.mixup_alpha") rc.train.mixup_alpha = parse_f64(val, line);
    else if (key == "train.random_mix_prob") rc.train.random_mix_prob = parse_f64(val, line);
    else if (key == "train.block_budget") rc.train.block_budget = parse_f64(val, line);
    else if (key == "train.mix_unit") rc.train.mix_unit = as_int();
    else if (key == "train.tl_align") rc.train.tl_align = enum_or_fail(parse_on_off);
    else if (key == "train.label_smoothing") rc.train.label_smoothing = parse_f64(val, line);
    else if (key == "train.seed") rc.train.seed = parse_u64(val, line);
    else if (key == "train.precision") rc.precision = enum_or_fail(parse_precision);
    else if (key == "train.log_mixing") rc.log_mixing = enum_or_fail(parse_on_off);
    else if (key == "data.source") {
        if (val != "synth" && val != "idx")
            config_fail(line, "data.source must be synth|idx, got '" + val + "'");
        rc.data.source = val;
    }
    else if (key == "data.train_images") rc.data.train_images = val;
    else if (key == "data.train_labels") rc.data.train_labels = val;
    else if (key == "data.test_images") rc.data.test_images = val;
    else if (key == "data.test_labels") rc.data.test_labels = val;
    else if (key == "data.train_limit") rc.data.train_limit = as_int();
    else if (key == "data.test_limit") rc.data.test_limit = as_int();
    else if (key == "data.classes") rc.data.synth_classes = as_int();
    else if (key == "data.train_per_class") rc.data.synth_train_per_class = as_int();
    else if (key == "data.test_per_class") rc.data.synth_test_per_class = as_int();
    else if (key == "data.image_size") rc.data.synth_image_size = as_int();
    else if (key == "data.noise") rc.data.synth_noise = parse_f64(val, line);
    else if (key == "out.dir") rc.out_dir = val;
    else config_fail(line, "unknown key '" + key + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig rc;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string stripped = detail::trim(raw);
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            detail::config_fail(line, "expected 'key = value', got '" + stripped + "'");
        const std::string key = detail::trim(stripped.substr(0, eq));
        const std::string val = detail::trim(stripped.substr(eq + 1));
        if (key.empty()) detail::config_fail(line, "empty key");
        detail::apply_key(rc, key, val, line);
    }
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config " + path + ": cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

// Canonical form: fixed key order, shortest round-trip floats. parse of the
// output reproduces the struct exactly.
inline std::string serialize_run_config(const RunConfig& rc) {
    std::ostringstream o;
    auto kv = [&](const char* k, const std::string& v) { o << k << " = " << v << "\n"; };
    auto kvi = [&](const char* k, long long v) { kv(k, std::to_string(v)); };
    auto kvd = [&](const char* k, double v) { kv(k, detail::fmt_double(v)); };
    auto kvb = [&](const char* k, bool v) { kv(k, v ? "on" : "off"); };

    kvi("model.image_size", rc.model.image_size);
    kvi("model.patch_size", rc.model.patch_size);
    kvi("model.channels", rc.model.channels);
    kvi("model.depth", rc.model.depth);
    kvi("model.dim", rc.model.dim);
    kvi("model.heads", rc.model.heads);
    kvi("model.mlp_ratio", rc.model.mlp_ratio);
    kvi("model.classes", rc.model.num_classes);
    kv("model.pooling", to_string(rc.model.pooling));
    kvi("train.epochs", rc.train.epochs);
    kvi("train.batch_size", rc.train.batch_size);
    kvd("train.lr", rc.train.lr);
    kvd("train.weight_decay", rc.train.weight_decay);
    kvd("train.momentum", rc.train.momentum);
    kv("train.optimizer", to_string(rc.train.optimizer));
    kv("train.mix", to_string(rc.train.mix));
    kvd("train.mixup_alpha", rc.train.mixup_alpha);
    kvd("train.random_mix_prob", rc.train.random_mix_prob);
    kvd("train.block_budget", rc.train.block_budget);
    kvi("train.mix_unit", rc.train.mix_unit);
    kvb("train.tl_align", rc.train.tl_align);
    kvd("train.label_smoothing", rc.train.label_smoothing);
    kv("train.seed", std::to_string(rc.train.seed));
    kv("train.precision", to_string(rc.precision));
    kvb("train.log_mixing", rc.log_mixing);
    kv("data.source", rc.data.source);
    kv("data.train_images", rc.data.train_images);
    kv("data.train_labels", rc.data.train_labels);
    kv("data.test_images", rc.data.test_images);
    kv("data.test_labels", rc.data.test_labels);
    kvi("data.train_limit", rc.data.train_limit);
    kvi("data.test_limit", rc.data.test_limit);
    kvi("data.classes", rc.data.synth_classes);
    kvi("data.train_per_class", rc.data.synth_train_per_class);
    kvi("data.test_per_class", rc.data.synth_test_per_class);
    kvi("data.image_size", rc.data.synth_image_size);
    kvd("data.noise", rc.data.synth_noise);
    kv("out.dir", rc.out_dir);
    return o.str();
}

// FNV-1a over the canonical serialization; stable across runs and platforms.
inline std::string config_hash(const RunConfig& rc) {
    const std::string s = serialize_run_config(rc);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    static const char* hexd = "0123456789abcdef";
    for (int i = 15; i >= 0; --i) {
        buf[i] = hexd[h & 0xF];
        h >>= 4;
    }
    buf[16] = '\0';
    return std::string(buf, 16);
}

}  // namespace tla
