#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tla/checkpoint.hpp"

using namespace tla;

namespace {

std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("checkpoint round trip preserves every tensor bit-exactly") {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.depth = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.num_classes = 5;
    Rng rng(123);
    ModelParams<float> p = init_params<float>(cfg, rng);

    const auto path = temp_file("tla_ckpt_roundtrip.bin");
    save_checkpoint(p, path.string());
    ModelParams<float> q = load_checkpoint<float>(path.string());

    CHECK(q.cfg.dim == cfg.dim);
    CHECK(q.cfg.num_classes == cfg.num_classes);
    CHECK(q.cfg.pooling == cfg.pooling);
    for_each_tensor(p, [&](const std::string& name, const Mat32& m) {
        Mat32* other = nullptr;
        for_each_tensor(q, [&](const std::string& oname, Mat32& om) {
            if (oname == name) other = &om;
        });
        REQUIRE(other != nullptr);
        REQUIRE(max_abs_diff(m, *other) == 0.0f);
    });
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint survives an f64 wash") {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.depth = 1;
    cfg.dim = 8;
    cfg.heads = 1;
    cfg.num_classes = 2;
    cfg.pooling = Pooling::global_pool;
    Rng rng(9);
    ModelParams<double> p = init_params<double>(cfg, rng);
    const auto path = temp_file("tla_ckpt_f64.bin");
    save_checkpoint(p, path.string());
    ModelParams<double> q = load_checkpoint<double>(path.string());
    CHECK(q.cfg.pooling == Pooling::global_pool);
    CHECK(max_abs_diff(p.embed, q.embed) == 0.0);
    CHECK(max_abs_diff(p.layers[0].w2, q.layers[0].w2) == 0.0);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects garbage") {
    const auto path = temp_file("tla_ckpt_bad.bin");

    SECTION("wrong magic") {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE" << std::string(64, '\0');
        out.close();
        CHECK_THROWS_WITH(load_checkpoint<float>(path.string()),
                          Catch::Matchers::ContainsSubstring("magic"));
    }

    SECTION("truncated file reports the offset") {
        ModelConfig cfg;
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.depth = 1;
        cfg.dim = 8;
        cfg.heads = 1;
        cfg.num_classes = 2;
        Rng rng(1);
        ModelParams<float> p = init_params<float>(cfg, rng);
        save_checkpoint(p, path.string());
        const auto full = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, full / 2);
        CHECK_THROWS_WITH(load_checkpoint<float>(path.string()),
                          Catch::Matchers::ContainsSubstring("truncated") &&
                              Catch::Matchers::ContainsSubstring("@"));
    }

    std::filesystem::remove(path);
}
