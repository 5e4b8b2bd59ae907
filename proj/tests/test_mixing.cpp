#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tla/align.hpp"
#include "tla/mixing.hpp"
#include "tla/rng.hpp"

using namespace tla;

namespace {

Image constant_image(int size, float v) { return Image(size, size, 1, v); }

Image noise_image(int size, std::uint64_t seed) {
    Rng rng(seed);
    Image img(size, size, 1);
    for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

// what the blend is supposed to do, recomputed without going through MixSpec
float expected_pixel(float a, float b, double m) {
    return static_cast<float>(m * static_cast<double>(a) + (1.0 - m) * static_cast<double>(b));
}

}  // namespace

TEST_CASE("cutmix with a known rectangle") {
    const Image x1 = constant_image(14, 0.25f), x2 = constant_image(14, 0.75f);
    const MixedSample s = cutmix_with_rect(x1, x2, 1, 3, {3, 4, 7, 7});

    CHECK(s.spec.lambda == 1.0 - 49.0 / 196.0);  // exact: both sides integer-derived
    CHECK(s.spec.class_a == 1);
    CHECK(s.spec.class_b == 3);
    for (int y = 0; y < 14; ++y)
        for (int x = 0; x < 14; ++x) {
            const bool inside = x >= 3 && x < 10 && y >= 4 && y < 11;
            CHECK(s.spec.mask(y, x) == (inside ? 0.0 : 1.0));
            CHECK(s.image.at(y, x) == (inside ? 0.75f : 0.25f));
        }
}

TEST_CASE("cutmix degenerate rectangles") {
    const Image x1 = noise_image(16, 1), x2 = noise_image(16, 2);

    const MixedSample none = cutmix_with_rect(x1, x2, 0, 1, {5, 5, 0, 0});
    CHECK(none.spec.lambda == 1.0);
    CHECK(none.image.pixels == x1.pixels);

    const MixedSample full = cutmix_with_rect(x1, x2, 0, 1, {0, 0, 16, 16});
    CHECK(full.spec.lambda == 0.0);
    CHECK(full.image.pixels == x2.pixels);
}

TEST_CASE("cutmix clips rectangles that hang off the image") {
    const Image x1 = constant_image(14, 0.0f), x2 = constant_image(14, 1.0f);
    const MixedSample s = cutmix_with_rect(x1, x2, 0, 1, {-3, -3, 10, 10});
    CHECK(s.spec.rect.x == 0);
    CHECK(s.spec.rect.y == 0);
    CHECK(s.spec.rect.w == 7);
    CHECK(s.spec.rect.h == 7);
    CHECK(s.spec.lambda == 1.0 - 49.0 / 196.0);
}

TEST_CASE("sampled cutmix keeps lambda consistent with the pixel mask") {
    const Image x1 = noise_image(16, 3), x2 = noise_image(16, 4);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        const MixedSample s = cutmix(x1, x2, 0, 1, rng);
        long long zeros = 0;
        for (std::size_t i = 0; i < s.spec.mask.size(); ++i)
            if (s.spec.mask.data()[i] == 0.0) ++zeros;
        CHECK(zeros == s.spec.rect.area());
        CHECK(s.spec.lambda == 1.0 - static_cast<double>(zeros) / 256.0);
        CHECK(s.spec.lambda >= 0.0);
        CHECK(s.spec.lambda <= 1.0);

        // pixels match the mask bit for bit
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                CHECK(s.image.at(y, x) ==
                      expected_pixel(x1.at(y, x), x2.at(y, x), s.spec.mask(y, x)));
    }
}

TEST_CASE("mixup endpoints and midpoint") {
    const Image x1 = noise_image(12, 5), x2 = noise_image(12, 6);

    CHECK(mixup_with_lambda(x1, x2, 0, 1, 1.0).image.pixels == x1.pixels);
    CHECK(mixup_with_lambda(x1, x2, 0, 1, 0.0).image.pixels == x2.pixels);

    const MixedSample mid = mixup_with_lambda(x1, x2, 0, 1, 0.5);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x)
            CHECK(mid.image.at(y, x) == expected_pixel(x1.at(y, x), x2.at(y, x), 0.5));
    for (std::size_t i = 0; i < mid.spec.mask.size(); ++i)
        CHECK(mid.spec.mask.data()[i] == 0.5);

    CHECK_THROWS_AS(mixup_with_lambda(x1, x2, 0, 1, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(mixup_with_lambda(x1, x2, 0, 1, -0.1), std::invalid_argument);
}

TEST_CASE("mixup with alpha=1 draws a plain uniform lambda") {
    const Image x1 = constant_image(8, 0.f), x2 = constant_image(8, 1.f);
    for (std::uint64_t seed = 10; seed < 20; ++seed) {
        Rng sampler(seed);
        const MixedSample s = mixup(x1, x2, 0, 1, 1.0, sampler);
        Rng reference(seed);
        CHECK(s.spec.lambda == reference.uniform());
    }
    Rng rng(1);
    CHECK_THROWS_AS(mixup(x1, x2, 0, 1, 0.0, rng), std::invalid_argument);
}

TEST_CASE("random patch mix at the probability extremes") {
    const Image x1 = noise_image(16, 7), x2 = noise_image(16, 8);
    Rng rng(9);
    const MixedSample keep = random_patch_mix(x1, x2, 0, 1, 4, 0.0, rng);
    CHECK(keep.spec.lambda == 1.0);
    CHECK(keep.image.pixels == x1.pixels);

    const MixedSample swap = random_patch_mix(x1, x2, 0, 1, 4, 1.0, rng);
    CHECK(swap.spec.lambda == 0.0);
    CHECK(swap.image.pixels == x2.pixels);
}

TEST_CASE("random patch mix swaps whole cells") {
    const Image x1 = constant_image(16, 0.f), x2 = constant_image(16, 1.f);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const MixedSample s = random_patch_mix(x1, x2, 0, 1, 4, 0.5, rng);
        long long swapped_cells = 0;
        for (int cy = 0; cy < 4; ++cy)
            for (int cx = 0; cx < 4; ++cx) {
                const double first = s.spec.mask(cy * 4, cx * 4);
                for (int y = 0; y < 4; ++y)
                    for (int x = 0; x < 4; ++x)
                        CHECK(s.spec.mask(cy * 4 + y, cx * 4 + x) == first);
                if (first == 0.0) ++swapped_cells;
            }
        CHECK(s.spec.lambda == 1.0 - static_cast<double>(swapped_cells) / 16.0);
    }
}

TEST_CASE("block mix hits its area budget within the sampler's slack") {
    const Image x1 = constant_image(32, 0.f), x2 = constant_image(32, 1.f);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const MixedSample s = block_wise_mix(x1, x2, 0, 1, 4, 0.25, rng);  // 8x8 grid
        CHECK(s.spec.lambda >= 0.70);
        CHECK(s.spec.lambda <= 0.80);
        // mask stays cell-aligned
        for (int cy = 0; cy < 8; ++cy)
            for (int cx = 0; cx < 8; ++cx) {
                const double first = s.spec.mask(cy * 4, cx * 4);
                for (int y = 0; y < 4; ++y)
                    for (int x = 0; x < 4; ++x) REQUIRE(s.spec.mask(cy * 4 + y, cx * 4 + x) == first);
            }
    }
    Rng rng(4);
    const MixedSample zero = block_wise_mix(x1, x2, 0, 1, 4, 0.0, rng);
    CHECK(zero.spec.lambda == 1.0);
    CHECK(zero.image.pixels == x1.pixels);
}

TEST_CASE("mix none passes the image through") {
    const Image x1 = noise_image(16, 11);
    const MixedSample s = mix_none(x1, 2);
    CHECK(s.image.pixels == x1.pixels);
    CHECK(s.spec.lambda == 1.0);
    CHECK(s.spec.class_a == 2);
    CHECK(s.spec.class_b == 2);
}

TEST_CASE("original target splits mass by lambda") {
    MixSpec spec;
    spec.class_a = 1;
    spec.class_b = 3;
    spec.lambda = 0.75;
    const Matrix<double> t = original_target(spec, 5);
    CHECK(t(0, 0) == 0.0);
    CHECK(t(0, 1) == 0.75);
    CHECK(t(0, 3) == 0.25);

    spec.class_b = 1;  // self-pairing collapses to a one-hot
    CHECK(original_target(spec, 5)(0, 1) == 1.0);

    spec.class_b = 7;
    CHECK_THROWS_AS(original_target(spec, 5), std::invalid_argument);
}

TEST_CASE("label map for an axis-aligned cutmix") {
    const Image x1 = constant_image(16, 0.f), x2 = constant_image(16, 1.f);
    // straddles the two top patches: patch 0 keeps 48/64 pixels, patch 1 keeps 16/64
    const MixedSample s = cutmix_with_rect(x1, x2, 0, 2, {6, 0, 8, 8});
    const LabelMatrix y = init_label_map(s.spec, 8, 3);
    REQUIRE(y.rows() == 5);  // class token + 4 patches
    REQUIRE(y.cols() == 3);

    CHECK(y(0, 0) == s.spec.lambda);
    CHECK(y(0, 2) == 1.0 - s.spec.lambda);
    CHECK(y(1, 0) == 0.75);
    CHECK(y(1, 2) == 0.25);
    CHECK(y(2, 0) == 0.25);
    CHECK(y(2, 2) == 0.75);
    CHECK(y(3, 0) == 1.0);  // bottom patches untouched
    CHECK(y(4, 0) == 1.0);
    for (std::size_t r = 0; r < y.rows(); ++r) CHECK(y(r, 1) == 0.0);
}

TEST_CASE("label map when the crop swallows a full patch") {
    const Image x1 = constant_image(16, 0.f), x2 = constant_image(16, 1.f);
    const MixedSample s = cutmix_with_rect(x1, x2, 1, 2, {8, 0, 8, 8});  // exactly patch 1
    const LabelMatrix y = init_label_map(s.spec, 8, 4);
    CHECK(y(2, 2) == 1.0);  // the swapped patch is a one-hot of class b
    CHECK(y(1, 1) == 1.0);
    CHECK(y(3, 1) == 1.0);
    CHECK(y(4, 1) == 1.0);
    CHECK(y(0, 1) == 0.75);
    CHECK(y(0, 2) == 0.25);
}

TEST_CASE("label map rows always sum to exactly one") {
    const Image x1 = noise_image(16, 20), x2 = noise_image(16, 21);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        MixedSample s;
        switch (seed % 4) {
            case 0: s = cutmix(x1, x2, 0, 1, rng); break;
            case 1: s = mixup(x1, x2, 0, 1, 1.0, rng); break;
            case 2: s = random_patch_mix(x1, x2, 0, 1, 2, 0.4, rng); break;
            default: s = block_wise_mix(x1, x2, 0, 1, 2, 0.3, rng); break;
        }
        const LabelMatrix y = init_label_map(s.spec, 4, 3);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double sum = 0;
            for (std::size_t j = 0; j < y.cols(); ++j) sum += y(r, j);
            REQUIRE(sum == 1.0);
        }
    }
}

TEST_CASE("spatial label mass averages back to lambda") {
    const Image x1 = noise_image(16, 22), x2 = noise_image(16, 23);
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        Rng rng(seed);
        const MixedSample s = seed % 2 == 0 ? cutmix(x1, x2, 0, 1, rng)
                                            : random_patch_mix(x1, x2, 0, 1, 4, 0.5, rng);
        const LabelMatrix y = init_label_map(s.spec, 4, 2);
        double mass = 0;
        for (std::size_t r = 1; r < y.rows(); ++r) mass += y(r, 0);
        CHECK(std::abs(mass / (y.rows() - 1) - s.spec.lambda) < 1e-9);
    }
}

TEST_CASE("mixup label map is constant across rows") {
    const Image x1 = constant_image(16, 0.f), x2 = constant_image(16, 1.f);
    const MixedSample s = mixup_with_lambda(x1, x2, 0, 3, 0.375);
    const LabelMatrix y = init_label_map(s.spec, 8, 4);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        CHECK(y(r, 0) == 0.375);
        CHECK(y(r, 3) == 0.625);
    }
}

TEST_CASE("label map input validation") {
    const Image x1 = constant_image(16, 0.f), x2 = constant_image(16, 1.f);
    const MixedSample s = cutmix_with_rect(x1, x2, 0, 1, {0, 0, 4, 4});

    MixSpec bad_class = s.spec;
    bad_class.class_b = 9;
    CHECK_THROWS_AS(init_label_map(bad_class, 8, 3), std::invalid_argument);

    CHECK_THROWS_AS(init_label_map(s.spec, 5, 3), std::invalid_argument);  // 16 % 5 != 0
    CHECK_THROWS_AS(init_label_map(s.spec, 0, 3), std::invalid_argument);
}

TEST_CASE("mixed pairs must share a shape") {
    const Image a(16, 16, 1), b(12, 16, 1);
    Rng rng(1);
    CHECK_THROWS_AS(cutmix(a, b, 0, 1, rng), std::invalid_argument);
    CHECK_THROWS_AS(mixup_with_lambda(a, b, 0, 1, 0.5), std::invalid_argument);
}

TEST_CASE("sample dump writes a readable pgm and sidecar") {
    const Image x1 = noise_image(16, 30), x2 = noise_image(16, 31);
    Rng rng(2);
    const MixedSample s = cutmix(x1, x2, 0, 1, rng);
    const auto dir = std::filesystem::temp_directory_path() / "tla_mix_dump_test";
    dump_mixed_sample(dir, "probe", s);

    std::ifstream pgm(dir / "probe.pgm", std::ios::binary);
    REQUIRE(pgm.good());
    std::string magic;
    pgm >> magic;
    CHECK(magic == "P5");

    std::ifstream txt(dir / "probe.txt");
    REQUIRE(txt.good());
    std::string body((std::istreambuf_iterator<char>(txt)), std::istreambuf_iterator<char>());
    CHECK(body.find("cutmix") != std::string::npos);
    std::filesystem::remove_all(dir);
}
