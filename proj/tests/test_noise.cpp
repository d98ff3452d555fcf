#include "doctest.h"

#include "qnoise/noise.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>

using namespace qnoise;
using qnoise::testing::gaussian_matrix;
using qnoise::testing::random_matrix;

namespace {

bool is_codebook_member(std::span<const float> v, const Codebook& cb) {
    for (std::size_t k = 0; k < cb.k; ++k) {
        if (std::equal(v.begin(), v.end(), cb.centroid(k).begin())) return true;
    }
    return false;
}

} // namespace

TEST_CASE("select_blocks") {
    Rng rng(1);
    const BlockGrid g = make_grid(64, 32, {4, 1});
    CHECK(select_blocks(g, 0.0, rng).count() == 0);
    CHECK(select_blocks(g, 1.0, rng).count() == g.blocks());

    const BlockGrid big = make_grid(1000, 100, {1, 1});
    const double frac = double(select_blocks(big, 0.5, rng).count()) / double(big.blocks());
    CHECK(std::fabs(frac - 0.5) <= 0.01);
    CHECK_THROWS(select_blocks(g, 1.2, rng));
}

TEST_CASE("apply_noise leaves unselected blocks untouched") {
    Rng rng(2);
    const Matrix w = gaussian_matrix(rng, 16, 8);
    const BlockLayout layout{4, 2};
    const BlockGrid g = make_grid(16, 8, layout);
    CHECK(bitwise_equal(apply_noise(w, layout, BlockMask::none(g), make_phi_proxy()), w));
    CHECK(bitwise_equal(apply_noise(w, layout, BlockMask::all(g), make_phi_proxy()), Matrix(16, 8)));

    for (int t = 0; t < 20; ++t) {
        const BlockMask mask = select_blocks(g, 0.4, rng);
        const Matrix noisy = apply_noise(w, layout, mask, make_phi_proxy());
        for_each_block_entry(g, [&](std::size_t b, std::size_t, std::size_t r, std::size_t c) {
            if (mask.selected[b]) {
                CHECK(noisy(r, c) == 0.0f);
            } else {
                CHECK(noisy(r, c) == w(r, c));
            }
        });
    }
    CHECK_THROWS_AS(apply_noise(w, layout, BlockMask::none(make_grid(16, 8, {2, 2})), make_phi_proxy()),
                    DimensionError);
}

TEST_CASE("full-mask intN noise equals whole-tensor quantization") {
    Rng rng(3);
    for (int bits : {4, 8}) {
        const Matrix w = gaussian_matrix(rng, 12, 10);
        const NoiseOperator op(NoiseSpec::int_n(bits, 1.0));
        const Matrix noisy = op.apply(w, BlockMask::all(op.grid_for(w)));
        const Matrix qat = quantize_tensor(w, calibrate_minmax(w, bits)).dequantize();
        CHECK(bitwise_equal(noisy, qat));
        Rng r2(9);
        CHECK(bitwise_equal(op.apply(w, r2), qat));
    }
}

TEST_CASE("phi_int_n") {
    const QuantParams q{static_cast<float>(2.0 / 255.0), -128, 8};
    std::vector<float> block = {0.0f, 0.5f};
    phi_int_n(block, q);
    CHECK(block[0] == 0.0f);
    CHECK(block[1] == doctest::Approx(128.0 / 255.0).epsilon(1e-6));

    const QuantParams unit{0.25f, -4, 4};
    std::vector<float> aligned = {-1.0f, 0.25f, 2.0f};
    const auto before = aligned;
    phi_int_n(aligned, unit);
    CHECK(aligned == before);
}

TEST_CASE("phi_pq returns codebook members") {
    Codebook cb;
    cb.k = 2;
    cb.d = 2;
    cb.centroids = {0, 0, 4, 4};
    std::vector<float> b1 = {4, 4};
    phi_pq(b1, cb);
    CHECK(b1 == std::vector<float>{4, 4});
    std::vector<float> b2 = {1, 1};
    phi_pq(b2, cb);
    CHECK(b2 == std::vector<float>{0, 0});

    Rng rng(4);
    const Matrix w = gaussian_matrix(rng, 16, 8);
    const PqResult pq = pq_quantize(w, {4, 1}, 5, 10, rng);
    const NoiseOperator op(NoiseSpec::pq_exact({4, 1}, 5, 0.5), &pq.tensor.codebook);
    BlockMask mask;
    const Matrix noisy = op.apply(w, rng, &mask);
    const SubvectorSet blocks = split_blocks(noisy, {4, 1});
    const SubvectorSet orig = split_blocks(w, {4, 1});
    for (std::size_t b = 0; b < blocks.count(); ++b) {
        if (mask.selected[b]) {
            CHECK(is_codebook_member(blocks[b], pq.tensor.codebook));
        } else {
            CHECK(std::equal(blocks[b].begin(), blocks[b].end(), orig[b].begin()));
        }
    }
    Codebook wrong = pq.tensor.codebook;
    wrong.d = 2;
    CHECK_THROWS(NoiseOperator(NoiseSpec::pq_exact({4, 1}, 5, 0.5), &wrong));
    CHECK_THROWS(NoiseOperator(NoiseSpec::pq_exact({4, 1}, 5, 0.5)));
}

TEST_CASE("phi_proxy zeroes blocks") {
    std::vector<float> b = {1.5f, -2.0f, 3.0f};
    phi_proxy(b);
    CHECK(b == std::vector<float>{0, 0, 0});
    phi_int_n(b, QuantParams{0.3f, -7, 4});
    CHECK(b == std::vector<float>{0, 0, 0});
}

TEST_CASE("composition") {
    Rng data(5);
    const Matrix w = gaussian_matrix(data, 16, 8);
    const BlockLayout layout{4, 1};

    NoiseSpec proxy_spec = NoiseSpec::pq_proxy(layout, 0.5);
    NoiseSpec int_spec = NoiseSpec::int_n(4, 0.5);
    int_spec.layout = layout;
    const NoiseOperator proxy(proxy_spec);
    const NoiseOperator int4(int_spec);

    // A rate-0 operator composed on the outside leaves φ's effect alone.
    const NoiseOperator silent(NoiseSpec::pq_proxy(layout, 0.0));
    Rng a(11), b(11);
    CHECK(bitwise_equal(compose(silent, int4).apply(w, a), int4.apply(w, b)));

    for (int t = 0; t < 50; ++t) {
        const BlockMask mask = select_blocks(make_grid(16, 8, layout), 0.5, data);
        const BlockMask masks[] = {mask, mask};
        const Matrix proxy_last = compose(proxy, int4).apply(w, masks);
        const Matrix int_last = compose(int4, proxy).apply(w, masks);
        CHECK(bitwise_equal(proxy_last, int_last));
        const BlockGrid g = make_grid(16, 8, layout);
        for_each_block_entry(g, [&](std::size_t blk, std::size_t, std::size_t r, std::size_t c) {
            CHECK(int_last(r, c) == (mask.selected[blk] ? 0.0f : w(r, c)));
        });
    }

    std::vector<BlockMask> drawn;
    Rng c(12);
    compose(proxy, int4).apply(w, c, &drawn);
    CHECK(drawn.size() == 2);
    CHECK(drawn[0].selected.size() == 32);
}

TEST_CASE("layerdrop_mask") {
    Rng rng(6);
    const auto none = layerdrop_mask(10, 0.0, rng);
    CHECK(std::none_of(none.begin(), none.end(), [](bool v) { return v; }));
    const auto all = layerdrop_mask(10, 1.0, rng);
    CHECK(std::all_of(all.begin(), all.end(), [](bool v) { return v; }));
    const auto many = layerdrop_mask(100000, 0.2, rng);
    const double frac = double(std::count(many.begin(), many.end(), true)) / 1e5;
    CHECK(std::fabs(frac - 0.2) <= 0.01);
    CHECK_THROWS(layerdrop_mask(3, -0.5, rng));
}

TEST_CASE("noise spec validation") {
    CHECK_THROWS(validate(NoiseSpec::int_n(3, 0.1)));
    CHECK_THROWS(validate(NoiseSpec::pq_proxy({4, 1}, 1.5)));
    CHECK_FALSE(NoiseSpec::layerdrop(0.2).ste);
    CHECK(NoiseSpec::pq_proxy({4, 1}, 0.2).ste);
    CHECK_THROWS(NoiseOperator(NoiseSpec::layerdrop(0.2)));
    CHECK(noise_kind_from_string("proxy") == NoiseKind::pq_proxy);
    CHECK_THROWS(noise_kind_from_string("bogus"));
}
