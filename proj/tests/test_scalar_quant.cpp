#include "doctest.h"

#include "qnoise/scalar_quant.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

using namespace qnoise;
using qnoise::testing::gaussian_matrix;
using qnoise::testing::random_matrix;

namespace {

// |w − fq(w)| ≤ s/2, plus the float rounding of the stored scale and output.
bool within_half_step(float w, const QuantParams& q) {
    const double err = std::fabs(double(w) - double(fake_quant(w, q)));
    const double s = q.scale;
    const double slack = 1e-6 * (std::fabs(double(w)) + s * (std::fabs(double(q.zero_point)) + q.levels()));
    return err <= 0.5 * s + slack;
}

// Exhaustive search over the stride-8 clip grid, scored on the raw values.
double oracle_best_clip_error(const Matrix& w, int bits, double* best_hi) {
    const double lo = w.min_value(), hi = w.max_value();
    const double width = (hi - lo) / 2048.0;
    double best = std::numeric_limits<double>::infinity();
    for (int start = 0; start < 2048; start += 8) {
        for (int end = start + 8; end <= 2048; end += 8) {
            const double clo = start == 0 ? lo : lo + start * width;
            const double chi = end == 2048 ? hi : lo + end * width;
            const QuantParams q = params_for_range(clo, chi, bits);
            double err = 0.0;
            for (float v : w.values()) {
                const double d = double(v) - double(fake_quant(v, q));
                err += d * d;
                if (err >= best) break;
            }
            if (err < best) {
                best = err;
                *best_hi = chi;
            }
        }
    }
    return best;
}

} // namespace

TEST_CASE("calibrate_minmax examples") {
    const QuantParams q = calibrate_minmax(Matrix::from_rows({{-1, 0, 1}}), 8);
    CHECK(q.scale == doctest::Approx(2.0 / 255.0).epsilon(1e-7));
    CHECK(q.zero_point == -128);
    CHECK(q.bits == 8);

    const QuantParams zero = calibrate_minmax(Matrix(3, 3, 0.0f), 8);
    CHECK(zero.scale == kDegenerateScale);
    CHECK(zero.zero_point == 0);
    CHECK(fake_quant(0.0f, zero) == 0.0f);

    Matrix ramp(1, 16);
    for (int i = 0; i < 16; ++i) ramp(0, i) = float(i);
    const QuantParams q4 = calibrate_minmax(ramp, 4);
    CHECK(q4.scale == 1.0f);
    CHECK(q4.zero_point == 0);
    for (int i = 0; i < 16; ++i) CHECK(grid_index(float(i), q4) == i);

    CHECK_THROWS(calibrate_minmax(Matrix(), 8));
    CHECK_THROWS(calibrate_minmax(ramp, 3));
}

TEST_CASE("constant tensors are recovered exactly") {
    for (float v : {2.5f, -0.75f, 1e-3f}) {
        const QuantParams q = calibrate_minmax(Matrix(2, 2, v), 8);
        CHECK(q.scale == std::fabs(v));
        CHECK(fake_quant(v, q) == v);
        CHECK(fake_quant(0.0f, q) == 0.0f);
    }
}

TEST_CASE("fake_quant examples") {
    for (int bits : {4, 8}) {
        const int levels = 1 << bits;
        for (int z = -(levels - 1); z <= 0; ++z) {
            for (float s : {1e-3f, 0.37f, 2.0f}) {
                CHECK(fake_quant(0.0f, QuantParams{s, z, bits}) == 0.0f);
            }
        }
    }
    const QuantParams q{static_cast<float>(2.0 / 255.0), -128, 8};
    // round(0.5 / s + z) = round(63.75 - 128) = -64, so the grid index is 64.
    CHECK(std::round(0.5 / double(q.scale) + q.zero_point) == -64.0);
    CHECK(grid_index(0.5f, q) == 64);
    CHECK(fake_quant(0.5f, q) == doctest::Approx(128.0 / 255.0).epsilon(1e-6));
}

TEST_CASE("fake_quant is idempotent and monotone") {
    Rng rng(17);
    for (int i = 0; i < 1000; ++i) {
        const double lo = rng.uniform(-5.0, 1.0);
        const QuantParams q = params_for_range(lo, lo + rng.uniform(0.01, 6.0), (i % 2) ? 4 : 8);
        const float w = static_cast<float>(rng.uniform(-8.0, 8.0));
        const float once = fake_quant(w, q);
        CHECK(fake_quant(once, q) == once);
    }
    std::vector<float> ws(2000);
    for (float& w : ws) w = static_cast<float>(rng.uniform(-3.0, 3.0));
    std::sort(ws.begin(), ws.end());
    const QuantParams q = params_for_range(-2.0, 2.5, 4);
    for (std::size_t i = 1; i < ws.size(); ++i) {
        CHECK(fake_quant(ws[i - 1], q) <= fake_quant(ws[i], q));
    }
}

TEST_CASE("grid bound holds within the calibrated range") {
    Rng rng(23);
    for (int t = 0; t < 200; ++t) {
        const Matrix w = random_matrix(rng, 4, 8, rng.uniform(-3, 0), rng.uniform(0.1, 3));
        for (int bits : {4, 8}) {
            const QuantParams q = calibrate_minmax(w, bits);
            for (float v : w.values()) CHECK(within_half_step(v, q));
        }
    }
}

TEST_CASE("out-of-range inputs clamp to the code range") {
    const QuantParams q = params_for_range(-1.0, 1.0, 8);
    CHECK(grid_index(50.0f, q) == q.index_max());
    CHECK(grid_index(-50.0f, q) == q.index_min());
}

TEST_CASE("histogram calibration beats or matches MinMax") {
    Rng rng(29);
    const Matrix uniform = random_matrix(rng, 32, 32);
    for (int bits : {4, 8}) {
        CHECK(quantization_error_sq(uniform, calibrate_histogram(uniform, bits)) <=
              quantization_error_sq(uniform, calibrate_minmax(uniform, bits)));
    }

    Matrix grid(1, 16);
    for (int i = 0; i < 16; ++i) grid(0, i) = 0.5f * float(i) - 2.0f;
    CHECK(quantization_error_sq(grid, calibrate_histogram(grid, 4)) == 0.0);
}

TEST_CASE("histogram calibration clips a single extreme outlier") {
    Rng rng(31);
    Matrix w = random_matrix(rng, 1, 40001);
    w(0, 20000) = 100.0f;
    const QuantParams hist = calibrate_histogram(w, 4);
    const QuantParams mm = calibrate_minmax(w, 4);
    const double hist_err = quantization_error_sq(w, hist);
    const double mm_err = quantization_error_sq(w, mm);
    double oracle_hi = 0.0;
    const double oracle = oracle_best_clip_error(w, 4, &oracle_hi);

    CHECK(oracle_hi < 100.0);
    CHECK(double(hist.index_max()) * hist.scale < 50.0);
    CHECK(hist_err < mm_err);
    // Bin centers stand in for the values, so the search lands near, not on, the oracle.
    CHECK(hist_err <= 1.01 * oracle);
}

TEST_CASE("per-channel calibration") {
    const Matrix one_row = Matrix::from_rows({{-0.5f, 0.25f, 3.0f}});
    const ChannelQuantParams single = calibrate_per_channel(one_row, 8, 0);
    REQUIRE(single.per_channel.size() == 1);
    CHECK(single.per_channel[0] == calibrate_minmax(one_row, 8));

    Matrix two(2, 11);
    for (int i = 0; i <= 10; ++i) {
        two(0, i) = 0.1f * float(i);
        two(1, i) = 10.0f * float(i);
    }
    const ChannelQuantParams pc = calibrate_per_channel(two, 4, 0);
    REQUIRE(pc.per_channel.size() == 2);
    CHECK(pc.per_channel[0].scale != pc.per_channel[1].scale);
    const QuantParams tensor = calibrate_minmax(two, 4);
    const Matrix fq_pc = fake_quant(two, pc);
    const Matrix fq_t = fake_quant(two, tensor);
    for (std::size_t r = 0; r < 2; ++r) {
        double e_pc = 0, e_t = 0;
        for (std::size_t c = 0; c < two.cols(); ++c) {
            e_pc += std::pow(double(two(r, c)) - fq_pc(r, c), 2);
            e_t += std::pow(double(two(r, c)) - fq_t(r, c), 2);
        }
        CHECK(e_pc <= e_t);
    }

    Matrix same(3, 4);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) same(r, c) = float(c) - 1.5f;
    const ChannelQuantParams eq = calibrate_per_channel(same, 8, 0);
    CHECK(eq.per_channel[0] == eq.per_channel[1]);
    CHECK(eq.per_channel[1] == eq.per_channel[2]);

    CHECK_THROWS_AS(calibrate_per_channel(same, 8, 2), std::invalid_argument);
}

TEST_CASE("per-channel error never exceeds per-tensor MinMax on random tensors") {
    Rng rng(37);
    for (int t = 0; t < 100; ++t) {
        Matrix w = gaussian_matrix(rng, 8, 16);
        for (std::size_t c = 0; c < 16; ++c) w(t % 8, c) *= 5.0f;
        for (int axis : {0, 1}) {
            CHECK(quantization_error_sq(w, calibrate_per_channel(w, 8, axis)) <=
                  quantization_error_sq(w, calibrate_minmax(w, 8)));
        }
    }
}

TEST_CASE("quantize_tensor round trips through dequantize") {
    const Matrix grid = Matrix::from_rows({{0.0f, 1.0f}, {2.0f, 15.0f}});
    const ScalarQuantizedTensor t = quantize_tensor(grid, calibrate_minmax(grid, 4));
    CHECK(bitwise_equal(t.dequantize(), grid));
    REQUIRE(t.packed_codes.size() == 2);
    CHECK(t.packed_codes[0] == 0x10); // codes 0 and 1, low nibble first
    CHECK(t.packed_codes[1] == 0xF2);

    Rng rng(41);
    const Matrix w = random_matrix(rng, 16, 16);
    for (int bits : {4, 8}) {
        const QuantParams q = calibrate_minmax(w, bits);
        const ScalarQuantizedTensor qt = quantize_tensor(w, q);
        const Matrix back = qt.dequantize();
        CHECK(bitwise_equal(back, fake_quant(w, q)));
        for (float v : w.values()) CHECK(within_half_step(v, q));
        CHECK(qt.code_bytes() == w.size() * bits / 8);
    }

    const ChannelQuantParams pc = calibrate_per_channel(w, 8, 1);
    CHECK(bitwise_equal(quantize_tensor(w, pc).dequantize(), fake_quant(w, pc)));
}

TEST_CASE("int8 payload is one byte per weight") {
    const Matrix w(64, 32, 0.5f);
    const ScalarQuantizedTensor t8 = quantize_tensor(w, calibrate_minmax(w, 8));
    CHECK(t8.code_bytes() == 64 * 32);
    CHECK(double(w.size() * 4) / double(t8.code_bytes()) == 4.0);
    const ScalarQuantizedTensor t4 = quantize_tensor(w, calibrate_minmax(w, 4));
    CHECK(double(w.size() * 4) / double(t4.code_bytes()) == 8.0);
}

TEST_CASE("activation observer") {
    Rng rng(43);
    const Matrix batch = gaussian_matrix(rng, 16, 32);
    ActivationObserver one;
    one.observe(batch);
    CHECK(one.freeze() == calibrate_histogram(batch, 8));

    const Matrix low = random_matrix(rng, 4, 8, -3.0, -1.0);
    const Matrix high = random_matrix(rng, 4, 8, 2.0, 5.0);
    ActivationObserver two;
    const Matrix both[] = {low, high};
    const QuantParams q = observe_and_freeze(two, both);
    CHECK(two.running_min() == low.min_value());
    CHECK(two.running_max() == high.max_value());
    CHECK(double(q.index_min()) * q.scale <= low.min_value() + q.scale);
    CHECK(double(q.index_max()) * q.scale >= high.max_value() - q.scale);
    CHECK(two.frozen());
    CHECK_THROWS_AS(two.observe(low), ObserverFrozen);
    CHECK(*two.params() == q);

    ActivationObserver empty;
    CHECK_THROWS_AS(empty.freeze(), std::logic_error);
}
