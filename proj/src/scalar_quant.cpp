#include "qnoise/scalar_quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qnoise {

namespace {

// Beyond this |z| the float grid can no longer represent every index exactly.
constexpr double kMaxZeroPoint = 1 << 20;

void check_bits(int bits) {
    if (bits != 4 && bits != 8) {
        throw std::invalid_argument("unsupported bit width " + std::to_string(bits) +
                                    " (expected 4 or 8)");
    }
}

QuantParams degenerate_params(double v, int bits) {
    QuantParams q;
    q.bits = bits;
    q.scale = std::max(static_cast<float>(std::fabs(v)), kDegenerateScale);
    q.zero_point = v < 0.0 ? -1 : 0;
    return q;
}

// Inline twin of fake_quant working in double for the histogram search.
inline double fake_quant_d(double w, double s, double z, double kmin, double kmax) {
    double k = round_half_away(w / s + z) - z;
    k = std::clamp(k, kmin, kmax);
    return k * s;
}

} // namespace

void validate(const QuantParams& q) {
    check_bits(q.bits);
    if (!(q.scale > 0.0f) || !std::isfinite(q.scale)) {
        throw std::invalid_argument("QuantParams: scale must be positive and finite");
    }
}

double round_half_away(double x) {
    return std::round(x);
}

QuantParams params_for_range(double lo, double hi, int bits) {
    check_bits(bits);
    if (!(hi > lo)) {
        return degenerate_params(lo, bits);
    }
    const double steps = static_cast<double>((1 << bits) - 1);
    const double s = (hi - lo) / steps;
    // z = round(lo / s), written so that exact ratios such as -127.5 survive.
    const double z = round_half_away(lo * steps / (hi - lo));
    const float sf = static_cast<float>(s);
    if (std::fabs(z) > kMaxZeroPoint || !(sf > 0.0f)) {
        return degenerate_params(0.5 * (lo + hi), bits);
    }
    QuantParams q;
    q.bits = bits;
    q.scale = sf;
    q.zero_point = static_cast<std::int32_t>(z);
    return q;
}

QuantParams calibrate_minmax(const Matrix& w, int bits) {
    if (w.empty()) {
        throw std::invalid_argument("calibrate_minmax: empty tensor");
    }
    return params_for_range(w.min_value(), w.max_value(), bits);
}

std::int64_t grid_index(float w, const QuantParams& q) {
    const double s = q.scale;
    const double z = q.zero_point;
    double k = round_half_away(static_cast<double>(w) / s + z) - z;
    k = std::clamp(k, static_cast<double>(q.index_min()), static_cast<double>(q.index_max()));
    return static_cast<std::int64_t>(k);
}

float fake_quant(float w, const QuantParams& q) {
    return static_cast<float>(static_cast<double>(grid_index(w, q)) * static_cast<double>(q.scale));
}

Matrix fake_quant(const Matrix& w, const QuantParams& q) {
    Matrix out = w;
    for (float& v : out.values()) {
        v = fake_quant(v, q);
    }
    return out;
}

Matrix fake_quant(const Matrix& w, const ChannelQuantParams& q) {
    const bool rows = q.axis == ChannelAxis::rows;
    const std::size_t channels = rows ? w.rows() : w.cols();
    if (q.per_channel.size() != channels) {
        throw DimensionError("fake_quant: channel count mismatch");
    }
    Matrix out = w;
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            out(r, c) = fake_quant(w(r, c), q.per_channel[rows ? r : c]);
        }
    }
    return out;
}

double quantization_error_sq(const Matrix& w, const QuantParams& q) {
    return frobenius_sq(w, fake_quant(w, q));
}

double quantization_error_sq(const Matrix& w, const ChannelQuantParams& q) {
    return frobenius_sq(w, fake_quant(w, q));
}

ChannelQuantParams calibrate_per_channel(const Matrix& w, int bits, int axis) {
    if (axis != 0 && axis != 1) {
        throw std::invalid_argument("calibrate_per_channel: axis must be 0 (rows) or 1 (cols)");
    }
    if (w.empty()) {
        throw std::invalid_argument("calibrate_per_channel: empty tensor");
    }
    ChannelQuantParams out;
    out.axis = static_cast<ChannelAxis>(axis);
    if (axis == 0) {
        for (std::size_t r = 0; r < w.rows(); ++r) {
            auto row = w.row(r);
            auto [lo, hi] = std::minmax_element(row.begin(), row.end());
            out.per_channel.push_back(params_for_range(*lo, *hi, bits));
        }
    } else {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            float lo = w(0, c), hi = w(0, c);
            for (std::size_t r = 1; r < w.rows(); ++r) {
                lo = std::min(lo, w(r, c));
                hi = std::max(hi, w(r, c));
            }
            out.per_channel.push_back(params_for_range(lo, hi, bits));
        }
    }
    return out;
}

Histogram build_histogram(std::span<const float> values, std::size_t bins) {
    if (values.empty() || bins == 0) {
        throw std::invalid_argument("build_histogram: no values");
    }
    auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    Histogram h;
    h.lo = *lo;
    h.hi = *hi;
    h.counts.assign(bins, 0);
    if (!(h.hi > h.lo)) {
        h.counts[0] = values.size();
        return h;
    }
    const double width = h.bin_width();
    for (float v : values) {
        auto b = static_cast<std::size_t>((static_cast<double>(v) - h.lo) / width);
        h.counts[std::min(b, bins - 1)] += 1;
    }
    return h;
}

QuantParams search_histogram(const Histogram& h, int bits) {
    check_bits(bits);
    if (!(h.hi > h.lo)) {
        return params_for_range(h.lo, h.hi, bits);
    }
    const std::size_t bins = h.counts.size();

    std::vector<double> centers;
    std::vector<double> weights;
    for (std::size_t b = 0; b < bins; ++b) {
        if (h.counts[b] != 0) {
            centers.push_back(h.center(b));
            weights.push_back(static_cast<double>(h.counts[b]));
        }
    }

    const double width = h.bin_width();
    QuantParams best = params_for_range(h.lo, h.hi, bits);
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t start = 0; start + kHistogramStride <= bins; start += kHistogramStride) {
        const double clip_lo = start == 0 ? h.lo : h.lo + static_cast<double>(start) * width;
        for (std::size_t end = start + kHistogramStride; end <= bins; end += kHistogramStride) {
            const double clip_hi = end == bins ? h.hi : h.lo + static_cast<double>(end) * width;
            const QuantParams q = params_for_range(clip_lo, clip_hi, bits);
            const double s = q.scale;
            const double z = q.zero_point;
            const double kmin = static_cast<double>(q.index_min());
            const double kmax = static_cast<double>(q.index_max());
            double err = 0.0;
            for (std::size_t i = 0; i < centers.size() && err < best_err; ++i) {
                const double d = centers[i] - fake_quant_d(centers[i], s, z, kmin, kmax);
                err += weights[i] * d * d;
            }
            if (err < best_err) {
                best_err = err;
                best = q;
            }
        }
    }
    return best;
}

QuantParams calibrate_histogram(const Matrix& w, int bits) {
    if (w.empty()) {
        throw std::invalid_argument("calibrate_histogram: empty tensor");
    }
    const QuantParams minmax = calibrate_minmax(w, bits);
    const QuantParams searched = search_histogram(build_histogram(w.values()), bits);
    if (searched == minmax) {
        return minmax;
    }
    // Bin centers only approximate the tensor; keep MinMax unless the search
    // is strictly better on the actual values.
    return quantization_error_sq(w, searched) < quantization_error_sq(w, minmax) ? searched : minmax;
}

std::size_t packed_code_bytes(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::uint32_t ScalarQuantizedTensor::code_at(std::size_t i) const {
    if (bits == 8) {
        return packed_codes[i];
    }
    const std::uint8_t byte = packed_codes[i / 2];
    return (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
}

const QuantParams& ScalarQuantizedTensor::params_for(std::size_t r, std::size_t c) const {
    switch (mode) {
    case ChannelMode::per_row:
        return params[r];
    case ChannelMode::per_col:
        return params[c];
    case ChannelMode::per_tensor:
        break;
    }
    return params.front();
}

Matrix ScalarQuantizedTensor::dequantize() const {
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const QuantParams& q = params_for(r, c);
            const std::int64_t k = static_cast<std::int64_t>(code_at(r * cols + c)) + q.zero_point;
            out(r, c) = static_cast<float>(static_cast<double>(k) * static_cast<double>(q.scale));
        }
    }
    return out;
}

namespace {

ScalarQuantizedTensor quantize_with(const Matrix& w, int bits, ChannelMode mode,
                                    std::vector<QuantParams> params) {
    for (const auto& q : params) {
        validate(q);
        if (q.bits != bits) {
            throw std::invalid_argument("quantize_tensor: mixed bit widths");
        }
    }
    ScalarQuantizedTensor t;
    t.rows = w.rows();
    t.cols = w.cols();
    t.bits = bits;
    t.mode = mode;
    t.params = std::move(params);
    t.packed_codes.assign(packed_code_bytes(w.size(), bits), 0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            const QuantParams& q = t.params_for(r, c);
            const auto code = static_cast<std::uint32_t>(grid_index(w(r, c), q) - q.zero_point);
            const std::size_t i = r * w.cols() + c;
            if (bits == 8) {
                t.packed_codes[i] = static_cast<std::uint8_t>(code);
            } else {
                t.packed_codes[i / 2] |= static_cast<std::uint8_t>(code << ((i % 2) * 4));
            }
        }
    }
    return t;
}

} // namespace

ScalarQuantizedTensor quantize_tensor(const Matrix& w, const QuantParams& q) {
    return quantize_with(w, q.bits, ChannelMode::per_tensor, {q});
}

ScalarQuantizedTensor quantize_tensor(const Matrix& w, const ChannelQuantParams& q) {
    const bool rows = q.axis == ChannelAxis::rows;
    if (q.per_channel.size() != (rows ? w.rows() : w.cols()) || q.per_channel.empty()) {
        throw DimensionError("quantize_tensor: channel count mismatch");
    }
    return quantize_with(w, q.per_channel.front().bits,
                         rows ? ChannelMode::per_row : ChannelMode::per_col, q.per_channel);
}

ActivationObserver::ActivationObserver(int bits) : bits_(bits) {
    check_bits(bits);
}

void ActivationObserver::observe(const Matrix& batch) {
    if (frozen_) {
        throw ObserverFrozen("ActivationObserver: observe after freeze");
    }
    if (batch.empty()) {
        return;
    }
    if (samples_.empty()) {
        min_ = batch.min_value();
        max_ = batch.max_value();
    } else {
        min_ = std::min(min_, batch.min_value());
        max_ = std::max(max_, batch.max_value());
    }
    samples_.insert(samples_.end(), batch.values().begin(), batch.values().end());
    ++batches_;
}

QuantParams ActivationObserver::freeze() {
    if (frozen_) {
        return *frozen_;
    }
    if (samples_.empty()) {
        throw std::logic_error("ActivationObserver: freeze without observations");
    }
    frozen_ = calibrate_histogram(Matrix(1, samples_.size(), samples_), bits_);
    samples_.clear();
    samples_.shrink_to_fit();
    return *frozen_;
}

Histogram ActivationObserver::histogram(std::size_t bins) const {
    return build_histogram(samples_, bins);
}

QuantParams observe_and_freeze(ActivationObserver& obs, std::span<const Matrix> batches) {
    for (const auto& b : batches) {
        obs.observe(b);
    }
    return obs.freeze();
}

} // namespace qnoise
