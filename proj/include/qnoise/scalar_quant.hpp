#pragma once

#include "qnoise/matrix.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace qnoise {

/// Uniform fixed-point grid: value = k · scale for integer grid index
/// k ∈ [zero_point, zero_point + 2^bits − 1]. The stored unsigned code is
/// k − zero_point.
struct QuantParams {
    float scale = 1.0f;
    std::int32_t zero_point = 0;
    int bits = 8;

    std::int64_t levels() const { return std::int64_t{1} << bits; }
    std::int64_t index_min() const { return zero_point; }
    std::int64_t index_max() const { return std::int64_t{zero_point} + levels() - 1; }

    friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

void validate(const QuantParams& q);

enum class ChannelAxis : std::uint8_t { rows = 0, cols = 1 };

struct ChannelQuantParams {
    ChannelAxis axis = ChannelAxis::rows;
    std::vector<QuantParams> per_channel;
};

inline constexpr float kDegenerateScale = 1e-8f;
inline constexpr std::size_t kHistogramBins = 2048;
inline constexpr std::size_t kHistogramStride = 8;

/// Round half away from zero on every platform.
double round_half_away(double x);

/// Scale and zero point covering [lo, hi] with 2^bits levels.
/// A constant range v falls back to s = max(|v|, 1e-8) with z = 0 (z = −1 when v < 0).
QuantParams params_for_range(double lo, double hi, int bits);

QuantParams calibrate_minmax(const Matrix& w, int bits);
QuantParams calibrate_histogram(const Matrix& w, int bits);
ChannelQuantParams calibrate_per_channel(const Matrix& w, int bits, int axis);

/// Clamped grid index round(w/s + z) − z.
std::int64_t grid_index(float w, const QuantParams& q);
float fake_quant(float w, const QuantParams& q);
Matrix fake_quant(const Matrix& w, const QuantParams& q);
Matrix fake_quant(const Matrix& w, const ChannelQuantParams& q);

double quantization_error_sq(const Matrix& w, const QuantParams& q);
double quantization_error_sq(const Matrix& w, const ChannelQuantParams& q);

/// Bins of equal width over [lo, hi]; the top edge falls into the last bin.
struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::uint64_t> counts;

    double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
    double center(std::size_t b) const { return lo + (static_cast<double>(b) + 0.5) * bin_width(); }
};

Histogram build_histogram(std::span<const float> values, std::size_t bins = kHistogramBins);

/// Best clip range over the stride-8 (start, end) bin grid, judged by
/// count-weighted L2 error at bin centers.
QuantParams search_histogram(const Histogram& h, int bits);

enum class ChannelMode : std::uint8_t { per_tensor = 0, per_row = 1, per_col = 2 };

/// N-bit codes for a whole matrix; int4 codes are packed two per byte, low nibble first.
struct ScalarQuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int bits = 8;
    ChannelMode mode = ChannelMode::per_tensor;
    std::vector<QuantParams> params;
    std::vector<std::uint8_t> packed_codes;

    std::uint32_t code_at(std::size_t i) const;
    const QuantParams& params_for(std::size_t r, std::size_t c) const;
    Matrix dequantize() const;
    std::size_t code_bytes() const { return packed_codes.size(); }
};

std::size_t packed_code_bytes(std::size_t count, int bits);

ScalarQuantizedTensor quantize_tensor(const Matrix& w, const QuantParams& q);
ScalarQuantizedTensor quantize_tensor(const Matrix& w, const ChannelQuantParams& q);

class ObserverFrozen : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Accumulates activation statistics over a few forward passes, then freezes
/// histogram-calibrated parameters. The observed samples are kept so the
/// frozen result equals calibrate_histogram over everything observed.
class ActivationObserver {
public:
    explicit ActivationObserver(int bits = 8);

    void observe(const Matrix& batch);
    QuantParams freeze();

    bool frozen() const { return frozen_.has_value(); }
    const std::optional<QuantParams>& params() const { return frozen_; }
    std::size_t observed_batches() const { return batches_; }
    float running_min() const { return min_; }
    float running_max() const { return max_; }
    Histogram histogram(std::size_t bins = kHistogramBins) const;

private:
    int bits_;
    float min_ = 0.0f;
    float max_ = 0.0f;
    std::size_t batches_ = 0;
    std::vector<float> samples_;
    std::optional<QuantParams> frozen_;
};

QuantParams observe_and_freeze(ActivationObserver& obs, std::span<const Matrix> batches);

} // namespace qnoise
