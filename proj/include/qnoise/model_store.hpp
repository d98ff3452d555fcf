#pragma once

#include "qnoise/ipq.hpp"
#include "qnoise/network.hpp"
#include "qnoise/pq.hpp"
#include "qnoise/scalar_quant.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace qnoise {

/// Binary model container.
///
///   header : "QNZ1" | version u16 | tensor count u32          (10 bytes)
///   record : scheme u8 | rows u32 | cols u32 | payload len u32 (13 bytes) | payload
///
/// All integers little-endian, reals IEEE-754 binary32 little-endian.
enum class SchemeTag : std::uint8_t { raw32 = 0, int_n = 1, pq = 2, pq_int8 = 3 };

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kFileHeaderBytes = 10;
inline constexpr std::size_t kRecordHeaderBytes = 13;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};
class IndexRangeError : public FormatError {
public:
    using FormatError::FormatError;
};
class CorruptRecordError : public FormatError {
public:
    using FormatError::FormatError;
};

struct CompressedTensor {
    SchemeTag scheme = SchemeTag::raw32;
    std::size_t rows = 0;
    std::size_t cols = 0;
    Matrix raw;                   // raw32
    ScalarQuantizedTensor scalar; // int_n
    PqTensor pq;                  // pq, pq_int8

    static CompressedTensor from_raw(const Matrix& w);
    static CompressedTensor from_scalar(const ScalarQuantizedTensor& t);
    /// Tagged pq_int8 when the codebook carries int8 centroids.
    static CompressedTensor from_pq(const PqTensor& t);

    Matrix dequantize() const;
    std::size_t payload_bytes() const;
    std::size_t record_bytes() const { return kRecordHeaderBytes + payload_bytes(); }
    /// Centroid and index bits for PQ tensors, without byte padding.
    std::uint64_t pq_weight_bits() const;
};

struct Model {
    std::vector<CompressedTensor> tensors;
};

std::vector<std::uint8_t> serialize(const Model& model);
Model deserialize(std::span<const std::uint8_t> bytes);

/// Writes to a sibling temporary file and renames it into place.
void write_model_file(const std::filesystem::path& path, const Model& model);
Model read_model_file(const std::filesystem::path& path);

/// LSB-first packing of `bits`-wide values.
std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> values, unsigned bits);
std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count, unsigned bits);

struct TensorSize {
    SchemeTag scheme = SchemeTag::raw32;
    std::size_t bytes = 0;          // record including its header
    std::size_t baseline_bytes = 0; // the same record stored as raw32
    std::size_t payload_bytes = 0;
    std::size_t weight_bytes = 0;   // codes only, without parameters or header
};

struct SizeReport {
    std::vector<TensorSize> tensors;
    std::size_t total_bytes = 0;    // equals serialize(model).size()
    std::size_t baseline_bytes = 0; // serialized size with every tensor as raw32
    double ratio = 1.0;             // baseline_bytes / total_bytes

    double megabytes() const { return double(total_bytes) / 1e6; }
};

SizeReport size_report(const Model& model);

/// float32 bytes of a tensor over its code bytes (4 for int8, 8 for int4 on even counts).
double payload_ratio(const CompressedTensor& t);

/// Tensors in parameter order: weight then bias for every store. Biases stay raw32.
Model raw_model(const Network& net);
/// Per-tensor MinMax intN weights.
Model scalar_model(const Network& net, int bits);
/// PQ weights where present, raw32 otherwise.
Model pq_model(const CompressedNetwork& c);

/// Replaces the network's parameters with the model's dequantized tensors.
void load_weights(Network& net, const Model& model);

} // namespace qnoise
