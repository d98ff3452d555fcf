#pragma once

#include "qnoise/matrix.hpp"
#include "qnoise/rng.hpp"
#include "qnoise/scalar_quant.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace qnoise {

class LayoutError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Shape of one block. PQ on columns uses block_cols = 1, so each column is
/// cut into m = rows / block_rows subvectors.
struct BlockLayout {
    std::size_t block_rows = 8;
    std::size_t block_cols = 1;

    std::size_t dim() const { return block_rows * block_cols; }
    friend bool operator==(const BlockLayout&, const BlockLayout&) = default;
};

/// A layout applied to a concrete matrix shape: m × q blocks of dimension d.
struct BlockGrid {
    BlockLayout layout;
    std::size_t m = 0;
    std::size_t q = 0;

    std::size_t rows() const { return m * layout.block_rows; }
    std::size_t cols() const { return q * layout.block_cols; }
    std::size_t blocks() const { return m * q; }
    std::size_t dim() const { return layout.dim(); }
};

/// Throws LayoutError unless the layout tiles the matrix exactly.
BlockGrid make_grid(std::size_t rows, std::size_t cols, const BlockLayout& layout);

/// Calls fn(block, element, row, col) for every entry. Blocks are ordered
/// column-major (block (k, l) is block l·m + k) and so are entries within a block.
template <typename Fn>
void for_each_block_entry(const BlockGrid& g, Fn&& fn) {
    const std::size_t br = g.layout.block_rows, bc = g.layout.block_cols;
    for (std::size_t l = 0; l < g.q; ++l) {
        for (std::size_t k = 0; k < g.m; ++k) {
            const std::size_t block = l * g.m + k;
            std::size_t e = 0;
            for (std::size_t c = 0; c < bc; ++c) {
                for (std::size_t r = 0; r < br; ++r) {
                    fn(block, e++, k * br + r, l * bc + c);
                }
            }
        }
    }
}

/// count × dim row-major set of subvectors.
class SubvectorSet {
public:
    SubvectorSet() = default;
    SubvectorSet(std::size_t count, std::size_t dim) : count_(count), dim_(dim), data_(count * dim) {}
    SubvectorSet(std::size_t count, std::size_t dim, std::vector<float> data);

    std::size_t count() const { return count_; }
    std::size_t dim() const { return dim_; }
    std::span<float> operator[](std::size_t i) { return {data_.data() + i * dim_, dim_}; }
    std::span<const float> operator[](std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
    std::span<const float> values() const { return data_; }

private:
    std::size_t count_ = 0;
    std::size_t dim_ = 0;
    std::vector<float> data_;
};

SubvectorSet split_blocks(const Matrix& w, const BlockLayout& layout);
Matrix join_blocks(const SubvectorSet& blocks, const BlockGrid& grid);

struct Int8Centroids {
    QuantParams params;
    std::vector<std::uint8_t> codes;
};

struct Codebook {
    std::size_t k = 0;
    std::size_t d = 0;
    std::vector<float> centroids; // k × d, dequantized values when int8 is set
    std::optional<Int8Centroids> int8;

    std::span<const float> centroid(std::size_t i) const { return {centroids.data() + i * d, d}; }
    std::span<float> centroid(std::size_t i) { return {centroids.data() + i * d, d}; }
    std::uint64_t storage_bits() const { return (int8 ? 8u : 32u) * static_cast<std::uint64_t>(k * d); }
};

/// m × q codeword indices, stored in block order.
struct IndexMatrix {
    std::size_t m = 0;
    std::size_t q = 0;
    std::vector<std::uint32_t> entries;

    std::size_t size() const { return entries.size(); }
    friend bool operator==(const IndexMatrix&, const IndexMatrix&) = default;
};

struct KMeansResult {
    Codebook codebook;
    IndexMatrix indices; // shaped count × 1
    double objective = 0.0;
    std::vector<double> history; // objective after the initial assignment and every iteration
};

inline constexpr std::size_t kDefaultCentroids = 256;
inline constexpr int kDefaultKMeansIters = 15;
inline constexpr double kKMeansTolerance = 1e-6;

double squared_distance(std::span<const float> a, std::span<const float> b);

/// k-means++ seeding then Lloyd iterations until `iters` or relative
/// improvement below `tol`. Empty clusters move to the subvector farthest
/// from its centroid.
KMeansResult kmeans_fit(const SubvectorSet& x, std::size_t k, int iters, Rng& rng,
                        double tol = kKMeansTolerance);

/// Nearest codeword by squared Euclidean distance, ties to the lowest index.
std::uint32_t nearest_centroid(const Codebook& cb, std::span<const float> v);
IndexMatrix assign(const SubvectorSet& x, const Codebook& cb);

/// Σ ‖b − c[I]‖² over all blocks.
double pq_objective(const SubvectorSet& x, const Codebook& cb, const IndexMatrix& idx);

Matrix reconstruct(const Codebook& cb, const IndexMatrix& idx, const BlockLayout& layout);

/// c ← c − η · mean of the gradients of the blocks assigned to c.
Codebook finetune_centroids(const Codebook& cb, const IndexMatrix& idx, const SubvectorSet& block_grads,
                            double eta);

/// Replace centroids by MinMax int8 codes over all centroid entries.
Codebook compress_centroids_int8(const Codebook& cb);

/// ceil(log2 k); 0 for k = 1.
unsigned index_bits(std::size_t k);

/// 8·K·d + ceil(log2 K)·m·p + 8·n bits.
std::uint64_t storage_bits(std::uint64_t k, std::uint64_t d, std::uint64_t m, std::uint64_t p,
                           std::uint64_t n);

/// A PQ-compressed matrix.
struct PqTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    BlockLayout layout;
    Codebook codebook;
    IndexMatrix indices;

    BlockGrid grid() const { return make_grid(rows, cols, layout); }
    Matrix reconstruct() const { return qnoise::reconstruct(codebook, indices, layout); }
};

struct PqResult {
    PqTensor tensor;
    double objective = 0.0;
    std::vector<double> history;
};

PqResult pq_quantize(const Matrix& w, const BlockLayout& layout, std::size_t k, int iters, Rng& rng);

} // namespace qnoise
