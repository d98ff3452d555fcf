#pragma once

#include "qnoise/matrix.hpp"
#include "qnoise/pq.hpp"
#include "qnoise/rng.hpp"
#include "qnoise/scalar_quant.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace qnoise {

enum class NoiseKind { int_n, pq_exact, pq_proxy, layerdrop };

std::string to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(const std::string& s);

/// One noise source. Quantization kinds act on weight blocks of `layout`;
/// layerdrop acts on whole residual branches.
struct NoiseSpec {
    NoiseKind kind = NoiseKind::int_n;
    double rate = 0.0;
    BlockLayout layout{1, 1};
    int bits = 8;                            // int_n
    std::size_t centroids = kDefaultCentroids; // pq_exact
    bool ste = true;

    static NoiseSpec int_n(int bits, double rate);
    static NoiseSpec pq_exact(BlockLayout layout, std::size_t centroids, double rate);
    static NoiseSpec pq_proxy(BlockLayout layout, double rate);
    static NoiseSpec layerdrop(double rate);

    bool acts_on_weights() const { return kind != NoiseKind::layerdrop; }
};

void validate(const NoiseSpec& spec);

/// The selected set J, one flag per block in block order.
struct BlockMask {
    std::size_t m = 0;
    std::size_t q = 0;
    std::vector<std::uint8_t> selected;

    std::size_t count() const;
    static BlockMask none(const BlockGrid& g);
    static BlockMask all(const BlockGrid& g);
};

/// Each block independently selected with probability p.
BlockMask select_blocks(const BlockGrid& grid, double p, Rng& rng);

/// φ acting in place on one gathered block.
using BlockFn = std::function<void(std::span<float>)>;

/// ψ(· | J): selected blocks become φ(block), the rest are copied untouched.
Matrix apply_noise(const Matrix& w, const BlockLayout& layout, const BlockMask& mask, const BlockFn& phi);

void phi_int_n(std::span<float> block, const QuantParams& q);
void phi_pq(std::span<float> block, const Codebook& cb);
void phi_proxy(std::span<float> block);

BlockFn make_phi_int_n(QuantParams q);
BlockFn make_phi_pq(const Codebook& cb);
BlockFn make_phi_proxy();

/// A noise operator ψ. Data-dependent parts of φ (the intN scale and zero
/// point) are computed from the whole tensor the operator receives.
class NoiseOperator {
public:
    explicit NoiseOperator(NoiseSpec spec, const Codebook* codebook = nullptr);

    const NoiseSpec& spec() const { return spec_; }
    BlockGrid grid_for(const Matrix& w) const { return make_grid(w.rows(), w.cols(), spec_.layout); }

    BlockFn bind(const Matrix& w) const;
    Matrix apply(const Matrix& w, const BlockMask& mask) const;
    /// Draws a fresh mask from rng; the drawn mask is written to mask_out when given.
    Matrix apply(const Matrix& w, Rng& rng, BlockMask* mask_out = nullptr) const;

private:
    NoiseSpec spec_;
    const Codebook* codebook_;
};

/// ψ₁ ∘ ψ₂ ∘ …: the last operator acts first. Masks are drawn independently.
class ComposedNoise {
public:
    ComposedNoise() = default;
    explicit ComposedNoise(std::vector<NoiseOperator> ops) : ops_(std::move(ops)) {}

    const std::vector<NoiseOperator>& operators() const { return ops_; }
    Matrix apply(const Matrix& w, Rng& rng, std::vector<BlockMask>* masks_out = nullptr) const;
    /// masks[i] belongs to operators()[i].
    Matrix apply(const Matrix& w, std::span<const BlockMask> masks) const;

private:
    std::vector<NoiseOperator> ops_;
};

ComposedNoise compose(const NoiseOperator& outer, const NoiseOperator& inner);
ComposedNoise compose(const ComposedNoise& outer, const ComposedNoise& inner);

/// Per residual block: true means the branch is dropped this forward.
std::vector<bool> layerdrop_mask(std::size_t num_layers, double rate, Rng& rng);

} // namespace qnoise
