#include "qnoise/noise.hpp"

#include <algorithm>
#include <memory>
#include <stdexcept>

namespace qnoise {

std::string to_string(NoiseKind kind) {
    switch (kind) {
    case NoiseKind::int_n:
        return "int_n";
    case NoiseKind::pq_exact:
        return "pq_exact";
    case NoiseKind::pq_proxy:
        return "pq_proxy";
    case NoiseKind::layerdrop:
        return "layerdrop";
    }
    return "unknown";
}

NoiseKind noise_kind_from_string(const std::string& s) {
    if (s == "int_n" || s == "intN") return NoiseKind::int_n;
    if (s == "pq_exact" || s == "pq") return NoiseKind::pq_exact;
    if (s == "pq_proxy" || s == "proxy") return NoiseKind::pq_proxy;
    if (s == "layerdrop") return NoiseKind::layerdrop;
    throw std::invalid_argument("unknown noise kind '" + s + "'");
}

NoiseSpec NoiseSpec::int_n(int bits, double rate) {
    NoiseSpec s;
    s.kind = NoiseKind::int_n;
    s.bits = bits;
    s.rate = rate;
    return s;
}

NoiseSpec NoiseSpec::pq_exact(BlockLayout layout, std::size_t centroids, double rate) {
    NoiseSpec s;
    s.kind = NoiseKind::pq_exact;
    s.layout = layout;
    s.centroids = centroids;
    s.rate = rate;
    return s;
}

NoiseSpec NoiseSpec::pq_proxy(BlockLayout layout, double rate) {
    NoiseSpec s;
    s.kind = NoiseKind::pq_proxy;
    s.layout = layout;
    s.rate = rate;
    return s;
}

NoiseSpec NoiseSpec::layerdrop(double rate) {
    NoiseSpec s;
    s.kind = NoiseKind::layerdrop;
    s.rate = rate;
    s.ste = false;
    return s;
}

void validate(const NoiseSpec& spec) {
    if (!(spec.rate >= 0.0 && spec.rate <= 1.0)) {
        throw std::invalid_argument("noise rate must lie in [0, 1]");
    }
    if (spec.kind == NoiseKind::int_n && spec.bits != 4 && spec.bits != 8) {
        throw std::invalid_argument("int_n noise supports 4 or 8 bits");
    }
    if (spec.kind == NoiseKind::pq_exact && spec.centroids == 0) {
        throw std::invalid_argument("pq_exact noise needs at least one centroid");
    }
    if (spec.layout.block_rows == 0 || spec.layout.block_cols == 0) {
        throw std::invalid_argument("noise block layout with zero extent");
    }
}

std::size_t BlockMask::count() const {
    return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), std::uint8_t{1}));
}

BlockMask BlockMask::none(const BlockGrid& g) {
    return {g.m, g.q, std::vector<std::uint8_t>(g.blocks(), 0)};
}

BlockMask BlockMask::all(const BlockGrid& g) {
    return {g.m, g.q, std::vector<std::uint8_t>(g.blocks(), 1)};
}

BlockMask select_blocks(const BlockGrid& grid, double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("select_blocks: p must lie in [0, 1]");
    }
    BlockMask mask = BlockMask::none(grid);
    for (auto& s : mask.selected) {
        s = rng.bernoulli(p) ? 1 : 0;
    }
    return mask;
}

Matrix apply_noise(const Matrix& w, const BlockLayout& layout, const BlockMask& mask, const BlockFn& phi) {
    const BlockGrid g = make_grid(w.rows(), w.cols(), layout);
    if (mask.m != g.m || mask.q != g.q || mask.selected.size() != g.blocks()) {
        throw DimensionError("apply_noise: mask does not match block grid");
    }
    Matrix out = w;
    if (mask.count() == 0) {
        return out;
    }
    const std::size_t br = layout.block_rows, bc = layout.block_cols;
    std::vector<float> buf(g.dim());
    for (std::size_t l = 0; l < g.q; ++l) {
        for (std::size_t k = 0; k < g.m; ++k) {
            if (!mask.selected[l * g.m + k]) {
                continue;
            }
            std::size_t e = 0;
            for (std::size_t c = 0; c < bc; ++c) {
                for (std::size_t r = 0; r < br; ++r) {
                    buf[e++] = w(k * br + r, l * bc + c);
                }
            }
            phi(buf);
            e = 0;
            for (std::size_t c = 0; c < bc; ++c) {
                for (std::size_t r = 0; r < br; ++r) {
                    out(k * br + r, l * bc + c) = buf[e++];
                }
            }
        }
    }
    return out;
}

void phi_int_n(std::span<float> block, const QuantParams& q) {
    for (float& v : block) {
        v = fake_quant(v, q);
    }
}

void phi_pq(std::span<float> block, const Codebook& cb) {
    const auto c = cb.centroid(nearest_centroid(cb, block));
    std::copy(c.begin(), c.end(), block.begin());
}

void phi_proxy(std::span<float> block) {
    std::fill(block.begin(), block.end(), 0.0f);
}

BlockFn make_phi_int_n(QuantParams q) {
    validate(q);
    return [q](std::span<float> b) { phi_int_n(b, q); };
}

BlockFn make_phi_pq(const Codebook& cb) {
    auto shared = std::make_shared<const Codebook>(cb);
    return [shared](std::span<float> b) { phi_pq(b, *shared); };
}

BlockFn make_phi_proxy() {
    return [](std::span<float> b) { phi_proxy(b); };
}

NoiseOperator::NoiseOperator(NoiseSpec spec, const Codebook* codebook)
    : spec_(spec), codebook_(codebook) {
    validate(spec_);
    if (spec_.kind == NoiseKind::layerdrop) {
        throw std::invalid_argument("layerdrop noise acts on residual branches, not weight blocks");
    }
    if (spec_.kind == NoiseKind::pq_exact) {
        if (codebook_ == nullptr) {
            throw std::invalid_argument("pq_exact noise requires a codebook");
        }
        if (codebook_->d != spec_.layout.dim()) {
            throw DimensionError("pq_exact noise: codebook dimension does not match block layout");
        }
    }
}

BlockFn NoiseOperator::bind(const Matrix& w) const {
    switch (spec_.kind) {
    case NoiseKind::int_n: {
        const QuantParams q = calibrate_minmax(w, spec_.bits);
        return [q](std::span<float> b) { phi_int_n(b, q); };
    }
    case NoiseKind::pq_exact: {
        const Codebook* cb = codebook_;
        return [cb](std::span<float> b) { phi_pq(b, *cb); };
    }
    case NoiseKind::pq_proxy:
        return make_phi_proxy();
    case NoiseKind::layerdrop:
        break;
    }
    throw std::logic_error("NoiseOperator::bind: unsupported kind");
}

Matrix NoiseOperator::apply(const Matrix& w, const BlockMask& mask) const {
    if (mask.count() == 0) {
        return w;
    }
    return apply_noise(w, spec_.layout, mask, bind(w));
}

Matrix NoiseOperator::apply(const Matrix& w, Rng& rng, BlockMask* mask_out) const {
    BlockMask mask = select_blocks(grid_for(w), spec_.rate, rng);
    Matrix out = apply(w, mask);
    if (mask_out != nullptr) {
        *mask_out = std::move(mask);
    }
    return out;
}

Matrix ComposedNoise::apply(const Matrix& w, Rng& rng, std::vector<BlockMask>* masks_out) const {
    Matrix cur = w;
    std::vector<BlockMask> masks(ops_.size());
    for (std::size_t i = ops_.size(); i-- > 0;) {
        cur = ops_[i].apply(cur, rng, &masks[i]);
    }
    if (masks_out != nullptr) {
        *masks_out = std::move(masks);
    }
    return cur;
}

Matrix ComposedNoise::apply(const Matrix& w, std::span<const BlockMask> masks) const {
    if (masks.size() != ops_.size()) {
        throw std::invalid_argument("ComposedNoise::apply: one mask per operator required");
    }
    Matrix cur = w;
    for (std::size_t i = ops_.size(); i-- > 0;) {
        cur = ops_[i].apply(cur, masks[i]);
    }
    return cur;
}

ComposedNoise compose(const NoiseOperator& outer, const NoiseOperator& inner) {
    return ComposedNoise({outer, inner});
}

ComposedNoise compose(const ComposedNoise& outer, const ComposedNoise& inner) {
    std::vector<NoiseOperator> ops = outer.operators();
    ops.insert(ops.end(), inner.operators().begin(), inner.operators().end());
    return ComposedNoise(std::move(ops));
}

std::vector<bool> layerdrop_mask(std::size_t num_layers, double rate, Rng& rng) {
    return rng_bernoulli(rng, rate, num_layers);
}

} // namespace qnoise
