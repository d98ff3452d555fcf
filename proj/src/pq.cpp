#include "qnoise/pq.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace qnoise {

BlockGrid make_grid(std::size_t rows, std::size_t cols, const BlockLayout& layout) {
    if (layout.block_rows == 0 || layout.block_cols == 0) {
        throw LayoutError("block layout with zero extent");
    }
    if (rows % layout.block_rows != 0 || cols % layout.block_cols != 0) {
        throw LayoutError("block " + std::to_string(layout.block_rows) + "x" +
                          std::to_string(layout.block_cols) + " does not divide " + std::to_string(rows) +
                          "x" + std::to_string(cols));
    }
    return {layout, rows / layout.block_rows, cols / layout.block_cols};
}

SubvectorSet::SubvectorSet(std::size_t count, std::size_t dim, std::vector<float> data)
    : count_(count), dim_(dim), data_(std::move(data)) {
    if (data_.size() != count * dim) {
        throw DimensionError("SubvectorSet: data length mismatch");
    }
}

SubvectorSet split_blocks(const Matrix& w, const BlockLayout& layout) {
    const BlockGrid g = make_grid(w.rows(), w.cols(), layout);
    SubvectorSet out(g.blocks(), g.dim());
    for_each_block_entry(g, [&](std::size_t b, std::size_t e, std::size_t r, std::size_t c) {
        out[b][e] = w(r, c);
    });
    return out;
}

Matrix join_blocks(const SubvectorSet& blocks, const BlockGrid& grid) {
    if (blocks.count() != grid.blocks() || blocks.dim() != grid.dim()) {
        throw DimensionError("join_blocks: subvector set does not match grid");
    }
    Matrix out(grid.rows(), grid.cols());
    for_each_block_entry(grid, [&](std::size_t b, std::size_t e, std::size_t r, std::size_t c) {
        out(r, c) = blocks[b][e];
    });
    return out;
}

double squared_distance(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc;
}

std::uint32_t nearest_centroid(const Codebook& cb, std::span<const float> v) {
    if (v.size() != cb.d) {
        throw DimensionError("nearest_centroid: dimension mismatch");
    }
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < cb.k; ++k) {
        const double d = squared_distance(v, cb.centroid(k));
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(k);
        }
    }
    return best;
}

IndexMatrix assign(const SubvectorSet& x, const Codebook& cb) {
    if (x.dim() != cb.d) {
        throw DimensionError("assign: subvector dim " + std::to_string(x.dim()) + " vs codebook dim " +
                             std::to_string(cb.d));
    }
    IndexMatrix idx{x.count(), 1, std::vector<std::uint32_t>(x.count())};
    for (std::size_t i = 0; i < x.count(); ++i) {
        idx.entries[i] = nearest_centroid(cb, x[i]);
    }
    return idx;
}

double pq_objective(const SubvectorSet& x, const Codebook& cb, const IndexMatrix& idx) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.count(); ++i) {
        acc += squared_distance(x[i], cb.centroid(idx.entries[i]));
    }
    return acc;
}

namespace {

Codebook seed_plus_plus(const SubvectorSet& x, std::size_t k, Rng& rng) {
    const std::size_t n = x.count();
    Codebook cb{k, x.dim(), std::vector<float>(k * x.dim()), std::nullopt};
    auto place = [&](std::size_t slot, std::size_t point) {
        std::copy(x[point].begin(), x[point].end(), cb.centroid(slot).begin());
    };
    place(0, rng.below(n));
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
        dist[i] = squared_distance(x[i], cb.centroid(0));
    }
    for (std::size_t slot = 1; slot < k; ++slot) {
        double total = 0.0;
        for (double d : dist) {
            total += d;
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            const double r = rng.uniform() * total;
            double cum = 0.0;
            pick = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (dist[i] <= 0.0) {
                    continue;
                }
                cum += dist[i];
                pick = i;
                if (cum > r) {
                    break;
                }
            }
        } else {
            pick = rng.below(n);
        }
        place(slot, pick);
        for (std::size_t i = 0; i < n; ++i) {
            dist[i] = std::min(dist[i], squared_distance(x[i], cb.centroid(slot)));
        }
    }
    return cb;
}

// Means step. A cluster keeps its old centroid if the float-rounded mean
// would not lower the cluster's error, so the objective never increases.
void update_centroids(const SubvectorSet& x, const IndexMatrix& idx, Codebook& cb) {
    const std::size_t d = cb.d;
    std::vector<double> sums(cb.k * d, 0.0);
    std::vector<std::size_t> counts(cb.k, 0);
    for (std::size_t i = 0; i < x.count(); ++i) {
        const std::size_t c = idx.entries[i];
        ++counts[c];
        for (std::size_t e = 0; e < d; ++e) {
            sums[c * d + e] += x[i][e];
        }
    }
    Codebook proposal = cb;
    for (std::size_t c = 0; c < cb.k; ++c) {
        if (counts[c] == 0) {
            continue;
        }
        for (std::size_t e = 0; e < d; ++e) {
            proposal.centroids[c * d + e] =
                static_cast<float>(sums[c * d + e] / static_cast<double>(counts[c]));
        }
    }
    std::vector<double> old_err(cb.k, 0.0), new_err(cb.k, 0.0);
    for (std::size_t i = 0; i < x.count(); ++i) {
        const std::size_t c = idx.entries[i];
        old_err[c] += squared_distance(x[i], cb.centroid(c));
        new_err[c] += squared_distance(x[i], proposal.centroid(c));
    }
    for (std::size_t c = 0; c < cb.k; ++c) {
        if (counts[c] != 0 && new_err[c] <= old_err[c]) {
            std::copy(proposal.centroid(c).begin(), proposal.centroid(c).end(), cb.centroid(c).begin());
        }
    }

    // Empty-cluster repair: move to the point currently worst served.
    std::vector<double> dist(x.count());
    for (std::size_t i = 0; i < x.count(); ++i) {
        dist[i] = squared_distance(x[i], cb.centroid(idx.entries[i]));
    }
    for (std::size_t c = 0; c < cb.k; ++c) {
        if (counts[c] != 0) {
            continue;
        }
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        if (dist[far] <= 0.0) {
            break;
        }
        std::copy(x[far].begin(), x[far].end(), cb.centroid(c).begin());
        dist[far] = 0.0;
    }
}

} // namespace

KMeansResult kmeans_fit(const SubvectorSet& x, std::size_t k, int iters, Rng& rng, double tol) {
    if (x.count() == 0) {
        throw std::invalid_argument("kmeans_fit: no subvectors");
    }
    if (k == 0) {
        throw std::invalid_argument("kmeans_fit: K must be at least 1");
    }
    KMeansResult res;
    res.codebook = seed_plus_plus(x, k, rng);
    res.indices = assign(x, res.codebook);
    double prev = pq_objective(x, res.codebook, res.indices);
    res.history.push_back(prev);
    for (int it = 0; it < iters; ++it) {
        update_centroids(x, res.indices, res.codebook);
        res.indices = assign(x, res.codebook);
        const double obj = pq_objective(x, res.codebook, res.indices);
        res.history.push_back(obj);
        const bool converged = prev - obj <= tol * prev;
        prev = obj;
        if (converged) {
            break;
        }
    }
    res.objective = prev;
    return res;
}

Matrix reconstruct(const Codebook& cb, const IndexMatrix& idx, const BlockLayout& layout) {
    if (layout.dim() != cb.d) {
        throw DimensionError("reconstruct: layout dimension does not match codebook");
    }
    if (idx.entries.size() != idx.m * idx.q) {
        throw DimensionError("reconstruct: index matrix shape mismatch");
    }
    const BlockGrid g{layout, idx.m, idx.q};
    Matrix out(g.rows(), g.cols());
    for (std::uint32_t i : idx.entries) {
        if (i >= cb.k) {
            throw std::out_of_range("reconstruct: index " + std::to_string(i) + " >= K=" +
                                    std::to_string(cb.k));
        }
    }
    for_each_block_entry(g, [&](std::size_t b, std::size_t e, std::size_t r, std::size_t c) {
        out(r, c) = cb.centroids[idx.entries[b] * cb.d + e];
    });
    return out;
}

Codebook finetune_centroids(const Codebook& cb, const IndexMatrix& idx, const SubvectorSet& block_grads,
                            double eta) {
    if (!(eta > 0.0)) {
        throw std::invalid_argument("finetune_centroids: eta must be positive");
    }
    if (block_grads.count() != idx.size() || block_grads.dim() != cb.d) {
        throw DimensionError("finetune_centroids: gradients not aligned with indices");
    }
    const std::size_t d = cb.d;
    std::vector<double> sums(cb.k * d, 0.0);
    std::vector<std::size_t> counts(cb.k, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t c = idx.entries[i];
        ++counts[c];
        for (std::size_t e = 0; e < d; ++e) {
            sums[c * d + e] += block_grads[i][e];
        }
    }
    Codebook out = cb;
    out.int8.reset();
    for (std::size_t c = 0; c < cb.k; ++c) {
        if (counts[c] == 0) {
            continue;
        }
        for (std::size_t e = 0; e < d; ++e) {
            const double mean = sums[c * d + e] / static_cast<double>(counts[c]);
            out.centroids[c * d + e] = static_cast<float>(cb.centroids[c * d + e] - eta * mean);
        }
    }
    return out;
}

Codebook compress_centroids_int8(const Codebook& cb) {
    const Matrix values(cb.k, cb.d, cb.centroids);
    const QuantParams q = calibrate_minmax(values, 8);
    const ScalarQuantizedTensor t = quantize_tensor(values, q);
    Codebook out = cb;
    const Matrix deq = t.dequantize();
    out.centroids.assign(deq.values().begin(), deq.values().end());
    out.int8 = Int8Centroids{q, t.packed_codes};
    return out;
}

unsigned index_bits(std::size_t k) {
    unsigned bits = 0;
    while ((std::size_t{1} << bits) < k) {
        ++bits;
    }
    return bits;
}

std::uint64_t storage_bits(std::uint64_t k, std::uint64_t d, std::uint64_t m, std::uint64_t p,
                           std::uint64_t n) {
    return 8 * k * d + index_bits(k) * m * p + 8 * n;
}

PqResult pq_quantize(const Matrix& w, const BlockLayout& layout, std::size_t k, int iters, Rng& rng) {
    const BlockGrid g = make_grid(w.rows(), w.cols(), layout);
    const SubvectorSet blocks = split_blocks(w, layout);
    KMeansResult km = kmeans_fit(blocks, k, iters, rng);
    PqResult out;
    out.tensor.rows = w.rows();
    out.tensor.cols = w.cols();
    out.tensor.layout = layout;
    out.tensor.codebook = std::move(km.codebook);
    out.tensor.indices = std::move(km.indices);
    out.tensor.indices.m = g.m;
    out.tensor.indices.q = g.q;
    out.objective = km.objective;
    out.history = std::move(km.history);
    return out;
}

} // namespace qnoise
