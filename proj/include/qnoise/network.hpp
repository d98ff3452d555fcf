#pragma once

#include "qnoise/matrix.hpp"
#include "qnoise/noise.hpp"
#include "qnoise/pq.hpp"
#include "qnoise/rng.hpp"
#include "qnoise/scalar_quant.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qnoise {

enum class Activation { identity, relu };

/// Structure class of a layer, used by per-structure block sizes and by the
/// quantization-order ablation.
enum class LayerRole { input, hidden, head };

std::string to_string(LayerRole role);
LayerRole layer_role_from_string(const std::string& s);

/// Weight (in × out, used as y = x W + b) and bias (1 × out).
struct Param {
    Matrix weight;
    Matrix bias;
};

struct Layer {
    std::size_t param = 0;
    Activation activation = Activation::relu;
    bool residual = false;
    LayerRole role = LayerRole::hidden;
    int share_group = -1; // layers with the same group alias one Param
};

/// Feed-forward stack: residual layers compute h + act(h W + b); the others
/// compute act(h W + b). The last layer produces logits for softmax cross-entropy.
class Network {
public:
    std::vector<Param> params;
    std::vector<Layer> layers;

    /// input (in → width, ReLU), `blocks` residual layers, linear head.
    /// With share_adjacent, residual layers are tied in chunks of two.
    static Network residual_mlp(std::size_t in, std::size_t width, std::size_t blocks, std::size_t classes,
                                Rng& rng, bool share_adjacent = false);
    /// Concatenated one-hot context → hidden (ReLU) → vocabulary logits.
    static Network char_mlp(std::size_t context, std::size_t vocab, std::size_t hidden, Rng& rng);

    std::size_t in_dim() const;
    std::size_t out_dim() const;
    std::size_t parameter_count() const;
    std::vector<std::size_t> residual_layers() const;
    /// Layers using a given parameter store.
    std::vector<std::size_t> layers_of(std::size_t param) const;
    void validate() const;
};

bool bitwise_equal(const Network& a, const Network& b);

enum class Mode { train, eval };

struct ForwardOptions {
    Mode mode = Mode::eval;
    /// Weight noise, applied in list order (first entry acts first) in train mode.
    std::vector<NoiseSpec> noise;
    /// Probability of dropping each residual branch in train mode.
    double layerdrop = 0.0;
    /// QAT: every weight is fake-quantized as a whole in train mode.
    std::optional<int> qat_bits;
    /// Codebooks per param for pq_exact noise.
    const std::vector<std::optional<Codebook>>* codebooks = nullptr;
    /// Frozen per-layer input quantization (applied in both modes).
    const std::vector<std::optional<QuantParams>>* activation_quant = nullptr;
    /// Separate stream for LayerDrop decisions; the noise rng is used when null.
    Rng* layerdrop_rng = nullptr;
};

/// Tensors kept by forward() for backward().
struct ForwardCache {
    std::vector<Matrix> inputs;       // layer inputs after optional activation quantization
    std::vector<Matrix> weights;      // weight actually used (W_noise in train mode)
    std::vector<Matrix> preact;       // x W + b
    std::vector<bool> dropped;        // LayerDrop decision per layer
    std::vector<std::optional<Matrix>> grad_mask; // 0 where a non-STE noise replaced a weight
    Matrix logits;
    bool valid = false;
};

/// Largest block_rows ≤ preferred.block_rows (halving) that divides the rows,
/// and likewise for columns.
BlockLayout fit_layout(std::size_t rows, std::size_t cols, const BlockLayout& preferred);

/// Runs the network. Train mode draws noise and LayerDrop decisions from rng;
/// eval mode never touches rng (which may then be null).
Matrix forward(const Network& net, const Matrix& x, const ForwardOptions& opts, Rng* rng,
               ForwardCache* cache = nullptr);

struct Gradients {
    std::vector<Matrix> weight;
    std::vector<Matrix> bias;

    static Gradients zeros_like(const Network& net);
};

/// Reverse pass through the cached (possibly noisy) graph. Weight gradients
/// use the straight-through estimator: ∂W_noise/∂W is taken as identity for
/// quantization noise. Dropped residual branches receive zero gradient.
Gradients backward_ste(const Network& net, const ForwardCache& cache, const Matrix& dlogits);

/// Mean softmax cross-entropy; fills dlogits (same shape as logits) when given.
double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits);

/// Removes alternating residual units, starting with the first. A unit is a
/// residual layer, or a chunk of layers sharing parameters.
Network prune_every_other(const Network& net);

} // namespace qnoise
