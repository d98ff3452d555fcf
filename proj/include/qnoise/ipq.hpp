#pragma once

#include "qnoise/network.hpp"
#include "qnoise/pq.hpp"
#include "qnoise/train.hpp"

#include <optional>
#include <string>
#include <vector>

namespace qnoise {

/// Largest of 8, 4, 2, 1 rows dividing the weight, one column wide.
BlockLayout default_layout(const Matrix& w);

/// Parameter stores in order of first use, input to output.
std::vector<std::size_t> default_order(const Network& net);

/// Input-to-output order with whole structure classes moved in the given sequence.
std::vector<std::size_t> structure_order(const Network& net, const std::vector<LayerRole>& roles);

struct IpqConfig {
    /// Parameter-store indices; empty means default_order().
    std::vector<std::size_t> order;
    /// Per parameter store; empty means default_layout() for each.
    std::vector<BlockLayout> layouts;
    std::size_t centroids = kDefaultCentroids;
    int kmeans_iters = kDefaultKMeansIters;
    int finetune_steps = 100;
    double lr = 0.01;          // still-unquantized weights and biases
    double centroid_lr = 0.01; // mean-gradient centroid step
    std::size_t batch_size = 64;

    void validate(const Network& net) const;
};

struct LayerReport {
    std::size_t param = 0;
    std::size_t k = 0;
    std::size_t d = 0;
    double objective = 0.0;
    std::uint64_t bits = 0;
};

/// A network whose weights are (partly) product-quantized. net always holds
/// the dequantized weights used at inference.
struct CompressedNetwork {
    Network net;
    std::vector<std::optional<PqTensor>> pq; // per parameter store
    std::vector<std::optional<QuantParams>> activation_quant; // per layer, empty when unused
    std::vector<LayerReport> report;

    /// Rewrites net's weights from the current codebooks.
    void sync();
    std::uint64_t total_bits() const;
    Matrix forward(const Matrix& x) const;
    EvalResult evaluate(const Dataset& data) const;
};

/// Every layer quantized independently; layer i uses rng.derive(i).
CompressedNetwork quantize_one_shot(const Network& net, const std::vector<BlockLayout>& layouts, std::size_t k,
                                    Rng& rng, int kmeans_iters = kDefaultKMeansIters);

/// Layer-by-layer PQ. After each layer is quantized, finetune_steps minibatch
/// steps reduce distill_loss against the teacher: unquantized layers take
/// plain gradient steps, quantized ones move only their centroids by the mean
/// gradient of their assigned blocks. Assignments never change.
CompressedNetwork quantize_iterative(const Network& net, const Network& teacher, const IpqConfig& config,
                                     const Dataset& data, Rng& rng);

/// Mean squared difference over all entries; grad gets ∂/∂student when given.
double distill_loss(const Matrix& student, const Matrix& teacher, Matrix* grad = nullptr);

/// Frozen N-bit quantization for the input of every hidden layer, observed
/// over the given batches. The network input itself stays unquantized.
std::vector<std::optional<QuantParams>> calibrate_activations(const Network& net,
                                                               const std::vector<Matrix>& batches, int bits);

/// int8 centroids everywhere, plus 8-bit activations from calibrate_activations.
CompressedNetwork combine_with_int8(const CompressedNetwork& c, const std::vector<Matrix>& calibration_batches);

std::string layer_report_csv(const std::vector<LayerReport>& report);

} // namespace qnoise
