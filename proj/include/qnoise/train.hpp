#pragma once

#include "qnoise/network.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace qnoise {

/// Features (one row per example) with integer class labels.
struct Dataset {
    Matrix x;
    std::vector<int> y;
    std::size_t classes = 0;

    std::size_t size() const { return y.size(); }
    void validate() const;
    Dataset subset(std::span<const std::size_t> rows) const;
};

enum class OptimizerKind { sgd_momentum, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::sgd_momentum;
    double lr = 0.05;
    double momentum = 0.9;
    double beta2 = 0.999; // adam
    double weight_decay = 0.0;
    /// Cosine decay of lr towards 0 over the run when true.
    bool cosine_schedule = true;
    int epochs = 10;
    std::size_t batch_size = 64;
    std::vector<NoiseSpec> noise;
    double layerdrop = 0.0;
    /// Whole-tensor fake quantization of every weight on every forward.
    std::optional<int> qat_bits;
    int kmeans_iters = kDefaultKMeansIters;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainResult {
    Network net;
    std::vector<EpochMetrics> history;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Minibatch training. Shuffling, weight noise and LayerDrop draw from
/// separate streams derived from config.seed, so QAT and p = 1 intN noise see
/// identical batches. pq_exact codebooks are rebuilt by k-means on the current
/// weights at the start of every epoch.
TrainResult train(Network net, const Dataset& data, const TrainConfig& config);

/// Continues training an already trained network with the configured noise.
TrainResult finetune_with_noise(const Network& trained, const Dataset& data, const TrainConfig& config);

/// Eval-mode predictions, mean loss and accuracy, in batches.
struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};
EvalResult evaluate(const Network& net, const Dataset& data,
                    const std::vector<std::optional<QuantParams>>* activation_quant = nullptr,
                    std::size_t batch_size = 1024);

/// Per-layer inputs seen in eval mode for the given examples.
std::vector<Matrix> layer_inputs(const Network& net, const Matrix& x);

std::string metrics_csv(const std::vector<EpochMetrics>& history);

} // namespace qnoise
