#pragma once

#include "qnoise/dataset.hpp"
#include "qnoise/ipq.hpp"
#include "qnoise/model_store.hpp"
#include "qnoise/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace qnoise {

enum class Task { classify, char_lm };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// How the network is prepared for quantization.
///   none         plain training
///   qat          every forward sees the target quantizer (p = 1)
///   quant_noise  the target quantizer's noise on a fraction `rate` of blocks
///   finetune     plain training, then finetune_epochs of quant_noise
struct NoiseMode {
    enum class Kind { none, qat, quant_noise, finetune };
    Kind kind = Kind::none;
    double rate = 0.0;

    /// "none", "qat", "qn0.1", "ft0.1".
    std::string name() const;
    static NoiseMode parse(const std::string& s);
};

/// fp32, int8, int4, ipq, ipq_int8.
enum class Scheme { fp32, int8, int4, ipq, ipq_int8 };

std::string to_string(Scheme s);
Scheme scheme_from_string(const std::string& s);
bool is_pq(Scheme s);
int scheme_bits(Scheme s); // 4 or 8 for scalar schemes, 0 otherwise

struct ModelConfig {
    std::size_t width = 64;
    std::size_t blocks = 4;
    bool share = false;
    std::size_t hidden = 128; // char-lm
};

struct QuantConfig {
    /// Weight calibration for scalar schemes: "minmax" (the quantizer the
    /// training noise uses) or "histogram".
    std::string calibration = "minmax";
    /// Quantize hidden activations to the scheme's bit width.
    bool activations = true;
    std::size_t calibration_batches = 4;
    std::size_t centroids = 32;
    std::size_t block_rows = 8;
    /// Noise used for PQ schemes in quant_noise/finetune modes: "proxy" or "pq".
    std::string pq_noise = "proxy";
    int finetune_steps = 50;
    double ipq_lr = 0.01;
    double centroid_lr = 0.01;
    /// Structure classes quantized first, e.g. {"head", "input"}; empty keeps input to output.
    std::vector<std::string> order;
};

struct SweepConfig {
    /// noise_rate, centroids, block_size or structure_order.
    std::string axis = "noise_rate";
    std::vector<double> values;
    std::vector<std::vector<std::string>> orders;
};

struct ExperimentConfig {
    Task task = Task::classify;
    MixtureConfig mixture;
    CharLmConfig char_lm;
    std::filesystem::path corpus;
    ModelConfig model;
    TrainConfig train;
    int finetune_epochs = 5;
    bool prune = false;
    std::vector<Scheme> schemes;
    std::vector<NoiseMode> modes{NoiseMode{}};
    QuantConfig quant;
    SweepConfig sweep;
    std::vector<std::uint64_t> seeds{1};
    std::filesystem::path out_dir = "out";

    void validate() const;
};

/// Reads the JSON configuration described in docs/config.md.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& json_text);

struct ResultRow {
    std::string scheme;
    std::string mode;
    std::uint64_t seed = 0;
    std::string x; // sweep point, empty outside sweeps
    std::size_t size_bytes = 0;
    double compression = 1.0;
    std::string metric_name;
    double metric = 0.0;
    double float_metric = 0.0; // before quantization
    std::string status = "ok";
};

/// Datasets and the untrained network for one seed.
DataSplit make_data(const ExperimentConfig& cfg, std::uint64_t seed);
Network make_network(const ExperimentConfig& cfg, const DataSplit& data, std::uint64_t seed);

/// The TrainConfig a noise mode uses when targeting a scheme.
TrainConfig train_config_for(const ExperimentConfig& cfg, const NoiseMode& mode, Scheme scheme, std::uint64_t seed);

/// Trains (and finetunes) one network for a mode and scheme.
TrainResult train_for(const ExperimentConfig& cfg, const NoiseMode& mode, Scheme scheme, const DataSplit& data,
                      const Network& init, std::uint64_t seed);

struct QuantizedModel {
    Model model;
    Network net; // dequantized weights
    std::vector<std::optional<QuantParams>> activation_quant;
    std::vector<LayerReport> layers; // PQ schemes only
};

/// The first calibration_batches training minibatches, in order.
std::vector<Matrix> calibration_batches(const ExperimentConfig& cfg, const Dataset& train);

/// Compresses a trained network with one scheme.
QuantizedModel apply_scheme(const ExperimentConfig& cfg, Scheme scheme, const Network& trained,
                            const DataSplit& data, std::uint64_t seed);

/// accuracy or perplexity on the validation split.
double eval_metric(const ExperimentConfig& cfg, const Network& net, const DataSplit& data,
                   const std::vector<std::optional<QuantParams>>* activation_quant = nullptr);
std::string metric_name(Task t);

/// Rows for every (mode, scheme, seed). Training failures become rows with a
/// failure status; the run continues.
std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg);

/// One run_experiment per grid point of cfg.sweep, on up to `threads` workers.
/// Output order does not depend on scheduling.
std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg, unsigned threads = 0);

/// The grid of a sweep, with defaults filled in.
std::vector<std::string> sweep_points(const ExperimentConfig& cfg);
ExperimentConfig sweep_point_config(const ExperimentConfig& cfg, const std::string& point);

std::vector<ResultRow> sorted_rows(std::vector<ResultRow> rows);
std::string rows_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_rows_csv(const std::string& text);
/// x, scheme, mode, median, min, max of the metric over seeds.
std::string sweep_csv(const std::vector<ResultRow>& rows);
/// Size / Compression / Metric table with medians over seeds.
std::string report_markdown(const std::vector<ResultRow>& rows);

double median(std::vector<double> v);

} // namespace qnoise
