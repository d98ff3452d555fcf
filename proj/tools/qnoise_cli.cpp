#include "qnoise/experiment.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace qnoise;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
    auto* opt = cmd->add_option("--config", c.config, "JSON experiment configuration");
    if (config_required) opt->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Run this single seed instead of the configured list");
    cmd->add_option("--out", c.out, "Output directory (default: out_dir from the config)");
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed) cfg.seeds = {*c.seed};
    if (!c.out.empty()) cfg.out_dir = c.out;
    fs::create_directories(cfg.out_dir);
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    std::cout << "wrote " << path.string() << "\n";
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Scheme target_scheme(const ExperimentConfig& cfg) {
    for (Scheme s : cfg.schemes) {
        if (s != Scheme::fp32) return s;
    }
    return Scheme::fp32;
}

/// A network shaped like the stored model: the configured architecture, pruned if needed.
Network network_for(const ExperimentConfig& cfg, const DataSplit& data, const Model& model, std::uint64_t seed) {
    Network net = make_network(cfg, data, seed);
    if (model.tensors.size() != 2 * net.params.size()) net = prune_every_other(net);
    load_weights(net, model);
    return net;
}

/// Bit width whose activation quantization a stored model implies.
int activation_bits(const Model& model) {
    for (const auto& t : model.tensors) {
        if (t.scheme == SchemeTag::int_n) return t.scalar.bits;
        if (t.scheme == SchemeTag::pq_int8) return 8;
    }
    return 0;
}

int cmd_train(const Common& c, const std::string& mode_name) {
    const ExperimentConfig cfg = resolve(c);
    const NoiseMode mode = mode_name.empty() ? cfg.modes.front() : NoiseMode::parse(mode_name);
    const Scheme scheme = target_scheme(cfg);
    const std::uint64_t seed = cfg.seeds.front();
    const DataSplit data = make_data(cfg, seed);
    const TrainResult r = train_for(cfg, mode, scheme, data, make_network(cfg, data, seed), seed);
    write_model_file(cfg.out_dir / "model.qnz", raw_model(r.net));
    write_text(cfg.out_dir / "metrics.csv", metrics_csv(r.history));
    std::printf("%s %s: val %s %.4f\n", mode.name().c_str(), to_string(scheme).c_str(), metric_name(cfg.task).c_str(),
                eval_metric(cfg, r.net, data));
    return 0;
}

int cmd_quantize(const Common& c, const std::string& model_path) {
    const ExperimentConfig cfg = resolve(c);
    const std::uint64_t seed = cfg.seeds.front();
    const DataSplit data = make_data(cfg, seed);
    Network net = network_for(cfg, data, read_model_file(model_path), seed);
    if (cfg.prune && net.params.size() == make_network(cfg, data, seed).params.size()) net = prune_every_other(net);
    const std::vector<Scheme> schemes = cfg.schemes.empty() ? std::vector<Scheme>{Scheme::fp32} : cfg.schemes;
    for (Scheme s : schemes) {
        const QuantizedModel q = apply_scheme(cfg, s, net, data, seed);
        write_model_file(cfg.out_dir / (to_string(s) + ".qnz"), q.model);
        if (!q.layers.empty()) write_text(cfg.out_dir / (to_string(s) + "_layers.csv"), layer_report_csv(q.layers));
        const SizeReport size = size_report(q.model);
        std::printf("%s: %zu bytes, x%.1f, %s %.4f\n", to_string(s).c_str(), size.total_bytes, size.ratio,
                    metric_name(cfg.task).c_str(), eval_metric(cfg, q.net, data, &q.activation_quant));
    }
    return 0;
}

int cmd_eval(const Common& c, const std::string& model_path) {
    const ExperimentConfig cfg = resolve(c);
    const std::uint64_t seed = cfg.seeds.front();
    const DataSplit data = make_data(cfg, seed);
    const Model model = read_model_file(model_path);
    const Network net = network_for(cfg, data, model, seed);
    std::vector<std::optional<QuantParams>> aq;
    const int bits = activation_bits(model);
    if (bits > 0 && cfg.quant.activations) aq = calibrate_activations(net, calibration_batches(cfg, data.train), bits);
    const SizeReport size = size_report(model);
    ResultRow row;
    row.scheme = fs::path(model_path).stem().string();
    row.mode = "-";
    row.seed = seed;
    row.size_bytes = size.total_bytes;
    row.compression = size.ratio;
    row.metric_name = metric_name(cfg.task);
    row.metric = eval_metric(cfg, net, data, &aq);
    row.float_metric = row.metric;
    write_text(cfg.out_dir / "eval.csv", rows_csv({row}));
    std::printf("%s: %zu bytes, x%.1f, %s %.4f\n", row.scheme.c_str(), row.size_bytes, row.compression,
                row.metric_name.c_str(), row.metric);
    return 0;
}

void write_report(const fs::path& dir, const std::vector<ResultRow>& rows) {
    write_text(dir / "report.csv", rows_csv(sorted_rows(rows)));
    const std::string md = report_markdown(rows);
    write_text(dir / "report.md", md);
    std::cout << md;
}

int cmd_experiment(const Common& c) {
    const ExperimentConfig cfg = resolve(c);
    const std::vector<ResultRow> rows = run_experiment(cfg);
    write_text(cfg.out_dir / "rows.csv", rows_csv(rows));
    write_report(cfg.out_dir, rows);
    return 0;
}

int cmd_sweep(const Common& c, unsigned threads) {
    const ExperimentConfig cfg = resolve(c);
    const std::vector<ResultRow> rows = run_sweep(cfg, threads);
    write_text(cfg.out_dir / "rows.csv", rows_csv(rows));
    write_text(cfg.out_dir / "sweep.csv", sweep_csv(rows));
    write_report(cfg.out_dir, rows);
    return 0;
}

int cmd_report(const Common& c, const std::string& rows_path) {
    const ExperimentConfig cfg = resolve(c);
    const fs::path in = rows_path.empty() ? cfg.out_dir / "rows.csv" : fs::path(rows_path);
    std::vector<ResultRow> rows = parse_rows_csv(read_text(in));
    if (c.seed) std::erase_if(rows, [&](const ResultRow& r) { return r.seed != *c.seed; });
    write_report(cfg.out_dir, rows);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantization noise training and compression experiments"};
    app.require_subcommand(1);

    Common train_opts, quant_opts, eval_opts, sweep_opts, report_opts, exp_opts;
    std::string mode, quant_model, eval_model, rows_path;
    unsigned threads = 0;

    auto* train_cmd = app.add_subcommand("train", "Train one network and save it as model.qnz");
    add_common(train_cmd, train_opts);
    train_cmd->add_option("--mode", mode, "Noise mode, e.g. none, qat, qn0.1, ft0.1 (default: first configured)");

    auto* quant_cmd = app.add_subcommand("quantize", "Compress a trained model with every configured scheme");
    add_common(quant_cmd, quant_opts);
    quant_cmd->add_option("--model", quant_model, "Trained model file")->required()->check(CLI::ExistingFile);

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a stored model on the validation split");
    add_common(eval_cmd, eval_opts);
    eval_cmd->add_option("--model", eval_model, "Model file")->required()->check(CLI::ExistingFile);

    auto* exp_cmd = app.add_subcommand("experiment", "Run the full mode x scheme x seed matrix");
    add_common(exp_cmd, exp_opts);

    auto* sweep_cmd = app.add_subcommand("sweep", "Run the configured ablation sweep");
    add_common(sweep_cmd, sweep_opts);
    sweep_cmd->add_option("--threads", threads, "Parallel grid points (default: hardware threads)");

    auto* report_cmd = app.add_subcommand("report", "Rebuild report.md and report.csv from a rows CSV");
    add_common(report_cmd, report_opts, false);
    report_cmd->add_option("--rows", rows_path, "Rows CSV (default: <out>/rows.csv)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) return cmd_train(train_opts, mode);
        if (*quant_cmd) return cmd_quantize(quant_opts, quant_model);
        if (*eval_cmd) return cmd_eval(eval_opts, eval_model);
        if (*exp_cmd) return cmd_experiment(exp_opts);
        if (*sweep_cmd) return cmd_sweep(sweep_opts, threads);
        if (*report_cmd) return cmd_report(report_opts, rows_path);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "qnoise: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "qnoise: error: %s\n", e.what());
        return 1;
    }
    return 0;
}
