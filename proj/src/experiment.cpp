#include "qnoise/experiment.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace qnoise {

using json = nlohmann::json;

namespace {

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

std::string number(double v) { return fmt("%.17g", v); }
std::string short_number(double v) { return fmt("%g", v); }

std::string sanitize(std::string s) {
    for (char& c : s) {
        if (c == ',' || c == '\n' || c == '\r' || c == '|') c = ';';
    }
    return s;
}

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

void check_keys(const json& j, const char* section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(std::string("config: '") + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
            throw ConfigError(std::string("config: unknown key '") + key + "' in '" + section + "'");
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
        }
    }
}

std::vector<std::vector<std::string>> role_permutations() {
    std::vector<std::string> roles = {"head", "hidden", "input"};
    std::vector<std::vector<std::string>> out;
    do {
        out.push_back(roles);
    } while (std::next_permutation(roles.begin(), roles.end()));
    return out;
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
    return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

} // namespace

std::string to_string(Task t) { return t == Task::classify ? "classify" : "char-lm"; }

Task task_from_string(const std::string& s) {
    if (s == "classify" || s == "synthetic-classify") return Task::classify;
    if (s == "char-lm" || s == "char_lm") return Task::char_lm;
    throw ConfigError("config: unknown task '" + s + "'");
}

std::string NoiseMode::name() const {
    switch (kind) {
    case Kind::none: return "none";
    case Kind::qat: return "qat";
    case Kind::quant_noise: return "qn" + short_number(rate);
    case Kind::finetune: return "ft" + short_number(rate);
    }
    return "none";
}

NoiseMode NoiseMode::parse(const std::string& s) {
    NoiseMode m;
    auto rate_of = [&](const std::string& tail) {
        std::size_t used = 0;
        double r = 0.0;
        try {
            r = std::stod(tail, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tail.size() || !(r >= 0.0 && r <= 1.0)) throw ConfigError("config: bad noise mode '" + s + "'");
        return r;
    };
    if (s == "none" || s == "baseline") return m;
    if (s == "qat") {
        m.kind = Kind::qat;
        m.rate = 1.0;
    } else if (s.rfind("qn", 0) == 0) {
        m.kind = Kind::quant_noise;
        m.rate = rate_of(s.substr(2));
    } else if (s.rfind("ft", 0) == 0) {
        m.kind = Kind::finetune;
        m.rate = rate_of(s.substr(2));
    } else {
        throw ConfigError("config: unknown noise mode '" + s + "'");
    }
    return m;
}

std::string to_string(Scheme s) {
    switch (s) {
    case Scheme::fp32: return "fp32";
    case Scheme::int8: return "int8";
    case Scheme::int4: return "int4";
    case Scheme::ipq: return "ipq";
    case Scheme::ipq_int8: return "ipq_int8";
    }
    return "fp32";
}

Scheme scheme_from_string(const std::string& s) {
    for (Scheme x : {Scheme::fp32, Scheme::int8, Scheme::int4, Scheme::ipq, Scheme::ipq_int8}) {
        if (to_string(x) == s) return x;
    }
    throw ConfigError("config: unknown scheme '" + s + "'");
}

bool is_pq(Scheme s) { return s == Scheme::ipq || s == Scheme::ipq_int8; }
int scheme_bits(Scheme s) { return s == Scheme::int4 ? 4 : s == Scheme::int8 ? 8 : 0; }

void ExperimentConfig::validate() const {
    train.validate();
    if (seeds.empty()) throw ConfigError("config: at least one seed is required");
    if (modes.empty()) throw ConfigError("config: at least one noise mode is required");
    if (model.width == 0 || model.hidden == 0) throw ConfigError("config: model sizes must be positive");
    if (finetune_epochs < 0) throw ConfigError("config: finetune_epochs must be >= 0");
    if (quant.calibration != "histogram" && quant.calibration != "minmax") {
        throw ConfigError("config: calibration must be 'histogram' or 'minmax'");
    }
    if (quant.pq_noise != "proxy" && quant.pq_noise != "pq") throw ConfigError("config: pq_noise must be 'proxy' or 'pq'");
    if (quant.centroids == 0 || quant.block_rows == 0) throw ConfigError("config: centroids and block_rows must be >= 1");
    if (quant.calibration_batches == 0) throw ConfigError("config: calibration_batches must be >= 1");
    for (const auto& r : quant.order) layer_role_from_string(r);
    for (double v : sweep.values) {
        if (!std::isfinite(v)) throw ConfigError("config: sweep values must be finite");
    }
    static const char* axes[] = {"noise_rate", "centroids", "block_size", "structure_order"};
    if (std::find(std::begin(axes), std::end(axes), sweep.axis) == std::end(axes)) {
        throw ConfigError("config: unknown sweep axis '" + sweep.axis + "'");
    }
}

ExperimentConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j, "top level",
               {"task", "data", "model", "train", "quant", "schemes", "modes", "seeds", "sweep", "finetune_epochs",
                "prune", "out_dir"});
    ExperimentConfig c;
    if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());
    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, "data",
                   {"train", "val", "classes", "spread", "components", "extent", "corpus", "context", "max_examples",
                    "val_fraction"});
        read(d, "train", c.mixture.train);
        read(d, "val", c.mixture.val);
        read(d, "classes", c.mixture.classes);
        read(d, "spread", c.mixture.spread);
        read(d, "components", c.mixture.components);
        read(d, "extent", c.mixture.extent);
        std::string corpus;
        read(d, "corpus", corpus);
        if (!corpus.empty()) c.corpus = corpus;
        read(d, "context", c.char_lm.context);
        read(d, "max_examples", c.char_lm.max_examples);
        read(d, "val_fraction", c.char_lm.val_fraction);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, "model", {"width", "blocks", "share", "hidden"});
        read(m, "width", c.model.width);
        read(m, "blocks", c.model.blocks);
        read(m, "share", c.model.share);
        read(m, "hidden", c.model.hidden);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train",
                   {"optimizer", "lr", "momentum", "weight_decay", "cosine", "epochs", "batch_size", "layerdrop",
                    "kmeans_iters"});
        std::string opt = to_string(c.train.optimizer);
        read(t, "optimizer", opt);
        c.train.optimizer = optimizer_from_string(opt);
        read(t, "lr", c.train.lr);
        read(t, "momentum", c.train.momentum);
        read(t, "weight_decay", c.train.weight_decay);
        read(t, "cosine", c.train.cosine_schedule);
        read(t, "epochs", c.train.epochs);
        read(t, "batch_size", c.train.batch_size);
        read(t, "layerdrop", c.train.layerdrop);
        read(t, "kmeans_iters", c.train.kmeans_iters);
    }
    if (j.contains("quant")) {
        const json& q = j.at("quant");
        check_keys(q, "quant",
                   {"calibration", "activations", "calibration_batches", "centroids", "block_rows", "pq_noise",
                    "finetune_steps", "ipq_lr", "centroid_lr", "order"});
        read(q, "calibration", c.quant.calibration);
        read(q, "activations", c.quant.activations);
        read(q, "calibration_batches", c.quant.calibration_batches);
        read(q, "centroids", c.quant.centroids);
        read(q, "block_rows", c.quant.block_rows);
        read(q, "pq_noise", c.quant.pq_noise);
        read(q, "finetune_steps", c.quant.finetune_steps);
        read(q, "ipq_lr", c.quant.ipq_lr);
        read(q, "centroid_lr", c.quant.centroid_lr);
        read(q, "order", c.quant.order);
    }
    if (j.contains("schemes")) {
        std::vector<std::string> names;
        read(j, "schemes", names);
        for (const auto& n : names) c.schemes.push_back(scheme_from_string(n));
    }
    if (j.contains("modes")) {
        std::vector<std::string> names;
        read(j, "modes", names);
        c.modes.clear();
        for (const auto& n : names) c.modes.push_back(NoiseMode::parse(n));
    }
    read(j, "seeds", c.seeds);
    read(j, "finetune_epochs", c.finetune_epochs);
    read(j, "prune", c.prune);
    std::string out;
    read(j, "out_dir", out);
    if (!out.empty()) c.out_dir = out;
    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        check_keys(s, "sweep", {"axis", "values", "orders"});
        read(s, "axis", c.sweep.axis);
        read(s, "values", c.sweep.values);
        read(s, "orders", c.sweep.orders);
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

DataSplit make_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.task == Task::classify) {
        Rng rng(seed);
        return gaussian_mixture(cfg.mixture, rng);
    }
    const CharCorpus corpus = load_corpus(cfg.corpus.empty() ? default_corpus_path() : cfg.corpus);
    return char_lm_dataset(corpus, cfg.char_lm);
}

Network make_network(const ExperimentConfig& cfg, const DataSplit& data, std::uint64_t seed) {
    Rng rng = Rng(seed).derive(10);
    if (cfg.task == Task::classify) {
        return Network::residual_mlp(data.train.x.cols(), cfg.model.width, cfg.model.blocks, data.train.classes, rng,
                                     cfg.model.share);
    }
    const std::size_t vocab = data.train.classes;
    return Network::char_mlp(data.train.x.cols() / vocab, vocab, cfg.model.hidden, rng);
}

TrainConfig train_config_for(const ExperimentConfig& cfg, const NoiseMode& mode, Scheme scheme, std::uint64_t seed) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    tc.noise.clear();
    tc.qat_bits.reset();
    if (mode.kind == NoiseMode::Kind::none) return tc;
    if (scheme == Scheme::fp32) throw ConfigError("noise modes need a target quantization scheme");
    const BlockLayout layout{cfg.quant.block_rows, 1};
    if (mode.kind == NoiseMode::Kind::qat) {
        if (is_pq(scheme)) {
            tc.noise = {NoiseSpec::pq_exact(layout, cfg.quant.centroids, 1.0)};
        } else {
            tc.qat_bits = scheme_bits(scheme);
        }
        return tc;
    }
    if (is_pq(scheme)) {
        tc.noise = {cfg.quant.pq_noise == "pq" ? NoiseSpec::pq_exact(layout, cfg.quant.centroids, mode.rate)
                                               : NoiseSpec::pq_proxy(layout, mode.rate)};
    } else {
        tc.noise = {NoiseSpec::int_n(scheme_bits(scheme), mode.rate)};
    }
    if (mode.kind == NoiseMode::Kind::finetune) tc.epochs = cfg.finetune_epochs;
    return tc;
}

TrainResult train_for(const ExperimentConfig& cfg, const NoiseMode& mode, Scheme scheme, const DataSplit& data,
                      const Network& init, std::uint64_t seed) {
    if (mode.kind != NoiseMode::Kind::finetune) {
        return train(init, data.train, train_config_for(cfg, mode, scheme, seed));
    }
    TrainResult base = train(init, data.train, train_config_for(cfg, NoiseMode{}, scheme, seed));
    TrainResult ft = finetune_with_noise(base.net, data.train, train_config_for(cfg, mode, scheme, seed));
    const int offset = int(base.history.size());
    for (auto& m : ft.history) {
        m.epoch += offset;
        base.history.push_back(m);
    }
    ft.history = std::move(base.history);
    return ft;
}

QuantizedModel apply_scheme(const ExperimentConfig& cfg, Scheme scheme, const Network& trained, const DataSplit& data,
                            std::uint64_t seed) {
    QuantizedModel q;
    const std::vector<Matrix> batches = calibration_batches(cfg, data.train);
    switch (scheme) {
    case Scheme::fp32:
        q.model = raw_model(trained);
        q.net = trained;
        break;
    case Scheme::int8:
    case Scheme::int4: {
        const int bits = scheme_bits(scheme);
        for (const Param& p : trained.params) {
            const QuantParams qp = cfg.quant.calibration == "minmax" ? calibrate_minmax(p.weight, bits)
                                                                     : calibrate_histogram(p.weight, bits);
            q.model.tensors.push_back(CompressedTensor::from_scalar(quantize_tensor(p.weight, qp)));
            q.model.tensors.push_back(CompressedTensor::from_raw(p.bias));
        }
        q.net = trained;
        load_weights(q.net, q.model);
        if (cfg.quant.activations) q.activation_quant = calibrate_activations(q.net, batches, bits);
        break;
    }
    case Scheme::ipq:
    case Scheme::ipq_int8: {
        IpqConfig ic;
        for (const Param& p : trained.params) {
            ic.layouts.push_back(fit_layout(p.weight.rows(), 1, {cfg.quant.block_rows, 1}));
        }
        if (!cfg.quant.order.empty()) {
            std::vector<LayerRole> roles;
            for (const auto& r : cfg.quant.order) roles.push_back(layer_role_from_string(r));
            ic.order = structure_order(trained, roles);
        }
        ic.centroids = cfg.quant.centroids;
        ic.kmeans_iters = cfg.train.kmeans_iters;
        ic.finetune_steps = cfg.quant.finetune_steps;
        ic.lr = cfg.quant.ipq_lr;
        ic.centroid_lr = cfg.quant.centroid_lr;
        ic.batch_size = cfg.train.batch_size;
        Rng rng = Rng(seed).derive(20);
        CompressedNetwork c = quantize_iterative(trained, trained, ic, data.train, rng);
        if (scheme == Scheme::ipq_int8) {
            c = combine_with_int8(c, batches);
            if (!cfg.quant.activations) c.activation_quant.clear();
        }
        q.model = pq_model(c);
        q.net = c.net;
        q.activation_quant = c.activation_quant;
        q.layers = c.report;
        break;
    }
    }
    return q;
}

std::vector<Matrix> calibration_batches(const ExperimentConfig& cfg, const Dataset& train) {
    std::vector<Matrix> out;
    const std::size_t bs = cfg.train.batch_size;
    for (std::size_t b = 0; b < cfg.quant.calibration_batches; ++b) {
        const std::size_t start = b * bs;
        if (start >= train.size()) break;
        std::vector<std::size_t> rows(std::min(bs, train.size() - start));
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
        out.push_back(train.subset(rows).x);
    }
    return out;
}

std::string metric_name(Task t) { return t == Task::classify ? "accuracy" : "perplexity"; }

double eval_metric(const ExperimentConfig& cfg, const Network& net, const DataSplit& data,
                   const std::vector<std::optional<QuantParams>>* activation_quant) {
    if (activation_quant != nullptr && activation_quant->empty()) activation_quant = nullptr;
    const EvalResult r = evaluate(net, data.val, activation_quant);
    return cfg.task == Task::classify ? r.accuracy : perplexity(r.loss);
}

std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::vector<Scheme> schemes = cfg.schemes.empty() ? std::vector<Scheme>{Scheme::fp32} : cfg.schemes;
    std::vector<ResultRow> rows;
    for (std::uint64_t seed : cfg.seeds) {
        const DataSplit data = make_data(cfg, seed);
        const Network init = make_network(cfg, data, seed);
        std::map<std::string, TrainResult> trained;
        std::map<std::string, std::string> failures;
        for (const NoiseMode& mode : cfg.modes) {
            for (Scheme scheme : schemes) {
                if (mode.kind != NoiseMode::Kind::none && scheme == Scheme::fp32) continue;
                ResultRow row;
                row.scheme = to_string(scheme);
                row.mode = mode.name();
                row.seed = seed;
                row.metric_name = metric_name(cfg.task);
                const std::string key = mode.kind == NoiseMode::Kind::none
                                            ? "none"
                                            : mode.name() + ":" + (is_pq(scheme) ? "pq" : to_string(scheme));
                try {
                    if (failures.count(key)) throw TrainingDiverged(failures[key]);
                    auto it = trained.find(key);
                    if (it == trained.end()) {
                        try {
                            it = trained.emplace(key, train_for(cfg, mode, scheme, data, init, seed)).first;
                        } catch (const TrainingDiverged& e) {
                            failures[key] = e.what();
                            throw;
                        }
                    }
                    const Network net = cfg.prune ? prune_every_other(it->second.net) : it->second.net;
                    const QuantizedModel q = apply_scheme(cfg, scheme, net, data, seed);
                    const SizeReport size = size_report(q.model);
                    row.size_bytes = size.total_bytes;
                    row.compression = size.ratio;
                    row.float_metric = eval_metric(cfg, net, data);
                    row.metric = eval_metric(cfg, q.net, data, &q.activation_quant);
                } catch (const std::exception& e) {
                    row.status = sanitize(std::string("failed: ") + e.what());
                }
                rows.push_back(row);
            }
        }
    }
    return rows;
}

std::vector<std::string> sweep_points(const ExperimentConfig& cfg) {
    std::vector<std::string> out;
    const std::string& axis = cfg.sweep.axis;
    if (axis == "structure_order") {
        const auto orders = cfg.sweep.orders.empty() ? role_permutations() : cfg.sweep.orders;
        for (const auto& o : orders) out.push_back(join(o, ">"));
        return out;
    }
    std::vector<double> values = cfg.sweep.values;
    if (values.empty()) {
        if (axis == "noise_rate") values = {0, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
        if (axis == "centroids") values = {4, 8, 16, 32, 64};
        if (axis == "block_size") values = {1, 2, 4, 8};
    }
    for (double v : values) out.push_back(short_number(v));
    return out;
}

ExperimentConfig sweep_point_config(const ExperimentConfig& cfg, const std::string& point) {
    ExperimentConfig c = cfg;
    const std::string& axis = cfg.sweep.axis;
    if (axis == "structure_order") {
        c.quant.order = split(point, '>');
    } else {
        const double v = std::stod(point);
        if (axis == "noise_rate") {
            NoiseMode m;
            m.kind = NoiseMode::Kind::quant_noise;
            m.rate = v;
            c.modes = {m};
        } else if (axis == "centroids") {
            if (!(v >= 1)) throw ConfigError("config: centroid counts must be >= 1");
            c.quant.centroids = std::size_t(v);
        } else if (axis == "block_size") {
            if (!(v >= 1)) throw ConfigError("config: block sizes must be >= 1");
            c.quant.block_rows = std::size_t(v);
        }
    }
    c.validate();
    return c;
}

std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg, unsigned threads) {
    cfg.validate();
    const std::vector<std::string> points = sweep_points(cfg);
    std::vector<std::vector<ResultRow>> results(points.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < points.size(); i = next++) {
            std::vector<ResultRow> rows;
            try {
                rows = run_experiment(sweep_point_config(cfg, points[i]));
            } catch (const std::exception& e) {
                ResultRow r;
                r.mode = "-";
                r.scheme = "-";
                r.metric_name = metric_name(cfg.task);
                r.status = sanitize(std::string("failed: ") + e.what());
                rows.push_back(r);
            }
            for (auto& r : rows) r.x = points[i];
            results[i] = std::move(rows);
        }
    };
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<unsigned>(threads, unsigned(points.size()));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    std::vector<ResultRow> out;
    for (auto& r : results) out.insert(out.end(), r.begin(), r.end());
    return out;
}

std::vector<ResultRow> sorted_rows(std::vector<ResultRow> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
        return std::tie(a.scheme, a.mode, a.seed) < std::tie(b.scheme, b.mode, b.seed);
    });
    return rows;
}

std::string rows_csv(const std::vector<ResultRow>& rows) {
    std::string out = "scheme,mode,seed,x,size_bytes,compression,metric_name,metric,float_metric,status\n";
    for (const auto& r : rows) {
        out += r.scheme + ',' + r.mode + ',' + std::to_string(r.seed) + ',' + r.x + ',' + std::to_string(r.size_bytes) +
               ',' + number(r.compression) + ',' + r.metric_name + ',' + number(r.metric) + ',' +
               number(r.float_metric) + ',' + sanitize(r.status) + '\n';
    }
    return out;
}

std::vector<ResultRow> parse_rows_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line.rfind("scheme,mode,seed", 0) != 0) {
        throw std::invalid_argument("rows csv: missing header");
    }
    std::vector<ResultRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 10) throw std::invalid_argument("rows csv: line " + std::to_string(lineno) + " has " +
                                                        std::to_string(f.size()) + " fields");
        try {
            ResultRow r;
            r.scheme = f[0];
            r.mode = f[1];
            r.seed = std::stoull(f[2]);
            r.x = f[3];
            r.size_bytes = std::stoull(f[4]);
            r.compression = std::stod(f[5]);
            r.metric_name = f[6];
            r.metric = std::stod(f[7]);
            r.float_metric = std::stod(f[8]);
            r.status = f[9];
            rows.push_back(r);
        } catch (const std::logic_error&) {
            throw std::invalid_argument("rows csv: bad number on line " + std::to_string(lineno));
        }
    }
    return rows;
}

double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

struct Group {
    std::string x, scheme, mode, metric_name;
    std::vector<double> metric, float_metric, size, ratio;
    std::size_t failed = 0;
};

// Groups in order of first appearance.
std::vector<Group> group_rows(const std::vector<ResultRow>& rows) {
    std::vector<Group> groups;
    for (const auto& r : rows) {
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const Group& g) { return g.x == r.x && g.scheme == r.scheme && g.mode == r.mode; });
        if (it == groups.end()) {
            groups.push_back({r.x, r.scheme, r.mode, r.metric_name, {}, {}, {}, {}, 0});
            it = groups.end() - 1;
        }
        if (r.status != "ok") {
            ++it->failed;
            continue;
        }
        it->metric.push_back(r.metric);
        it->float_metric.push_back(r.float_metric);
        it->size.push_back(double(r.size_bytes));
        it->ratio.push_back(r.compression);
    }
    return groups;
}

} // namespace

std::string sweep_csv(const std::vector<ResultRow>& rows) {
    std::string out = "x,scheme,mode,median,min,max,seeds\n";
    for (const Group& g : group_rows(rows)) {
        const bool any = !g.metric.empty();
        const double lo = any ? *std::min_element(g.metric.begin(), g.metric.end()) : std::nan("");
        const double hi = any ? *std::max_element(g.metric.begin(), g.metric.end()) : std::nan("");
        out += g.x + ',' + g.scheme + ',' + g.mode + ',' + number(median(g.metric)) + ',' + number(lo) + ',' +
               number(hi) + ',' + std::to_string(g.metric.size()) + '\n';
    }
    return out;
}

std::string report_markdown(const std::vector<ResultRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("report: no rows");
    const std::vector<ResultRow> sorted = sorted_rows(rows);
    const std::vector<Group> groups = group_rows(sorted);
    const bool sweep = std::any_of(rows.begin(), rows.end(), [](const ResultRow& r) { return !r.x.empty(); });
    const std::string metric = rows.front().metric_name.empty() ? "metric" : rows.front().metric_name;

    std::string out;
    out += sweep ? "| x " : "";
    out += "| Scheme | Mode | Size (KB) | Compression | Metric (" + metric + ") | Float " + metric +
           " | Seeds | Failed |\n";
    out += sweep ? "|---" : "";
    out += "|---|---|---:|---:|---:|---:|---:|---:|\n";
    for (const Group& g : groups) {
        const bool any = !g.metric.empty();
        auto cell = [&](const char* pattern, const std::vector<double>& v, double scale = 1.0) {
            return any ? fmt(pattern, median(v) * scale) : std::string("-");
        };
        if (sweep) out += "| " + g.x + " ";
        out += "| " + g.scheme + " | " + g.mode + " | " + cell("%.1f", g.size, 1e-3) + " | " +
               cell("x%.1f", g.ratio) + " | " + cell("%.4f", g.metric) + " | " + cell("%.4f", g.float_metric) + " | " +
               std::to_string(g.metric.size()) + " | " + std::to_string(g.failed) + " |\n";
    }
    return out;
}

} // namespace qnoise
