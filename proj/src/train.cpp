#include "qnoise/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace qnoise {

void Dataset::validate() const {
    if (x.rows() != y.size()) throw DimensionError("dataset: feature and label counts differ");
    if (classes == 0) throw std::invalid_argument("dataset: no classes");
    for (int label : y) {
        if (label < 0 || std::size_t(label) >= classes) throw std::out_of_range("dataset: label out of range");
    }
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.classes = classes;
    out.x = Matrix(rows.size(), x.cols());
    out.y.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto src = x.row(rows[i]);
        std::copy(src.begin(), src.end(), out.x.row(i).begin());
        out.y.push_back(y[rows[i]]);
    }
    return out;
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd" || s == "sgd_momentum") return OptimizerKind::sgd_momentum;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "'");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train config: learning rate must be > 0");
    if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("train config: batch size must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train config: momentum must be in [0, 1)");
    if (!(layerdrop >= 0.0 && layerdrop <= 1.0)) throw std::invalid_argument("train config: layerdrop must be in [0, 1]");
    if (qat_bits && *qat_bits != 4 && *qat_bits != 8) throw std::invalid_argument("train config: qat bits must be 4 or 8");
    for (const NoiseSpec& s : noise) qnoise::validate(s);
}

namespace {

class Optimizer {
public:
    Optimizer(const Network& net, const TrainConfig& cfg) : cfg_(cfg) {
        m_ = Gradients::zeros_like(net);
        if (cfg.optimizer == OptimizerKind::adam) v_ = Gradients::zeros_like(net);
    }

    void step(Network& net, const Gradients& g, double lr) {
        ++t_;
        for (std::size_t i = 0; i < net.params.size(); ++i) {
            update(net.params[i].weight, g.weight[i], m_.weight[i], v_.weight.empty() ? nullptr : &v_.weight[i], lr,
                   cfg_.weight_decay);
            update(net.params[i].bias, g.bias[i], m_.bias[i], v_.bias.empty() ? nullptr : &v_.bias[i], lr, 0.0);
        }
    }

private:
    void update(Matrix& w, const Matrix& g, Matrix& m, Matrix* v, double lr, double decay) const {
        auto wv = w.values();
        auto gv = g.values();
        auto mv = m.values();
        if (v == nullptr) {
            for (std::size_t k = 0; k < wv.size(); ++k) {
                const double grad = double(gv[k]) + decay * double(wv[k]);
                mv[k] = static_cast<float>(cfg_.momentum * double(mv[k]) + grad);
                wv[k] = static_cast<float>(double(wv[k]) - lr * double(mv[k]));
            }
            return;
        }
        auto vv = v->values();
        const double b1 = cfg_.momentum, b2 = cfg_.beta2;
        const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
        for (std::size_t k = 0; k < wv.size(); ++k) {
            const double grad = double(gv[k]) + decay * double(wv[k]);
            mv[k] = static_cast<float>(b1 * double(mv[k]) + (1.0 - b1) * grad);
            vv[k] = static_cast<float>(b2 * double(vv[k]) + (1.0 - b2) * grad * grad);
            const double mhat = double(mv[k]) / c1, vhat = double(vv[k]) / c2;
            wv[k] = static_cast<float>(double(wv[k]) - lr * mhat / (std::sqrt(vhat) + 1e-8));
        }
    }

    const TrainConfig& cfg_;
    Gradients m_;
    Gradients v_;
    long t_ = 0;
};

std::vector<std::optional<Codebook>> refresh_codebooks(const Network& net, const NoiseSpec& spec, int iters,
                                                       Rng& rng) {
    std::vector<std::optional<Codebook>> out(net.params.size());
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        const Matrix& w = net.params[i].weight;
        const BlockLayout layout = fit_layout(w.rows(), w.cols(), spec.layout);
        Rng layer_rng = rng.derive(i);
        out[i] = pq_quantize(w, layout, spec.centroids, iters, layer_rng).tensor.codebook;
    }
    return out;
}

} // namespace

TrainResult train(Network net, const Dataset& data, const TrainConfig& config) {
    config.validate();
    data.validate();
    net.validate();
    if (data.x.cols() != net.in_dim()) throw DimensionError("train: dataset width does not match the network");
    if (data.classes != net.out_dim()) throw DimensionError("train: class count does not match the network head");

    TrainResult result;
    const Rng root(config.seed);
    Rng order_rng = root.derive(1);
    Rng noise_rng = root.derive(2);
    Rng drop_rng = root.derive(3);
    Rng kmeans_rng = root.derive(4);

    const NoiseSpec* pq_spec = nullptr;
    for (const NoiseSpec& s : config.noise) {
        if (s.kind == NoiseKind::pq_exact && s.rate > 0.0) pq_spec = &s;
    }
    std::vector<std::optional<Codebook>> codebooks;

    ForwardOptions opts;
    opts.mode = Mode::train;
    opts.noise = config.noise;
    opts.layerdrop = config.layerdrop;
    opts.qat_bits = config.qat_bits;
    opts.codebooks = &codebooks;
    opts.layerdrop_rng = &drop_rng;

    Optimizer optimizer(net, config);
    const std::size_t n = data.size();
    const std::size_t batches_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const double total_steps = double(batches_per_epoch) * double(config.epochs);
    std::size_t step = 0;
    ForwardCache cache;
    Matrix dlogits;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (pq_spec != nullptr) {
            Rng epoch_rng = kmeans_rng.derive(std::uint64_t(epoch));
            codebooks = refresh_codebooks(net, *pq_spec, config.kmeans_iters, epoch_rng);
        }
        const std::vector<std::size_t> perm = shuffled_indices(order_rng, n);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t end = std::min(n, start + config.batch_size);
            const Dataset batch = data.subset(std::span(perm).subspan(start, end - start));
            forward(net, batch.x, opts, &noise_rng, &cache);
            const double loss = softmax_cross_entropy(cache.logits, batch.y, &dlogits);
            if (!std::isfinite(loss)) {
                throw TrainingDiverged("training diverged: loss is " + std::to_string(loss) + " at epoch " +
                                       std::to_string(epoch) + ", step " + std::to_string(step) +
                                       " (lr " + std::to_string(config.lr) + ")");
            }
            loss_sum += loss * double(end - start);
            const Gradients g = backward_ste(net, cache, dlogits);
            double lr = config.lr;
            if (config.cosine_schedule) {
                lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / total_steps));
            }
            optimizer.step(net, g, lr);
            ++step;
        }
        for (const Param& p : net.params) {
            if (!p.weight.all_finite() || !p.bias.all_finite()) {
                throw TrainingDiverged("training diverged: non-finite weights after epoch " + std::to_string(epoch));
            }
        }
        const EvalResult ev = evaluate(net, data);
        result.history.push_back({epoch, loss_sum / double(n), ev.accuracy});
    }
    result.net = std::move(net);
    return result;
}

TrainResult finetune_with_noise(const Network& trained, const Dataset& data, const TrainConfig& config) {
    return train(trained, data, config);
}

EvalResult evaluate(const Network& net, const Dataset& data,
                    const std::vector<std::optional<QuantParams>>* activation_quant, std::size_t batch_size) {
    data.validate();
    if (data.size() == 0) throw DimensionError("evaluate: empty dataset");
    ForwardOptions opts;
    opts.activation_quant = activation_quant;
    double loss = 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t end = std::min(data.size(), start + batch_size);
        rows.resize(end - start);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
        const Dataset batch = data.subset(rows);
        const Matrix logits = forward(net, batch.x, opts, nullptr);
        loss += softmax_cross_entropy(logits, batch.y, nullptr) * double(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto row = logits.row(r);
            const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
            if (best == std::size_t(batch.y[r])) ++correct;
        }
    }
    return {loss / double(data.size()), double(correct) / double(data.size())};
}

std::vector<Matrix> layer_inputs(const Network& net, const Matrix& x) {
    ForwardCache cache;
    forward(net, x, ForwardOptions{}, nullptr, &cache);
    return std::move(cache.inputs);
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,loss,accuracy\n";
    for (const auto& m : history) os << m.epoch << ',' << m.loss << ',' << m.accuracy << '\n';
    return os.str();
}

} // namespace qnoise
