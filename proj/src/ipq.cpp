#include "qnoise/ipq.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace qnoise {

BlockLayout default_layout(const Matrix& w) { return fit_layout(w.rows(), 1, {8, 1}); }

std::vector<std::size_t> default_order(const Network& net) {
    std::vector<std::size_t> order;
    for (const Layer& l : net.layers) {
        if (std::find(order.begin(), order.end(), l.param) == order.end()) order.push_back(l.param);
    }
    return order;
}

std::vector<std::size_t> structure_order(const Network& net, const std::vector<LayerRole>& roles) {
    const std::vector<std::size_t> base = default_order(net);
    auto role_of = [&](std::size_t p) { return net.layers[net.layers_of(p).front()].role; };
    std::vector<std::size_t> out;
    for (LayerRole r : roles) {
        for (std::size_t p : base) {
            if (role_of(p) == r && std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
        }
    }
    for (std::size_t p : base) {
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    }
    return out;
}

void IpqConfig::validate(const Network& net) const {
    if (!order.empty()) {
        std::vector<std::size_t> sorted = order;
        std::sort(sorted.begin(), sorted.end());
        std::vector<std::size_t> expect(net.params.size());
        std::iota(expect.begin(), expect.end(), 0);
        if (sorted != expect) throw std::invalid_argument("ipq: order must be a permutation of the parameter stores");
    }
    if (!layouts.empty() && layouts.size() != net.params.size()) {
        throw std::invalid_argument("ipq: one layout per parameter store is required");
    }
    if (centroids == 0) throw std::invalid_argument("ipq: K must be >= 1");
    if (finetune_steps < 0) throw std::invalid_argument("ipq: finetune steps must be >= 0");
    if (finetune_steps > 0 && (!(lr > 0.0) || !(centroid_lr > 0.0) || batch_size == 0)) {
        throw std::invalid_argument("ipq: finetuning needs positive learning rates and batch size");
    }
}

void CompressedNetwork::sync() {
    for (std::size_t p = 0; p < pq.size(); ++p) {
        if (pq[p]) net.params[p].weight = pq[p]->reconstruct();
    }
}

std::uint64_t CompressedNetwork::total_bits() const {
    std::uint64_t total = 0;
    for (const auto& r : report) total += r.bits;
    return total;
}

Matrix CompressedNetwork::forward(const Matrix& x) const {
    ForwardOptions opts;
    if (!activation_quant.empty()) opts.activation_quant = &activation_quant;
    return qnoise::forward(net, x, opts, nullptr);
}

EvalResult CompressedNetwork::evaluate(const Dataset& data) const {
    return qnoise::evaluate(net, data, activation_quant.empty() ? nullptr : &activation_quant);
}

namespace {

LayerReport make_report(std::size_t param, const PqTensor& t, double objective) {
    const BlockGrid g = t.grid();
    return {param, t.codebook.k, t.codebook.d, objective, storage_bits(t.codebook.k, t.codebook.d, g.m, g.q, t.rows)};
}

BlockLayout layout_for(const std::vector<BlockLayout>& layouts, const Network& net, std::size_t p) {
    return layouts.empty() ? default_layout(net.params[p].weight) : layouts[p];
}

// Quantizes one parameter store in place; identical for both pipelines.
void quantize_param(CompressedNetwork& c, std::size_t p, const BlockLayout& layout, std::size_t k, int iters,
                    const Rng& rng) {
    Rng layer_rng = rng.derive(p);
    PqResult r = pq_quantize(c.net.params[p].weight, layout, k, iters, layer_rng);
    c.report.push_back(make_report(p, r.tensor, r.objective));
    c.pq[p] = std::move(r.tensor);
    c.net.params[p].weight = c.pq[p]->reconstruct();
}

} // namespace

CompressedNetwork quantize_one_shot(const Network& net, const std::vector<BlockLayout>& layouts, std::size_t k,
                                    Rng& rng, int kmeans_iters) {
    net.validate();
    if (!layouts.empty() && layouts.size() != net.params.size()) {
        throw std::invalid_argument("quantize_one_shot: one layout per parameter store is required");
    }
    CompressedNetwork c{net, std::vector<std::optional<PqTensor>>(net.params.size()), {}, {}};
    for (std::size_t p : default_order(net)) quantize_param(c, p, layout_for(layouts, net, p), k, kmeans_iters, rng);
    return c;
}

double distill_loss(const Matrix& student, const Matrix& teacher, Matrix* grad) {
    require_same_shape(student, teacher, "distill_loss");
    if (student.size() == 0) throw DimensionError("distill_loss: empty outputs");
    const double n = double(student.size());
    auto s = student.values();
    auto t = teacher.values();
    double sum = 0.0;
    if (grad != nullptr) *grad = Matrix(student.rows(), student.cols());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double diff = double(s[i]) - double(t[i]);
        sum += diff * diff;
        if (grad != nullptr) grad->values()[i] = static_cast<float>(2.0 * diff / n);
    }
    return sum / n;
}

CompressedNetwork quantize_iterative(const Network& net, const Network& teacher, const IpqConfig& config,
                                     const Dataset& data, Rng& rng) {
    net.validate();
    teacher.validate();
    config.validate(net);
    if (config.finetune_steps > 0) {
        data.validate();
        if (data.size() == 0) throw DimensionError("quantize_iterative: empty dataset");
        if (teacher.in_dim() != net.in_dim() || teacher.out_dim() != net.out_dim()) {
            throw DimensionError("quantize_iterative: teacher and student shapes differ");
        }
    }
    const std::vector<std::size_t> order = config.order.empty() ? default_order(net) : config.order;
    CompressedNetwork c{net, std::vector<std::optional<PqTensor>>(net.params.size()), {}, {}};
    Rng batch_rng = rng.derive(0x1f9a7c3d5b2e4601ULL);
    ForwardCache cache;
    Matrix dlogits;
    std::vector<std::size_t> rows(std::min(config.batch_size, data.size()));

    for (std::size_t p : order) {
        const BlockLayout layout = layout_for(config.layouts, net, p);
        quantize_param(c, p, layout, config.centroids, config.kmeans_iters, rng);

        for (int step = 0; step < config.finetune_steps; ++step) {
            for (auto& r : rows) r = std::size_t(batch_rng.below(data.size()));
            const Dataset batch = data.subset(rows);
            const Matrix target = qnoise::forward(teacher, batch.x, ForwardOptions{}, nullptr);
            qnoise::forward(c.net, batch.x, ForwardOptions{}, nullptr, &cache);
            const double loss = distill_loss(cache.logits, target, &dlogits);
            if (!std::isfinite(loss)) throw TrainingDiverged("ipq finetuning diverged at layer " + std::to_string(p));
            const Gradients g = backward_ste(c.net, cache, dlogits);
            for (std::size_t q = 0; q < c.net.params.size(); ++q) {
                if (c.pq[q]) {
                    PqTensor& t = *c.pq[q];
                    t.codebook = finetune_centroids(t.codebook, t.indices, split_blocks(g.weight[q], t.layout),
                                                    config.centroid_lr);
                    c.net.params[q].weight = t.reconstruct();
                    continue;
                }
                Param& par = c.net.params[q];
                auto w = par.weight.values();
                auto gw = g.weight[q].values();
                for (std::size_t i = 0; i < w.size(); ++i) w[i] = float(double(w[i]) - config.lr * double(gw[i]));
                auto b = par.bias.values();
                auto gb = g.bias[q].values();
                for (std::size_t i = 0; i < b.size(); ++i) b[i] = float(double(b[i]) - config.lr * double(gb[i]));
            }
        }
    }
    return c;
}

std::vector<std::optional<QuantParams>> calibrate_activations(const Network& net,
                                                               const std::vector<Matrix>& batches, int bits) {
    if (batches.empty()) throw std::invalid_argument("calibrate_activations: no calibration batches");
    std::vector<ActivationObserver> observers(net.layers.size(), ActivationObserver(bits));
    for (const Matrix& x : batches) {
        const std::vector<Matrix> inputs = layer_inputs(net, x);
        for (std::size_t i = 1; i < inputs.size(); ++i) observers[i].observe(inputs[i]);
    }
    std::vector<std::optional<QuantParams>> out(net.layers.size());
    for (std::size_t i = 1; i < observers.size(); ++i) out[i] = observers[i].freeze();
    return out;
}

CompressedNetwork combine_with_int8(const CompressedNetwork& c, const std::vector<Matrix>& calibration_batches) {
    if (calibration_batches.empty()) throw std::invalid_argument("combine_with_int8: no calibration batches");
    CompressedNetwork out = c;
    for (auto& t : out.pq) {
        if (t) t->codebook = compress_centroids_int8(t->codebook);
    }
    out.sync();
    out.activation_quant = calibrate_activations(out.net, calibration_batches, 8);
    return out;
}

std::string layer_report_csv(const std::vector<LayerReport>& report) {
    std::ostringstream os;
    os.precision(9);
    os << "layer,K,d,objective,bits\n";
    for (const auto& r : report) os << r.param << ',' << r.k << ',' << r.d << ',' << r.objective << ',' << r.bits << '\n';
    return os.str();
}

} // namespace qnoise
