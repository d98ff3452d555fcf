#include "qnoise/network.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace qnoise {

std::string to_string(LayerRole role) {
    switch (role) {
    case LayerRole::input: return "input";
    case LayerRole::hidden: return "hidden";
    case LayerRole::head: return "head";
    }
    return "hidden";
}

LayerRole layer_role_from_string(const std::string& s) {
    if (s == "input" || s == "embedding") return LayerRole::input;
    if (s == "hidden" || s == "residual") return LayerRole::hidden;
    if (s == "head" || s == "classifier") return LayerRole::head;
    throw std::invalid_argument("unknown layer role '" + s + "'");
}

namespace {

Param make_param(std::size_t in, std::size_t out, double sigma, Rng& rng) {
    Param p{Matrix(in, out), Matrix(1, out)};
    for (float& v : p.weight.values()) v = static_cast<float>(sigma * rng.normal());
    return p;
}

void apply_activation(Matrix& z, Activation act) {
    if (act == Activation::relu) {
        for (float& v : z.values()) v = v > 0.0f ? v : 0.0f;
    }
}

void add_bias(Matrix& z, const Matrix& bias) {
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        for (std::size_t c = 0; c < z.cols(); ++c) row[c] += bias(0, c);
    }
}

std::size_t fit_extent(std::size_t n, std::size_t preferred) {
    std::size_t b = std::max<std::size_t>(1, std::min(preferred, n));
    while (b > 1 && n % b != 0) b = b / 2;
    while (b > 1 && n % b != 0) --b;
    return b;
}

} // namespace

Network Network::residual_mlp(std::size_t in, std::size_t width, std::size_t blocks, std::size_t classes, Rng& rng,
                              bool share_adjacent) {
    if (in == 0 || width == 0 || classes == 0) throw DimensionError("residual_mlp: zero dimension");
    Network net;
    net.params.push_back(make_param(in, width, std::sqrt(2.0 / double(in)), rng));
    net.layers.push_back({0, Activation::relu, false, LayerRole::input, -1});
    // Residual branches start small so the stack is close to identity.
    const double branch_sigma = 0.5 * std::sqrt(2.0 / double(width));
    for (std::size_t b = 0; b < blocks; ++b) {
        const int group = share_adjacent ? int(b / 2) : -1;
        if (!share_adjacent || b % 2 == 0) {
            net.params.push_back(make_param(width, width, branch_sigma, rng));
        }
        net.layers.push_back({net.params.size() - 1, Activation::relu, true, LayerRole::hidden, group});
    }
    net.params.push_back(make_param(width, classes, std::sqrt(1.0 / double(width)), rng));
    net.layers.push_back({net.params.size() - 1, Activation::identity, false, LayerRole::head, -1});
    net.validate();
    return net;
}

Network Network::char_mlp(std::size_t context, std::size_t vocab, std::size_t hidden, Rng& rng) {
    if (context == 0 || vocab == 0 || hidden == 0) throw DimensionError("char_mlp: zero dimension");
    Network net;
    const std::size_t in = context * vocab;
    net.params.push_back(make_param(in, hidden, std::sqrt(2.0 / double(context)), rng));
    net.layers.push_back({0, Activation::relu, false, LayerRole::input, -1});
    net.params.push_back(make_param(hidden, vocab, std::sqrt(1.0 / double(hidden)), rng));
    net.layers.push_back({1, Activation::identity, false, LayerRole::head, -1});
    net.validate();
    return net;
}

std::size_t Network::in_dim() const { return layers.empty() ? 0 : params[layers.front().param].weight.rows(); }
std::size_t Network::out_dim() const { return layers.empty() ? 0 : params[layers.back().param].weight.cols(); }

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.weight.size() + p.bias.size();
    return n;
}

std::vector<std::size_t> Network::residual_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].residual) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> Network::layers_of(std::size_t param) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].param == param) out.push_back(i);
    }
    return out;
}

void Network::validate() const {
    if (layers.empty()) throw DimensionError("network has no layers");
    std::size_t width = in_dim();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        if (l.param >= params.size()) throw std::out_of_range("layer refers to a missing parameter store");
        const Param& p = params[l.param];
        if (p.weight.rows() != width) {
            throw DimensionError("layer " + std::to_string(i) + " expects width " + std::to_string(p.weight.rows()) +
                                 " but receives " + std::to_string(width));
        }
        if (p.bias.rows() != 1 || p.bias.cols() != p.weight.cols()) {
            throw DimensionError("layer " + std::to_string(i) + " bias shape " + p.bias.shape_string());
        }
        if (l.residual && p.weight.rows() != p.weight.cols()) {
            throw DimensionError("residual layer " + std::to_string(i) + " is not square");
        }
        width = p.weight.cols();
    }
}

bool bitwise_equal(const Network& a, const Network& b) {
    if (a.params.size() != b.params.size() || a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        if (!bitwise_equal(a.params[i].weight, b.params[i].weight)) return false;
        if (!bitwise_equal(a.params[i].bias, b.params[i].bias)) return false;
    }
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const Layer &x = a.layers[i], &y = b.layers[i];
        if (x.param != y.param || x.activation != y.activation || x.residual != y.residual || x.role != y.role ||
            x.share_group != y.share_group)
            return false;
    }
    return true;
}

BlockLayout fit_layout(std::size_t rows, std::size_t cols, const BlockLayout& preferred) {
    return {fit_extent(rows, preferred.block_rows), fit_extent(cols, preferred.block_cols)};
}

Matrix forward(const Network& net, const Matrix& x, const ForwardOptions& opts, Rng* rng, ForwardCache* cache) {
    net.validate();
    if (x.cols() != net.in_dim()) {
        throw DimensionError("forward: input has " + std::to_string(x.cols()) + " features, network expects " +
                             std::to_string(net.in_dim()));
    }
    if (opts.activation_quant != nullptr && opts.activation_quant->size() != net.layers.size()) {
        throw DimensionError("forward: activation quantization must cover every layer");
    }
    const bool train = opts.mode == Mode::train;
    double drop_rate = opts.layerdrop;
    std::vector<NoiseSpec> weight_noise;
    for (const NoiseSpec& s : opts.noise) {
        validate(s);
        if (s.kind == NoiseKind::layerdrop) {
            drop_rate = std::max(drop_rate, s.rate);
        } else {
            weight_noise.push_back(s);
        }
    }
    const bool noisy = train && (!weight_noise.empty() || drop_rate > 0.0);
    if (noisy && rng == nullptr) throw std::invalid_argument("forward: train-mode noise needs an rng");
    Rng* drop_rng = opts.layerdrop_rng != nullptr ? opts.layerdrop_rng : rng;

    if (cache != nullptr) {
        *cache = ForwardCache{};
        cache->inputs.reserve(net.layers.size());
    }

    Matrix h = x;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& layer = net.layers[i];
        const Param& p = net.params[layer.param];

        if (opts.activation_quant != nullptr && (*opts.activation_quant)[i]) {
            h = fake_quant(h, *(*opts.activation_quant)[i]);
        }

        bool dropped = false;
        if (train && layer.residual && drop_rate > 0.0) dropped = drop_rng->bernoulli(drop_rate);

        Matrix w = p.weight;
        std::optional<Matrix> grad_mask;
        if (train && !dropped) {
            if (opts.qat_bits) w = fake_quant(w, calibrate_minmax(w, *opts.qat_bits));
            for (const NoiseSpec& spec : weight_noise) {
                NoiseSpec fitted = spec;
                fitted.layout = fit_layout(w.rows(), w.cols(), spec.layout);
                const Codebook* cb = nullptr;
                if (spec.kind == NoiseKind::pq_exact) {
                    if (opts.codebooks == nullptr || layer.param >= opts.codebooks->size() ||
                        !(*opts.codebooks)[layer.param]) {
                        throw std::invalid_argument("forward: pq_exact noise needs a codebook for layer " +
                                                    std::to_string(i));
                    }
                    cb = &*(*opts.codebooks)[layer.param];
                }
                const NoiseOperator op(fitted, cb);
                BlockMask mask;
                w = op.apply(w, *rng, &mask);
                if (!spec.ste && mask.count() > 0) {
                    if (!grad_mask) grad_mask = Matrix(w.rows(), w.cols(), 1.0f);
                    for_each_block_entry(op.grid_for(w), [&](std::size_t b, std::size_t, std::size_t r, std::size_t c) {
                        if (mask.selected[b]) (*grad_mask)(r, c) = 0.0f;
                    });
                }
            }
        }

        Matrix z;
        Matrix out;
        if (dropped) {
            out = h;
        } else {
            z = matmul(h, w);
            add_bias(z, p.bias);
            Matrix a = z;
            apply_activation(a, layer.activation);
            if (layer.residual) {
                out = h;
                add_inplace(out, a);
            } else {
                out = std::move(a);
            }
        }

        if (cache != nullptr) {
            cache->inputs.push_back(std::move(h));
            cache->weights.push_back(std::move(w));
            cache->preact.push_back(std::move(z));
            cache->dropped.push_back(dropped);
            cache->grad_mask.push_back(std::move(grad_mask));
        }
        h = std::move(out);
    }
    if (cache != nullptr) {
        cache->logits = h;
        cache->valid = true;
    }
    return h;
}

Gradients Gradients::zeros_like(const Network& net) {
    Gradients g;
    for (const Param& p : net.params) {
        g.weight.emplace_back(p.weight.rows(), p.weight.cols());
        g.bias.emplace_back(p.bias.rows(), p.bias.cols());
    }
    return g;
}

Gradients backward_ste(const Network& net, const ForwardCache& cache, const Matrix& dlogits) {
    if (!cache.valid || cache.inputs.size() != net.layers.size()) {
        throw std::logic_error("backward_ste called without a matching forward pass");
    }
    require_same_shape(dlogits, cache.logits, "backward_ste: dlogits");
    Gradients g = Gradients::zeros_like(net);
    Matrix dh = dlogits;
    for (std::size_t ii = net.layers.size(); ii-- > 0;) {
        const Layer& layer = net.layers[ii];
        if (cache.dropped[ii]) continue; // identity branch: dh passes through unchanged

        Matrix dz = dh;
        if (layer.activation == Activation::relu) {
            const Matrix& z = cache.preact[ii];
            auto dv = dz.values();
            auto zv = z.values();
            for (std::size_t k = 0; k < dv.size(); ++k) {
                if (!(zv[k] > 0.0f)) dv[k] = 0.0f;
            }
        }
        Matrix dw = matmul_tn(cache.inputs[ii], dz);
        if (cache.grad_mask[ii]) {
            auto mv = cache.grad_mask[ii]->values();
            auto wv = dw.values();
            for (std::size_t k = 0; k < wv.size(); ++k) wv[k] *= mv[k];
        }
        add_inplace(g.weight[layer.param], dw);
        Matrix& db = g.bias[layer.param];
        for (std::size_t r = 0; r < dz.rows(); ++r) {
            auto row = dz.row(r);
            for (std::size_t c = 0; c < dz.cols(); ++c) db(0, c) += row[c];
        }
        if (ii == 0) break;
        Matrix dx = matmul_nt(dz, cache.weights[ii]);
        if (layer.residual) add_inplace(dx, dh);
        dh = std::move(dx);
    }
    return g;
}

double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits) {
    if (labels.size() != logits.rows()) throw DimensionError("softmax_cross_entropy: label count mismatch");
    if (logits.rows() == 0) throw DimensionError("softmax_cross_entropy: empty batch");
    const std::size_t n = logits.rows(), k = logits.cols();
    if (dlogits != nullptr) *dlogits = Matrix(n, k);
    double total = 0.0;
    std::vector<double> e(k);
    for (std::size_t r = 0; r < n; ++r) {
        const int y = labels[r];
        if (y < 0 || std::size_t(y) >= k) throw std::out_of_range("softmax_cross_entropy: label out of range");
        auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            e[c] = std::exp(double(row[c]) - mx);
            sum += e[c];
        }
        total += std::log(sum) - (double(row[std::size_t(y)]) - mx);
        if (dlogits != nullptr) {
            for (std::size_t c = 0; c < k; ++c) {
                const double prob = e[c] / sum;
                (*dlogits)(r, c) = static_cast<float>((prob - (std::size_t(y) == c ? 1.0 : 0.0)) / double(n));
            }
        }
    }
    return total / double(n);
}

Network prune_every_other(const Network& net) {
    // Units: consecutive residual layers sharing one group form one unit.
    std::vector<std::vector<std::size_t>> units;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& l = net.layers[i];
        if (!l.residual) continue;
        if (!units.empty() && l.share_group >= 0 && net.layers[units.back().back()].share_group == l.share_group &&
            units.back().back() + 1 == i) {
            units.back().push_back(i);
        } else {
            units.push_back({i});
        }
    }
    std::vector<bool> remove(net.layers.size(), false);
    for (std::size_t u = 0; u < units.size(); u += 2) {
        for (std::size_t i : units[u]) remove[i] = true;
    }

    Network out;
    std::map<std::size_t, std::size_t> remap;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (remove[i]) continue;
        Layer l = net.layers[i];
        auto it = remap.find(l.param);
        if (it == remap.end()) {
            it = remap.emplace(l.param, out.params.size()).first;
            out.params.push_back(net.params[l.param]);
        }
        l.param = it->second;
        out.layers.push_back(l);
    }
    out.validate();
    return out;
}

} // namespace qnoise
