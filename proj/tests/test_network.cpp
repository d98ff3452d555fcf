#include "doctest.h"

#include "qnoise/network.hpp"
#include "gradient_check.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>

using namespace qnoise;
using qnoise::testing::gaussian_matrix;
using qnoise::testing::random_matrix;
using qnoise::testing::FdReport;
using qnoise::testing::finite_difference_check;
using qnoise::testing::min_kink_distance;
using qnoise::testing::reference_loss;

namespace {

Network linear_net(const Matrix& w, const Matrix& b, Activation act = Activation::identity) {
    Network net;
    net.params.push_back({w, b});
    net.layers.push_back({0, act, false, LayerRole::head, -1});
    return net;
}

std::vector<int> labels(Rng& rng, std::size_t n, std::size_t k) {
    std::vector<int> y(n);
    for (int& v : y) v = int(rng.below(k));
    return y;
}

} // namespace

TEST_CASE("single linear layer forward") {
    const Matrix w = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
    const Matrix b = Matrix::from_rows({{0.5f, -1}});
    const Network net = linear_net(w, b);
    const Matrix x = Matrix::from_rows({{1, 0, 2}, {-1, 1, 0}});
    const Matrix y = forward(net, x, ForwardOptions{}, nullptr);
    CHECK(bitwise_equal(y, Matrix::from_rows({{11.5f, 13}, {2.5f, 1}})));
    CHECK_THROWS_AS(forward(net, Matrix(2, 4), ForwardOptions{}, nullptr), DimensionError);
}

TEST_CASE("train mode without noise equals eval mode") {
    Rng rng(1);
    const Network net = Network::residual_mlp(3, 16, 4, 5, rng);
    const Matrix x = gaussian_matrix(rng, 9, 3);
    ForwardOptions train_opts;
    train_opts.mode = Mode::train;
    train_opts.noise = {NoiseSpec::int_n(8, 0.0), NoiseSpec::pq_proxy({4, 1}, 0.0)};
    Rng r(5);
    CHECK(bitwise_equal(forward(net, x, train_opts, &r), forward(net, x, ForwardOptions{}, nullptr)));
}

TEST_CASE("full proxy noise leaves a bias-only network") {
    Rng rng(2);
    const Network net = Network::residual_mlp(4, 8, 2, 3, rng);
    Network bias_only = net;
    for (Param& p : bias_only.params) std::fill(p.weight.values().begin(), p.weight.values().end(), 0.0f);
    ForwardOptions opts;
    opts.mode = Mode::train;
    opts.noise = {NoiseSpec::pq_proxy({4, 1}, 1.0)};
    const Matrix x = gaussian_matrix(rng, 6, 4);
    Rng r(3);
    CHECK(bitwise_equal(forward(net, x, opts, &r), forward(bias_only, x, ForwardOptions{}, nullptr)));
}

TEST_CASE("eval mode never touches the rng") {
    Rng rng(3);
    const Network net = Network::residual_mlp(2, 8, 2, 3, rng);
    ForwardOptions opts;
    opts.noise = {NoiseSpec::int_n(4, 0.5)};
    opts.layerdrop = 0.5;
    Rng r(17), untouched(17);
    forward(net, gaussian_matrix(rng, 4, 2), opts, &r);
    CHECK(r.next_u64() == untouched.next_u64());
}

TEST_CASE("linear layer gradient of the sum") {
    Rng rng(4);
    const Matrix x = gaussian_matrix(rng, 5, 3);
    const Network net = linear_net(gaussian_matrix(rng, 3, 2), Matrix(1, 2));
    ForwardCache cache;
    forward(net, x, ForwardOptions{}, nullptr, &cache);
    const Gradients g = backward_ste(net, cache, Matrix(5, 2, 1.0f));
    CHECK(bitwise_equal(g.weight[0], matmul_tn(x, Matrix(5, 2, 1.0f))));
    CHECK(bitwise_equal(g.bias[0], Matrix(1, 2, 5.0f)));
}

TEST_CASE("backward requires a forward pass") {
    Rng rng(5);
    const Network net = Network::residual_mlp(2, 4, 1, 2, rng);
    CHECK_THROWS_AS(backward_ste(net, ForwardCache{}, Matrix(1, 2)), std::logic_error);
}

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(6);
    int runs = 0;
    for (int attempt = 0; attempt < 20 && runs < 5; ++attempt) {
        Network net;
        net.params.push_back({gaussian_matrix(rng, 4, 8, 0.7), gaussian_matrix(rng, 1, 8, 0.1)});
        net.params.push_back({gaussian_matrix(rng, 8, 3, 0.5), gaussian_matrix(rng, 1, 3, 0.1)});
        net.layers.push_back({0, Activation::relu, false, LayerRole::input, -1});
        net.layers.push_back({1, Activation::identity, false, LayerRole::head, -1});
        REQUIRE(net.parameter_count() <= 200);
        const Matrix x = gaussian_matrix(rng, 6, 4);
        const auto y = labels(rng, 6, 3);
        if (min_kink_distance(net, x) < 1e-2) continue;
        const FdReport rep = finite_difference_check(net, x, y);
        CHECK(rep.checked == net.parameter_count());
        CHECK(rep.max_rel < 1e-4);
        ++runs;
    }
    CHECK(runs == 5);
}

TEST_CASE("residual and shared-weight gradients match finite differences") {
    Rng rng(7);
    int runs = 0;
    for (int attempt = 0; attempt < 40 && runs < 3; ++attempt) {
        Network net = Network::residual_mlp(3, 6, 2, 3, rng, true);
        REQUIRE(net.params.size() == 3);
        REQUIRE(net.parameter_count() <= 200);
        const Matrix x = gaussian_matrix(rng, 5, 3);
        const auto y = labels(rng, 5, 3);
        if (min_kink_distance(net, x) < 1e-2) continue;
        CHECK(finite_difference_check(net, x, y).max_rel < 1e-4);
        ++runs;
    }
    CHECK(runs == 3);
}

TEST_CASE("noisy gradients equal gradients of the graph with W_noise as leaves") {
    Rng rng(8);
    for (int t = 0; t < 10; ++t) {
        const Network net = Network::residual_mlp(4, 8, 3, 5, rng);
        const Matrix x = gaussian_matrix(rng, 7, 4);
        const auto y = labels(rng, 7, 5);
        ForwardOptions opts;
        opts.mode = Mode::train;
        opts.noise = {NoiseSpec::int_n(4, 0.5), NoiseSpec::pq_proxy({4, 1}, 0.3)};
        ForwardCache cache;
        Rng r(100 + t);
        forward(net, x, opts, &r, &cache);
        Matrix dlogits;
        softmax_cross_entropy(cache.logits, y, &dlogits);
        const Gradients g = backward_ste(net, cache, dlogits);

        // Explicit graph: the noisy weights become ordinary parameters.
        Network leaves = net;
        for (std::size_t i = 0; i < net.layers.size(); ++i) leaves.params[net.layers[i].param].weight = cache.weights[i];
        ForwardCache leaf_cache;
        forward(leaves, x, ForwardOptions{}, nullptr, &leaf_cache);
        CHECK(bitwise_equal(leaf_cache.logits, cache.logits));
        Matrix leaf_dlogits;
        softmax_cross_entropy(leaf_cache.logits, y, &leaf_dlogits);
        const Gradients lg = backward_ste(leaves, leaf_cache, leaf_dlogits);
        for (std::size_t i = 0; i < net.params.size(); ++i) {
            CHECK(bitwise_equal(g.weight[i], lg.weight[i]));
            CHECK(bitwise_equal(g.bias[i], lg.bias[i]));
        }

        // Independent double-precision check of the leaf gradient for the head.
        const std::size_t head = net.layers.back().param;
        Network probe = leaves;
        const double eps = 1e-3;
        float& slot = probe.params[head].weight(0, 0);
        const float saved = slot;
        slot = saved + float(eps);
        const double lp = reference_loss(probe, x, y);
        slot = saved - float(eps);
        const double lm = reference_loss(probe, x, y);
        CHECK(g.weight[head](0, 0) == doctest::Approx((lp - lm) / (2 * eps)).epsilon(1e-3));
    }
}

TEST_CASE("non-STE noise blocks receive no gradient") {
    Rng rng(9);
    const Network net = linear_net(gaussian_matrix(rng, 8, 3), Matrix(1, 3));
    NoiseSpec spec = NoiseSpec::pq_proxy({4, 1}, 0.5);
    spec.ste = false;
    ForwardOptions opts;
    opts.mode = Mode::train;
    opts.noise = {spec};
    ForwardCache cache;
    Rng r(3);
    const Matrix x = gaussian_matrix(rng, 5, 8);
    forward(net, x, opts, &r, &cache);
    const Gradients g = backward_ste(net, cache, Matrix(5, 3, 1.0f));
    REQUIRE(cache.grad_mask[0].has_value());
    const Matrix plain = matmul_tn(x, Matrix(5, 3, 1.0f));
    for (std::size_t rr = 0; rr < 8; ++rr) {
        for (std::size_t c = 0; c < 3; ++c) {
            if (cache.weights[0](rr, c) == 0.0f && net.params[0].weight(rr, c) != 0.0f) {
                CHECK(g.weight[0](rr, c) == 0.0f);
            } else {
                CHECK(g.weight[0](rr, c) == plain(rr, c));
            }
        }
    }
}

TEST_CASE("layerdrop") {
    Rng rng(10);
    const Network net = Network::residual_mlp(3, 8, 4, 2, rng);
    const Matrix x = gaussian_matrix(rng, 5, 3);
    ForwardOptions opts;
    opts.mode = Mode::train;
    opts.layerdrop = 1.0;
    ForwardCache cache;
    Rng r(1);
    const Matrix y = forward(net, x, opts, &r, &cache);

    Network skip;
    skip.params = {net.params.front(), net.params.back()};
    skip.layers = {net.layers.front(), net.layers.back()};
    skip.layers[1].param = 1;
    CHECK(bitwise_equal(y, forward(skip, x, ForwardOptions{}, nullptr)));

    Matrix dlogits;
    softmax_cross_entropy(y, std::vector<int>{0, 1, 0, 1, 1}, &dlogits);
    const Gradients g = backward_ste(net, cache, dlogits);
    for (std::size_t i : net.residual_layers()) {
        CHECK(cache.dropped[i]);
        CHECK(bitwise_equal(g.weight[net.layers[i].param], Matrix(8, 8)));
    }
    CHECK(frobenius_sq(g.weight[0], Matrix(3, 8)) > 0.0);

    opts.layerdrop = 0.5;
    std::size_t drops = 0, total = 0;
    for (int t = 0; t < 500; ++t) {
        forward(net, x, opts, &r, &cache);
        for (std::size_t i : net.residual_layers()) {
            drops += cache.dropped[i];
            ++total;
        }
    }
    CHECK(std::fabs(double(drops) / double(total) - 0.5) < 0.05);
}

TEST_CASE("shared layers accumulate into one store") {
    Rng rng(11);
    const Network shared = Network::residual_mlp(3, 6, 4, 2, rng, true);
    CHECK(shared.params.size() == 4);
    CHECK(shared.layers[1].param == shared.layers[2].param);
    CHECK(shared.layers[3].param == shared.layers[4].param);
    CHECK(shared.layers[2].param != shared.layers[3].param);

    Network untied = shared;
    untied.params = {shared.params[0], shared.params[1], shared.params[1], shared.params[2], shared.params[2],
                     shared.params[3]};
    for (std::size_t i = 0; i < untied.layers.size(); ++i) untied.layers[i].param = i;

    const Matrix x = gaussian_matrix(rng, 4, 3);
    const std::vector<int> y = {0, 1, 1, 0};
    ForwardCache a, b;
    Matrix da, db;
    forward(shared, x, ForwardOptions{}, nullptr, &a);
    forward(untied, x, ForwardOptions{}, nullptr, &b);
    CHECK(bitwise_equal(a.logits, b.logits));
    softmax_cross_entropy(a.logits, y, &da);
    softmax_cross_entropy(b.logits, y, &db);
    const Gradients ga = backward_ste(shared, a, da);
    const Gradients gb = backward_ste(untied, b, db);
    Matrix sum = gb.weight[2];
    add_inplace(sum, gb.weight[1]);
    CHECK(bitwise_equal(ga.weight[1], sum));
}

TEST_CASE("prune_every_other") {
    Rng rng(12);
    const Network net = Network::residual_mlp(3, 8, 4, 2, rng);
    const Network pruned = prune_every_other(net);
    CHECK(pruned.residual_layers().size() == 2);
    CHECK(pruned.layers.size() == 4);
    CHECK(bitwise_equal(pruned.params[1].weight, net.params[2].weight));
    CHECK(bitwise_equal(pruned.params[2].weight, net.params[4].weight));

    // Chunks A B | C D | E F | G H: A, B, E and F go.
    const Network shared = Network::residual_mlp(3, 8, 8, 2, rng, true);
    const Network sp = prune_every_other(shared);
    CHECK(sp.residual_layers().size() == 4);
    CHECK(sp.params.size() == 4);
    CHECK(sp.layers[1].param == sp.layers[2].param);
    CHECK(sp.layers[3].param == sp.layers[4].param);
    CHECK(bitwise_equal(sp.params[1].weight, shared.params[shared.layers[3].param].weight));
    CHECK(bitwise_equal(sp.params[2].weight, shared.params[shared.layers[7].param].weight));
    forward(sp, gaussian_matrix(rng, 2, 3), ForwardOptions{}, nullptr);
}

TEST_CASE("fit_layout") {
    CHECK(fit_layout(64, 10, {8, 1}) == BlockLayout{8, 1});
    CHECK(fit_layout(2, 64, {8, 1}) == BlockLayout{2, 1});
    CHECK(fit_layout(12, 4, {8, 4}) == BlockLayout{4, 4});
    CHECK(fit_layout(7, 3, {4, 2}) == BlockLayout{1, 1});
}

TEST_CASE("softmax cross-entropy") {
    const Matrix logits(2, 4);
    Matrix d;
    const std::vector<int> y = {0, 3};
    CHECK(softmax_cross_entropy(logits, y, &d) == doctest::Approx(std::log(4.0)));
    CHECK(d(0, 0) == doctest::Approx(-0.375));
    CHECK(d(1, 1) == doctest::Approx(0.125));
    const std::vector<int> bad = {0, 4};
    CHECK_THROWS(softmax_cross_entropy(logits, bad, nullptr));
}
