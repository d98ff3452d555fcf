#include "doctest.h"

#include "qnoise/ipq.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace qnoise;
using qnoise::testing::gaussian_matrix;

namespace {

Dataset blobs(Rng& rng, std::size_t n, std::size_t dim, std::size_t classes) {
    Dataset d;
    d.classes = classes;
    d.x = gaussian_matrix(rng, n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        d.y.push_back(int(i % classes));
        d.x(i, 0) += float(i % classes);
    }
    return d;
}

} // namespace

TEST_CASE("distill_loss") {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(distill_loss(a, a) == 0.0);
    const Matrix b = Matrix::from_rows({{2, 3}, {4, 5}});
    CHECK(distill_loss(a, b) == 1.0);
    CHECK_THROWS_AS(distill_loss(a, Matrix(2, 3)), DimensionError);

    Rng rng(1);
    const Matrix s = gaussian_matrix(rng, 3, 4), t = gaussian_matrix(rng, 3, 4);
    Matrix g;
    distill_loss(s, t, &g);
    for (std::size_t i = 0; i < s.size(); ++i) {
        Matrix up = s, down = s;
        up.values()[i] += 1e-3f;
        down.values()[i] -= 1e-3f;
        const double h = double(up.values()[i]) - double(down.values()[i]);
        const double fd = (distill_loss(up, t) - distill_loss(down, t)) / h;
        CHECK(std::fabs(fd - g.values()[i]) <= 1e-4 * std::max(1e-3, std::fabs(fd)) + 1e-6);
    }
}

TEST_CASE("one-shot PQ with enough centroids is lossless") {
    Rng rng(2);
    const Network net = Network::residual_mlp(2, 8, 1, 3, rng);
    const CompressedNetwork c = quantize_one_shot(net, {}, 256, rng);
    const Matrix x = gaussian_matrix(rng, 5, 2);
    CHECK(bitwise_equal(c.forward(x), forward(net, x, ForwardOptions{}, nullptr)));
    for (const auto& r : c.report) CHECK(r.objective == 0.0);
}

TEST_CASE("one-shot reports match reconstruction error and storage") {
    Rng rng(3);
    const Network net = Network::residual_mlp(4, 16, 2, 4, rng);
    const CompressedNetwork c = quantize_one_shot(net, {}, 4, rng);
    REQUIRE(c.report.size() == net.params.size());
    std::uint64_t sum = 0;
    for (const auto& r : c.report) {
        const Matrix& w = net.params[r.param].weight;
        CHECK(frobenius_sq(w, c.net.params[r.param].weight) == doctest::Approx(r.objective).epsilon(1e-5));
        const BlockGrid g = c.pq[r.param]->grid();
        CHECK(r.bits == storage_bits(4, g.dim(), g.m, g.q, w.rows()));
        sum += r.bits;
    }
    CHECK(c.total_bits() == sum);
    CHECK(c.pq[0]->layout == BlockLayout{4, 1});
    CHECK(c.pq[1]->layout == BlockLayout{8, 1});
    CHECK_THROWS_AS(quantize_one_shot(net, std::vector<BlockLayout>(net.params.size(), {3, 1}), 4, rng), LayoutError);
}

TEST_CASE("iPQ with no finetuning is one-shot PQ") {
    Rng data_rng(4);
    const Network net = Network::residual_mlp(4, 16, 2, 4, data_rng);
    const Dataset data = blobs(data_rng, 64, 4, 4);
    IpqConfig cfg;
    cfg.centroids = 4;
    cfg.finetune_steps = 0;
    Rng a(9), b(9);
    const CompressedNetwork one = quantize_one_shot(net, {}, 4, a);
    const CompressedNetwork it = quantize_iterative(net, net, cfg, data, b);
    CHECK(bitwise_equal(one.net, it.net));
}

TEST_CASE("iPQ on a single layer only moves centroids") {
    Rng rng(5);
    Network net;
    net.params.push_back({gaussian_matrix(rng, 8, 3), gaussian_matrix(rng, 1, 3)});
    net.layers.push_back({0, Activation::identity, false, LayerRole::head, -1});
    const Dataset data = blobs(rng, 64, 8, 3);
    Network teacher = net;
    teacher.params[0].weight.values()[0] += 0.5f;
    IpqConfig cfg;
    cfg.centroids = 3;
    cfg.finetune_steps = 20;
    cfg.centroid_lr = 0.05;
    Rng a(1), b(1);
    const CompressedNetwork one = quantize_one_shot(net, {}, 3, a);
    const CompressedNetwork it = quantize_iterative(net, teacher, cfg, data, b);
    CHECK(it.pq[0]->indices.entries == one.pq[0]->indices.entries);
    CHECK(bitwise_equal(it.net.params[0].bias, net.params[0].bias));
    CHECK(it.pq[0]->codebook.centroids != one.pq[0]->codebook.centroids);
    CHECK(bitwise_equal(it.net.params[0].weight, it.pq[0]->reconstruct()));
}

TEST_CASE("iPQ respects order and keeps assignments fixed") {
    Rng rng(6);
    const Network net = Network::residual_mlp(4, 16, 2, 4, rng);
    const Dataset data = blobs(rng, 128, 4, 4);
    IpqConfig cfg;
    cfg.centroids = 4;
    cfg.finetune_steps = 10;
    cfg.order = {3, 1, 0, 2};
    Rng a(2), b(2);
    const CompressedNetwork it = quantize_iterative(net, net, cfg, data, a);
    REQUIRE(it.report.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(it.report[i].param == cfg.order[i]);
    // The first layer in the order is quantized before any finetuning.
    const CompressedNetwork one = quantize_one_shot(net, {}, 4, b);
    CHECK(it.pq[3]->indices.entries == one.pq[3]->indices.entries);
    for (std::size_t p = 0; p < 4; ++p) CHECK(bitwise_equal(it.net.params[p].weight, it.pq[p]->reconstruct()));

    cfg.order = {0, 0, 1, 2};
    CHECK_THROWS(quantize_iterative(net, net, cfg, data, a));
    CHECK(structure_order(net, {LayerRole::head, LayerRole::input}) == std::vector<std::size_t>{3, 0, 1, 2});
}

TEST_CASE("a small centroid step does not increase the distillation loss") {
    Rng rng(7);
    const Network teacher = Network::residual_mlp(4, 16, 2, 4, rng);
    const Dataset data = blobs(rng, 32, 4, 4);
    CompressedNetwork c = quantize_one_shot(teacher, {}, 4, rng);
    ForwardCache cache;
    Matrix grad;
    const Matrix target = forward(teacher, data.x, ForwardOptions{}, nullptr);
    forward(c.net, data.x, ForwardOptions{}, nullptr, &cache);
    const double before = distill_loss(cache.logits, target, &grad);
    const Gradients g = backward_ste(c.net, cache, grad);
    for (std::size_t p = 0; p < c.pq.size(); ++p) {
        PqTensor& t = *c.pq[p];
        t.codebook = finetune_centroids(t.codebook, t.indices, split_blocks(g.weight[p], t.layout), 1e-4);
    }
    c.sync();
    CHECK(distill_loss(c.forward(data.x), target) <= before);
}

TEST_CASE("combine_with_int8") {
    Rng rng(8);
    Network net = Network::residual_mlp(2, 8, 1, 3, rng);
    // Weights already on an integer grid make int8 centroids lossless.
    for (Param& p : net.params)
        for (float& v : p.weight.values()) v = std::round(v * 4.0f);
    const CompressedNetwork c = quantize_one_shot(net, {}, 4, rng);
    const CompressedNetwork c8 = combine_with_int8(c, {gaussian_matrix(rng, 16, 2), gaussian_matrix(rng, 16, 2)});
    for (std::size_t p = 0; p < net.params.size(); ++p) {
        const Codebook& cb = c8.pq[p]->codebook;
        REQUIRE(cb.int8.has_value());
        CHECK(c.pq[p]->codebook.storage_bits() == 4 * cb.storage_bits());
        const bool on_grid = cb.centroids == c.pq[p]->codebook.centroids;
        if (on_grid) CHECK(bitwise_equal(c8.net.params[p].weight, c.net.params[p].weight));
    }
    REQUIRE(c8.activation_quant.size() == net.layers.size());
    CHECK_FALSE(c8.activation_quant[0].has_value());
    for (std::size_t i = 1; i < c8.activation_quant.size(); ++i) CHECK(c8.activation_quant[i].has_value());
    CHECK(c8.forward(gaussian_matrix(rng, 3, 2)).all_finite());
    CHECK_THROWS(combine_with_int8(c, {}));
}

TEST_CASE("layer report csv") {
    CHECK(layer_report_csv({{1, 4, 8, 0.5, 100}}) == "layer,K,d,objective,bits\n1,4,8,0.5,100\n");
}
