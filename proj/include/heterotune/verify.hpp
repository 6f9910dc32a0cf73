#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "heterotune/aggregate.hpp"
#include "heterotune/checkpoint.hpp"
#include "heterotune/common.hpp"
#include "heterotune/config.hpp"
#include "heterotune/data.hpp"
#include "heterotune/federation.hpp"
#include "heterotune/matrix.hpp"
#include "heterotune/model.hpp"
#include "heterotune/partition.hpp"
#include "heterotune/rng.hpp"

// Self-contained verification harness: every derived numeric claim is checked
// against an independently coded oracle at fixed seeds. cmd_verify prints one
// line per check and fails the process if any check fails.

namespace heterotune {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace checks {

inline CheckResult ok(std::string name, std::string detail) {
    return {std::move(name), true, std::move(detail)};
}

inline CheckResult bad(std::string name, std::string detail) {
    return {std::move(name), false, std::move(detail)};
}

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

inline Matrix rand_matrix(int rows, int cols, SeededRng& rng, double scale) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.normal(0.0, scale);
    return m;
}

inline FedAdapter rand_adapter(int width, int bottleneck, int branches, SeededRng& rng) {
    FedAdapter a;
    a.w_loc_d = rand_matrix(width, bottleneck, rng, 0.3);
    a.w_loc_u = rand_matrix(bottleneck, width, rng, 0.3);
    for (int i = 0; i < branches; ++i)
        a.branches.push_back({rand_matrix(bottleneck, bottleneck, rng, 0.3),
                              rand_matrix(bottleneck, bottleneck, rng, 0.3)});
    a.alphas.resize(branches);
    for (double& v : a.alphas) v = rng.uniform(-1.0, 1.0);
    return a;
}

// symmetric relative error used by every gradient check
inline double rel_err(double fd, double an) {
    return std::fabs(fd - an) / std::max(1.0, std::fabs(fd) + std::fabs(an));
}

inline CheckResult matmul_oracle() {
    SeededRng rng(3, "matmul-oracle");
    double max_err = 0.0;
    for (int t = 0; t < 20; ++t) {
        const int n = 1 + rng.uniform_int(12);
        const int k = 1 + rng.uniform_int(40);
        const int p = 1 + rng.uniform_int(12);
        const Matrix a = rand_matrix(n, k, rng, 1.0);
        const Matrix b = rand_matrix(k, p, rng, 1.0);
        const Matrix c = matmul(a, b);
        // dot-product order, the opposite accumulation order from matmul
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < p; ++j) {
                double acc = 0.0;
                for (int q = 0; q < k; ++q) acc += a(i, q) * b(q, j);
                max_err = std::max(max_err, std::fabs(acc - c(i, j)));
            }
    }
    if (max_err > 1e-12) return bad("matmul-oracle", "max |diff| " + fmt(max_err));
    return ok("matmul-oracle", "20 shapes, max |diff| " + fmt(max_err));
}

inline CheckResult gelu_grad_fd() {
    double max_err = 0.0;
    const double h = 1e-5;
    for (double x = -4.0; x <= 4.0; x += 0.125) {
        const double fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
        max_err = std::max(max_err, std::fabs(fd - gelu_grad_scalar(x)));
    }
    if (max_err > 1e-8) return bad("gelu-grad-fd", "max |diff| " + fmt(max_err));
    return ok("gelu-grad-fd", "grid [-4,4], max |diff| " + fmt(max_err));
}

inline CheckResult cross_entropy_fd() {
    SeededRng rng(17, "ce-fd");
    Matrix logits = rand_matrix(5, 7, rng, 2.0);
    std::vector<int> labels(5);
    for (int& y : labels) y = rng.uniform_int(7);
    const LossResult base = softmax_cross_entropy(logits, labels);
    const double h = 1e-6;
    double max_err = 0.0;
    for (size_t j = 0; j < logits.data.size(); ++j) {
        const double save = logits.data[j];
        logits.data[j] = save + h;
        const double up = softmax_cross_entropy(logits, labels).loss;
        logits.data[j] = save - h;
        const double down = softmax_cross_entropy(logits, labels).loss;
        logits.data[j] = save;
        max_err = std::max(max_err, rel_err((up - down) / (2.0 * h), base.dlogits.data[j]));
    }
    if (max_err > 1e-4) return bad("cross-entropy-fd", "max rel err " + fmt(max_err));
    return ok("cross-entropy-fd", "35 logits, max rel err " + fmt(max_err));
}

/// Shared with the acceptance suite, which runs it at full scale.
inline double fusion_sweep_max_err(int trials, uint64_t seed) {
    SeededRng rng(seed, "fusion-sweep");
    double max_err = 0.0;
    for (int t = 0; t < trials; ++t) {
        const int m = 4 + rng.uniform_int(61);                    // 4..64
        const int r = 1 + rng.uniform_int(std::min(16, m));      // 1..min(16,m)
        const int branches = 1 + rng.uniform_int(4);             // 1..4
        const FedAdapter a = rand_adapter(m, r, branches, rng);
        const Matrix x = rand_matrix(5, m, rng, 1.0);
        const Matrix y1 = adapter_forward(x, a);
        const auto [a_prime, b_prime] = adapter_fuse(a);
        const Matrix y2 = fused_forward(x, a_prime, b_prime);
        for (size_t j = 0; j < y1.data.size(); ++j)
            max_err = std::max(max_err, std::fabs(y1.data[j] - y2.data[j]));
    }
    return max_err;
}

inline CheckResult fusion_equivalence() {
    const double max_err = fusion_sweep_max_err(60, 7);
    if (max_err > 1e-12) return bad("fusion-equivalence", "max |diff| " + fmt(max_err));
    return ok("fusion-equivalence", "60 adapters, max |diff| " + fmt(max_err));
}

inline CheckResult adapter_grad_fd() {
    const int m = 6, r = 3, branches = 3, n = 4, own = 1;
    SeededRng rng(11, "adapter-fd");
    FedAdapter a = rand_adapter(m, r, branches, rng);
    Matrix x = rand_matrix(n, m, rng, 1.0);
    const Matrix dy = rand_matrix(n, m, rng, 1.0);
    auto probe = [&]() { return dot(dy, adapter_forward(x, a)); };

    AdapterCache cache;
    adapter_forward(x, a, &cache);
    const AdapterGrads g = adapter_backward(cache, dy, a, own);

    const double h = 1e-6;
    double max_err = 0.0;
    auto fd_sweep = [&](std::vector<double>& params, const std::vector<double>& analytic) {
        for (size_t j = 0; j < params.size(); ++j) {
            const double save = params[j];
            params[j] = save + h;
            const double up = probe();
            params[j] = save - h;
            const double down = probe();
            params[j] = save;
            max_err = std::max(max_err, rel_err((up - down) / (2.0 * h), analytic[j]));
        }
    };
    fd_sweep(a.w_loc_d.data, g.w_loc_d.data);
    fd_sweep(a.w_loc_u.data, g.w_loc_u.data);
    fd_sweep(a.branches[own].w_s_d.data, g.own_s_d.data);
    fd_sweep(a.branches[own].w_s_u.data, g.own_s_u.data);
    fd_sweep(a.alphas, g.alphas);
    fd_sweep(x.data, g.x.data);
    if (max_err > 1e-4) return bad("adapter-grad-fd", "max rel err " + fmt(max_err));
    return ok("adapter-grad-fd", "all trainables + dx, max rel err " + fmt(max_err));
}

inline CheckResult foreign_alpha_grad() {
    const int m = 6, r = 3, branches = 3, own = 0;
    SeededRng rng(13, "foreign-alpha");
    const FedAdapter a = rand_adapter(m, r, branches, rng);
    const Matrix x = rand_matrix(4, m, rng, 1.0);
    const Matrix dy = rand_matrix(4, m, rng, 1.0);
    AdapterCache cache;
    adapter_forward(x, a, &cache);
    const AdapterGrads g = adapter_backward(cache, dy, a, own);
    for (int i = 0; i < branches; ++i)
        if (i != own && std::fabs(g.alphas[i]) < 1e-12)
            return bad("foreign-alpha-grad", "alpha[" + std::to_string(i) + "] gradient is zero");
    return ok("foreign-alpha-grad",
              "foreign scalars get gradients, e.g. " + fmt(g.alphas[own == 0 ? 1 : 0]));
}

struct GradCheckStats {
    double max_rel_err = 0.0;
    int params_checked = 0;
};

/// Finite differences over EVERY trainable scalar of a model, regularizer
/// included. The acceptance suite runs this at its pinned shape.
inline GradCheckStats model_grad_check(int depth, int width, int bottleneck, int input_dim,
                                       int num_classes, int num_branches, int own_group,
                                       int batch, double lambda, uint64_t seed) {
    ModelConfig c;
    c.group_id = own_group;
    c.depth = depth;
    c.width = width;
    c.bottleneck = bottleneck;
    c.input_dim = input_dim;
    c.num_classes = num_classes;
    SeededRng rng(seed, "model-grad-fd");
    auto backbone = init_backbone(c, rng);
    HeteroModel model = make_model(c, num_branches, backbone, rng);
    for (auto& a : model.adapters) {
        a.w_loc_d = rand_matrix(width, bottleneck, rng, 0.3);
        a.w_loc_u = rand_matrix(bottleneck, width, rng, 0.3);
        for (auto& br : a.branches) {
            br.w_s_d = rand_matrix(bottleneck, bottleneck, rng, 0.3);
            br.w_s_u = rand_matrix(bottleneck, bottleneck, rng, 0.3);
        }
        for (double& v : a.alphas) v = rng.uniform(-1.0, 1.0);
    }
    model.head = rand_matrix(width, num_classes, rng, 0.5);
    const Matrix x = rand_matrix(batch, input_dim, rng, 1.0);
    std::vector<int> labels(batch);
    for (int& y : labels) y = rng.uniform_int(num_classes);

    auto loss_of = [&]() {
        const Matrix logits = model_forward(model, x);
        double loss = softmax_cross_entropy(logits, labels).loss;
        for (const auto& a : model.adapters)
            loss += lambda * (frobenius_sq(a.branches[own_group].w_s_d) +
                              frobenius_sq(a.branches[own_group].w_s_u));
        return loss;
    };

    ModelCache cache;
    const Matrix logits = model_forward(model, x, &cache);
    ModelGrads g = model_backward(model, cache, softmax_cross_entropy(logits, labels).dlogits);
    for (int b = 0; b < depth; ++b) {
        add_scaled(g.adapters[b].own_s_d, model.adapters[b].branches[own_group].w_s_d,
                   2.0 * lambda);
        add_scaled(g.adapters[b].own_s_u, model.adapters[b].branches[own_group].w_s_u,
                   2.0 * lambda);
    }

    std::vector<std::pair<double*, double>> entries;
    auto collect = [&](std::vector<double>& params, const std::vector<double>& analytic) {
        for (size_t j = 0; j < params.size(); ++j) entries.push_back({&params[j], analytic[j]});
    };
    collect(model.head.data, g.head.data);
    for (int b = 0; b < depth; ++b) {
        auto& a = model.adapters[b];
        auto& ab = g.adapters[b];
        collect(a.w_loc_d.data, ab.w_loc_d.data);
        collect(a.w_loc_u.data, ab.w_loc_u.data);
        collect(a.branches[own_group].w_s_d.data, ab.own_s_d.data);
        collect(a.branches[own_group].w_s_u.data, ab.own_s_u.data);
        collect(a.alphas, ab.alphas);
    }

    GradCheckStats stats;
    const double h = 1e-6;
    for (auto& [p, analytic] : entries) {
        const double save = *p;
        *p = save + h;
        const double up = loss_of();
        *p = save - h;
        const double down = loss_of();
        *p = save;
        stats.max_rel_err = std::max(stats.max_rel_err, rel_err((up - down) / (2.0 * h), analytic));
        stats.params_checked += 1;
    }
    return stats;
}

inline CheckResult train_step_fd() {
    const auto stats = model_grad_check(2, 6, 2, 5, 4, 2, 1, 6, 1e-3, 23);
    if (stats.max_rel_err > 1e-4) return bad("train-step-fd", "max rel err " + fmt(stats.max_rel_err));
    return ok("train-step-fd", std::to_string(stats.params_checked) + " params, max rel err " +
                                   fmt(stats.max_rel_err));
}

inline CheckResult train_step_equality() {
    // one full-batch local_train step must equal init - lr * analytic gradient
    ModelConfig c;
    c.group_id = 0;
    c.depth = 1;
    c.width = 6;
    c.bottleneck = 2;
    c.input_dim = 4;
    c.num_classes = 3;
    const double lr = 0.05, lambda = 1e-3;
    SeededRng rng(29, "train-step");
    auto backbone = init_backbone(c, rng);
    HeteroModel model = make_model(c, 2, backbone, rng);
    model.head = rand_matrix(6, 3, rng, 0.5);
    model.adapters[0].w_loc_u = rand_matrix(2, 6, rng, 0.3);

    Dataset shard;
    shard.num_classes = 3;
    shard.features = rand_matrix(8, 4, rng, 1.0);
    shard.labels.resize(8);
    for (int& y : shard.labels) y = rng.uniform_int(3);

    HeteroModel manual = model;
    SeededRng t1(31, "train-step-rng");
    SeededRng t2(31, "train-step-rng");
    local_train(model, shard, 1, lr, lambda, 64, t1);

    // mirror the batch permutation, then apply one hand-computed SGD step
    std::vector<int> order(shard.size());
    std::iota(order.begin(), order.end(), 0);
    t2.shuffle(order);
    const Dataset batch = subset(shard, order);
    ModelCache cache;
    const Matrix logits = model_forward(manual, batch.features, &cache);
    ModelGrads g = model_backward(manual, cache, softmax_cross_entropy(logits, batch.labels).dlogits);
    add_scaled(g.adapters[0].own_s_d, manual.adapters[0].branches[0].w_s_d, 2.0 * lambda);
    add_scaled(g.adapters[0].own_s_u, manual.adapters[0].branches[0].w_s_u, 2.0 * lambda);
    sgd_step(manual.head, g.head, lr);
    sgd_step(manual.adapters[0].w_loc_d, g.adapters[0].w_loc_d, lr);
    sgd_step(manual.adapters[0].w_loc_u, g.adapters[0].w_loc_u, lr);
    sgd_step(manual.adapters[0].branches[0].w_s_d, g.adapters[0].own_s_d, lr);
    sgd_step(manual.adapters[0].branches[0].w_s_u, g.adapters[0].own_s_u, lr);
    for (size_t i = 0; i < manual.adapters[0].alphas.size(); ++i)
        manual.adapters[0].alphas[i] -= lr * g.adapters[0].alphas[i];

    const bool equal = model.head.data == manual.head.data &&
                       model.adapters[0].w_loc_d.data == manual.adapters[0].w_loc_d.data &&
                       model.adapters[0].w_loc_u.data == manual.adapters[0].w_loc_u.data &&
                       model.adapters[0].branches[0].w_s_d.data ==
                           manual.adapters[0].branches[0].w_s_d.data &&
                       model.adapters[0].branches[0].w_s_u.data ==
                           manual.adapters[0].branches[0].w_s_u.data &&
                       model.adapters[0].alphas == manual.adapters[0].alphas &&
                       model.adapters[0].branches[1].w_s_d.data ==
                           manual.adapters[0].branches[1].w_s_d.data;
    if (!equal) return bad("train-step-equality", "single step differs from init - lr*grad");
    return ok("train-step-equality", "one full-batch step matches hand-applied SGD exactly");
}

inline CheckResult weighted_average_oracle() {
    SeededRng rng(37, "wavg-oracle");
    std::vector<Matrix> items;
    std::vector<double> weights;
    for (int i = 0; i < 5; ++i) {
        items.push_back(rand_matrix(3, 4, rng, 1.0));
        weights.push_back(rng.uniform(0.1, 2.0));
    }
    const Matrix got = weighted_average(items, weights);
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    double max_err = 0.0;
    for (size_t j = 0; j < got.data.size(); ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < items.size(); ++i) acc += weights[i] * items[i].data[j];
        max_err = std::max(max_err, std::fabs(acc / wsum - got.data[j]));
    }
    if (max_err > 1e-12) return bad("weighted-average-oracle", "max |diff| " + fmt(max_err));
    return ok("weighted-average-oracle", "5 matrices, max |diff| " + fmt(max_err));
}

inline AdapterUpdate tiny_update(int group, int depth, int width, int bottleneck, int branches,
                                 long long samples, SeededRng& rng) {
    AdapterUpdate u;
    u.group_id = group;
    u.blocks.resize(depth);
    for (auto& b : u.blocks) {
        b.w_loc_d = rand_matrix(width, bottleneck, rng, 1.0);
        b.w_loc_u = rand_matrix(bottleneck, width, rng, 1.0);
        b.w_s_d = rand_matrix(bottleneck, bottleneck, rng, 1.0);
        b.w_s_u = rand_matrix(bottleneck, bottleneck, rng, 1.0);
        b.alphas.resize(branches);
        for (double& a : b.alphas) a = rng.uniform(-1.0, 1.0);
    }
    u.head = rand_matrix(width, 3, rng, 1.0);
    u.sample_count = samples;
    return u;
}

inline CheckResult aggregate_local_oracle() {
    SeededRng rng(41, "agg-local-oracle");
    std::vector<AdapterUpdate> ups;
    const long long counts[3] = {10, 20, 30};
    for (int i = 0; i < 3; ++i) ups.push_back(tiny_update(0, 1, 4, 2, 2, counts[i], rng));
    const GroupLocalState got = aggregate_local({&ups[0], &ups[1], &ups[2]}, false);
    double max_err = 0.0;
    auto compare = [&](auto getter, const std::vector<double>& got_data) {
        for (size_t j = 0; j < got_data.size(); ++j) {
            double acc = 0.0;
            for (int i = 0; i < 3; ++i) acc += static_cast<double>(counts[i]) / 60.0 * getter(ups[i])[j];
            max_err = std::max(max_err, std::fabs(acc - got_data[j]));
        }
    };
    compare([](const AdapterUpdate& u) -> const std::vector<double>& { return u.blocks[0].w_loc_d.data; },
            got.blocks[0].w_loc_d.data);
    compare([](const AdapterUpdate& u) -> const std::vector<double>& { return u.blocks[0].w_loc_u.data; },
            got.blocks[0].w_loc_u.data);
    compare([](const AdapterUpdate& u) -> const std::vector<double>& { return u.blocks[0].alphas; },
            got.blocks[0].alphas);
    compare([](const AdapterUpdate& u) -> const std::vector<double>& { return u.head.data; },
            got.head.data);
    if (max_err > 1e-12) return bad("aggregate-local-oracle", "max |diff| " + fmt(max_err));
    return ok("aggregate-local-oracle", "counts 10/20/30 vs loop oracle, max |diff| " + fmt(max_err));
}

inline CheckResult share_depth_mapping() {
    // M=2, depths {4,2}: shallow blocks map to slots {0,3}; slots 1,2 of
    // branch 1 must carry over, everything else averages
    if (slot_for_block(0, 2, 4) != 0 || slot_for_block(1, 2, 4) != 3)
        return bad("share-depth-mapping", "depth-2 mapping is not {0,3}");
    if (slot_for_block(0, 3, 4) != 0 || slot_for_block(1, 3, 4) != 2 || slot_for_block(2, 3, 4) != 3)
        return bad("share-depth-mapping", "depth-3 mapping is not {0,2,3}");
    if (slot_for_block(0, 1, 4) != 0) return bad("share-depth-mapping", "depth-1 must map to slot 0");

    SeededRng rng(43, "share-mapping");
    const int r = 2;
    ShareSet prev(4, std::vector<SharePair>(2));
    for (int s = 0; s < 4; ++s)
        for (int i = 0; i < 2; ++i) {
            prev[s][i].w_s_d = rand_matrix(r, r, rng, 1.0);
            prev[s][i].w_s_u = rand_matrix(r, r, rng, 1.0);
        }
    std::vector<AdapterUpdate> ups;
    ups.push_back(tiny_update(0, 4, 4, r, 2, 10, rng));
    ups.push_back(tiny_update(0, 4, 4, r, 2, 30, rng));
    ups.push_back(tiny_update(1, 2, 6, r, 2, 20, rng));
    ups.push_back(tiny_update(1, 2, 6, r, 2, 20, rng));
    const ShareSet got = aggregate_share({&ups[0], &ups[1], &ups[2], &ups[3]}, {4, 2}, prev,
                                         ShareAgg::per_branch, false);

    double max_err = 0.0;
    auto expect_avg = [&](const Matrix& got_m, const Matrix& a, double wa, const Matrix& b,
                          double wb) {
        for (size_t j = 0; j < got_m.data.size(); ++j) {
            const double want = (wa * a.data[j] + wb * b.data[j]) / (wa + wb);
            max_err = std::max(max_err, std::fabs(want - got_m.data[j]));
        }
    };
    for (int s = 0; s < 4; ++s) {
        expect_avg(got[s][0].w_s_d, ups[0].blocks[s].w_s_d, 10, ups[1].blocks[s].w_s_d, 30);
        expect_avg(got[s][0].w_s_u, ups[0].blocks[s].w_s_u, 10, ups[1].blocks[s].w_s_u, 30);
    }
    expect_avg(got[0][1].w_s_d, ups[2].blocks[0].w_s_d, 20, ups[3].blocks[0].w_s_d, 20);
    expect_avg(got[3][1].w_s_d, ups[2].blocks[1].w_s_d, 20, ups[3].blocks[1].w_s_d, 20);
    expect_avg(got[0][1].w_s_u, ups[2].blocks[0].w_s_u, 20, ups[3].blocks[0].w_s_u, 20);
    expect_avg(got[3][1].w_s_u, ups[2].blocks[1].w_s_u, 20, ups[3].blocks[1].w_s_u, 20);
    if (max_err > 1e-12) return bad("share-depth-mapping", "max |diff| vs hand table " + fmt(max_err));
    const bool carried = got[1][1].w_s_d.data == prev[1][1].w_s_d.data &&
                         got[1][1].w_s_u.data == prev[1][1].w_s_u.data &&
                         got[2][1].w_s_d.data == prev[2][1].w_s_d.data &&
                         got[2][1].w_s_u.data == prev[2][1].w_s_u.data;
    if (!carried) return bad("share-depth-mapping", "unmapped slots of the shallow branch changed");
    return ok("share-depth-mapping", "hand table matches, max |diff| " + fmt(max_err));
}

inline CheckResult share_carry_over() {
    SeededRng rng(47, "share-carry");
    const int r = 2;
    ShareSet prev(3, std::vector<SharePair>(2));
    for (auto& slot : prev)
        for (auto& pair : slot)
            pair = {rand_matrix(r, r, rng, 1.0), rand_matrix(r, r, rng, 1.0)};
    std::vector<AdapterUpdate> ups;
    ups.push_back(tiny_update(0, 3, 4, r, 2, 10, rng));
    const ShareSet got = aggregate_share({&ups[0]}, {3, 3}, prev, ShareAgg::per_branch, false);
    for (int s = 0; s < 3; ++s) {
        if (got[s][1].w_s_d.data != prev[s][1].w_s_d.data ||
            got[s][1].w_s_u.data != prev[s][1].w_s_u.data)
            return bad("share-carry-over", "absent group's branch changed at slot " + std::to_string(s));
        if (got[s][0].w_s_d.data != ups[0].blocks[s].w_s_d.data)
            return bad("share-carry-over", "singleton average is not the update verbatim");
    }
    return ok("share-carry-over", "absent branch bit-identical, singleton verbatim");
}

inline ExperimentConfig small_experiment_config(RunMode mode, uint64_t seed) {
    ExperimentConfig cfg;
    cfg.mode = mode;
    cfg.master_seed = seed;
    cfg.rounds = 2;
    cfg.clients = 6;
    cfg.epochs = 1;
    cfg.lr = 0.05;
    cfg.lambda_reg = 1e-4;
    cfg.batch_size = 8;
    cfg.participation = 1.0;
    cfg.dirichlet_alpha = 0.5;
    cfg.val_fraction = 0.2;
    cfg.min_per_client = 2;
    cfg.blobs = {3, 4, 30, 0.3};
    GroupSpec g1;
    g1.config.width = 6;
    g1.config.depth = 2;
    g1.config.bottleneck = 2;
    g1.ratio = 1.0;
    GroupSpec g2;
    g2.config.width = 10;
    g2.config.depth = 3;
    g2.config.bottleneck = 2;
    g2.ratio = 1.0;
    cfg.groups = {g1, g2};
    validate_config(cfg);
    return cfg;
}

/// Plain FedAvg over the adapter+head parameters, coded flat and without the
/// aggregation module, for the M=1 reduction contract. Returns the encoded
/// server state after every round.
inline std::vector<std::vector<uint8_t>> fedavg_reference(const ExperimentConfig& cfg) {
    if (cfg.groups.size() != 1) throw ProtocolError("fedavg_reference: M must be 1");
    Dataset full = load_experiment_data(cfg);
    Dataset train, val;
    {
        SeededRng rng(cfg.master_seed, "valsplit");
        std::tie(train, val) = stratified_split(full, cfg.val_fraction, rng);
    }
    ModelConfig mc = cfg.groups[0].config;
    mc.group_id = 0;
    mc.input_dim = full.features.cols;
    mc.num_classes = full.num_classes;
    PartitionPlan plan;
    {
        SeededRng rng(cfg.master_seed, "partition");
        plan = dirichlet_partition(train.labels, cfg.clients, cfg.dirichlet_alpha,
                                   cfg.min_per_client, rng);
    }
    std::vector<Dataset> shards;
    shards.reserve(cfg.clients);
    for (int k = 0; k < cfg.clients; ++k) shards.push_back(subset(train, plan.client_indices[k]));

    SeededRng brng(cfg.master_seed, "backbone:0");
    auto backbone = init_backbone(mc, brng);
    std::vector<FedAdapter> global_adapters;
    for (int b = 0; b < mc.depth; ++b) {
        SeededRng arng(cfg.master_seed, "adapter:0:" + std::to_string(b));
        global_adapters.push_back(init_adapter(mc, 1, arng));
    }
    Matrix global_head(mc.width, mc.num_classes);

    // flat anchored mean, the same arithmetic FedAvg would apply to a single
    // concatenated parameter vector
    auto avg_into = [](std::vector<double>& dst, const std::vector<const std::vector<double>*>& xs,
                       const std::vector<double>& weights, double wsum) {
        dst = *xs[0];
        for (size_t i = 0; i < xs.size(); ++i) {
            const double s = weights[i] / wsum;
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += s * ((*xs[i])[j] - (*xs[0])[j]);
        }
    };

    std::vector<std::vector<uint8_t>> states;
    for (int round = 0; round < cfg.rounds; ++round) {
        std::vector<AdapterUpdate> ups;
        ups.reserve(cfg.clients);
        for (int k = 0; k < cfg.clients; ++k) {
            HeteroModel model;
            model.config = mc;
            model.backbone = backbone;
            model.adapters = global_adapters;
            model.head = global_head;
            SeededRng crng(cfg.master_seed,
                           "client:" + std::to_string(k) + ":round:" + std::to_string(round));
            ups.push_back(local_train(model, shards[k], cfg.epochs, cfg.lr, cfg.lambda_reg,
                                      cfg.batch_size, crng));
        }
        std::vector<double> weights;
        double wsum = 0.0;
        for (const auto& u : ups) {
            weights.push_back(cfg.uniform_weights ? 1.0 : static_cast<double>(u.sample_count));
            wsum += weights.back();
        }
        std::vector<const std::vector<double>*> xs(ups.size());
        for (int b = 0; b < mc.depth; ++b) {
            for (size_t i = 0; i < ups.size(); ++i) xs[i] = &ups[i].blocks[b].w_loc_d.data;
            avg_into(global_adapters[b].w_loc_d.data, xs, weights, wsum);
            for (size_t i = 0; i < ups.size(); ++i) xs[i] = &ups[i].blocks[b].w_loc_u.data;
            avg_into(global_adapters[b].w_loc_u.data, xs, weights, wsum);
            for (size_t i = 0; i < ups.size(); ++i) xs[i] = &ups[i].blocks[b].w_s_d.data;
            avg_into(global_adapters[b].branches[0].w_s_d.data, xs, weights, wsum);
            for (size_t i = 0; i < ups.size(); ++i) xs[i] = &ups[i].blocks[b].w_s_u.data;
            avg_into(global_adapters[b].branches[0].w_s_u.data, xs, weights, wsum);
            for (size_t i = 0; i < ups.size(); ++i) xs[i] = &ups[i].blocks[b].alphas;
            avg_into(global_adapters[b].alphas, xs, weights, wsum);
        }
        for (size_t i = 0; i < ups.size(); ++i) xs[i] = &ups[i].head.data;
        avg_into(global_head.data, xs, weights, wsum);

        ServerState snap;
        snap.max_depth = mc.depth;
        GroupServerState gs;
        gs.config = mc;
        gs.backbone = backbone;
        gs.local.blocks.resize(mc.depth);
        for (int b = 0; b < mc.depth; ++b) {
            gs.local.blocks[b].w_loc_d = global_adapters[b].w_loc_d;
            gs.local.blocks[b].w_loc_u = global_adapters[b].w_loc_u;
            gs.local.blocks[b].alphas = global_adapters[b].alphas;
        }
        gs.local.head = global_head;
        snap.groups.push_back(std::move(gs));
        ShareSet set(mc.depth, std::vector<SharePair>(1));
        for (int b = 0; b < mc.depth; ++b) set[b][0] = global_adapters[b].branches[0];
        snap.share_sets = {set};
        states.push_back(encode_server_state(snap));
    }
    return states;
}

inline ExperimentConfig fedavg_reduction_config(uint64_t seed) {
    ExperimentConfig cfg;
    cfg.mode = RunMode::heterotune;
    cfg.master_seed = seed;
    cfg.rounds = 2;
    cfg.clients = 4;
    cfg.epochs = 1;
    cfg.lr = 0.05;
    cfg.lambda_reg = 1e-4;
    cfg.batch_size = 8;
    cfg.participation = 1.0;
    cfg.dirichlet_alpha = 0.5;
    cfg.val_fraction = 0.2;
    cfg.min_per_client = 2;
    cfg.blobs = {3, 4, 30, 0.3};
    GroupSpec g;
    g.config.width = 8;
    g.config.depth = 2;
    g.config.bottleneck = 2;
    g.ratio = 1.0;
    cfg.groups = {g};
    validate_config(cfg);
    return cfg;
}

inline CheckResult fedavg_reduction() {
    const ExperimentConfig cfg = fedavg_reduction_config(99);
    const auto ref_states = fedavg_reference(cfg);
    PreparedExperiment pe = prepare_experiment(cfg, 1);
    for (int r = 0; r < cfg.rounds; ++r) {
        step_experiment(pe);
        const auto got = encode_server_state(pe.server);
        if (got != ref_states[r])
            return bad("fedavg-reduction",
                       "state differs from FedAvg reference at round " + std::to_string(r + 1));
    }
    return ok("fedavg-reduction", std::to_string(cfg.rounds) + " rounds bit-identical to reference");
}

inline CheckResult blobs_nearest_mean() {
    SeededRng rng(5, "blobs-oracle");
    const Dataset d = gen_blobs(10, 32, 50, 0.1, rng);
    Matrix means(10, 32);
    std::vector<int> counts(10, 0);
    for (int i = 0; i < d.size(); ++i) {
        counts[d.labels[i]] += 1;
        for (int j = 0; j < 32; ++j) means(d.labels[i], j) += d.features(i, j);
    }
    for (int c = 0; c < 10; ++c)
        for (int j = 0; j < 32; ++j) means(c, j) /= counts[c];
    int correct = 0;
    for (int i = 0; i < d.size(); ++i) {
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < 10; ++c) {
            double dist = 0.0;
            for (int j = 0; j < 32; ++j) {
                const double diff = d.features(i, j) - means(c, j);
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        correct += best == d.labels[i];
    }
    const double acc = static_cast<double>(correct) / d.size();
    if (acc < 0.99) return bad("blobs-nearest-mean", "nearest-mean acc " + fmt(acc));
    return ok("blobs-nearest-mean", "nearest-mean acc " + fmt(acc));
}

inline double mean_client_label_entropy(const std::vector<int>& labels, int num_classes,
                                        int num_clients, double alpha, int min_per_client,
                                        SeededRng& rng) {
    const PartitionPlan plan =
        dirichlet_partition(labels, num_clients, alpha, min_per_client, rng);
    double total = 0.0;
    for (const auto& idx : plan.client_indices) {
        std::vector<int> hist(num_classes, 0);
        for (int i : idx) hist[labels[i]] += 1;
        double entropy = 0.0;
        for (int h : hist)
            if (h > 0) {
                const double p = static_cast<double>(h) / static_cast<double>(idx.size());
                entropy -= p * std::log(p);
            }
        total += entropy;
    }
    return total / static_cast<double>(plan.client_indices.size());
}

inline CheckResult dirichlet_entropy() {
    std::vector<int> labels(2000);
    for (int i = 0; i < 2000; ++i) labels[i] = i / 200;
    double skewed = 0.0, balanced = 0.0;
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        SeededRng r1(seed, "entropy-skewed");
        skewed += mean_client_label_entropy(labels, 10, 20, 0.1, 1, r1);
        SeededRng r2(seed, "entropy-balanced");
        balanced += mean_client_label_entropy(labels, 10, 20, 1e6, 1, r2);
    }
    skewed /= 3.0;
    balanced /= 3.0;
    if (!(skewed < 0.6 * balanced))
        return bad("dirichlet-entropy",
                   "skewed " + fmt(skewed) + " not < 60% of balanced " + fmt(balanced));
    return ok("dirichlet-entropy", "alpha 0.1 entropy " + fmt(skewed) + " vs 1e6 " + fmt(balanced));
}

inline CheckResult param_monotonicity() {
    std::vector<ModelConfig> configs;
    for (int m : {32, 64, 128, 256}) {
        ModelConfig c;
        c.group_id = static_cast<int>(configs.size());
        c.depth = 4;
        c.width = m;
        c.bottleneck = 8;
        c.input_dim = 32;
        c.num_classes = 10;
        configs.push_back(c);
    }
    const auto counts = param_counts(configs, 4);
    for (size_t g = 1; g < counts.size(); ++g)
        if (!(counts[g].reduction_ratio > counts[g - 1].reduction_ratio))
            return bad("param-monotonicity", "ratio not increasing at width " +
                                                 std::to_string(configs[g].width));
    if (!(counts.back().reduction_ratio > 0.85))
        return bad("param-monotonicity", "ratio at width 256 is " + fmt(counts.back().reduction_ratio));
    return ok("param-monotonicity",
              "ratios " + fmt(counts[0].reduction_ratio) + " .. " + fmt(counts[3].reduction_ratio));
}

inline CheckResult dual_path_evaluate() {
    ModelConfig c;
    c.group_id = 1;
    c.depth = 2;
    c.width = 12;
    c.bottleneck = 4;
    c.input_dim = 6;
    c.num_classes = 5;
    SeededRng rng(53, "dual-path");
    auto backbone = init_backbone(c, rng);
    HeteroModel model = make_model(c, 2, backbone, rng);
    for (auto& a : model.adapters) {
        a.w_loc_d = rand_matrix(12, 4, rng, 0.3);
        a.w_loc_u = rand_matrix(4, 12, rng, 0.3);
        for (auto& br : a.branches) {
            br.w_s_d = rand_matrix(4, 4, rng, 0.3);
            br.w_s_u = rand_matrix(4, 4, rng, 0.3);
        }
        for (double& v : a.alphas) v = rng.uniform(-1.0, 1.0);
    }
    model.head = rand_matrix(12, 5, rng, 0.5);
    Dataset d;
    d.num_classes = 5;
    d.features = rand_matrix(500, 6, rng, 1.0);
    d.labels.resize(500);
    for (int& y : d.labels) y = rng.uniform_int(5);

    const double fused_acc = evaluate(model, d);
    const std::vector<int> train_pred = argmax_rows(model_forward(model, d.features));
    int correct = 0;
    for (int i = 0; i < 500; ++i) correct += train_pred[i] == d.labels[i];
    const double train_acc = static_cast<double>(correct) / 500.0;
    if (fused_acc != train_acc)
        return bad("dual-path-evaluate",
                   "fused acc " + fmt(fused_acc) + " vs training-path " + fmt(train_acc));
    return ok("dual-path-evaluate", "both paths score " + fmt(fused_acc) + " on 500 rows");
}

inline CheckResult fingerprint_stability() {
    ModelConfig c;
    c.group_id = 0;
    c.depth = 2;
    c.width = 8;
    c.bottleneck = 2;
    c.input_dim = 4;
    c.num_classes = 3;
    SeededRng rng(59, "fingerprint");
    auto backbone = init_backbone(c, rng);
    HeteroModel model = make_model(c, 2, backbone, rng);
    const uint64_t before = backbone_fingerprint(*model.backbone);
    Dataset shard;
    shard.num_classes = 3;
    shard.features = rand_matrix(16, 4, rng, 1.0);
    shard.labels.resize(16);
    for (int& y : shard.labels) y = rng.uniform_int(3);
    SeededRng t(61, "fingerprint-train");
    local_train(model, shard, 3, 0.05, 1e-4, 4, t);
    const uint64_t after = backbone_fingerprint(*model.backbone);
    if (before != after || model.backbone->fingerprint != before)
        return bad("fingerprint-stability", "frozen weights changed under training");
    return ok("fingerprint-stability", "fingerprint unchanged through 3 epochs");
}

inline CheckResult no_op_round_fixpoint() {
    ExperimentConfig cfg = small_experiment_config(RunMode::heterotune, 67);
    cfg.lr = 0.0;
    cfg.rounds = 1;
    PreparedExperiment pe = prepare_experiment(cfg, 1);
    const auto before = encode_server_state(pe.server);
    step_experiment(pe);
    const auto after = encode_server_state(pe.server);
    if (before != after) return bad("no-op-round-fixpoint", "lr=0 round moved the server state");
    return ok("no-op-round-fixpoint", "lr=0 round leaves state bit-identical");
}

inline CheckResult worker_independence() {
    const ExperimentConfig cfg = small_experiment_config(RunMode::heterotune, 71);
    PreparedExperiment pe1 = prepare_experiment(cfg, 1);
    PreparedExperiment pe4 = prepare_experiment(cfg, 4);
    for (int r = 0; r < cfg.rounds; ++r) {
        step_experiment(pe1);
        step_experiment(pe4);
        if (encode_server_state(pe1.server) != encode_server_state(pe4.server))
            return bad("worker-independence", "1 vs 4 workers diverge at round " + std::to_string(r + 1));
    }
    return ok("worker-independence", "1 and 4 workers bit-identical across rounds");
}

}  // namespace checks

inline std::vector<CheckResult> run_all_checks() {
    using Fn = CheckResult (*)();
    const Fn fns[] = {
        checks::matmul_oracle,
        checks::gelu_grad_fd,
        checks::cross_entropy_fd,
        checks::fusion_equivalence,
        checks::adapter_grad_fd,
        checks::foreign_alpha_grad,
        checks::train_step_fd,
        checks::train_step_equality,
        checks::weighted_average_oracle,
        checks::aggregate_local_oracle,
        checks::share_depth_mapping,
        checks::share_carry_over,
        checks::fedavg_reduction,
        checks::blobs_nearest_mean,
        checks::dirichlet_entropy,
        checks::param_monotonicity,
        checks::dual_path_evaluate,
        checks::fingerprint_stability,
        checks::no_op_round_fixpoint,
        checks::worker_independence,
    };
    std::vector<CheckResult> out;
    for (const Fn fn : fns) {
        try {
            out.push_back(fn());
        } catch (const std::exception& e) {
            out.push_back({"<exception>", false, e.what()});
        }
    }
    return out;
}

inline int cmd_verify() {
    const auto results = run_all_checks();
    int failed = 0;
    for (const auto& r : results) {
        std::printf("%s  %-24s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
        failed += r.pass ? 0 : 1;
    }
    std::printf("%zu/%zu checks passed\n", results.size() - failed, results.size());
    return failed == 0 ? 0 : 1;
}

}  // namespace heterotune
