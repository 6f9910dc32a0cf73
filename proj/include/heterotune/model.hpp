#pragma once

#include <cstring>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "heterotune/adapter.hpp"
#include "heterotune/common.hpp"
#include "heterotune/data.hpp"
#include "heterotune/matrix.hpp"
#include "heterotune/rng.hpp"

namespace heterotune {

inline void validate_model_config(const ModelConfig& c) {
    if (c.depth < 0) throw ConfigError("model config: negative depth");
    if (c.width < 1) throw ConfigError("model config: width must be at least 1");
    if (c.bottleneck < 1) throw ConfigError("model config: bottleneck must be at least 1");
    if (c.bottleneck > c.width)
        throw ConfigError("model config: bottleneck " + std::to_string(c.bottleneck) +
                          " exceeds width " + std::to_string(c.width));
    if (c.input_dim < 1) throw ConfigError("model config: input_dim must be at least 1");
    if (c.num_classes < 1) throw ConfigError("model config: num_classes must be at least 1");
}

struct BackboneBlock {
    Matrix w1;  // m x m
    Matrix w2;  // m x m
};

/// Frozen weights shared by every client of a group. Never mutated after
/// construction; the fingerprint pins that down byte-for-byte.
struct Backbone {
    Matrix input_proj;  // input_dim x m
    std::vector<BackboneBlock> blocks;
    uint64_t fingerprint = 0;
};

namespace detail {

inline void hash_matrix(Fnv1a64& h, const Matrix& m) {
    for (double v : m.data) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
        h.update(bytes, sizeof(bytes));
    }
}

}  // namespace detail

/// FNV-1a over the f64 little-endian byte stream of all frozen weights, in
/// declaration order.
inline uint64_t backbone_fingerprint(const Backbone& b) {
    Fnv1a64 h;
    detail::hash_matrix(h, b.input_proj);
    for (const auto& blk : b.blocks) {
        detail::hash_matrix(h, blk.w1);
        detail::hash_matrix(h, blk.w2);
    }
    return h.digest();
}

inline std::shared_ptr<const Backbone> init_backbone(const ModelConfig& c, SeededRng& rng) {
    validate_model_config(c);
    auto b = std::make_shared<Backbone>();
    b->input_proj = Matrix(c.input_dim, c.width);
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(c.input_dim));
    for (double& v : b->input_proj.data) v = rng.normal(0.0, in_scale);
    // block gain 1.5 keeps the frozen stream strongly nonlinear while staying
    // inside the SGD stability region at typical learning rates
    const double w1_scale = 1.5 / std::sqrt(static_cast<double>(c.width));
    const double w2_scale = 1.5 / std::sqrt(static_cast<double>(c.width));
    b->blocks.resize(c.depth);
    for (auto& blk : b->blocks) {
        blk.w1 = Matrix(c.width, c.width);
        for (double& v : blk.w1.data) v = rng.normal(0.0, w1_scale);
        blk.w2 = Matrix(c.width, c.width);
        for (double& v : blk.w2.data) v = rng.normal(0.0, w2_scale);
    }
    b->fingerprint = backbone_fingerprint(*b);
    return b;
}

/// One client-side model: frozen backbone, one adapter per block, trainable
/// zero-initialized head.
struct HeteroModel {
    ModelConfig config;
    std::shared_ptr<const Backbone> backbone;
    std::vector<FedAdapter> adapters;
    Matrix head;  // m x C
};

inline HeteroModel make_model(const ModelConfig& config, int num_branches,
                              std::shared_ptr<const Backbone> backbone, SeededRng& rng) {
    validate_model_config(config);
    if (static_cast<int>(backbone->blocks.size()) != config.depth)
        throw ConfigError("make_model: backbone has " + std::to_string(backbone->blocks.size()) +
                          " blocks, config wants " + std::to_string(config.depth));
    HeteroModel m;
    m.config = config;
    m.backbone = std::move(backbone);
    m.adapters.reserve(config.depth);
    for (int b = 0; b < config.depth; ++b) m.adapters.push_back(init_adapter(config, num_branches, rng));
    m.head = Matrix(config.width, config.num_classes);
    return m;
}

struct BlockCache {
    Matrix pre1;  // h_in * w1
    AdapterCache adapter;
};

struct ModelCache {
    Matrix h0_pre;  // x * input_proj
    std::vector<BlockCache> blocks;
    Matrix features;  // hidden state entering the head
};

inline Matrix model_forward(const HeteroModel& m, const Matrix& x, ModelCache* cache = nullptr) {
    if (x.cols != m.config.input_dim)
        throw std::invalid_argument("model_forward: input " + x.shape_str() + ", want cols " +
                                    std::to_string(m.config.input_dim));
    Matrix h0_pre = matmul(x, m.backbone->input_proj);
    Matrix h = gelu(h0_pre);
    if (cache != nullptr) {
        cache->h0_pre = std::move(h0_pre);
        cache->blocks.resize(m.config.depth);
    }
    for (int b = 0; b < m.config.depth; ++b) {
        const auto& blk = m.backbone->blocks[b];
        Matrix pre1 = matmul(h, blk.w1);
        h = add(h, matmul(gelu(pre1), blk.w2));
        h = adapter_forward(h, m.adapters[b], cache != nullptr ? &cache->blocks[b].adapter : nullptr);
        if (cache != nullptr) cache->blocks[b].pre1 = std::move(pre1);
    }
    Matrix logits = matmul(h, m.head);
    if (cache != nullptr) cache->features = std::move(h);
    return logits;
}

/// Inference path over fused adapters. Must agree with model_forward.
inline Matrix fused_model_forward(const HeteroModel& m, const Matrix& x) {
    if (x.cols != m.config.input_dim)
        throw std::invalid_argument("fused_model_forward: input " + x.shape_str() + ", want cols " +
                                    std::to_string(m.config.input_dim));
    Matrix h = gelu(matmul(x, m.backbone->input_proj));
    for (int b = 0; b < m.config.depth; ++b) {
        const auto& blk = m.backbone->blocks[b];
        h = add(h, matmul(gelu(matmul(h, blk.w1)), blk.w2));
        auto [a_prime, b_prime] = adapter_fuse(m.adapters[b]);
        h = fused_forward(h, a_prime, b_prime);
    }
    return matmul(h, m.head);
}

struct ModelGrads {
    Matrix head;
    std::vector<AdapterGrads> adapters;
};

/// Backward over the trainable mask only: head, each adapter's local pair and
/// own branch, all alphas. Backbone weights receive no gradients; backprop
/// stops after the first block.
inline ModelGrads model_backward(const HeteroModel& m, const ModelCache& cache,
                                 const Matrix& dlogits) {
    ModelGrads g;
    g.head = matmul(transpose(cache.features), dlogits);
    Matrix dh = matmul(dlogits, transpose(m.head));
    g.adapters.resize(m.config.depth);
    for (int b = m.config.depth - 1; b >= 0; --b) {
        g.adapters[b] = adapter_backward(cache.blocks[b].adapter, dh, m.adapters[b],
                                         m.config.group_id);
        dh = std::move(g.adapters[b].x);
        const auto& blk = m.backbone->blocks[b];
        Matrix d_act1 = matmul(dh, transpose(blk.w2));
        Matrix d_pre1 = hadamard(d_act1, gelu_grad(cache.blocks[b].pre1));
        dh = add(dh, matmul(d_pre1, transpose(blk.w1)));
    }
    return g;
}

/// Everything a client uploads: local pair, own share branch, alphas per
/// block, the head, and the shard size. No backbone weights, no foreign
/// branches; the own branch index equals group_id.
struct BlockUpdate {
    Matrix w_loc_d;
    Matrix w_loc_u;
    Matrix w_s_d;
    Matrix w_s_u;
    std::vector<double> alphas;
};

struct AdapterUpdate {
    int group_id = 0;
    std::vector<BlockUpdate> blocks;
    Matrix head;
    long long sample_count = 0;
};

inline AdapterUpdate make_update(const HeteroModel& m, long long sample_count) {
    AdapterUpdate u;
    u.group_id = m.config.group_id;
    u.blocks.reserve(m.adapters.size());
    for (const auto& a : m.adapters) {
        BlockUpdate b;
        b.w_loc_d = a.w_loc_d;
        b.w_loc_u = a.w_loc_u;
        b.w_s_d = a.branches[m.config.group_id].w_s_d;
        b.w_s_u = a.branches[m.config.group_id].w_s_u;
        b.alphas = a.alphas;
        u.blocks.push_back(std::move(b));
    }
    u.head = m.head;
    u.sample_count = sample_count;
    return u;
}

inline long long update_float_count(const AdapterUpdate& u) {
    long long n = static_cast<long long>(u.head.data.size());
    for (const auto& b : u.blocks)
        n += static_cast<long long>(b.w_loc_d.data.size()) +
             static_cast<long long>(b.w_loc_u.data.size()) +
             static_cast<long long>(b.w_s_d.data.size()) +
             static_cast<long long>(b.w_s_u.data.size()) +
             static_cast<long long>(b.alphas.size());
    return n;
}

/// E epochs of mini-batch SGD on cross-entropy plus
/// lambda * (|w_s_d^own|_F^2 + |w_s_u^own|_F^2) summed over blocks, touching
/// only the trainable mask. The epoch shuffle and batch order are driven by
/// `rng`, so the result is a pure function of (model, shard, rng stream).
inline AdapterUpdate local_train(HeteroModel& m, const Dataset& shard, int epochs, double lr,
                                 double lambda_reg, int batch_size, SeededRng& rng,
                                 double* mean_loss_out = nullptr) {
    if (shard.size() == 0) throw DataError("local_train: empty shard");
    if (epochs < 0) throw ConfigError("local_train: negative epochs");
    if (batch_size < 1) throw ConfigError("local_train: batch_size must be at least 1");
    const int own = m.config.group_id;

    std::vector<int> order(shard.size());
    std::iota(order.begin(), order.end(), 0);
    double loss_sum = 0.0;
    long long batch_count = 0;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (int start = 0; start < shard.size(); start += batch_size) {
            const int bsz = std::min(batch_size, shard.size() - start);
            std::vector<int> batch_idx(order.begin() + start, order.begin() + start + bsz);
            Dataset batch = subset(shard, batch_idx);

            ModelCache cache;
            Matrix logits = model_forward(m, batch.features, &cache);
            LossResult lr_res = softmax_cross_entropy(logits, batch.labels);
            double loss = lr_res.loss;
            for (const auto& a : m.adapters)
                loss += lambda_reg * (frobenius_sq(a.branches[own].w_s_d) +
                                      frobenius_sq(a.branches[own].w_s_u));
            if (!std::isfinite(loss))
                throw NumericError("local_train: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch " +
                                   std::to_string(start / batch_size));
            loss_sum += loss;
            ++batch_count;

            ModelGrads g = model_backward(m, cache, lr_res.dlogits);
            sgd_step(m.head, g.head, lr);
            for (int b = 0; b < m.config.depth; ++b) {
                auto& a = m.adapters[b];
                auto& ag = g.adapters[b];
                add_scaled(ag.own_s_d, a.branches[own].w_s_d, 2.0 * lambda_reg);
                add_scaled(ag.own_s_u, a.branches[own].w_s_u, 2.0 * lambda_reg);
                sgd_step(a.w_loc_d, ag.w_loc_d, lr);
                sgd_step(a.w_loc_u, ag.w_loc_u, lr);
                sgd_step(a.branches[own].w_s_d, ag.own_s_d, lr);
                sgd_step(a.branches[own].w_s_u, ag.own_s_u, lr);
                for (int i = 0; i < a.branch_count(); ++i)
                    a.alphas[i] -= lr * ag.alphas[i];
            }
        }
    }
    if (mean_loss_out != nullptr)
        *mean_loss_out = batch_count > 0 ? loss_sum / static_cast<double>(batch_count) : 0.0;
    return make_update(m, shard.size());
}

struct ParamCounts {
    long long trainable = 0;
    long long total = 0;
    double reduction_ratio = 0.0;
};

/// Trainable per model: L blocks of (local pair + own branch pair + M branch
/// scalars) plus the head. Total adds the frozen backbone and the foreign
/// branch copies the model carries. The upload payload per round equals the
/// trainable count.
inline std::vector<ParamCounts> param_counts(const std::vector<ModelConfig>& configs,
                                             int num_branches) {
    std::vector<ParamCounts> out;
    out.reserve(configs.size());
    for (const auto& c : configs) {
        const long long L = c.depth, m = c.width, r = c.bottleneck, M = num_branches;
        ParamCounts p;
        p.trainable = L * (2 * m * r + 2 * r * r + M) + m * c.num_classes;
        p.total = c.input_dim * m + 2 * L * m * m + L * (2 * m * r + 2 * M * r * r + M) +
                  m * c.num_classes;
        p.reduction_ratio = 1.0 - static_cast<double>(p.trainable) / static_cast<double>(p.total);
        out.push_back(p);
    }
    return out;
}

}  // namespace heterotune
