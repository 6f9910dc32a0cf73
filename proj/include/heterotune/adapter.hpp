#pragma once

#include <string>
#include <utility>
#include <vector>

#include "heterotune/matrix.hpp"
#include "heterotune/rng.hpp"

namespace heterotune {

/// Static description of one model type in the federation.
struct ModelConfig {
    int group_id = 0;
    int depth = 4;        // block count L
    int width = 0;        // hidden dimension m, no sensible default
    int bottleneck = 8;   // shared adapter dimension r, identical across groups
    int input_dim = 0;
    int num_classes = 0;
};

struct SharePair {
    Matrix w_s_d;  // r x r
    Matrix w_s_u;  // r x r
};

/// Per-block trainable state: local down/up projections plus M share branches
/// with one learnable scalar each. Branch i carries knowledge contributed by
/// model type i; only the own branch is trainable, all scalars are.
struct FedAdapter {
    Matrix w_loc_d;                   // m x r
    Matrix w_loc_u;                   // r x m
    std::vector<SharePair> branches;  // M square r x r pairs
    std::vector<double> alphas;       // M branch scalars

    int branch_count() const { return static_cast<int>(branches.size()); }
};

/// Scalar-weighted branch sums S_d and S_u used by both the training-form
/// transform and the fused inference form.
inline std::pair<Matrix, Matrix> branch_sums(const FedAdapter& a) {
    const int r = a.w_loc_d.cols;
    Matrix sd(r, r), su(r, r);
    for (int i = 0; i < a.branch_count(); ++i) {
        add_scaled(sd, a.branches[i].w_s_d, a.alphas[i]);
        add_scaled(su, a.branches[i].w_s_u, a.alphas[i]);
    }
    return {std::move(sd), std::move(su)};
}

/// Local down-projection is small random, up-projection zero, every branch
/// pair identity, own scalar 1 and foreign scalars 0: a fresh adapter is an
/// exact passthrough and round 0 matches single-model adapter tuning.
inline FedAdapter init_adapter(const ModelConfig& config, int num_branches, SeededRng& rng) {
    FedAdapter a;
    a.w_loc_d = Matrix(config.width, config.bottleneck);
    for (double& v : a.w_loc_d.data) v = rng.normal(0.0, 0.02);
    a.w_loc_u = Matrix(config.bottleneck, config.width);
    a.branches.reserve(num_branches);
    for (int i = 0; i < num_branches; ++i)
        a.branches.push_back({identity(config.bottleneck), identity(config.bottleneck)});
    a.alphas.assign(num_branches, 0.0);
    a.alphas[config.group_id] = 1.0;
    return a;
}

struct AdapterCache {
    Matrix x;    // n x m input
    Matrix xd;   // x * w_loc_d
    Matrix pre;  // xd * S_d, pre-activation
    Matrix act;  // gelu(pre)
    Matrix asu;  // act * S_u
};

/// Training-form transform: y = x + gelu(x*W_loc_d*S_d)*S_u*W_loc_u with
/// S_d = sum_i alpha_i*W_s_d^i and S_u = sum_i alpha_i*W_s_u^i.
inline Matrix adapter_forward(const Matrix& x, const FedAdapter& a, AdapterCache* cache = nullptr) {
    if (x.cols != a.w_loc_d.rows)
        throw std::invalid_argument("adapter_forward: input width " + x.shape_str() +
                                    " does not match adapter " + a.w_loc_d.shape_str());
    auto [sd, su] = branch_sums(a);
    Matrix xd = matmul(x, a.w_loc_d);
    Matrix pre = matmul(xd, sd);
    Matrix act = gelu(pre);
    Matrix asu = matmul(act, su);
    Matrix y = add(x, matmul(asu, a.w_loc_u));
    if (cache != nullptr) {
        cache->x = x;
        cache->xd = std::move(xd);
        cache->pre = std::move(pre);
        cache->act = std::move(act);
        cache->asu = std::move(asu);
    }
    return y;
}

/// Collapse the branch structure for inference: A' = W_loc_d*S_d,
/// B' = S_u*W_loc_u. Mathematically equivalent to adapter_forward.
inline std::pair<Matrix, Matrix> adapter_fuse(const FedAdapter& a) {
    auto [sd, su] = branch_sums(a);
    Matrix a_prime = matmul(a.w_loc_d, sd);
    Matrix b_prime = matmul(su, a.w_loc_u);
#ifdef HETEROTUNE_FAULT_FUSE_PERTURB
    // Build-time fault hook so the verification harness can prove it would
    // catch a broken fusion.
    if (!a_prime.data.empty()) a_prime.data[0] += 1e-6;
#endif
    return {std::move(a_prime), std::move(b_prime)};
}

/// Inference-form transform over fused matrices: y = x + gelu(x*A')*B'.
inline Matrix fused_forward(const Matrix& x, const Matrix& a_prime, const Matrix& b_prime) {
    return add(x, matmul(gelu(matmul(x, a_prime)), b_prime));
}

/// Gradients for the trainable set only. Foreign branch matrices are frozen
/// and get no entries; every branch scalar is trainable.
struct AdapterGrads {
    Matrix w_loc_d;
    Matrix w_loc_u;
    Matrix own_s_d;
    Matrix own_s_u;
    std::vector<double> alphas;
    Matrix x;  // gradient w.r.t. the input, for the preceding block
};

inline AdapterGrads adapter_backward(const AdapterCache& cache, const Matrix& dy,
                                     const FedAdapter& a, int own_group) {
    if (cache.x.rows != dy.rows || cache.x.cols != dy.cols)
        throw std::invalid_argument("adapter_backward: dy " + dy.shape_str() +
                                    " does not match cached input " + cache.x.shape_str());
    if (cache.xd.cols != a.w_loc_d.cols || cache.x.cols != a.w_loc_d.rows)
        throw std::invalid_argument("adapter_backward: cache does not match adapter shapes");
    if (own_group < 0 || own_group >= a.branch_count())
        throw std::invalid_argument("adapter_backward: own_group " + std::to_string(own_group) +
                                    " out of range for " + std::to_string(a.branch_count()) +
                                    " branches");
    auto [sd, su] = branch_sums(a);

    AdapterGrads g;
    g.w_loc_u = matmul(transpose(cache.asu), dy);
    Matrix d_asu = matmul(dy, transpose(a.w_loc_u));
    Matrix d_su = matmul(transpose(cache.act), d_asu);
    Matrix d_act = matmul(d_asu, transpose(su));
    Matrix d_pre = hadamard(d_act, gelu_grad(cache.pre));
    Matrix d_sd = matmul(transpose(cache.xd), d_pre);
    Matrix d_xd = matmul(d_pre, transpose(sd));
    g.w_loc_d = matmul(transpose(cache.x), d_xd);
    g.x = add(dy, matmul(d_xd, transpose(a.w_loc_d)));

    g.alphas.resize(a.branch_count());
    for (int i = 0; i < a.branch_count(); ++i)
        g.alphas[i] = dot(a.branches[i].w_s_d, d_sd) + dot(a.branches[i].w_s_u, d_su);
    g.own_s_d = scale(d_sd, a.alphas[own_group]);
    g.own_s_u = scale(d_su, a.alphas[own_group]);
    return g;
}

}  // namespace heterotune
