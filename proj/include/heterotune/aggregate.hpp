#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "heterotune/adapter.hpp"
#include "heterotune/common.hpp"
#include "heterotune/matrix.hpp"
#include "heterotune/model.hpp"

namespace heterotune {

namespace detail {

/// Anchored form of the weighted mean: anchor + sum_i (w_i/W)*(x_i - anchor).
/// Algebraically equal to sum(w*x)/W when W == sum(w), but exact when every
/// item equals the anchor, which the carry-over and no-op-round contracts
/// depend on. W may exceed sum(w); the shortfall counts as weight held at the
/// anchor value.
inline Matrix anchored_average(const Matrix& anchor, const std::vector<const Matrix*>& items,
                               const std::vector<double>& weights, double total_weight) {
    Matrix out = anchor;
    for (size_t i = 0; i < items.size(); ++i) {
        const Matrix& x = *items[i];
        if (x.rows != anchor.rows || x.cols != anchor.cols)
            throw std::invalid_argument("weighted_average: shape mismatch " + x.shape_str() +
                                        " vs " + anchor.shape_str());
        const double s = weights[i] / total_weight;
        for (size_t j = 0; j < out.data.size(); ++j) out.data[j] += s * (x.data[j] - anchor.data[j]);
    }
    return out;
}

inline std::vector<double> anchored_average_vec(const std::vector<double>& anchor,
                                                const std::vector<const std::vector<double>*>& items,
                                                const std::vector<double>& weights,
                                                double total_weight) {
    std::vector<double> out = anchor;
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& x = *items[i];
        if (x.size() != anchor.size())
            throw std::invalid_argument("weighted_average: vector length mismatch");
        const double s = weights[i] / total_weight;
        for (size_t j = 0; j < out.size(); ++j) out[j] += s * (x[j] - anchor[j]);
    }
    return out;
}

inline double checked_weight_sum(const std::vector<double>& weights) {
    double sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("weighted_average: negative weight");
        sum += w;
    }
    if (!(sum > 0.0)) throw std::invalid_argument("weighted_average: zero total weight");
    return sum;
}

}  // namespace detail

inline Matrix weighted_average(const std::vector<Matrix>& items,
                               const std::vector<double>& weights) {
    if (items.empty()) throw std::invalid_argument("weighted_average: empty list");
    if (items.size() != weights.size())
        throw std::invalid_argument("weighted_average: " + std::to_string(items.size()) +
                                    " items vs " + std::to_string(weights.size()) + " weights");
    const double sum = detail::checked_weight_sum(weights);
    std::vector<const Matrix*> ptrs;
    ptrs.reserve(items.size());
    for (const auto& m : items) ptrs.push_back(&m);
    return detail::anchored_average(items[0], ptrs, weights, sum);
}

/// Aggregated per-group state: everything a group's clients train except the
/// share branch, which lives in the global share set.
struct LocalBlockState {
    Matrix w_loc_d;
    Matrix w_loc_u;
    std::vector<double> alphas;
};

struct GroupLocalState {
    std::vector<LocalBlockState> blocks;
    Matrix head;
};

// share set layout: [global slot][branch]
using ShareSet = std::vector<std::vector<SharePair>>;

enum class ShareAgg { per_branch, flat };

inline double update_weight(const AdapterUpdate& u, bool uniform_weights) {
    return uniform_weights ? 1.0 : static_cast<double>(u.sample_count);
}

/// Weighted mean of every local-adapter matrix, alpha vector, and head across
/// one group's updates. Callers pass updates in canonical client-id order.
inline GroupLocalState aggregate_local(const std::vector<const AdapterUpdate*>& updates,
                                       bool uniform_weights) {
    if (updates.empty()) throw ProtocolError("aggregate_local: no updates");
    const int gid = updates[0]->group_id;
    const size_t depth = updates[0]->blocks.size();
    std::vector<double> weights;
    weights.reserve(updates.size());
    for (const auto* u : updates) {
        if (u->group_id != gid)
            throw ProtocolError("aggregate_local: mixed group ids " + std::to_string(gid) +
                                " and " + std::to_string(u->group_id));
        if (u->blocks.size() != depth)
            throw ProtocolError("aggregate_local: block count " + std::to_string(u->blocks.size()) +
                                " vs " + std::to_string(depth) + " in group " + std::to_string(gid));
        weights.push_back(update_weight(*u, uniform_weights));
    }
    const double wsum = detail::checked_weight_sum(weights);

    GroupLocalState out;
    out.blocks.resize(depth);
    std::vector<const Matrix*> ptrs(updates.size());
    std::vector<const std::vector<double>*> vptrs(updates.size());
    for (size_t b = 0; b < depth; ++b) {
        for (size_t i = 0; i < updates.size(); ++i) ptrs[i] = &updates[i]->blocks[b].w_loc_d;
        out.blocks[b].w_loc_d = detail::anchored_average(*ptrs[0], ptrs, weights, wsum);
        for (size_t i = 0; i < updates.size(); ++i) ptrs[i] = &updates[i]->blocks[b].w_loc_u;
        out.blocks[b].w_loc_u = detail::anchored_average(*ptrs[0], ptrs, weights, wsum);
        for (size_t i = 0; i < updates.size(); ++i) vptrs[i] = &updates[i]->blocks[b].alphas;
        out.blocks[b].alphas = detail::anchored_average_vec(*vptrs[0], vptrs, weights, wsum);
    }
    for (size_t i = 0; i < updates.size(); ++i) ptrs[i] = &updates[i]->head;
    out.head = detail::anchored_average(*ptrs[0], ptrs, weights, wsum);
    return out;
}

/// Block j of a depth-L model trains global share slot
/// round(j * (max_depth-1) / (L-1)); a one-block model trains slot 0.
inline int slot_for_block(int block, int depth, int max_depth) {
    if (block < 0 || block >= depth)
        throw std::invalid_argument("slot_for_block: block " + std::to_string(block) +
                                    " outside depth " + std::to_string(depth));
    if (depth <= 1) return 0;
    return static_cast<int>(std::llround(static_cast<double>(block) *
                                         static_cast<double>(max_depth - 1) /
                                         static_cast<double>(depth - 1)));
}

/// Share-adapter aggregation across the whole round. per_branch: slot s of
/// branch i is the weighted mean over group-i clients whose depth mapping
/// hits s. flat: every participating client mapped to slot s counts in the
/// denominator, foreign copies at their broadcast value, which pulls each
/// branch toward its previous state. Slots/branches with no mapped client
/// are carried over bit-identically.
inline ShareSet aggregate_share(const std::vector<const AdapterUpdate*>& updates,
                                const std::vector<int>& group_depths, const ShareSet& prev,
                                ShareAgg mode, bool uniform_weights) {
    const int max_depth = static_cast<int>(prev.size());
    const int num_branches = max_depth > 0 ? static_cast<int>(prev[0].size()) : 0;
    for (const auto* u : updates) {
        if (u->group_id < 0 || u->group_id >= num_branches)
            throw ProtocolError("aggregate_share: group id " + std::to_string(u->group_id) +
                                " outside " + std::to_string(num_branches) + " branches");
        if (static_cast<int>(u->blocks.size()) != group_depths[u->group_id])
            throw ProtocolError("aggregate_share: update has " + std::to_string(u->blocks.size()) +
                                " blocks, group " + std::to_string(u->group_id) + " is depth " +
                                std::to_string(group_depths[u->group_id]));
    }

    ShareSet out = prev;
    // contributions[s][i] = (matrices, weights) from group-i clients hitting slot s
    for (int s = 0; s < max_depth; ++s) {
        // flat mode denominator: total weight of every client mapped to slot s
        double slot_weight = 0.0;
        if (mode == ShareAgg::flat) {
            for (const auto* u : updates) {
                const int depth = group_depths[u->group_id];
                for (int b = 0; b < depth; ++b)
                    if (slot_for_block(b, depth, max_depth) == s) {
                        slot_weight += update_weight(*u, uniform_weights);
                        break;
                    }
            }
        }
        for (int i = 0; i < num_branches; ++i) {
            std::vector<const Matrix*> downs, ups;
            std::vector<double> weights;
            for (const auto* u : updates) {
                if (u->group_id != i) continue;
                const int depth = group_depths[i];
                for (int b = 0; b < depth; ++b) {
                    if (slot_for_block(b, depth, max_depth) != s) continue;
                    downs.push_back(&u->blocks[b].w_s_d);
                    ups.push_back(&u->blocks[b].w_s_u);
                    weights.push_back(update_weight(*u, uniform_weights));
                    break;
                }
            }
            if (downs.empty()) continue;  // carry-over
            if (mode == ShareAgg::per_branch) {
                const double wsum = detail::checked_weight_sum(weights);
                out[s][i].w_s_d = detail::anchored_average(*downs[0], downs, weights, wsum);
                out[s][i].w_s_u = detail::anchored_average(*ups[0], ups, weights, wsum);
            } else {
                detail::checked_weight_sum(weights);
                out[s][i].w_s_d = detail::anchored_average(prev[s][i].w_s_d, downs, weights, slot_weight);
                out[s][i].w_s_u = detail::anchored_average(prev[s][i].w_s_u, ups, weights, slot_weight);
            }
        }
    }
    return out;
}

}  // namespace heterotune
