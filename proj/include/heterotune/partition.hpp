#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "heterotune/common.hpp"
#include "heterotune/rng.hpp"

namespace heterotune {

/// Largest-remainder apportionment of `total` units over `weights`.
/// Ties in the remainder go to the lowest index.
inline std::vector<int> apportion(const std::vector<double>& weights, int total) {
    if (weights.empty()) throw ConfigError("apportion: no weights");
    if (total < 0) throw ConfigError("apportion: negative total");
    double sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ConfigError("apportion: negative or non-finite weight");
        sum += w;
    }
    if (sum <= 0.0) throw ConfigError("apportion: zero total weight");

    const int n = static_cast<int>(weights.size());
    std::vector<int> out(n, 0);
    std::vector<double> remainder(n, 0.0);
    int assigned = 0;
    for (int i = 0; i < n; ++i) {
        const double quota = static_cast<double>(total) * weights[i] / sum;
        out[i] = static_cast<int>(std::floor(quota));
        remainder[i] = quota - std::floor(quota);
        assigned += out[i];
    }
    // floor can only undershoot; hand the leftovers to the largest remainders
    for (int left = total - assigned; left > 0; --left) {
        int best = 0;
        for (int i = 1; i < n; ++i)
            if (remainder[i] > remainder[best]) best = i;
        out[best] += 1;
        remainder[best] = -1.0;
    }
    return out;
}

struct PartitionPlan {
    std::vector<std::vector<int>> client_indices;
    double alpha = 0.0;
    uint64_t seed = 0;
};

/// Dirichlet non-IID split: per class, proportions over the K clients are
/// drawn as normalized Gamma(alpha, 1) variates and turned into counts by
/// largest-remainder apportionment. Draws whose result leaves any client
/// below min_per_client are rejected and redrawn, up to a bounded number of
/// attempts.
inline PartitionPlan dirichlet_partition(const std::vector<int>& labels, int num_clients,
                                         double alpha, int min_per_client, SeededRng& rng) {
    if (num_clients < 1) throw ConfigError("dirichlet_partition: need at least 1 client");
    if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be positive");
    if (labels.empty()) throw DataError("dirichlet_partition: no labels");
    const int n = static_cast<int>(labels.size());
    const int effective_min = std::max(1, min_per_client);
    if (static_cast<long long>(num_clients) * effective_min > n)
        throw DataError("dirichlet_partition: min_per_client " + std::to_string(effective_min) +
                        " infeasible for " + std::to_string(num_clients) + " clients and " +
                        std::to_string(n) + " samples");

    int num_classes = 0;
    for (int y : labels) {
        if (y < 0) throw DataError("dirichlet_partition: negative label");
        num_classes = std::max(num_classes, y + 1);
    }
    std::vector<std::vector<int>> by_class(num_classes);
    for (int i = 0; i < n; ++i) by_class[labels[i]].push_back(i);

    constexpr int kMaxAttempts = 1000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        PartitionPlan plan;
        plan.alpha = alpha;
        plan.client_indices.assign(num_clients, {});
        for (int c = 0; c < num_classes; ++c) {
            const auto& idx = by_class[c];
            if (idx.empty()) continue;
            std::vector<double> p(num_clients);
            double sum = 0.0;
            for (int k = 0; k < num_clients; ++k) {
                p[k] = rng.gamma(alpha);
                sum += p[k];
            }
            if (sum > 0.0) {
                for (double& v : p) v /= sum;
            } else {
                // all draws underflowed to zero; fall back to a uniform split
                for (double& v : p) v = 1.0 / num_clients;
            }
            const auto counts = apportion(p, static_cast<int>(idx.size()));
            int pos = 0;
            for (int k = 0; k < num_clients; ++k)
                for (int t = 0; t < counts[k]; ++t) plan.client_indices[k].push_back(idx[pos++]);
        }
        bool ok = true;
        for (const auto& ci : plan.client_indices)
            if (static_cast<int>(ci.size()) < effective_min) {
                ok = false;
                break;
            }
        if (ok) return plan;
    }
    throw DataError("dirichlet_partition: no draw satisfied min_per_client " +
                    std::to_string(effective_min) + " after " + std::to_string(kMaxAttempts) +
                    " attempts (alpha " + std::to_string(alpha) + ", " +
                    std::to_string(num_clients) + " clients)");
}

}  // namespace heterotune
