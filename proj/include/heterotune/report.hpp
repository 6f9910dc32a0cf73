#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "heterotune/config.hpp"
#include "heterotune/federation.hpp"

namespace heterotune {

/// 17 significant digits round-trip any f64, so equal runs give equal bytes.
inline std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<RoundReport>& reports, int num_groups) {
    std::string out = "round";
    for (int g = 0; g < num_groups; ++g) out += ",loss_g" + std::to_string(g);
    for (int g = 0; g < num_groups; ++g) out += ",acc_g" + std::to_string(g);
    out += ",avg_acc";
    for (int g = 0; g < num_groups; ++g) out += ",bytes_g" + std::to_string(g);
    out += "\n";
    for (const auto& r : reports) {
        out += std::to_string(r.round);
        for (int g = 0; g < num_groups; ++g) out += "," + format_g17(r.group_train_loss[g]);
        for (int g = 0; g < num_groups; ++g) out += "," + format_g17(r.group_val_acc[g]);
        out += "," + format_g17(r.avg_acc);
        for (int g = 0; g < num_groups; ++g) out += "," + std::to_string(r.group_bytes[g]);
        out += "\n";
    }
    return out;
}

/// Final-round summary: accuracy of the smallest and largest model (by total
/// parameter count), the population-weighted average, and per-group counting.
inline nlohmann::json summary_json(const ExperimentConfig& cfg, const ExperimentResult& res) {
    const RoundReport& last = res.reports.back();
    size_t smallest = 0, largest = 0;
    for (size_t g = 1; g < res.params.size(); ++g) {
        if (res.params[g].total < res.params[smallest].total) smallest = g;
        if (res.params[g].total > res.params[largest].total) largest = g;
    }
    nlohmann::json j;
    j["mode"] = mode_name(cfg.mode);
    j["seed"] = cfg.master_seed;
    j["rounds"] = cfg.rounds;
    j["clients"] = cfg.clients;
    j["smallest_group_acc"] = last.group_val_acc[smallest];
    j["largest_group_acc"] = last.group_val_acc[largest];
    j["avg_acc"] = last.avg_acc;
    nlohmann::json groups = nlohmann::json::array();
    for (size_t g = 0; g < res.group_configs.size(); ++g) {
        const ModelConfig& c = res.group_configs[g];
        nlohmann::json gj;
        gj["group"] = c.group_id;
        gj["width"] = c.width;
        gj["depth"] = c.depth;
        gj["bottleneck"] = c.bottleneck;
        gj["clients"] = res.assignment.group_sizes[g];
        gj["trainable_params"] = res.params[g].trainable;
        gj["total_params"] = res.params[g].total;
        gj["reduction_ratio"] = res.params[g].reduction_ratio;
        gj["bytes_per_client"] = last.group_bytes[g];
        gj["final_acc"] = last.group_val_acc[g];
        gj["final_train_loss"] = last.group_train_loss[g];
        groups.push_back(gj);
    }
    j["groups"] = groups;
    return j;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << content;
    if (!out) throw DataError("short write to " + path);
}

}  // namespace heterotune
