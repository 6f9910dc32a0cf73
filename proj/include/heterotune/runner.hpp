#pragma once

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "heterotune/checkpoint.hpp"
#include "heterotune/common.hpp"
#include "heterotune/config.hpp"
#include "heterotune/federation.hpp"
#include "heterotune/report.hpp"

namespace heterotune {

// exit codes per error category; anything else is 1
constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct RunOutputs {
    ExperimentResult result;
    std::string metrics;
    nlohmann::json summary;
};

/// The whole run as a pure function of the config, no disk I/O. The CLI and
/// the determinism tests both sit on top of this.
inline RunOutputs execute_run(const ExperimentConfig& cfg, int workers) {
    RunOutputs out;
    out.result = run_experiment(cfg, workers);
    out.metrics = metrics_csv(out.result.reports,
                              static_cast<int>(out.result.group_configs.size()));
    out.summary = summary_json(cfg, out.result);
    return out;
}

inline void write_run_outputs(const RunOutputs& out, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_text_file(dir + "/metrics.csv", out.metrics);
    write_text_file(dir + "/summary.json", out.summary.dump(2) + "\n");
    write_checkpoints(out.result.server, dir);
}

inline int cmd_run(const std::string& config_path, int workers,
                   std::optional<uint64_t> seed_override,
                   std::optional<std::string> out_override) {
    try {
        ExperimentConfig cfg = parse_config(config_path);
        if (seed_override) cfg.master_seed = *seed_override;
        if (out_override) cfg.out_dir = *out_override;
        log_info("running " + std::string(mode_name(cfg.mode)) + ", " +
                 std::to_string(cfg.clients) + " clients, " + std::to_string(cfg.rounds) +
                 " rounds, seed " + std::to_string(cfg.master_seed));
        const RunOutputs out = execute_run(cfg, workers);
        write_run_outputs(out, cfg.out_dir);
        std::cout << "final avg_acc " << format_g17(out.result.reports.back().avg_acc)
                  << ", outputs in " << cfg.out_dir << "\n";
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
}

}  // namespace heterotune
