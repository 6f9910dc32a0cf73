#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "heterotune/aggregate.hpp"
#include "heterotune/common.hpp"

namespace heterotune {

enum class RunMode { heterotune, homo, allsmall, alllarge };

inline const char* mode_name(RunMode m) {
    switch (m) {
        case RunMode::heterotune: return "heterotune";
        case RunMode::homo: return "homo";
        case RunMode::allsmall: return "allsmall";
        case RunMode::alllarge: return "alllarge";
    }
    return "?";
}

struct GroupSpec {
    ModelConfig config;  // input_dim and num_classes are filled from the data
    double ratio = 1.0;
};

struct BlobParams {
    int classes = 10;
    int dims = 32;
    int per_class = 200;
    double spread = 0.25;
};

struct ExperimentConfig {
    RunMode mode = RunMode::heterotune;
    uint64_t master_seed = 42;
    int rounds = 10;
    int clients = 100;
    int epochs = 20;
    double lr = 0.01;
    double lambda_reg = 1e-4;
    int batch_size = 128;
    double participation = 1.0;
    ShareAgg share_agg = ShareAgg::per_branch;
    bool uniform_weights = false;
    double dirichlet_alpha = 0.1;
    double val_fraction = 0.2;
    int min_per_client = -1;  // -1 resolves to batch_size
    std::string data_source = "blobs";
    BlobParams blobs;
    std::string idx_images;
    std::string idx_labels;
    std::string out_dir = ".";
    std::vector<GroupSpec> groups;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline ConfigError cfg_err(const std::string& name, int line, const std::string& what) {
    return ConfigError(name + ":" + std::to_string(line) + ": " + what);
}

inline long long parse_int(const std::string& v, const std::string& name, int line) {
    try {
        size_t pos = 0;
        long long out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw cfg_err(name, line, "expected an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& v, const std::string& name, int line) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw cfg_err(name, line, "expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& v, const std::string& name, int line) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw cfg_err(name, line, "expected true or false, got '" + v + "'");
}

}  // namespace detail

/// Fills derived defaults and enforces every cross-field constraint. Called
/// by parse_config; exposed so programmatically built configs get the same
/// checks.
inline void validate_config(ExperimentConfig& c) {
    if (c.rounds < 1) throw ConfigError("config: rounds must be at least 1");
    if (c.clients < 1) throw ConfigError("config: clients must be at least 1");
    if (c.epochs < 1) throw ConfigError("config: epochs must be at least 1");
    if (c.batch_size < 1) throw ConfigError("config: batch_size must be at least 1");
    if (!(c.lr >= 0.0)) throw ConfigError("config: lr must be nonnegative");
    if (!(c.lambda_reg >= 0.0)) throw ConfigError("config: lambda must be nonnegative");
    if (!(c.participation > 0.0 && c.participation <= 1.0))
        throw ConfigError("config: participation must be in (0, 1]");
    if (!(c.dirichlet_alpha > 0.0)) throw ConfigError("config: alpha must be positive");
    if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0))
        throw ConfigError("config: val_fraction must be in [0, 1)");
    if (c.min_per_client == -1) c.min_per_client = c.batch_size;
    if (c.min_per_client < 1) throw ConfigError("config: min_per_client must be at least 1");
    if (c.data_source != "blobs" && c.data_source != "idx")
        throw ConfigError("config: data must be blobs or idx, got '" + c.data_source + "'");
    if (c.data_source == "blobs") {
        if (c.blobs.classes < 2) throw ConfigError("config: blob_classes must be at least 2");
        if (c.blobs.dims < 2) throw ConfigError("config: blob_dims must be at least 2");
        if (c.blobs.per_class < 1) throw ConfigError("config: blob_per_class must be at least 1");
        if (!(c.blobs.spread >= 0.0)) throw ConfigError("config: blob_spread must be nonnegative");
    } else {
        if (c.idx_images.empty() || c.idx_labels.empty())
            throw ConfigError("config: data = idx needs idx_images and idx_labels");
    }
    if (c.groups.empty()) throw ConfigError("config: at least one [group] required");
    for (size_t g = 0; g < c.groups.size(); ++g) {
        auto& gs = c.groups[g];
        gs.config.group_id = static_cast<int>(g);
        if (gs.config.depth < 1)
            throw ConfigError("config: group " + std::to_string(g) + " depth must be at least 1");
        if (gs.config.width < 1)
            throw ConfigError("config: group " + std::to_string(g) + " width must be at least 1");
        if (gs.config.bottleneck < 1)
            throw ConfigError("config: group " + std::to_string(g) +
                              " bottleneck must be at least 1");
        if (gs.config.bottleneck > gs.config.width)
            throw ConfigError("config: group " + std::to_string(g) + " bottleneck " +
                              std::to_string(gs.config.bottleneck) + " exceeds width " +
                              std::to_string(gs.config.width));
        if (gs.config.bottleneck != c.groups[0].config.bottleneck)
            throw ConfigError("config: bottleneck differs across groups: group 0 has " +
                              std::to_string(c.groups[0].config.bottleneck) + ", group " +
                              std::to_string(g) + " has " +
                              std::to_string(gs.config.bottleneck));
        if (!(gs.ratio > 0.0))
            throw ConfigError("config: group " + std::to_string(g) + " ratio must be positive");
    }
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& name) {
    ExperimentConfig c;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    GroupSpec* group = nullptr;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = detail::trim(raw);
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = detail::trim(line.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line != "[group]")
                throw detail::cfg_err(name, line_no, "unknown section '" + line + "'");
            c.groups.emplace_back();
            group = &c.groups.back();
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw detail::cfg_err(name, line_no, "expected key = value, got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty() || val.empty())
            throw detail::cfg_err(name, line_no, "expected key = value, got '" + line + "'");

        if (group != nullptr) {
            if (key == "width")
                group->config.width = static_cast<int>(detail::parse_int(val, name, line_no));
            else if (key == "depth")
                group->config.depth = static_cast<int>(detail::parse_int(val, name, line_no));
            else if (key == "bottleneck")
                group->config.bottleneck = static_cast<int>(detail::parse_int(val, name, line_no));
            else if (key == "ratio")
                group->ratio = detail::parse_double(val, name, line_no);
            else
                throw detail::cfg_err(name, line_no, "unknown group key '" + key + "'");
            continue;
        }

        if (key == "mode") {
            if (val == "heterotune") c.mode = RunMode::heterotune;
            else if (val == "homo") c.mode = RunMode::homo;
            else if (val == "allsmall") c.mode = RunMode::allsmall;
            else if (val == "alllarge") c.mode = RunMode::alllarge;
            else throw detail::cfg_err(name, line_no, "unknown mode '" + val + "'");
        } else if (key == "seed") {
            c.master_seed = static_cast<uint64_t>(detail::parse_int(val, name, line_no));
        } else if (key == "rounds") {
            c.rounds = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "clients") {
            c.clients = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "epochs") {
            c.epochs = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "lr") {
            c.lr = detail::parse_double(val, name, line_no);
        } else if (key == "lambda") {
            c.lambda_reg = detail::parse_double(val, name, line_no);
        } else if (key == "batch_size") {
            c.batch_size = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "participation") {
            c.participation = detail::parse_double(val, name, line_no);
        } else if (key == "share_agg") {
            if (val == "per_branch") c.share_agg = ShareAgg::per_branch;
            else if (val == "flat") c.share_agg = ShareAgg::flat;
            else throw detail::cfg_err(name, line_no, "share_agg must be per_branch or flat");
        } else if (key == "uniform_weights") {
            c.uniform_weights = detail::parse_bool(val, name, line_no);
        } else if (key == "alpha") {
            c.dirichlet_alpha = detail::parse_double(val, name, line_no);
        } else if (key == "val_fraction") {
            c.val_fraction = detail::parse_double(val, name, line_no);
        } else if (key == "min_per_client") {
            c.min_per_client = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "data") {
            c.data_source = val;
        } else if (key == "blob_classes") {
            c.blobs.classes = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "blob_dims") {
            c.blobs.dims = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "blob_per_class") {
            c.blobs.per_class = static_cast<int>(detail::parse_int(val, name, line_no));
        } else if (key == "blob_spread") {
            c.blobs.spread = detail::parse_double(val, name, line_no);
        } else if (key == "idx_images") {
            c.idx_images = val;
        } else if (key == "idx_labels") {
            c.idx_labels = val;
        } else if (key == "out_dir") {
            c.out_dir = val;
        } else {
            throw detail::cfg_err(name, line_no, "unknown key '" + key + "'");
        }
    }
    validate_config(c);
    return c;
}

inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

}  // namespace heterotune
