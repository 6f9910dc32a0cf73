#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "heterotune/config.hpp"
#include "heterotune/federation.hpp"

using namespace heterotune;
namespace fs = std::filesystem;

TEST(ParseConfig, MinimalTextGetsDefaults) {
    const ExperimentConfig c = parse_config_text("[group]\nwidth = 8\ndepth = 2\n", "cfg");
    EXPECT_EQ(c.mode, RunMode::heterotune);
    EXPECT_EQ(c.master_seed, 42u);
    EXPECT_EQ(c.rounds, 10);
    EXPECT_EQ(c.clients, 100);
    EXPECT_EQ(c.batch_size, 128);
    EXPECT_EQ(c.min_per_client, 128);  // unset resolves to batch_size
    EXPECT_EQ(c.data_source, "blobs");
    ASSERT_EQ(c.groups.size(), 1u);
    EXPECT_EQ(c.groups[0].config.group_id, 0);
    EXPECT_EQ(c.groups[0].config.width, 8);
    EXPECT_EQ(c.groups[0].config.bottleneck, 8);  // group default
    EXPECT_DOUBLE_EQ(c.groups[0].ratio, 1.0);
    EXPECT_EQ(parse_config_text("[group]\nwidth = 8\n", "cfg").groups[0].config.depth, 4);
}

TEST(ParseConfig, CommentsAndBlankLinesAreIgnored) {
    const std::string text =
        "# experiment\n"
        "seed = 7   # inline comment\n"
        "\n"
        "[group]\n"
        "width = 8\n";
    EXPECT_EQ(parse_config_text(text, "cfg").master_seed, 7u);
}

TEST(ParseConfig, ErrorsNameFileAndLine) {
    auto message_of = [](const std::string& text) {
        try {
            parse_config_text(text, "cfg");
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message_of("seed = 1\nbogus = 2\n").find("cfg:2: unknown key 'bogus'"),
              std::string::npos);
    EXPECT_NE(message_of("rounds = soon\n").find("cfg:1: expected an integer, got 'soon'"),
              std::string::npos);
    EXPECT_NE(message_of("mode = banana\n").find("unknown mode 'banana'"), std::string::npos);
    EXPECT_NE(message_of("[groups]\n").find("cfg:1: unknown section"), std::string::npos);
    EXPECT_NE(message_of("just words\n").find("expected key = value"), std::string::npos);
    EXPECT_NE(message_of("[group]\nlr = 0.1\n").find("cfg:2: unknown group key 'lr'"),
              std::string::npos);
}

TEST(ParseConfig, BottleneckMismatchNamesBothGroups) {
    const std::string text =
        "[group]\nwidth = 8\nbottleneck = 4\n"
        "[group]\nwidth = 16\nbottleneck = 8\n";
    try {
        parse_config_text(text, "cfg");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("group 0 has 4"), std::string::npos) << msg;
        EXPECT_NE(msg.find("group 1 has 8"), std::string::npos) << msg;
    }
}

TEST(ParseConfig, RejectsEmptyAndInvalidConfigs) {
    EXPECT_THROW(parse_config_text("", "cfg"), ConfigError);
    EXPECT_THROW(parse_config_text("rounds = 0\n[group]\nwidth = 4\n", "cfg"), ConfigError);
    EXPECT_THROW(parse_config_text("participation = 1.5\n[group]\nwidth = 4\n", "cfg"),
                 ConfigError);
    EXPECT_THROW(parse_config_text("[group]\nwidth = 4\nbottleneck = 9\n", "cfg"), ConfigError);
    EXPECT_THROW(parse_config("/nonexistent/path.cfg"), ConfigError);
}

TEST(ParseConfig, RatiosApportionByLargestRemainder) {
    const std::string text =
        "clients = 100\n"
        "[group]\nwidth = 4\nbottleneck = 2\nratio = 3\n"
        "[group]\nwidth = 6\nbottleneck = 2\nratio = 3\n"
        "[group]\nwidth = 8\nbottleneck = 2\nratio = 2\n"
        "[group]\nwidth = 10\nbottleneck = 2\nratio = 2\n";
    const ExperimentConfig c = parse_config_text(text, "cfg");
    std::vector<double> ratios;
    for (const auto& g : c.groups) ratios.push_back(g.ratio);
    const GroupAssignment a = assign_groups(ratios, c.clients);
    EXPECT_EQ(a.group_sizes, (std::vector<int>{30, 30, 20, 20}));
    EXPECT_EQ(a.client_group[0], 0);
    EXPECT_EQ(a.client_group[30], 1);
    EXPECT_EQ(a.client_group[99], 3);
}

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr merged
};

CliResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const std::string cmd = env_prefix + HETERO_CLI_PATH + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) throw std::runtime_error("popen failed for: " + cmd);
    CliResult r;
    char buf[4096];
    while (size_t n = fread(buf, 1, sizeof(buf), pipe)) r.output.append(buf, n);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path fresh_dir(const std::string& tag) {
    const fs::path dir =
        fs::temp_directory_path() / ("hetero_cli_" + std::to_string(::getpid()) + "_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const char* kRunConfig =
    "mode = heterotune\n"
    "seed = 42\n"
    "rounds = 2\n"
    "clients = 6\n"
    "epochs = 1\n"
    "lr = 0.05\n"
    "lambda = 1e-4\n"
    "batch_size = 8\n"
    "alpha = 0.5\n"
    "min_per_client = 2\n"
    "blob_classes = 3\n"
    "blob_dims = 4\n"
    "blob_per_class = 30\n"
    "blob_spread = 0.3\n"
    "[group]\nwidth = 6\ndepth = 2\nbottleneck = 2\nratio = 1\n"
    "[group]\nwidth = 10\ndepth = 3\nbottleneck = 2\nratio = 1\n";

std::string write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "run.cfg";
    std::ofstream(p) << text;
    return p.string();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

TEST(Cli, RunWritesAllOutputs) {
    const fs::path dir = fresh_dir("run");
    const std::string cfg = write_config(dir, kRunConfig);
    const CliResult r = run_cli("run " + cfg + " --out " + (dir / "out").string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("final avg_acc"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "out/metrics.csv"));
    EXPECT_TRUE(fs::exists(dir / "out/summary.json"));
    EXPECT_TRUE(fs::exists(dir / "out/group0.htad"));
    EXPECT_TRUE(fs::exists(dir / "out/group1.htad"));
    EXPECT_TRUE(fs::exists(dir / "out/share.htad"));

    const std::string metrics = slurp(dir / "out/metrics.csv");
    EXPECT_NE(metrics.find("round,loss_g0,loss_g1,acc_g0,acc_g1,avg_acc,bytes_g0,bytes_g1"),
              std::string::npos);
    // header plus one row per round
    EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 3);
}

TEST(Cli, RerunsAndWorkerCountsAreByteIdentical) {
    const fs::path dir = fresh_dir("repeat");
    const std::string cfg = write_config(dir, kRunConfig);
    ASSERT_EQ(run_cli("run " + cfg + " --out " + (dir / "a").string()).exit_code, 0);
    ASSERT_EQ(run_cli("run " + cfg + " --out " + (dir / "b").string()).exit_code, 0);
    ASSERT_EQ(run_cli("run " + cfg + " --workers 3 --out " + (dir / "c").string()).exit_code, 0);
    for (const char* f : {"metrics.csv", "summary.json", "group0.htad", "share.htad"}) {
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "c" / f)) << f;
    }
}

TEST(Cli, SeedOverrideChangesTheRun) {
    const fs::path dir = fresh_dir("seed");
    const std::string cfg = write_config(dir, kRunConfig);
    ASSERT_EQ(run_cli("run " + cfg + " --out " + (dir / "a").string()).exit_code, 0);
    ASSERT_EQ(run_cli("run " + cfg + " --seed 99 --out " + (dir / "b").string()).exit_code, 0);
    EXPECT_NE(slurp(dir / "a/metrics.csv"), slurp(dir / "b/metrics.csv"));
}

TEST(Cli, SummaryAverageMatchesMetricsRecompute) {
    const fs::path dir = fresh_dir("summary");
    const std::string cfg = write_config(dir, kRunConfig);
    ASSERT_EQ(run_cli("run " + cfg + " --out " + (dir / "out").string()).exit_code, 0);
    const nlohmann::json summary = nlohmann::json::parse(slurp(dir / "out/summary.json"));

    // last metrics row: round,loss_g0,loss_g1,acc_g0,acc_g1,avg_acc,bytes...
    const std::string metrics = slurp(dir / "out/metrics.csv");
    const size_t tail = metrics.rfind('\n', metrics.size() - 2);
    std::istringstream row(metrics.substr(tail + 1));
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 8u);

    double weighted = 0.0, population = 0.0;
    for (int g = 0; g < 2; ++g) {
        const double acc = std::strtod(cells[3 + g].c_str(), nullptr);
        const double pop = summary["groups"][g]["clients"].get<double>();
        weighted += acc * pop;
        population += pop;
    }
    EXPECT_DOUBLE_EQ(summary["avg_acc"].get<double>(), weighted / population);
    EXPECT_DOUBLE_EQ(std::strtod(cells[5].c_str(), nullptr),
                     summary["avg_acc"].get<double>());
    EXPECT_EQ(summary["groups"][0]["bytes_per_client"].get<long long>(),
              std::strtoll(cells[6].c_str(), nullptr, 10));
}

TEST(Cli, ExitCodesFollowErrorCategories) {
    const fs::path dir = fresh_dir("errors");
    const std::string bad = write_config(dir, "rounds = never\n[group]\nwidth = 4\n");
    const CliResult r2 = run_cli("run " + bad);
    EXPECT_EQ(r2.exit_code, 2);
    EXPECT_NE(r2.output.find("config error:"), std::string::npos);

    const fs::path missing_cfg = dir / "missing_data.cfg";
    std::ofstream(missing_cfg) << "data = idx\nidx_images = /nonexistent/img\n"
                                  "idx_labels = /nonexistent/lab\n[group]\nwidth = 16\n";
    const CliResult r3 = run_cli("run " + missing_cfg.string());
    EXPECT_EQ(r3.exit_code, 3);
    EXPECT_NE(r3.output.find("data error:"), std::string::npos);

    EXPECT_EQ(run_cli("run /nonexistent/path.cfg").exit_code, 2);
    EXPECT_NE(run_cli("").exit_code, 0);  // a subcommand is required
}

TEST(Cli, LogLevelComesFromTheEnvironment) {
    const fs::path dir = fresh_dir("logging");
    const std::string cfg = write_config(dir, kRunConfig);
    const std::string out = " --out " + (dir / "out").string();
    const CliResult quiet = run_cli("run " + cfg + out);
    EXPECT_EQ(quiet.output.find("[info]"), std::string::npos);
    EXPECT_EQ(quiet.output.find("[debug]"), std::string::npos);

    const CliResult info = run_cli("run " + cfg + out, "HETEROTUNE_LOG=info ");
    EXPECT_NE(info.output.find("[info] running heterotune"), std::string::npos);
    EXPECT_EQ(info.output.find("[debug]"), std::string::npos);

    const CliResult debug = run_cli("run " + cfg + out, "HETEROTUNE_LOG=debug ");
    EXPECT_NE(debug.output.find("[debug]"), std::string::npos);
    EXPECT_NE(debug.output.find("clients participate"), std::string::npos);
}

TEST(Cli, VerifySubcommandPasses) {
    const CliResult r = run_cli("verify");
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("checks passed"), std::string::npos);
    EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
}
