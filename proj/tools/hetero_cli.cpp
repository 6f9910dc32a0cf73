#include <cstdint>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "heterotune/runner.hpp"
#include "heterotune/verify.hpp"

int main(int argc, char** argv) {
    CLI::App app{"heterogeneous federated adapter-tuning simulator"};
    app.require_subcommand(1);
    app.footer(
        "Config file keys (key = value, # comments, one [group] section per model group):\n"
        "  mode            heterotune | homo | allsmall | alllarge   (default heterotune)\n"
        "  seed            master seed                               (default 42)\n"
        "  rounds          federation rounds R                       (default 10)\n"
        "  clients         client count K                            (default 100)\n"
        "  epochs          local epochs E per round                  (default 20)\n"
        "  lr              client SGD learning rate                  (default 0.01)\n"
        "  lambda          share-adapter L2 coefficient              (default 1e-4)\n"
        "  batch_size      client minibatch size                     (default 128)\n"
        "  participation   fraction of clients per round, (0,1]      (default 1.0)\n"
        "  share_agg       per_branch | flat                         (default per_branch)\n"
        "  uniform_weights true averages clients equally             (default false)\n"
        "  alpha           Dirichlet concentration                   (default 0.1)\n"
        "  val_fraction    stratified validation split, [0,1)        (default 0.2)\n"
        "  min_per_client  minimum samples per client                (default batch_size)\n"
        "  data            blobs | idx                               (default blobs)\n"
        "  blob_classes / blob_dims / blob_per_class / blob_spread   (10 / 32 / 200 / 0.25)\n"
        "  idx_images / idx_labels                                   (paths, required for idx)\n"
        "  out_dir         output directory                          (default .)\n"
        "  [group] keys: width (required), depth (default 4), bottleneck (default 8,\n"
        "  identical across groups), ratio (default 1).\n"
        "Environment: HETEROTUNE_LOG = error | info | debug (default error).");

    std::string config_path;
    int workers = 1;
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
    auto* run = app.add_subcommand("run", "run an experiment from a config file");
    run->add_option("config", config_path, "experiment config file")->required();
    run->add_option("--workers", workers, "worker threads for client updates")
        ->check(CLI::PositiveNumber);
    run->add_option("--seed", seed, "override the config's master seed");
    run->add_option("--out", out_dir, "override the config's output directory");

    auto* verify = app.add_subcommand("verify", "run the self-check suite");

    CLI11_PARSE(app, argc, argv);

    if (verify->parsed()) return heterotune::cmd_verify();
    return heterotune::cmd_run(config_path, workers, seed, out_dir);
}
