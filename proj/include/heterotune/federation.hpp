#pragma once

#include <algorithm>
#include <atomic>
#include <limits>
#include <memory>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "heterotune/aggregate.hpp"
#include "heterotune/common.hpp"
#include "heterotune/config.hpp"
#include "heterotune/data.hpp"
#include "heterotune/model.hpp"
#include "heterotune/partition.hpp"
#include "heterotune/rng.hpp"

namespace heterotune {

struct GroupAssignment {
    std::vector<int> client_group;  // client id -> group id
    std::vector<int> group_sizes;
};

/// Clients in id order are assigned to groups in contiguous blocks sized by
/// largest-remainder apportionment of the ratio weights.
inline GroupAssignment assign_groups(const std::vector<double>& ratios, int num_clients) {
    GroupAssignment a;
    a.group_sizes = apportion(ratios, num_clients);
    a.client_group.reserve(num_clients);
    for (size_t g = 0; g < a.group_sizes.size(); ++g)
        for (int i = 0; i < a.group_sizes[g]; ++i) a.client_group.push_back(static_cast<int>(g));
    return a;
}

struct GroupServerState {
    ModelConfig config;
    std::shared_ptr<const Backbone> backbone;
    GroupLocalState local;
};

/// The server's full picture: per-group local-adapter stacks and heads, plus
/// the share set(s). All modes except homo keep one share set; homo gives
/// each group a private one so nothing crosses group lines.
struct ServerState {
    std::vector<GroupServerState> groups;
    std::vector<ShareSet> share_sets;
    int max_depth = 0;
    int round = 0;
};

inline const ShareSet& share_set_for_group(const ServerState& s, int group) {
    return s.share_sets[s.share_sets.size() == 1 ? 0 : static_cast<size_t>(group)];
}

inline ServerState init_server(const std::vector<ModelConfig>& configs, int num_branches,
                               RunMode mode, uint64_t master_seed) {
    ServerState s;
    s.max_depth = 0;
    for (const auto& c : configs) s.max_depth = std::max(s.max_depth, c.depth);
    s.groups.reserve(configs.size());
    for (size_t g = 0; g < configs.size(); ++g) {
        const ModelConfig& c = configs[g];
        GroupServerState gs;
        gs.config = c;
        SeededRng backbone_rng(master_seed, "backbone:" + std::to_string(g));
        gs.backbone = init_backbone(c, backbone_rng);
        gs.local.blocks.resize(c.depth);
        for (int b = 0; b < c.depth; ++b) {
            SeededRng adapter_rng(master_seed,
                                  "adapter:" + std::to_string(g) + ":" + std::to_string(b));
            FedAdapter a = init_adapter(c, num_branches, adapter_rng);
            gs.local.blocks[b].w_loc_d = std::move(a.w_loc_d);
            gs.local.blocks[b].w_loc_u = std::move(a.w_loc_u);
            gs.local.blocks[b].alphas = std::move(a.alphas);
        }
        gs.local.head = Matrix(c.width, c.num_classes);
        s.groups.push_back(std::move(gs));
    }
    ShareSet identity_set(s.max_depth, std::vector<SharePair>(num_branches));
    const int r = configs.empty() ? 0 : configs[0].bottleneck;
    for (auto& slot : identity_set)
        for (auto& pair : slot) pair = {identity(r), identity(r)};
    const size_t set_count = mode == RunMode::homo ? configs.size() : 1;
    s.share_sets.assign(set_count, identity_set);
    return s;
}

/// Broadcast step: build a client model of group g from the server state.
/// Foreign branches are installed verbatim; the trainability mask in
/// local_train keeps them frozen.
inline HeteroModel materialize(const ServerState& s, int group) {
    const auto& gs = s.groups.at(group);
    const ShareSet& ss = share_set_for_group(s, group);
    HeteroModel m;
    m.config = gs.config;
    m.backbone = gs.backbone;
    m.adapters.reserve(gs.config.depth);
    for (int b = 0; b < gs.config.depth; ++b) {
        FedAdapter a;
        a.w_loc_d = gs.local.blocks[b].w_loc_d;
        a.w_loc_u = gs.local.blocks[b].w_loc_u;
        a.alphas = gs.local.blocks[b].alphas;
        a.branches = ss[slot_for_block(b, gs.config.depth, s.max_depth)];
        m.adapters.push_back(std::move(a));
    }
    m.head = gs.local.head;
    return m;
}

/// Wire-level sanity assert, applied to every received update.
inline void validate_update(const AdapterUpdate& u, const ServerState& s) {
    if (u.group_id < 0 || u.group_id >= static_cast<int>(s.groups.size()))
        throw ProtocolError("update: group id " + std::to_string(u.group_id) + " outside " +
                            std::to_string(s.groups.size()) + " groups");
    const ModelConfig& c = s.groups[u.group_id].config;
    const int num_branches = static_cast<int>(share_set_for_group(s, u.group_id)[0].size());
    if (static_cast<int>(u.blocks.size()) != c.depth)
        throw ProtocolError("update: " + std::to_string(u.blocks.size()) + " blocks, group " +
                            std::to_string(u.group_id) + " is depth " + std::to_string(c.depth));
    if (u.sample_count < 1) throw ProtocolError("update: sample_count must be positive");
    for (size_t b = 0; b < u.blocks.size(); ++b) {
        const auto& blk = u.blocks[b];
        const bool shapes_ok = blk.w_loc_d.rows == c.width && blk.w_loc_d.cols == c.bottleneck &&
                               blk.w_loc_u.rows == c.bottleneck && blk.w_loc_u.cols == c.width;
        if (!shapes_ok)
            throw ProtocolError("update: block " + std::to_string(b) +
                                " local matrices have wrong shape for group " +
                                std::to_string(u.group_id));
        if (blk.w_s_d.rows != c.bottleneck || blk.w_s_d.cols != c.bottleneck ||
            blk.w_s_u.rows != c.bottleneck || blk.w_s_u.cols != c.bottleneck)
            throw ProtocolError("update: block " + std::to_string(b) +
                                " share matrices are not " + std::to_string(c.bottleneck) + "x" +
                                std::to_string(c.bottleneck) +
                                "; only the own branch may be uploaded");
        if (static_cast<int>(blk.alphas.size()) != num_branches)
            throw ProtocolError("update: block " + std::to_string(b) + " carries " +
                                std::to_string(blk.alphas.size()) + " alphas, want " +
                                std::to_string(num_branches));
    }
    if (u.head.rows != c.width || u.head.cols != c.num_classes)
        throw ProtocolError("update: head shape " + u.head.shape_str() + " for group " +
                            std::to_string(u.group_id));
}

struct ClientState {
    int id = 0;
    int group = 0;
    Dataset shard;
};

struct RoundReport {
    int round = 0;
    std::vector<double> group_train_loss;  // mean over participating clients
    std::vector<double> group_val_acc;
    double avg_acc = 0.0;  // weighted by group population
    std::vector<long long> group_bytes;  // upload bytes per client of that group
};

struct RoundOptions {
    int epochs = 1;
    double lr = 0.01;
    double lambda_reg = 0.0;
    int batch_size = 32;
    double participation = 1.0;
    ShareAgg share_agg = ShareAgg::per_branch;
    bool uniform_weights = false;
    uint64_t master_seed = 0;
    int workers = 1;
    const Dataset* val = nullptr;
    const GroupAssignment* assignment = nullptr;
};

/// Fused-path validation accuracy: fraction of argmax-correct rows.
inline double evaluate(const HeteroModel& m, const Dataset& d) {
    if (d.size() == 0) throw DataError("evaluate: empty dataset");
    const Matrix logits = fused_model_forward(m, d.features);
    const std::vector<int> pred = argmax_rows(logits);
    int correct = 0;
    for (int i = 0; i < d.size(); ++i) correct += pred[i] == d.labels[i];
    return static_cast<double>(correct) / static_cast<double>(d.size());
}

/// Upload payload in floats for one client of this group; equal to
/// update_float_count of any well-formed update, and to the trainable count.
inline long long group_float_count(const ModelConfig& c, int num_branches) {
    return static_cast<long long>(c.depth) *
               (2LL * c.width * c.bottleneck + 2LL * c.bottleneck * c.bottleneck + num_branches) +
           static_cast<long long>(c.width) * c.num_classes;
}

namespace detail {

struct ClientResult {
    AdapterUpdate update;
    double mean_loss = 0.0;
    std::exception_ptr error;
};

template <typename E>
inline std::exception_ptr wrap_client_error(int client_id, const E& e) {
    return std::make_exception_ptr(E("client " + std::to_string(client_id) + ": " + e.what()));
}

}  // namespace detail

/// One protocol round: sample participants, train them (worker pool), then
/// grouped local aggregation and share aggregation in canonical client-id
/// order. Per-client rng streams are keyed by (client id, round), so the
/// result is independent of worker count and execution order.
inline RoundReport run_round(ServerState& server, const std::vector<ClientState>& clients,
                             const RoundOptions& opt, SeededRng& round_rng) {
    if (clients.empty()) throw ProtocolError("run_round: no clients");
    const int num_groups = static_cast<int>(server.groups.size());

    std::vector<int> ids(clients.size());
    for (size_t i = 0; i < clients.size(); ++i) ids[i] = static_cast<int>(i);
    const int take = std::max(
        1, static_cast<int>(std::llround(opt.participation * static_cast<double>(clients.size()))));
    if (take < static_cast<int>(clients.size())) round_rng.shuffle(ids);
    ids.resize(std::min<size_t>(take, ids.size()));
    std::sort(ids.begin(), ids.end());
    log_debug("round " + std::to_string(server.round + 1) + ": " + std::to_string(ids.size()) +
              " of " + std::to_string(clients.size()) + " clients participate");

    std::vector<detail::ClientResult> results(ids.size());
    std::atomic<size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= ids.size()) return;
            const ClientState& cl = clients[ids[i]];
            try {
                HeteroModel model = materialize(server, cl.group);
                SeededRng rng(opt.master_seed, "client:" + std::to_string(cl.id) +
                                                   ":round:" + std::to_string(server.round));
                results[i].update = local_train(model, cl.shard, opt.epochs, opt.lr,
                                                opt.lambda_reg, opt.batch_size, rng,
                                                &results[i].mean_loss);
            } catch (const ConfigError& e) {
                results[i].error = detail::wrap_client_error(cl.id, e);
            } catch (const DataError& e) {
                results[i].error = detail::wrap_client_error(cl.id, e);
            } catch (const NumericError& e) {
                results[i].error = detail::wrap_client_error(cl.id, e);
            } catch (const ProtocolError& e) {
                results[i].error = detail::wrap_client_error(cl.id, e);
            } catch (const std::exception& e) {
                results[i].error = std::make_exception_ptr(std::runtime_error(
                    "client " + std::to_string(cl.id) + ": " + e.what()));
            }
        }
    };
    const int thread_count =
        std::max(1, std::min<int>(opt.workers, static_cast<int>(ids.size())));
    if (thread_count == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(thread_count);
        for (int t = 0; t < thread_count; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    for (const auto& r : results)
        if (r.error) std::rethrow_exception(r.error);

    std::vector<const AdapterUpdate*> all_updates;
    all_updates.reserve(results.size());
    for (const auto& r : results) {
        validate_update(r.update, server);
        all_updates.push_back(&r.update);
    }

    std::vector<std::vector<const AdapterUpdate*>> by_group(num_groups);
    for (const auto* u : all_updates) by_group[u->group_id].push_back(u);
    for (int g = 0; g < num_groups; ++g)
        if (!by_group[g].empty())
            server.groups[g].local = aggregate_local(by_group[g], opt.uniform_weights);

    std::vector<int> depths(num_groups);
    for (int g = 0; g < num_groups; ++g) depths[g] = server.groups[g].config.depth;
    if (server.share_sets.size() == 1) {
        server.share_sets[0] = aggregate_share(all_updates, depths, server.share_sets[0],
                                               opt.share_agg, opt.uniform_weights);
    } else {
        for (int g = 0; g < num_groups; ++g)
            server.share_sets[g] = aggregate_share(by_group[g], depths, server.share_sets[g],
                                                   opt.share_agg, opt.uniform_weights);
    }
    server.round += 1;

    RoundReport report;
    report.round = server.round;
    report.group_train_loss.assign(num_groups, std::numeric_limits<double>::quiet_NaN());
    report.group_val_acc.resize(num_groups);
    report.group_bytes.resize(num_groups);
    std::vector<int> loss_counts(num_groups, 0);
    std::vector<double> loss_sums(num_groups, 0.0);
    for (size_t i = 0; i < results.size(); ++i) {
        const int g = results[i].update.group_id;
        loss_sums[g] += results[i].mean_loss;
        loss_counts[g] += 1;
    }
    const int num_branches = static_cast<int>(share_set_for_group(server, 0)[0].size());
    for (int g = 0; g < num_groups; ++g) {
        if (loss_counts[g] > 0) report.group_train_loss[g] = loss_sums[g] / loss_counts[g];
        report.group_val_acc[g] = opt.val != nullptr ? evaluate(materialize(server, g), *opt.val)
                                                     : 0.0;
        report.group_bytes[g] = 8 * group_float_count(server.groups[g].config, num_branches);
    }
    double acc_weighted = 0.0;
    double population = 0.0;
    for (int g = 0; g < num_groups; ++g) {
        const double pop = opt.assignment != nullptr
                               ? static_cast<double>(opt.assignment->group_sizes[g])
                               : 1.0;
        acc_weighted += pop * report.group_val_acc[g];
        population += pop;
    }
    report.avg_acc = population > 0.0 ? acc_weighted / population : 0.0;
    return report;
}

struct ExperimentResult {
    std::vector<RoundReport> reports;
    ServerState server;
    GroupAssignment assignment;
    std::vector<ModelConfig> group_configs;
    std::vector<ParamCounts> params;
};

inline Dataset load_experiment_data(const ExperimentConfig& cfg) {
    if (cfg.data_source == "blobs") {
        SeededRng rng(cfg.master_seed, "blobs");
        return gen_blobs(cfg.blobs.classes, cfg.blobs.dims, cfg.blobs.per_class, cfg.blobs.spread,
                         rng);
    }
    return load_idx(cfg.idx_images, cfg.idx_labels);
}

/// Baseline degeneration: allsmall/alllarge collapse the federation to the
/// single group with the smallest/largest total parameter count (ties to the
/// lowest group index); heterotune and homo keep the configured groups.
inline std::vector<ModelConfig> effective_group_configs(const ExperimentConfig& cfg, int input_dim,
                                                        int num_classes) {
    std::vector<ModelConfig> configs;
    configs.reserve(cfg.groups.size());
    for (const auto& g : cfg.groups) {
        ModelConfig c = g.config;
        c.input_dim = input_dim;
        c.num_classes = num_classes;
        configs.push_back(c);
    }
    if (cfg.mode == RunMode::heterotune || cfg.mode == RunMode::homo) return configs;

    const auto counts = param_counts(configs, static_cast<int>(configs.size()));
    size_t pick = 0;
    for (size_t g = 1; g < configs.size(); ++g) {
        const bool better = cfg.mode == RunMode::allsmall ? counts[g].total < counts[pick].total
                                                          : counts[g].total > counts[pick].total;
        if (better) pick = g;
    }
    ModelConfig chosen = configs[pick];
    chosen.group_id = 0;
    return {chosen};
}

/// Everything a running experiment needs between rounds. Tests step it one
/// round at a time to inspect intermediate server states.
struct PreparedExperiment {
    ExperimentConfig cfg;
    int workers = 1;
    Dataset train;
    Dataset val;
    std::vector<ModelConfig> group_configs;
    std::vector<ParamCounts> params;
    GroupAssignment assignment;
    std::vector<ClientState> clients;
    ServerState server;
};

inline PreparedExperiment prepare_experiment(const ExperimentConfig& cfg, int workers = 1) {
    PreparedExperiment pe;
    pe.cfg = cfg;
    pe.workers = workers;
    Dataset full = load_experiment_data(cfg);
    {
        SeededRng rng(cfg.master_seed, "valsplit");
        std::tie(pe.train, pe.val) = stratified_split(full, cfg.val_fraction, rng);
    }
    if (pe.val.size() == 0) throw DataError("run_experiment: empty validation split");

    pe.group_configs = effective_group_configs(cfg, full.features.cols, full.num_classes);
    const int num_branches = static_cast<int>(pe.group_configs.size());
    pe.params = param_counts(pe.group_configs, num_branches);

    std::vector<double> ratios;
    if (cfg.mode == RunMode::heterotune || cfg.mode == RunMode::homo) {
        for (const auto& g : cfg.groups) ratios.push_back(g.ratio);
    } else {
        ratios.push_back(1.0);
    }
    pe.assignment = assign_groups(ratios, cfg.clients);
    for (size_t g = 0; g < pe.assignment.group_sizes.size(); ++g)
        if (pe.assignment.group_sizes[g] == 0)
            throw ConfigError("config: ratio leaves group " + std::to_string(g) +
                              " with zero clients");

    PartitionPlan plan;
    {
        SeededRng rng(cfg.master_seed, "partition");
        plan = dirichlet_partition(pe.train.labels, cfg.clients, cfg.dirichlet_alpha,
                                   cfg.min_per_client, rng);
    }
    pe.clients.resize(cfg.clients);
    for (int k = 0; k < cfg.clients; ++k) {
        pe.clients[k].id = k;
        pe.clients[k].group = pe.assignment.client_group[k];
        pe.clients[k].shard = subset(pe.train, plan.client_indices[k]);
    }

    pe.server = init_server(pe.group_configs, num_branches, cfg.mode, cfg.master_seed);
    return pe;
}

inline RoundReport step_experiment(PreparedExperiment& pe) {
    RoundOptions opt;
    opt.epochs = pe.cfg.epochs;
    opt.lr = pe.cfg.lr;
    opt.lambda_reg = pe.cfg.lambda_reg;
    opt.batch_size = pe.cfg.batch_size;
    opt.participation = pe.cfg.participation;
    opt.share_agg = pe.cfg.share_agg;
    opt.uniform_weights = pe.cfg.uniform_weights;
    opt.master_seed = pe.cfg.master_seed;
    opt.workers = pe.workers;
    opt.val = &pe.val;
    opt.assignment = &pe.assignment;
    SeededRng round_rng(pe.cfg.master_seed, "participate:" + std::to_string(pe.server.round));
    return run_round(pe.server, pe.clients, opt, round_rng);
}

/// Algorithm: build data, split, partition, assign groups, then run R rounds.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, int workers = 1) {
    PreparedExperiment pe = prepare_experiment(cfg, workers);
    ExperimentResult result;
    result.group_configs = pe.group_configs;
    result.params = pe.params;
    result.assignment = pe.assignment;
    result.reports.reserve(cfg.rounds);
    for (int r = 0; r < cfg.rounds; ++r) {
        result.reports.push_back(step_experiment(pe));
        log_info("round " + std::to_string(pe.server.round) + "/" + std::to_string(cfg.rounds) +
                 " avg_acc " + std::to_string(result.reports.back().avg_acc));
    }
    result.server = std::move(pe.server);
    return result;
}

}  // namespace heterotune
