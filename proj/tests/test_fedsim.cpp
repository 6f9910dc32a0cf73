#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "heterotune/federation.hpp"
#include "heterotune/report.hpp"
#include "heterotune/verify.hpp"

using namespace heterotune;

TEST(WeightedAverage, HandExampleAndIdempotence) {
    Matrix zero(1, 1);
    Matrix three(1, 1);
    three.data = {3.0};
    const Matrix avg = weighted_average({zero, three}, {1.0, 2.0});
    EXPECT_EQ(avg.data, std::vector<double>{2.0});

    SeededRng rng(1, "idempotence");
    const Matrix x = checks::rand_matrix(3, 4, rng, 1.0);
    const Matrix same = weighted_average({x, x, x}, {0.3, 1.7, 0.01});
    EXPECT_EQ(same.data, x.data);  // exact, not approximate
}

TEST(WeightedAverage, MatchesLoopOracle) {
    const CheckResult r = checks::weighted_average_oracle();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(WeightedAverage, ErrorPaths) {
    Matrix a(1, 1), b(2, 1);
    EXPECT_THROW(weighted_average({}, {}), std::invalid_argument);
    EXPECT_THROW(weighted_average({a, a}, {0.0, 0.0}), std::invalid_argument);
    EXPECT_THROW(weighted_average({a, a}, {-1.0, 2.0}), std::invalid_argument);
    EXPECT_THROW(weighted_average({a, b}, {1.0, 1.0}), std::invalid_argument);
    EXPECT_THROW(weighted_average({a, a}, {1.0}), std::invalid_argument);
}

TEST(AggregateLocal, SingletonIsVerbatim) {
    SeededRng rng(2, "singleton");
    const AdapterUpdate u = checks::tiny_update(0, 2, 4, 2, 2, 17, rng);
    const GroupLocalState got = aggregate_local({&u}, false);
    EXPECT_EQ(got.blocks[0].w_loc_d.data, u.blocks[0].w_loc_d.data);
    EXPECT_EQ(got.blocks[1].alphas, u.blocks[1].alphas);
    EXPECT_EQ(got.head.data, u.head.data);
}

TEST(AggregateLocal, EqualCountsGiveArithmeticMean) {
    SeededRng rng(3, "equal-counts");
    const AdapterUpdate a = checks::tiny_update(0, 1, 4, 2, 2, 5, rng);
    const AdapterUpdate b = checks::tiny_update(0, 1, 4, 2, 2, 5, rng);
    const GroupLocalState got = aggregate_local({&a, &b}, false);
    for (size_t j = 0; j < got.head.data.size(); ++j)
        EXPECT_NEAR(got.head.data[j], 0.5 * (a.head.data[j] + b.head.data[j]), 1e-15);
}

TEST(AggregateLocal, MatchesSampleCountOracle) {
    const CheckResult r = checks::aggregate_local_oracle();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(AggregateLocal, RejectsMixedGroupsAndEmpty) {
    SeededRng rng(4, "mixed");
    const AdapterUpdate a = checks::tiny_update(0, 1, 4, 2, 2, 5, rng);
    const AdapterUpdate b = checks::tiny_update(1, 1, 4, 2, 2, 5, rng);
    EXPECT_THROW(aggregate_local({&a, &b}, false), ProtocolError);
    EXPECT_THROW(aggregate_local({}, false), ProtocolError);
}

TEST(SlotMapping, DepthTables) {
    EXPECT_EQ(slot_for_block(0, 2, 4), 0);
    EXPECT_EQ(slot_for_block(1, 2, 4), 3);
    EXPECT_EQ(slot_for_block(0, 3, 4), 0);
    EXPECT_EQ(slot_for_block(1, 3, 4), 2);
    EXPECT_EQ(slot_for_block(2, 3, 4), 3);
    EXPECT_EQ(slot_for_block(0, 1, 4), 0);
    for (int j = 0; j < 4; ++j) EXPECT_EQ(slot_for_block(j, 4, 4), j);
    EXPECT_THROW(slot_for_block(2, 2, 4), std::invalid_argument);
    EXPECT_THROW(slot_for_block(-1, 2, 4), std::invalid_argument);
}

TEST(AggregateShare, DepthMappingHandTable) {
    const CheckResult r = checks::share_depth_mapping();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(AggregateShare, AbsentBranchCarriesOverBitwise) {
    const CheckResult r = checks::share_carry_over();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(AggregateShare, SingleBranchUniformDepthEqualsLocalRule) {
    // M=1, all clients the same depth: the share average per slot must be
    // bit-identical to weighted_average over the same matrices
    SeededRng rng(5, "share-local");
    std::vector<AdapterUpdate> ups;
    ups.push_back(checks::tiny_update(0, 2, 4, 3, 1, 10, rng));
    ups.push_back(checks::tiny_update(0, 2, 4, 3, 1, 30, rng));
    ShareSet prev(2, std::vector<SharePair>(1));
    for (auto& slot : prev) slot[0] = {identity(3), identity(3)};
    const ShareSet got =
        aggregate_share({&ups[0], &ups[1]}, {2}, prev, ShareAgg::per_branch, false);
    for (int s = 0; s < 2; ++s) {
        const Matrix want = weighted_average({ups[0].blocks[s].w_s_d, ups[1].blocks[s].w_s_d},
                                             {10.0, 30.0});
        EXPECT_EQ(got[s][0].w_s_d.data, want.data);
    }
}

TEST(AggregateShare, FlatModeDilutesTowardPreviousState) {
    // two groups of depth 2, slots {0,1}; weights 10 and 30. flat slot weight
    // is 40, so branch 0 moves only a quarter of the way toward its update
    SeededRng rng(6, "share-flat");
    std::vector<AdapterUpdate> ups;
    ups.push_back(checks::tiny_update(0, 2, 4, 2, 2, 10, rng));
    ups.push_back(checks::tiny_update(1, 2, 4, 2, 2, 30, rng));
    ShareSet prev(2, std::vector<SharePair>(2));
    for (auto& slot : prev)
        for (auto& pair : slot)
            pair = {checks::rand_matrix(2, 2, rng, 1.0), checks::rand_matrix(2, 2, rng, 1.0)};

    const ShareSet flat = aggregate_share({&ups[0], &ups[1]}, {2, 2}, prev, ShareAgg::flat, false);
    const ShareSet per = aggregate_share({&ups[0], &ups[1]}, {2, 2}, prev,
                                         ShareAgg::per_branch, false);
    for (int s = 0; s < 2; ++s) {
        for (size_t j = 0; j < 4; ++j) {
            const double p = prev[s][0].w_s_d.data[j];
            const double x = ups[0].blocks[s].w_s_d.data[j];
            EXPECT_NEAR(flat[s][0].w_s_d.data[j], p + 0.25 * (x - p), 1e-12);
            const double p1 = prev[s][1].w_s_d.data[j];
            const double x1 = ups[1].blocks[s].w_s_d.data[j];
            EXPECT_NEAR(flat[s][1].w_s_d.data[j], p1 + 0.75 * (x1 - p1), 1e-12);
        }
        // per-branch ignores foreign weight entirely: single contributor wins
        EXPECT_EQ(per[s][0].w_s_d.data, ups[0].blocks[s].w_s_d.data);
        EXPECT_EQ(per[s][1].w_s_d.data, ups[1].blocks[s].w_s_d.data);
    }
}

namespace {

ServerState tiny_server(RunMode mode = RunMode::heterotune, uint64_t seed = 7) {
    ModelConfig small;
    small.group_id = 0;
    small.depth = 2;
    small.width = 6;
    small.bottleneck = 2;
    small.input_dim = 4;
    small.num_classes = 3;
    ModelConfig large = small;
    large.group_id = 1;
    large.depth = 4;
    large.width = 10;
    return init_server({small, large}, 2, mode, seed);
}

}  // namespace

TEST(Server, InitShapesAndShareSetCount) {
    const ServerState het = tiny_server(RunMode::heterotune);
    EXPECT_EQ(het.share_sets.size(), 1u);
    EXPECT_EQ(het.max_depth, 4);
    EXPECT_EQ(het.share_sets[0].size(), 4u);
    EXPECT_EQ(het.share_sets[0][0].size(), 2u);
    EXPECT_EQ(het.share_sets[0][2][1].w_s_d.data, identity(2).data);
    EXPECT_EQ(het.groups[0].local.blocks[0].alphas, (std::vector<double>{1.0, 0.0}));
    EXPECT_EQ(het.groups[1].local.blocks[0].alphas, (std::vector<double>{0.0, 1.0}));
    EXPECT_EQ(het.round, 0);

    const ServerState homo = tiny_server(RunMode::homo);
    EXPECT_EQ(homo.share_sets.size(), 2u);
}

TEST(Server, MaterializeWiresSlotsByDepthMapping) {
    ServerState s = tiny_server();
    // make slots distinguishable
    SeededRng rng(8, "materialize");
    for (auto& slot : s.share_sets[0])
        for (auto& pair : slot)
            pair = {checks::rand_matrix(2, 2, rng, 1.0), checks::rand_matrix(2, 2, rng, 1.0)};

    const HeteroModel shallow = materialize(s, 0);
    EXPECT_EQ(shallow.adapters[0].branches[0].w_s_d.data, s.share_sets[0][0][0].w_s_d.data);
    EXPECT_EQ(shallow.adapters[1].branches[0].w_s_d.data, s.share_sets[0][3][0].w_s_d.data);
    EXPECT_EQ(shallow.adapters[1].branches[1].w_s_u.data, s.share_sets[0][3][1].w_s_u.data);

    const HeteroModel deep = materialize(s, 1);
    for (int b = 0; b < 4; ++b)
        EXPECT_EQ(deep.adapters[b].branches[1].w_s_d.data, s.share_sets[0][b][1].w_s_d.data);
    EXPECT_EQ(deep.config.width, 10);
    EXPECT_EQ(deep.head.data, s.groups[1].local.head.data);
}

TEST(Server, ValidateUpdateRejectsProtocolViolations) {
    const ServerState s = tiny_server();
    SeededRng rng(9, "validate");
    auto good = [&]() {
        AdapterUpdate u = checks::tiny_update(0, 2, 6, 2, 2, 5, rng);
        u.head = Matrix(6, 3);
        return u;
    };
    validate_update(good(), s);  // well-formed baseline

    AdapterUpdate u = good();
    u.group_id = 5;
    EXPECT_THROW(validate_update(u, s), ProtocolError);
    u = good();
    u.blocks.pop_back();
    EXPECT_THROW(validate_update(u, s), ProtocolError);
    u = good();
    u.blocks[0].w_loc_d = Matrix(5, 2);
    EXPECT_THROW(validate_update(u, s), ProtocolError);
    u = good();
    u.blocks[1].w_s_d = Matrix(3, 3);  // foreign-sized share payload
    EXPECT_THROW(validate_update(u, s), ProtocolError);
    u = good();
    u.blocks[0].alphas.push_back(0.0);
    EXPECT_THROW(validate_update(u, s), ProtocolError);
    u = good();
    u.head = Matrix(6, 4);
    EXPECT_THROW(validate_update(u, s), ProtocolError);
    u = good();
    u.sample_count = 0;
    EXPECT_THROW(validate_update(u, s), ProtocolError);
}

TEST(Evaluate, SelfLabeledScoresPerfect) {
    SeededRng rng(10, "self-label");
    ModelConfig c;
    c.group_id = 0;
    c.depth = 1;
    c.width = 6;
    c.bottleneck = 2;
    c.input_dim = 4;
    c.num_classes = 3;
    auto backbone = init_backbone(c, rng);
    HeteroModel m = make_model(c, 1, backbone, rng);
    m.head = checks::rand_matrix(6, 3, rng, 0.5);
    Dataset d;
    d.num_classes = 3;
    d.features = checks::rand_matrix(50, 4, rng, 1.0);
    d.labels = argmax_rows(fused_model_forward(m, d.features));
    EXPECT_EQ(evaluate(m, d), 1.0);

    // binary complement: acc(D) + acc(flipped D) = 1
    m.head = checks::rand_matrix(6, 2, rng, 0.5);
    m.config.num_classes = 2;
    Dataset bin;
    bin.num_classes = 2;
    bin.features = checks::rand_matrix(101, 4, rng, 1.0);
    bin.labels.resize(101);
    for (int& y : bin.labels) y = static_cast<int>(rng.uniform_int(2));
    Dataset flipped = bin;
    for (int& y : flipped.labels) y = 1 - y;
    EXPECT_NEAR(evaluate(m, bin) + evaluate(m, flipped), 1.0, 1e-12);

    Dataset empty;
    EXPECT_THROW(evaluate(m, empty), DataError);
}

TEST(Evaluate, FusedPathAgreesWithTrainingPath) {
    const CheckResult r = checks::dual_path_evaluate();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(RunRound, ClientErrorsCarryTheClientId) {
    ExperimentConfig cfg = checks::small_experiment_config(RunMode::heterotune, 21);
    PreparedExperiment pe = prepare_experiment(cfg, 2);
    pe.clients[3].shard = Dataset{};  // empty shard trips local_train
    try {
        step_experiment(pe);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("client 3:"), std::string::npos) << e.what();
    }
}

TEST(RunRound, ParticipationSamplesAtLeastOne) {
    ExperimentConfig cfg = checks::small_experiment_config(RunMode::heterotune, 23);
    cfg.participation = 1e-9;
    cfg.rounds = 1;
    PreparedExperiment pe = prepare_experiment(cfg, 1);
    const RoundReport rep = step_experiment(pe);
    // exactly one participant: exactly one group saw training loss
    int groups_with_loss = 0;
    for (double loss : rep.group_train_loss) groups_with_loss += std::isnan(loss) ? 0 : 1;
    EXPECT_EQ(groups_with_loss, 1);
    EXPECT_EQ(rep.round, 1);
}

TEST(RunRound, ZeroLrLeavesServerBitIdentical) {
    const CheckResult r = checks::no_op_round_fixpoint();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(RunRound, WorkerCountDoesNotChangeResults) {
    const CheckResult r = checks::worker_independence();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(RunRound, SingleBranchReducesToFedAvg) {
    const CheckResult r = checks::fedavg_reduction();
    EXPECT_TRUE(r.pass) << r.detail;
}

TEST(RunExperiment, DeterministicPerSeedAndSensitiveToSeed) {
    const ExperimentConfig cfg = checks::small_experiment_config(RunMode::heterotune, 29);
    const ExperimentResult a = run_experiment(cfg, 1);
    const ExperimentResult b = run_experiment(cfg, 2);
    EXPECT_EQ(encode_server_state(a.server), encode_server_state(b.server));
    EXPECT_EQ(metrics_csv(a.reports, 2), metrics_csv(b.reports, 2));

    ExperimentConfig other = cfg;
    other.master_seed = 31;
    const ExperimentResult c = run_experiment(other, 1);
    EXPECT_NE(encode_server_state(a.server), encode_server_state(c.server));
}

TEST(RunExperiment, SingleGroupHeterotuneEqualsHomo) {
    ExperimentConfig het = checks::fedavg_reduction_config(33);
    ExperimentConfig homo = het;
    homo.mode = RunMode::homo;
    const ExperimentResult a = run_experiment(het, 1);
    const ExperimentResult b = run_experiment(homo, 1);
    EXPECT_EQ(encode_server_state(a.server), encode_server_state(b.server));
    EXPECT_EQ(metrics_csv(a.reports, 1), metrics_csv(b.reports, 1));
}

TEST(RunExperiment, HomoModeNeverCrossesGroupLines) {
    ExperimentConfig cfg = checks::small_experiment_config(RunMode::homo, 37);
    PreparedExperiment pe = prepare_experiment(cfg, 1);
    step_experiment(pe);
    step_experiment(pe);
    // group 0's private set: branch 1 never receives anything, stays identity
    const ShareSet& set0 = pe.server.share_sets[0];
    const ShareSet& set1 = pe.server.share_sets[1];
    for (size_t s = 0; s < set0.size(); ++s) {
        EXPECT_EQ(set0[s][1].w_s_d.data, identity(2).data);
        EXPECT_EQ(set0[s][1].w_s_u.data, identity(2).data);
        EXPECT_EQ(set1[s][0].w_s_d.data, identity(2).data);
    }
}

TEST(RunExperiment, BaselineModesPickTheDesignatedConfig) {
    ExperimentConfig cfg = checks::small_experiment_config(RunMode::allsmall, 41);
    {
        PreparedExperiment pe = prepare_experiment(cfg, 1);
        ASSERT_EQ(pe.group_configs.size(), 1u);
        EXPECT_EQ(pe.group_configs[0].width, 6);
        EXPECT_EQ(pe.group_configs[0].group_id, 0);
        EXPECT_EQ(pe.assignment.group_sizes, std::vector<int>{6});
    }
    cfg.mode = RunMode::alllarge;
    {
        PreparedExperiment pe = prepare_experiment(cfg, 1);
        ASSERT_EQ(pe.group_configs.size(), 1u);
        EXPECT_EQ(pe.group_configs[0].width, 10);
    }
}

TEST(RunExperiment, BaselinesShareDataAndPartitionAcrossModes) {
    ExperimentConfig small_cfg = checks::small_experiment_config(RunMode::allsmall, 43);
    ExperimentConfig large_cfg = small_cfg;
    large_cfg.mode = RunMode::alllarge;
    PreparedExperiment a = prepare_experiment(small_cfg, 1);
    PreparedExperiment b = prepare_experiment(large_cfg, 1);
    EXPECT_EQ(a.train.features.data, b.train.features.data);
    EXPECT_EQ(a.val.labels, b.val.labels);
    for (int k = 0; k < small_cfg.clients; ++k)
        EXPECT_EQ(a.clients[k].shard.labels, b.clients[k].shard.labels);
    // ...and differ only through the chosen model config
    const RoundReport ra = step_experiment(a);
    const RoundReport rb = step_experiment(b);
    EXPECT_NE(ra.group_bytes, rb.group_bytes);
}

TEST(RunExperiment, GroupPopulationsConserveClients) {
    const ExperimentConfig cfg = checks::small_experiment_config(RunMode::heterotune, 47);
    const ExperimentResult res = run_experiment(cfg, 1);
    int total = 0;
    for (int n : res.assignment.group_sizes) total += n;
    EXPECT_EQ(total, cfg.clients);
    // round counter strictly increasing
    for (size_t i = 0; i < res.reports.size(); ++i)
        EXPECT_EQ(res.reports[i].round, static_cast<int>(i) + 1);
}

TEST(RunExperiment, ReportedBytesMatchTheCountingFormula) {
    const ExperimentConfig cfg = checks::small_experiment_config(RunMode::heterotune, 49);
    const ExperimentResult res = run_experiment(cfg, 1);
    for (size_t g = 0; g < res.params.size(); ++g)
        EXPECT_EQ(res.reports.back().group_bytes[g], 8 * res.params[g].trainable);
}

TEST(RunExperiment, ZeroClientGroupIsRejected) {
    ExperimentConfig cfg = checks::small_experiment_config(RunMode::heterotune, 51);
    cfg.clients = 6;
    cfg.groups[0].ratio = 1.0;
    cfg.groups[1].ratio = 1e-9;
    EXPECT_THROW(prepare_experiment(cfg, 1), ConfigError);
}
