#include <gtest/gtest.h>

#include <fstream>

#include "sage/actuator.hpp"
#include "support.hpp"

using namespace sage;
using sage::testing::kind_of;

namespace {

using AK = ActionKind;

RootCauseReport blame(const std::string& service, const std::string& metric) {
  RootCauseReport r;
  r.culprits.push_back({service, 0.99, {{metric, 0.95, 0}}, false});
  return r;
}

Cluster chain3() { return make_cluster(sage::testing::shape_config("chain", 3), 7); }

}  // namespace

TEST(Ladder, Table) {
  using RC = ResourceClass;
  EXPECT_EQ(escalation_ladder(RC::kCpu, false),
            (std::vector<AK>{AK::kCpuFreqBoost, AK::kScaleUpCpu, AK::kScaleOut, AK::kMigrate}));
  EXPECT_EQ(escalation_ladder(RC::kCpu, true),
            (std::vector<AK>{AK::kRateLimitInterference, AK::kCpuFreqBoost, AK::kScaleUpCpu, AK::kScaleOut,
                             AK::kMigrate}));
  EXPECT_EQ(escalation_ladder(RC::kMemory, false), (std::vector<AK>{AK::kScaleUpMem, AK::kScaleOut, AK::kMigrate}));
  EXPECT_EQ(escalation_ladder(RC::kDisk, false), (std::vector<AK>{AK::kScaleOut, AK::kMigrate}));
  EXPECT_EQ(escalation_ladder(RC::kCache, false),
            (std::vector<AK>{AK::kCachePartition, AK::kScaleOut, AK::kMigrate}));
  EXPECT_EQ(escalation_ladder(RC::kNetwork, false), (std::vector<AK>{AK::kNetPartition, AK::kMigrate}));
  EXPECT_EQ(escalation_ladder(RC::kOther, false), (std::vector<AK>{AK::kScaleOut, AK::kMigrate}));
  for (auto c : {RC::kCpu, RC::kMemory, RC::kDisk, RC::kCache, RC::kNetwork, RC::kOther})
    EXPECT_EQ(escalation_ladder(c, false).back(), AK::kMigrate);
}

TEST(Ladder, MetricClasses) {
  EXPECT_EQ(classify_metric("cpu_util"), ResourceClass::kCpu);
  EXPECT_EQ(classify_metric("mem_util"), ResourceClass::kMemory);
  EXPECT_EQ(classify_metric("disk_util"), ResourceClass::kDisk);
  EXPECT_EQ(classify_metric("cache_pressure"), ResourceClass::kCache);
  EXPECT_EQ(classify_metric("net_util"), ResourceClass::kNetwork);
  EXPECT_EQ(classify_metric(channel_metric("rpc_S1", "rtt")), ResourceClass::kNetwork);
  EXPECT_EQ(classify_metric("gc_pause"), ResourceClass::kOther);
  EXPECT_EQ(interference_kind(ResourceClass::kDisk), InjectionKind::kDiskIo);
  EXPECT_EQ(interference_kind(ResourceClass::kCache), std::nullopt);
}

TEST(Signals, InterferenceSignature) {
  ActuatorConfig cfg;
  EXPECT_TRUE(interference_signature({{200, 205, 198}, 0.8}, cfg));
  EXPECT_FALSE(interference_signature({{200, 205, 198}, 0.75}, cfg));  // strictly above the threshold
  EXPECT_FALSE(interference_signature({{200, 260, 198}, 0.9}, cfg));   // load is moving
  EXPECT_FALSE(interference_signature({{200}, 0.9}, cfg));
  EXPECT_FALSE(interference_signature({{200, 200}, std::nullopt}, cfg));
}

TEST(SelectAction, Examples) {
  auto cluster = chain3();
  const auto a = select_action(blame("S1", "cpu_util"), cluster);
  ASSERT_TRUE(a);
  EXPECT_EQ(a->service, "S1");
  EXPECT_EQ(a->kind, AK::kCpuFreqBoost);

  EXPECT_EQ(select_action(blame("S1", "mem_util"), cluster)->kind, AK::kScaleUpMem);
  EXPECT_EQ(select_action(blame("S1", "disk_util"), cluster)->kind, AK::kScaleOut);
  EXPECT_EQ(select_action(blame("S1", channel_metric("rpc_S1", "net_util")), cluster)->kind, AK::kNetPartition);
  EXPECT_EQ(select_action(RootCauseReport{}, cluster), std::nullopt);

  // Frequency already at its cap: the next rung is taken.
  auto j = sage::testing::shape_config("chain", 3);
  j["services"]["S1"] = {{"cpu_freq_scale", 1.0}};
  auto capped = make_cluster(j, 7);
  EXPECT_EQ(select_action(blame("S1", "cpu_util"), capped)->kind, AK::kScaleUpCpu);
}

TEST(SelectAction, EscalatesAndExhausts) {
  auto cluster = chain3();
  EscalationState state;
  std::vector<AK> issued;
  while (auto a = select_action(blame("S2", "cpu_util"), cluster, state, {}, ActuatorConfig{})) {
    issued.push_back(a->kind);
    cluster.apply_action(*a);
  }
  EXPECT_EQ(issued, (std::vector<AK>{AK::kCpuFreqBoost, AK::kScaleUpCpu, AK::kScaleOut, AK::kMigrate}));
  // A different metric of the same service has its own ladder.
  EXPECT_EQ(select_action(blame("S2", "mem_util"), cluster, state, {}, ActuatorConfig{})->kind, AK::kScaleUpMem);
}

TEST(SelectAction, RateLimitNeedsAnInterferingJob) {
  ActuatorConfig cfg;
  const SignalContext flat{{200, 201, 199}, 0.9};
  auto clean = chain3();
  EscalationState s1;
  EXPECT_EQ(select_action(blame("S1", "cpu_util"), clean, s1, flat, cfg)->kind, AK::kCpuFreqBoost);

  auto noisy = chain3();
  noisy.inject("S1", {InjectionKind::kCpu, 0.6, 0, 100});
  EscalationState s2;
  const auto a = select_action(blame("S1", "cpu_util"), noisy, s2, flat, cfg);
  ASSERT_TRUE(a);
  EXPECT_EQ(a->kind, AK::kRateLimitInterference);
  EXPECT_EQ(a->interference, InjectionKind::kCpu);
  EXPECT_EQ(to_json(*a).at("interference"), "cpu");
}

TEST(EpisodeLog, RecoveryBookkeeping) {
  EpisodeLog log;
  for (int w = 0; w < 6; ++w) {
    EpisodeRecord r;
    r.window = w;
    r.qos_met = w < 2 || w == 5;
    if (w == 2) {
      r.report = blame("S1", "cpu_util");
      r.action = Action::make("S1", AK::kScaleOut);
      r.outcome = ActionOutcome::kApplied;
    }
    log.records.push_back(r);
  }
  EXPECT_EQ(log.first_diagnosis(), 2u);
  EXPECT_EQ(log.action_count(), 1u);
  EXPECT_FALSE(log.recovered_within(2));
  EXPECT_TRUE(log.recovered_within(3));
  EXPECT_FALSE(EpisodeLog{}.recovered_within(10));

  const auto path = (sage::testing::fresh_dir("episode") += ".jsonl").string();
  write_episode_log(path, log);
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("window"), n);
    if (n == 2) {
      EXPECT_EQ(j.at("action").at("kind"), "ScaleOut");
    }
    ++n;
  }
  EXPECT_EQ(n, 6);
}

class ClosedLoop : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    f_ = new sage::testing::TrainedFixture(sage::testing::trained_fixture("chain", 3, 600, 60, 31));
  }
  static void TearDownTestSuite() { delete f_; }

  static EpisodeLog run(const Schedule& sched, const ActuatorConfig& cfg, std::int64_t windows, std::uint64_t seed) {
    auto cluster = make_cluster(f_->config, 7);
    install(cluster, sched);
    Rng rng(seed);
    return control_loop(f_->model, cluster, sched, f_->normals, f_->qos, cfg, rng, windows);
  }

  static sage::testing::TrainedFixture* f_;
};
sage::testing::TrainedFixture* ClosedLoop::f_ = nullptr;

TEST_F(ClosedLoop, QuiescentWhenHealthy) {
  const auto log = run(Schedule{}, ActuatorConfig{}, 20, 5);
  EXPECT_EQ(log.records.size(), 20u);
  EXPECT_EQ(log.action_count(), 0u);
}

TEST_F(ClosedLoop, RecoversFromCpuContention) {
  Schedule sched;
  sched.injections.push_back({"S1", {InjectionKind::kCpu, 0.7, 3, 100}});
  const auto log = run(sched, ActuatorConfig{}, 20, 6);
  ASSERT_TRUE(log.first_diagnosis());
  EXPECT_EQ(log.records[*log.first_diagnosis()].report->top()->service, "S1");
  EXPECT_TRUE(log.recovered_within(5));
  EXPECT_TRUE(log.records.back().qos_met);
  EXPECT_GE(log.action_count(), 1u);
}

TEST_F(ClosedLoop, WrongCulpritDoesNotRecover) {
  Schedule sched;
  sched.injections.push_back({"S1", {InjectionKind::kCpu, 0.7, 3, 100}});
  ActuatorConfig cfg;
  cfg.forced_culprit = "S2";
  const auto log = run(sched, cfg, 20, 6);
  ASSERT_TRUE(log.first_diagnosis());
  EXPECT_EQ(log.records[*log.first_diagnosis()].note, "forced culprit");
  for (std::size_t i = 3; i < log.records.size(); ++i) EXPECT_FALSE(log.records[i].qos_met) << "window " << i;
  for (const auto& r : log.records)
    if (r.action) {
      EXPECT_EQ(r.action->service, "S2");
    }
}
