#include <gtest/gtest.h>

#include "sage/rca.hpp"
#include "support.hpp"

using namespace sage;
using sage::testing::kind_of;

class RcaChain : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { f_ = new sage::testing::TrainedFixture(sage::testing::trained_fixture("chain", 3, 600, 60, 31)); }
  static void TearDownTestSuite() { delete f_; }

  static WindowSample healthy() {
    for (const auto& s : f_->samples)
      if (s.qos_met) return s;
    ADD_FAILURE() << "no healthy window";
    return f_->samples.front();
  }

  static sage::testing::TrainedFixture* f_;
};
sage::testing::TrainedFixture* RcaChain::f_ = nullptr;

TEST_F(RcaChain, HealthyWindowIsAPreconditionError) {
  Rng rng(1);
  const auto s = healthy();
  EXPECT_EQ(kind_of([&] { diagnose(f_->model, s, f_->normals, f_->qos, RcaConfig{}, rng); }),
            ErrorKind::kPrecondition);
  EXPECT_EQ(kind_of([&] { diagnose_services(f_->model, s, f_->normals, f_->qos, RcaConfig{}, rng); }),
            ErrorKind::kPrecondition);
}

TEST_F(RcaChain, ForcedHealthyDiagnosisFindsNoCulprit) {
  Rng rng(2);
  RcaConfig cfg;
  cfg.force = true;
  const auto r = diagnose(f_->model, healthy(), f_->normals, f_->qos, cfg, rng);
  EXPECT_GT(r.baseline_probability, cfg.tau);
  EXPECT_TRUE(r.culprits.empty());
  EXPECT_FALSE(r.no_single_service_culprit);
  EXPECT_NE(render(r).find("no culprits"), std::string::npos);
}

TEST_F(RcaChain, LocatesCpuContentionOnTheMiddleService) {
  const auto s = sage::testing::injected_window(f_->config, "S1", InjectionKind::kCpu, 0.7, f_->qos, 77);
  ASSERT_FALSE(s.qos_met);
  Rng rng(3);
  const auto r = diagnose(f_->model, s, f_->normals, f_->qos, RcaConfig{}, rng);
  ASSERT_NE(r.top(), nullptr) << render(r);
  EXPECT_EQ(r.top()->service, "S1") << render(r);
  ASSERT_FALSE(r.top()->metrics.empty());
  EXPECT_EQ(r.top()->metrics.front().name, "cpu_util") << render(r);
  EXPECT_LE(r.baseline_probability, 0.9);
  EXPECT_GT(r.top()->probability, 0.9);
  for (std::size_t i = 1; i < r.culprits.size(); ++i) EXPECT_GE(r.culprits[i - 1].probability, r.culprits[i].probability);

  const auto j = to_json(r);
  EXPECT_EQ(j.at("culprits").at(0).at("service"), "S1");
  EXPECT_EQ(j.at("config").at("n_samples"), 100);
  EXPECT_NE(render(r).find("1. S1"), std::string::npos);
}

TEST_F(RcaChain, DiagnosisIsDeterministicForASeed) {
  const auto s = sage::testing::injected_window(f_->config, "S2", InjectionKind::kDiskIo, 0.7, f_->qos, 78);
  ASSERT_FALSE(s.qos_met);
  Rng a(5), b(5);
  const auto ra = diagnose(f_->model, s, f_->normals, f_->qos, RcaConfig{}, a);
  const auto rb = diagnose(f_->model, s, f_->normals, f_->qos, RcaConfig{}, b);
  EXPECT_EQ(to_json(ra), to_json(rb));
}

TEST_F(RcaChain, AllMetricsAlreadyNormalIsLowConfidence) {
  const auto s = sage::testing::injected_window(f_->config, "S1", InjectionKind::kCpu, 0.7, f_->qos, 79);
  ASSERT_FALSE(s.qos_met);
  auto normals = f_->normals;
  normals["S0"] = s.x.at("S0");
  Rng rng(4);
  const auto d = diagnose_metrics(f_->model, s, "S0", normals, f_->qos, RcaConfig{}, rng);
  EXPECT_TRUE(d.low_confidence);
  EXPECT_TRUE(d.metrics.empty());
  EXPECT_EQ(kind_of([&] { diagnose_metrics(f_->model, s, "S7", normals, f_->qos, RcaConfig{}, rng); }),
            ErrorKind::kLookup);
}

TEST_F(RcaChain, ConfigAndBaselineErrors) {
  const auto s = sage::testing::injected_window(f_->config, "S1", InjectionKind::kCpu, 0.7, f_->qos, 80);
  Rng rng(6);
  RcaConfig bad;
  bad.tau = 1.0;
  EXPECT_EQ(kind_of([&] { diagnose(f_->model, s, f_->normals, f_->qos, bad, rng); }), ErrorKind::kInvalidConfig);
  bad = RcaConfig{};
  bad.n_samples = 0;
  EXPECT_EQ(kind_of([&] { diagnose(f_->model, s, f_->normals, f_->qos, bad, rng); }), ErrorKind::kInvalidConfig);
  auto missing = f_->normals;
  missing.erase("S2");
  EXPECT_EQ(kind_of([&] { diagnose(f_->model, s, missing, f_->qos, RcaConfig{}, rng); }),
            ErrorKind::kInsufficientBaseline);
  EXPECT_EQ(kind_of([] { rca_config_from_json({{"tau", 0.0}}); }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(rca_config_from_json({{"tau", 0.8}}).tau, 0.8);
}

TEST(Rca, ProbeOrdering) {
  EXPECT_TRUE(probe_before({"a", 0.9, 10}, {"b", 0.8, 1}));
  EXPECT_TRUE(probe_before({"b", 0.9, 5}, {"a", 0.9, 10}));
  EXPECT_TRUE(probe_before({"a", 0.9, 5}, {"b", 0.9, 5}));
  EXPECT_FALSE(probe_before({"b", 0.9, 5}, {"a", 0.9, 5}));
}

TEST(Rca, MajorityCulprit) {
  auto report = [](std::optional<std::string> s) {
    RootCauseReport r;
    if (s) r.culprits.push_back({*s, 1.0, {}, false});
    return r;
  };
  EXPECT_EQ(majority_culprit({}), std::nullopt);
  EXPECT_EQ(majority_culprit({report(std::nullopt)}), std::nullopt);
  EXPECT_EQ(majority_culprit({report("A"), report("B"), report("A")}), "A");
  EXPECT_EQ(majority_culprit({report("A"), report("B")}), "B");  // tie goes to the latest
  EXPECT_EQ(majority_culprit({report("A"), report("B"), report(std::nullopt)}), "B");
}

TEST(Rca, RenderNoSingleServiceCulprit) {
  RootCauseReport r;
  r.e2e_p99_us = 2000;
  r.qos_target_us = 1000;
  r.no_single_service_culprit = true;
  EXPECT_NE(render(r).find("no single-service culprit"), std::string::npos);
  r.no_single_service_culprit = false;
  r.culprits.push_back({"S3", 0.97, {{"mem_util", 0.95, 0}}, true});
  const auto text = render(r);
  EXPECT_NE(text.find("1. S3"), std::string::npos);
  EXPECT_NE(text.find("low confidence"), std::string::npos);
  EXPECT_NE(text.find("mem_util"), std::string::npos);
}
