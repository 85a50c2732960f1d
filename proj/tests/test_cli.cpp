#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "sage/simulator.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
};

Result sage_cli(const std::string& args) {
  const std::string cmd = std::string(SAGE_CLI_PATH) + " " + args + " 2>&1";
  Result r{0, {}};
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, "popen failed"};
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

nlohmann::json small_config(int n) {
  auto c = sage::testing::shape_config("chain", n, 200);
  c["gvae"] = {{"latent_dim", 2}, {"hidden", {16}}, {"batch_size", 32}, {"beta", 2.0}};
  c["rca"] = {{"n_samples", 30}};
  c["train"] = {{"windows", 120}, {"epochs", 4}, {"calibration_windows", 20}};
  return c;
}

}  // namespace

TEST(Configs, CommittedConfigsLoad) {
  int topologies = 0;
  for (const auto& e : fs::directory_iterator(SAGE_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    const auto j = read_json(e.path());
    if (j.contains("topology")) {
      auto cluster = sage::make_cluster(j, 7);
      EXPECT_FALSE(cluster.cbn().decode_order.empty()) << e.path();
      ++topologies;
    } else {
      EXPECT_NO_THROW(sage::schedule_from_json(j)) << e.path();
    }
  }
  EXPECT_GE(topologies, 3);
}

TEST(Cli, EndToEndWorkflow) {
  const auto root = sage::testing::fresh_dir("cli");
  fs::create_directories(root);
  const auto cfg = root / "chain3.json";
  write_json(cfg, small_config(3));
  const std::string c = " --config " + cfg.string();

  auto r = sage_cli("simulate" + c + " --seed 3 --out " + (root / "data").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("wrote 120 windows"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(root / "data" / "samples.jsonl"));

  r = sage_cli("train" + c + " --data " + (root / "data").string() + " --out " + (root / "ck").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("trained 3 units"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(root / "ck" / "manifest.json"));

  // First recorded window as a diagnosis input.
  std::ifstream samples(root / "data" / "samples.jsonl");
  std::string line;
  std::getline(samples, line);
  std::ofstream(root / "window.json") << line;
  r = sage_cli("diagnose" + c + " --checkpoint " + (root / "ck").string() + " --window " +
               (root / "window.json").string() + " --force --out " + (root / "diag").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(root / "diag" / "report.json"));

  sage::Schedule sched;
  sched.injections.push_back({"S1", {sage::InjectionKind::kCpu, 0.7, 2, 100}});
  write_json(root / "sched.json", sage::to_json(sched));
  r = sage_cli("run" + c + " --checkpoint " + (root / "ck").string() + " --schedule " + (root / "sched.json").string() +
               " --windows 6 --out " + (root / "run").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("6 windows"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(root / "run" / "timeline.svg"));
  int lines = 0;
  std::ifstream episode(root / "run" / "episode.jsonl");
  while (std::getline(episode, line)) ++lines;
  EXPECT_EQ(lines, 6);

  // Grow the chain by one service and adapt the checkpoint.
  const auto cfg4 = root / "chain4.json";
  write_json(cfg4, small_config(4));
  r = sage_cli("simulate --config " + cfg4.string() + " --seed 4 --windows 80 --out " + (root / "data4").string());
  ASSERT_EQ(r.code, 0) << r.out;
  r = sage_cli("retrain" + c + " --checkpoint " + (root / "ck").string() + " --data " + (root / "data4").string() +
               " --epochs 2 --out " + (root / "ck4").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("added: S3"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("reshaped: S2"), std::string::npos) << r.out;
  EXPECT_EQ(read_json(root / "ck4" / "manifest.json").at("units").size(), 4u);
}

TEST(Cli, ErrorsExitWithStatusOne) {
  const auto root = sage::testing::fresh_dir("cli_err");
  fs::create_directories(root);
  auto r = sage_cli("simulate --config " + (root / "absent.json").string());
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("error"), std::string::npos);

  r = sage_cli("train --data " + (root / "nodata").string());
  EXPECT_EQ(r.code, 1) << r.out;

  write_json(root / "bad.json", {{"topology", {{"kind", "ring"}, {"n", 3}}}});
  r = sage_cli("simulate --config " + (root / "bad.json").string() + " --windows 2");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("invalid"), std::string::npos) << r.out;

  EXPECT_NE(sage_cli("diagnose --window x.json").code, 0);  // --checkpoint is required
  EXPECT_EQ(sage_cli("--help").code, 0);
}
