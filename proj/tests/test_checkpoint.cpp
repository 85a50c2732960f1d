#include <gtest/gtest.h>

#include <fstream>

#include "sage/checkpoint.hpp"
#include "support.hpp"

using namespace sage;
using sage::testing::kind_of;
namespace fs = std::filesystem;

class Checkpoints : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    f_ = new sage::testing::TrainedFixture(sage::testing::trained_fixture("chain", 3, 120, 5, 41));
  }
  static void TearDownTestSuite() { delete f_; }

  static fs::path saved(const std::string& name) {
    const auto dir = sage::testing::fresh_dir(name);
    save_checkpoint(dir, f_->model, f_->normals, f_->qos);
    return dir;
  }

  static sage::testing::TrainedFixture* f_;
};
sage::testing::TrainedFixture* Checkpoints::f_ = nullptr;

TEST_F(Checkpoints, RoundTripDecodesBitIdentically) {
  const auto dir = saved("ck_roundtrip");
  for (const auto* file : {"manifest.json", "topology.json", "normalizer.json", "normal_values.json",
                           "unit0_encoder.bin", "unit2_decoder.bin"})
    EXPECT_TRUE(fs::exists(dir / file)) << file;

  const auto ck = load_checkpoint(dir);
  ASSERT_TRUE(ck.normals);
  ASSERT_TRUE(ck.qos_target_us);
  EXPECT_EQ(*ck.qos_target_us, f_->qos);
  EXPECT_EQ(*ck.normals, f_->normals);
  EXPECT_EQ(ck.model.cbn_hash(), f_->model.cbn_hash());
  EXPECT_EQ(ck.model.version, f_->model.version);
  ASSERT_EQ(ck.model.units.size(), f_->model.units.size());
  for (std::size_t i = 0; i < ck.model.units.size(); ++i) {
    EXPECT_EQ(ck.model.units[i].service, f_->model.units[i].service);
    EXPECT_EQ(ck.model.units[i].parameter_hash(), f_->model.units[i].parameter_hash());
  }

  for (std::size_t k : {0u, 17u, 63u}) {
    const auto& s = f_->samples[k];
    Rng a(11), b(11);
    const auto before = decode_draws(f_->model, s, ZMode::kPosteriorSample, {}, 5, a);
    const auto after = decode_draws(ck.model, s, ZMode::kPosteriorSample, {}, 5, b);
    EXPECT_EQ(before.values, after.values);
  }
}

TEST_F(Checkpoints, OptionalPartsMayBeAbsent) {
  const auto dir = sage::testing::fresh_dir("ck_bare");
  save_checkpoint(dir, f_->model);
  const auto ck = load_checkpoint(dir);
  EXPECT_FALSE(ck.normals);
  EXPECT_FALSE(ck.qos_target_us);
}

TEST_F(Checkpoints, CorruptBlobIsAnIoError) {
  const auto dir = saved("ck_corrupt");
  {
    std::fstream f(dir / "unit1_decoder.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x5a');
  }
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir); }), ErrorKind::kIo);

  const auto dir2 = saved("ck_magic");
  {
    std::fstream f(dir2 / "unit0_prior.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir2); }), ErrorKind::kIo);

  const auto dir3 = saved("ck_truncated");
  fs::resize_file(dir3 / "unit0_encoder.bin", 20);
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir3); }), ErrorKind::kIo);
}

TEST_F(Checkpoints, TopologyMismatchIsAConsistencyError) {
  const auto dir = saved("ck_hash");
  {
    std::ifstream in(dir / "manifest.json");
    auto j = nlohmann::json::parse(in);
    j["cbn_hash"] = hex64(1);
    std::ofstream(dir / "manifest.json") << j.dump();
  }
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir); }), ErrorKind::kConsistency);

  const auto dir2 = saved("ck_topo");
  {
    std::ifstream in(dir2 / "topology.json");
    auto j = nlohmann::json::parse(in);
    j["metric_schema"]["S2"].push_back("gc_pause");
    std::ofstream(dir2 / "topology.json") << j.dump();
  }
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir2); }), ErrorKind::kConsistency);
}

TEST(Checkpoint, MissingDirectoryIsAnIoError) {
  EXPECT_EQ(kind_of([] { load_checkpoint(sage::testing::fresh_dir("ck_nowhere")); }), ErrorKind::kIo);
}
