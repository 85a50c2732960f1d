#pragma once

// Shared helpers for the test binaries.

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <functional>

#include "sage/dataset.hpp"
#include "sage/gvae.hpp"
#include "sage/simulator.hpp"

namespace sage::testing {

inline ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kIo;
}

inline nlohmann::json shape_config(const std::string& kind, int n, int requests = 200) {
  return {{"name", kind + std::to_string(n)},
          {"topology", {{"kind", kind}, {"n", n}}},
          {"sim", {{"requests_per_window", requests}}}};
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sage_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

/// Aggregated windows from a cluster driven by a random contention schedule.
inline std::vector<WindowSample> simulate_samples(Cluster& cluster, std::int64_t n_windows, double qos, Rng& rng,
                                                  std::vector<WindowLabels>* labels = nullptr) {
  const auto sched = random_schedule(cluster, n_windows, rng);
  std::vector<WindowSample> out;
  simulate(cluster, sched, n_windows, rng, [&](WindowTrace&& t, const WindowLabels& l) {
    out.push_back(aggregate(t, qos, cluster.config().percentiles));
    if (labels) labels->push_back(l);
  });
  return out;
}

/// 95th percentile of e2e p99 over a healthy run; a QoS target that most clean windows meet.
inline double healthy_qos(const nlohmann::json& config, std::uint64_t seed, int windows = 40) {
  auto cluster = make_cluster(config, 7);
  Rng rng(seed);
  std::vector<double> tails;
  simulate(cluster, Schedule{}, windows, rng, [&](WindowTrace&& t, const WindowLabels&) {
    tails.push_back(aggregate(t, 0, cluster.config().percentiles).e2e_p99_us);
  });
  std::sort(tails.begin(), tails.end());
  return 1.1 * tails.back();
}

inline GvaeHyper small_hyper() {
  GvaeHyper h;
  h.latent_dim = 2;
  h.hidden = {8};
  h.batch_size = 16;
  h.adam.lr = 3e-3;
  return h;
}

}  // namespace sage::testing

namespace sage::testing {

struct TrainedFixture {
  nlohmann::json config;
  double qos = 0;
  std::vector<WindowSample> samples;
  NormalValues normals;
  GvaeModel model;
};

/// Chain or fanout model trained on a random contention history.
inline TrainedFixture trained_fixture(const std::string& kind, int n, std::int64_t windows, int epochs,
                                      std::uint64_t seed) {
  TrainedFixture f;
  f.config = shape_config(kind, n, 200);
  f.qos = healthy_qos(f.config, seed ^ 0x99);
  auto cluster = make_cluster(f.config, 7);
  Rng rng(seed);
  f.samples = simulate_samples(cluster, windows, f.qos, rng);
  f.normals = compute_normal_values(f.samples);
  GvaeHyper h;
  h.beta = 2.0;
  f.model = init_gvae(cluster.cbn(), h, rng);
  train(f.model, balance(f.samples, rng).samples, epochs, rng);
  return f;
}

/// One aggregated window with a single active injection, from a fresh cluster.
inline WindowSample injected_window(const nlohmann::json& config, const std::string& service, InjectionKind kind,
                                    double intensity, double qos, std::uint64_t seed) {
  auto cluster = make_cluster(config, 7);
  cluster.inject(service, {kind, intensity, 0, 0});
  Rng rng(seed);
  return aggregate(cluster.step_window(cluster.config().sim.load_rps, rng), qos, cluster.config().percentiles);
}

}  // namespace sage::testing
