#pragma once

// Scenario suites, baseline detectors, scoring, timing and report emission.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sage/actuator.hpp"
#include "sage/dataset.hpp"
#include "sage/gvae.hpp"
#include "sage/rca.hpp"
#include "sage/simulator.hpp"

namespace sage {

// ---------------------------------------------------------------------------
// Scenarios

struct Scenario {
  std::string name;
  nlohmann::json topology;  // topology config, as accepted by make_cluster
  std::uint64_t cluster_seed = 0;
  Schedule schedule;  // load and injections; the injections are the ground truth
  std::int64_t n_windows = 30;
  std::uint64_t seed = 0;
};

struct ScenarioRun {
  std::string name;
  double qos_target_us = 0;
  std::vector<WindowSample> samples;
  std::vector<WindowLabels> labels;
};

/// Simulates a scenario from a fresh cluster; identical seeds give identical runs.
inline ScenarioRun run_scenario(const Scenario& sc, double qos_target_us) {
  require(sc.n_windows >= 1, ErrorKind::kPrecondition, "scenario needs at least one window");
  auto cluster = make_cluster(sc.topology, sc.cluster_seed);
  for (const auto& si : sc.schedule.injections)
    require(cluster.cbn().has_service(si.service), ErrorKind::kLookup,
            "scenario '" + sc.name + "' injects into unknown service '" + si.service + "'");
  Rng rng(sc.seed);
  ScenarioRun run;
  run.name = sc.name;
  run.qos_target_us = qos_target_us;
  const auto& pcts = cluster.config().percentiles;
  simulate(cluster, sc.schedule, sc.n_windows, rng, [&](WindowTrace&& t, const WindowLabels& l) {
    run.samples.push_back(aggregate(t, qos_target_us, pcts));
    run.labels.push_back(l);
  });
  return run;
}

namespace detail {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::set<std::string> labeled_services(const WindowLabels& labels) {
  std::set<std::string> out;
  for (const auto& g : labels) out.insert(g.service);
  return out;
}

}  // namespace detail

inline std::vector<ScenarioRun> run_scenarios(const std::vector<Scenario>& scenarios, double qos_target_us,
                                              unsigned threads = 1) {
  std::vector<ScenarioRun> runs(scenarios.size());
  detail::parallel_for(scenarios.size(), threads, [&](std::size_t i) { runs[i] = run_scenario(scenarios[i], qos_target_us); });
  return runs;
}

/// 1.1x the 99th percentile of healthy-window tail latency, by default.
inline double calibrate_qos(const nlohmann::json& topology, std::uint64_t cluster_seed, std::int64_t n_windows,
                            std::uint64_t seed, double quantile = 0.99, double margin = 1.1) {
  require(n_windows >= 1, ErrorKind::kPrecondition, "calibration needs at least one window");
  require(quantile > 0 && quantile <= 1, ErrorKind::kPrecondition, "quantile must lie in (0,1]");
  auto cluster = make_cluster(topology, cluster_seed);
  Rng rng(seed);
  std::vector<double> p99;
  simulate(cluster, Schedule{}, n_windows, rng, [&](WindowTrace&& t, const WindowLabels&) {
    p99.push_back(aggregate(t, std::numeric_limits<double>::infinity(), cluster.config().percentiles).e2e_p99_us);
  });
  std::sort(p99.begin(), p99.end());
  return margin * nearest_rank(p99, 100.0 * quantile);
}

struct SuiteSpec {
  std::string name;
  nlohmann::json topology;
  std::uint64_t cluster_seed = 7;
};

struct SuiteOptions {
  std::int64_t n_windows = 30;
  std::int64_t inject_start = 10;
  double intensity = 0.6;
  int repeats = 1;
  std::uint64_t seed = 1;
};

/// One single-injection scenario per (injection kind, service, repeat); the
/// injection runs from inject_start to the last window.
inline std::vector<Scenario> single_injection_suite(const SuiteSpec& spec, const SuiteOptions& opts) {
  require(opts.inject_start >= 0 && opts.inject_start < opts.n_windows, ErrorKind::kInvalidConfig,
          "injection start must fall inside the scenario");
  require(opts.repeats >= 1, ErrorKind::kInvalidConfig, "repeats must be >= 1");
  const auto cluster = make_cluster(spec.topology, spec.cluster_seed);
  std::vector<Scenario> out;
  for (auto kind : kAllInjectionKinds)
    for (const auto& svc : cluster.cbn().decode_order)
      for (int r = 0; r < opts.repeats; ++r) {
        Scenario sc;
        sc.name = spec.name + "/" + to_string(kind) + "/" + svc + "/" + std::to_string(r);
        sc.topology = spec.topology;
        sc.cluster_seed = spec.cluster_seed;
        sc.n_windows = opts.n_windows;
        sc.schedule.injections.push_back({svc, Injection{kind, opts.intensity, opts.inject_start, opts.n_windows - 1}});
        Fnv1a h;
        h.update(sc.name);
        sc.seed = h.digest() ^ opts.seed;
        out.push_back(std::move(sc));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Detectors

struct Detection {
  std::vector<std::string> ranked;  // flagged services, most suspect first
  std::string top_metric;           // metric blamed on ranked.front(), if the detector names one
};

/// Called on violating windows only: (run, window index) -> detection.
using Detector = std::function<Detection(const ScenarioRun&, std::size_t)>;

inline const std::vector<std::string>& utilization_metrics() {
  static const std::vector<std::string> m{"cpu_util", "mem_util", "disk_util", "net_util"};
  return m;
}

/// Services with any utilization strictly above the threshold, highest first.
inline Detection autoscale_flags(const WindowSample& s, double threshold) {
  std::vector<std::pair<double, std::string>> hits;
  for (const auto& [svc, metrics] : s.x) {
    double best = -1;
    std::string which;
    for (const auto& m : utilization_metrics()) {
      auto it = metrics.find(m);
      if (it != metrics.end() && it->second > threshold && it->second > best) {
        best = it->second;
        which = m;
      }
    }
    if (best >= 0) hits.emplace_back(best, svc + "\n" + which);
  }
  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  Detection d;
  for (const auto& [v, key] : hits) d.ranked.push_back(key.substr(0, key.find('\n')));
  if (!hits.empty()) d.top_metric = hits.front().second.substr(hits.front().second.find('\n') + 1);
  return d;
}

inline Detector autoscale_detector(double threshold) {
  require(threshold > 0 && threshold < 1, ErrorKind::kPrecondition, "autoscale threshold must lie in (0,1)");
  return [threshold](const ScenarioRun& run, std::size_t w) { return autoscale_flags(run.samples[w], threshold); };
}

/// Flags exactly the labeled services; scores itself perfectly.
inline Detector ground_truth_detector() {
  return [](const ScenarioRun& run, std::size_t w) {
    Detection d;
    for (const auto& s : detail::labeled_services(run.labels[w])) d.ranked.push_back(s);
    return d;
  };
}

struct OracleThreshold {
  std::string service;
  std::string metric;
  double threshold = 0;
  double accuracy = 0;  // labeled detection accuracy at the threshold
  double scale = 1;     // spread of the metric, used to compare exceedances
  bool usable = false;
};

struct OracleModel {
  std::vector<OracleThreshold> thresholds;

  const OracleThreshold* find(const std::string& service, const std::string& metric) const {
    for (const auto& t : thresholds)
      if (t.service == service && t.metric == metric) return &t;
    return nullptr;
  }
};

/// Per-(service, metric) thresholds chosen by sweeping the midpoints of each
/// metric's observed values for the best labeled accuracy (flag iff value > threshold).
/// A window is positive for a service when that service is injected.
inline OracleModel fit_oracle(const std::vector<ScenarioRun>& runs) {
  std::size_t n = 0;
  for (const auto& r : runs) n += r.samples.size();
  require(n > 0, ErrorKind::kPrecondition, "oracle needs labeled training windows");
  std::map<std::pair<std::string, std::string>, std::vector<std::pair<double, int>>> columns;
  for (const auto& r : runs)
    for (std::size_t w = 0; w < r.samples.size(); ++w) {
      const auto positive = detail::labeled_services(r.labels[w]);
      for (const auto& [svc, metrics] : r.samples[w].x)
        for (const auto& [m, v] : metrics) columns[{svc, m}].emplace_back(v, positive.count(svc) ? 1 : 0);
    }
  OracleModel model;
  for (auto& [key, col] : columns) {
    OracleThreshold t;
    t.service = key.first;
    t.metric = key.second;
    std::sort(col.begin(), col.end());
    const auto total = static_cast<double>(col.size());
    std::size_t positives = 0;
    double mean = 0;
    for (const auto& [v, l] : col) {
      positives += static_cast<std::size_t>(l);
      mean += v;
    }
    mean /= total;
    double var = 0;
    for (const auto& [v, l] : col) var += (v - mean) * (v - mean);
    t.scale = std::sqrt(var / total);
    const double never = static_cast<double>(col.size() - positives) / total;
    t.accuracy = never;
    t.threshold = col.back().first;
    std::size_t neg_below = 0, pos_below = 0;
    for (std::size_t i = 0; i + 1 < col.size(); ++i) {
      (col[i].second ? pos_below : neg_below) += 1;
      if (col[i].first == col[i + 1].first) continue;
      const double acc = static_cast<double>(neg_below + (positives - pos_below)) / total;
      if (acc > t.accuracy) {
        t.accuracy = acc;
        t.threshold = 0.5 * (col[i].first + col[i + 1].first);
      }
    }
    const bool constant = col.front().first == col.back().first;
    t.usable = !constant && positives > 0 && t.accuracy > never && t.scale > 0;
    model.thresholds.push_back(t);
  }
  return model;
}

inline Detection oracle_flags(const OracleModel& model, const WindowSample& s) {
  std::map<std::string, std::pair<double, std::string>> best;
  for (const auto& t : model.thresholds) {
    if (!t.usable) continue;
    auto xs = s.x.find(t.service);
    if (xs == s.x.end()) continue;
    auto v = xs->second.find(t.metric);
    if (v == xs->second.end() || !(v->second > t.threshold)) continue;
    const double score = (v->second - t.threshold) / t.scale;
    auto it = best.find(t.service);
    if (it == best.end() || score > it->second.first) best[t.service] = {score, t.metric};
  }
  std::vector<std::pair<double, std::string>> ranked;
  for (const auto& [svc, sm] : best) ranked.emplace_back(sm.first, svc);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  Detection d;
  for (const auto& [score, svc] : ranked) d.ranked.push_back(svc);
  if (!ranked.empty()) d.top_metric = best.at(ranked.front().second).second;
  return d;
}

inline Detector oracle_detector(OracleModel model) {
  return [model = std::move(model)](const ScenarioRun& run, std::size_t w) { return oracle_flags(model, run.samples[w]); };
}

inline Detector oracle_detector(const std::vector<ScenarioRun>& training) { return oracle_detector(fit_oracle(training)); }

/// Counterfactual diagnosis on each violating window. Every window gets its
/// own random stream derived from the run name and window index.
inline Detector sage_detector(const GvaeModel& model, const NormalValues& normals, const RcaConfig& cfg,
                              std::uint64_t seed = 0) {
  return [&model, &normals, cfg, seed](const ScenarioRun& run, std::size_t w) {
    Fnv1a h;
    h.update(run.name);
    h.update(&w, sizeof w);
    Rng rng(seed ^ h.digest());
    const auto report = diagnose(model, run.samples[w], normals, run.qos_target_us, cfg, rng);
    Detection d;
    for (const auto& c : report.culprits) d.ranked.push_back(c.service);
    if (const auto* top = report.top(); top && !top->metrics.empty()) d.top_metric = top->metrics.front().name;
    return d;
  };
}

// ---------------------------------------------------------------------------
// Scoring

struct ScenarioDetail {
  std::string scenario;
  std::size_t labeled_violations = 0;  // violating windows with an active injection
  std::size_t correct = 0;
  std::size_t false_negatives = 0;
  std::size_t false_positive_windows = 0;
  std::size_t clean_windows = 0;  // injection-free, QoS-met windows
  std::size_t unlabeled_violations = 0;
  std::optional<std::string> majority;  // most frequent top culprit over labeled violations
  bool majority_correct = false;
  std::map<std::string, int> top_metrics;  // top metric counts over correct windows
};

struct DetectionScore {
  std::string method;
  double accuracy = 1;  // correct / labeled violating windows
  double false_positive_rate = 0;
  double false_negative_rate = 0;
  double scenario_accuracy = 1;  // majority top culprit correct / scenarios with a labeled violation
  std::size_t scenarios = 0;
  std::size_t scored_scenarios = 0;
  std::size_t labeled_violations = 0;
  std::size_t correct = 0;
  std::size_t false_negatives = 0;
  std::size_t false_positive_windows = 0;
  std::size_t false_positive_denominator = 0;
  std::vector<ScenarioDetail> detail;
};

namespace detail {

inline ScenarioDetail score_run(const Detector& detector, const ScenarioRun& run) {
  ScenarioDetail d;
  d.scenario = run.name;
  std::map<std::string, int> votes;
  std::string last_top;
  for (std::size_t w = 0; w < run.samples.size(); ++w) {
    const auto truth = labeled_services(run.labels[w]);
    const auto& s = run.samples[w];
    if (s.qos_met) {
      if (truth.empty()) ++d.clean_windows;
      continue;
    }
    const auto det = detector(run, w);
    bool wrong_flag = false;
    for (const auto& f : det.ranked)
      if (!truth.count(f)) wrong_flag = true;
    if (truth.empty()) {
      ++d.unlabeled_violations;
      if (!det.ranked.empty()) ++d.false_positive_windows;
      continue;
    }
    ++d.labeled_violations;
    if (wrong_flag) ++d.false_positive_windows;
    const std::size_t k = std::min(truth.size(), det.ranked.size());
    std::set<std::string> top(det.ranked.begin(), det.ranked.begin() + static_cast<std::ptrdiff_t>(k));
    const bool ok = std::includes(top.begin(), top.end(), truth.begin(), truth.end());
    if (ok) {
      ++d.correct;
      if (!det.top_metric.empty()) ++d.top_metrics[det.top_metric];
    } else {
      ++d.false_negatives;
    }
    if (!det.ranked.empty()) {
      ++votes[det.ranked.front()];
      last_top = det.ranked.front();
    }
  }
  if (!votes.empty()) {
    int best = 0;
    for (const auto& [s, v] : votes) best = std::max(best, v);
    std::string pick;
    for (const auto& [s, v] : votes)
      if (v == best && (pick.empty() || s == last_top)) pick = s;
    d.majority = pick;
  }
  std::set<std::string> injected;
  for (const auto& l : run.labels)
    for (const auto& g : l) injected.insert(g.service);
  d.majority_correct = d.majority && injected.count(*d.majority) > 0;
  return d;
}

inline DetectionScore finalize(DetectionScore score) {
  score.scored_scenarios = score.labeled_violations = score.correct = score.false_negatives = 0;
  score.false_positive_windows = score.false_positive_denominator = 0;
  std::size_t majority_ok = 0;
  for (const auto& d : score.detail) {
    score.labeled_violations += d.labeled_violations;
    score.correct += d.correct;
    score.false_negatives += d.false_negatives;
    score.false_positive_windows += d.false_positive_windows;
    score.false_positive_denominator += d.clean_windows + d.labeled_violations + d.unlabeled_violations;
    if (d.labeled_violations > 0) {
      ++score.scored_scenarios;
      majority_ok += d.majority_correct ? 1 : 0;
    }
  }
  if (score.labeled_violations > 0) {
    score.accuracy = static_cast<double>(score.correct) / static_cast<double>(score.labeled_violations);
    score.false_negative_rate = static_cast<double>(score.false_negatives) / static_cast<double>(score.labeled_violations);
  }
  if (score.false_positive_denominator > 0)
    score.false_positive_rate =
        static_cast<double>(score.false_positive_windows) / static_cast<double>(score.false_positive_denominator);
  if (score.scored_scenarios > 0)
    score.scenario_accuracy = static_cast<double>(majority_ok) / static_cast<double>(score.scored_scenarios);
  return score;
}

}  // namespace detail

/// Scores a detector window by window. A labeled violating window is correct
/// when the detector's top-k services (k = number injected) contain every
/// injected service, and a false negative otherwise. A false-positive window
/// is a scored window in which any non-injected service is flagged; clean
/// windows count towards the false-positive denominator with no flags.
inline DetectionScore evaluate(const Detector& detector, const std::vector<ScenarioRun>& runs,
                               const std::string& method = "", unsigned threads = 1) {
  DetectionScore score;
  score.method = method;
  score.scenarios = runs.size();
  score.detail.resize(runs.size());
  detail::parallel_for(runs.size(), threads, [&](std::size_t i) { score.detail[i] = detail::score_run(detector, runs[i]); });
  return detail::finalize(std::move(score));
}

/// Pools per-suite scores of one method into a single score.
inline DetectionScore combine(const std::vector<DetectionScore>& parts, const std::string& method) {
  DetectionScore score;
  score.method = method;
  for (const auto& p : parts) {
    score.scenarios += p.scenarios;
    score.detail.insert(score.detail.end(), p.detail.begin(), p.detail.end());
  }
  return detail::finalize(std::move(score));
}


inline nlohmann::json to_json(const DetectionScore& s, bool with_detail = false) {
  nlohmann::json j{{"method", s.method},
                   {"accuracy", s.accuracy},
                   {"false_positive_rate", s.false_positive_rate},
                   {"false_negative_rate", s.false_negative_rate},
                   {"scenario_accuracy", s.scenario_accuracy},
                   {"scenarios", s.scenarios},
                   {"scored_scenarios", s.scored_scenarios},
                   {"labeled_violations", s.labeled_violations},
                   {"correct", s.correct},
                   {"false_negatives", s.false_negatives},
                   {"false_positive_windows", s.false_positive_windows},
                   {"false_positive_denominator", s.false_positive_denominator}};
  if (with_detail) {
    j["detail"] = nlohmann::json::array();
    for (const auto& d : s.detail)
      j["detail"].push_back({{"scenario", d.scenario},
                             {"labeled_violations", d.labeled_violations},
                             {"correct", d.correct},
                             {"false_negatives", d.false_negatives},
                             {"false_positive_windows", d.false_positive_windows},
                             {"majority", d.majority ? nlohmann::json(*d.majority) : nlohmann::json()},
                             {"majority_correct", d.majority_correct},
                             {"top_metrics", d.top_metrics}});
  }
  return j;
}

/// The injection kind a scenario injects, if it has exactly one.
inline std::optional<GroundTruth> single_truth(const ScenarioRun& run) {
  std::set<GroundTruth> all;
  for (const auto& l : run.labels) all.insert(l.begin(), l.end());
  if (all.size() != 1) return std::nullopt;
  return *all.begin();
}

struct AttributionScore {
  std::size_t located = 0;   // scenarios whose culprit was located in some window
  std::size_t attributed = 0;  // of those, the most frequent top metric matches the injected resource
  double rate = 0;
};

/// Metric-level attribution over scenarios with a correctly located culprit.
inline AttributionScore attribution(const DetectionScore& score, const std::vector<ScenarioRun>& runs) {
  AttributionScore a;
  for (std::size_t i = 0; i < runs.size() && i < score.detail.size(); ++i) {
    const auto truth = single_truth(runs[i]);
    const auto& d = score.detail[i];
    if (!truth || d.top_metrics.empty()) continue;
    ++a.located;
    std::string metric;
    int best = 0;
    for (const auto& [m, c] : d.top_metrics)
      if (c > best) {
        best = c;
        metric = m;
      }
    if (interference_kind(classify_metric(metric)) == truth->kind) ++a.attributed;
  }
  a.rate = a.located ? static_cast<double>(a.attributed) / static_cast<double>(a.located) : 0.0;
  return a;
}

struct CounterfactualCheck {
  std::string scenario;
  double culprit_probability = 0;
  std::optional<std::string> bystander;  // a leaf that is not a causal ancestor of the culprit
  double bystander_probability = 0;
  bool pass = false;
};

/// On the first labeled violating window of each single-injection run:
/// reverting the injected service to normal must clear QoS with probability
/// above tau, and reverting a leaf outside its causal ancestry must not.
inline std::vector<CounterfactualCheck> counterfactual_checks(const GvaeModel& model, const NormalValues& normals,
                                                              const std::vector<ScenarioRun>& runs,
                                                              const RcaConfig& cfg, std::uint64_t seed) {
  std::vector<CounterfactualCheck> out;
  const auto& cbn = model.cbn;
  auto revert = [&](const std::string& svc) {
    Overrides ov;
    for (const auto& m : cbn.metrics(svc)) ov[svc][m] = detail::normal_value(normals, svc, m);
    return ov;
  };
  for (const auto& run : runs) {
    const auto truth = single_truth(run);
    if (!truth) continue;
    std::size_t w = 0;
    while (w < run.samples.size() && (run.samples[w].qos_met || run.labels[w].empty())) ++w;
    if (w == run.samples.size()) continue;
    CounterfactualCheck c;
    c.scenario = run.name;
    Fnv1a h;
    h.update(run.name);
    Rng rng(seed ^ h.digest());
    c.culprit_probability =
        counterfactual_probability(model, run.samples[w], revert(truth->service), run.qos_target_us, cfg.n_samples, rng);
    for (const auto& s : cbn.decode_order) {
      if (s == truth->service || !cbn.child_services(s).empty()) continue;
      if (descendants(cbn, {s}).count(truth->service)) continue;
      c.bystander = s;
      break;
    }
    if (c.bystander)
      c.bystander_probability =
          counterfactual_probability(model, run.samples[w], revert(*c.bystander), run.qos_target_us, cfg.n_samples, rng);
    c.pass = c.culprit_probability > cfg.tau && (!c.bystander || c.bystander_probability <= cfg.tau);
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training a topology for evaluation

struct TrainSettings {
  GvaeHyper hyper;
  RcaConfig rca;
  std::int64_t windows = 2000;
  int epochs = 200;
  std::int64_t calibration_windows = 200;
};

/// Reads the optional "gvae", "rca" and "train" blocks of a topology config.
inline TrainSettings settings_from_config(const nlohmann::json& config) {
  TrainSettings s;
  if (config.contains("gvae")) s.hyper = hyper_from_json(config.at("gvae"));
  if (config.contains("rca")) s.rca = rca_config_from_json(config.at("rca"));
  if (config.contains("train")) {
    const auto& t = config.at("train");
    s.windows = t.value("windows", s.windows);
    s.epochs = t.value("epochs", s.epochs);
    s.calibration_windows = t.value("calibration_windows", s.calibration_windows);
  }
  s.hyper.percentiles = config.value("percentiles", s.hyper.percentiles);
  require(s.windows >= 1 && s.epochs >= 0, ErrorKind::kInvalidConfig, "train windows/epochs out of range");
  return s;
}

struct TrainedTopology {
  SuiteSpec spec;
  TrainSettings settings;
  double qos_target_us = 0;
  ScenarioRun training;  // random-injection history the model and oracle are fitted on
  NormalValues normals;
  GvaeModel model;
  TrainLog log;
};

/// Calibrates QoS (unless the config fixes it), simulates a random-injection
/// history, and trains a model on its class-balanced windows.
inline TrainedTopology train_topology(const SuiteSpec& spec, const TrainSettings& settings, std::uint64_t seed) {
  TrainedTopology t;
  t.spec = spec;
  t.settings = settings;
  t.qos_target_us = spec.topology.value("qos_target_us", 0.0);
  if (t.qos_target_us <= 0)
    t.qos_target_us = calibrate_qos(spec.topology, spec.cluster_seed, settings.calibration_windows, seed ^ 0xca11b8);
  Rng rng(seed);
  auto cluster = make_cluster(spec.topology, spec.cluster_seed);
  Scenario history;
  history.name = spec.name + "/training";
  history.topology = spec.topology;
  history.cluster_seed = spec.cluster_seed;
  history.n_windows = settings.windows;
  history.schedule = random_schedule(cluster, settings.windows, rng);
  history.seed = rng.next();
  t.training = run_scenario(history, t.qos_target_us);
  t.normals = compute_normal_values(t.training.samples);
  auto hyper = settings.hyper;
  hyper.percentiles = cluster.config().percentiles;
  t.model = init_gvae(cluster.cbn(), hyper, rng);
  const auto balanced = balance(t.training.samples, rng).samples;
  t.log = train(t.model, balanced, settings.epochs, rng);
  return t;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingReport {
  double train_seconds = 0;
  int epochs = 0;
  std::size_t train_windows = 0;
  double inference_ms_per_window = 0;
  std::size_t inference_windows = 0;
  nlohmann::json environment;
};

inline nlohmann::json environment_info() {
  nlohmann::json env;
#ifdef __VERSION__
  env["compiler"] = __VERSION__;
#endif
#ifdef NDEBUG
  env["build"] = "release";
#else
  env["build"] = "debug";
#endif
  env["hardware_threads"] = std::thread::hardware_concurrency();
  env["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                 std::to_string(EIGEN_MINOR_VERSION);
  return env;
}

/// Wall-clock training time of a copy of `model` over the samples, then mean
/// diagnosis time over up to `max_windows` of them (violating ones first).
inline TimingReport measure_timing(const GvaeModel& model, const std::vector<WindowSample>& samples,
                                   const NormalValues& normals, double qos_target_us, int epochs, const RcaConfig& cfg,
                                   Rng& rng, std::size_t max_windows = 20) {
  require(!samples.empty(), ErrorKind::kPrecondition, "timing needs a nonempty dataset");
  TimingReport r;
  r.epochs = epochs;
  r.train_windows = samples.size();
  r.environment = environment_info();
  auto copy = model;
  const auto t0 = std::chrono::steady_clock::now();
  train(copy, samples, epochs, rng);
  r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::vector<const WindowSample*> picks;
  for (const auto& s : samples)
    if (!s.qos_met && picks.size() < max_windows) picks.push_back(&s);
  for (const auto& s : samples)
    if (s.qos_met && picks.size() < max_windows) picks.push_back(&s);
  auto forced = cfg;
  forced.force = true;
  const auto t1 = std::chrono::steady_clock::now();
  for (const auto* s : picks) diagnose(copy, *s, normals, qos_target_us, forced, rng);
  const double total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count();
  r.inference_windows = picks.size();
  r.inference_ms_per_window = total / static_cast<double>(picks.size());
  return r;
}

inline nlohmann::json to_json(const TimingReport& r) {
  return {{"train_seconds", r.train_seconds},
          {"epochs", r.epochs},
          {"train_windows", r.train_windows},
          {"inference_ms_per_window", r.inference_ms_per_window},
          {"inference_windows", r.inference_windows},
          {"environment", r.environment}};
}

// ---------------------------------------------------------------------------
// Reports and plots

inline void write_scores_csv(const std::filesystem::path& path, const std::vector<DetectionScore>& scores) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out << "method,accuracy,false_positive_rate,false_negative_rate,scenario_accuracy,labeled_violations\n";
  for (const auto& s : scores)
    out << s.method << ',' << s.accuracy << ',' << s.false_positive_rate << ',' << s.false_negative_rate << ','
        << s.scenario_accuracy << ',' << s.labeled_violations << '\n';
}

/// Grouped bars of accuracy, false-positive and false-negative rate per method.
inline void write_scores_svg(const std::filesystem::path& path, const std::vector<DetectionScore>& scores) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  const int group_w = 150, bar_w = 36, h = 220, top = 30, left = 50;
  const int width = left + group_w * static_cast<int>(scores.size()) + 20;
  const char* colors[] = {"#4472c4", "#ed7d31", "#a5a5a5"};
  const char* names[] = {"accuracy", "false positives", "false negatives"};
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << h + top + 60
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top + h << "\" x2=\"" << width - 10 << "\" y2=\"" << top + h
      << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const int y = top + h - tick * h / 4;
    out << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick * 25 << "%</text>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - 10 << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double vals[] = {scores[i].accuracy, scores[i].false_positive_rate, scores[i].false_negative_rate};
    const int x0 = left + 15 + group_w * static_cast<int>(i);
    for (int k = 0; k < 3; ++k) {
      const int bh = static_cast<int>(std::lround(vals[k] * h));
      out << "<rect x=\"" << x0 + k * (bar_w + 4) << "\" y=\"" << top + h - bh << "\" width=\"" << bar_w
          << "\" height=\"" << bh << "\" fill=\"" << colors[k] << "\"/>\n";
    }
    out << "<text x=\"" << x0 + (3 * bar_w + 8) / 2 << "\" y=\"" << top + h + 16 << "\" text-anchor=\"middle\">"
        << scores[i].method << "</text>\n";
  }
  for (int k = 0; k < 3; ++k)
    out << "<rect x=\"" << left + 120 * k << "\" y=\"" << top + h + 32 << "\" width=\"10\" height=\"10\" fill=\""
        << colors[k] << "\"/><text x=\"" << left + 120 * k + 14 << "\" y=\"" << top + h + 41 << "\">" << names[k]
        << "</text>\n";
  out << "</svg>\n";
}

inline void write_timeline_csv(const std::filesystem::path& path, const EpisodeLog& log) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out << "window,e2e_p99_us,qos_target_us,qos_met,culprit,action\n";
  for (const auto& r : log.records) {
    const auto* top = r.report ? r.report->top() : nullptr;
    out << r.window << ',' << r.e2e_p99_us << ',' << log.qos_target_us << ',' << (r.qos_met ? 1 : 0) << ','
        << (top ? top->service : "") << ',' << (r.action ? std::string(to_string(r.action->kind)) : "") << '\n';
  }
}

/// Tail latency against time with the QoS target and issued actions marked.
inline void write_timeline_svg(const std::filesystem::path& path, const EpisodeLog& log) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  const int w = 640, h = 260, left = 60, top = 20;
  double ymax = log.qos_target_us;
  for (const auto& r : log.records) ymax = std::max(ymax, r.e2e_p99_us);
  ymax = ymax > 0 ? ymax * 1.1 : 1.0;
  const auto n = std::max<std::size_t>(2, log.records.size());
  auto px = [&](std::size_t i) { return left + static_cast<double>(i) * (w - left - 20) / static_cast<double>(n - 1); };
  auto py = [&](double v) { return top + h - v / ymax * h; };
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h + top + 40
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top + h << "\" x2=\"" << w - 10 << "\" y2=\"" << top + h
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << left - 6 << "\" y=\"" << top + 10 << "\" text-anchor=\"end\">" << std::lround(ymax / 1000)
      << "ms</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << py(log.qos_target_us) << "\" x2=\"" << w - 10 << "\" y2=\""
      << py(log.qos_target_us) << "\" stroke=\"red\" stroke-dasharray=\"4 3\"/>\n";
  out << "<polyline fill=\"none\" stroke=\"#4472c4\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < log.records.size(); ++i) out << px(i) << ',' << py(log.records[i].e2e_p99_us) << ' ';
  out << "\"/>\n";
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    if (!r.action) continue;
    out << "<circle cx=\"" << px(i) << "\" cy=\"" << py(r.e2e_p99_us) << "\" r=\"4\" fill=\"#ed7d31\"/>\n";
    out << "<text x=\"" << px(i) + 5 << "\" y=\"" << py(r.e2e_p99_us) - 6 << "\">" << to_string(r.action->kind) << " "
        << r.action->service << "</text>\n";
  }
  out << "<text x=\"" << (left + w) / 2 << "\" y=\"" << top + h + 30 << "\" text-anchor=\"middle\">window</text>\n";
  out << "</svg>\n";
}

}  // namespace sage
