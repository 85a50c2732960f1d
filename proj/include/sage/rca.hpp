#pragma once

// Two-level counterfactual root cause analysis: which services, then which
// of their metrics, would have kept the window within QoS had they been at
// their normal values.

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sage/dataset.hpp"
#include "sage/gvae.hpp"

namespace sage {

struct RcaConfig {
  double tau = 0.9;
  std::size_t n_samples = 100;
  std::size_t max_culprits = 3;
  bool force = false;  // allow diagnosing windows that meet QoS

  void check() const {
    require(tau > 0 && tau < 1, ErrorKind::kInvalidConfig, "tau must lie in (0,1)");
    require(n_samples >= 1, ErrorKind::kInvalidConfig, "n_samples must be >= 1");
    require(max_culprits >= 1, ErrorKind::kInvalidConfig, "max_culprits must be >= 1");
  }
};

inline nlohmann::json to_json(const RcaConfig& c) {
  return {{"tau", c.tau}, {"n_samples", c.n_samples}, {"max_culprits", c.max_culprits}, {"force", c.force}};
}

inline RcaConfig rca_config_from_json(const nlohmann::json& j) {
  RcaConfig c;
  c.tau = j.value("tau", c.tau);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.max_culprits = j.value("max_culprits", c.max_culprits);
  c.force = j.value("force", c.force);
  c.check();
  return c;
}

/// Outcome of one intervention: share of draws meeting QoS, and the mean
/// decoded tail latency used to order equally likely candidates.
struct Probe {
  std::string name;
  double probability = 0;
  double mean_e2e_us = 0;
};

inline bool probe_before(const Probe& a, const Probe& b) {
  if (a.probability != b.probability) return a.probability > b.probability;
  if (a.mean_e2e_us != b.mean_e2e_us) return a.mean_e2e_us < b.mean_e2e_us;
  return a.name < b.name;
}

namespace detail {

// Every probe of one diagnosis replays the same random stream, so candidates
// are compared under common latent draws.
inline Probe run_probe(const GvaeModel& m, const WindowSample& sample, const Overrides& overrides, double qos,
                       std::size_t n, std::uint64_t seed, std::string name) {
  Rng rng(seed);
  const auto d = decode_draws(m, sample, ZMode::kPosteriorSample, overrides, n, rng);
  Probe p;
  p.name = std::move(name);
  std::size_t met = 0;
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = d.e2e(static_cast<Eigen::Index>(i));
    if (e <= qos) ++met;
    sum += e;
  }
  p.probability = static_cast<double>(met) / static_cast<double>(n);
  p.mean_e2e_us = sum / static_cast<double>(n);
  return p;
}

inline void check_window(const WindowSample& sample, double qos, const RcaConfig& cfg) {
  cfg.check();
  require(cfg.force || sample.e2e_p99_us > qos, ErrorKind::kPrecondition,
          "window " + std::to_string(sample.window_index) + " meets QoS; nothing to diagnose");
}

inline double normal_value(const NormalValues& normals, const std::string& service, const std::string& metric) {
  auto s = normals.find(service);
  require(s != normals.end(), ErrorKind::kInsufficientBaseline, "no normal values for service '" + service + "'");
  auto m = s->second.find(metric);
  require(m != s->second.end(), ErrorKind::kInsufficientBaseline,
          "no normal value for metric '" + metric + "' of '" + service + "'");
  return m->second;
}

}  // namespace detail

/// Probability of meeting QoS with no intervention.
inline Probe baseline_probe(const GvaeModel& m, const WindowSample& sample, double qos, const RcaConfig& cfg,
                            std::uint64_t seed) {
  return detail::run_probe(m, sample, {}, qos, cfg.n_samples, seed, "");
}

/// Every service's service-level probe, best first.
inline std::vector<Probe> service_probes(const GvaeModel& m, const WindowSample& sample, const NormalValues& normals,
                                         double qos, const RcaConfig& cfg, std::uint64_t seed) {
  std::vector<Probe> out;
  for (const auto& s : m.cbn.decode_order) {
    Overrides ov;
    for (const auto& metric : m.cbn.metrics(s)) ov[s][metric] = detail::normal_value(normals, s, metric);
    out.push_back(detail::run_probe(m, sample, ov, qos, cfg.n_samples, seed, s));
  }
  std::sort(out.begin(), out.end(), probe_before);
  return out;
}

/// Services whose reversion to normal values clears QoS with probability above tau.
/// Nothing is returned when the unmodified window already clears it.
inline std::vector<Probe> diagnose_services(const GvaeModel& m, const WindowSample& sample, const NormalValues& normals,
                                            double qos, const RcaConfig& cfg, Rng& rng) {
  detail::check_window(sample, qos, cfg);
  const std::uint64_t seed = rng.next();
  auto probes = service_probes(m, sample, normals, qos, cfg, seed);
  if (baseline_probe(m, sample, qos, cfg, seed).probability > cfg.tau) return {};
  std::vector<Probe> out;
  for (auto& p : probes)
    if (p.probability > cfg.tau) out.push_back(std::move(p));
  return out;
}

struct MetricDiagnosis {
  std::vector<Probe> metrics;
  bool low_confidence = false;
};

inline MetricDiagnosis diagnose_metrics_seeded(const GvaeModel& m, const WindowSample& sample,
                                               const std::string& service, const NormalValues& normals, double qos,
                                               const RcaConfig& cfg, std::uint64_t seed) {
  require(m.cbn.has_service(service), ErrorKind::kLookup, "unknown service '" + service + "'");
  std::vector<Probe> probes;
  for (const auto& metric : m.cbn.metrics(service)) {
    const double normal = detail::normal_value(normals, service, metric);
    const auto xs = sample.x.find(service);
    require(xs != sample.x.end() && xs->second.count(metric), ErrorKind::kLookup,
            "sample lacks metric '" + metric + "' of '" + service + "'");
    if (xs->second.at(metric) == normal) continue;  // already normal: a no-op intervention
    probes.push_back(detail::run_probe(m, sample, {{service, {{metric, normal}}}}, qos, cfg.n_samples, seed, metric));
  }
  std::sort(probes.begin(), probes.end(), probe_before);
  MetricDiagnosis d;
  for (const auto& p : probes)
    if (p.probability > cfg.tau) d.metrics.push_back(p);
  if (d.metrics.empty()) {
    d.low_confidence = true;
    if (!probes.empty()) d.metrics.push_back(probes.front());
  }
  return d;
}

/// Metrics of a culprit service ranked by how well reverting each alone clears QoS.
inline MetricDiagnosis diagnose_metrics(const GvaeModel& m, const WindowSample& sample, const std::string& service,
                                        const NormalValues& normals, double qos, const RcaConfig& cfg, Rng& rng) {
  detail::check_window(sample, qos, cfg);
  return diagnose_metrics_seeded(m, sample, service, normals, qos, cfg, rng.next());
}

struct Culprit {
  std::string service;
  double probability = 0;
  std::vector<Probe> metrics;
  bool low_confidence = false;
};

struct RootCauseReport {
  std::int64_t window_index = 0;
  double e2e_p99_us = 0;
  double qos_target_us = 0;
  double baseline_probability = 0;
  std::vector<Culprit> culprits;
  bool no_single_service_culprit = false;
  RcaConfig config;

  const Culprit* top() const { return culprits.empty() ? nullptr : &culprits.front(); }
};

inline RootCauseReport diagnose(const GvaeModel& m, const WindowSample& sample, const NormalValues& normals, double qos,
                                const RcaConfig& cfg, Rng& rng) {
  detail::check_window(sample, qos, cfg);
  const std::uint64_t seed = rng.next();
  RootCauseReport r;
  r.window_index = sample.window_index;
  r.e2e_p99_us = sample.e2e_p99_us;
  r.qos_target_us = qos;
  r.config = cfg;
  r.baseline_probability = baseline_probe(m, sample, qos, cfg, seed).probability;
  if (r.baseline_probability <= cfg.tau) {
    for (const auto& p : service_probes(m, sample, normals, qos, cfg, seed)) {
      if (p.probability <= cfg.tau || r.culprits.size() >= cfg.max_culprits) break;
      auto md = diagnose_metrics_seeded(m, sample, p.name, normals, qos, cfg, seed);
      r.culprits.push_back({p.name, p.probability, std::move(md.metrics), md.low_confidence});
    }
  }
  r.no_single_service_culprit = r.culprits.empty() && sample.e2e_p99_us > qos;
  return r;
}

inline nlohmann::json to_json(const RootCauseReport& r) {
  nlohmann::json culprits = nlohmann::json::array();
  for (const auto& c : r.culprits) {
    nlohmann::json metrics = nlohmann::json::array();
    for (const auto& m : c.metrics) metrics.push_back({{"metric", m.name}, {"probability", m.probability}});
    culprits.push_back({{"service", c.service},
                        {"probability", c.probability},
                        {"metrics", metrics},
                        {"low_confidence", c.low_confidence}});
  }
  return {{"window_index", r.window_index},
          {"e2e_p99_us", r.e2e_p99_us},
          {"qos_target_us", r.qos_target_us},
          {"baseline_probability", r.baseline_probability},
          {"culprits", culprits},
          {"no_single_service_culprit", r.no_single_service_culprit},
          {"config", to_json(r.config)}};
}

inline std::string render(const RootCauseReport& r) {
  std::ostringstream out;
  out << "window " << r.window_index << ": p99 " << static_cast<long long>(std::llround(r.e2e_p99_us)) << " us, target "
      << static_cast<long long>(std::llround(r.qos_target_us)) << " us\n";
  out << "baseline P(QoS met) = " << r.baseline_probability << " (tau " << r.config.tau << ", "
      << r.config.n_samples << " samples)\n";
  if (r.culprits.empty()) {
    out << (r.no_single_service_culprit ? "no single-service culprit\n" : "no culprits\n");
    return out.str();
  }
  for (std::size_t i = 0; i < r.culprits.size(); ++i) {
    const auto& c = r.culprits[i];
    out << i + 1 << ". " << c.service << "  P = " << c.probability << (c.low_confidence ? "  (low confidence)" : "")
        << '\n';
    for (const auto& m : c.metrics) out << "     " << m.name << "  P = " << m.probability << '\n';
  }
  return out.str();
}

/// Majority top culprit over the violating windows of an episode; ties go to
/// the most recent window's answer.
inline std::optional<std::string> majority_culprit(const std::vector<RootCauseReport>& reports) {
  std::map<std::string, int> votes;
  for (const auto& r : reports)
    if (const auto* t = r.top()) ++votes[t->service];
  if (votes.empty()) return std::nullopt;
  int best = 0;
  for (const auto& [s, v] : votes) best = std::max(best, v);
  for (auto it = reports.rbegin(); it != reports.rend(); ++it)
    if (const auto* t = it->top(); t && votes[t->service] == best) return t->service;
  return std::nullopt;
}

}  // namespace sage
