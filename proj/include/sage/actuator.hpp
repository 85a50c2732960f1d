#pragma once

// Maps diagnosed (service, metric) causes to corrective actions and runs the
// closed loop against a simulated cluster, escalating local-first.

#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sage/dataset.hpp"
#include "sage/gvae.hpp"
#include "sage/rca.hpp"
#include "sage/simulator.hpp"

namespace sage {

enum class ResourceClass { kCpu, kMemory, kDisk, kCache, kNetwork, kOther };

inline const char* to_string(ResourceClass c) {
  switch (c) {
    case ResourceClass::kCpu: return "cpu";
    case ResourceClass::kMemory: return "memory";
    case ResourceClass::kDisk: return "disk";
    case ResourceClass::kCache: return "cache";
    case ResourceClass::kNetwork: return "network";
    case ResourceClass::kOther: return "other";
  }
  return "other";
}

inline ResourceClass classify_metric(const std::string& metric) {
  if (channel_of(metric)) return ResourceClass::kNetwork;
  if (metric == "cpu_util") return ResourceClass::kCpu;
  if (metric == "mem_util") return ResourceClass::kMemory;
  if (metric == "disk_util") return ResourceClass::kDisk;
  if (metric == "cache_pressure") return ResourceClass::kCache;
  if (metric == "net_util") return ResourceClass::kNetwork;
  return ResourceClass::kOther;
}

/// The injection kind whose contention a resource class points at, if any.
inline std::optional<InjectionKind> interference_kind(ResourceClass c) {
  switch (c) {
    case ResourceClass::kCpu: return InjectionKind::kCpu;
    case ResourceClass::kMemory: return InjectionKind::kMemory;
    case ResourceClass::kDisk: return InjectionKind::kDiskIo;
    case ResourceClass::kNetwork: return InjectionKind::kNetwork;
    default: return std::nullopt;
  }
}

/// Escalation ladder, most local first. Rate limiting of collocated jobs is
/// tried first when the window shows an interference signature.
inline std::vector<ActionKind> escalation_ladder(ResourceClass c, bool interference) {
  std::vector<ActionKind> out;
  if (interference) out.push_back(ActionKind::kRateLimitInterference);
  switch (c) {
    case ResourceClass::kCpu:
      out.insert(out.end(), {ActionKind::kCpuFreqBoost, ActionKind::kScaleUpCpu, ActionKind::kScaleOut,
                             ActionKind::kMigrate});
      break;
    case ResourceClass::kMemory:
      out.insert(out.end(), {ActionKind::kScaleUpMem, ActionKind::kScaleOut, ActionKind::kMigrate});
      break;
    case ResourceClass::kDisk: out.insert(out.end(), {ActionKind::kScaleOut, ActionKind::kMigrate}); break;
    case ResourceClass::kCache:
      out.insert(out.end(), {ActionKind::kCachePartition, ActionKind::kScaleOut, ActionKind::kMigrate});
      break;
    case ResourceClass::kNetwork: out.insert(out.end(), {ActionKind::kNetPartition, ActionKind::kMigrate}); break;
    case ResourceClass::kOther: out.insert(out.end(), {ActionKind::kScaleOut, ActionKind::kMigrate}); break;
  }
  return out;
}

struct ActuatorConfig {
  RcaConfig rca;
  int cooldown_windows = 1;
  double interference_util = 0.75;  // culprit metric level that counts as "high"
  double flat_load_tolerance = 0.15;  // max relative spread of recent offered load
  std::size_t load_history = 3;
  std::optional<std::string> forced_culprit;  // bypass diagnosis (negative controls)
  std::string forced_metric = "cpu_util";
};

/// Per-(service, metric) ladder position; only ever moves forward.
struct EscalationState {
  struct Entry {
    std::vector<ActionKind> ladder;
    std::size_t next = 0;
  };
  std::map<std::pair<std::string, std::string>, Entry> entries;
};

struct SignalContext {
  std::vector<double> recent_load_rps;  // oldest first, current window last
  std::optional<double> culprit_metric_value;
};

inline bool interference_signature(const SignalContext& ctx, const ActuatorConfig& cfg) {
  if (!ctx.culprit_metric_value || *ctx.culprit_metric_value <= cfg.interference_util) return false;
  if (ctx.recent_load_rps.size() < 2) return false;
  const auto [lo, hi] = std::minmax_element(ctx.recent_load_rps.begin(), ctx.recent_load_rps.end());
  return *lo > 0 && (*hi - *lo) / *lo <= cfg.flat_load_tolerance;
}

/// Whether an action can take effect on the cluster as it stands.
inline bool action_admissible(const Action& a, const Cluster& cluster) {
  const auto& s = cluster.service(a.service);
  const auto& caps = cluster.config().caps;
  switch (a.kind) {
    case ActionKind::kCpuFreqBoost: return s.cpu_freq_scale < 1.0;
    case ActionKind::kScaleUpCpu: return s.cpu_capacity < caps.max_cpu_capacity;
    case ActionKind::kScaleUpMem: return s.mem_capacity < caps.max_mem_capacity;
    case ActionKind::kScaleOut: return s.replicas + 1 <= caps.max_replicas;
    case ActionKind::kRateLimitInterference:
      for (const auto& inj : s.injected)
        if ((!a.interference || inj.kind == *a.interference) && inj.intensity > 0) return true;
      return false;
    case ActionKind::kCachePartition: return s.cache_ways < caps.max_cache_ways;
    case ActionKind::kNetPartition: return s.net_bandwidth < caps.max_net_bandwidth;
    case ActionKind::kMigrate: return true;
  }
  return false;
}

inline Action make_action(const std::string& service, ActionKind kind, ResourceClass c) {
  auto a = Action::make(service, kind);
  if (kind == ActionKind::kRateLimitInterference) a.interference = interference_kind(c);
  return a;
}

/// Next admissible rung of the ladder for the report's top culprit and metric.
/// Advances the state past every rung it considers.
inline std::optional<Action> select_action(const RootCauseReport& report, const Cluster& cluster,
                                           EscalationState& state, const SignalContext& ctx,
                                           const ActuatorConfig& cfg) {
  const auto* top = report.top();
  if (!top) return std::nullopt;
  const std::string metric = top->metrics.empty() ? std::string() : top->metrics.front().name;
  const auto rc = classify_metric(metric);
  auto key = std::make_pair(top->service, metric);
  auto it = state.entries.find(key);
  if (it == state.entries.end())
    it = state.entries.emplace(key, EscalationState::Entry{escalation_ladder(rc, interference_signature(ctx, cfg)), 0})
             .first;
  auto& e = it->second;
  while (e.next < e.ladder.size()) {
    auto a = make_action(top->service, e.ladder[e.next], rc);
    ++e.next;
    if (action_admissible(a, cluster)) return a;
  }
  return std::nullopt;
}

inline std::optional<Action> select_action(const RootCauseReport& report, const Cluster& cluster) {
  EscalationState state;
  return select_action(report, cluster, state, {}, ActuatorConfig{});
}

// ---------------------------------------------------------------------------
// Closed loop

struct EpisodeRecord {
  std::int64_t window = 0;
  double offered_load_rps = 0;
  double e2e_p99_us = 0;
  bool qos_met = true;
  bool cooldown = false;
  std::optional<RootCauseReport> report;
  std::optional<Action> action;
  std::optional<ActionOutcome> outcome;
  std::size_t ladder_step = 0;  // 1-based rung of the issued action
  std::string note;
};

struct EpisodeLog {
  double qos_target_us = 0;
  std::vector<EpisodeRecord> records;

  std::size_t action_count() const {
    std::size_t n = 0;
    for (const auto& r : records)
      if (r.action && r.outcome == ActionOutcome::kApplied) ++n;
    return n;
  }

  /// Index of the first window with a diagnosed culprit.
  std::optional<std::size_t> first_diagnosis() const {
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].report && records[i].report->top()) return i;
    return std::nullopt;
  }

  /// True when some window within `horizon` windows after the first diagnosis meets QoS.
  bool recovered_within(std::size_t horizon) const {
    const auto d = first_diagnosis();
    if (!d) return false;
    for (std::size_t i = *d + 1; i < records.size() && i <= *d + horizon; ++i)
      if (records[i].qos_met) return true;
    return false;
  }
};

inline nlohmann::json to_json(const Action& a) {
  nlohmann::json j{{"service", a.service}, {"kind", to_string(a.kind)}, {"magnitude", a.magnitude}};
  if (a.interference) j["interference"] = to_string(*a.interference);
  return j;
}

inline nlohmann::json to_json(const EpisodeRecord& r) {
  nlohmann::json j{{"window", r.window},
                   {"offered_load_rps", r.offered_load_rps},
                   {"e2e_p99_us", r.e2e_p99_us},
                   {"qos_met", r.qos_met},
                   {"cooldown", r.cooldown}};
  if (r.report) j["report"] = to_json(*r.report);
  if (r.action) {
    j["action"] = to_json(*r.action);
    j["outcome"] = r.outcome == ActionOutcome::kApplied ? "applied" : "cap-exceeded";
    j["ladder_step"] = r.ladder_step;
  }
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

inline void write_episode_log(const std::string& path, const EpisodeLog& log) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path);
  for (const auto& r : log.records) out << to_json(r).dump() << '\n';
}

/// Runs `max_windows` windows of the schedule (whose injections must already
/// be installed): aggregate, diagnose on violation, act, cool down.
inline EpisodeLog control_loop(const GvaeModel& model, Cluster& cluster, const Schedule& schedule,
                               const NormalValues& normals, double qos_target_us, const ActuatorConfig& cfg, Rng& rng,
                               std::int64_t max_windows) {
  EpisodeLog log;
  log.qos_target_us = qos_target_us;
  EscalationState state;
  std::deque<double> loads;
  int cooldown = 0;
  const auto& pcts = model.hyper.percentiles;
  for (std::int64_t i = 0; i < max_windows; ++i) {
    const double load = scheduled_load(cluster, schedule, rng);
    const auto trace = cluster.step_window(load, rng);
    const auto sample = aggregate(trace, qos_target_us, pcts);
    loads.push_back(load);
    while (loads.size() > cfg.load_history) loads.pop_front();

    EpisodeRecord rec;
    rec.window = trace.window_index;
    rec.offered_load_rps = load;
    rec.e2e_p99_us = sample.e2e_p99_us;
    rec.qos_met = sample.qos_met;
    if (sample.qos_met) {
      cooldown = std::max(0, cooldown - 1);
      log.records.push_back(std::move(rec));
      continue;
    }
    if (cooldown > 0) {
      --cooldown;
      rec.cooldown = true;
      log.records.push_back(std::move(rec));
      continue;
    }
    RootCauseReport report;
    if (cfg.forced_culprit) {
      report.window_index = sample.window_index;
      report.e2e_p99_us = sample.e2e_p99_us;
      report.qos_target_us = qos_target_us;
      report.config = cfg.rca;
      report.culprits.push_back({*cfg.forced_culprit, 1.0, {{cfg.forced_metric, 1.0, 0.0}}, false});
      rec.note = "forced culprit";
    } else {
      report = diagnose(model, sample, normals, qos_target_us, cfg.rca, rng);
    }
    SignalContext ctx;
    ctx.recent_load_rps.assign(loads.begin(), loads.end());
    if (const auto* top = report.top(); top && !top->metrics.empty()) {
      auto xs = sample.x.find(top->service);
      if (xs != sample.x.end()) {
        auto v = xs->second.find(top->metrics.front().name);
        if (v != xs->second.end()) ctx.culprit_metric_value = v->second;
      }
    }
    auto action = select_action(report, cluster, state, ctx, cfg);
    if (action) {
      const auto& top = *report.top();
      const auto& entry = state.entries.at({top.service, top.metrics.empty() ? std::string() : top.metrics.front().name});
      rec.ladder_step = entry.next;
      rec.outcome = cluster.apply_action(*action);
      rec.action = action;
      if (rec.outcome == ActionOutcome::kApplied) cooldown = cfg.cooldown_windows;
    } else if (report.top()) {
      rec.note = rec.note.empty() ? "escalation ladder exhausted" : rec.note + "; escalation ladder exhausted";
    } else {
      rec.note = "no culprit";
    }
    rec.report = std::move(report);
    log.records.push_back(std::move(rec));
  }
  return log;
}

}  // namespace sage
