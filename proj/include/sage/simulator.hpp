#pragma once

// Deterministic synthetic microservice cluster. Emits per-request RPC timings
// (and the equivalent spans) plus per-service and per-channel resource metrics
// under open-loop load, with contention injection and actuation knobs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sage/common.hpp"
#include "sage/topology.hpp"

namespace sage {

enum class InjectionKind { kCpu, kMemory, kDiskIo, kNetwork };

inline const char* to_string(InjectionKind k) {
  switch (k) {
    case InjectionKind::kCpu: return "cpu";
    case InjectionKind::kMemory: return "memory";
    case InjectionKind::kDiskIo: return "disk_io";
    case InjectionKind::kNetwork: return "network";
  }
  return "?";
}

inline InjectionKind parse_injection_kind(const std::string& s) {
  if (s == "cpu") return InjectionKind::kCpu;
  if (s == "memory") return InjectionKind::kMemory;
  if (s == "disk_io" || s == "disk") return InjectionKind::kDiskIo;
  if (s == "network") return InjectionKind::kNetwork;
  fail(ErrorKind::kInvalidConfig, "unknown injection kind '" + s + "'");
}

inline constexpr InjectionKind kAllInjectionKinds[] = {InjectionKind::kCpu, InjectionKind::kMemory,
                                                       InjectionKind::kDiskIo, InjectionKind::kNetwork};

struct Injection {
  InjectionKind kind = InjectionKind::kCpu;
  double intensity = 0.0;  // fraction of the reference capacity consumed
  std::int64_t start_window = 0;
  std::int64_t end_window = 0;  // inclusive

  bool active(std::int64_t w) const { return w >= start_window && w <= end_window; }
};

inline const std::vector<std::string>& service_metric_names() {
  static const std::vector<std::string> names{"cpu_util", "mem_util", "disk_util", "net_util", "cache_pressure"};
  return names;
}

inline const std::vector<std::string>& channel_metric_names() {
  static const std::vector<std::string> names{"net_util", "rtt"};
  return names;
}

struct ServiceState {
  std::string service;
  int replicas = 1;
  double cpu_capacity = 1000.0;  // request-equivalents per second per replica
  double cpu_freq_scale = 0.8;
  double mem_capacity = 1.0;
  int cache_ways = 10;
  double net_bandwidth = 1000.0;  // inbound channel
  double base_proc_us = 400.0;
  std::vector<Injection> injected;

  // Workload profile.
  double cpu_cost = 1.0;  // capacity units per request/s
  double mem_base = 0.3;
  double disk_base = 0.1;
  double cache_base = 0.3;
  double net_cost = 1.0;

  // Interference is absolute: sized against the capacities the service started with.
  double ref_cpu_capacity = 1000.0;
  double ref_mem_capacity = 1.0;
  double ref_net_bandwidth = 1000.0;

  bool migrated = false;
};

struct NodeCaps {
  double max_cpu_capacity = 3000.0;
  double max_mem_capacity = 4.0;
  int max_cache_ways = 20;
  double max_net_bandwidth = 8000.0;
  int max_replicas = 8;
  int spare_nodes = 4;
};

struct SimParams {
  double load_rps = 200.0;
  double load_noise = 0.05;  // per-window multiplicative jitter used by schedules
  int requests_per_window = 1000;
  double window_seconds = 30.0;
  double latency_gain = 1.0;  // k in the u/(1-u) inflation
  double proc_jitter = 0.4;   // lognormal sigma of per-request processing time
  double net_jitter = 0.3;
  double net_base_us = 150.0;  // one-way channel delay at zero utilization
  double net_gain = 1.0;
  double background_max = 0.1;  // independent per-window background demand per service
  double mem_gain = 0.5;
  double disk_gain = 2.0;
  double cache_gain = 0.5;
  std::int64_t epoch_us = 1'700'000'000'000'000;
};

struct TopologyConfig {
  std::string name;
  RpcGraph graph;
  std::vector<ServiceState> services;  // one per callee service
  SimParams sim;
  NodeCaps caps;
  double qos_target_us = 0.0;
  std::vector<double> percentiles{50.0, 95.0};
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Actions

enum class ActionKind {
  kCpuFreqBoost,
  kScaleUpCpu,
  kScaleUpMem,
  kScaleOut,
  kRateLimitInterference,
  kCachePartition,
  kNetPartition,
  kMigrate,
};

inline const char* to_string(ActionKind k) {
  switch (k) {
    case ActionKind::kCpuFreqBoost: return "CpuFreqBoost";
    case ActionKind::kScaleUpCpu: return "ScaleUpCpu";
    case ActionKind::kScaleUpMem: return "ScaleUpMem";
    case ActionKind::kScaleOut: return "ScaleOut";
    case ActionKind::kRateLimitInterference: return "RateLimitInterference";
    case ActionKind::kCachePartition: return "CachePartition";
    case ActionKind::kNetPartition: return "NetPartition";
    case ActionKind::kMigrate: return "Migrate";
  }
  return "?";
}

/// Default step per kind: frequency increment, capacity factor, replica count,
/// rate-limit factor, cache ways, bandwidth factor, migration count.
inline double default_magnitude(ActionKind k) {
  switch (k) {
    case ActionKind::kCpuFreqBoost: return 0.2;
    case ActionKind::kScaleUpCpu: return 2.0;
    case ActionKind::kScaleUpMem: return 2.0;
    case ActionKind::kScaleOut: return 1.0;
    case ActionKind::kRateLimitInterference: return 0.5;
    case ActionKind::kCachePartition: return 4.0;
    case ActionKind::kNetPartition: return 2.0;
    case ActionKind::kMigrate: return 1.0;
  }
  return 1.0;
}

struct Action {
  std::string service;
  ActionKind kind = ActionKind::kScaleOut;
  double magnitude = 1.0;
  std::optional<InjectionKind> interference;  // rate limiting only; all kinds when unset

  static Action make(std::string service, ActionKind kind) {
    return Action{std::move(service), kind, default_magnitude(kind), std::nullopt};
  }
};

enum class ActionOutcome { kApplied, kCapExceeded };

// ---------------------------------------------------------------------------
// Window output

struct RpcTiming {
  std::int64_t start_us = 0;  // client-side start
  std::int64_t req_us = 0;
  std::int64_t server_us = 0;
  std::int64_t resp_us = 0;
  std::int64_t proc_us = 0;  // callee's own processing inside server_us

  std::int64_t client_us() const { return req_us + server_us + resp_us; }
};

using MetricMap = std::map<std::string, std::map<std::string, double>>;  // service -> metric -> value

struct WindowTrace {
  std::int64_t window_index = 0;
  double offered_load_rps = 0.0;
  std::shared_ptr<const RpcGraph> graph;
  int n_requests = 0;
  std::vector<RpcTiming> timings;  // row-major: request x rpc (graph order)
  MetricMap metrics;

  const RpcTiming& at(int request, std::size_t rpc) const {
    return timings[static_cast<std::size_t>(request) * graph->rpcs.size() + rpc];
  }

  /// Materializes the client and server spans of every sampled request.
  std::vector<Span> spans() const {
    std::vector<Span> out;
    out.reserve(timings.size() * 2);
    for (int i = 0; i < n_requests; ++i) {
      const std::string trace = "w" + std::to_string(window_index) + "-r" + std::to_string(i);
      for (std::size_t k = 0; k < graph->rpcs.size(); ++k) {
        const auto& e = graph->rpcs[k];
        const auto& t = at(i, k);
        Span c;
        c.trace_id = trace;
        c.rpc_id = e.id;
        if (!e.parent.empty()) c.parent_rpc_id = e.parent;
        c.service = e.caller;
        c.peer_service = e.callee;
        c.kind = SpanKind::kClient;
        c.start_us = t.start_us;
        c.duration_us = t.client_us();
        Span s = c;
        s.service = e.callee;
        s.peer_service = e.caller;
        s.kind = SpanKind::kServer;
        s.start_us = t.start_us + t.req_us;
        s.duration_us = t.server_us;
        out.push_back(std::move(c));
        out.push_back(std::move(s));
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Cluster

class Cluster {
 public:
  explicit Cluster(TopologyConfig config) : config_(std::move(config)) {
    validate(config_.graph);
    graph_ = std::make_shared<const RpcGraph>(config_.graph);
    require(config_.sim.requests_per_window >= 1, ErrorKind::kInvalidConfig, "requests_per_window must be >= 1");
    for (auto& s : config_.services) {
      require(s.replicas >= 1, ErrorKind::kInvalidConfig, s.service + ": replicas must be >= 1");
      require(s.cpu_capacity > 0 && s.mem_capacity > 0 && s.cache_ways > 0 && s.net_bandwidth > 0 &&
                  s.base_proc_us > 0,
              ErrorKind::kInvalidConfig, s.service + ": capacities must be positive");
      require(s.cpu_freq_scale >= 0.5 && s.cpu_freq_scale <= 1.0, ErrorKind::kInvalidConfig,
              s.service + ": cpu_freq_scale must lie in [0.5, 1.0]");
      s.ref_cpu_capacity = s.cpu_capacity;
      s.ref_mem_capacity = s.mem_capacity;
      s.ref_net_bandwidth = s.net_bandwidth;
    }
    cbn_ = build_cbn(config_.graph, metric_schema());
    for (const auto& s : cbn_.decode_order) {
      require(index_of(s) >= 0, ErrorKind::kInvalidConfig, "no service state for '" + s + "'");
    }
    const auto& rpcs = config_.graph.rpcs;
    children_.resize(rpcs.size());
    for (std::size_t k = 0; k < rpcs.size(); ++k)
      for (std::size_t c = 0; c < rpcs.size(); ++c)
        if (rpcs[c].parent == rpcs[k].id) children_[k].push_back(c);
  }

  const TopologyConfig& config() const { return config_; }
  const RpcGraph& graph() const { return *graph_; }
  const Cbn& cbn() const { return cbn_; }
  const std::vector<ServiceState>& services() const { return config_.services; }
  std::int64_t next_window() const { return window_; }

  const ServiceState& service(const std::string& name) const {
    const int i = index_of(name);
    require(i >= 0, ErrorKind::kLookup, "unknown service '" + name + "'");
    return config_.services[static_cast<std::size_t>(i)];
  }

  MetricSchema metric_schema() const {
    MetricSchema schema;
    for (const auto& s : config_.services) {
      auto& names = schema[s.service];
      names = service_metric_names();
      for (const auto& r : config_.graph.rpcs)
        if (r.callee == s.service)
          for (const auto& m : channel_metric_names()) names.push_back(channel_metric(r.id, m));
    }
    return schema;
  }

  void inject(const std::string& service, const Injection& inj) {
    require(inj.intensity >= 0.0 && inj.intensity <= 1.0, ErrorKind::kInvalidConfig, "intensity must lie in [0,1]");
    require(inj.start_window <= inj.end_window, ErrorKind::kInvalidConfig, "injection start after end");
    mutable_service(service).injected.push_back(inj);
  }

  /// Applies one corrective action; leaves every other field unchanged.
  ActionOutcome apply_action(const Action& a) {
    auto& s = mutable_service(a.service);
    require(a.magnitude > 0, ErrorKind::kPrecondition, "action magnitude must be positive");
    const auto& caps = config_.caps;
    switch (a.kind) {
      case ActionKind::kCpuFreqBoost:
        if (s.cpu_freq_scale >= 1.0) return ActionOutcome::kCapExceeded;
        s.cpu_freq_scale = std::min(1.0, s.cpu_freq_scale + a.magnitude);
        break;
      case ActionKind::kScaleUpCpu:
        if (s.cpu_capacity >= caps.max_cpu_capacity) return ActionOutcome::kCapExceeded;
        s.cpu_capacity = std::min(caps.max_cpu_capacity, s.cpu_capacity * a.magnitude);
        break;
      case ActionKind::kScaleUpMem:
        if (s.mem_capacity >= caps.max_mem_capacity) return ActionOutcome::kCapExceeded;
        s.mem_capacity = std::min(caps.max_mem_capacity, s.mem_capacity * a.magnitude);
        break;
      case ActionKind::kScaleOut: {
        const int add = std::max(1, static_cast<int>(std::lround(a.magnitude)));
        if (s.replicas + add > caps.max_replicas) return ActionOutcome::kCapExceeded;
        s.replicas += add;
        break;
      }
      case ActionKind::kRateLimitInterference:
        require(a.magnitude < 1.0, ErrorKind::kPrecondition, "rate-limit factor must be below 1");
        for (auto& inj : s.injected)
          if (!a.interference || inj.kind == *a.interference) inj.intensity *= a.magnitude;
        break;
      case ActionKind::kCachePartition: {
        if (s.cache_ways >= caps.max_cache_ways) return ActionOutcome::kCapExceeded;
        const int add = std::max(1, static_cast<int>(std::lround(a.magnitude)));
        s.cache_ways = std::min(caps.max_cache_ways, s.cache_ways + add);
        break;
      }
      case ActionKind::kNetPartition:
        if (s.net_bandwidth >= caps.max_net_bandwidth) return ActionOutcome::kCapExceeded;
        s.net_bandwidth = std::min(caps.max_net_bandwidth, s.net_bandwidth * a.magnitude);
        break;
      case ActionKind::kMigrate:
        // Move to a fresh node: the collocated interference stays behind.
        if (spare_nodes_used_ >= caps.spare_nodes) return ActionOutcome::kCapExceeded;
        ++spare_nodes_used_;
        s.injected.clear();
        s.migrated = true;
        break;
    }
    return ActionOutcome::kApplied;
  }

  /// Simulates one window of open-loop load and advances the window counter.
  WindowTrace step_window(double load_rps, Rng& rng) {
    require(load_rps > 0, ErrorKind::kPrecondition, "load_rps must be positive");
    const auto& sim = config_.sim;
    const auto& rpcs = graph_->rpcs;
    const std::size_t n_rpc = rpcs.size();
    const int n_req = sim.requests_per_window;
    const std::int64_t w = window_++;

    // All randomness is drawn up front in a fixed order so that the stream
    // position never depends on cluster state.
    std::vector<double> bg_cpu(config_.services.size()), bg_net(config_.services.size());
    for (std::size_t i = 0; i < config_.services.size(); ++i) {
      bg_cpu[i] = rng.uniform() * sim.background_max;
      bg_net[i] = rng.uniform() * sim.background_max;
    }
    std::vector<double> j_proc(static_cast<std::size_t>(n_req) * n_rpc), j_req(j_proc.size()), j_resp(j_proc.size());
    const double proc_mu = -0.5 * sim.proc_jitter * sim.proc_jitter;
    const double net_mu = -0.5 * sim.net_jitter * sim.net_jitter;
    for (std::size_t i = 0; i < j_proc.size(); ++i) {
      j_proc[i] = std::exp(proc_mu + sim.proc_jitter * rng.normal());
      j_req[i] = std::exp(net_mu + sim.net_jitter * rng.normal());
      j_resp[i] = std::exp(net_mu + sim.net_jitter * rng.normal());
    }

    WindowTrace trace;
    trace.window_index = w;
    trace.offered_load_rps = load_rps;
    trace.graph = graph_;
    trace.n_requests = n_req;
    trace.timings.assign(static_cast<std::size_t>(n_req) * n_rpc, RpcTiming{});

    auto combine_children = [&](std::size_t k, int req) -> std::int64_t {
      std::int64_t acc = 0;
      const bool parallel = rpcs[k].combine == ChildCombine::kParallel;
      for (std::size_t c : children_[k]) {
        const auto y = trace.at(req, c).client_us();
        acc = parallel ? std::max(acc, y) : acc + y;
      }
      return acc;
    };

    for (const auto& name : cbn_.decode_order) {
      const auto si = static_cast<std::size_t>(index_of(name));
      const auto& s = config_.services[si];
      double inj_cpu = 0, inj_mem = 0, inj_disk = 0, inj_net = 0;
      for (const auto& inj : s.injected) {
        if (!inj.active(w)) continue;
        switch (inj.kind) {
          case InjectionKind::kCpu: inj_cpu += inj.intensity; break;
          case InjectionKind::kMemory: inj_mem += inj.intensity; break;
          case InjectionKind::kDiskIo: inj_disk += inj.intensity; break;
          case InjectionKind::kNetwork: inj_net += inj.intensity; break;
        }
      }

      std::vector<std::size_t> inbound;
      for (std::size_t k = 0; k < n_rpc; ++k)
        if (rpcs[k].callee == name) inbound.push_back(k);

      const double cpu_u = std::min(
          0.99, (load_rps * s.cpu_cost + (inj_cpu + bg_cpu[si]) * s.ref_cpu_capacity) / (s.cpu_capacity * s.replicas));
      const double mem_u = std::min(
          0.99, (s.mem_base + inj_mem) * s.ref_mem_capacity / s.mem_capacity);
      const double disk_u = std::min(0.99, s.disk_base + inj_disk);
      const double cache_p = std::min(0.99, (s.cache_base + 0.5 * bg_cpu[si]) * 10.0 / s.cache_ways);
      const double nic_u = std::min(0.99, load_rps * s.net_cost / s.net_bandwidth);

      const double k_gain = sim.latency_gain;
      const double proc_mean =
          s.base_proc_us / s.cpu_freq_scale * (1.0 + k_gain * cpu_u / (1.0 - cpu_u)) *
              (1.0 + sim.cache_gain * cache_p) +
          s.base_proc_us * (sim.mem_gain * mem_u / (1.0 - mem_u) + sim.disk_gain * disk_u / (1.0 - disk_u));

      auto& m = trace.metrics[name];
      m["cpu_util"] = cpu_u;
      m["mem_util"] = mem_u;
      m["disk_util"] = disk_u;
      m["net_util"] = nic_u;
      m["cache_pressure"] = cache_p;

      for (std::size_t k : inbound) {
        const double chan_u = std::min(
            0.99, (load_rps * s.net_cost + (inj_net + bg_net[si]) * s.ref_net_bandwidth) / s.net_bandwidth);
        const double one_way = sim.net_base_us * (1.0 + sim.net_gain * chan_u / (1.0 - chan_u));
        m[channel_metric(rpcs[k].id, "net_util")] = chan_u;
        m[channel_metric(rpcs[k].id, "rtt")] = 2.0 * one_way;
        for (int i = 0; i < n_req; ++i) {
          const std::size_t slot = static_cast<std::size_t>(i) * n_rpc + k;
          auto& t = trace.timings[slot];
          t.proc_us = static_cast<std::int64_t>(std::llround(proc_mean * j_proc[slot]));
          t.server_us = t.proc_us + combine_children(k, i);
          t.req_us = static_cast<std::int64_t>(std::llround(one_way * j_req[slot]));
          t.resp_us = static_cast<std::int64_t>(std::llround(one_way * j_resp[slot]));
        }
      }
    }

    // Start times, top-down.
    const double spacing_us = sim.window_seconds * 1e6 / n_req;
    const std::int64_t window_start = sim.epoch_us + static_cast<std::int64_t>(w * sim.window_seconds * 1e6);
    for (int i = 0; i < n_req; ++i) {
      for (std::size_t k = 0; k < n_rpc; ++k) {
        auto& t = trace.timings[static_cast<std::size_t>(i) * n_rpc + k];
        if (rpcs[k].parent.empty())
          t.start_us = window_start + static_cast<std::int64_t>(i * spacing_us);
        const std::int64_t serve_from = t.start_us + t.req_us + t.proc_us;
        std::int64_t cursor = serve_from;
        for (std::size_t c : children_[k]) {
          auto& ct = trace.timings[static_cast<std::size_t>(i) * n_rpc + c];
          if (rpcs[k].combine == ChildCombine::kParallel) {
            ct.start_us = serve_from;
          } else {
            ct.start_us = cursor;
            cursor += ct.client_us();
          }
        }
      }
    }
    return trace;
  }

 private:
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < config_.services.size(); ++i)
      if (config_.services[i].service == name) return static_cast<int>(i);
    return -1;
  }

  ServiceState& mutable_service(const std::string& name) {
    const int i = index_of(name);
    require(i >= 0, ErrorKind::kLookup, "unknown service '" + name + "'");
    return config_.services[static_cast<std::size_t>(i)];
  }

  TopologyConfig config_;
  std::shared_ptr<const RpcGraph> graph_;
  Cbn cbn_;
  std::vector<std::vector<std::size_t>> children_;  // by rpc index, graph order
  std::int64_t window_ = 0;
  int spare_nodes_used_ = 0;
};

// ---------------------------------------------------------------------------
// Topology construction

/// Load source that issues the root rpc; not a cluster service.
inline const std::string kLoadSource = "client";

struct ShapePart {
  enum class Kind { kChain, kFanout } kind = Kind::kChain;
  int n = 2;
};

/// Builds an rpc tree from chain/fanout parts. Each part's root is called by the
/// last service of the previous part; the first root is called by the load source.
inline RpcGraph compose_graph(const std::vector<ShapePart>& parts) {
  require(!parts.empty(), ErrorKind::kInvalidConfig, "topology needs at least one part");
  RpcGraph g;
  g.services.push_back(kLoadSource);
  int next = 0;
  std::string attach_service = kLoadSource;
  std::string attach_rpc;
  auto add_rpc = [&](const std::string& caller, const std::string& callee, const std::string& parent,
                     ChildCombine combine) {
    RpcEdge e{"rpc_" + callee, caller, callee, parent, combine};
    g.rpcs.push_back(e);
    g.services.push_back(callee);
    return e.id;
  };
  for (const auto& part : parts) {
    require(part.n >= 2, ErrorKind::kInvalidConfig, "chain/fanout size must be >= 2");
    if (part.kind == ShapePart::Kind::kChain) {
      for (int i = 0; i < part.n; ++i) {
        const std::string name = "S" + std::to_string(next++);
        attach_rpc = add_rpc(attach_service, name, attach_rpc, ChildCombine::kSequential);
        attach_service = name;
      }
    } else {
      const std::string root = "S" + std::to_string(next++);
      const std::string root_rpc = add_rpc(attach_service, root, attach_rpc, ChildCombine::kParallel);
      std::string last_rpc;
      std::string last_leaf;
      for (int i = 1; i < part.n; ++i) {
        last_leaf = "S" + std::to_string(next++);
        last_rpc = add_rpc(root, last_leaf, root_rpc, ChildCombine::kSequential);
      }
      attach_service = last_leaf;
      attach_rpc = last_rpc;
    }
  }
  g.root_rpc = g.rpcs.front().id;
  validate(g);
  return g;
}

inline RpcGraph chain_graph(int n) { return compose_graph({{ShapePart::Kind::kChain, n}}); }
inline RpcGraph fanout_graph(int n) { return compose_graph({{ShapePart::Kind::kFanout, n}}); }

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_service(const nlohmann::json& j, ServiceState& s) {
  read_opt(j, "replicas", s.replicas);
  read_opt(j, "cpu_capacity", s.cpu_capacity);
  read_opt(j, "cpu_freq_scale", s.cpu_freq_scale);
  read_opt(j, "mem_capacity", s.mem_capacity);
  read_opt(j, "cache_ways", s.cache_ways);
  read_opt(j, "net_bandwidth", s.net_bandwidth);
  read_opt(j, "base_proc_us", s.base_proc_us);
  read_opt(j, "cpu_cost", s.cpu_cost);
  read_opt(j, "mem_base", s.mem_base);
  read_opt(j, "disk_base", s.disk_base);
  read_opt(j, "cache_base", s.cache_base);
  read_opt(j, "net_cost", s.net_cost);
}

inline nlohmann::json write_service(const ServiceState& s) {
  return {{"replicas", s.replicas},         {"cpu_capacity", s.cpu_capacity}, {"cpu_freq_scale", s.cpu_freq_scale},
          {"mem_capacity", s.mem_capacity}, {"cache_ways", s.cache_ways},     {"net_bandwidth", s.net_bandwidth},
          {"base_proc_us", s.base_proc_us}, {"cpu_cost", s.cpu_cost},         {"mem_base", s.mem_base},
          {"disk_base", s.disk_base},       {"cache_base", s.cache_base},     {"net_cost", s.net_cost}};
}

}  // namespace detail

/// Parses a topology config. Shapes: {"kind":"chain"|"fanout","n":N},
/// {"kind":"composed","parts":[...]} or {"kind":"tree","rpcs":[...]}.
/// Services without explicit base_proc_us / cpu_cost get seeded heterogeneous values.
inline TopologyConfig parse_topology_config(const nlohmann::json& j, std::uint64_t seed) {
  TopologyConfig cfg;
  cfg.seed = seed;
  try {
    cfg.name = j.value("name", std::string("topology"));
    const auto& shape = j.at("topology");
    const auto kind = shape.at("kind").get<std::string>();
    auto part_of = [](const nlohmann::json& p) {
      ShapePart part;
      const auto k = p.at("kind").get<std::string>();
      if (k == "chain")
        part.kind = ShapePart::Kind::kChain;
      else if (k == "fanout")
        part.kind = ShapePart::Kind::kFanout;
      else
        fail(ErrorKind::kInvalidConfig, "unknown shape part '" + k + "'");
      part.n = p.at("n").get<int>();
      return part;
    };
    if (kind == "chain" || kind == "fanout") {
      cfg.graph = compose_graph({part_of(shape)});
    } else if (kind == "composed") {
      std::vector<ShapePart> parts;
      for (const auto& p : shape.at("parts")) parts.push_back(part_of(p));
      cfg.graph = compose_graph(parts);
    } else if (kind == "tree") {
      RpcGraph g;
      g.services.push_back(kLoadSource);
      for (const auto& r : shape.at("rpcs")) {
        RpcEdge e;
        e.id = r.at("id").get<std::string>();
        e.caller = r.at("caller").get<std::string>();
        e.callee = r.at("callee").get<std::string>();
        e.parent = r.contains("parent") && !r.at("parent").is_null() ? r.at("parent").get<std::string>() : "";
        e.combine = parse_combine(r.value("combine", std::string("sequential")));
        for (const auto* s : {&e.caller, &e.callee})
          if (!g.has_service(*s)) g.services.push_back(*s);
        if (e.parent.empty()) g.root_rpc = e.id;
        g.rpcs.push_back(e);
      }
      validate(g);
      cfg.graph = g;
    } else {
      fail(ErrorKind::kInvalidConfig, "unknown topology kind '" + kind + "'");
    }

    if (j.contains("sim")) {
      const auto& s = j.at("sim");
      auto& p = cfg.sim;
      detail::read_opt(s, "load_rps", p.load_rps);
      detail::read_opt(s, "load_noise", p.load_noise);
      detail::read_opt(s, "requests_per_window", p.requests_per_window);
      detail::read_opt(s, "window_seconds", p.window_seconds);
      detail::read_opt(s, "latency_gain", p.latency_gain);
      detail::read_opt(s, "proc_jitter", p.proc_jitter);
      detail::read_opt(s, "net_jitter", p.net_jitter);
      detail::read_opt(s, "net_base_us", p.net_base_us);
      detail::read_opt(s, "net_gain", p.net_gain);
      detail::read_opt(s, "background_max", p.background_max);
      detail::read_opt(s, "mem_gain", p.mem_gain);
      detail::read_opt(s, "disk_gain", p.disk_gain);
      detail::read_opt(s, "cache_gain", p.cache_gain);
    }
    if (j.contains("caps")) {
      const auto& c = j.at("caps");
      detail::read_opt(c, "max_cpu_capacity", cfg.caps.max_cpu_capacity);
      detail::read_opt(c, "max_mem_capacity", cfg.caps.max_mem_capacity);
      detail::read_opt(c, "max_cache_ways", cfg.caps.max_cache_ways);
      detail::read_opt(c, "max_net_bandwidth", cfg.caps.max_net_bandwidth);
      detail::read_opt(c, "max_replicas", cfg.caps.max_replicas);
      detail::read_opt(c, "spare_nodes", cfg.caps.spare_nodes);
    }
    detail::read_opt(j, "qos_target_us", cfg.qos_target_us);
    detail::read_opt(j, "percentiles", cfg.percentiles);

    ServiceState defaults;
    if (j.contains("service_defaults")) detail::read_service(j.at("service_defaults"), defaults);
    Rng rng(seed ^ 0x5eedc0ffeeULL);
    for (const auto& name : cfg.graph.services) {
      if (name == cfg.graph.rpc(cfg.graph.root_rpc).caller) continue;
      ServiceState s = defaults;
      s.service = name;
      // Heterogeneous defaults; drawn for every service so the stream is stable.
      const double proc = rng.uniform(250.0, 550.0);
      const double cost = rng.uniform(0.6, 1.4);
      if (!(j.contains("service_defaults") && j.at("service_defaults").contains("base_proc_us")))
        s.base_proc_us = std::round(proc);
      if (!(j.contains("service_defaults") && j.at("service_defaults").contains("cpu_cost")))
        s.cpu_cost = std::round(cost * 100.0) / 100.0;
      if (j.contains("services") && j.at("services").contains(name))
        detail::read_service(j.at("services").at(name), s);
      cfg.services.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("bad topology config: ") + e.what());
  }
  require(!cfg.percentiles.empty(), ErrorKind::kInvalidConfig, "percentile set must be nonempty");
  for (double p : cfg.percentiles)
    require(p > 0 && p <= 100, ErrorKind::kInvalidConfig, "percentiles must lie in (0, 100]");
  return cfg;
}

inline TopologyConfig load_topology_config(const std::string& path, std::uint64_t seed) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, path + ": " + e.what());
  }
  return parse_topology_config(j, seed);
}

/// Canonical JSON for a resolved config (every service spelled out).
inline nlohmann::json to_json(const TopologyConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  nlohmann::json rpcs = nlohmann::json::array();
  for (const auto& r : cfg.graph.rpcs)
    rpcs.push_back({{"id", r.id},
                    {"caller", r.caller},
                    {"callee", r.callee},
                    {"parent", r.parent.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.parent)},
                    {"combine", to_string(r.combine)}});
  j["topology"] = {{"kind", "tree"}, {"rpcs", rpcs}};
  for (const auto& s : cfg.services) j["services"][s.service] = detail::write_service(s);
  const auto& p = cfg.sim;
  j["sim"] = {{"load_rps", p.load_rps},
              {"load_noise", p.load_noise},
              {"requests_per_window", p.requests_per_window},
              {"window_seconds", p.window_seconds},
              {"latency_gain", p.latency_gain},
              {"proc_jitter", p.proc_jitter},
              {"net_jitter", p.net_jitter},
              {"net_base_us", p.net_base_us},
              {"net_gain", p.net_gain},
              {"background_max", p.background_max},
              {"mem_gain", p.mem_gain},
              {"disk_gain", p.disk_gain},
              {"cache_gain", p.cache_gain}};
  const auto& c = cfg.caps;
  j["caps"] = {{"max_cpu_capacity", c.max_cpu_capacity}, {"max_mem_capacity", c.max_mem_capacity},
               {"max_cache_ways", c.max_cache_ways},     {"max_net_bandwidth", c.max_net_bandwidth},
               {"max_replicas", c.max_replicas},         {"spare_nodes", c.spare_nodes}};
  j["qos_target_us"] = cfg.qos_target_us;
  j["percentiles"] = cfg.percentiles;
  return j;
}

inline Cluster make_cluster(const nlohmann::json& config, std::uint64_t seed) {
  return Cluster(parse_topology_config(config, seed));
}

// ---------------------------------------------------------------------------
// Schedules and datasets

struct ScheduledInjection {
  std::string service;
  Injection injection;
};

struct LoadStep {
  std::int64_t start_window = 0;
  double rps = 0.0;
};

struct Schedule {
  double base_rps = 0.0;  // 0 means the config's load_rps
  double load_noise = -1.0;  // negative means the config's load_noise
  std::vector<LoadStep> steps;
  std::vector<ScheduledInjection> injections;

  double load_at(std::int64_t w, double fallback) const {
    double rps = base_rps > 0 ? base_rps : fallback;
    for (const auto& s : steps)
      if (w >= s.start_window) rps = s.rps;
    return rps;
  }
};

struct GroundTruth {
  std::string service;
  InjectionKind kind;

  bool operator<(const GroundTruth& o) const { return std::tie(service, kind) < std::tie(o.service, o.kind); }
  bool operator==(const GroundTruth& o) const = default;
};

using WindowLabels = std::set<GroundTruth>;

/// Active injections per window straight from the schedule.
inline WindowLabels labels_at(const Schedule& schedule, std::int64_t w) {
  WindowLabels out;
  for (const auto& si : schedule.injections)
    if (si.injection.active(w) && si.injection.intensity > 0) out.insert({si.service, si.injection.kind});
  return out;
}

inline nlohmann::json to_json(const Schedule& s) {
  nlohmann::json j;
  j["base_rps"] = s.base_rps;
  j["load_noise"] = s.load_noise;
  j["steps"] = nlohmann::json::array();
  for (const auto& st : s.steps) j["steps"].push_back({{"start_window", st.start_window}, {"rps", st.rps}});
  j["injections"] = nlohmann::json::array();
  for (const auto& si : s.injections)
    j["injections"].push_back({{"service", si.service},
                               {"kind", to_string(si.injection.kind)},
                               {"intensity", si.injection.intensity},
                               {"start_window", si.injection.start_window},
                               {"end_window", si.injection.end_window}});
  return j;
}

inline Schedule schedule_from_json(const nlohmann::json& j) {
  Schedule s;
  try {
    s.base_rps = j.value("base_rps", 0.0);
    s.load_noise = j.value("load_noise", -1.0);
    if (j.contains("steps"))
      for (const auto& st : j.at("steps"))
        s.steps.push_back({st.at("start_window").get<std::int64_t>(), st.at("rps").get<double>()});
    if (j.contains("injections"))
      for (const auto& in : j.at("injections")) {
        ScheduledInjection si;
        si.service = in.at("service").get<std::string>();
        si.injection.kind = parse_injection_kind(in.at("kind").get<std::string>());
        si.injection.intensity = in.at("intensity").get<double>();
        si.injection.start_window = in.at("start_window").get<std::int64_t>();
        si.injection.end_window = in.at("end_window").get<std::int64_t>();
        require(si.injection.intensity >= 0 && si.injection.intensity <= 1, ErrorKind::kInvalidConfig,
                "injection intensity must lie in [0,1]");
        require(si.injection.start_window <= si.injection.end_window, ErrorKind::kInvalidConfig,
                "injection start after end");
        s.injections.push_back(si);
      }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("bad schedule: ") + e.what());
  }
  return s;
}

inline Schedule load_schedule(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, path + ": " + e.what());
  }
  return schedule_from_json(j);
}

/// Installs the schedule's injections into the cluster.
inline void install(Cluster& cluster, const Schedule& schedule) {
  for (const auto& si : schedule.injections) cluster.inject(si.service, si.injection);
}

/// Offered load for the cluster's next window under a schedule, with jitter.
inline double scheduled_load(const Cluster& cluster, const Schedule& schedule, Rng& rng) {
  const auto& sim = cluster.config().sim;
  const double noise = schedule.load_noise >= 0 ? schedule.load_noise : sim.load_noise;
  const double base = schedule.load_at(cluster.next_window(), sim.load_rps);
  return base * (1.0 + noise * (2.0 * rng.uniform() - 1.0));
}

/// Streams windows to a callback; generate_dataset collects them.
inline void simulate(Cluster& cluster, const Schedule& schedule, std::int64_t n_windows, Rng& rng,
                     const std::function<void(WindowTrace&&, const WindowLabels&)>& sink) {
  require(n_windows >= 1, ErrorKind::kPrecondition, "n_windows must be >= 1");
  install(cluster, schedule);
  for (std::int64_t i = 0; i < n_windows; ++i) {
    const double load = scheduled_load(cluster, schedule, rng);
    const auto w = cluster.next_window();
    auto trace = cluster.step_window(load, rng);
    sink(std::move(trace), labels_at(schedule, w));
  }
}

struct SimulatedDataset {
  std::vector<WindowTrace> windows;
  std::vector<WindowLabels> labels;  // ground truth; evaluator use only
};

inline SimulatedDataset generate_dataset(Cluster& cluster, const Schedule& schedule, std::int64_t n_windows,
                                         Rng& rng) {
  SimulatedDataset out;
  simulate(cluster, schedule, n_windows, rng, [&](WindowTrace&& t, const WindowLabels& l) {
    out.windows.push_back(std::move(t));
    out.labels.push_back(l);
  });
  return out;
}

/// Random contention schedule over a window range: injections of random kind,
/// intensity and duration on randomly chosen services, separated by quiet gaps.
inline Schedule random_schedule(const Cluster& cluster, std::int64_t n_windows, Rng& rng,
                                double min_intensity = 0.4, double max_intensity = 0.8,
                                std::int64_t min_len = 5, std::int64_t max_len = 20, double multi_fault = 0.0) {
  Schedule s;
  const auto& services = cluster.cbn().decode_order;
  std::int64_t w = 0;
  while (w < n_windows) {
    const auto gap = static_cast<std::int64_t>(rng.index(static_cast<std::size_t>(max_len))) + 1;
    w += gap;
    if (w >= n_windows) break;
    const auto len = min_len + static_cast<std::int64_t>(rng.index(static_cast<std::size_t>(max_len - min_len + 1)));
    const int faults = rng.uniform() < multi_fault ? 2 : 1;
    std::set<std::string> used;
    for (int f = 0; f < faults; ++f) {
      ScheduledInjection si;
      si.service = services[rng.index(services.size())];
      si.injection.kind = kAllInjectionKinds[rng.index(4)];
      si.injection.intensity = rng.uniform(min_intensity, max_intensity);
      si.injection.start_window = w;
      si.injection.end_window = std::min(n_windows - 1, w + len - 1);
      if (used.insert(si.service).second) s.injections.push_back(si);
    }
    w += len;
  }
  return s;
}

}  // namespace sage
