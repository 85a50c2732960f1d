#pragma once

// RPC dependency graphs recovered from span traces, and the causal Bayesian
// network over metric, latency and latent nodes derived from them.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sage/common.hpp"

namespace sage {

enum class SpanKind { kClient, kServer };

struct Span {
  std::string trace_id;
  std::string rpc_id;
  std::optional<std::string> parent_rpc_id;
  std::string service;
  std::string peer_service;  // callee for client spans, caller for server spans
  SpanKind kind = SpanKind::kClient;
  std::int64_t start_us = 0;
  std::int64_t duration_us = 0;

  std::int64_t end_us() const { return start_us + duration_us; }
};

enum class ChildCombine { kSequential, kParallel };

inline const char* to_string(ChildCombine c) {
  return c == ChildCombine::kParallel ? "parallel" : "sequential";
}

inline ChildCombine parse_combine(const std::string& s) {
  if (s == "parallel") return ChildCombine::kParallel;
  if (s == "sequential") return ChildCombine::kSequential;
  fail(ErrorKind::kInvalidConfig, "unknown child combine mode '" + s + "'");
}

struct RpcEdge {
  std::string id;
  std::string caller;
  std::string callee;
  std::string parent;  // empty for the root rpc
  ChildCombine combine = ChildCombine::kSequential;  // how the callee joins this rpc's children

  bool operator==(const RpcEdge&) const = default;
};

struct RpcGraph {
  std::vector<std::string> services;  // breadth-first from the root caller
  std::vector<RpcEdge> rpcs;          // breadth-first from the root rpc
  std::string root_rpc;

  const RpcEdge& rpc(const std::string& id) const {
    for (const auto& r : rpcs)
      if (r.id == id) return r;
    fail(ErrorKind::kLookup, "unknown rpc '" + id + "'");
  }

  std::vector<const RpcEdge*> children(const std::string& rpc_id) const {
    std::vector<const RpcEdge*> out;
    for (const auto& r : rpcs)
      if (r.parent == rpc_id) out.push_back(&r);
    return out;
  }

  bool has_service(const std::string& s) const {
    return std::find(services.begin(), services.end(), s) != services.end();
  }

  /// Callee of the root rpc; its server latency is the end-to-end latency.
  const std::string& frontend() const { return rpc(root_rpc).callee; }
};

/// Per-service ordered metric names. Network-channel metrics use channel_metric().
using MetricSchema = std::map<std::string, std::vector<std::string>>;

inline std::string channel_metric(const std::string& rpc_id, const std::string& name) {
  return "chan:" + rpc_id + ":" + name;
}

/// Rpc id for a channel metric name, or nullopt for a service-level metric.
inline std::optional<std::string> channel_of(const std::string& metric) {
  if (!starts_with(metric, "chan:")) return std::nullopt;
  const auto pos = metric.find(':', 5);
  if (pos == std::string::npos) return std::nullopt;
  return metric.substr(5, pos - 5);
}

inline std::string channel_metric_base(const std::string& metric) {
  const auto pos = metric.rfind(':');
  return channel_of(metric) ? metric.substr(pos + 1) : metric;
}

// ---------------------------------------------------------------------------
// build_rpc_graph

namespace detail {

struct RpcInstance {
  const Span* client = nullptr;
  const Span* server = nullptr;
};

inline bool overlaps(const Span& a, const Span& b) {
  return a.start_us < b.end_us() && b.start_us < a.end_us();
}

}  // namespace detail

/// Recovers the RPC tree from a set of complete traces. RPCs are identified
/// across traces by their call path from the root.
inline RpcGraph build_rpc_graph(const std::vector<Span>& spans) {
  require(!spans.empty(), ErrorKind::kIncompleteTrace, "no spans");

  std::map<std::string, std::vector<const Span*>> by_trace;
  std::vector<std::string> trace_order;
  for (const auto& s : spans) {
    require(s.duration_us >= 0, ErrorKind::kMalformedTrace, "negative duration in rpc " + s.rpc_id);
    auto [it, inserted] = by_trace.try_emplace(s.trace_id);
    if (inserted) trace_order.push_back(s.trace_id);
    it->second.push_back(&s);
  }

  struct PathInfo {
    std::string id;
    std::string caller;
    std::string callee;
    std::string parent_path;
    std::int64_t first_seen_offset = 0;
    int parallel_votes = 0;
    int multi_child_traces = 0;
  };
  std::map<std::string, PathInfo> paths;
  std::vector<std::string> path_order;
  std::set<std::string> used_ids;
  std::optional<std::string> root_path;

  for (const auto& trace_id : trace_order) {
    const auto& trace = by_trace[trace_id];
    std::map<std::string, detail::RpcInstance> rpcs;
    for (const Span* s : trace) {
      auto& inst = rpcs[s->rpc_id];
      auto& slot = s->kind == SpanKind::kClient ? inst.client : inst.server;
      require(slot == nullptr, ErrorKind::kMalformedTrace,
              "duplicate span for rpc " + s->rpc_id + " in trace " + trace_id);
      slot = s;
    }
    for (const auto& [id, inst] : rpcs) {
      require(inst.client && inst.server, ErrorKind::kIncompleteTrace,
              "rpc " + id + " in trace " + trace_id + " lacks its client or server span");
      require(inst.client->service == inst.server->peer_service &&
                  inst.client->peer_service == inst.server->service,
              ErrorKind::kMalformedTrace, "client/server services disagree for rpc " + id);
      require(inst.client->duration_us >= inst.server->duration_us, ErrorKind::kMalformedTrace,
              "client duration shorter than server duration for rpc " + id);
      if (inst.client->parent_rpc_id)
        require(rpcs.count(*inst.client->parent_rpc_id) > 0, ErrorKind::kIncompleteTrace,
                "orphan parent_rpc_id " + *inst.client->parent_rpc_id + " in trace " + trace_id);
    }

    // Cycle check along parent chains.
    for (const auto& [id, inst] : rpcs) {
      std::set<std::string> seen{id};
      const Span* cur = inst.client;
      while (cur->parent_rpc_id) {
        require(seen.insert(*cur->parent_rpc_id).second, ErrorKind::kMalformedTrace,
                "cycle through rpc " + id + " in trace " + trace_id);
        cur = rpcs[*cur->parent_rpc_id].client;
      }
    }

    std::vector<std::string> roots;
    std::map<std::string, std::vector<std::string>> kids;
    for (const auto& [id, inst] : rpcs) {
      if (inst.client->parent_rpc_id)
        kids[*inst.client->parent_rpc_id].push_back(id);
      else
        roots.push_back(id);
    }
    require(roots.size() == 1, ErrorKind::kMalformedTrace,
            "trace " + trace_id + " has " + std::to_string(roots.size()) + " root rpcs");
    const std::int64_t trace_start = rpcs[roots[0]].client->start_us;

    // Walk the trace, assigning call-path keys.
    std::deque<std::pair<std::string, std::string>> queue;  // (rpc id, path key)
    const auto& r0 = rpcs[roots[0]];
    const std::string root_key = r0.client->service + ">" + r0.client->peer_service + "#0";
    if (!root_path) root_path = root_key;
    require(*root_path == root_key, ErrorKind::kMalformedTrace, "traces disagree on the root rpc");
    queue.emplace_back(roots[0], root_key);

    while (!queue.empty()) {
      auto [id, key] = queue.front();
      queue.pop_front();
      const auto& inst = rpcs[id];
      auto [pit, fresh] = paths.try_emplace(key);
      PathInfo& info = pit->second;
      if (fresh) {
        info.caller = inst.client->service;
        info.callee = inst.client->peer_service;
        info.first_seen_offset = inst.client->start_us - trace_start;
        std::string candidate = id;
        for (int n = 1; used_ids.count(candidate); ++n) candidate = id + "#" + std::to_string(n);
        info.id = candidate;
        used_ids.insert(candidate);
        path_order.push_back(key);
      }

      auto& children = kids[id];
      std::sort(children.begin(), children.end(), [&](const std::string& a, const std::string& b) {
        const auto* ca = rpcs[a].client;
        const auto* cb = rpcs[b].client;
        return std::tie(ca->start_us, ca->peer_service, a) < std::tie(cb->start_us, cb->peer_service, b);
      });
      if (children.size() >= 2) {
        ++info.multi_child_traces;
        bool parallel = false;
        for (std::size_t i = 0; i < children.size() && !parallel; ++i)
          for (std::size_t j = i + 1; j < children.size() && !parallel; ++j)
            parallel = detail::overlaps(*rpcs[children[i]].client, *rpcs[children[j]].client);
        if (parallel) ++info.parallel_votes;
      }
      std::map<std::string, int> occurrence;
      for (const auto& c : children) {
        const auto* cs = rpcs[c].client;
        const std::string edge = cs->service + ">" + cs->peer_service;
        const int k = occurrence[edge]++;
        queue.emplace_back(c, key + "/" + edge + "#" + std::to_string(k));
      }
    }
  }

  // Resolve parent paths from the key structure.
  for (auto& [key, info] : paths) {
    const auto slash = key.rfind('/');
    info.parent_path = slash == std::string::npos ? "" : key.substr(0, slash);
  }

  // Breadth-first order from the root; siblings by first-seen offset.
  RpcGraph g;
  std::map<std::string, std::vector<std::string>> child_paths;
  for (const auto& key : path_order)
    if (!paths[key].parent_path.empty()) child_paths[paths[key].parent_path].push_back(key);
  std::deque<std::string> bfs{*root_path};
  std::set<std::string> service_seen;
  auto add_service = [&](const std::string& s) {
    if (service_seen.insert(s).second) g.services.push_back(s);
  };
  while (!bfs.empty()) {
    const auto key = bfs.front();
    bfs.pop_front();
    const auto& info = paths[key];
    RpcEdge e;
    e.id = info.id;
    e.caller = info.caller;
    e.callee = info.callee;
    e.parent = info.parent_path.empty() ? "" : paths[info.parent_path].id;
    e.combine = info.multi_child_traces > 0 && 2 * info.parallel_votes > info.multi_child_traces
                    ? ChildCombine::kParallel
                    : ChildCombine::kSequential;
    add_service(e.caller);
    add_service(e.callee);
    g.rpcs.push_back(e);
    auto kids = child_paths[key];
    std::stable_sort(kids.begin(), kids.end(), [&](const std::string& a, const std::string& b) {
      return paths[a].first_seen_offset < paths[b].first_seen_offset;
    });
    for (const auto& k : kids) bfs.push_back(k);
  }
  g.root_rpc = g.rpcs.front().id;
  return g;
}

/// Replaces inferred combine modes, keyed by rpc id.
inline void apply_combine_overrides(RpcGraph& g, const std::map<std::string, ChildCombine>& overrides) {
  for (const auto& [id, mode] : overrides) {
    bool found = false;
    for (auto& r : g.rpcs)
      if (r.id == id) {
        r.combine = mode;
        found = true;
      }
    require(found, ErrorKind::kLookup, "combine override for unknown rpc '" + id + "'");
  }
}

/// Checks the structural invariants of an rpc graph: one root, resolvable parents, no cycles.
inline void validate(const RpcGraph& g) {
  require(!g.rpcs.empty(), ErrorKind::kMalformedTrace, "rpc graph has no rpcs");
  std::set<std::string> ids;
  for (const auto& r : g.rpcs)
    require(ids.insert(r.id).second, ErrorKind::kMalformedTrace, "duplicate rpc id " + r.id);
  int roots = 0;
  for (const auto& r : g.rpcs) {
    if (r.parent.empty()) {
      ++roots;
      require(r.id == g.root_rpc, ErrorKind::kMalformedTrace, "rpc " + r.id + " has no parent but is not the root");
    } else {
      require(ids.count(r.parent) > 0, ErrorKind::kIncompleteTrace, "rpc " + r.id + " has unknown parent " + r.parent);
      require(g.rpc(r.parent).callee == r.caller, ErrorKind::kMalformedTrace,
              "rpc " + r.id + " is not issued by its parent's callee");
    }
    require(g.has_service(r.caller) && g.has_service(r.callee), ErrorKind::kLookup,
            "rpc " + r.id + " references an unlisted service");
  }
  require(roots == 1, ErrorKind::kMalformedTrace, "rpc graph must have exactly one root");
  for (const auto& r : g.rpcs) {
    std::set<std::string> seen{r.id};
    const RpcEdge* cur = &r;
    while (!cur->parent.empty()) {
      require(seen.insert(cur->parent).second, ErrorKind::kMalformedTrace, "rpc cycle through " + r.id);
      cur = &g.rpc(cur->parent);
    }
  }
}

// ---------------------------------------------------------------------------
// Causal Bayesian network

enum class NodeKind { kMetric, kLatencyClient, kLatencyServer, kLatencyReq, kLatencyResp, kLatent };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::kMetric: return "metric";
    case NodeKind::kLatencyClient: return "latency_client";
    case NodeKind::kLatencyServer: return "latency_server";
    case NodeKind::kLatencyReq: return "latency_req";
    case NodeKind::kLatencyResp: return "latency_resp";
    case NodeKind::kLatent: return "latent";
  }
  return "?";
}

struct CbnNode {
  int id = 0;
  NodeKind kind = NodeKind::kMetric;
  std::string service;  // Metric and Latent nodes
  std::string metric;   // Metric nodes
  std::string rpc;      // Latency nodes
};

struct Cbn {
  std::vector<CbnNode> nodes;
  std::vector<std::pair<int, int>> edges;  // cause -> effect
  std::vector<std::string> decode_order;   // services, leaves first
  RpcGraph graph;
  MetricSchema schema;

  int find(NodeKind kind, const std::string& key, const std::string& metric = "") const {
    for (const auto& n : nodes) {
      if (n.kind != kind) continue;
      if (kind == NodeKind::kMetric && n.service == key && n.metric == metric) return n.id;
      if (kind == NodeKind::kLatent && n.service == key) return n.id;
      if (kind != NodeKind::kMetric && kind != NodeKind::kLatent && n.rpc == key) return n.id;
    }
    return -1;
  }

  bool has_edge(int from, int to) const {
    return std::find(edges.begin(), edges.end(), std::make_pair(from, to)) != edges.end();
  }

  std::vector<int> parents(int node) const {
    std::vector<int> out;
    for (const auto& [a, b] : edges)
      if (b == node) out.push_back(a);
    return out;
  }

  bool has_service(const std::string& s) const {
    return std::find(decode_order.begin(), decode_order.end(), s) != decode_order.end();
  }

  const std::vector<std::string>& metrics(const std::string& service) const {
    auto it = schema.find(service);
    if (it == schema.end()) fail(ErrorKind::kLookup, "unknown service '" + service + "'");
    return it->second;
  }

  /// Rpcs whose callee is `service`; that service's unit owns their latencies.
  std::vector<std::string> inbound_rpcs(const std::string& service) const {
    std::vector<std::string> out;
    for (const auto& r : graph.rpcs)
      if (r.callee == service) out.push_back(r.id);
    return out;
  }

  /// Rpcs issued by `service` while serving any of its inbound rpcs.
  std::vector<std::string> child_rpcs(const std::string& service) const {
    std::vector<std::string> out;
    for (const auto& in : inbound_rpcs(service))
      for (const auto* c : graph.children(in)) out.push_back(c->id);
    return out;
  }

  std::vector<std::string> child_services(const std::string& service) const {
    std::vector<std::string> out;
    for (const auto& c : child_rpcs(service)) {
      const auto& callee = graph.rpc(c).callee;
      if (std::find(out.begin(), out.end(), callee) == out.end()) out.push_back(callee);
    }
    return out;
  }

  std::vector<std::string> parent_services(const std::string& service) const {
    std::vector<std::string> out;
    for (const auto& s : decode_order) {
      const auto kids = child_services(s);
      if (std::find(kids.begin(), kids.end(), service) != kids.end()) out.push_back(s);
    }
    return out;
  }

  const std::string& frontend() const { return graph.frontend(); }

  /// Stable digest of nodes, edges and decode order; checkpoints bind to it.
  std::uint64_t hash() const {
    Fnv1a h;
    for (const auto& n : nodes) {
      h.update(to_string(n.kind));
      h.update(n.service);
      h.update(n.metric);
      h.update(n.rpc);
    }
    for (const auto& [a, b] : edges) {
      h.update(&a, sizeof a);
      h.update(&b, sizeof b);
    }
    for (const auto& s : decode_order) h.update(s);
    return h.digest();
  }
};

/// Topological order of all nodes, or nullopt when the edge set has a cycle.
inline std::optional<std::vector<int>> topological_nodes(const Cbn& cbn) {
  std::vector<int> indeg(cbn.nodes.size(), 0);
  std::vector<std::vector<int>> out(cbn.nodes.size());
  for (const auto& [a, b] : cbn.edges) {
    ++indeg[static_cast<std::size_t>(b)];
    out[static_cast<std::size_t>(a)].push_back(b);
  }
  std::deque<int> ready;
  for (std::size_t i = 0; i < indeg.size(); ++i)
    if (indeg[i] == 0) ready.push_back(static_cast<int>(i));
  std::vector<int> order;
  while (!ready.empty()) {
    const int n = ready.front();
    ready.pop_front();
    order.push_back(n);
    for (int m : out[static_cast<std::size_t>(n)])
      if (--indeg[static_cast<std::size_t>(m)] == 0) ready.push_back(m);
  }
  if (order.size() != cbn.nodes.size()) return std::nullopt;
  return order;
}

inline bool is_acyclic(const Cbn& cbn) { return topological_nodes(cbn).has_value(); }

/// Builds the CBN. Latency edges point from child rpc to parent rpc, the
/// reverse of the call direction. The root rpc's caller (the load source)
/// carries no metrics and gets no latent node.
inline Cbn build_cbn(const RpcGraph& graph, const MetricSchema& schema) {
  validate(graph);
  Cbn cbn;
  cbn.graph = graph;

  std::vector<std::string> callees;
  for (const auto& s : graph.services)
    for (const auto& r : graph.rpcs)
      if (r.callee == s) {
        callees.push_back(s);
        break;
      }
  for (const auto& s : callees) {
    auto it = schema.find(s);
    require(it != schema.end() && !it->second.empty(), ErrorKind::kPrecondition,
            "metric schema missing for service '" + s + "'");
    for (const auto& m : it->second) {
      if (auto ch = channel_of(m)) {
        require(graph.rpc(*ch).callee == s, ErrorKind::kPrecondition,
                "channel metric " + m + " must belong to the callee of rpc " + *ch);
      }
    }
    cbn.schema[s] = it->second;
  }

  auto add = [&](NodeKind kind, std::string service, std::string metric, std::string rpc) {
    CbnNode n;
    n.id = static_cast<int>(cbn.nodes.size());
    n.kind = kind;
    n.service = std::move(service);
    n.metric = std::move(metric);
    n.rpc = std::move(rpc);
    cbn.nodes.push_back(n);
    return n.id;
  };

  std::map<std::string, int> latent;
  std::map<std::string, std::vector<int>> service_metric_nodes;
  std::map<std::string, std::vector<int>> channel_metric_nodes;  // by rpc
  for (const auto& s : callees) {
    for (const auto& m : cbn.schema[s]) {
      const int id = add(NodeKind::kMetric, s, m, "");
      if (auto ch = channel_of(m))
        channel_metric_nodes[*ch].push_back(id);
      else
        service_metric_nodes[s].push_back(id);
    }
    latent[s] = add(NodeKind::kLatent, s, "", "");
  }
  struct LatencyIds {
    int client, server, req, resp;
  };
  std::map<std::string, LatencyIds> lat;
  for (const auto& r : graph.rpcs) {
    LatencyIds ids{};
    ids.client = add(NodeKind::kLatencyClient, "", "", r.id);
    ids.server = add(NodeKind::kLatencyServer, "", "", r.id);
    ids.req = add(NodeKind::kLatencyReq, "", "", r.id);
    ids.resp = add(NodeKind::kLatencyResp, "", "", r.id);
    lat[r.id] = ids;
  }

  for (const auto& r : graph.rpcs) {
    const auto& ids = lat[r.id];
    for (int m : service_metric_nodes[r.callee]) cbn.edges.emplace_back(m, ids.server);
    cbn.edges.emplace_back(latent[r.callee], ids.server);
    for (const auto* c : graph.children(r.id)) cbn.edges.emplace_back(lat[c->id].client, ids.server);
    cbn.edges.emplace_back(ids.server, ids.client);
    cbn.edges.emplace_back(ids.req, ids.client);
    cbn.edges.emplace_back(ids.resp, ids.client);
    for (int m : channel_metric_nodes[r.id]) {
      cbn.edges.emplace_back(m, ids.req);
      cbn.edges.emplace_back(m, ids.resp);
    }
  }

  // Service decode order: a service is ready once every service it calls is decoded.
  std::map<std::string, std::set<std::string>> waits;
  for (const auto& s : callees) {
    for (const auto& r : graph.rpcs)
      if (r.callee == s)
        for (const auto* c : graph.children(r.id)) waits[s].insert(c->callee);
  }
  std::set<std::string> done;
  while (cbn.decode_order.size() < callees.size()) {
    bool progressed = false;
    for (const auto& s : callees) {
      if (done.count(s)) continue;
      const auto& w = waits[s];
      if (std::all_of(w.begin(), w.end(), [&](const std::string& d) { return done.count(d) > 0; })) {
        cbn.decode_order.push_back(s);
        done.insert(s);
        progressed = true;
      }
    }
    require(progressed, ErrorKind::kMalformedTrace, "service call graph has a cycle");
  }
  return cbn;
}

/// The changed services plus every service that transitively consumes their latencies.
inline std::set<std::string> descendants(const Cbn& cbn, const std::set<std::string>& changed) {
  std::set<std::string> out;
  std::deque<std::string> queue;
  for (const auto& s : changed) {
    require(cbn.has_service(s), ErrorKind::kLookup, "unknown service '" + s + "'");
    if (out.insert(s).second) queue.push_back(s);
  }
  while (!queue.empty()) {
    const auto s = queue.front();
    queue.pop_front();
    for (const auto& p : cbn.parent_services(s))
      if (out.insert(p).second) queue.push_back(p);
  }
  return out;
}

struct GraphDelta {
  std::vector<std::string> added;
  std::vector<std::string> removed;
  std::vector<std::string> reshaped;

  bool empty() const { return added.empty() && removed.empty() && reshaped.empty(); }
  bool operator==(const GraphDelta&) const = default;
};

inline GraphDelta graph_diff(const Cbn& old_cbn, const Cbn& new_cbn) {
  GraphDelta d;
  for (const auto& s : new_cbn.decode_order)
    if (!old_cbn.has_service(s)) d.added.push_back(s);
  for (const auto& s : old_cbn.decode_order)
    if (!new_cbn.has_service(s)) d.removed.push_back(s);
  for (const auto& s : new_cbn.decode_order) {
    if (!old_cbn.has_service(s)) continue;
    const bool reshaped = old_cbn.metrics(s) != new_cbn.metrics(s) ||
                          old_cbn.child_rpcs(s) != new_cbn.child_rpcs(s) ||
                          old_cbn.inbound_rpcs(s) != new_cbn.inbound_rpcs(s);
    if (reshaped) d.reshaped.push_back(s);
  }
  std::sort(d.added.begin(), d.added.end());
  std::sort(d.removed.begin(), d.removed.end());
  std::sort(d.reshaped.begin(), d.reshaped.end());
  return d;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const Span& s) {
  nlohmann::json j;
  j["trace_id"] = s.trace_id;
  j["rpc_id"] = s.rpc_id;
  j["parent_rpc_id"] = s.parent_rpc_id ? nlohmann::json(*s.parent_rpc_id) : nlohmann::json(nullptr);
  j["service"] = s.service;
  j["peer_service"] = s.peer_service;
  j["kind"] = s.kind == SpanKind::kClient ? "client" : "server";
  j["start_us"] = s.start_us;
  j["duration_us"] = s.duration_us;
  return j;
}

inline Span span_from_json(const nlohmann::json& j) {
  Span s;
  try {
    s.trace_id = j.at("trace_id").get<std::string>();
    s.rpc_id = j.at("rpc_id").get<std::string>();
    if (j.contains("parent_rpc_id") && !j.at("parent_rpc_id").is_null())
      s.parent_rpc_id = j.at("parent_rpc_id").get<std::string>();
    s.service = j.at("service").get<std::string>();
    s.peer_service = j.at("peer_service").get<std::string>();
    const auto kind = j.at("kind").get<std::string>();
    require(kind == "client" || kind == "server", ErrorKind::kMalformedTrace, "bad span kind " + kind);
    s.kind = kind == "client" ? SpanKind::kClient : SpanKind::kServer;
    s.start_us = j.at("start_us").get<std::int64_t>();
    s.duration_us = j.at("duration_us").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kMalformedTrace, std::string("bad span record: ") + e.what());
  }
  require(s.duration_us >= 0, ErrorKind::kMalformedTrace, "negative duration");
  return s;
}

inline void write_spans(std::ostream& out, const std::vector<Span>& spans) {
  for (const auto& s : spans) out << to_json(s).dump() << '\n';
}

inline std::vector<Span> read_spans(std::istream& in) {
  std::vector<Span> spans;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kMalformedTrace, std::string("unparseable span line: ") + e.what());
    }
    spans.push_back(span_from_json(j));
  }
  return spans;
}

inline std::vector<Span> read_spans_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path);
  return read_spans(in);
}

inline nlohmann::json to_json(const RpcGraph& g) {
  nlohmann::json j;
  j["services"] = g.services;
  j["root_rpc"] = g.root_rpc;
  auto& rpcs = j["rpcs"] = nlohmann::json::array();
  for (const auto& r : g.rpcs)
    rpcs.push_back({{"id", r.id},
                    {"caller", r.caller},
                    {"callee", r.callee},
                    {"parent", r.parent.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.parent)},
                    {"combine", to_string(r.combine)}});
  return j;
}

inline RpcGraph rpc_graph_from_json(const nlohmann::json& j) {
  RpcGraph g;
  g.services = j.at("services").get<std::vector<std::string>>();
  g.root_rpc = j.at("root_rpc").get<std::string>();
  for (const auto& r : j.at("rpcs")) {
    RpcEdge e;
    e.id = r.at("id").get<std::string>();
    e.caller = r.at("caller").get<std::string>();
    e.callee = r.at("callee").get<std::string>();
    e.parent = r.at("parent").is_null() ? "" : r.at("parent").get<std::string>();
    e.combine = parse_combine(r.at("combine").get<std::string>());
    g.rpcs.push_back(e);
  }
  validate(g);
  return g;
}

}  // namespace sage
