#pragma once

// Windowed latency/metric samples: aggregation from traces, QoS labels,
// normal values, class balancing, replay interleaving, standardization and
// on-disk persistence.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sage/common.hpp"
#include "sage/simulator.hpp"
#include "sage/topology.hpp"

namespace sage {

inline constexpr double kQosPercentile = 99.0;

enum class LatencyVar { kClient, kServer, kReq, kResp };

inline constexpr LatencyVar kLatencyVars[] = {LatencyVar::kClient, LatencyVar::kServer, LatencyVar::kReq,
                                              LatencyVar::kResp};

inline const char* to_string(LatencyVar v) {
  switch (v) {
    case LatencyVar::kClient: return "client";
    case LatencyVar::kServer: return "server";
    case LatencyVar::kReq: return "req";
    case LatencyVar::kResp: return "resp";
  }
  return "?";
}

struct LatencyTuple {
  double client = 0, server = 0, req = 0, resp = 0;

  double get(LatencyVar v) const {
    switch (v) {
      case LatencyVar::kClient: return client;
      case LatencyVar::kServer: return server;
      case LatencyVar::kReq: return req;
      case LatencyVar::kResp: return resp;
    }
    return 0;
  }
  double& get(LatencyVar v) {
    switch (v) {
      case LatencyVar::kClient: return client;
      case LatencyVar::kServer: return server;
      case LatencyVar::kReq: return req;
      case LatencyVar::kResp: return resp;
    }
    return client;
  }
};

struct WindowSample {
  std::int64_t window_index = 0;
  std::vector<double> percentiles;
  std::map<std::string, std::vector<LatencyTuple>> y;  // rpc -> one tuple per percentile
  MetricMap x;
  double e2e_p99_us = 0;
  bool qos_met = true;
  double offered_load_rps = 0;
};

/// Nearest-rank percentile of an ascending sequence.
inline double nearest_rank(const std::vector<double>& sorted, double p) {
  require(!sorted.empty(), ErrorKind::kEmptyWindow, "percentile of an empty sequence");
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

namespace detail {

// Per-rpc latency columns gathered from one window.
struct LatencyColumns {
  std::vector<double> client, server, req, resp;

  std::vector<double>& col(LatencyVar v) {
    switch (v) {
      case LatencyVar::kClient: return client;
      case LatencyVar::kServer: return server;
      case LatencyVar::kReq: return req;
      case LatencyVar::kResp: return resp;
    }
    return client;
  }
};

inline WindowSample finish_sample(std::int64_t window, const RpcGraph& graph,
                                  std::map<std::string, LatencyColumns>& cols, MetricMap metrics,
                                  double qos_target_us, const std::vector<double>& percentiles, double load) {
  WindowSample s;
  s.window_index = window;
  s.percentiles = percentiles;
  s.x = std::move(metrics);
  s.offered_load_rps = load;
  for (auto& [rpc, c] : cols) {
    auto& tuples = s.y[rpc];
    tuples.resize(percentiles.size());
    for (auto v : kLatencyVars) {
      auto& col = c.col(v);
      std::sort(col.begin(), col.end());
      for (std::size_t p = 0; p < percentiles.size(); ++p) tuples[p].get(v) = nearest_rank(col, percentiles[p]);
    }
  }
  s.e2e_p99_us = nearest_rank(cols.at(graph.root_rpc).client, kQosPercentile);
  s.qos_met = s.e2e_p99_us <= qos_target_us;
  return s;
}

}  // namespace detail

/// Aggregates a simulated window. Request/response delays come from the
/// channel model carried in the trace.
inline WindowSample aggregate(const WindowTrace& trace, double qos_target_us, const std::vector<double>& percentiles) {
  require(trace.n_requests >= 1 && trace.graph, ErrorKind::kEmptyWindow,
          "window " + std::to_string(trace.window_index) + " has no requests");
  const auto& rpcs = trace.graph->rpcs;
  std::map<std::string, detail::LatencyColumns> cols;
  for (std::size_t k = 0; k < rpcs.size(); ++k) {
    auto& c = cols[rpcs[k].id];
    for (int i = 0; i < trace.n_requests; ++i) {
      const auto& t = trace.at(i, k);
      c.client.push_back(static_cast<double>(t.client_us()));
      c.server.push_back(static_cast<double>(t.server_us));
      c.req.push_back(static_cast<double>(t.req_us));
      c.resp.push_back(static_cast<double>(t.resp_us));
    }
  }
  return detail::finish_sample(trace.window_index, *trace.graph, cols, trace.metrics, qos_target_us, percentiles,
                               trace.offered_load_rps);
}

/// Aggregates raw spans for one window. Network delays are not observed in
/// spans, so each direction is taken as half of (client - server).
inline WindowSample aggregate_spans(const std::vector<Span>& spans, const RpcGraph& graph, const MetricMap& metrics,
                                    std::int64_t window_index, double qos_target_us,
                                    const std::vector<double>& percentiles, double offered_load_rps = 0) {
  require(!spans.empty(), ErrorKind::kEmptyWindow, "window " + std::to_string(window_index) + " has no spans");
  std::map<std::pair<std::string, std::string>, std::pair<const Span*, const Span*>> pairs;
  for (const auto& s : spans) {
    auto& slot = pairs[{s.trace_id, s.rpc_id}];
    (s.kind == SpanKind::kClient ? slot.first : slot.second) = &s;
  }
  std::map<std::string, detail::LatencyColumns> cols;
  for (const auto& r : graph.rpcs) cols[r.id];
  for (const auto& [key, pr] : pairs) {
    require(pr.first && pr.second, ErrorKind::kIncompleteTrace, "rpc " + key.second + " in trace " + key.first +
                                                                     " lacks its client or server span");
    auto it = cols.find(key.second);
    require(it != cols.end(), ErrorKind::kLookup, "span rpc '" + key.second + "' not in the rpc graph");
    const double c = static_cast<double>(pr.first->duration_us);
    const double s = static_cast<double>(pr.second->duration_us);
    it->second.client.push_back(c);
    it->second.server.push_back(s);
    it->second.req.push_back((c - s) / 2.0);
    it->second.resp.push_back((c - s) / 2.0);
  }
  for (const auto& [rpc, c] : cols)
    require(!c.client.empty(), ErrorKind::kEmptyWindow, "no observations of rpc " + rpc);
  return detail::finish_sample(window_index, graph, cols, metrics, qos_target_us, percentiles, offered_load_rps);
}

// ---------------------------------------------------------------------------
// Normal values

using NormalValues = MetricMap;

inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorKind::kInsufficientBaseline, "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per-metric medians over the QoS-met windows only.
inline NormalValues compute_normal_values(const std::vector<WindowSample>& samples) {
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  bool any = false;
  for (const auto& s : samples) {
    if (!s.qos_met) continue;
    any = true;
    for (const auto& [svc, metrics] : s.x)
      for (const auto& [m, v] : metrics) values[svc][m].push_back(v);
  }
  require(any, ErrorKind::kInsufficientBaseline, "no QoS-met samples to derive normal values from");
  NormalValues out;
  for (auto& [svc, metrics] : values)
    for (auto& [m, v] : metrics) out[svc][m] = median(std::move(v));
  return out;
}

// ---------------------------------------------------------------------------
// Class balance and replay

struct BalanceResult {
  std::vector<WindowSample> samples;
  bool single_class = false;  // input had only one class; returned unchanged
};

/// Oversamples the minority class with replacement until
/// minority >= floor * majority. Originals are kept, in order, at the front.
inline BalanceResult balance(const std::vector<WindowSample>& samples, Rng& rng, double floor = 0.5) {
  require(floor > 0 && floor <= 1, ErrorKind::kPrecondition, "balance floor must lie in (0, 1]");
  BalanceResult out{samples, false};
  std::vector<std::size_t> met, violated;
  for (std::size_t i = 0; i < samples.size(); ++i) (samples[i].qos_met ? met : violated).push_back(i);
  if (met.empty() || violated.empty()) {
    out.single_class = true;
    return out;
  }
  const auto& minority = met.size() < violated.size() ? met : violated;
  const std::size_t majority = std::max(met.size(), violated.size());
  const auto target = static_cast<std::size_t>(std::ceil(floor * static_cast<double>(majority) - 1e-9));
  for (std::size_t have = minority.size(); have < target; ++have)
    out.samples.push_back(samples[minority[rng.index(minority.size())]]);
  return out;
}

struct ReplayBatch {
  std::vector<std::size_t> current;
  std::vector<std::size_t> previous;
};

/// Splits a shuffled pass over the current data into batches, each topped up
/// with ceil(replay_fraction * batch_size) samples drawn uniformly from the previous data.
inline std::vector<ReplayBatch> interleave_replay(std::size_t n_current, std::size_t n_previous,
                                                  double replay_fraction, std::size_t batch_size, Rng& rng) {
  require(replay_fraction >= 0 && replay_fraction < 1, ErrorKind::kPrecondition, "replay_fraction must lie in [0,1)");
  require(batch_size >= 1, ErrorKind::kPrecondition, "batch size must be >= 1");
  const std::size_t replay =
      n_previous == 0 ? 0 : static_cast<std::size_t>(std::ceil(replay_fraction * static_cast<double>(batch_size)));
  const std::size_t per_batch = std::max<std::size_t>(1, batch_size - std::min(replay, batch_size - 1));
  std::vector<std::size_t> order(n_current);
  for (std::size_t i = 0; i < n_current; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<ReplayBatch> batches;
  for (std::size_t start = 0; start < n_current; start += per_batch) {
    ReplayBatch b;
    b.current.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n_current, start + per_batch)));
    for (std::size_t r = 0; r < replay; ++r) b.previous.push_back(rng.index(n_previous));
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Feature layout

enum class FeatureKind { kMetric, kLatency, kEndToEnd };

struct Feature {
  std::string name;
  FeatureKind kind = FeatureKind::kMetric;
  std::string service;  // owning unit
  std::string metric;
  std::string rpc;
  LatencyVar var = LatencyVar::kClient;
  std::size_t pct = 0;
  bool log_scale = false;
};

inline std::string metric_feature_name(const std::string& service, const std::string& metric) {
  return "x/" + service + "/" + metric;
}

inline std::string latency_feature_name(const std::string& rpc, LatencyVar v, double pct) {
  std::string p = std::to_string(pct);
  p.erase(p.find_last_not_of('0') + 1);
  if (!p.empty() && p.back() == '.') p.pop_back();
  return "y/" + rpc + "/" + to_string(v) + "/p" + p;
}

inline const std::string kEndToEndFeature = "e2e/p99";

/// Ordered feature list. The order is part of the on-disk contract: per
/// service in decode order, its metrics then its inbound rpc latency tuples;
/// the end-to-end tail feature last.
class FeatureSchema {
 public:
  FeatureSchema() = default;

  FeatureSchema(const Cbn& cbn, std::vector<double> percentiles) : percentiles_(std::move(percentiles)) {
    for (const auto& s : cbn.decode_order) {
      for (const auto& m : cbn.metrics(s)) {
        Feature f;
        f.name = metric_feature_name(s, m);
        f.kind = FeatureKind::kMetric;
        f.service = s;
        f.metric = m;
        f.log_scale = false;
        add(f);
      }
      for (const auto& rpc : cbn.inbound_rpcs(s))
        for (std::size_t p = 0; p < percentiles_.size(); ++p)
          for (auto v : kLatencyVars) {
            Feature f;
            f.name = latency_feature_name(rpc, v, percentiles_[p]);
            f.kind = FeatureKind::kLatency;
            f.service = s;
            f.rpc = rpc;
            f.var = v;
            f.pct = p;
            f.log_scale = true;
            add(f);
          }
    }
    Feature e;
    e.name = kEndToEndFeature;
    e.kind = FeatureKind::kEndToEnd;
    e.service = cbn.frontend();
    e.log_scale = true;
    add(e);
  }

  std::size_t size() const { return features_.size(); }
  const std::vector<Feature>& features() const { return features_; }
  const Feature& operator[](std::size_t i) const { return features_[i]; }
  const std::vector<double>& percentiles() const { return percentiles_; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index(const std::string& name) const {
    auto i = find(name);
    require(i.has_value(), ErrorKind::kLookup, "unknown feature '" + name + "'");
    return *i;
  }

  std::vector<double> flatten(const WindowSample& s) const {
    std::vector<double> out(features_.size());
    for (std::size_t i = 0; i < features_.size(); ++i) {
      const auto& f = features_[i];
      switch (f.kind) {
        case FeatureKind::kMetric: {
          auto svc = s.x.find(f.service);
          require(svc != s.x.end(), ErrorKind::kLookup, "sample lacks metrics for service " + f.service);
          auto m = svc->second.find(f.metric);
          require(m != svc->second.end(), ErrorKind::kLookup, "sample lacks metric " + f.name);
          out[i] = m->second;
          break;
        }
        case FeatureKind::kLatency: {
          auto r = s.y.find(f.rpc);
          require(r != s.y.end() && r->second.size() > f.pct, ErrorKind::kLookup, "sample lacks latency " + f.name);
          out[i] = r->second[f.pct].get(f.var);
          break;
        }
        case FeatureKind::kEndToEnd: out[i] = s.e2e_p99_us; break;
      }
    }
    return out;
  }

  WindowSample unflatten(const std::vector<double>& v) const {
    require(v.size() == features_.size(), ErrorKind::kConsistency, "feature vector length mismatch");
    WindowSample s;
    s.percentiles = percentiles_;
    for (std::size_t i = 0; i < features_.size(); ++i) {
      const auto& f = features_[i];
      switch (f.kind) {
        case FeatureKind::kMetric: s.x[f.service][f.metric] = v[i]; break;
        case FeatureKind::kLatency: {
          auto& t = s.y[f.rpc];
          if (t.size() < percentiles_.size()) t.resize(percentiles_.size());
          t[f.pct].get(f.var) = v[i];
          break;
        }
        case FeatureKind::kEndToEnd: s.e2e_p99_us = v[i]; break;
      }
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["percentiles"] = percentiles_;
    j["features"] = nlohmann::json::array();
    for (const auto& f : features_) {
      nlohmann::json e{{"name", f.name}, {"service", f.service}, {"log_scale", f.log_scale}};
      switch (f.kind) {
        case FeatureKind::kMetric:
          e["kind"] = "metric";
          e["metric"] = f.metric;
          break;
        case FeatureKind::kLatency:
          e["kind"] = "latency";
          e["rpc"] = f.rpc;
          e["var"] = to_string(f.var);
          e["pct"] = f.pct;
          break;
        case FeatureKind::kEndToEnd: e["kind"] = "e2e"; break;
      }
      j["features"].push_back(e);
    }
    return j;
  }

  static FeatureSchema from_json(const nlohmann::json& j) {
    FeatureSchema s;
    s.percentiles_ = j.at("percentiles").get<std::vector<double>>();
    for (const auto& e : j.at("features")) {
      Feature f;
      f.name = e.at("name").get<std::string>();
      f.service = e.at("service").get<std::string>();
      f.log_scale = e.at("log_scale").get<bool>();
      const auto kind = e.at("kind").get<std::string>();
      if (kind == "metric") {
        f.kind = FeatureKind::kMetric;
        f.metric = e.at("metric").get<std::string>();
      } else if (kind == "latency") {
        f.kind = FeatureKind::kLatency;
        f.rpc = e.at("rpc").get<std::string>();
        const auto var = e.at("var").get<std::string>();
        for (auto v : kLatencyVars)
          if (var == to_string(v)) f.var = v;
        f.pct = e.at("pct").get<std::size_t>();
      } else {
        f.kind = FeatureKind::kEndToEnd;
      }
      s.add(f);
    }
    return s;
  }

  bool operator==(const FeatureSchema& o) const {
    if (features_.size() != o.features_.size() || percentiles_ != o.percentiles_) return false;
    for (std::size_t i = 0; i < features_.size(); ++i)
      if (features_[i].name != o.features_[i].name) return false;
    return true;
  }

 private:
  void add(Feature f) {
    require(index_.emplace(f.name, features_.size()).second, ErrorKind::kConsistency, "duplicate feature " + f.name);
    features_.push_back(std::move(f));
  }

  std::vector<double> percentiles_;
  std::vector<Feature> features_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Standardization

struct NormalizerEntry {
  std::string name;
  double mean = 0.0;
  double std = 1.0;
  bool log_scale = false;
  bool passthrough = false;  // zero variance on the fit set: carried through untransformed
  bool fitted = false;
};

class Normalizer {
 public:
  Normalizer() = default;

  /// Fits on the rows of `rows` (each in schema order).
  static Normalizer fit(const FeatureSchema& schema, const std::vector<std::vector<double>>& rows) {
    Normalizer n;
    for (const auto& f : schema.features()) n.entries_.push_back({f.name, 0.0, 1.0, f.log_scale, false, false});
    n.fit_missing(rows);
    return n;
  }

  /// Fits only entries that have no statistics yet (features new to a reshaped model).
  void fit_missing(const std::vector<std::vector<double>>& rows) {
    require(!rows.empty(), ErrorKind::kPrecondition, "cannot fit a normalizer on an empty set");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& e = entries_[i];
      if (e.fitted) continue;
      double sum = 0;
      for (const auto& r : rows) sum += forward_raw(e, r[i]);
      const double mean = sum / static_cast<double>(rows.size());
      double ss = 0;
      for (const auto& r : rows) {
        const double d = forward_raw(e, r[i]) - mean;
        ss += d * d;
      }
      const double sd = std::sqrt(ss / static_cast<double>(rows.size()));
      e.fitted = true;
      if (!(sd > 1e-12)) {
        e.passthrough = true;
        e.mean = 0.0;
        e.std = 1.0;
      } else {
        e.passthrough = false;
        e.mean = mean;
        e.std = sd;
      }
    }
  }

  /// Same statistics re-keyed onto another schema; unknown features come back unfitted.
  Normalizer realign(const FeatureSchema& schema) const {
    Normalizer n;
    for (const auto& f : schema.features()) {
      auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == f.name; });
      n.entries_.push_back(it != entries_.end() ? *it : NormalizerEntry{f.name, 0.0, 1.0, f.log_scale, false, false});
    }
    return n;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<NormalizerEntry>& entries() const { return entries_; }
  bool complete() const {
    return std::all_of(entries_.begin(), entries_.end(), [](const auto& e) { return e.fitted; });
  }

  double apply(std::size_t i, double raw) const {
    const auto& e = entries_[i];
    if (e.passthrough) return raw;
    return (forward_raw(e, raw) - e.mean) / e.std;
  }

  double invert(std::size_t i, double z) const {
    const auto& e = entries_[i];
    if (e.passthrough) return z;
    const double t = z * e.std + e.mean;
    return e.log_scale ? std::expm1(t) : t;
  }

  std::vector<double> apply(const std::vector<double>& raw) const {
    require(raw.size() == entries_.size(), ErrorKind::kConsistency, "feature vector length mismatch");
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = apply(i, raw[i]);
    return out;
  }

  std::vector<double> invert(const std::vector<double>& z) const {
    require(z.size() == entries_.size(), ErrorKind::kConsistency, "feature vector length mismatch");
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = invert(i, z[i]);
    return out;
  }

  std::vector<std::string> flagged() const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (e.passthrough) out.push_back(e.name);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries_)
      j.push_back({{"name", e.name},
                   {"mean", e.mean},
                   {"std", e.std},
                   {"log_scale", e.log_scale},
                   {"passthrough", e.passthrough},
                   {"fitted", e.fitted}});
    return j;
  }

  static Normalizer from_json(const nlohmann::json& j) {
    Normalizer n;
    for (const auto& e : j)
      n.entries_.push_back({e.at("name").get<std::string>(), e.at("mean").get<double>(), e.at("std").get<double>(),
                            e.at("log_scale").get<bool>(), e.at("passthrough").get<bool>(),
                            e.value("fitted", true)});
    return n;
  }

 private:
  static double forward_raw(const NormalizerEntry& e, double raw) {
    return e.log_scale ? std::log1p(std::max(0.0, raw)) : raw;
  }

  std::vector<NormalizerEntry> entries_;
};

inline Normalizer fit_normalizer(const FeatureSchema& schema, const std::vector<WindowSample>& samples) {
  std::vector<std::vector<double>> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(schema.flatten(s));
  return Normalizer::fit(schema, rows);
}

// ---------------------------------------------------------------------------
// Persistence

struct Dataset {
  std::string name;
  RpcGraph graph;
  MetricSchema metric_schema;
  FeatureSchema schema;
  double qos_target_us = 0;
  std::vector<WindowSample> samples;
  Normalizer normalizer;
  std::optional<NormalValues> normals;
  std::vector<WindowLabels> labels;  // optional ground truth, aligned with samples

  Cbn cbn() const { return build_cbn(graph, metric_schema); }
};

inline nlohmann::json to_json(const WindowLabels& labels) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& l : labels) j.push_back({{"service", l.service}, {"kind", to_string(l.kind)}});
  return j;
}

inline WindowLabels labels_from_json(const nlohmann::json& j) {
  WindowLabels out;
  for (const auto& e : j)
    out.insert({e.at("service").get<std::string>(), parse_injection_kind(e.at("kind").get<std::string>())});
  return out;
}

inline nlohmann::json sample_to_json(const FeatureSchema& schema, const WindowSample& s) {
  return {{"window_index", s.window_index},
          {"qos_met", s.qos_met},
          {"e2e_p99_us", s.e2e_p99_us},
          {"offered_load_rps", s.offered_load_rps},
          {"features", schema.flatten(s)}};
}

inline WindowSample sample_from_json(const FeatureSchema& schema, const nlohmann::json& j, double qos_target_us) {
  auto s = schema.unflatten(j.at("features").get<std::vector<double>>());
  s.window_index = j.at("window_index").get<std::int64_t>();
  s.offered_load_rps = j.value("offered_load_rps", 0.0);
  s.e2e_p99_us = j.at("e2e_p99_us").get<double>();
  s.qos_met = s.e2e_p99_us <= qos_target_us;
  return s;
}

namespace detail {

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kIo, p.string() + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json metric_schema_to_json(const MetricSchema& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [s, names] : m) j[s] = names;
  return j;
}

inline MetricSchema metric_schema_from_json(const nlohmann::json& j) {
  MetricSchema m;
  for (const auto& [s, names] : j.items()) m[s] = names.get<std::vector<std::string>>();
  return m;
}

/// Writes schema.json, samples.jsonl, normalizer.json, normal_values.json and,
/// when present, labels.jsonl.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  nlohmann::json schema = d.schema.to_json();
  schema["name"] = d.name;
  schema["qos_target_us"] = d.qos_target_us;
  schema["rpc_graph"] = to_json(d.graph);
  schema["metric_schema"] = metric_schema_to_json(d.metric_schema);
  detail::write_json_file(dir / "schema.json", schema);
  {
    std::ofstream out(dir / "samples.jsonl");
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write samples");
    out.precision(17);
    for (const auto& s : d.samples) out << sample_to_json(d.schema, s).dump() << '\n';
  }
  detail::write_json_file(dir / "normalizer.json", d.normalizer.to_json());
  if (d.normals) detail::write_json_file(dir / "normal_values.json", nlohmann::json(*d.normals));
  if (!d.labels.empty()) {
    std::ofstream out(dir / "labels.jsonl");
    for (std::size_t i = 0; i < d.labels.size(); ++i)
      out << nlohmann::json{{"window_index", d.samples[i].window_index}, {"injections", to_json(d.labels[i])}}.dump()
          << '\n';
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  const auto schema = detail::read_json_file(dir / "schema.json");
  d.name = schema.value("name", std::string());
  d.qos_target_us = schema.at("qos_target_us").get<double>();
  d.graph = rpc_graph_from_json(schema.at("rpc_graph"));
  d.metric_schema = metric_schema_from_json(schema.at("metric_schema"));
  d.schema = FeatureSchema::from_json(schema);
  require(d.schema == FeatureSchema(d.cbn(), d.schema.percentiles()), ErrorKind::kConsistency,
          "feature order in schema.json does not match the topology");
  {
    std::ifstream in(dir / "samples.jsonl");
    require(static_cast<bool>(in), ErrorKind::kIo, "cannot open samples.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      d.samples.push_back(sample_from_json(d.schema, nlohmann::json::parse(line), d.qos_target_us));
    }
  }
  d.normalizer = Normalizer::from_json(detail::read_json_file(dir / "normalizer.json"));
  if (std::filesystem::exists(dir / "normal_values.json"))
    d.normals = detail::read_json_file(dir / "normal_values.json").get<NormalValues>();
  if (std::filesystem::exists(dir / "labels.jsonl")) {
    std::ifstream in(dir / "labels.jsonl");
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) d.labels.push_back(labels_from_json(nlohmann::json::parse(line).at("injections")));
  }
  return d;
}

}  // namespace sage
