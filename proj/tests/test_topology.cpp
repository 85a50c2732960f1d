#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "sage/simulator.hpp"
#include "sage/topology.hpp"

using namespace sage;

namespace {

struct TraceBuilder {
  std::vector<Span> spans;
  std::string trace;

  // Adds a client/server span pair; the server span sits 10us inside the client span.
  void call(const std::string& rpc, const std::optional<std::string>& parent, const std::string& caller,
            const std::string& callee, std::int64_t start, std::int64_t dur) {
    spans.push_back({trace, rpc, parent, caller, callee, SpanKind::kClient, start, dur});
    spans.push_back({trace, rpc, parent, callee, caller, SpanKind::kServer, start + 5, dur - 10});
  }
};

// client -> S0 -> S1 -> S2 -> {S3, S4}
std::vector<Span> five_service_spans(int traces, bool parallel_leaves) {
  TraceBuilder b;
  for (int t = 0; t < traces; ++t) {
    b.trace = "t" + std::to_string(t);
    const std::int64_t o = t * 10000;
    b.call("a", std::nullopt, "client", "S0", o, 1000);
    b.call("b", "a", "S0", "S1", o + 20, 900);
    b.call("c", "b", "S1", "S2", o + 40, 800);
    b.call("d", "c", "S2", "S3", o + 60, 300);
    b.call("e", "c", "S2", "S4", parallel_leaves ? o + 70 : o + 400, 300);
  }
  return b.spans;
}

MetricSchema cpu_schema(const RpcGraph& g) {
  MetricSchema s;
  for (const auto& r : g.rpcs) s[r.callee] = {"cpu_util"};
  return s;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kIo;
}

// Random rpc tree: service i > 0 is called by a uniformly chosen earlier service.
RpcGraph random_tree(int n, Rng& rng) {
  RpcGraph g;
  g.services.push_back(kLoadSource);
  std::vector<std::string> inbound;
  for (int i = 0; i < n; ++i) {
    const std::string s = "S" + std::to_string(i);
    RpcEdge e;
    e.id = "rpc_" + s;
    e.callee = s;
    if (i == 0) {
      e.caller = kLoadSource;
    } else {
      const auto p = rng.index(static_cast<std::uint64_t>(i));
      e.caller = "S" + std::to_string(p);
      e.parent = inbound[p];
    }
    e.combine = rng.uniform() < 0.5 ? ChildCombine::kParallel : ChildCombine::kSequential;
    inbound.push_back(e.id);
    g.services.push_back(s);
    g.rpcs.push_back(e);
  }
  g.root_rpc = "rpc_S0";
  return g;
}

}  // namespace

TEST(RpcGraphInference, FiveServiceTraceRecoversTree) {
  const auto g = build_rpc_graph(five_service_spans(3, false));
  ASSERT_EQ(g.rpcs.size(), 5u);
  EXPECT_EQ(g.services, (std::vector<std::string>{"client", "S0", "S1", "S2", "S3", "S4"}));
  EXPECT_EQ(g.root_rpc, "a");
  EXPECT_EQ(g.frontend(), "S0");
  EXPECT_EQ(g.rpc("b").parent, "a");
  EXPECT_EQ(g.rpc("c").parent, "b");
  EXPECT_EQ(g.rpc("d").parent, "c");
  EXPECT_EQ(g.rpc("e").parent, "c");
  EXPECT_EQ(g.rpc("e").caller, "S2");
  EXPECT_EQ(g.rpc("c").combine, ChildCombine::kSequential);
}

TEST(RpcGraphInference, OverlappingSiblingsAreParallel) {
  const auto g = build_rpc_graph(five_service_spans(4, true));
  EXPECT_EQ(g.rpc("c").combine, ChildCombine::kParallel);
  EXPECT_EQ(g.rpc("a").combine, ChildCombine::kSequential);
}

TEST(RpcGraphInference, SingleRpc) {
  TraceBuilder b{{}, "only"};
  b.call("r", std::nullopt, "client", "S0", 0, 100);
  const auto g = build_rpc_graph(b.spans);
  ASSERT_EQ(g.rpcs.size(), 1u);
  EXPECT_EQ(g.root_rpc, "r");
  const auto cbn = build_cbn(g, cpu_schema(g));
  EXPECT_EQ(cbn.decode_order, std::vector<std::string>{"S0"});
  EXPECT_TRUE(is_acyclic(cbn));
}

TEST(RpcGraphInference, SameCallPathAcrossTracesIsOneRpc) {
  auto spans = five_service_spans(2, false);
  // Second trace renames its rpc ids; the call path is what identifies an rpc.
  for (auto& s : spans)
    if (s.trace_id == "t1") {
      s.rpc_id += "x";
      if (s.parent_rpc_id) *s.parent_rpc_id += "x";
    }
  EXPECT_EQ(build_rpc_graph(spans).rpcs.size(), 5u);
}

TEST(RpcGraphInference, Errors) {
  EXPECT_EQ(kind_of([] { build_rpc_graph({}); }), ErrorKind::kIncompleteTrace);

  auto orphan = five_service_spans(1, false);
  for (auto& s : orphan)
    if (s.rpc_id == "d") s.parent_rpc_id = "zz";
  EXPECT_EQ(kind_of([&] { build_rpc_graph(orphan); }), ErrorKind::kIncompleteTrace);

  auto missing_server = five_service_spans(1, false);
  missing_server.pop_back();
  EXPECT_EQ(kind_of([&] { build_rpc_graph(missing_server); }), ErrorKind::kIncompleteTrace);

  auto cyc = five_service_spans(1, false);
  for (auto& s : cyc)
    if (s.rpc_id == "a") s.parent_rpc_id = "c";
  EXPECT_EQ(kind_of([&] { build_rpc_graph(cyc); }), ErrorKind::kMalformedTrace);

  auto negative = five_service_spans(1, false);
  negative[0].duration_us = -1;
  EXPECT_EQ(kind_of([&] { build_rpc_graph(negative); }), ErrorKind::kMalformedTrace);

  auto shrunk = five_service_spans(1, false);
  shrunk[1].duration_us = shrunk[0].duration_us + 1;  // server outlasts client
  EXPECT_EQ(kind_of([&] { build_rpc_graph(shrunk); }), ErrorKind::kMalformedTrace);
}

TEST(RpcGraphInference, CombineOverrides) {
  auto g = build_rpc_graph(five_service_spans(2, false));
  apply_combine_overrides(g, {{"c", ChildCombine::kParallel}});
  EXPECT_EQ(g.rpc("c").combine, ChildCombine::kParallel);
  EXPECT_EQ(kind_of([&] { apply_combine_overrides(g, {{"nope", ChildCombine::kParallel}}); }), ErrorKind::kLookup);
}

TEST(Spans, JsonRoundTrip) {
  const auto spans = five_service_spans(2, true);
  std::stringstream ss;
  write_spans(ss, spans);
  const auto back = read_spans(ss);
  ASSERT_EQ(back.size(), spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    EXPECT_EQ(back[i].trace_id, spans[i].trace_id);
    EXPECT_EQ(back[i].rpc_id, spans[i].rpc_id);
    EXPECT_EQ(back[i].parent_rpc_id, spans[i].parent_rpc_id);
    EXPECT_EQ(back[i].service, spans[i].service);
    EXPECT_EQ(back[i].peer_service, spans[i].peer_service);
    EXPECT_EQ(back[i].kind, spans[i].kind);
    EXPECT_EQ(back[i].start_us, spans[i].start_us);
    EXPECT_EQ(back[i].duration_us, spans[i].duration_us);
  }
  std::stringstream bad("{\"trace_id\": 1}\n");
  EXPECT_EQ(kind_of([&] { read_spans(bad); }), ErrorKind::kMalformedTrace);
  std::stringstream garbage("not json\n");
  EXPECT_EQ(kind_of([&] { read_spans(garbage); }), ErrorKind::kMalformedTrace);
}

TEST(RpcGraphJson, RoundTrip) {
  const auto g = compose_graph({{ShapePart::Kind::kChain, 3}, {ShapePart::Kind::kFanout, 4}});
  const auto back = rpc_graph_from_json(to_json(g));
  EXPECT_EQ(back.services, g.services);
  EXPECT_EQ(back.rpcs, g.rpcs);
  EXPECT_EQ(back.root_rpc, g.root_rpc);
}

TEST(ChannelMetrics, Naming) {
  const auto m = channel_metric("rpc_S1", "net_util");
  EXPECT_EQ(m, "chan:rpc_S1:net_util");
  EXPECT_EQ(channel_of(m), std::optional<std::string>("rpc_S1"));
  EXPECT_EQ(channel_metric_base(m), "net_util");
  EXPECT_EQ(channel_of("cpu_util"), std::nullopt);
  EXPECT_EQ(channel_metric_base("cpu_util"), "cpu_util");
}

TEST(Cbn, ChainThreeEdges) {
  const auto g = chain_graph(3);
  MetricSchema schema;
  for (const auto* s : {"S0", "S1", "S2"}) schema[s] = {"cpu_util", "mem_util"};
  schema["S1"].push_back(channel_metric("rpc_S1", "net_util"));
  const auto cbn = build_cbn(g, schema);

  // 3 services x (metrics + latent) + 3 rpcs x 4 latency nodes.
  EXPECT_EQ(cbn.nodes.size(), 2u + 1 + 3 + 1 + 2 + 1 + 12);
  EXPECT_EQ(cbn.decode_order, (std::vector<std::string>{"S2", "S1", "S0"}));

  const int s1_server = cbn.find(NodeKind::kLatencyServer, "rpc_S1");
  const int s1_client = cbn.find(NodeKind::kLatencyClient, "rpc_S1");
  const int s2_client = cbn.find(NodeKind::kLatencyClient, "rpc_S2");
  const int s1_cpu = cbn.find(NodeKind::kMetric, "S1", "cpu_util");
  const int s1_net = cbn.find(NodeKind::kMetric, "S1", channel_metric("rpc_S1", "net_util"));
  const int s1_z = cbn.find(NodeKind::kLatent, "S1");
  ASSERT_GE(s1_server, 0);
  ASSERT_GE(s1_net, 0);
  EXPECT_TRUE(cbn.has_edge(s1_cpu, s1_server));
  EXPECT_TRUE(cbn.has_edge(s1_z, s1_server));
  EXPECT_TRUE(cbn.has_edge(s2_client, s1_server));  // child latency feeds the parent's server latency
  EXPECT_TRUE(cbn.has_edge(s1_server, s1_client));
  EXPECT_TRUE(cbn.has_edge(s1_net, cbn.find(NodeKind::kLatencyReq, "rpc_S1")));
  EXPECT_TRUE(cbn.has_edge(s1_net, cbn.find(NodeKind::kLatencyResp, "rpc_S1")));
  EXPECT_FALSE(cbn.has_edge(s1_net, s1_server));
  EXPECT_FALSE(cbn.has_edge(s1_server, s2_client));
  EXPECT_EQ(cbn.find(NodeKind::kLatent, "client"), -1);
  EXPECT_TRUE(is_acyclic(cbn));

  EXPECT_EQ(cbn.child_services("S0"), std::vector<std::string>{"S1"});
  EXPECT_EQ(cbn.parent_services("S2"), std::vector<std::string>{"S1"});
  EXPECT_TRUE(cbn.parent_services("S0").empty());
  EXPECT_EQ(cbn.frontend(), "S0");
}

TEST(Cbn, SchemaErrors) {
  const auto g = chain_graph(2);
  EXPECT_EQ(kind_of([&] { build_cbn(g, {{"S0", {"cpu_util"}}}); }), ErrorKind::kPrecondition);
  EXPECT_EQ(kind_of([&] {
              build_cbn(g, {{"S0", {"cpu_util", channel_metric("rpc_S1", "net_util")}}, {"S1", {"cpu_util"}}});
            }),
            ErrorKind::kPrecondition);
  const auto cbn = build_cbn(g, cpu_schema(g));
  EXPECT_EQ(kind_of([&] { cbn.metrics("S9"); }), ErrorKind::kLookup);
}

TEST(Cbn, HashTracksStructure) {
  const auto g = chain_graph(3);
  const auto a = build_cbn(g, cpu_schema(g));
  const auto b = build_cbn(g, cpu_schema(g));
  EXPECT_EQ(a.hash(), b.hash());
  auto schema = cpu_schema(g);
  schema["S1"].push_back("mem_util");
  EXPECT_NE(build_cbn(g, schema).hash(), a.hash());
}

TEST(Descendants, ChainAndFanout) {
  const auto chain = build_cbn(chain_graph(5), cpu_schema(chain_graph(5)));
  EXPECT_EQ(descendants(chain, {"S2"}), (std::set<std::string>{"S0", "S1", "S2"}));
  EXPECT_EQ(descendants(chain, {"S0"}), (std::set<std::string>{"S0"}));
  EXPECT_TRUE(descendants(chain, {}).empty());

  const auto fan = build_cbn(fanout_graph(5), cpu_schema(fanout_graph(5)));
  EXPECT_EQ(descendants(fan, {"S3"}), (std::set<std::string>{"S0", "S3"}));
  EXPECT_EQ(descendants(fan, {"S1", "S4"}), (std::set<std::string>{"S0", "S1", "S4"}));
  EXPECT_EQ(kind_of([&] { descendants(fan, {"S9"}); }), ErrorKind::kLookup);
}

TEST(Descendants, PropertyMonotoneAndClosed) {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(20));
    const auto g = random_tree(n, rng);
    const auto cbn = build_cbn(g, cpu_schema(g));
    std::set<std::string> a, b;
    for (const auto& s : cbn.decode_order) {
      const double u = rng.uniform();
      if (u < 0.2) a.insert(s);
      if (u < 0.5) b.insert(s);
    }
    const auto da = descendants(cbn, a);
    const auto db = descendants(cbn, b);
    EXPECT_TRUE(std::includes(db.begin(), db.end(), da.begin(), da.end()));
    EXPECT_TRUE(std::includes(da.begin(), da.end(), a.begin(), a.end()));
    EXPECT_EQ(descendants(cbn, da), da);
    if (!a.empty()) {
      EXPECT_TRUE(da.count("S0"));
    }
  }
}

TEST(Cbn, PropertyRandomTreesAcyclicWithLeavesFirst) {
  Rng rng(7);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(50));
    const auto g = random_tree(n, rng);
    const auto cbn = build_cbn(g, cpu_schema(g));
    ASSERT_TRUE(is_acyclic(cbn));
    ASSERT_EQ(cbn.decode_order.size(), static_cast<std::size_t>(n));
    EXPECT_EQ(cbn.decode_order.back(), "S0");
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < cbn.decode_order.size(); ++i) pos[cbn.decode_order[i]] = i;
    for (const auto& s : cbn.decode_order)
      for (const auto& c : cbn.child_services(s)) EXPECT_LT(pos[c], pos[s]);
    EXPECT_EQ(cbn.edges.size(), static_cast<std::size_t>(n) * 5 + static_cast<std::size_t>(n - 1));
  }
}

TEST(GraphDiff, MetricAddedAndServiceAdded) {
  const auto g5 = chain_graph(5);
  const auto base = build_cbn(g5, cpu_schema(g5));
  EXPECT_TRUE(graph_diff(base, base).empty());

  auto schema = cpu_schema(g5);
  schema["S2"].push_back("mem_util");
  const auto d1 = graph_diff(base, build_cbn(g5, schema));
  EXPECT_EQ(d1.reshaped, std::vector<std::string>{"S2"});
  EXPECT_TRUE(d1.added.empty());
  EXPECT_TRUE(d1.removed.empty());

  const auto g6 = chain_graph(6);
  const auto d2 = graph_diff(base, build_cbn(g6, cpu_schema(g6)));
  EXPECT_EQ(d2.added, std::vector<std::string>{"S5"});
  EXPECT_EQ(d2.reshaped, std::vector<std::string>{"S4"});
  EXPECT_TRUE(d2.removed.empty());

  const auto d3 = graph_diff(build_cbn(g6, cpu_schema(g6)), base);
  EXPECT_EQ(d3.removed, std::vector<std::string>{"S5"});
  EXPECT_EQ(d3.reshaped, std::vector<std::string>{"S4"});
}
