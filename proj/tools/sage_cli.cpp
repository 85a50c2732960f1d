// sage: simulate, train, diagnose, run, eval, retrain.

#include <filesystem>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "sage/sage.hpp"

namespace fs = std::filesystem;
using namespace sage;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  std::string config;
  std::string out;
};

nlohmann::json read_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  return detail::read_json_file(path);
}

nlohmann::json require_config(const Globals& g, const char* cmd) {
  require(!g.config.empty(), ErrorKind::kInvalidConfig, std::string(cmd) + " needs --config <topology file>");
  return read_config(g.config);
}

fs::path out_dir(const Globals& g, const char* fallback) {
  fs::path p = g.out.empty() ? fs::path(fallback) : fs::path(g.out);
  fs::create_directories(p);
  return p;
}

std::string cluster_name(const nlohmann::json& cfg, const std::string& path) {
  if (cfg.contains("name")) return cfg.at("name").get<std::string>();
  return path.empty() ? std::string("topology") : fs::path(path).stem().string();
}

// simulate ------------------------------------------------------------------

struct SimulateArgs {
  std::string schedule;
  std::int64_t windows = 0;
  double qos = 0;
  std::uint64_t cluster_seed = 7;
};

int cmd_simulate(const Globals& g, const SimulateArgs& a) {
  const auto cfg = require_config(g, "simulate");
  const auto settings = settings_from_config(cfg);
  auto cluster = make_cluster(cfg, a.cluster_seed);
  const std::int64_t n = a.windows > 0 ? a.windows : settings.windows;
  Rng rng(g.seed);
  const Schedule schedule = a.schedule.empty() ? random_schedule(cluster, n, rng) : load_schedule(a.schedule);
  double qos = a.qos > 0 ? a.qos : cluster.config().qos_target_us;
  if (qos <= 0) qos = calibrate_qos(cfg, a.cluster_seed, settings.calibration_windows, g.seed ^ 0xca11b8);

  Dataset d;
  d.name = cluster_name(cfg, g.config);
  d.graph = cluster.graph();
  d.metric_schema = cluster.metric_schema();
  d.schema = FeatureSchema(cluster.cbn(), cluster.config().percentiles);
  d.qos_target_us = qos;
  simulate(cluster, schedule, n, rng, [&](WindowTrace&& t, const WindowLabels& l) {
    d.samples.push_back(aggregate(t, qos, cluster.config().percentiles));
    d.labels.push_back(l);
  });
  d.normalizer = fit_normalizer(d.schema, d.samples);
  std::size_t violations = 0;
  for (const auto& s : d.samples) violations += s.qos_met ? 0 : 1;
  if (violations < d.samples.size()) d.normals = compute_normal_values(d.samples);
  const auto dir = out_dir(g, "dataset");
  save_dataset(dir, d);
  detail::write_json_file(dir / "schedule.json", to_json(schedule));
  std::cout << "wrote " << d.samples.size() << " windows (" << violations << " violating, QoS target "
            << std::llround(qos) << " us) to " << dir.string() << '\n';
  return 0;
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  int epochs = -1;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const auto settings = settings_from_config(read_config(g.config));
  auto d = load_dataset(a.data);
  Rng rng(g.seed);
  auto hyper = settings.hyper;
  hyper.percentiles = d.schema.percentiles();
  auto model = init_gvae(d.cbn(), hyper, rng);
  model.normalizer = d.normalizer.realign(model.schema);
  const auto normals = d.normals ? *d.normals : compute_normal_values(d.samples);
  const auto balanced = balance(d.samples, rng);
  if (balanced.single_class) std::cerr << "warning: training data has a single QoS class\n";
  const int epochs = a.epochs >= 0 ? a.epochs : settings.epochs;
  const auto log = train(model, balanced.samples, epochs, rng);
  const auto dir = out_dir(g, "checkpoint");
  save_checkpoint(dir, model, normals, d.qos_target_us);
  nlohmann::json jl{{"seconds", log.seconds}, {"epochs", nlohmann::json::array()}};
  for (const auto& e : log.epochs) jl["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"nll", e.nll}, {"kl", e.kl}});
  detail::write_json_file(dir / "train_log.json", jl);
  std::cout << "trained " << model.units.size() << " units, " << model.parameter_count() << " parameters, "
            << epochs << " epochs in " << std::fixed << std::setprecision(1) << log.seconds << " s";
  if (!log.epochs.empty()) std::cout << ", final loss " << std::setprecision(3) << log.epochs.back().loss;
  std::cout << "\ncheckpoint: " << dir.string() << '\n';
  return 0;
}

// diagnose ------------------------------------------------------------------

struct DiagnoseArgs {
  std::string checkpoint;
  std::string window;
  double qos = 0;
  double tau = 0;
  std::size_t samples = 0;
  bool force = false;
};

// A window file is either one line of samples.jsonl (feature vector form) or
// raw observations: {"window_index", "spans" | "spans_file", "metrics"}.
WindowSample read_window(const GvaeModel& m, const std::string& path, double qos) {
  const auto j = detail::read_json_file(path);
  if (j.contains("features")) return sample_from_json(m.schema, j, qos);
  std::vector<Span> spans;
  if (j.contains("spans_file")) {
    auto p = fs::path(j.at("spans_file").get<std::string>());
    if (p.is_relative()) p = fs::path(path).parent_path() / p;
    spans = read_spans_file(p.string());
  } else {
    for (const auto& s : j.at("spans")) spans.push_back(span_from_json(s));
  }
  const auto metrics = j.at("metrics").get<MetricMap>();
  return aggregate_spans(spans, m.cbn.graph, metrics, j.value("window_index", std::int64_t{0}), qos,
                         m.hyper.percentiles, j.value("offered_load_rps", 0.0));
}

int cmd_diagnose(const Globals& g, const DiagnoseArgs& a) {
  const auto cfg = read_config(g.config);
  auto ck = load_checkpoint(a.checkpoint);
  const double qos = a.qos > 0 ? a.qos : ck.qos_target_us.value_or(0.0);
  require(qos > 0, ErrorKind::kInvalidConfig, "no QoS target: pass --qos or use a checkpoint that records one");
  require(ck.normals.has_value(), ErrorKind::kInsufficientBaseline, "checkpoint carries no normal values");
  auto rc = cfg.contains("rca") ? rca_config_from_json(cfg.at("rca")) : RcaConfig{};
  if (a.tau > 0) rc.tau = a.tau;
  if (a.samples > 0) rc.n_samples = a.samples;
  rc.force = rc.force || a.force;
  rc.check();
  const auto sample = read_window(ck.model, a.window, qos);
  Rng rng(g.seed);
  const auto report = diagnose(ck.model, sample, *ck.normals, qos, rc, rng);
  std::cout << render(report);
  if (!g.out.empty()) {
    const auto dir = out_dir(g, ".");
    detail::write_json_file(dir / "report.json", to_json(report));
  }
  return 0;
}

// run -----------------------------------------------------------------------

struct RunArgs {
  std::string checkpoint;
  std::string schedule;
  std::int64_t windows = 30;
  std::uint64_t cluster_seed = 7;
  std::string forced_culprit;
  std::string forced_metric = "cpu_util";
};

int cmd_run(const Globals& g, const RunArgs& a) {
  const auto cfg = require_config(g, "run");
  auto ck = load_checkpoint(a.checkpoint);
  auto cluster = make_cluster(cfg, a.cluster_seed);
  require(cluster.cbn().hash() == ck.model.cbn_hash(), ErrorKind::kConsistency,
          "the topology in --config does not match the checkpoint's CBN");
  double qos = cluster.config().qos_target_us > 0 ? cluster.config().qos_target_us : ck.qos_target_us.value_or(0.0);
  require(qos > 0, ErrorKind::kInvalidConfig, "no QoS target in config or checkpoint");
  require(ck.normals.has_value(), ErrorKind::kInsufficientBaseline, "checkpoint carries no normal values");
  const Schedule schedule = a.schedule.empty() ? Schedule{} : load_schedule(a.schedule);
  install(cluster, schedule);
  ActuatorConfig ac;
  if (cfg.contains("rca")) ac.rca = rca_config_from_json(cfg.at("rca"));
  if (!a.forced_culprit.empty()) {
    ac.forced_culprit = a.forced_culprit;
    ac.forced_metric = a.forced_metric;
  }
  Rng rng(g.seed);
  const auto log = control_loop(ck.model, cluster, schedule, *ck.normals, qos, ac, rng, a.windows);
  const auto dir = out_dir(g, "episode");
  write_episode_log((dir / "episode.jsonl").string(), log);
  write_timeline_csv(dir / "timeline.csv", log);
  write_timeline_svg(dir / "timeline.svg", log);
  std::size_t violating = 0;
  for (const auto& r : log.records) {
    violating += r.qos_met ? 0 : 1;
    if (r.action)
      std::cout << "window " << r.window << ": " << to_string(r.action->kind) << " on " << r.action->service
                << (r.outcome == ActionOutcome::kApplied ? "" : " (cap exceeded)") << '\n';
  }
  std::cout << log.records.size() << " windows, " << violating << " violating, " << log.action_count()
            << " actions";
  if (log.first_diagnosis())
    std::cout << ", recovered within 5 windows of first diagnosis: " << (log.recovered_within(5) ? "yes" : "no");
  std::cout << "\nepisode log: " << (dir / "episode.jsonl").string() << '\n';
  return 0;
}

// eval ----------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> topologies;
  int repeats = 1;
  int epochs = -1;
  std::int64_t train_windows = 0;
  unsigned threads = 1;
  std::uint64_t cluster_seed = 7;
};

std::vector<SuiteSpec> default_suite() {
  const nlohmann::json gvae{{"beta", 2.0}};
  return {{"chain5", {{"topology", {{"kind", "chain"}, {"n", 5}}}, {"gvae", gvae}}, 7},
          {"fanout5", {{"topology", {{"kind", "fanout"}, {"n", 5}}}, {"gvae", gvae}}, 7}};
}

int cmd_eval(const Globals& g, const EvalArgs& a) {
  std::vector<SuiteSpec> specs;
  auto files = a.topologies;
  if (files.empty() && !g.config.empty()) files.push_back(g.config);
  for (const auto& f : files) {
    const auto cfg = read_config(f);
    specs.push_back({cluster_name(cfg, f), cfg, a.cluster_seed});
  }
  if (specs.empty()) specs = default_suite();
  const auto dir = out_dir(g, "eval");

  SuiteOptions so;
  so.repeats = a.repeats;
  so.seed = g.seed;
  std::map<std::string, std::vector<DetectionScore>> per_method;
  nlohmann::json report{{"topologies", nlohmann::json::array()}};
  std::optional<TrainedTopology> first;
  for (const auto& spec : specs) {
    auto settings = settings_from_config(spec.topology);
    if (a.epochs >= 0) settings.epochs = a.epochs;
    if (a.train_windows > 0) settings.windows = a.train_windows;
    std::cout << spec.name << ": training on " << settings.windows << " windows, " << settings.epochs << " epochs"
              << std::endl;
    auto tt = train_topology(spec, settings, g.seed);
    const auto runs = run_scenarios(single_injection_suite(spec, so), tt.qos_target_us, a.threads);
    std::vector<DetectionScore> scores{
        evaluate(sage_detector(tt.model, tt.normals, settings.rca, g.seed), runs, "Sage", a.threads),
        evaluate(autoscale_detector(0.5), runs, "Autoscale Strict", a.threads),
        evaluate(autoscale_detector(0.7), runs, "Autoscale Relaxed", a.threads),
        evaluate(oracle_detector(std::vector<ScenarioRun>{tt.training}), runs, "Oracle thresholds", a.threads)};
    const auto attr = attribution(scores[0], runs);
    const auto cf = counterfactual_checks(tt.model, tt.normals, runs, settings.rca, g.seed);
    std::size_t cf_pass = 0;
    for (const auto& c : cf) cf_pass += c.pass ? 1 : 0;
    Rng trng(g.seed);
    const auto timing = measure_timing(tt.model, tt.training.samples, tt.normals, tt.qos_target_us, 0, settings.rca, trng);
    nlohmann::json jt{{"name", spec.name},
                      {"qos_target_us", tt.qos_target_us},
                      {"train_seconds", tt.log.seconds},
                      {"inference_ms_per_window", timing.inference_ms_per_window},
                      {"attribution", {{"located", attr.located}, {"attributed", attr.attributed}, {"rate", attr.rate}}},
                      {"counterfactual_sanity", {{"checked", cf.size()}, {"passed", cf_pass}}},
                      {"scores", nlohmann::json::array()}};
    for (const auto& s : scores) {
      jt["scores"].push_back(to_json(s, true));
      per_method[s.method].push_back(s);
    }
    report["topologies"].push_back(jt);
    if (!first) first = std::move(tt);
  }

  std::vector<DetectionScore> pooled;
  for (const char* m : {"Sage", "Autoscale Strict", "Autoscale Relaxed", "Oracle thresholds"})
    pooled.push_back(combine(per_method[m], m));
  report["pooled"] = nlohmann::json::array();
  std::cout << "\n" << std::left << std::setw(20) << "method" << std::setw(10) << "accuracy" << std::setw(10) << "FP"
            << std::setw(10) << "FN" << "scenario acc\n";
  for (const auto& s : pooled) {
    report["pooled"].push_back(to_json(s));
    std::cout << std::setw(20) << s.method << std::fixed << std::setprecision(3) << std::setw(10) << s.accuracy
              << std::setw(10) << s.false_positive_rate << std::setw(10) << s.false_negative_rate << s.scenario_accuracy
              << '\n';
  }
  report["environment"] = environment_info();
  detail::write_json_file(dir / "scores.json", report);
  write_scores_csv(dir / "scores.csv", pooled);
  write_scores_svg(dir / "scores.svg", pooled);

  // Latency timeline of one closed-loop episode: CPU contention on the middle service.
  auto& tt = *first;
  auto cluster = make_cluster(tt.spec.topology, tt.spec.cluster_seed);
  const auto& order = cluster.cbn().decode_order;
  Schedule s;
  s.injections.push_back({order[order.size() / 2], Injection{InjectionKind::kCpu, 0.6, 10, 59}});
  install(cluster, s);
  Rng rng(g.seed);
  const auto log = control_loop(tt.model, cluster, s, tt.normals, tt.qos_target_us, ActuatorConfig{}, rng, 40);
  write_episode_log((dir / "episode.jsonl").string(), log);
  write_timeline_csv(dir / "timeline.csv", log);
  write_timeline_svg(dir / "timeline.svg", log);
  std::cout << "\nreports written to " << dir.string() << '\n';
  return 0;
}

// retrain -------------------------------------------------------------------

struct RetrainArgs {
  std::string checkpoint;
  std::string data;
  std::string topology;
  int epochs = -1;
  bool full = false;
  std::uint64_t cluster_seed = 7;
};

int cmd_retrain(const Globals& g, const RetrainArgs& a) {
  const auto settings = settings_from_config(read_config(g.config));
  auto ck = load_checkpoint(a.checkpoint);
  auto d = load_dataset(a.data);
  Cbn target = d.cbn();
  if (!a.topology.empty()) {
    const auto j = detail::read_json_file(a.topology);
    target = j.contains("rpc_graph")
                 ? build_cbn(rpc_graph_from_json(j.at("rpc_graph")), metric_schema_from_json(j.at("metric_schema")))
                 : make_cluster(j, a.cluster_seed).cbn();
    require(target.hash() == d.cbn().hash(), ErrorKind::kConsistency,
            "the dataset was not recorded on the target topology");
  }
  const auto delta = graph_diff(ck.model.cbn, target);
  Rng rng(g.seed);
  auto model = incremental_reshape(ck.model, target, delta, rng);
  std::set<std::string> changed(delta.added.begin(), delta.added.end());
  changed.insert(delta.reshaped.begin(), delta.reshaped.end());
  const int epochs = a.epochs >= 0 ? a.epochs : settings.epochs;
  const auto balanced = balance(d.samples, rng).samples;
  TrainLog log;
  if (a.full) {
    log = train(model, balanced, epochs, rng);
  } else if (!changed.empty()) {
    log = partial_retrain(model, changed, balanced, epochs, rng);
  }
  auto print = [](const char* what, const std::vector<std::string>& v) {
    std::cout << what << ":";
    for (const auto& s : v) std::cout << ' ' << s;
    std::cout << (v.empty() ? " none\n" : "\n");
  };
  print("added", delta.added);
  print("removed", delta.removed);
  print("reshaped", delta.reshaped);
  print("retrained", log.trained_units);
  const auto normals = d.normals ? *d.normals : compute_normal_values(d.samples);
  const auto dir = out_dir(g, "checkpoint");
  save_checkpoint(dir, model, normals, ck.qos_target_us ? ck.qos_target_us : std::optional<double>(d.qos_target_us));
  std::cout << "model version " << model.version << ", " << std::fixed << std::setprecision(1) << log.seconds
            << " s; checkpoint: " << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual root cause analysis for microservice graphs"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--config", g.config, "Topology / settings config file (JSON)");
  app.add_option("--out", g.out, "Output directory");

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Simulate a labeled dataset from a topology config");
  sim->add_option("--schedule", sa.schedule, "Injection/load schedule (JSON); random injections when omitted");
  sim->add_option("--windows", sa.windows, "Number of windows");
  sim->add_option("--qos", sa.qos, "QoS target in microseconds (default: config, else calibrated)");
  sim->add_option("--cluster-seed", sa.cluster_seed, "Seed of the per-service parameters")->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--epochs", ta.epochs, "Epochs (default: config)");

  DiagnoseArgs da;
  auto* dg = app.add_subcommand("diagnose", "Diagnose one window with a trained checkpoint");
  dg->add_option("--checkpoint", da.checkpoint, "Checkpoint directory")->required();
  dg->add_option("--window", da.window, "Window file (JSON)")->required();
  dg->add_option("--qos", da.qos, "QoS target in microseconds (default: from checkpoint)");
  dg->add_option("--tau", da.tau, "Counterfactual probability threshold");
  dg->add_option("--samples", da.samples, "Latent draws per probe");
  dg->add_flag("--force", da.force, "Diagnose even if the window meets QoS");

  RunArgs ra;
  auto* rn = app.add_subcommand("run", "Run the closed control loop on the simulator");
  rn->add_option("--checkpoint", ra.checkpoint, "Checkpoint directory")->required();
  rn->add_option("--schedule", ra.schedule, "Injection/load schedule (JSON)");
  rn->add_option("--windows", ra.windows, "Number of windows")->capture_default_str();
  rn->add_option("--cluster-seed", ra.cluster_seed, "Seed of the per-service parameters")->capture_default_str();
  rn->add_option("--forced-culprit", ra.forced_culprit, "Skip diagnosis and always blame this service");
  rn->add_option("--forced-metric", ra.forced_metric, "Metric blamed with --forced-culprit")->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score Sage against baselines on the single-injection suite");
  ev->add_option("--topology", ea.topologies, "Topology config(s); default chain(5) and fanout(5)");
  ev->add_option("--repeats", ea.repeats, "Scenarios per (kind, service)")->capture_default_str();
  ev->add_option("--epochs", ea.epochs, "Training epochs (default: config)");
  ev->add_option("--train-windows", ea.train_windows, "Training windows (default: config)");
  ev->add_option("--threads", ea.threads, "Worker threads for scenarios")->capture_default_str();
  ev->add_option("--cluster-seed", ea.cluster_seed, "Seed of the per-service parameters")->capture_default_str();

  RetrainArgs rt;
  auto* re = app.add_subcommand("retrain", "Adapt a checkpoint to a changed topology and retrain what changed");
  re->add_option("--checkpoint", rt.checkpoint, "Checkpoint directory")->required();
  re->add_option("--data", rt.data, "Dataset recorded on the new topology")->required();
  re->add_option("--topology", rt.topology, "New topology (config or checkpoint topology.json); default: dataset's");
  re->add_option("--epochs", rt.epochs, "Epochs (default: config)");
  re->add_flag("--full", rt.full, "Retrain every unit instead of the changed ones");
  re->add_option("--cluster-seed", rt.cluster_seed, "Seed of the per-service parameters")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*sim) return cmd_simulate(g, sa);
    if (*tr) return cmd_train(g, ta);
    if (*dg) return cmd_diagnose(g, da);
    if (*rn) return cmd_run(g, ra);
    if (*ev) return cmd_eval(g, ea);
    if (*re) return cmd_retrain(g, rt);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
