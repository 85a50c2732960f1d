#pragma once

// Graphical conditional VAE: one CVAE unit per service, wired along the CBN.
// Encoders and priors read observed features only; decoders run in decode
// order and consume the decoded latencies of their child rpcs.

#include <chrono>
#include <map>
#include "json.hpp"
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sage/dataset.hpp"
#include "sage/nn.hpp"
#include "sage/topology.hpp"

namespace sage {

using nn::Mat;

enum class ZMode { kPriorSample, kPosteriorMean, kPosteriorSample };
enum class CascadeMode { kMean, kSample };

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

struct GvaeHyper {
  int latent_dim = 4;
  std::vector<int> hidden{32, 32};
  nn::Activation activation = nn::Activation::kTanh;
  nn::AdamConfig adam;
  double beta = 1.0;
  std::size_t batch_size = 64;
  double replay_fraction = 0.25;
  CascadeMode cascade = CascadeMode::kMean;
  std::vector<double> percentiles{50.0, 95.0};
};

inline nlohmann::json to_json(const GvaeHyper& h) {
  return {{"latent_dim", h.latent_dim},
          {"hidden", h.hidden},
          {"activation", nn::to_string(h.activation)},
          {"lr", h.adam.lr},
          {"beta1", h.adam.beta1},
          {"beta2", h.adam.beta2},
          {"eps", h.adam.eps},
          {"beta", h.beta},
          {"batch_size", h.batch_size},
          {"replay_fraction", h.replay_fraction},
          {"cascade", h.cascade == CascadeMode::kMean ? "mean" : "sample"},
          {"percentiles", h.percentiles}};
}

inline GvaeHyper hyper_from_json(const nlohmann::json& j) {
  GvaeHyper h;
  h.latent_dim = j.value("latent_dim", h.latent_dim);
  h.hidden = j.value("hidden", h.hidden);
  h.activation = nn::parse_activation(j.value("activation", std::string("tanh")));
  h.adam.lr = j.value("lr", h.adam.lr);
  h.adam.beta1 = j.value("beta1", h.adam.beta1);
  h.adam.beta2 = j.value("beta2", h.adam.beta2);
  h.adam.eps = j.value("eps", h.adam.eps);
  h.beta = j.value("beta", h.beta);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.replay_fraction = j.value("replay_fraction", h.replay_fraction);
  const auto cascade = j.value("cascade", std::string("mean"));
  require(cascade == "mean" || cascade == "sample", ErrorKind::kInvalidConfig, "cascade must be mean or sample");
  h.cascade = cascade == "mean" ? CascadeMode::kMean : CascadeMode::kSample;
  h.percentiles = j.value("percentiles", h.percentiles);
  require(h.latent_dim >= 1, ErrorKind::kInvalidConfig, "latent_dim must be >= 1");
  require(h.batch_size >= 1, ErrorKind::kInvalidConfig, "batch_size must be >= 1");
  require(h.adam.lr > 0, ErrorKind::kInvalidConfig, "lr must be positive");
  require(h.beta >= 0, ErrorKind::kInvalidConfig, "beta must be non-negative");
  require(!h.percentiles.empty(), ErrorKind::kInvalidConfig, "percentiles must be nonempty");
  return h;
}

/// Feature names a service's unit reads and predicts, derived from the CBN.
struct UnitIo {
  std::vector<std::string> x;      // the service's metrics, channel metrics included
  std::vector<std::string> y;      // latency tuples of its inbound rpcs (plus the end-to-end tail at the frontend)
  std::vector<std::string> child;  // latency tuples of the rpcs it issues
};

inline std::vector<std::string> latency_tuple_names(const std::string& rpc, const std::vector<double>& pcts) {
  std::vector<std::string> out;
  for (double p : pcts)
    for (auto v : kLatencyVars) out.push_back(latency_feature_name(rpc, v, p));
  return out;
}

inline UnitIo unit_io(const Cbn& cbn, const std::string& service, const std::vector<double>& pcts) {
  UnitIo io;
  for (const auto& m : cbn.metrics(service)) io.x.push_back(metric_feature_name(service, m));
  for (const auto& r : cbn.inbound_rpcs(service)) {
    auto names = latency_tuple_names(r, pcts);
    io.y.insert(io.y.end(), names.begin(), names.end());
  }
  if (service == cbn.frontend()) io.y.push_back(kEndToEndFeature);
  for (const auto& r : cbn.child_rpcs(service)) {
    auto names = latency_tuple_names(r, pcts);
    io.child.insert(io.child.end(), names.begin(), names.end());
  }
  return io;
}

struct UnitGrads {
  nn::MlpGrads encoder, prior, decoder;
};

struct CvaeUnit {
  std::string service;
  int latent_dim = 0;
  UnitIo io;
  std::vector<std::size_t> x_idx, y_idx, child_idx;  // positions in the model's feature schema
  nn::Mlp encoder, prior, decoder;
  nn::Adam encoder_opt, prior_opt, decoder_opt;
  long step = 0;

  std::vector<std::string> encoder_inputs() const {
    auto v = io.x;
    v.insert(v.end(), io.y.begin(), io.y.end());
    v.insert(v.end(), io.child.begin(), io.child.end());
    return v;
  }
  std::vector<std::string> decoder_inputs() const {
    auto v = io.x;
    for (int k = 0; k < latent_dim; ++k) v.push_back("z" + std::to_string(k));
    v.insert(v.end(), io.child.begin(), io.child.end());
    return v;
  }
  std::vector<std::string> decoder_outputs() const {
    std::vector<std::string> v;
    for (const auto& n : io.y) v.push_back("mu:" + n);
    for (const auto& n : io.y) v.push_back("logvar:" + n);
    return v;
  }

  void bind(const FeatureSchema& schema) {
    auto lookup = [&](const std::vector<std::string>& names) {
      std::vector<std::size_t> out;
      for (const auto& n : names) out.push_back(schema.index(n));
      return out;
    };
    x_idx = lookup(io.x);
    y_idx = lookup(io.y);
    child_idx = lookup(io.child);
  }

  void reset_optimizer() {
    encoder_opt = nn::Adam(encoder);
    prior_opt = nn::Adam(prior);
    decoder_opt = nn::Adam(decoder);
    step = 0;
  }

  UnitGrads zero_grads() const { return {encoder.zero_grads(), prior.zero_grads(), decoder.zero_grads()}; }

  std::size_t parameter_count() const {
    return encoder.parameter_count() + prior.parameter_count() + decoder.parameter_count();
  }

  std::uint64_t parameter_hash() const {
    Fnv1a h;
    encoder.hash_into(h);
    prior.hash_into(h);
    decoder.hash_into(h);
    return h.digest();
  }
};

inline std::vector<int> mlp_widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

inline CvaeUnit make_unit(const std::string& service, UnitIo io, const GvaeHyper& hyper, Rng& rng) {
  CvaeUnit u;
  u.service = service;
  u.latent_dim = hyper.latent_dim;
  u.io = std::move(io);
  const int dx = static_cast<int>(u.io.x.size());
  const int dy = static_cast<int>(u.io.y.size());
  const int dc = static_cast<int>(u.io.child.size());
  const int dz = hyper.latent_dim;
  u.encoder = nn::Mlp(mlp_widths(dx + dy + dc, hyper.hidden, 2 * dz), hyper.activation, rng);
  u.prior = nn::Mlp(mlp_widths(dx, hyper.hidden, 2 * dz), hyper.activation, rng);
  u.decoder = nn::Mlp(mlp_widths(dx + dz + dc, hyper.hidden, 2 * dy), hyper.activation, rng);
  u.reset_optimizer();
  return u;
}

struct GvaeModel {
  Cbn cbn;
  FeatureSchema schema;
  Normalizer normalizer;
  GvaeHyper hyper;
  std::vector<CvaeUnit> units;  // decode order
  std::uint64_t version = 0;

  std::uint64_t cbn_hash() const { return cbn.hash(); }

  std::size_t unit_index(const std::string& service) const {
    for (std::size_t i = 0; i < units.size(); ++i)
      if (units[i].service == service) return i;
    fail(ErrorKind::kLookup, "no unit for service '" + service + "'");
  }
  const CvaeUnit& unit(const std::string& service) const { return units[unit_index(service)]; }
  CvaeUnit& unit(const std::string& service) { return units[unit_index(service)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& u : units) n += u.parameter_count();
    return n;
  }
};

/// Checks that units cover exactly the CBN's services in decode order with the declared inputs/outputs.
inline void validate(const GvaeModel& m) {
  require(m.units.size() == m.cbn.decode_order.size(), ErrorKind::kConsistency, "unit count does not match the CBN");
  require(m.schema == FeatureSchema(m.cbn, m.hyper.percentiles), ErrorKind::kConsistency,
          "feature schema does not match the CBN");
  require(m.normalizer.size() == m.schema.size(), ErrorKind::kConsistency, "normalizer does not match the schema");
  for (std::size_t i = 0; i < m.units.size(); ++i) {
    const auto& u = m.units[i];
    require(u.service == m.cbn.decode_order[i], ErrorKind::kConsistency, "unit order differs from decode order");
    const auto io = unit_io(m.cbn, u.service, m.hyper.percentiles);
    require(io.x == u.io.x && io.y == u.io.y && io.child == u.io.child, ErrorKind::kConsistency,
            "unit '" + u.service + "' inputs differ from the CBN");
    require(u.encoder.input_width() == static_cast<int>(u.encoder_inputs().size()) &&
                u.prior.input_width() == static_cast<int>(io.x.size()) &&
                u.decoder.input_width() == static_cast<int>(u.decoder_inputs().size()) &&
                u.decoder.output_width() == static_cast<int>(2 * io.y.size()) &&
                u.encoder.output_width() == 2 * u.latent_dim && u.prior.output_width() == 2 * u.latent_dim,
            ErrorKind::kConsistency, "unit '" + u.service + "' network shapes are inconsistent");
    require(u.encoder.finite() && u.prior.finite() && u.decoder.finite(), ErrorKind::kNumericFailure,
            "unit '" + u.service + "' has non-finite parameters");
  }
}

inline GvaeModel init_gvae(const Cbn& cbn, const GvaeHyper& hyper, Rng& rng) {
  require(hyper.latent_dim >= 1, ErrorKind::kInvalidConfig, "latent_dim must be >= 1");
  GvaeModel m;
  m.cbn = cbn;
  m.hyper = hyper;
  m.schema = FeatureSchema(cbn, hyper.percentiles);
  m.normalizer = Normalizer().realign(m.schema);
  for (const auto& s : cbn.decode_order) {
    m.units.push_back(make_unit(s, unit_io(cbn, s, hyper.percentiles), hyper, rng));
    m.units.back().bind(m.schema);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Loss

namespace detail {

inline Mat hcat(const std::vector<const Mat*>& parts, Eigen::Index rows) {
  Eigen::Index cols = 0;
  for (const auto* p : parts) cols += p->cols();
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const auto* p : parts) {
    if (p->cols() > 0) out.middleCols(c, p->cols()) = *p;
    c += p->cols();
  }
  return out;
}

inline Mat gather_cols(const Mat& m, const std::vector<std::size_t>& idx) {
  Mat out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(static_cast<Eigen::Index>(idx[k]));
  return out;
}

inline void scatter_cols(Mat& m, const std::vector<std::size_t>& idx, const Mat& src) {
  for (std::size_t k = 0; k < idx.size(); ++k) m.col(static_cast<Eigen::Index>(idx[k])) = src.col(static_cast<Eigen::Index>(k));
}

inline Mat gather_rows(const Mat& m, const std::vector<std::size_t>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(idx[k]));
  return out;
}

inline Mat clamp_logvar(const Mat& raw) { return raw.cwiseMax(kLogVarMin).cwiseMin(kLogVarMax); }

inline Mat inside_mask(const Mat& raw) {
  return ((raw.array() > kLogVarMin) && (raw.array() < kLogVarMax)).cast<double>().matrix();
}

inline Mat standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = rng.normal();
  return out;
}

}  // namespace detail

/// Standardized inputs for one unit; child_obs feeds the encoder, child_dec the decoder.
struct UnitBatch {
  Mat x, y, child_obs, child_dec, eps;
};

struct ElboResult {
  double loss = 0;  // mean over the batch of nll + beta * kl
  double nll = 0;   // batch mean
  double kl = 0;    // batch mean
  Mat mu_y, logvar_y;
};

inline double gaussian_nll(const Mat& y, const Mat& mu, const Mat& logvar) {
  constexpr double kLog2Pi = 1.8378770664093453;
  return 0.5 * (kLog2Pi + logvar.array() + (y - mu).array().square() * (-logvar.array()).exp()).sum();
}

inline double kl_diag(const Mat& mu_q, const Mat& lv_q, const Mat& mu_p, const Mat& lv_p) {
  const auto d = (mu_q - mu_p).array();
  return 0.5 * (lv_p.array() - lv_q.array() + (lv_q.array().exp() + d.square()) * (-lv_p.array()).exp() - 1.0).sum();
}

/// Negative ELBO for one unit; when `grads` is given, accumulates gradients of
/// the returned loss w.r.t. this unit's parameters (inputs are constants).
inline ElboResult elbo_loss(const CvaeUnit& u, const UnitBatch& b, double beta, UnitGrads* grads = nullptr) {
  const Eigen::Index n = b.x.rows();
  require(n > 0, ErrorKind::kPrecondition, "empty batch");
  const Eigen::Index dz = u.latent_dim;
  const Eigen::Index dx = b.x.cols();
  const Eigen::Index dy = b.y.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  nn::Tape te, tp, td;
  const Mat enc_in = detail::hcat({&b.x, &b.y, &b.child_obs}, n);
  const Mat e = u.encoder.forward(enc_in, grads ? &te : nullptr);
  const Mat mu_q = e.leftCols(dz);
  const Mat lvq_raw = e.rightCols(dz);
  const Mat lv_q = detail::clamp_logvar(lvq_raw);

  const Mat p = u.prior.forward(b.x, grads ? &tp : nullptr);
  const Mat mu_p = p.leftCols(dz);
  const Mat lvp_raw = p.rightCols(dz);
  const Mat lv_p = detail::clamp_logvar(lvp_raw);

  const Mat sd_q = (0.5 * lv_q.array()).exp().matrix();
  const Mat z = mu_q + sd_q.cwiseProduct(b.eps);
  const Mat dec_in = detail::hcat({&b.x, &z, &b.child_dec}, n);
  const Mat d = u.decoder.forward(dec_in, grads ? &td : nullptr);
  ElboResult r;
  r.mu_y = d.leftCols(dy);
  const Mat lvy_raw = d.rightCols(dy);
  r.logvar_y = detail::clamp_logvar(lvy_raw);

  r.nll = gaussian_nll(b.y, r.mu_y, r.logvar_y) * inv_n;
  r.kl = kl_diag(mu_q, lv_q, mu_p, lv_p) * inv_n;
  r.loss = r.nll + beta * r.kl;
  if (!std::isfinite(r.loss) || !r.mu_y.allFinite())
    fail(ErrorKind::kNumericFailure, "non-finite loss in unit '" + u.service + "'");
  if (!grads) return r;

  const Mat inv_var_y = (-r.logvar_y.array()).exp().matrix();
  const Mat diff = b.y - r.mu_y;
  Mat d_dec(n, 2 * dy);
  d_dec.leftCols(dy) = -diff.cwiseProduct(inv_var_y) * inv_n;
  d_dec.rightCols(dy) =
      (0.5 * (1.0 - diff.array().square() * inv_var_y.array()) * inv_n).matrix().cwiseProduct(detail::inside_mask(lvy_raw));
  const Mat d_dec_in = u.decoder.backward(td, d_dec, grads->decoder);
  const Mat dz_in = d_dec_in.middleCols(dx, dz);

  const Mat inv_var_p = (-lv_p.array()).exp().matrix();
  const Mat dmu = mu_q - mu_p;
  Mat d_enc(n, 2 * dz);
  d_enc.leftCols(dz) = beta * inv_n * dmu.cwiseProduct(inv_var_p) + dz_in;
  d_enc.rightCols(dz) = ((beta * inv_n * 0.5 * ((lv_q - lv_p).array().exp() - 1.0)) +
                         dz_in.array() * 0.5 * sd_q.array() * b.eps.array())
                            .matrix()
                            .cwiseProduct(detail::inside_mask(lvq_raw));
  u.encoder.backward(te, d_enc, grads->encoder);

  Mat d_pri(n, 2 * dz);
  d_pri.leftCols(dz) = -beta * inv_n * dmu.cwiseProduct(inv_var_p);
  d_pri.rightCols(dz) =
      (beta * inv_n * 0.5 * (1.0 - (lv_q.array().exp() + dmu.array().square()) * inv_var_p.array()))
          .matrix()
          .cwiseProduct(detail::inside_mask(lvp_raw));
  u.prior.backward(tp, d_pri, grads->prior);
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLoss {
  int epoch = 0;
  double loss = 0, nll = 0, kl = 0;  // per-batch means, summed over trained units
};

struct TrainLog {
  std::vector<EpochLoss> epochs;
  std::vector<std::string> trained_units;
  double seconds = 0;
};

inline Mat standardize(const GvaeModel& m, const std::vector<WindowSample>& samples) {
  Mat out(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(m.schema.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto row = m.normalizer.apply(m.schema.flatten(samples[i]));
    for (std::size_t j = 0; j < row.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return out;
}

/// Decoded means of the listed units over every row, with posterior-mean latents.
/// Units must be closed under children: a unit's children are listed before it.
inline Mat decode_means(const GvaeModel& m, const Mat& data, const std::set<std::string>& units) {
  Mat decoded = Mat::Zero(data.rows(), data.cols());
  for (const auto& u : m.units) {
    if (!units.count(u.service)) continue;
    const Mat x = detail::gather_cols(data, u.x_idx);
    const Mat y = detail::gather_cols(data, u.y_idx);
    const Mat c_obs = detail::gather_cols(data, u.child_idx);
    const Mat c_dec = detail::gather_cols(decoded, u.child_idx);
    const Mat e = u.encoder.forward(detail::hcat({&x, &y, &c_obs}, data.rows()));
    const Mat z = e.leftCols(u.latent_dim);
    const Mat d = u.decoder.forward(detail::hcat({&x, &z, &c_dec}, data.rows()));
    detail::scatter_cols(decoded, u.y_idx, d.leftCols(static_cast<Eigen::Index>(u.y_idx.size())));
  }
  return decoded;
}

struct TrainOptions {
  std::vector<WindowSample> previous;               // replay pool, interleaved per batch
  std::optional<std::set<std::string>> only_units;  // restrict updates to these units
};

/// Trains in place. Samples are expected to be balanced already; normalizer
/// entries not yet fitted are fitted on `samples`.
inline TrainLog train(GvaeModel& m, const std::vector<WindowSample>& samples, int epochs, Rng& rng,
                      const TrainOptions& opts = {}) {
  TrainLog log;
  if (epochs <= 0) return log;
  require(!samples.empty(), ErrorKind::kPrecondition, "training set is empty");
  const auto t0 = std::chrono::steady_clock::now();

  if (!m.normalizer.complete()) {
    std::vector<std::vector<double>> rows;
    for (const auto& s : samples) rows.push_back(m.schema.flatten(s));
    m.normalizer.fit_missing(rows);
  }

  std::vector<WindowSample> pool = samples;
  pool.insert(pool.end(), opts.previous.begin(), opts.previous.end());
  const Mat data = standardize(m, pool);
  const std::size_t n_cur = samples.size();

  std::set<std::string> trainable;
  for (const auto& u : m.units)
    if (!opts.only_units || opts.only_units->count(u.service)) trainable.insert(u.service);
  std::set<std::string> frozen;
  for (const auto& u : m.units)
    if (!trainable.count(u.service)) frozen.insert(u.service);
  for (const auto& s : trainable)
    for (const auto& c : m.cbn.child_services(s))
      require(trainable.count(c) || frozen.count(c), ErrorKind::kConsistency, "unknown child " + c);
  // Frozen units only feed trainable ones through decoded means, which never change; compute them once.
  const Mat frozen_decoded = frozen.empty() ? Mat() : decode_means(m, data, frozen);
  log.trained_units.assign(trainable.begin(), trainable.end());

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto batches =
        interleave_replay(n_cur, opts.previous.size(), m.hyper.replay_fraction, m.hyper.batch_size, rng);
    EpochLoss el;
    el.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      std::vector<std::size_t> rows = batches[bi].current;
      for (auto p : batches[bi].previous) rows.push_back(n_cur + p);
      const Mat batch = detail::gather_rows(data, rows);
      const Eigen::Index n = batch.rows();
      Mat decoded = Mat::Zero(n, batch.cols());
      for (auto& u : m.units) {
        if (!trainable.count(u.service)) {
          detail::scatter_cols(decoded, u.y_idx,
                               detail::gather_cols(detail::gather_rows(frozen_decoded, rows), u.y_idx));
          continue;
        }
        UnitBatch ub{detail::gather_cols(batch, u.x_idx), detail::gather_cols(batch, u.y_idx),
                     detail::gather_cols(batch, u.child_idx), detail::gather_cols(decoded, u.child_idx),
                     detail::standard_normal(n, u.latent_dim, rng)};
        auto g = u.zero_grads();
        ElboResult r;
        try {
          r = elbo_loss(u, ub, m.hyper.beta, &g);
        } catch (const Error& e) {
          fail(e.kind(), std::string(e.what()) + " at epoch " + std::to_string(epoch) + " batch " + std::to_string(bi));
        }
        ++u.step;
        u.encoder_opt.update(u.encoder, g.encoder, m.hyper.adam, u.step);
        u.prior_opt.update(u.prior, g.prior, m.hyper.adam, u.step);
        u.decoder_opt.update(u.decoder, g.decoder, m.hyper.adam, u.step);
        Mat passed = r.mu_y;
        if (m.hyper.cascade == CascadeMode::kSample)
          passed += (0.5 * r.logvar_y.array()).exp().matrix().cwiseProduct(
              detail::standard_normal(n, passed.cols(), rng));
        detail::scatter_cols(decoded, u.y_idx, passed);
        el.loss += r.loss;
        el.nll += r.nll;
        el.kl += r.kl;
      }
    }
    const double nb = static_cast<double>(std::max<std::size_t>(1, batches.size()));
    el.loss /= nb;
    el.nll /= nb;
    el.kl /= nb;
    log.epochs.push_back(el);
  }
  ++m.version;
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

/// Retrains only the changed services and everything downstream of them in the CBN.
inline TrainLog partial_retrain(GvaeModel& m, const std::set<std::string>& changed, const std::vector<WindowSample>& samples,
                                int epochs, Rng& rng, std::vector<WindowSample> previous = {}) {
  require(!changed.empty(), ErrorKind::kPrecondition, "changed set is empty");
  TrainOptions opts;
  opts.previous = std::move(previous);
  opts.only_units = descendants(m.cbn, changed);
  auto log = train(m, samples, epochs, rng, opts);
  if (epochs <= 0) ++m.version;
  return log;
}

// ---------------------------------------------------------------------------
// Decoding and counterfactuals

/// Raw metric values replacing the observed ones: service -> metric -> value.
using Overrides = std::map<std::string, std::map<std::string, double>>;

/// Decoded latencies in microseconds; one row per draw, columns follow the model's schema
/// (metric columns hold the intervened inputs).
struct Decoded {
  Mat values;
  std::size_t e2e_col = 0;

  double e2e(Eigen::Index draw = 0) const { return values(draw, static_cast<Eigen::Index>(e2e_col)); }
  double latency(const std::string& rpc, LatencyVar v, double pct, const FeatureSchema& schema, Eigen::Index draw = 0) const {
    return values(draw, static_cast<Eigen::Index>(schema.index(latency_feature_name(rpc, v, pct))));
  }
};

inline Decoded decode_draws(const GvaeModel& m, const WindowSample& sample, ZMode mode, const Overrides& overrides,
                            std::size_t n_draws, Rng& rng) {
  require(n_draws >= 1, ErrorKind::kPrecondition, "need at least one draw");
  require(m.normalizer.complete(), ErrorKind::kPrecondition, "model has not been trained");
  const auto raw = m.schema.flatten(sample);
  const auto obs = m.normalizer.apply(raw);
  std::vector<double> cf = obs;
  std::vector<double> raw_cf = raw;
  for (const auto& [svc, metrics] : overrides) {
    require(m.cbn.has_service(svc), ErrorKind::kLookup, "unknown service '" + svc + "' in overrides");
    for (const auto& [metric, value] : metrics) {
      auto idx = m.schema.find(metric_feature_name(svc, metric));
      require(idx.has_value(), ErrorKind::kLookup, "unknown metric '" + metric + "' of service '" + svc + "'");
      cf[*idx] = m.normalizer.apply(*idx, value);
      raw_cf[*idx] = value;
    }
  }
  const auto n = static_cast<Eigen::Index>(n_draws);
  const auto f = static_cast<Eigen::Index>(obs.size());
  Mat obs_row(1, f), cf_rows(n, f);
  for (Eigen::Index j = 0; j < f; ++j) {
    obs_row(0, j) = obs[static_cast<std::size_t>(j)];
    cf_rows.col(j).setConstant(cf[static_cast<std::size_t>(j)]);
  }
  Mat decoded = cf_rows;
  for (const auto& u : m.units) {
    const Eigen::Index dz = u.latent_dim;
    Mat z;
    const Mat x_cf = detail::gather_cols(cf_rows, u.x_idx);
    if (mode == ZMode::kPriorSample) {
      const Mat p = u.prior.forward(x_cf);
      const Mat sd = (0.5 * detail::clamp_logvar(p.rightCols(dz)).array()).exp().matrix();
      z = p.leftCols(dz) + sd.cwiseProduct(detail::standard_normal(n, dz, rng));
    } else {
      // Abduction: the posterior is inferred from the factual observation.
      const Mat x_obs = detail::gather_cols(obs_row, u.x_idx);
      const Mat y_obs = detail::gather_cols(obs_row, u.y_idx);
      const Mat c_obs = detail::gather_cols(obs_row, u.child_idx);
      const Mat e = u.encoder.forward(detail::hcat({&x_obs, &y_obs, &c_obs}, 1));
      z = e.leftCols(dz).replicate(n, 1);
      if (mode == ZMode::kPosteriorSample) {
        const Mat sd = (0.5 * detail::clamp_logvar(e.rightCols(dz)).array()).exp().matrix();
        z += sd.replicate(n, 1).cwiseProduct(detail::standard_normal(n, dz, rng));
      }
    }
    const Mat c_dec = detail::gather_cols(decoded, u.child_idx);
    const Mat d = u.decoder.forward(detail::hcat({&x_cf, &z, &c_dec}, n));
    if (!d.allFinite()) fail(ErrorKind::kNumericFailure, "non-finite decode in unit '" + u.service + "'");
    const auto dy = static_cast<Eigen::Index>(u.y_idx.size());
    Mat out = d.leftCols(dy);
    if (m.hyper.cascade == CascadeMode::kSample)
      out += (0.5 * detail::clamp_logvar(d.rightCols(dy)).array()).exp().matrix().cwiseProduct(
          detail::standard_normal(n, dy, rng));
    detail::scatter_cols(decoded, u.y_idx, out);
  }
  Decoded result;
  result.values = decoded;
  for (Eigen::Index j = 0; j < f; ++j) {
    const auto& feat = m.schema.features()[static_cast<std::size_t>(j)];
    if (feat.kind == FeatureKind::kMetric) {
      result.values.col(j).setConstant(raw_cf[static_cast<std::size_t>(j)]);
      continue;
    }
    for (Eigen::Index i = 0; i < n; ++i)
      result.values(i, j) = std::max(0.0, m.normalizer.invert(static_cast<std::size_t>(j), decoded(i, j)));
  }
  result.e2e_col = m.schema.index(kEndToEndFeature);
  return result;
}

inline Decoded forward_decode(const GvaeModel& m, const WindowSample& sample, ZMode mode, const Overrides& overrides,
                              Rng& rng) {
  return decode_draws(m, sample, mode, overrides, 1, rng);
}

/// Fraction of posterior-sample decodes whose frontend tail latency meets the target.
inline double counterfactual_probability(const GvaeModel& m, const WindowSample& sample, const Overrides& overrides,
                                         double qos_target_us, std::size_t n_samples, Rng& rng) {
  require(n_samples >= 1, ErrorKind::kPrecondition, "n_samples must be >= 1");
  const auto d = decode_draws(m, sample, ZMode::kPosteriorSample, overrides, n_samples, rng);
  std::size_t met = 0;
  for (std::size_t i = 0; i < n_samples; ++i)
    if (d.e2e(static_cast<Eigen::Index>(i)) <= qos_target_us) ++met;
  return static_cast<double>(met) / static_cast<double>(n_samples);
}

// ---------------------------------------------------------------------------
// Structural updates

/// Adapts the model to a successor CBN. Units of unchanged services are kept
/// as they are; reshaped units keep every weight whose input or output still
/// exists; added services get fresh units.
inline GvaeModel incremental_reshape(const GvaeModel& m, const Cbn& new_cbn, const GraphDelta& delta, Rng& rng) {
  require(graph_diff(m.cbn, new_cbn) == delta, ErrorKind::kConsistency, "delta does not match the model's CBN");
  GvaeModel out;
  out.cbn = new_cbn;
  out.hyper = m.hyper;
  out.schema = FeatureSchema(new_cbn, m.hyper.percentiles);
  out.normalizer = m.normalizer.realign(out.schema);
  out.version = m.version;
  if (delta.empty()) {
    out.units = m.units;
    for (auto& u : out.units) u.bind(out.schema);
    return out;
  }
  const std::set<std::string> reshaped(delta.reshaped.begin(), delta.reshaped.end());
  for (const auto& s : new_cbn.decode_order) {
    auto io = unit_io(new_cbn, s, m.hyper.percentiles);
    if (!m.cbn.has_service(s)) {
      out.units.push_back(make_unit(s, std::move(io), m.hyper, rng));
    } else {
      CvaeUnit u = m.unit(s);
      if (reshaped.count(s)) {
        const auto old_enc = u.encoder_inputs();
        const auto old_dec_in = u.decoder_inputs();
        const auto old_dec_out = u.decoder_outputs();
        const auto old_x = u.io.x;
        u.io = std::move(io);
        u.encoder.remap_inputs(old_enc, u.encoder_inputs(), rng);
        u.prior.remap_inputs(old_x, u.io.x, rng);
        u.decoder.remap_inputs(old_dec_in, u.decoder_inputs(), rng);
        u.decoder.remap_outputs(old_dec_out, u.decoder_outputs(), rng);
        u.reset_optimizer();
      }
      out.units.push_back(std::move(u));
    }
    out.units.back().bind(out.schema);
  }
  ++out.version;
  validate(out);
  return out;
}

}  // namespace sage
