#pragma once

// Small fixed-shape feed-forward networks with hand-written reverse-mode
// gradients, and an Adam optimizer over them.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sage/common.hpp"

namespace sage::nn {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

enum class Activation { kTanh, kRelu };

inline const char* to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  fail(ErrorKind::kInvalidConfig, "unknown activation '" + s + "'");
}

struct Layer {
  Mat weight;  // fan_in x fan_out
  RowVec bias;
};

struct MlpGrads {
  std::vector<Mat> weight;
  std::vector<RowVec> bias;

  void zero() {
    for (auto& w : weight) w.setZero();
    for (auto& b : bias) b.setZero();
  }
};

/// Activations saved by forward() for backward().
struct Tape {
  std::vector<Mat> inputs;  // input to each layer
  std::vector<Mat> pre;     // pre-activation output of each layer
};

/// Fan-in scaled uniform initialization: U(-a, a) with a = scale * sqrt(3 / fan_in).
inline void init_uniform(Mat& m, int fan_in, double scale, Rng& rng) {
  const double a = scale * std::sqrt(3.0 / std::max(1, fan_in));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-a, a);
}

/// Dense network with `hidden` activation on every hidden layer and a linear output.
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<int> widths, Activation activation, Rng& rng) : widths_(std::move(widths)), activation_(activation) {
    require(widths_.size() >= 2, ErrorKind::kPrecondition, "mlp needs at least input and output widths");
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      Layer layer;
      layer.weight.resize(widths_[l], widths_[l + 1]);
      init_uniform(layer.weight, widths_[l], 1.0, rng);
      layer.bias = RowVec::Zero(widths_[l + 1]);
      layers_.push_back(std::move(layer));
    }
  }

  static Mlp from_layers(std::vector<int> widths, Activation activation, std::vector<Layer> layers) {
    Mlp m;
    require(widths.size() == layers.size() + 1, ErrorKind::kConsistency, "mlp widths do not match layers");
    m.widths_ = std::move(widths);
    m.activation_ = activation;
    m.layers_ = std::move(layers);
    return m;
  }

  const std::vector<int>& widths() const { return widths_; }
  Activation activation() const { return activation_; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  Mat forward(const Mat& x, Tape* tape = nullptr) const {
    require(x.cols() == input_width(), ErrorKind::kConsistency,
            "mlp input width " + std::to_string(x.cols()) + " != " + std::to_string(input_width()));
    if (tape) {
      tape->inputs.clear();
      tape->pre.clear();
    }
    Mat h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Mat pre = h * layers_[l].weight;
      pre.rowwise() += layers_[l].bias;
      if (tape) {
        tape->inputs.push_back(h);
        tape->pre.push_back(pre);
      }
      h = l + 1 < layers_.size() ? activate(pre) : pre;
    }
    return h;
  }

  /// Accumulates parameter gradients into `g`; returns the gradient w.r.t. the input.
  Mat backward(const Tape& tape, const Mat& d_out, MlpGrads& g) const {
    Mat delta = d_out;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size()) delta = delta.cwiseProduct(activation_grad(tape.pre[l]));
      g.weight[l].noalias() += tape.inputs[l].transpose() * delta;
      g.bias[l] += delta.colwise().sum();
      delta = delta * layers_[l].weight.transpose();
    }
    return delta;
  }

  MlpGrads zero_grads() const {
    MlpGrads g;
    for (const auto& layer : layers_) {
      g.weight.push_back(Mat::Zero(layer.weight.rows(), layer.weight.cols()));
      g.bias.push_back(RowVec::Zero(layer.bias.size()));
    }
    return g;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  /// Visits every parameter in a fixed order: per layer, weights column-major then biases.
  void for_each_parameter(const std::function<void(double&)>& fn) {
    for (auto& l : layers_) {
      for (Eigen::Index i = 0; i < l.weight.size(); ++i) fn(l.weight.data()[i]);
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) fn(l.bias.data()[i]);
    }
  }

  bool finite() const {
    for (const auto& l : layers_)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }

  void hash_into(Fnv1a& h) const {
    for (const auto& l : layers_) {
      h.update(l.weight.data(), sizeof(double) * static_cast<std::size_t>(l.weight.size()));
      h.update(l.bias.data(), sizeof(double) * static_cast<std::size_t>(l.bias.size()));
    }
  }

  /// Rebuilds the first layer for a new input layout. Columns are matched by
  /// name; surviving weights are copied exactly and new inputs get small
  /// fan-in scaled noise.
  void remap_inputs(const std::vector<std::string>& old_names, const std::vector<std::string>& new_names, Rng& rng,
                    double new_scale = 0.1) {
    require(static_cast<int>(old_names.size()) == input_width(), ErrorKind::kConsistency, "input name count mismatch");
    auto& first = layers_.front();
    Mat w(static_cast<Eigen::Index>(new_names.size()), first.weight.cols());
    const int fan_in = static_cast<int>(new_names.size());
    for (std::size_t r = 0; r < new_names.size(); ++r) {
      auto it = std::find(old_names.begin(), old_names.end(), new_names[r]);
      if (it != old_names.end()) {
        w.row(static_cast<Eigen::Index>(r)) = first.weight.row(it - old_names.begin());
      } else {
        Mat row(1, w.cols());
        init_uniform(row, fan_in, new_scale, rng);
        w.row(static_cast<Eigen::Index>(r)) = row;
      }
    }
    first.weight = std::move(w);
    widths_.front() = fan_in;
  }

  /// Rebuilds the last layer for a new output layout, matched by name.
  void remap_outputs(const std::vector<std::string>& old_names, const std::vector<std::string>& new_names, Rng& rng,
                     double new_scale = 0.1) {
    require(static_cast<int>(old_names.size()) == output_width(), ErrorKind::kConsistency,
            "output name count mismatch");
    auto& last = layers_.back();
    Mat w(last.weight.rows(), static_cast<Eigen::Index>(new_names.size()));
    RowVec b = RowVec::Zero(static_cast<Eigen::Index>(new_names.size()));
    for (std::size_t c = 0; c < new_names.size(); ++c) {
      auto it = std::find(old_names.begin(), old_names.end(), new_names[c]);
      if (it != old_names.end()) {
        w.col(static_cast<Eigen::Index>(c)) = last.weight.col(it - old_names.begin());
        b(static_cast<Eigen::Index>(c)) = last.bias(it - old_names.begin());
      } else {
        Mat col(w.rows(), 1);
        init_uniform(col, static_cast<int>(w.rows()), new_scale, rng);
        w.col(static_cast<Eigen::Index>(c)) = col;
      }
    }
    last.weight = std::move(w);
    last.bias = std::move(b);
    widths_.back() = static_cast<int>(new_names.size());
  }

 private:
  Mat activate(const Mat& pre) const {
    if (activation_ == Activation::kRelu) return pre.cwiseMax(0.0);
    return pre.array().tanh().matrix();
  }

  Mat activation_grad(const Mat& pre) const {
    if (activation_ == Activation::kRelu) return (pre.array() > 0.0).cast<double>().matrix();
    const auto t = pre.array().tanh();
    return (1.0 - t * t).matrix();
  }

  std::vector<int> widths_;
  Activation activation_ = Activation::kTanh;
  std::vector<Layer> layers_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates for one Mlp.
class Adam {
 public:
  Adam() = default;
  explicit Adam(const Mlp& net) : m_(net.zero_grads()), v_(net.zero_grads()) {}

  /// One bias-corrected update; `step` is the 1-based update count.
  void update(Mlp& net, const MlpGrads& g, const AdamConfig& cfg, long step) {
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    auto& layers = net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      apply(layers[l].weight, g.weight[l], m_.weight[l], v_.weight[l], cfg, c1, c2);
      apply(layers[l].bias, g.bias[l], m_.bias[l], v_.bias[l], cfg, c1, c2);
    }
  }

 private:
  template <typename P, typename G>
  static void apply(P& param, const G& grad, G& m, G& v, const AdamConfig& cfg, double c1, double c2) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    param.array() -= cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
  }

  MlpGrads m_, v_;
};

}  // namespace sage::nn
