#pragma once

// Small fully connected networks with explicit forward/backward passes,
// the losses used by the polishers and detector heads, SGD with momentum,
// and EMA parameter averaging.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dpp/rng.hpp"

namespace dpp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DenseLayer {
  Mat weight;  // out x in
  Vec bias;    // out
};

/// Affine layers with ReLU between them and an identity output.
struct DenseNet {
  std::vector<DenseLayer> layers;

  std::size_t input_size() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  std::size_t output_size() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool same_shape(const DenseNet& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].weight.rows() != other.layers[i].weight.rows() ||
          layers[i].weight.cols() != other.layers[i].weight.cols()) {
        return false;
      }
    }
    return true;
  }

  /// Same shapes, all parameters zero.
  DenseNet zeros_like() const {
    DenseNet z;
    for (const auto& l : layers) {
      z.layers.push_back({Mat::Zero(l.weight.rows(), l.weight.cols()), Vec::Zero(l.bias.size())});
    }
    return z;
  }

  void set_zero() {
    for (auto& l : layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }

  friend bool operator==(const DenseNet& a, const DenseNet& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      if (a.layers[i].weight != b.layers[i].weight || a.layers[i].bias != b.layers[i].bias) {
        return false;
      }
    }
    return true;
  }
};

/// Gradients share the network's layout.
using NetGrads = DenseNet;

/// He initialization: weights ~ N(0, 2 / fan_in), zero biases.
inline DenseNet init_net(const std::vector<int>& sizes, Rng& rng) {
  if (sizes.size() < 2) throw std::invalid_argument("init_net: need at least two layer sizes");
  DenseNet net;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const int in = sizes[i];
    const int out = sizes[i + 1];
    if (in < 1 || out < 1) throw std::invalid_argument("init_net: layer sizes must be >= 1");
    const double stddev = std::sqrt(2.0 / in);
    DenseLayer layer{Mat(out, in), Vec::Zero(out)};
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = stddev * rng.normal();
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

/// Per-layer inputs and pre-activations recorded by forward().
struct ForwardCache {
  std::vector<Vec> inputs;
  std::vector<Vec> pre;
};

inline Vec forward(const DenseNet& net, const Eigen::Ref<const Vec>& x, ForwardCache* cache = nullptr) {
  if (net.layers.empty()) throw std::invalid_argument("forward: empty network");
  if (static_cast<std::size_t>(x.size()) != net.input_size()) {
    throw std::invalid_argument("forward: input size " + std::to_string(x.size()) +
                                " != " + std::to_string(net.input_size()));
  }
  if (cache) {
    cache->inputs.resize(net.layers.size());
    cache->pre.resize(net.layers.size());
  }
  Vec h = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    Vec z = l.weight * h + l.bias;
    if (cache) {
      cache->inputs[i] = std::move(h);
      cache->pre[i] = z;
    }
    if (i + 1 < net.layers.size()) {
      h = z.cwiseMax(0.0);
    } else {
      h = std::move(z);
    }
  }
  return h;
}

/// Accumulates scale * d(dy . y)/d(params) into grads; returns dx.
inline Vec backward(const DenseNet& net, const ForwardCache& cache, const Eigen::Ref<const Vec>& dy,
                    NetGrads& grads, double scale = 1.0) {
  if (cache.inputs.size() != net.layers.size() || !grads.same_shape(net)) {
    throw std::invalid_argument("backward: cache or gradient shape mismatch");
  }
  if (static_cast<std::size_t>(dy.size()) != net.output_size()) {
    throw std::invalid_argument("backward: output gradient size mismatch");
  }
  Vec g = dy;
  for (std::size_t k = net.layers.size(); k-- > 0;) {
    if (k + 1 < net.layers.size()) {
      g = g.cwiseProduct((cache.pre[k].array() > 0.0).cast<double>().matrix());
    }
    grads.layers[k].weight.noalias() += scale * g * cache.inputs[k].transpose();
    grads.layers[k].bias.noalias() += scale * g;
    g = net.layers[k].weight.transpose() * g;
  }
  return g;
}

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

inline Vec softmax(const Eigen::Ref<const Vec>& logits) {
  const double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

inline LossGrad softmax_cross_entropy(const Eigen::Ref<const Vec>& logits, int target) {
  if (target < 0 || target >= logits.size()) {
    throw std::invalid_argument("softmax_cross_entropy: target out of range");
  }
  const double m = logits.maxCoeff();
  const Vec shifted = (logits.array() - m).matrix();
  const double lse = std::log(shifted.array().exp().sum());
  LossGrad out;
  out.loss = lse - shifted[target];
  out.grad = (shifted.array() - lse).exp().matrix();
  out.grad[target] -= 1.0;
  return out;
}

/// Element-wise Huber, summed: 0.5 e^2 / beta if |e| < beta, else |e| - beta / 2.
/// beta = 0 is plain l1 (subgradient 0 at e = 0).
inline LossGrad smooth_l1(const Eigen::Ref<const Vec>& pred, const Eigen::Ref<const Vec>& target,
                          double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("smooth_l1: beta must be >= 0");
  if (pred.size() != target.size()) throw std::invalid_argument("smooth_l1: size mismatch");
  LossGrad out;
  out.grad = Vec::Zero(pred.size());
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    const double a = std::abs(e);
    if (a < beta) {
      out.loss += 0.5 * e * e / beta;
      out.grad[i] = e / beta;
    } else {
      out.loss += a - 0.5 * beta;
      out.grad[i] = e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
    }
  }
  return out;
}

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct OptimState {
  OptimConfig cfg;
  NetGrads velocity;

  OptimState() = default;
  OptimState(const DenseNet& net, OptimConfig c) : cfg(c), velocity(net.zeros_like()) {}
};

inline bool all_finite(const DenseNet& n) {
  for (const auto& l : n.layers) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

/// v <- mu v + g + wd p;  p <- p - lr v
inline void sgd_step(DenseNet& params, const NetGrads& grads, OptimState& state) {
  if (!grads.same_shape(params)) throw std::invalid_argument("sgd_step: gradient shape mismatch");
  if (!state.velocity.same_shape(params)) state.velocity = params.zeros_like();
  if (!all_finite(grads)) throw DivergenceError("sgd_step: non-finite gradient");
  const auto& c = state.cfg;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& p = params.layers[i];
    auto& v = state.velocity.layers[i];
    const auto& g = grads.layers[i];
    v.weight = c.momentum * v.weight + g.weight + c.weight_decay * p.weight;
    v.bias = c.momentum * v.bias + g.bias + c.weight_decay * p.bias;
    p.weight -= c.lr * v.weight;
    p.bias -= c.lr * v.bias;
  }
}

/// teacher <- m teacher + (1 - m) student
inline void ema_update(DenseNet& teacher, const DenseNet& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw std::invalid_argument("ema_update: momentum must be in [0, 1]");
  }
  if (!teacher.same_shape(student)) throw std::invalid_argument("ema_update: shape mismatch");
  for (std::size_t i = 0; i < teacher.layers.size(); ++i) {
    auto& t = teacher.layers[i];
    const auto& s = student.layers[i];
    t.weight = momentum * t.weight + (1.0 - momentum) * s.weight;
    t.bias = momentum * t.bias + (1.0 - momentum) * s.bias;
  }
}

/// Scales every gradient entry in place.
inline void scale_grads(NetGrads& g, double s) {
  for (auto& l : g.layers) {
    l.weight *= s;
    l.bias *= s;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: {"format": "dpp-densenet", "version": 1, "layers": [{"out", "in",
// "weights": row-major, "bias"}]}. Doubles are written with round-trip precision.

inline constexpr int kNetFormatVersion = 1;

inline nlohmann::json net_to_json(const DenseNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers) {
    std::vector<double> w(l.weight.data(), l.weight.data() + l.weight.size());
    std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back({{"out", l.weight.rows()}, {"in", l.weight.cols()}, {"weights", w}, {"bias", b}});
  }
  return {{"format", "dpp-densenet"}, {"version", kNetFormatVersion}, {"layers", layers}};
}

inline DenseNet net_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "dpp-densenet" || j.value("version", 0) != kNetFormatVersion) {
    throw std::invalid_argument("checkpoint: unsupported format or version");
  }
  DenseNet net;
  for (const auto& lj : j.at("layers")) {
    const auto out = lj.at("out").get<Eigen::Index>();
    const auto in = lj.at("in").get<Eigen::Index>();
    const auto w = lj.at("weights").get<std::vector<double>>();
    const auto b = lj.at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != out * in || static_cast<Eigen::Index>(b.size()) != out) {
      throw std::invalid_argument("checkpoint: layer size mismatch");
    }
    if (!net.layers.empty() && net.layers.back().weight.rows() != in) {
      throw std::invalid_argument("checkpoint: layers do not chain");
    }
    DenseLayer l{Mat(out, in), Vec(out)};
    std::copy(w.begin(), w.end(), l.weight.data());
    std::copy(b.begin(), b.end(), l.bias.data());
    net.layers.push_back(std::move(l));
  }
  if (net.layers.empty()) throw std::invalid_argument("checkpoint: no layers");
  return net;
}

}  // namespace dpp
