#pragma once

// Dense ReLU networks with manual backpropagation, Adam, and a central
// finite-difference gradient checker. Samples are stored column-wise: a batch
// of n inputs of width d is a (d x n) matrix.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmil/errors.hpp"
#include "dmil/random.hpp"

namespace dmil {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Named view of one contiguous parameter (or gradient) array.
struct ParamBlock {
  std::string name;
  std::span<double> values;
};

struct ConstParamBlock {
  std::string name;
  std::span<const double> values;
};

inline std::span<double> as_span(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

inline std::vector<ConstParamBlock> as_const(const std::vector<ParamBlock>& blocks) {
  std::vector<ConstParamBlock> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back({b.name, b.values});
  return out;
}

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

struct DenseLayer {
  Matrix weight;  // (out, in)
  Vector bias;    // (out)
};

/// Fully connected network: ReLU on hidden layers, identity on the output.
class DenseNet {
 public:
  DenseNet() = default;

  /// Zero-initialized network with the given layer sizes (input ... output).
  explicit DenseNet(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
    require(sizes_.size() >= 2, "DenseNet needs at least an input and an output size");
    for (int s : sizes_) require(s > 0, "DenseNet layer sizes must be positive");
    for (std::size_t k = 0; k + 1 < sizes_.size(); ++k) {
      layers_.push_back({Matrix::Zero(sizes_[k + 1], sizes_[k]), Vector::Zero(sizes_[k + 1])});
    }
  }

  /// He-uniform weights (bound sqrt(6 / fan_in)), zero biases.
  static DenseNet he_uniform(std::vector<int> layer_sizes, Rng& rng) {
    DenseNet net(std::move(layer_sizes));
    for (auto& layer : net.layers_) {
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.weight.cols()));
      for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
        layer.weight.data()[i] = rng.uniform(-bound, bound);
      }
    }
    return net;
  }

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  std::size_t depth() const { return layers_.size(); }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  /// Weights then bias, layer by layer.
  std::vector<ParamBlock> blocks(const std::string& prefix = "") {
    std::vector<ParamBlock> out;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      out.push_back({prefix + "W" + std::to_string(k), as_span(layers_[k].weight)});
      out.push_back({prefix + "b" + std::to_string(k), as_span(layers_[k].bias)});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  bool all_finite() const {
    return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
      return l.weight.allFinite() && l.bias.allFinite();
    });
  }

 private:
  std::vector<int> sizes_;
  std::vector<DenseLayer> layers_;
};

/// Gradient slots shaped exactly like a DenseNet's parameters.
class GradientBuffer {
 public:
  GradientBuffer() = default;
  explicit GradientBuffer(const DenseNet& net) {
    for (const auto& l : net.layers()) {
      layers_.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
    }
  }

  void zero() {
    for (auto& l : layers_) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  std::vector<ParamBlock> blocks(const std::string& prefix = "") {
    std::vector<ParamBlock> out;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      out.push_back({prefix + "W" + std::to_string(k), as_span(layers_[k].weight)});
      out.push_back({prefix + "b" + std::to_string(k), as_span(layers_[k].bias)});
    }
    return out;
  }

  bool is_zero() const {
    return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
      return (l.weight.array() == 0.0).all() && (l.bias.array() == 0.0).all();
    });
  }

 private:
  std::vector<DenseLayer> layers_;
};

/// Inputs seen by each layer during a forward pass; inputs[k] feeds layer k.
struct ForwardCache {
  std::vector<Matrix> inputs;
  bool empty() const { return inputs.empty(); }
};

inline Matrix forward(const DenseNet& net, const Matrix& input, ForwardCache* cache = nullptr) {
  if (input.rows() != net.input_dim()) {
    throw ContractViolation("forward: input has " + std::to_string(input.rows()) + " rows, net expects " +
                            std::to_string(net.input_dim()));
  }
  if (cache) cache->inputs.clear();
  Matrix x = input;
  const auto& layers = net.layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (cache) cache->inputs.push_back(x);
    Matrix z = layers[k].weight * x;
    z.colwise() += layers[k].bias;
    if (k + 1 < layers.size()) z = z.cwiseMax(0.0);
    x = std::move(z);
  }
  return x;
}

inline Vector forward(const DenseNet& net, const Vector& input) {
  Matrix in = input;
  return forward(net, in).col(0);
}

/// Backpropagates `upstream` (d loss / d output, one column per sample) through
/// the cached forward pass. Parameter gradients are accumulated into `grads`;
/// the gradient with respect to the input is returned.
inline Matrix backward(const DenseNet& net, const ForwardCache& cache, const Matrix& upstream,
                       GradientBuffer& grads) {
  const auto& layers = net.layers();
  if (cache.inputs.size() != layers.size()) throw ContractViolation("backward: no cached activations for this net");
  if (upstream.rows() != net.output_dim() || upstream.cols() != cache.inputs.front().cols()) {
    throw ContractViolation("backward: upstream gradient shape does not match the cached forward pass");
  }
  if (grads.layers().size() != layers.size()) throw ContractViolation("backward: gradient buffer shape mismatch");

  Matrix delta = upstream;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const Matrix& x = cache.inputs[k];
    grads.layers()[k].weight.noalias() += delta * x.transpose();
    grads.layers()[k].bias += delta.rowwise().sum();
    Matrix dx = layers[k].weight.transpose() * delta;
    if (k > 0) {
      // x is the ReLU output of layer k-1; the derivative is 1 where it is positive.
      dx = (x.array() > 0.0).select(dx, 0.0);
    }
    delta = std::move(dx);
  }
  return delta;
}

/// Convenience form: fresh gradient buffer plus input gradient.
inline std::pair<GradientBuffer, Matrix> backward(const DenseNet& net, const ForwardCache& cache,
                                                  const Matrix& upstream) {
  GradientBuffer grads(net);
  Matrix input_grad = backward(net, cache, upstream, grads);
  return {std::move(grads), std::move(input_grad)};
}

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moments for a fixed list of parameter blocks.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig config) : config_(config) {
    require(config_.learning_rate > 0.0, "Adam learning rate must be positive");
  }

  std::size_t step_count() const { return t_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Vector>& first_moments() const { return m_; }
  const std::vector<Vector>& second_moments() const { return v_; }

  /// One bias-corrected Adam update. Moments are sized on the first call.
  void step(const std::vector<ParamBlock>& params, const std::vector<ConstParamBlock>& grads) {
    if (params.size() != grads.size()) throw ContractViolation("adam_step: parameter/gradient block count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Vector::Zero(static_cast<Eigen::Index>(p.values.size())));
        v_.push_back(Vector::Zero(static_cast<Eigen::Index>(p.values.size())));
      }
    }
    if (m_.size() != params.size()) throw ContractViolation("adam_step: block count changed between steps");
    for (std::size_t b = 0; b < params.size(); ++b) {
      if (params[b].values.size() != grads[b].values.size() ||
          static_cast<Eigen::Index>(params[b].values.size()) != m_[b].size()) {
        throw ContractViolation("adam_step: shape mismatch in block " + params[b].name);
      }
      if (!all_finite(grads[b].values)) throw NonFiniteError("adam_step: non-finite gradient in block " + grads[b].name);
    }

    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < params.size(); ++b) {
      auto p = params[b].values;
      auto g = grads[b].values;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const auto j = static_cast<Eigen::Index>(i);
        m_[b][j] = config_.beta1 * m_[b][j] + (1.0 - config_.beta1) * g[i];
        v_[b][j] = config_.beta2 * v_[b][j] + (1.0 - config_.beta2) * g[i] * g[i];
        const double m_hat = m_[b][j] / c1;
        const double v_hat = v_[b][j] / c2;
        p[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
      }
      if (!all_finite(p)) throw NonFiniteError("adam_step: parameters became non-finite in block " + params[b].name);
    }
  }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<Vector> m_;
  std::vector<Vector> v_;
};

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::string worst_block;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares analytic gradients against central differences of `loss`, which
/// must read the current values of `params`. Every perturbed entry is restored
/// before returning.
template <class LossFn>
GradientCheckReport finite_difference_check(LossFn&& loss, const std::vector<ParamBlock>& params,
                                            const std::vector<ConstParamBlock>& analytic, double h = 1e-5) {
  if (params.size() != analytic.size()) throw ContractViolation("finite_difference_check: block count mismatch");
  GradientCheckReport report;
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].values.size() != analytic[b].values.size()) {
      throw ContractViolation("finite_difference_check: shape mismatch in block " + params[b].name);
    }
    for (std::size_t i = 0; i < params[b].values.size(); ++i) {
      double& p = params[b].values[i];
      const double original = p;
      p = original + h;
      const double up = loss();
      p = original - h;
      const double down = loss();
      p = original;
      const double numeric = (up - down) / (2.0 * h);
      const double exact = analytic[b].values[i];
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
      const double err = std::abs(exact - numeric) / denom;
      ++report.checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_block = params[b].name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace dmil
