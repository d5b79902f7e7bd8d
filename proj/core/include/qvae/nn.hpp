#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qvae/autodiff.hpp"

namespace qvae {

// Named parameter tensors with per-parameter Adam moment accumulators.
// Single owner during a training step; one store per model instance.
class ParameterStore {
 public:
  ad::Var create(const std::string& name, Matrix init);
  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;  // sorted
  std::size_t size() const { return params_.size(); }

  void zero_grad();
  long step_count() const noexcept { return step_; }

  Matrix& moment1(const std::string& name) { return m_.at(name); }
  Matrix& moment2(const std::string& name) { return v_.at(name); }
  void bump_step() { ++step_; }

 private:
  std::map<std::string, ad::Var> params_;
  std::map<std::string, Matrix> m_, v_;
  long step_ = 0;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected adaptive-moment update over every parameter in the store;
// gradients are cleared afterwards.
void adam_step(ParameterStore& store, const AdamConfig& cfg);

// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
Matrix glorot_uniform(Index fan_in, Index fan_out, std::mt19937_64& rng);

// Fully connected layer, y = x W + b.
class Affine {
 public:
  Affine() = default;
  Affine(ParameterStore& store, const std::string& prefix, Index in, Index out,
         std::mt19937_64& rng);
  ad::Var forward(const ad::Var& x) const;
  const ad::Var& weight() const { return weight_; }
  const ad::Var& bias() const { return bias_; }

 private:
  ad::Var weight_, bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& prefix, Index width);
  ad::Var forward(const ad::Var& x) const;

 private:
  ad::Var gain_, bias_;
};

// Hidden stack: affine -> layer_norm -> swish per width. An empty width list
// is the identity map.
class FeatureStack {
 public:
  FeatureStack() = default;
  FeatureStack(ParameterStore& store, const std::string& prefix, Index in,
               const std::vector<Index>& widths, std::mt19937_64& rng);
  ad::Var forward(const ad::Var& x) const;
  Index input_dim() const { return input_dim_; }
  Index output_dim() const { return output_dim_; }

 private:
  std::vector<Affine> layers_;
  std::vector<LayerNorm> norms_;
  Index input_dim_ = 0, output_dim_ = 0;
};

// Hidden stack followed by a linear output layer.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& prefix, Index in,
      const std::vector<Index>& hidden, Index out, std::mt19937_64& rng);
  ad::Var forward(const ad::Var& x) const;
  Index input_dim() const { return stack_.input_dim(); }
  Index output_dim() const { return output_dim_; }

 private:
  FeatureStack stack_;
  Affine out_;
  Index output_dim_ = 0;
};

}  // namespace qvae
