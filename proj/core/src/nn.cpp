#include "qvae/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "qvae/rng.hpp"

namespace qvae {

ad::Var ParameterStore::create(const std::string& name, Matrix init) {
  if (params_.count(name))
    throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
  auto var = ad::make_var(std::move(init), /*requires_grad=*/true);
  m_[name] = Matrix::Zero(var.rows(), var.cols());
  v_[name] = Matrix::Zero(var.rows(), var.cols());
  params_.emplace(name, var);
  return var;
}

const ad::Var& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::invalid_argument("ParameterStore: unknown parameter '" + name + "'");
  return it->second;
}

bool ParameterStore::contains(const std::string& name) const {
  return params_.count(name) != 0;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& [_, var] : params_) var.node()->ensure_grad().setZero();
}

void adam_step(ParameterStore& store, const AdamConfig& cfg) {
  store.bump_step();
  const double t = static_cast<double>(store.step_count());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& name : store.names()) {
    auto& node = *store.get(name).node();
    const Matrix& g = node.ensure_grad();
    Matrix& m = store.moment1(name);
    Matrix& v = store.moment2(name);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    node.value.array() -=
        cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.epsilon);
  }
  store.zero_grad();
}

Matrix glorot_uniform(Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rand_uniform(fan_in, fan_out, -limit, limit, rng);
}

Affine::Affine(ParameterStore& store, const std::string& prefix, Index in,
               Index out, std::mt19937_64& rng) {
  weight_ = store.create(prefix + ".weight", glorot_uniform(in, out, rng));
  bias_ = store.create(prefix + ".bias", Matrix::Zero(1, out));
}

ad::Var Affine::forward(const ad::Var& x) const {
  return ad::bias_add(ad::matmul(x, weight_), bias_);
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& prefix, Index width) {
  gain_ = store.create(prefix + ".gain", Matrix::Ones(1, width));
  bias_ = store.create(prefix + ".bias", Matrix::Zero(1, width));
}

ad::Var LayerNorm::forward(const ad::Var& x) const {
  return ad::layer_norm(x, gain_, bias_);
}

FeatureStack::FeatureStack(ParameterStore& store, const std::string& prefix,
                           Index in, const std::vector<Index>& widths,
                           std::mt19937_64& rng)
    : input_dim_(in), output_dim_(in) {
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1)
      throw std::invalid_argument("FeatureStack: non-positive hidden width");
    const std::string name = prefix + ".fc" + std::to_string(i);
    layers_.emplace_back(store, name, output_dim_, widths[i], rng);
    norms_.emplace_back(store, name + ".norm", widths[i]);
    output_dim_ = widths[i];
  }
}

ad::Var FeatureStack::forward(const ad::Var& x) const {
  if (x.cols() != input_dim_)
    throw std::invalid_argument("FeatureStack: input dimension mismatch");
  ad::Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    h = ad::swish(norms_[i].forward(layers_[i].forward(h)));
  return h;
}

Mlp::Mlp(ParameterStore& store, const std::string& prefix, Index in,
         const std::vector<Index>& hidden, Index out, std::mt19937_64& rng)
    : stack_(store, prefix, in, hidden, rng), output_dim_(out) {
  out_ = Affine(store, prefix + ".out", stack_.output_dim(), out, rng);
}

ad::Var Mlp::forward(const ad::Var& x) const {
  return out_.forward(stack_.forward(x));
}

}  // namespace qvae
