#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qvae/nn.hpp"

namespace qvae {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckEntry {
  std::string component;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_pass() const;
  const GradCheckEntry* find(const std::string& component) const;
};

// Central finite differences (step h) of build_loss over every parameter in
// the store against one reverse-mode sweep. build_loss must rebuild the
// graph from the current parameter values and be deterministic.
// Relative error uses max(|fd|, |analytic|, 1e-6) in the denominator.
GradCheckEntry check_component(const std::string& name, ParameterStore& store,
                               const std::function<ad::Var()>& build_loss,
                               double h = 1e-6);

// Full verification surface: every autodiff primitive exactly once, a
// 3-layer MLP composite, the four elbo_loss modes, and dynamics_loss.
GradCheckReport run_grad_checks(std::uint64_t seed = 20240801);

}  // namespace qvae
