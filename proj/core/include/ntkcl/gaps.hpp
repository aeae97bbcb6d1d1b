#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ntkcl/regime.hpp"

namespace ntkcl {

/// (1/n_τ)[λ²·tr(Ỹ_τᵀ(Φ_τ+λI)⁻¹Ỹ_τ) + Σ_{k>τ} ‖Φ_k(X_τ,X_k)·α_k‖²]. The cross
/// terms are multiplied by cross_scale² (cross-kernel blocks scaled by cross_scale).
double interplay_empirical_bound(const RegimeState& state, std::size_t tau, double cross_scale = 1.0);

/// Σ_τ √(tr(Ỹ_τᵀ(Φ_τ+λI)⁻¹Ỹ_τ) · Tr Φ_τ) / n_τ.
double rademacher_bound(const RegimeState& state);

struct GapConfig {
  double lipschitz = 1.0;
  double ceiling = 1.0;
  double delta = 0.05;
  std::size_t total_samples = 1;
  void validate() const;
};

struct GapReport {
  double empirical = 0.0;
  double rademacher = 0.0;
  double confidence = 0.0;
  double total = 0.0;
};

/// total = empirical + 2·ρ·rademacher + 3c√(log(2/δ)/(2N)).
GapReport population_bound(const RegimeState& state, std::size_t tau, const GapConfig& config);
double confidence_term(const GapConfig& config);

struct SpectralModel {
  std::vector<double> eigenvalues;  // descending, positive
  std::vector<double> weights;      // w*_ρ
  void validate() const;
};

struct FixedPointOptions {
  double damping = 0.5;
  std::size_t max_iterations = 100000;
  double tolerance = 1e-10;
};

struct SelfConsistentSolution {
  double tu = 0.0;
  double m = 0.0;
  std::size_t iterations = 0;
};

/// TU = Σ_ρ (1/λ_ρ + s/(λ+TU))⁻¹ by damped iteration; m = Σ_ρ (1/λ_ρ + s/(λ+TU))⁻².
SelfConsistentSolution solve_self_consistent(const SpectralModel& spectrum, double samples, double lambda,
                                             const FixedPointOptions& options = {});

/// E_g = Σ_ρ (w*²/λ_ρ)(1/λ_ρ + s/(λ+TU))⁻² (1 − m·s/(λ+TU)²)⁻¹.
double task_specific_gap(const SpectralModel& spectrum, double samples, double lambda,
                         const FixedPointOptions& options = {});

struct MonteCarloEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Kernel ridge regression on s Gaussian feature draws φ_ρ = √λ_ρ·g_ρ with
/// targets y = Σ w*_ρ φ_ρ; generalization error Σ λ_ρ(ŵ_ρ − w*_ρ)² averaged
/// over trials.
MonteCarloEstimate monte_carlo_gap(const SpectralModel& spectrum, std::size_t samples, double lambda,
                                   std::size_t trials, std::uint64_t seed);

/// Spectrum of a task from its Gram: eigenvalues of K/n above rel_floor·max,
/// with w_ρ = ‖v_ρᵀY‖/√(nλ_ρ) summed over target columns (E_g is linear in w²).
SpectralModel empirical_spectrum(const Matrix& gram, const Matrix& targets, double rel_floor = 1e-10);

}  // namespace ntkcl
