#include "ntkcl/gaps.hpp"

#include <algorithm>
#include <cmath>

#include "ntkcl/error.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {

double interplay_empirical_bound(const RegimeState& state, std::size_t tau, double cross_scale) {
  const TaskKernelRecord& r = state.record(tau);
  const double n = static_cast<double>(r.inputs.rows());
  double total = r.lambda * r.lambda * trace(matmul_tn(r.residual_targets, r.alpha));
  for (std::size_t k = tau + 1; k <= state.tasks(); ++k)
    total += cross_scale * cross_scale * frobenius_sq(state.contribution(k, r.inputs));
  return total / n;
}

double rademacher_bound(const RegimeState& state) {
  double total = 0.0;
  for (const auto& r : state.records()) {
    const double g2 = trace(matmul_tn(r.residual_targets, r.alpha));
    const double tr = trace(kernel_matrix(r.kernel, r.inputs, r.inputs));
    total += std::sqrt(std::max(0.0, g2 * tr)) / static_cast<double>(r.inputs.rows());
  }
  return total;
}

void GapConfig::validate() const {
  require(lipschitz > 0.0, ErrorCode::kInvalidArgument, "Lipschitz constant must be positive");
  require(ceiling > 0.0, ErrorCode::kInvalidArgument, "loss ceiling must be positive");
  require(delta > 0.0 && delta < 1.0, ErrorCode::kInvalidArgument, "confidence delta must lie in (0, 1)");
  require(total_samples >= 1, ErrorCode::kInvalidArgument, "total sample count must be at least 1");
}

double confidence_term(const GapConfig& c) {
  c.validate();
  return 3.0 * c.ceiling * std::sqrt(std::log(2.0 / c.delta) / (2.0 * static_cast<double>(c.total_samples)));
}

GapReport population_bound(const RegimeState& state, std::size_t tau, const GapConfig& config) {
  config.validate();
  GapReport g;
  g.empirical = interplay_empirical_bound(state, tau);
  g.rademacher = rademacher_bound(state);
  g.confidence = confidence_term(config);
  g.total = g.empirical + 2.0 * config.lipschitz * g.rademacher + g.confidence;
  return g;
}

void SpectralModel::validate() const {
  require(eigenvalues.size() == weights.size(), ErrorCode::kShapeMismatch,
          "eigenvalue and weight counts differ");
  for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
    require(eigenvalues[i] > 0.0 && std::isfinite(eigenvalues[i]), ErrorCode::kInvalidArgument,
            "eigenvalues must be positive");
    if (i > 0)
      require(eigenvalues[i] <= eigenvalues[i - 1], ErrorCode::kInvalidArgument, "eigenvalues must be descending");
  }
}

namespace {

double rhs(const SpectralModel& sp, double s, double lambda, double tu, int power) {
  double acc = 0.0;
  for (double l : sp.eigenvalues) {
    const double inv = 1.0 / (1.0 / l + s / (lambda + tu));
    acc += power == 1 ? inv : inv * inv;
  }
  return acc;
}

}  // namespace

SelfConsistentSolution solve_self_consistent(const SpectralModel& sp, double s, double lambda,
                                             const FixedPointOptions& opt) {
  sp.validate();
  require(s >= 0.0 && lambda >= 0.0, ErrorCode::kInvalidArgument, "sample count and ridge must be nonnegative");
  require(!sp.eigenvalues.empty(), ErrorCode::kInvalidArgument, "spectrum is empty");
  SelfConsistentSolution out;
  double tu = 0.0;
  for (double l : sp.eigenvalues) tu += l;  // the s = 0 solution
  if (s > 0.0) {
    bool converged = false;
    for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
      // With λ = 0 the map is undefined at TU = 0; its limit there is 0.
      const double f = (lambda + tu) > 0.0 ? rhs(sp, s, lambda, tu, 1) : 0.0;
      out.iterations = it;
      if (std::abs(f - tu) <= opt.tolerance) {
        tu = f;
        converged = true;
        break;
      }
      tu = (1.0 - opt.damping) * tu + opt.damping * f;
    }
    if (!converged)
      throw Error(ErrorCode::kNoConvergence,
                  "self-consistent equation did not converge in " + std::to_string(opt.max_iterations) + " iterations");
  }
  out.tu = tu;
  out.m = (lambda + tu) > 0.0 || s == 0.0 ? rhs(sp, s, lambda, tu, 2) : 0.0;
  return out;
}

double task_specific_gap(const SpectralModel& sp, double s, double lambda, const FixedPointOptions& opt) {
  const SelfConsistentSolution sc = solve_self_consistent(sp, s, lambda, opt);
  const double denom_base = lambda + sc.tu;
  const double factor = s == 0.0 ? 1.0 : 1.0 - sc.m * s / (denom_base * denom_base);
  if (!(factor > 0.0))
    throw Error(ErrorCode::kSingularDenominator,
                "1 - m*s/(lambda+TU)^2 = " + std::to_string(factor) + " is not positive");
  double eg = 0.0;
  for (std::size_t i = 0; i < sp.eigenvalues.size(); ++i) {
    const double l = sp.eigenvalues[i];
    const double w = sp.weights[i];
    const double inv = s == 0.0 ? l : 1.0 / (1.0 / l + s / denom_base);
    eg += (w * w / l) * inv * inv;
  }
  return eg / factor;
}

MonteCarloEstimate monte_carlo_gap(const SpectralModel& sp, std::size_t s, double lambda, std::size_t trials,
                                   std::uint64_t seed) {
  sp.validate();
  require(trials >= 100, ErrorCode::kInvalidArgument, "Monte-Carlo gap needs at least 100 trials");
  require(lambda >= 0.0, ErrorCode::kInvalidArgument, "ridge must be nonnegative");
  const std::size_t modes = sp.eigenvalues.size();
  std::vector<double> errors(trials, 0.0);
  const CounterRng root = CounterRng(seed).fork("spectral-mc");
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng = root.fork(static_cast<std::uint64_t>(t));
    std::vector<double> w_hat(modes, 0.0);
    if (s > 0) {
      Matrix phi(s, modes);
      Matrix y(s, 1);
      for (std::size_t i = 0; i < s; ++i) {
        double yi = 0.0;
        for (std::size_t r = 0; r < modes; ++r) {
          phi(i, r) = std::sqrt(sp.eigenvalues[r]) * rng.normal();
          yi += sp.weights[r] * phi(i, r);
        }
        y(i, 0) = yi;
      }
      // ŵ = Φᵀ(ΦΦᵀ+λI)⁻¹y = (ΦᵀΦ+λI)⁻¹Φᵀy; solve whichever system is smaller.
      Matrix w;
      if (s <= modes)
        w = matmul_tn(phi, ridge_solve(matmul_nt(phi, phi), lambda, y));
      else
        w = ridge_solve(matmul_tn(phi, phi), lambda, matmul_tn(phi, y));
      for (std::size_t r = 0; r < modes; ++r) w_hat[r] = w(r, 0);
    }
    double err = 0.0;
    for (std::size_t r = 0; r < modes; ++r) {
      const double d = w_hat[r] - sp.weights[r];
      err += sp.eigenvalues[r] * d * d;
    }
    errors[t] = err;
  }
  MonteCarloEstimate out;
  for (double e : errors) out.mean += e;
  out.mean /= static_cast<double>(trials);
  double var = 0.0;
  for (double e : errors) var += (e - out.mean) * (e - out.mean);
  var /= static_cast<double>(trials - 1);
  out.stderr_ = std::sqrt(var / static_cast<double>(trials));
  return out;
}

SpectralModel empirical_spectrum(const Matrix& gram, const Matrix& targets, double rel_floor) {
  const std::size_t n = gram.rows();
  require(n > 0 && gram.cols() == n, ErrorCode::kShapeMismatch, "Gram must be square and nonempty");
  require(targets.rows() == n, ErrorCode::kShapeMismatch, "target rows differ from the Gram size");
  const double dn = static_cast<double>(n);
  const SymEig e = sym_eig((1.0 / dn) * (0.5 * (gram + transpose(gram))));
  SpectralModel sp;
  const double top = e.eigenvalues.empty() ? 0.0 : e.eigenvalues.front();
  for (std::size_t r = 0; r < e.eigenvalues.size(); ++r) {
    const double lam = e.eigenvalues[r];
    if (!(lam > rel_floor * top) || lam <= 0.0) break;
    double w2 = 0.0;
    for (std::size_t c = 0; c < targets.cols(); ++c) {
      double proj = 0.0;
      for (std::size_t i = 0; i < n; ++i) proj += e.eigenvectors(i, r) * targets(i, c);
      w2 += proj * proj;
    }
    sp.eigenvalues.push_back(lam);
    sp.weights.push_back(std::sqrt(w2 / (dn * lam)));
  }
  require(!sp.eigenvalues.empty(), ErrorCode::kZeroMatrix, "Gram has no positive eigenvalues");
  return sp;
}

}  // namespace ntkcl
