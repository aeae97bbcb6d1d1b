#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ntkcl/linalg.hpp"

namespace ntkcl {

struct Range {
  double min = 0.0;
  double max = 1.0;
  double width() const noexcept { return max - min; }
  double clip(double v) const noexcept { return v < min ? min : (v > max ? max : v); }
};

/// Dynamic loss scaling controller. Index 0 = dis (η), 1 = orth (υ), 2 = reg (λ).
struct ScalerState {
  double beta = 0.95;
  std::array<double, 3> mu{0.0, 0.0, 0.0};
  std::array<double, 3> nu{0.0, 0.0, 0.0};
  std::array<Range, 3> ranges{Range{0.1, 0.5}, Range{1e-5, 1e-3}, Range{1e-5, 1e-3}};
  std::array<double, 3> coeff{0.1, 1e-5, 1e-5};

  /// Coefficients start at their range floors.
  static ScalerState with_defaults();
  void validate() const;
  double eta() const noexcept { return coeff[0]; }
  double upsilon() const noexcept { return coeff[1]; }
  double lambda() const noexcept { return coeff[2]; }
};

inline constexpr double kSigmaGuard = 1e-12;

/// μ←βμ+(1−β)l; ν←βν+(1−β)l²; σ=√max(ν−μ²,0); δ=(l−μ)/σ (0 when σ<1e-12);
/// target=tanh(δ)·(max−min); coeff←clip(β·coeff+(1−β)·target).
ScalerState scale_step(const ScalerState& state, double l_dis, double l_orth, double l_reg);

using Point3 = std::array<double, 3>;

struct SearchBox {
  std::array<Range, 3> dims{Range{1e-5, 0.25}, Range{1e-5, 1e-2}, Range{1e-5, 1e-2}};
  std::array<std::string, 3> names{"nce_temp", "dis_temp", "reg_temp"};
  bool contains(const Point3& p) const noexcept;
  void validate() const;
};

struct GpState {
  SearchBox box;
  std::vector<Point3> points;
  std::vector<double> values;
  double length_scale_fraction = 0.2;
  double noise = 1e-6;
  std::uint64_t seed = 0;
};

/// Posterior of a squared-exponential GP over standardized observations.
class GpPosterior {
 public:
  double mean(const Point3& x) const;
  double variance(const Point3& x) const;
  double prior_variance() const noexcept { return scale_ * scale_; }
  /// Diagonal jitter added beyond the observation noise (0 when none was needed).
  double jitter() const noexcept { return jitter_; }

 private:
  friend GpPosterior gp_fit(const GpState& state);
  std::vector<Point3> points_;
  std::array<double, 3> length_{};
  Matrix chol_;
  Matrix weights_;
  double offset_ = 0.0;
  double scale_ = 1.0;
  double jitter_ = 0.0;
  double kernel(const Point3& a, const Point3& b) const;
  std::vector<double> cross(const Point3& x) const;
};

GpPosterior gp_fit(const GpState& state);

/// EI for minimization at mean μ, standard deviation σ and incumbent `best`.
double expected_improvement(double mu, double sigma, double best);

struct SearchRecord {
  Point3 point{};
  double value = 0.0;
};

struct SearchResult {
  Point3 best_point{};
  double best_value = 0.0;
  std::vector<SearchRecord> history;
};

struct SearchOptions {
  std::size_t n_calls = 10;
  std::size_t initial_points = 3;
  std::size_t candidates = 1024;
  std::uint64_t seed = 0;
  /// Points evaluated first, in order, before the quasi-random design.
  std::vector<Point3> warm_start;
};

using Objective3 = std::function<double(const Point3&)>;

SearchResult gp_search(const Objective3& objective, const SearchBox& box, const SearchOptions& options);

/// Initial design for the next task's search: the previous best first.
std::vector<Point3> carry_forward(const SearchResult& previous);

}  // namespace ntkcl
