#include "ntkcl/ahps.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ntkcl/error.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {

ScalerState ScalerState::with_defaults() { return ScalerState{}; }

void ScalerState::validate() const {
  require(beta >= 0.0 && beta < 1.0, ErrorCode::kInvalidArgument, "smoothing beta must lie in [0, 1)");
  for (std::size_t i = 0; i < 3; ++i) {
    require(ranges[i].min <= ranges[i].max, ErrorCode::kInvalidArgument, "scaler range is inverted");
    require(std::isfinite(coeff[i]), ErrorCode::kInvalidArgument, "scaler coefficient is not finite");
  }
}

ScalerState scale_step(const ScalerState& state, double l_dis, double l_orth, double l_reg) {
  const std::array<double, 3> l{l_dis, l_orth, l_reg};
  for (double v : l) require(std::isfinite(v) && v >= 0.0, ErrorCode::kInvalidArgument, "losses must be finite and >= 0");
  ScalerState s = state;
  const double b = s.beta;
  for (std::size_t i = 0; i < 3; ++i) {
    s.mu[i] = b * s.mu[i] + (1.0 - b) * l[i];
    s.nu[i] = b * s.nu[i] + (1.0 - b) * l[i] * l[i];
    const double sigma = std::sqrt(std::max(s.nu[i] - s.mu[i] * s.mu[i], 0.0));
    const double delta = sigma < kSigmaGuard ? 0.0 : (l[i] - s.mu[i]) / sigma;
    const double target = std::tanh(delta) * s.ranges[i].width();
    s.coeff[i] = s.ranges[i].clip(b * s.coeff[i] + (1.0 - b) * target);
  }
  return s;
}

bool SearchBox::contains(const Point3& p) const noexcept {
  for (std::size_t i = 0; i < 3; ++i)
    if (!(p[i] >= dims[i].min && p[i] <= dims[i].max)) return false;
  return true;
}

void SearchBox::validate() const {
  for (const auto& d : dims)
    require(d.min < d.max && std::isfinite(d.min) && std::isfinite(d.max), ErrorCode::kInvalidArgument,
            "search box dimensions must be finite with min < max");
}

namespace {

Point3 from_unit(const SearchBox& box, const Point3& u) {
  Point3 p;
  for (std::size_t i = 0; i < 3; ++i) p[i] = box.dims[i].clip(box.dims[i].min + u[i] * box.dims[i].width());
  return p;
}

double radical_inverse(std::uint64_t n, std::uint64_t base) {
  double inv = 1.0 / static_cast<double>(base);
  double f = inv, r = 0.0;
  while (n > 0) {
    r += f * static_cast<double>(n % base);
    n /= base;
    f *= inv;
  }
  return r;
}

/// Halton points in bases 2, 3, 5 with a seeded Cranley-Patterson shift.
Point3 shifted_halton(std::uint64_t index, const Point3& shift) {
  constexpr std::array<std::uint64_t, 3> bases{2, 3, 5};
  Point3 u;
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = radical_inverse(index + 1, bases[i]) + shift[i];
    u[i] = v - std::floor(v);
  }
  return u;
}

}  // namespace

double GpPosterior::kernel(const Point3& a, const Point3& b) const {
  double s = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double d = (a[i] - b[i]) / length_[i];
    s += d * d;
  }
  return std::exp(-0.5 * s);
}

std::vector<double> GpPosterior::cross(const Point3& x) const {
  std::vector<double> k(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) k[i] = kernel(x, points_[i]);
  return k;
}

double GpPosterior::mean(const Point3& x) const {
  const auto k = cross(x);
  double m = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) m += k[i] * weights_(i, 0);
  return offset_ + scale_ * m;
}

double GpPosterior::variance(const Point3& x) const {
  const auto k = cross(x);
  const Matrix v = cholesky_solve(chol_, Matrix::column(k));
  double q = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) q += k[i] * v(i, 0);
  return scale_ * scale_ * std::max(0.0, 1.0 - q);
}

GpPosterior gp_fit(const GpState& state) {
  state.box.validate();
  require(state.points.size() == state.values.size(), ErrorCode::kShapeMismatch, "points and values differ in count");
  require(state.points.size() >= 2, ErrorCode::kInvalidArgument, "GP fit needs at least two observations");
  require(state.noise >= 0.0 && state.length_scale_fraction > 0.0, ErrorCode::kInvalidArgument,
          "GP noise must be >= 0 and length-scale positive");
  GpPosterior g;
  const std::size_t n = state.points.size();
  for (std::size_t i = 0; i < 3; ++i) g.length_[i] = state.length_scale_fraction * state.box.dims[i].width();
  g.points_ = state.points;
  for (std::size_t i = 0; i < n; ++i) {
    require(state.box.contains(state.points[i]), ErrorCode::kInvalidArgument, "observation outside the search box");
    require(std::isfinite(state.values[i]), ErrorCode::kInvalidArgument, "observation value is not finite");
  }
  double mean = 0.0;
  for (double v : state.values) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : state.values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  g.offset_ = mean;
  g.scale_ = sd > 1e-12 ? sd : 1.0;

  Matrix k(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) k(i, j) = g.kernel(state.points[i], state.points[j]);
  for (double jitter = 0.0;; jitter = jitter == 0.0 ? 1e-10 : jitter * 100.0) {
    try {
      g.chol_ = cholesky(add_diagonal(k, state.noise + jitter));
      g.jitter_ = jitter;
      break;
    } catch (const Error&) {
      if (jitter > 1e-2) throw Error(ErrorCode::kIllConditioned, "GP Gram stays singular after jitter");
    }
  }
  Matrix ys(n, 1);
  for (std::size_t i = 0; i < n; ++i) ys(i, 0) = (state.values[i] - g.offset_) / g.scale_;
  g.weights_ = cholesky_solve(g.chol_, ys);
  return g;
}

double expected_improvement(double mu, double sigma, double best) {
  if (sigma <= 0.0) return std::max(0.0, best - mu);
  const double z = (best - mu) / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return (best - mu) * cdf + sigma * pdf;
}

SearchResult gp_search(const Objective3& objective, const SearchBox& box, const SearchOptions& options) {
  box.validate();
  require(options.n_calls >= 3, ErrorCode::kInvalidArgument, "gp_search needs n_calls >= 3");
  require(options.candidates >= 1, ErrorCode::kInvalidArgument, "gp_search needs candidate points");
  const CounterRng root = CounterRng(options.seed).fork("gp-search");
  CounterRng shift_rng = root.fork("design-shift");
  const Point3 shift{shift_rng.uniform(), shift_rng.uniform(), shift_rng.uniform()};

  SearchResult out;
  GpState gp;
  gp.box = box;
  gp.seed = options.seed;
  auto evaluate = [&](const Point3& p) {
    const double v = objective(p);
    require(std::isfinite(v), ErrorCode::kDivergence, "search objective returned a non-finite value");
    out.history.push_back({p, v});
    gp.points.push_back(p);
    gp.values.push_back(v);
    if (out.history.size() == 1 || v < out.best_value) {
      out.best_value = v;
      out.best_point = p;
    }
  };

  const std::size_t initial = std::min(std::max<std::size_t>(options.initial_points, 1), options.n_calls);
  std::size_t halton = 0;
  for (std::size_t i = 0; i < initial; ++i) {
    if (i < options.warm_start.size()) {
      require(box.contains(options.warm_start[i]), ErrorCode::kInvalidArgument, "warm-start point outside the box");
      evaluate(options.warm_start[i]);
    } else {
      evaluate(from_unit(box, shifted_halton(halton++, shift)));
    }
  }
  while (out.history.size() < options.n_calls) {
    const GpPosterior post = gp_fit(gp);
    CounterRng cand = root.fork(static_cast<std::uint64_t>(out.history.size()));
    Point3 best_c{};
    double best_ei = -1.0;
    for (std::size_t c = 0; c < options.candidates; ++c) {
      const Point3 u{cand.uniform(), cand.uniform(), cand.uniform()};
      const Point3 p = from_unit(box, u);
      const double ei = expected_improvement(post.mean(p), std::sqrt(post.variance(p)), out.best_value);
      if (ei > best_ei) {
        best_ei = ei;
        best_c = p;
      }
    }
    evaluate(best_c);
  }
  return out;
}

std::vector<Point3> carry_forward(const SearchResult& previous) {
  require(!previous.history.empty(), ErrorCode::kInvalidArgument, "carry_forward needs a completed search");
  return {previous.best_point};
}

}  // namespace ntkcl
