#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crab/errors.hpp"
#include "crab/rng.hpp"

namespace crab {

// Uniform grid t_k = k * dt, k = 0..n_steps, covering [0, t_total].
struct TimeGrid {
  double t_total = 0.0;
  int n_steps = 0;
  double step = 0.0;

  static TimeGrid with_step(double t_total, double dt) {
    if (!(dt > 0.0)) throw DomainError("time step must be positive");
    if (!(t_total >= 0.0)) throw DomainError("total time must be nonnegative");
    const double steps = t_total / dt;
    const long n = std::lround(steps);
    if (std::abs(steps - static_cast<double>(n)) > 1e-6)
      throw DomainError("total time is not an integer multiple of dt");
    return {t_total, static_cast<int>(n), n > 0 ? t_total / static_cast<double>(n) : dt};
  }

  double dt() const { return step; }
  // Exact endpoints: node(0) == 0 and node(n_steps) == t_total.
  double node(int k) const {
    return k == n_steps ? t_total : t_total * (static_cast<double>(k) / n_steps);
  }
  double midpoint(int k) const {
    return t_total * ((static_cast<double>(k) + 0.5) / n_steps);
  }
};

// Control trajectory in J/U on a uniform grid. `midpoints[k]` is the value at
// t_k + dt/2 and drives the k-th propagation step.
struct SampledPulse {
  double dt = 0.0;
  std::vector<double> nodes;
  std::vector<double> midpoints;
  bool clamped = false;

  int n_steps() const { return static_cast<int>(midpoints.size()); }
  double duration() const { return dt * n_steps(); }

  SampledPulse reversed() const {
    SampledPulse out = *this;
    std::reverse(out.nodes.begin(), out.nodes.end());
    std::reverse(out.midpoints.begin(), out.midpoints.end());
    return out;
  }

  static SampledPulse constant(double value, const TimeGrid& grid) {
    SampledPulse p;
    p.dt = grid.dt();
    p.nodes.assign(grid.n_steps + 1, value);
    p.midpoints.assign(grid.n_steps, value);
    return p;
  }
};

enum class GuessKind { exponential, linear, custom_table };

inline std::string to_string(GuessKind kind) {
  switch (kind) {
    case GuessKind::exponential: return "exponential";
    case GuessKind::linear: return "linear";
    case GuessKind::custom_table: return "custom-table";
  }
  return "?";
}

inline GuessKind guess_kind_from_string(const std::string& s) {
  if (s == "exponential") return GuessKind::exponential;
  if (s == "linear") return GuessKind::linear;
  if (s == "custom-table") return GuessKind::custom_table;
  throw ConfigError("unknown guess kind '" + s + "'");
}

// Initial ramp c0(t). For custom tables the boundaries are the first and last
// table values and interpolation is monotone piecewise-cubic Hermite
// (Fritsch-Carlson), so a monotone table gives a monotone ramp.
class GuessPulse {
 public:
  GuessPulse() = default;

  GuessPulse(GuessKind kind, double start, double end, double t_total)
      : kind_(kind), start_(start), end_(end), t_total_(t_total) {
    if (kind == GuessKind::custom_table)
      throw DomainError("custom-table guess needs table points");
    validate();
  }

  static GuessPulse from_table(std::vector<std::pair<double, double>> table) {
    if (table.size() < 2) throw DomainError("custom-table guess needs >= 2 points");
    std::sort(table.begin(), table.end());
    for (std::size_t i = 1; i < table.size(); ++i)
      if (!(table[i].first > table[i - 1].first))
        throw DomainError("custom-table times must be strictly increasing");
    if (table.front().first != 0.0)
      throw DomainError("custom-table must start at t = 0");
    GuessPulse g;
    g.kind_ = GuessKind::custom_table;
    g.start_ = table.front().second;
    g.end_ = table.back().second;
    g.t_total_ = table.back().first;
    g.table_ = std::move(table);
    g.validate();
    g.build_slopes();
    return g;
  }

  GuessKind kind() const { return kind_; }
  double start() const { return start_; }
  double end() const { return end_; }
  double t_total() const { return t_total_; }
  const std::vector<std::pair<double, double>>& table() const { return table_; }

  double value(double t) const {
    if (t <= 0.0) return start_;
    if (t >= t_total_) return end_;
    const double s = t / t_total_;
    switch (kind_) {
      case GuessKind::exponential: return start_ * std::pow(end_ / start_, s);
      case GuessKind::linear: return start_ + (end_ - start_) * s;
      case GuessKind::custom_table: return table_value(t);
    }
    return start_;
  }

 private:
  void validate() const {
    if (!(t_total_ > 0.0)) throw DomainError("guess duration must be positive");
    if (!(start_ > 0.0) || !(end_ > 0.0))
      throw DomainError("guess boundaries must be positive");
    for (const auto& [t, c] : table_)
      if (!(c > 0.0)) throw DomainError("custom-table values must be positive");
  }

  void build_slopes() {
    const std::size_t n = table_.size();
    std::vector<double> delta(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i)
      delta[i] = (table_[i + 1].second - table_[i].second) /
                 (table_[i + 1].first - table_[i].first);
    slopes_.assign(n, 0.0);
    slopes_[0] = delta[0];
    slopes_[n - 1] = delta[n - 2];
    for (std::size_t i = 1; i + 1 < n; ++i)
      slopes_[i] = (delta[i - 1] * delta[i] <= 0.0) ? 0.0 : 0.5 * (delta[i - 1] + delta[i]);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (delta[i] == 0.0) {
        slopes_[i] = slopes_[i + 1] = 0.0;
        continue;
      }
      const double a = slopes_[i] / delta[i];
      const double b = slopes_[i + 1] / delta[i];
      const double r = a * a + b * b;
      if (r > 9.0) {
        const double tau = 3.0 / std::sqrt(r);
        slopes_[i] = tau * a * delta[i];
        slopes_[i + 1] = tau * b * delta[i];
      }
    }
  }

  double table_value(double t) const {
    auto it = std::upper_bound(table_.begin(), table_.end(), t,
                               [](double x, const auto& p) { return x < p.first; });
    const std::size_t i = static_cast<std::size_t>(it - table_.begin()) - 1;
    const double h = table_[i + 1].first - table_[i].first;
    const double s = (t - table_[i].first) / h;
    const double h00 = (2 * s * s * s - 3 * s * s + 1);
    const double h10 = (s * s * s - 2 * s * s + s);
    const double h01 = (-2 * s * s * s + 3 * s * s);
    const double h11 = (s * s * s - s * s);
    return h00 * table_[i].second + h10 * h * slopes_[i] +
           h01 * table_[i + 1].second + h11 * h * slopes_[i + 1];
  }

  GuessKind kind_ = GuessKind::exponential;
  double start_ = 1.0;
  double end_ = 1.0;
  double t_total_ = 1.0;
  std::vector<std::pair<double, double>> table_;
  std::vector<double> slopes_;
};

inline SampledPulse guess_pulse(const GuessPulse& guess, const TimeGrid& grid) {
  SampledPulse p;
  p.dt = grid.dt();
  p.nodes.resize(grid.n_steps + 1);
  p.midpoints.resize(grid.n_steps);
  for (int k = 0; k <= grid.n_steps; ++k) p.nodes[k] = guess.value(grid.node(k));
  for (int k = 0; k < grid.n_steps; ++k) p.midpoints[k] = guess.value(grid.midpoint(k));
  return p;
}

// Guess ramp plus truncated randomized-Fourier correction:
//
//   c(t) = c0(t) f(t),
//   g(t) = 1 + sum_k [A_k sin(nu_k t) + B_k cos(nu_k t)],
//   nu_k = 2 pi k (1 + r_k) / T,
//   f(t) = g(t) - (1 - t/T)(g(0) - 1) - (t/T)(g(T) - 1).
//
// The affine de-trend pins f(0) = f(T) = 1 for any coefficients.
struct PulseSpec {
  GuessPulse guess;
  double t_total = 50.0;
  int n_modes = 0;
  std::vector<double> sin_coeffs;
  std::vector<double> cos_coeffs;
  std::vector<double> freq_jitter;
  std::uint64_t rng_seed = 0;

  void validate_shape() const {
    if (!(t_total > 0.0)) throw ShapeError("pulse duration must be positive");
    if (n_modes < 0) throw ShapeError("number of modes must be nonnegative");
    const auto m = static_cast<std::size_t>(n_modes);
    if (sin_coeffs.size() != m || cos_coeffs.size() != m || freq_jitter.size() != m)
      throw ShapeError("coefficient vectors must have length n_modes = " +
                       std::to_string(n_modes));
    if (std::abs(guess.t_total() - t_total) > 1e-12 * std::max(1.0, t_total))
      throw ShapeError("guess ramp duration differs from pulse duration");
  }

  double frequency(int k) const {
    return 2.0 * std::numbers::pi * (k + 1) * (1.0 + freq_jitter[k]) / t_total;
  }

  std::vector<double> frequencies() const {
    std::vector<double> nu(n_modes);
    for (int k = 0; k < n_modes; ++k) nu[k] = frequency(k);
    return nu;
  }

  double raw_correction(double t) const {
    double g = 1.0;
    for (int k = 0; k < n_modes; ++k) {
      const double phase = frequency(k) * t;
      g += sin_coeffs[k] * std::sin(phase) + cos_coeffs[k] * std::cos(phase);
    }
    return g;
  }

  double correction(double t) const {
    if (t <= 0.0 || t >= t_total) return 1.0;
    const double g0 = raw_correction(0.0) - 1.0;
    const double gT = raw_correction(t_total) - 1.0;
    const double s = t / t_total;
    return raw_correction(t) - (1.0 - s) * g0 - s * gT;
  }

  double value(double t) const { return guess.value(t) * correction(t); }

  // Fresh randomized harmonics r_k in [0, 1) drawn from `seed`.
  static std::vector<double> draw_jitter(int n_modes, std::uint64_t seed) {
    return uniform_vector(static_cast<std::size_t>(n_modes), seed);
  }

  static PulseSpec uncorrected(const GuessPulse& guess, int n_modes, std::uint64_t seed) {
    PulseSpec s;
    s.guess = guess;
    s.t_total = guess.t_total();
    s.n_modes = n_modes;
    s.sin_coeffs.assign(n_modes, 0.0);
    s.cos_coeffs.assign(n_modes, 0.0);
    s.freq_jitter = draw_jitter(n_modes, seed);
    s.rng_seed = seed;
    return s;
  }
};

inline constexpr double kPositivityFloorFraction = 1e-4;

inline SampledPulse render_pulse(const PulseSpec& spec, const TimeGrid& grid,
                                 double floor_fraction = kPositivityFloorFraction) {
  spec.validate_shape();
  if (std::abs(grid.t_total - spec.t_total) > 1e-12 * std::max(1.0, spec.t_total))
    throw DomainError("time grid does not span the pulse duration");
  const double floor =
      floor_fraction * std::min(spec.guess.start(), spec.guess.end());

  SampledPulse p;
  p.dt = grid.dt();
  p.nodes.resize(grid.n_steps + 1);
  p.midpoints.resize(grid.n_steps);
  auto clamp = [&](double c) {
    if (c > 0.0) return c;
    p.clamped = true;
    return floor;
  };
  for (int k = 0; k <= grid.n_steps; ++k) {
    if (k == 0) {
      p.nodes[k] = spec.guess.start();
    } else if (k == grid.n_steps) {
      p.nodes[k] = spec.guess.end();
    } else {
      p.nodes[k] = clamp(spec.value(grid.node(k)));
    }
  }
  for (int k = 0; k < grid.n_steps; ++k) p.midpoints[k] = clamp(spec.value(grid.midpoint(k)));
  return p;
}

}  // namespace crab
