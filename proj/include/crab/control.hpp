#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "crab/backend.hpp"
#include "crab/errors.hpp"
#include "crab/nelder_mead.hpp"
#include "crab/observables.hpp"
#include "crab/pulse.hpp"
#include "crab/rng.hpp"

namespace crab {

enum class MeritKind { residual_energy_per_site, defect_density };

inline std::string to_string(MeritKind k) {
  return k == MeritKind::residual_energy_per_site ? "residual_energy_per_site" : "defect_density";
}

inline MeritKind merit_kind_from_string(const std::string& s) {
  if (s == "residual_energy_per_site") return MeritKind::residual_energy_per_site;
  if (s == "defect_density") return MeritKind::defect_density;
  throw ConfigError("unknown figure of merit '" + s + "'");
}

// Reference occupation for the defect density.
enum class DefectReference { filling, final_ground_state };

struct FigureOfMerit {
  MeritKind kind = MeritKind::residual_energy_per_site;
  double value = 0.0;
  double residual_energy = 0.0;  // Delta E / N
  double defect_density = 0.0;   // rho
  double final_energy = 0.0;
  SiteProfile profile;
  bool clamped = false;
  bool timed_out = false;
  double discarded_weight = 0.0;
};

// Figure-of-merit evaluator for one lattice and one guess ramp. The initial
// ground state at c(0) and the target ground energy at c(T) are computed
// once; evaluate() is then pure and safe to call from several threads.
class Objective {
 public:
  Objective(std::shared_ptr<const Backend> backend, GuessPulse guess,
            MeritKind kind = MeritKind::residual_energy_per_site,
            DefectReference reference = DefectReference::filling,
            std::optional<double> time_limit_seconds = std::nullopt)
      : backend_(std::move(backend)),
        guess_(std::move(guess)),
        kind_(kind),
        reference_(reference),
        time_limit_(time_limit_seconds),
        grid_(TimeGrid::with_step(guess_.t_total(), backend_->dt())) {
    GroundState initial = backend_->ground_state(guess_.start());
    initial_ = std::move(initial.state);
    GroundState target = backend_->ground_state(guess_.end());
    target_energy_ = target.energy;
    target_profile_ = backend_->measure(target.state, guess_.end()).profile;
  }

  const Backend& backend() const { return *backend_; }
  const GuessPulse& guess() const { return guess_; }
  const TimeGrid& grid() const { return grid_; }
  MeritKind kind() const { return kind_; }
  double target_energy() const { return target_energy_; }
  const SiteProfile& target_profile() const { return target_profile_; }
  const BackendState& initial_state() const { return initial_; }

  FigureOfMerit evaluate(const PulseSpec& spec) const {
    return evaluate_pulse(render_pulse(spec, grid_));
  }

  FigureOfMerit evaluate_pulse(const SampledPulse& pulse) const {
    FigureOfMerit f;
    f.kind = kind_;
    f.clamped = pulse.clamped;
    Deadline deadline;
    if (time_limit_)
      deadline = std::chrono::steady_clock::now() +
                 std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                     std::chrono::duration<double>(*time_limit_));
    BackendState final_state;
    try {
      final_state = backend_->evolve(initial_, pulse, deadline);
    } catch (const TimeLimitError&) {
      f.timed_out = true;
      f.value = f.residual_energy = f.defect_density = std::numeric_limits<double>::infinity();
      return f;
    }
    const Snapshot snap = backend_->measure(final_state, guess_.end());
    const int n = backend_->params().n_sites;
    f.final_energy = snap.energy;
    f.residual_energy = residual_energy_per_site(snap.energy, target_energy_, n);
    f.defect_density = reference_ == DefectReference::filling
                           ? defect_density(snap.profile)
                           : defect_density(snap.profile, target_profile_.occupations);
    f.profile = snap.profile;
    f.discarded_weight = snap.discarded_weight;
    f.value = kind_ == MeritKind::residual_energy_per_site ? f.residual_energy : f.defect_density;
    return f;
  }

 private:
  std::shared_ptr<const Backend> backend_;
  GuessPulse guess_;
  MeritKind kind_;
  DefectReference reference_;
  std::optional<double> time_limit_;
  TimeGrid grid_;
  BackendState initial_;
  double target_energy_ = 0.0;
  SiteProfile target_profile_;
};

// Runs `task(i)` for i in [0, count) on up to `workers` threads. Results are
// written by index, so the outcome does not depend on scheduling.
template <class Task>
void parallel_for(std::size_t count, int workers, Task&& task) {
  const std::size_t w = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, workers)));
  if (w <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < count;) {
        try {
          task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct TraceRow {
  int index = 0;
  int restart = 0;
  std::vector<double> parameters;
  double value = 0.0;
  double best_value = 0.0;
  double defect_density = 0.0;
  double residual_energy = 0.0;
  bool clamped = false;
  bool timed_out = false;
  double wall_seconds = 0.0;
};

struct OptimizerSettings {
  int budget = 2000;
  double rho_halt = 1e-3;  // infinity disables the threshold
  int restarts = 0;
  bool optimize_frequencies = false;
  double simplex_step = 0.1;
  double spread_tolerance = 1e-10;
  int workers = 1;
  std::function<void(const TraceRow&)> on_row;  // called once per recorded evaluation

  bool halts(double rho) const { return std::isfinite(rho_halt) && rho <= rho_halt; }
};

struct OptimizeResult {
  PulseSpec best;
  FigureOfMerit best_merit;
  std::vector<TraceRow> trace;
  StopReason reason = StopReason::budget;
  int restarts_used = 0;
};

// Coefficient vector layout: A_1..A_M, B_1..B_M, then r_1..r_M when the
// frequencies are optimized too (clamped to [0, 1]).
inline std::vector<double> pack_parameters(const PulseSpec& s, bool with_frequencies) {
  std::vector<double> x(s.sin_coeffs);
  x.insert(x.end(), s.cos_coeffs.begin(), s.cos_coeffs.end());
  if (with_frequencies) x.insert(x.end(), s.freq_jitter.begin(), s.freq_jitter.end());
  return x;
}

inline PulseSpec unpack_parameters(const PulseSpec& base, const std::vector<double>& x,
                                   bool with_frequencies) {
  const auto m = static_cast<std::size_t>(base.n_modes);
  if (x.size() != (with_frequencies ? 3 : 2) * m)
    throw ShapeError("parameter vector length does not match 2M or 3M");
  PulseSpec s = base;
  std::copy(x.begin(), x.begin() + m, s.sin_coeffs.begin());
  std::copy(x.begin() + m, x.begin() + 2 * m, s.cos_coeffs.begin());
  if (with_frequencies)
    for (std::size_t k = 0; k < m; ++k) s.freq_jitter[k] = std::clamp(x[2 * m + k], 0.0, 1.0);
  return s;
}

// CRAB loop: Nelder-Mead descents on the Fourier coefficients, each with
// frequency jitter held fixed; a descent that converges without reaching
// the threshold is restarted from the best coefficients with fresh jitter.
inline OptimizeResult optimize(const PulseSpec& initial, const Objective& objective,
                               const OptimizerSettings& settings) {
  initial.validate_shape();
  if (initial.n_modes < 1) throw ConfigError("optimization needs at least one mode");
  if (!(settings.rho_halt > 0.0)) throw ConfigError("rho_halt must be positive");
  const int dim = (settings.optimize_frequencies ? 3 : 2) * initial.n_modes;
  if (settings.budget < dim + 1)
    throw ConfigError("budget " + std::to_string(settings.budget) +
                      " is below dimension + 1 = " + std::to_string(dim + 1));

  OptimizeResult out;
  out.best = initial;
  out.best_merit.value = std::numeric_limits<double>::infinity();
  PulseSpec base = initial;
  int restart = 0;

  auto batch = [&](const std::vector<Point>& pts) {
    std::vector<PulseSpec> specs;
    for (const auto& p : pts) specs.push_back(unpack_parameters(base, p, settings.optimize_frequencies));
    std::vector<FigureOfMerit> merits(pts.size());
    std::vector<double> seconds(pts.size());
    parallel_for(pts.size(), settings.workers, [&](std::size_t i) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        merits[i] = objective.evaluate(specs[i]);
      } catch (const TimeLimitError&) {
        throw;
      } catch (const std::exception& e) {
        throw EvaluationError(e.what(), pts[i]);
      }
      seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    });
    BatchResult r;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const FigureOfMerit& f = merits[i];
      if (f.value < out.best_merit.value) {
        out.best_merit = f;
        out.best = specs[i];
      }
      TraceRow row;
      row.index = static_cast<int>(out.trace.size());
      row.restart = restart;
      row.parameters = pts[i];
      row.value = f.value;
      row.best_value = out.best_merit.value;
      row.defect_density = f.defect_density;
      row.residual_energy = f.residual_energy;
      row.clamped = f.clamped;
      row.timed_out = f.timed_out;
      row.wall_seconds = seconds[i];
      if (settings.on_row) settings.on_row(row);
      out.trace.push_back(std::move(row));
      r.values.push_back(f.value);
      if (settings.halts(f.defect_density)) {
        r.halt = true;
        break;
      }
    }
    return r;
  };

  NelderMeadOptions nm;
  nm.initial_step = settings.simplex_step;
  nm.spread_tolerance = settings.spread_tolerance;
  Point x = pack_parameters(initial, settings.optimize_frequencies);
  while (true) {
    const int left = settings.budget - static_cast<int>(out.trace.size());
    if (left < dim + 1) {
      out.reason = StopReason::budget;
      break;
    }
    NelderMeadResult res = nelder_mead(batch, x, left, nm);
    out.reason = res.reason;
    if (res.reason != StopReason::converged || restart >= settings.restarts) break;
    ++restart;
    x = pack_parameters(out.best, settings.optimize_frequencies);
    base = out.best;
    base.freq_jitter = PulseSpec::draw_jitter(base.n_modes, derive_seed(initial.rng_seed, restart));
    if (settings.optimize_frequencies) x = pack_parameters(base, true);
  }
  out.restarts_used = restart;
  return out;
}

}  // namespace crab
