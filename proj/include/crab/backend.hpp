#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>

#include "crab/errors.hpp"
#include "crab/exact.hpp"
#include "crab/lattice.hpp"
#include "crab/mps.hpp"
#include "crab/observables.hpp"
#include "crab/pulse.hpp"

namespace crab {

enum class BackendKind { exact, mps };

inline std::string to_string(BackendKind k) { return k == BackendKind::exact ? "exact" : "mps"; }

inline BackendKind backend_kind_from_string(const std::string& s) {
  if (s == "exact") return BackendKind::exact;
  if (s == "mps") return BackendKind::mps;
  throw ConfigError("unknown backend '" + s + "' (expected exact or mps)");
}

using BackendState = std::variant<QuantumStateED, MpsState>;

struct Snapshot {
  SiteProfile profile;
  double energy = 0.0;
  double discarded_weight = 0.0;  // cumulative, MPS only
  int max_bond_dim = 0;           // MPS only
};

struct GroundState {
  double energy = 0.0;
  BackendState state;
};

// Shared simulation interface. All methods are const and touch no shared
// mutable data, so one backend may serve concurrent evaluations.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual BackendKind kind() const = 0;
  virtual const LatticeParams& params() const = 0;
  virtual double dt() const = 0;
  virtual GroundState ground_state(double ratio) const = 0;
  virtual BackendState evolve(const BackendState& initial, const SampledPulse& pulse,
                              const Deadline& deadline) const = 0;
  virtual Snapshot measure(const BackendState& state, double ratio) const = 0;
};

class ExactBackend final : public Backend {
 public:
  ExactBackend(const LatticeParams& params, double dt, ExactOptions options = {})
      : engine_(params, options), dt_(dt) {
    if (!(dt > 0.0)) throw DomainError("time step must be positive");
  }

  BackendKind kind() const override { return BackendKind::exact; }
  const LatticeParams& params() const override { return engine_.params(); }
  double dt() const override { return dt_; }
  const ExactEngine& engine() const { return engine_; }

  GroundState ground_state(double ratio) const override {
    ExactGroundState g = engine_.ground_state(ratio);
    return {g.energy, std::move(g.state)};
  }

  BackendState evolve(const BackendState& initial, const SampledPulse& pulse,
                      const Deadline& deadline) const override {
    return engine_.evolve(std::get<QuantumStateED>(initial), pulse, deadline);
  }

  Snapshot measure(const BackendState& state, double ratio) const override {
    const auto& s = std::get<QuantumStateED>(state);
    return {engine_.expectation_density(s), engine_.energy(s, ratio), 0.0, 0};
  }

 private:
  ExactEngine engine_;
  double dt_;
};

class MpsBackend final : public Backend {
 public:
  MpsBackend(const LatticeParams& params, TrotterPlan plan, MpsOptions options = {})
      : engine_(params, options), plan_(std::move(plan)) {
    plan_.validate();
  }

  BackendKind kind() const override { return BackendKind::mps; }
  const LatticeParams& params() const override { return engine_.params(); }
  double dt() const override { return plan_.dt; }
  const TrotterPlan& plan() const { return plan_; }
  const MpsEngine& engine() const { return engine_; }

  GroundState ground_state(double ratio) const override {
    MpsGroundState g = engine_.ground_state(ratio, plan_.m_max);
    return {g.energy, std::move(g.state)};
  }

  BackendState evolve(const BackendState& initial, const SampledPulse& pulse,
                      const Deadline& deadline) const override {
    return engine_.evolve(std::get<MpsState>(initial), pulse, plan_, deadline);
  }

  Snapshot measure(const BackendState& state, double ratio) const override {
    const auto& s = std::get<MpsState>(state);
    MpsMeasurement m = engine_.measure(s, ratio);
    return {std::move(m.profile), m.energy, s.discarded_weight, s.max_bond_dim()};
  }

 private:
  MpsEngine engine_;
  TrotterPlan plan_;
};

struct BackendSettings {
  BackendKind kind = BackendKind::exact;
  double dt = 1e-2;
  int m_max = 64;
  double svd_cutoff = 1e-12;
  double abort_discarded = 1e-2;
  std::size_t max_states = kDefaultMaxStates;
};

inline std::shared_ptr<const Backend> make_backend(const LatticeParams& params,
                                                   const BackendSettings& s) {
  if (s.kind == BackendKind::exact) {
    ExactOptions opt;
    opt.max_states = s.max_states;
    return std::make_shared<ExactBackend>(params, s.dt, opt);
  }
  TrotterPlan plan;
  plan.dt = s.dt;
  plan.m_max = s.m_max;
  plan.svd_cutoff = s.svd_cutoff;
  plan.abort_discarded = s.abort_discarded;
  return std::make_shared<MpsBackend>(params, plan);
}

}  // namespace crab
