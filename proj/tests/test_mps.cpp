#include <gtest/gtest.h>

#include <cmath>

#include "crab/exact.hpp"
#include "crab/mps.hpp"
#include "crab/pulse.hpp"
#include "fixtures.hpp"

using namespace crab;

namespace {

LatticeParams sites(int n) {
  LatticeParams p;
  p.n_sites = n;
  return p;
}

double infidelity(const Eigen::VectorXcd& a, const Eigen::VectorXcd& b) {
  return 1.0 - std::abs(a.dot(b)) / (a.norm() * b.norm());
}

}  // namespace

TEST(MpsState, ProductStateAtZeroRatio) {
  MpsEngine me(sites(6));
  const MpsGroundState g = me.ground_state(0.0, 16);
  EXPECT_NEAR(g.energy, 0.0, 1e-12);
  EXPECT_EQ(g.state.max_bond_dim(), 1);
  const SiteProfile p = me.measure(g.state, 0.0).profile;
  for (int j = 0; j < 6; ++j) {
    EXPECT_NEAR(p.occupations[j], 1.0, 1e-12);
    EXPECT_NEAR(p.fluctuations[j], 0.0, 1e-12);
  }
}

TEST(MpsState, DmrgMatchesExactDiagonalization) {
  for (double ratio : {0.52, 0.1, 2.4e-3}) {
    ExactEngine ed(sites(6));
    MpsEngine me(sites(6));
    const ExactGroundState a = ed.ground_state(ratio);
    const MpsGroundState b = me.ground_state(ratio, 64);
    EXPECT_NEAR(a.energy, b.energy, 1e-9) << ratio;
    EXPECT_LE(infidelity(a.state.amplitudes, to_amplitudes(b.state, ed.basis())), 1e-9) << ratio;
  }
}

TEST(MpsState, SmallBondDimensionIsVariationalUpperBound) {
  MpsEngine me(sites(8));
  const double small = me.ground_state(0.52, 2).energy;
  const double large = me.ground_state(0.52, 64).energy;
  EXPECT_GT(small, large);
  EXPECT_NEAR(large, ExactEngine(sites(8)).ground_state(0.52).energy, 1e-8);
}

TEST(MpsState, CanonicalFormAndCharges) {
  MpsEngine me(sites(8));
  MpsState st = me.ground_state(0.3, 32).state;
  EXPECT_LE(isometry_residual(st), 1e-12);
  EXPECT_EQ(charge_violation(st), 0.0);
  EXPECT_NEAR(norm(st), 1.0, 1e-12);
  for (int c : {3, 7, 0}) {
    move_center(st, c);
    EXPECT_EQ(st.canonical_center, c);
    EXPECT_LE(isometry_residual(st), 1e-12);
    EXPECT_NEAR(norm(st), 1.0, 1e-12);
  }
  for (int b = 0; b <= 8; ++b)
    EXPECT_TRUE(std::is_sorted(st.bond_charges[b].begin(), st.bond_charges[b].end()));
  EXPECT_EQ(st.bond_charges.front(), std::vector<int>{0});
  EXPECT_EQ(st.bond_charges.back(), std::vector<int>{8});
}

TEST(MpsState, ProfileMatchesExact) {
  ExactEngine ed(sites(6));
  MpsEngine me(sites(6));
  const SiteProfile a = ed.expectation_density(ed.ground_state(0.52).state);
  const SiteProfile b = me.measure(me.ground_state(0.52, 64).state, 0.52).profile;
  for (int j = 0; j < 6; ++j) {
    EXPECT_NEAR(a.occupations[j], b.occupations[j], 1e-9);
    EXPECT_NEAR(a.fluctuations[j], b.fluctuations[j], 1e-8);
  }
}

TEST(Compress, NoOpWhenTargetCoversBondDimension) {
  MpsEngine me(sites(6));
  const MpsState st = me.ground_state(0.52, 64).state;
  EXPECT_EQ(compress(st, st.max_bond_dim()).fidelity, 1.0);
  EXPECT_EQ(compress(st, st.max_bond_dim() + 5).fidelity, 1.0);
  EXPECT_THROW(compress(st, 0), DomainError);
}

TEST(Compress, FidelityMatchesSequentialSvdFixture) {
  MpsEngine me(sites(6));
  const CompressResult r = compress(me.ground_state(0.52, 64).state, 4);
  EXPECT_LE(r.state.max_bond_dim(), 4);
  EXPECT_NEAR(r.fidelity, fixture::kSixSiteCompressFidelityM4, 1e-8);
  EXPECT_LT(r.fidelity, 1.0);
  EXPECT_NEAR(norm(r.state), 1.0, 1e-12);
}

TEST(Tebd, MatchesExactEvolution) {
  ExactEngine ed(sites(6));
  MpsEngine me(sites(6));
  const double T = 10.0, dt = 1e-3;
  const GuessPulse guess(GuessKind::exponential, 0.52, 2.4e-3, T);
  const SampledPulse pulse = guess_pulse(guess, TimeGrid::with_step(T, dt));
  const QuantumStateED a = ed.evolve(ed.ground_state(0.52).state, pulse);
  TrotterPlan plan;
  plan.dt = dt;
  const MpsState b = me.evolve(me.ground_state(0.52, 64).state, pulse, plan);
  EXPECT_GE(1.0 - infidelity(a.amplitudes, to_amplitudes(b, ed.basis())), 1.0 - 1e-6);
  EXPECT_EQ(static_cast<int>(b.truncation_log.size()), pulse.n_steps());
  EXPECT_TRUE(std::is_sorted(b.truncation_log.begin(), b.truncation_log.end()));
  EXPECT_LE(b.max_bond_dim(), 64);
}

TEST(Tebd, SecondOrderConvergence) {
  ExactEngine ed(sites(4));
  MpsEngine me(sites(4));
  const double T = 2.0;
  const GuessPulse guess(GuessKind::exponential, 0.52, 2.4e-3, T);
  const QuantumStateED psi0 = ed.ground_state(0.52).state;
  const MpsState mps0 = me.ground_state(0.52, 64).state;
  std::vector<double> err;
  for (double dt : {0.1, 0.05}) {
    const SampledPulse pulse = guess_pulse(guess, TimeGrid::with_step(T, dt));
    TrotterPlan plan;
    plan.dt = dt;
    plan.svd_cutoff = 0.0;
    const Eigen::VectorXcd a = ed.evolve(psi0, pulse).amplitudes;
    Eigen::VectorXcd b = to_amplitudes(me.evolve(mps0, pulse, plan), ed.basis());
    b *= std::polar(1.0, std::arg(b.dot(a)));
    err.push_back((a - b).norm());
  }
  EXPECT_NEAR(err[0] / err[1], 4.0, 0.4);
}

TEST(Tebd, ZeroStepsIsIdentity) {
  MpsEngine me(sites(4));
  const MpsState st = me.ground_state(0.3, 16).state;
  SampledPulse empty;
  empty.dt = 1e-2;
  empty.nodes = {0.3};
  TrotterPlan plan;
  const MpsState out = me.evolve(st, empty, plan);
  EXPECT_EQ(std::abs(overlap(st, out)), std::abs(overlap(st, st)));
  EXPECT_TRUE(out.truncation_log.empty());
}

TEST(Tebd, EnergyErrorUnderConstantControlIsSecondOrder) {
  // The splitting conserves a nearby Hamiltonian, so <H> wanders by O(dt^2).
  MpsEngine me(sites(6));
  const MpsState st0 = me.ground_state(0.52, 64).state;
  const double e0 = me.measure(st0, 0.2).energy;
  std::vector<double> drift;
  for (double dt : {2e-2, 1e-2}) {
    TrotterPlan plan;
    plan.dt = dt;
    plan.svd_cutoff = 0.0;
    const MpsState st = me.evolve(st0, SampledPulse::constant(0.2, TimeGrid::with_step(2.0, dt)), plan);
    drift.push_back(std::abs(me.measure(st, 0.2).energy - e0));
  }
  EXPECT_LE(drift[1], 1e-5);
  EXPECT_NEAR(drift[0] / drift[1], 4.0, 0.6);
}

TEST(Tebd, TruncationOverflowAborts) {
  MpsEngine me(sites(8));
  TrotterPlan plan;
  plan.dt = 1e-2;
  plan.m_max = 2;
  plan.abort_discarded = 1e-6;
  const SampledPulse pulse = SampledPulse::constant(0.52, TimeGrid::with_step(5.0, 1e-2));
  const std::vector<int> occ = {2, 0, 2, 0, 2, 0, 1, 1};
  EXPECT_THROW(me.evolve(MpsState::product(occ, 4), pulse, plan), TruncationOverflowError);
}

TEST(Tebd, PlanValidation) {
  TrotterPlan plan;
  plan.order = 4;
  EXPECT_THROW(plan.validate(), DomainError);
  plan = {};
  plan.dt = 0.0;
  EXPECT_THROW(plan.validate(), DomainError);
  plan = {};
  EXPECT_TRUE(plan.replication_range());
  plan.m_max = 10;
  EXPECT_FALSE(plan.replication_range());
  MpsEngine me(sites(4));
  plan = {};
  plan.dt = 1e-2;
  EXPECT_THROW(me.evolve(me.product_state(), SampledPulse::constant(0.1, TimeGrid::with_step(1.0, 0.05)), plan),
               DomainError);
}

TEST(Tebd, GatesConserveNumber) {
  LatticeParams p = sites(4);
  p.trap_curvature = 0.05;
  MpsEngine me(p);
  const int d = p.local_dim();
  for (const Mat& g : me.bond_gates(0.3, 0.1)) {
    EXPECT_LE((g.adjoint() * g - Mat::Identity(d * d, d * d)).norm(), 1e-12);
    for (int r = 0; r < d * d; ++r)
      for (int c = 0; c < d * d; ++c)
        if (r / d + r % d != c / d + c % d) {
          EXPECT_EQ(g(r, c), cplx(0.0));
        }
  }
}

TEST(Tebd, TrappedEvolutionMatchesExact) {
  LatticeParams p = sites(5);
  p.trap_curvature = default_trap_curvature(5);
  ExactEngine ed(p);
  MpsEngine me(p);
  const GuessPulse guess(GuessKind::linear, 0.3, 0.01, 2.0);
  const SampledPulse pulse = guess_pulse(guess, TimeGrid::with_step(2.0, 1e-3));
  TrotterPlan plan;
  plan.dt = 1e-3;
  const QuantumStateED a = ed.evolve(ed.ground_state(0.3).state, pulse);
  const MpsState b = me.evolve(me.ground_state(0.3, 64).state, pulse, plan);
  EXPECT_LE(infidelity(a.amplitudes, to_amplitudes(b, ed.basis())), 1e-6);
}
