#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "crab/exact.hpp"
#include "crab/mps.hpp"
#include "crab/observables.hpp"
#include "crab/pulse.hpp"
#include "fixtures.hpp"

using namespace crab;

namespace {

SiteProfile profile(std::vector<double> n) {
  SiteProfile p;
  p.n_sites = static_cast<int>(n.size());
  p.occupations = std::move(n);
  p.fluctuations.assign(p.occupations.size(), 0.0);
  return p;
}

}  // namespace

TEST(DefectDensity, PerfectMottIsZero) {
  EXPECT_EQ(defect_density(profile(std::vector<double>(10, 1.0))), 0.0);
}

TEST(DefectDensity, OneHoleOneDoublon) {
  std::vector<double> n(10, 1.0);
  n[2] = 0.0;
  n[7] = 2.0;
  EXPECT_DOUBLE_EQ(defect_density(profile(n)), 0.2);
}

TEST(DefectDensity, ReflectionInvariant) {
  const SiteProfile p = profile({1.2, 0.7, 1.0, 0.9, 1.3, 0.9});
  EXPECT_DOUBLE_EQ(defect_density(p), defect_density(p.reflected()));
}

TEST(DefectDensity, NonUnitFilling) {
  SiteProfile p = profile({2.0, 2.0, 1.0, 3.0});
  p.filling = 2.0;
  EXPECT_DOUBLE_EQ(defect_density(p), 0.5);
}

TEST(DefectDensity, AgainstReferenceProfile) {
  const SiteProfile p = profile({0.5, 1.5, 1.5, 0.5});
  EXPECT_DOUBLE_EQ(defect_density(p, {0.5, 1.5, 1.5, 0.5}), 0.0);
  EXPECT_THROW(defect_density(p, {1.0}), DomainError);
}

TEST(DefectDensity, BoundHoldsOnWorstFockState) {
  // All atoms piled onto two sites is as far from unit filling as n_max = 4 allows.
  const SiteProfile p = profile({4.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0});
  EXPECT_LE(defect_density(p), defect_density_bound(8, 4));
}

TEST(ResidualEnergy, ZeroAndLinearity) {
  EXPECT_EQ(residual_energy_per_site(-3.5, -3.5, 7), 0.0);
  EXPECT_NEAR(residual_energy_per_site(-3.5 + 7 * 0.125, -3.5, 7), 0.125, 1e-15);
}

TEST(ResidualEnergy, ClampsBelowFloorWithWarning) {
  std::stringstream captured;
  auto* old = std::cerr.rdbuf(captured.rdbuf());
  const double v = residual_energy_per_site(-1.0, 0.0, 2);
  std::cerr.rdbuf(old);
  EXPECT_EQ(v, kResidualEnergyFloor);
  EXPECT_NE(captured.str().find("warning"), std::string::npos);
  EXPECT_EQ(residual_energy_per_site(-1e-10, 0.0, 1), -1e-10);
}

TEST(SiteProfileInvariants, NumberConservationWitness) {
  SiteProfile p = profile({1.0, 1.0, 1.0});
  EXPECT_NO_THROW(p.check_invariants());
  p.occupations[0] = 1.1;
  EXPECT_THROW(p.check_invariants(), DomainError);
}

TEST(ResidualEnergy, SixSiteExponentialRampFixture) {
  LatticeParams p;
  p.n_sites = 6;
  ExactEngine ed(p);
  const auto g0 = ed.ground_state(0.52);
  const auto gT = ed.ground_state(2.4e-3);
  const GuessPulse guess(GuessKind::exponential, 0.52, 2.4e-3, 50.0);
  const QuantumStateED psi = ed.evolve(g0.state, guess_pulse(guess, TimeGrid::with_step(50.0, 1e-2)));
  const double de = residual_energy_per_site(ed.energy(psi, 2.4e-3), gT.energy, 6);
  const double rho = defect_density(ed.expectation_density(psi));
  EXPECT_NEAR(de, fixture::kSixSiteExpRampResidual, 1e-9);
  EXPECT_NEAR(rho, fixture::kSixSiteExpRampRho, 1e-9);
}

TEST(CrossBackend, DefectDensityAgreesBetweenEngines) {
  LatticeParams p;
  p.n_sites = 6;
  ExactEngine ed(p);
  MpsEngine me(p);
  const double T = 5.0, dt = 1e-3;
  const GuessPulse guess(GuessKind::exponential, 0.52, 2.4e-3, T);
  const SampledPulse pulse = guess_pulse(guess, TimeGrid::with_step(T, dt));
  const QuantumStateED a = ed.evolve(ed.ground_state(0.52).state, pulse);
  TrotterPlan plan;
  plan.dt = dt;
  plan.m_max = 64;
  const MpsState b = me.evolve(me.ground_state(0.52, 64).state, pulse, plan);
  EXPECT_NEAR(defect_density(ed.expectation_density(a)), defect_density(me.measure(b, 2.4e-3).profile), 1e-6);
}
