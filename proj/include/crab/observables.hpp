#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "crab/errors.hpp"

namespace crab {

// Per-site occupation <n_i> and fluctuation <dn_i^2> = <n_i^2> - <n_i>^2.
struct SiteProfile {
  std::vector<double> occupations;
  std::vector<double> fluctuations;
  int n_sites = 0;
  double filling = 1.0;

  double total_atoms() const {
    return std::accumulate(occupations.begin(), occupations.end(), 0.0);
  }

  // Throws DomainError if number conservation or variance positivity fails.
  void check_invariants(double atom_tolerance = 1e-8) const {
    if (static_cast<int>(occupations.size()) != n_sites ||
        static_cast<int>(fluctuations.size()) != n_sites)
      throw DomainError("site profile length does not match n_sites");
    const double expected = filling * n_sites;
    if (std::abs(total_atoms() - expected) > atom_tolerance)
      throw DomainError("site profile violates number conservation: sum <n_i> = " +
                        std::to_string(total_atoms()));
    for (double f : fluctuations)
      if (f < -1e-12) throw DomainError("negative number fluctuation in profile");
  }

  SiteProfile reflected() const {
    SiteProfile out = *this;
    std::reverse(out.occupations.begin(), out.occupations.end());
    std::reverse(out.fluctuations.begin(), out.fluctuations.end());
    return out;
  }
};

// rho = (1/N) sum_i |<n_i> - filling|
inline double defect_density(const SiteProfile& profile) {
  double sum = 0.0;
  for (double n : profile.occupations) sum += std::abs(n - profile.filling);
  return sum / static_cast<double>(profile.n_sites);
}

// Same measure against an arbitrary per-site reference, e.g. the final ground
// state's own profile in a trap.
inline double defect_density(const SiteProfile& profile,
                             const std::vector<double>& reference) {
  if (reference.size() != profile.occupations.size())
    throw DomainError("reference profile length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i)
    sum += std::abs(profile.occupations[i] - reference[i]);
  return sum / static_cast<double>(profile.n_sites);
}

// Coarse ceiling on rho for any number-conserving state at unit filling.
inline double defect_density_bound(int n_sites, int n_max) {
  return 2.0 * (1.0 - 1.0 / n_sites) * n_max;
}

inline constexpr double kResidualEnergyFloor = -1e-9;

// dE/N = (E(T) - E_G) / N. Values below the solver floor are clamped with a
// warning; anything in [floor, 0) is returned untouched.
inline double residual_energy_per_site(double e_final, double e_ground, int n_sites) {
  if (n_sites < 1) throw DomainError("n_sites must be >= 1");
  const double value = (e_final - e_ground) / static_cast<double>(n_sites);
  if (value < kResidualEnergyFloor) {
    warn("residual energy per site " + std::to_string(value) +
         " below variational floor; clamped");
    return kResidualEnergyFloor;
  }
  return value;
}

}  // namespace crab
