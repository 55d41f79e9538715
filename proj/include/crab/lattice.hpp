#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crab/errors.hpp"

namespace crab {

// One-dimensional Bose-Hubbard lattice with open boundaries.
//
//   H = sum_j [ -J (b+_j b_{j+1} + h.c.) + Omega (j - N/2)^2 n_j + U/2 (n_j^2 - n_j) ]
//
// Sites are stored 0-based; the trap centre uses the 1-based site label, so
// site index i carries the potential Omega (i + 1 - N/2)^2. Energies are in
// units of U and U is held at 1 for the whole evolution.
struct LatticeParams {
  int n_sites = 10;
  double trap_curvature = 0.0;  // Omega, energy per site^2
  double interaction = 1.0;     // U
  int n_max = 4;                // local occupation cutoff
  double filling = 1.0;         // mean atoms per site

  int local_dim() const { return n_max + 1; }

  int n_atoms() const {
    return static_cast<int>(std::lround(filling * n_sites));
  }

  void validate() const {
    if (n_sites < 2) throw DomainError("n_sites must be >= 2");
    if (n_max < 2) throw DomainError("n_max must be >= 2");
    if (!(filling >= 0.0)) throw DomainError("filling must be nonnegative");
    const double atoms = filling * n_sites;
    if (std::abs(atoms - std::round(atoms)) > 1e-9)
      throw DomainError("filling * n_sites must be an integer atom count");
    if (!(trap_curvature >= 0.0))
      throw DomainError("trap_curvature must be nonnegative");
    if (!(interaction > 0.0)) throw DomainError("interaction must be positive");
    if (n_atoms() > n_max * n_sites)
      throw DomainError("atom count exceeds lattice capacity n_max * n_sites");
  }

  double trap_potential(int site) const {
    const double x = (site + 1) - 0.5 * n_sites;
    return trap_curvature * x * x;
  }

  // Single-site energy of occupation n: trap plus contact interaction.
  double site_energy(int site, int n) const {
    return trap_potential(site) * n + 0.5 * interaction * (n * n - n);
  }
};

// Trap stand-in used when a trapped run does not set Omega explicitly: the
// edge sites sit roughly one U above the centre.
inline double default_trap_curvature(int n_sites) {
  return 4.0 / (static_cast<double>(n_sites) * n_sites);
}

// ---------------------------------------------------------------------------
// Calibrated lattice-depth map.
//
// ln(J/U) is affine in sqrt(V/E_r) and passes exactly through the two
// anchor points (2 E_r, 0.52) and (22 E_r, 2.4e-3).

namespace depth_map {
inline constexpr double kShallowDepth = 2.0;
inline constexpr double kShallowRatio = 0.52;
inline constexpr double kDeepDepth = 22.0;
inline constexpr double kDeepRatio = 2.4e-3;

inline double slope() {
  return (std::log(kDeepRatio) - std::log(kShallowRatio)) /
         (std::sqrt(kDeepDepth) - std::sqrt(kShallowDepth));
}
inline double intercept() {
  return std::log(kShallowRatio) - slope() * std::sqrt(kShallowDepth);
}
inline bool in_window(double depth) {
  return depth >= kShallowDepth - 1e-12 && depth <= kDeepDepth + 1e-12;
}
}  // namespace depth_map

inline double depth_to_ratio_quiet(double depth) {
  if (!(depth > 0.0)) throw DomainError("lattice depth must be positive");
  return std::exp(depth_map::intercept() + depth_map::slope() * std::sqrt(depth));
}

inline double depth_to_ratio(double depth) {
  const double r = depth_to_ratio_quiet(depth);
  if (!depth_map::in_window(depth))
    warn("lattice depth " + std::to_string(depth) +
         " E_r outside the model validity window [2, 22]");
  return r;
}

// Inverse of depth_to_ratio; no warning, used for display columns.
inline double ratio_to_depth_quiet(double ratio) {
  if (!(ratio > 0.0)) throw DomainError("J/U ratio must be positive");
  const double root =
      (std::log(ratio) - depth_map::intercept()) / depth_map::slope();
  if (!(root > 0.0))
    throw DomainError("J/U ratio " + std::to_string(ratio) +
                      " maps to a non-positive lattice depth");
  return root * root;
}

inline double ratio_to_depth(double ratio) {
  const double depth = ratio_to_depth_quiet(ratio);
  if (!depth_map::in_window(depth))
    warn("J/U ratio " + std::to_string(ratio) +
         " maps outside the model validity window [2, 22] E_r");
  return depth;
}

struct ControlPoint {
  double time = 0.0;   // hbar/U
  double ratio = 0.0;  // J/U
  double depth = 0.0;  // V/E_r

  static ControlPoint from_ratio(double t, double r) {
    return {t, r, ratio_to_depth_quiet(r)};
  }
};

// ---------------------------------------------------------------------------
// Local operators on the truncated space {|0>, ..., |n_max>}.

inline Eigen::MatrixXd annihilation(int n_max) {
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n_max + 1, n_max + 1);
  for (int n = 1; n <= n_max; ++n) b(n - 1, n) = std::sqrt(static_cast<double>(n));
  return b;
}

inline Eigen::MatrixXd number_operator(int n_max) {
  Eigen::VectorXd diag(n_max + 1);
  for (int n = 0; n <= n_max; ++n) diag(n) = n;
  return diag.asDiagonal();
}

struct BondTerm {
  int left_site = 0;      // bond couples left_site and left_site + 1
  double hopping = 0.0;   // coefficient -J in front of (b+ b + h.c.)
  Eigen::MatrixXd matrix; // d^2 x d^2, index = s_left * d + s_right
};

struct SiteTerm {
  int site = 0;
  double trap = 0.0;         // Omega (j - N/2)^2
  double interaction = 0.0;  // U/2
  Eigen::MatrixXd matrix;    // d x d, diagonal
};

struct LocalTerms {
  std::vector<BondTerm> bonds;
  std::vector<SiteTerm> sites;
};

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Two-site hopping operator b+_l b_r + b_l b+_r on the d^2 product space.
inline Eigen::MatrixXd hopping_operator(int n_max) {
  const Eigen::MatrixXd b = annihilation(n_max);
  const Eigen::MatrixXd bd = b.transpose();
  return kron(bd, b) + kron(b, bd);
}

inline LocalTerms hamiltonian_terms(const LatticeParams& params, double ratio) {
  params.validate();
  if (!(ratio >= 0.0)) throw DomainError("J/U ratio must be nonnegative");
  const int d = params.local_dim();
  const double J = ratio * params.interaction;
  const Eigen::MatrixXd hop = hopping_operator(params.n_max);

  LocalTerms terms;
  terms.bonds.reserve(params.n_sites - 1);
  for (int j = 0; j + 1 < params.n_sites; ++j)
    terms.bonds.push_back({j, -J, -J * hop});

  terms.sites.reserve(params.n_sites);
  for (int j = 0; j < params.n_sites; ++j) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(d, d);
    for (int n = 0; n < d; ++n) m(n, n) = params.site_energy(j, n);
    terms.sites.push_back({j, params.trap_potential(j), 0.5 * params.interaction, m});
  }
  return terms;
}

}  // namespace crab
