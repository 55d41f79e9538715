#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "crab/errors.hpp"
#include "crab/lattice.hpp"
#include "crab/observables.hpp"
#include "crab/pulse.hpp"
#include "crab/rng.hpp"

namespace crab {

using cplx = std::complex<double>;

// Number of occupation tuples of length n_sites summing to n_atoms with every
// entry in [0, n_max]. Saturates at the largest uint64 on overflow.
inline std::uint64_t count_compositions(int n_sites, int n_atoms, int n_max) {
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::uint64_t> ways(n_atoms + 1, 0), next(n_atoms + 1);
  ways[0] = 1;
  for (int site = 0; site < n_sites; ++site) {
    std::fill(next.begin(), next.end(), 0);
    for (int total = 0; total <= n_atoms; ++total) {
      if (ways[total] == 0) continue;
      for (int n = 0; n <= n_max && total + n <= n_atoms; ++n) {
        std::uint64_t& slot = next[total + n];
        slot = (kMax - slot < ways[total]) ? kMax : slot + ways[total];
      }
    }
    ways.swap(next);
  }
  return ways[n_atoms];
}

inline constexpr std::size_t kDefaultMaxStates = 4'000'000;

// Fixed-particle-number Fock basis in ascending lexicographic order of the
// occupation tuples (n_0, ..., n_{N-1}). Each tuple is also encoded as a
// base-(n_max+1) integer with site 0 most significant, so lexicographic order
// coincides with numeric order of the codes and lookup is a binary search.
class FockBasis {
 public:
  FockBasis(int n_sites, int n_atoms, int n_max,
            std::size_t max_states = kDefaultMaxStates)
      : n_sites_(n_sites), n_atoms_(n_atoms), n_max_(n_max) {
    if (n_sites < 1 || n_atoms < 0 || n_max < 0)
      throw DomainError("invalid Fock basis dimensions");
    if (std::log(static_cast<double>(n_max + 1)) * n_sites > std::log(1.8e19))
      throw CapacityError("occupation code does not fit 64 bits", 64);
    const std::uint64_t size = count_compositions(n_sites, n_atoms, n_max);
    if (size > max_states)
      throw CapacityError("Fock basis of " + std::to_string(size) +
                              " states exceeds the memory budget",
                          max_states);
    if (size == 0) throw DomainError("no occupation tuple satisfies the constraints");

    place_.assign(n_sites, 1);
    for (int j = n_sites - 2; j >= 0; --j) place_[j] = place_[j + 1] * (n_max + 1);

    occ_.reserve(size * n_sites);
    codes_.reserve(size);
    std::vector<int> current(n_sites, 0);
    enumerate(0, n_atoms, current);
  }

  static FockBasis from_params(const LatticeParams& p,
                               std::size_t max_states = kDefaultMaxStates) {
    p.validate();
    return FockBasis(p.n_sites, p.n_atoms(), p.n_max, max_states);
  }

  std::size_t size() const { return codes_.size(); }
  int n_sites() const { return n_sites_; }
  int n_atoms() const { return n_atoms_; }
  int n_max() const { return n_max_; }

  std::span<const std::uint8_t> state(std::size_t i) const {
    return {occ_.data() + i * n_sites_, static_cast<std::size_t>(n_sites_)};
  }
  int occupation(std::size_t i, int site) const { return occ_[i * n_sites_ + site]; }
  std::uint64_t code(std::size_t i) const { return codes_[i]; }
  std::uint64_t place(int site) const { return place_[site]; }

  std::optional<std::size_t> index_of_code(std::uint64_t code) const {
    auto it = std::lower_bound(codes_.begin(), codes_.end(), code);
    if (it == codes_.end() || *it != code) return std::nullopt;
    return static_cast<std::size_t>(it - codes_.begin());
  }

  std::optional<std::size_t> index_of(std::span<const int> occupations) const {
    if (static_cast<int>(occupations.size()) != n_sites_) return std::nullopt;
    std::uint64_t c = 0;
    for (int j = 0; j < n_sites_; ++j) {
      if (occupations[j] < 0 || occupations[j] > n_max_) return std::nullopt;
      c += place_[j] * static_cast<std::uint64_t>(occupations[j]);
    }
    return index_of_code(c);
  }

 private:
  void enumerate(int site, int remaining, std::vector<int>& current) {
    if (site == n_sites_ - 1) {
      if (remaining > n_max_) return;
      current[site] = remaining;
      std::uint64_t c = 0;
      for (int j = 0; j < n_sites_; ++j) {
        occ_.push_back(static_cast<std::uint8_t>(current[j]));
        c += place_[j] * static_cast<std::uint64_t>(current[j]);
      }
      codes_.push_back(c);
      return;
    }
    const int sites_after = n_sites_ - site - 1;
    for (int n = 0; n <= std::min(n_max_, remaining); ++n) {
      if (remaining - n > sites_after * n_max_) continue;
      current[site] = n;
      enumerate(site + 1, remaining - n, current);
    }
  }

  int n_sites_;
  int n_atoms_;
  int n_max_;
  std::vector<std::uint64_t> place_;
  std::vector<std::uint8_t> occ_;
  std::vector<std::uint64_t> codes_;
};

// H(J) = D - J K, with the diagonal D (trap + interaction) and the hopping
// pattern K stored once; changing J costs nothing.
class ExactHamiltonian {
 public:
  ExactHamiltonian(std::shared_ptr<const FockBasis> basis, const LatticeParams& params)
      : basis_(std::move(basis)) {
    const FockBasis& b = *basis_;
    const std::size_t dim = b.size();
    const int n = b.n_sites();
    const int n_max = b.n_max();
    diagonal_.resize(static_cast<Eigen::Index>(dim));
    row_ptr_.reserve(dim + 1);
    row_ptr_.push_back(0);
    std::vector<std::pair<std::uint32_t, double>> row;
    for (std::size_t i = 0; i < dim; ++i) {
      double d = 0.0;
      for (int j = 0; j < n; ++j) d += params.site_energy(j, b.occupation(i, j));
      diagonal_(static_cast<Eigen::Index>(i)) = d;

      row.clear();
      const std::uint64_t code = b.code(i);
      for (int j = 0; j + 1 < n; ++j) {
        const int nl = b.occupation(i, j);
        const int nr = b.occupation(i, j + 1);
        // b+_j b_{j+1}
        if (nr > 0 && nl < n_max)
          row.emplace_back(lookup(code + b.place(j) - b.place(j + 1)),
                           std::sqrt(static_cast<double>((nl + 1) * nr)));
        // b_j b+_{j+1}
        if (nl > 0 && nr < n_max)
          row.emplace_back(lookup(code - b.place(j) + b.place(j + 1)),
                           std::sqrt(static_cast<double>(nl * (nr + 1))));
      }
      std::sort(row.begin(), row.end());
      for (const auto& [c, v] : row) {
        cols_.push_back(c);
        vals_.push_back(v);
      }
      row_ptr_.push_back(cols_.size());
    }
  }

  const FockBasis& basis() const { return *basis_; }
  std::size_t dim() const { return basis_->size(); }
  std::size_t nonzeros() const { return vals_.size(); }
  const Eigen::VectorXd& diagonal() const { return diagonal_; }
  std::span<const std::uint32_t> columns() const { return cols_; }

  // y = H(ratio) x on raw storage of length dim().
  template <typename Scalar>
  void apply_raw(double ratio, const Scalar* xp, Scalar* yp) const {
    const std::size_t dim = this->dim();
    const double* dp = diagonal_.data();
    const std::uint32_t* cp = cols_.data();
    const double* vp = vals_.data();
    for (std::size_t i = 0; i < dim; ++i) {
      Scalar acc(0);
      for (std::size_t k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) acc += vp[k] * xp[cp[k]];
      yp[i] = dp[i] * xp[i] - ratio * acc;
    }
  }

  // y = H(ratio) x
  template <typename Scalar>
  void apply(double ratio, const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x,
             Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& y) const {
    y.resize(static_cast<Eigen::Index>(dim()));
    apply_raw(ratio, x.data(), y.data());
  }

  Eigen::MatrixXd dense(double ratio) const {
    const auto dim = static_cast<Eigen::Index>(this->dim());
    Eigen::MatrixXd h = diagonal_.asDiagonal();
    for (Eigen::Index i = 0; i < dim; ++i)
      for (std::size_t k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k)
        h(i, cols_[k]) -= ratio * vals_[k];
    return h;
  }

 private:
  std::uint32_t lookup(std::uint64_t code) const {
    auto idx = basis_->index_of_code(code);
    if (!idx) throw Error("hopping left the particle-number sector");
    return static_cast<std::uint32_t>(*idx);
  }

  std::shared_ptr<const FockBasis> basis_;
  Eigen::VectorXd diagonal_;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> cols_;
  std::vector<double> vals_;
};

struct QuantumStateED {
  std::shared_ptr<const FockBasis> basis;
  Eigen::VectorXcd amplitudes;

  double norm() const { return amplitudes.norm(); }

  static QuantumStateED fock(std::shared_ptr<const FockBasis> basis,
                             std::span<const int> occupations) {
    auto idx = basis->index_of(occupations);
    if (!idx) throw DomainError("occupation tuple not in basis");
    QuantumStateED s{basis, Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(basis->size()))};
    s.amplitudes(static_cast<Eigen::Index>(*idx)) = 1.0;
    return s;
  }
};

inline cplx overlap(const QuantumStateED& a, const QuantumStateED& b) {
  return a.amplitudes.dot(b.amplitudes);
}

inline double fidelity(const QuantumStateED& a, const QuantumStateED& b) {
  return std::abs(overlap(a, b));
}

struct ExactOptions {
  std::size_t max_states = kDefaultMaxStates;
  int krylov_dim = 12;
  double krylov_tolerance = 1e-12;
  // Lanczos ground-state search.
  int lanczos_subspace = 60;
  int lanczos_max_matvecs = 20000;
  double ground_residual = 1e-9;
};

struct ExactGroundState {
  double energy = 0.0;
  QuantumStateED state;
  double residual = 0.0;
};

class ExactEngine {
 public:
  explicit ExactEngine(const LatticeParams& params, ExactOptions options = {})
      : params_(params),
        options_(options),
        basis_(std::make_shared<const FockBasis>(
            FockBasis::from_params(params, options.max_states))),
        hamiltonian_(basis_, params) {}

  const LatticeParams& params() const { return params_; }
  const ExactOptions& options() const { return options_; }
  const FockBasis& basis() const { return *basis_; }
  std::shared_ptr<const FockBasis> basis_ptr() const { return basis_; }
  const ExactHamiltonian& hamiltonian() const { return hamiltonian_; }

  // Lowest eigenpair by restarted Lanczos with full reorthogonalization.
  ExactGroundState ground_state(double ratio) const {
    if (!(ratio >= 0.0)) throw DomainError("J/U ratio must be nonnegative");
    const auto dim = static_cast<Eigen::Index>(basis_->size());
    Eigen::VectorXd v(dim);
    SplitMix64 rng(0x5eed);
    for (Eigen::Index i = 0; i < dim; ++i) v(i) = 0.5 + rng.uniform();
    v.normalize();

    const int k_max = static_cast<int>(std::min<Eigen::Index>(options_.lanczos_subspace, dim));
    Eigen::MatrixXd V(dim, k_max + 1);
    Eigen::VectorXd w(dim), hx(dim);
    std::vector<double> alpha, beta;
    double residual = std::numeric_limits<double>::infinity();
    double theta = 0.0;
    int matvecs = 0;
    while (matvecs < options_.lanczos_max_matvecs) {
      alpha.clear();
      beta.clear();
      V.col(0) = v;
      int k = 0;
      for (; k < k_max; ++k) {
        const Eigen::VectorXd vk = V.col(k);
        hamiltonian_.apply(ratio, vk, w);
        ++matvecs;
        alpha.push_back(vk.dot(w));
        for (int pass = 0; pass < 2; ++pass) {
          const Eigen::VectorXd c = V.leftCols(k + 1).transpose() * w;
          w -= V.leftCols(k + 1) * c;
        }
        const double b = w.norm();
        if (b < 1e-12 || k + 1 == k_max) {
          ++k;
          break;
        }
        beta.push_back(b);
        V.col(k + 1) = w / b;
      }
      Eigen::MatrixXd T = Eigen::MatrixXd::Zero(k, k);
      for (int i = 0; i < k; ++i) T(i, i) = alpha[i];
      for (int i = 0; i + 1 < k; ++i) T(i, i + 1) = T(i + 1, i) = beta[i];
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(T);
      theta = eig.eigenvalues()(0);
      v = V.leftCols(k) * eig.eigenvectors().col(0);
      v.normalize();
      hamiltonian_.apply(ratio, v, hx);
      ++matvecs;
      residual = (hx - theta * v).norm();
      if (residual <= options_.ground_residual) {
        theta = v.dot(hx);
        QuantumStateED s{basis_, v.cast<cplx>()};
        return {theta, std::move(s), residual};
      }
    }
    throw ConvergenceError("Lanczos ground-state search did not converge", residual);
  }

  double energy(const QuantumStateED& state, double ratio) const {
    Eigen::VectorXcd hx;
    hamiltonian_.apply(ratio, state.amplitudes, hx);
    return state.amplitudes.dot(hx).real();
  }

  // Piecewise-constant propagation: step k applies exp(-i H(J_k) dt) with
  // J_k the pulse value at the step midpoint.
  QuantumStateED evolve(QuantumStateED state, const SampledPulse& pulse,
                        const Deadline& deadline = std::nullopt) const {
    if (!(pulse.dt > 0.0)) throw DomainError("time step must be positive");
    if (state.basis != basis_ && state.basis->size() != basis_->size())
      throw DomainError("state belongs to a different basis");
    for (int k = 0; k < pulse.n_steps(); ++k) {
      propagate(state.amplitudes, pulse.midpoints[k], pulse.dt);
      if ((k & 63) == 63) check_deadline(deadline);
    }
    return state;
  }

  // In-place x <- exp(-i H(ratio) tau) x via Lanczos-Krylov. The subspace
  // grows until the a-posteriori error estimate beta_m |[e^{-i h T_m} e_1]_m|
  // drops below the tolerance; if krylov_dim vectors do not suffice the step
  // is split into sub-steps.
  void propagate(Eigen::VectorXcd& x, double ratio, double tau) const {
    const auto dim = static_cast<Eigen::Index>(basis_->size());
    const int m_max = static_cast<int>(std::min<Eigen::Index>(options_.krylov_dim, dim));
    Eigen::MatrixXcd V(dim, m_max);
    Eigen::VectorXcd w(dim);
    std::vector<double> alpha, beta;
    double remaining = tau;
    double h_try = tau;
    while (remaining > 1e-15 * tau) {
      const double beta0 = x.norm();
      if (beta0 == 0.0) return;
      V.col(0) = x / beta0;
      alpha.clear();
      beta.clear();
      double h = std::min(h_try, remaining);
      Eigen::VectorXcd coeff;
      int m = 0;
      for (;;) {
        // Fused Lanczos step: w = H v_m, alpha = <v_m|w>, then
        // w -= alpha v_m + beta v_{m-1} together with |w|.
        const cplx* v = V.col(m).data();
        hamiltonian_.apply_raw(ratio, v, w.data());
        double a = 0.0;
        for (Eigen::Index i = 0; i < dim; ++i)
          a += v[i].real() * w[i].real() + v[i].imag() * w[i].imag();
        alpha.push_back(a);
        double b2 = 0.0;
        if (m > 0) {
          const cplx* vp = V.col(m - 1).data();
          const double bp = beta[m - 1];
          for (Eigen::Index i = 0; i < dim; ++i) {
            w[i] -= a * v[i] + bp * vp[i];
            b2 += std::norm(w[i]);
          }
        } else {
          for (Eigen::Index i = 0; i < dim; ++i) {
            w[i] -= a * v[i];
            b2 += std::norm(w[i]);
          }
        }
        const double b = std::sqrt(b2);
        ++m;
        if (b < 1e-13) {
          coeff = krylov_coefficients(alpha, beta, m, h);
          break;
        }
        if (m >= 3 || m == m_max) {
          coeff = krylov_coefficients(alpha, beta, m, h);
          if (b * std::abs(coeff(m - 1)) <= options_.krylov_tolerance) break;
          if (m == m_max) {
            for (int attempt = 0; attempt < 60; ++attempt) {
              h *= 0.5;
              coeff = krylov_coefficients(alpha, beta, m, h);
              if (b * std::abs(coeff(m - 1)) <= options_.krylov_tolerance) break;
            }
            h_try = h;
            break;
          }
        }
        beta.push_back(b);
        V.col(m) = w / b;
      }
      x = beta0 * (V.leftCols(m) * coeff);
      remaining -= h;
    }
  }

  SiteProfile expectation_density(const QuantumStateED& state) const {
    const int n = basis_->n_sites();
    SiteProfile p;
    p.n_sites = n;
    p.filling = params_.filling;
    std::vector<double> m1(n, 0.0), m2(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < basis_->size(); ++i) {
      const double w = std::norm(state.amplitudes(static_cast<Eigen::Index>(i)));
      if (w == 0.0) continue;
      total += w;
      for (int j = 0; j < n; ++j) {
        const double occ = basis_->occupation(i, j);
        m1[j] += w * occ;
        m2[j] += w * occ * occ;
      }
    }
    p.occupations.resize(n);
    p.fluctuations.resize(n);
    for (int j = 0; j < n; ++j) {
      p.occupations[j] = m1[j] / total;
      p.fluctuations[j] = m2[j] / total - p.occupations[j] * p.occupations[j];
    }
    return p;
  }

 private:
  static Eigen::VectorXcd krylov_coefficients(const std::vector<double>& alpha,
                                              const std::vector<double>& beta, int m,
                                              double h) {
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i) T(i, i) = alpha[i];
    for (int i = 0; i + 1 < m; ++i) T(i, i + 1) = T(i + 1, i) = beta[i];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(T);
    Eigen::VectorXcd phase(m);
    for (int j = 0; j < m; ++j)
      phase(j) = std::exp(cplx(0.0, -h * eig.eigenvalues()(j))) * eig.eigenvectors()(0, j);
    return eig.eigenvectors().cast<cplx>() * phase;
  }

  LatticeParams params_;
  ExactOptions options_;
  std::shared_ptr<const FockBasis> basis_;
  ExactHamiltonian hamiltonian_;
};

}  // namespace crab
