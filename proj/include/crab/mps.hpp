#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "crab/errors.hpp"
#include "crab/exact.hpp"
#include "crab/lattice.hpp"
#include "crab/observables.hpp"
#include "crab/pulse.hpp"

namespace crab {

using Mat = Eigen::MatrixXcd;

// ---------------------------------------------------------------------------
// Matrix-product state with U(1) particle-number labels.
//
// Site tensor j is stored as d matrices A_j[s] of shape D_j x D_{j+1}.
// Bond b carries a sorted charge label per index: the number of atoms on
// sites 0..b-1. Entry A_j[s](a, c) may be nonzero only when
// charge_j(a) + s == charge_{j+1}(c); sorting makes every allowed block a
// contiguous sub-matrix.
struct MpsState {
  int n_max = 0;
  std::vector<std::vector<Mat>> site_tensors;
  std::vector<std::vector<int>> bond_charges;
  std::optional<int> canonical_center;
  std::vector<double> truncation_log;  // cumulative discarded weight after each step
  double discarded_weight = 0.0;

  int n_sites() const { return static_cast<int>(site_tensors.size()); }
  int phys_dim() const { return n_max + 1; }
  int bond_dim(int bond) const { return static_cast<int>(bond_charges[bond].size()); }

  std::vector<int> bond_dims() const {
    std::vector<int> out(bond_charges.size());
    for (std::size_t b = 0; b < out.size(); ++b) out[b] = bond_dim(static_cast<int>(b));
    return out;
  }

  int max_bond_dim() const {
    int m = 1;
    for (const auto& q : bond_charges) m = std::max(m, static_cast<int>(q.size()));
    return m;
  }

  static MpsState product(std::span<const int> occupations, int n_max) {
    MpsState s;
    s.n_max = n_max;
    const int n = static_cast<int>(occupations.size());
    const int d = n_max + 1;
    s.bond_charges.assign(n + 1, {0});
    int total = 0;
    for (int j = 0; j < n; ++j) {
      if (occupations[j] < 0 || occupations[j] > n_max)
        throw DomainError("occupation outside [0, n_max]");
      std::vector<Mat> a(d, Mat::Zero(1, 1));
      a[occupations[j]](0, 0) = 1.0;
      s.site_tensors.push_back(std::move(a));
      total += occupations[j];
      s.bond_charges[j + 1] = {total};
    }
    s.canonical_center = 0;
    return s;
  }
};

// Evenly spread atom pattern for the requested filling (all ones at unit
// filling).
inline std::vector<int> uniform_occupations(const LatticeParams& p) {
  std::vector<int> occ(p.n_sites, 0);
  const int atoms = p.n_atoms();
  for (int j = 0; j < p.n_sites; ++j)
    occ[j] = static_cast<int>((static_cast<long>(j + 1) * atoms) / p.n_sites -
                              (static_cast<long>(j) * atoms) / p.n_sites);
  return occ;
}

namespace detail {

inline std::pair<int, int> charge_range(const std::vector<int>& q, int c) {
  auto [lo, hi] = std::equal_range(q.begin(), q.end(), c);
  return {static_cast<int>(lo - q.begin()), static_cast<int>(hi - lo)};
}

inline std::vector<int> unique_charges(const std::vector<int>& q) {
  std::vector<int> u(q);
  u.erase(std::unique(u.begin(), u.end()), u.end());
  return u;
}

}  // namespace detail

struct BlockSvd {
  Mat u;               // rows x k
  Eigen::VectorXd s;   // k, normalized so that sum s^2 = 1
  Mat vh;              // k x cols
  std::vector<int> charges;
  double discarded = 0.0;  // relative discarded weight
  double norm = 0.0;       // Frobenius norm of the input
};

inline constexpr int kUnboundedDim = std::numeric_limits<int>::max();

// SVD of a charge-conserving matrix: rows with label q couple only to
// columns with the same label. Each sector is decomposed separately; the
// global spectrum is truncated to at most `max_dim` values, then further
// while the relative discarded weight stays <= `cutoff`. Kept columns are
// ordered by ascending charge (descending singular value inside a sector).
inline BlockSvd block_svd(const Mat& m, const std::vector<int>& row_q,
                          const std::vector<int>& col_q, int max_dim, double cutoff) {
  std::map<int, std::vector<int>> rows_by_q, cols_by_q;
  for (int r = 0; r < static_cast<int>(row_q.size()); ++r) rows_by_q[row_q[r]].push_back(r);
  for (int c = 0; c < static_cast<int>(col_q.size()); ++c) cols_by_q[col_q[c]].push_back(c);

  struct Sector {
    int q;
    const std::vector<int>* rows;
    const std::vector<int>* cols;
    Mat u, vh;
    Eigen::VectorXd s;
  };
  std::vector<Sector> sectors;
  for (const auto& [q, rows] : rows_by_q) {
    auto it = cols_by_q.find(q);
    if (it == cols_by_q.end()) continue;
    const auto& cols = it->second;
    Mat sub(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < cols.size(); ++j) sub(i, j) = m(rows[i], cols[j]);
    if (sub.squaredNorm() == 0.0) continue;
    Eigen::BDCSVD<Mat> svd(sub, Eigen::ComputeThinU | Eigen::ComputeThinV);
    sectors.push_back({q, &rows, &cols, svd.matrixU(), svd.matrixV().adjoint(),
                       svd.singularValues()});
  }

  struct Candidate {
    double s;
    int sector;
    int index;
  };
  std::vector<Candidate> cand;
  double total = 0.0, smax = 0.0;
  for (int k = 0; k < static_cast<int>(sectors.size()); ++k)
    for (int i = 0; i < sectors[k].s.size(); ++i) {
      cand.push_back({sectors[k].s(i), k, i});
      total += sectors[k].s(i) * sectors[k].s(i);
      smax = std::max(smax, sectors[k].s(i));
    }
  if (total == 0.0) throw Error("block SVD of a zero matrix");
  std::stable_sort(cand.begin(), cand.end(),
                   [](const Candidate& a, const Candidate& b) { return a.s > b.s; });

  std::size_t keep = 0;
  while (keep < cand.size() && cand[keep].s > 1e-14 * smax) ++keep;
  keep = std::min<std::size_t>(keep, static_cast<std::size_t>(std::max(1, max_dim)));
  double kept_weight = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept_weight += cand[i].s * cand[i].s;
  while (keep > 1) {
    const double w = cand[keep - 1].s * cand[keep - 1].s;
    if ((total - kept_weight + w) / total > cutoff) break;
    kept_weight -= w;
    --keep;
  }

  std::vector<std::vector<int>> kept_idx(sectors.size());
  for (std::size_t i = 0; i < keep; ++i) kept_idx[cand[i].sector].push_back(cand[i].index);
  for (auto& v : kept_idx) std::sort(v.begin(), v.end());

  BlockSvd out;
  out.norm = std::sqrt(total);
  out.discarded = std::max(0.0, (total - kept_weight) / total);
  const auto k = static_cast<Eigen::Index>(keep);
  out.u = Mat::Zero(m.rows(), k);
  out.vh = Mat::Zero(k, m.cols());
  out.s.resize(k);
  out.charges.reserve(keep);
  const double scale = 1.0 / std::sqrt(kept_weight);
  Eigen::Index col = 0;
  for (std::size_t sec = 0; sec < sectors.size(); ++sec) {
    const Sector& S = sectors[sec];
    for (int idx : kept_idx[sec]) {
      for (std::size_t r = 0; r < S.rows->size(); ++r) out.u((*S.rows)[r], col) = S.u(r, idx);
      for (std::size_t c = 0; c < S.cols->size(); ++c) out.vh(col, (*S.cols)[c]) = S.vh(idx, c);
      out.s(col) = S.s(idx) * scale;
      out.charges.push_back(S.q);
      ++col;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonical-form bookkeeping.

namespace detail {

// Left-orthonormalize site j and push the remainder into site j + 1.
inline double shift_right(MpsState& st, int j, int max_dim = kUnboundedDim,
                          double cutoff = 0.0) {
  const int d = st.phys_dim();
  auto& A = st.site_tensors[j];
  auto& B = st.site_tensors[j + 1];
  const auto& qL = st.bond_charges[j];
  const auto& qR = st.bond_charges[j + 1];
  const auto Dl = static_cast<Eigen::Index>(qL.size());
  const auto Dr = static_cast<Eigen::Index>(qR.size());
  Mat m(d * Dl, Dr);
  std::vector<int> rq(d * Dl);
  for (int s = 0; s < d; ++s) {
    m.middleRows(s * Dl, Dl) = A[s];
    for (Eigen::Index a = 0; a < Dl; ++a) rq[s * Dl + a] = qL[a] + s;
  }
  BlockSvd svd = block_svd(m, rq, qR, max_dim, cutoff);
  const Mat carry = svd.norm * (svd.s.asDiagonal() * svd.vh);
  for (int s = 0; s < d; ++s) {
    A[s] = svd.u.middleRows(s * Dl, Dl);
    B[s] = carry * B[s];
  }
  st.bond_charges[j + 1] = std::move(svd.charges);
  return svd.discarded;
}

// Right-orthonormalize site j and push the remainder into site j - 1.
inline double shift_left(MpsState& st, int j, int max_dim = kUnboundedDim,
                         double cutoff = 0.0) {
  const int d = st.phys_dim();
  auto& A = st.site_tensors[j];
  auto& P = st.site_tensors[j - 1];
  const auto& qL = st.bond_charges[j];
  const auto& qR = st.bond_charges[j + 1];
  const auto Dl = static_cast<Eigen::Index>(qL.size());
  const auto Dr = static_cast<Eigen::Index>(qR.size());
  Mat m(Dl, d * Dr);
  std::vector<int> cq(d * Dr);
  for (int s = 0; s < d; ++s) {
    m.middleCols(s * Dr, Dr) = A[s];
    for (Eigen::Index b = 0; b < Dr; ++b) cq[s * Dr + b] = qR[b] - s;
  }
  BlockSvd svd = block_svd(m, qL, cq, max_dim, cutoff);
  const Mat carry = svd.norm * (svd.u * svd.s.asDiagonal());
  for (int s = 0; s < d; ++s) {
    A[s] = svd.vh.middleCols(s * Dr, Dr);
    P[s] = P[s] * carry;
  }
  st.bond_charges[j] = std::move(svd.charges);
  return svd.discarded;
}

inline void normalize_center(MpsState& st) {
  auto& A = st.site_tensors[*st.canonical_center];
  double n2 = 0.0;
  for (const auto& m : A) n2 += m.squaredNorm();
  const double n = std::sqrt(n2);
  if (n == 0.0) throw Error("MPS has zero norm");
  for (auto& m : A) m /= n;
}

}  // namespace detail

inline void move_center(MpsState& st, int target) {
  if (!st.canonical_center) throw Error("MPS is not in canonical form");
  int c = *st.canonical_center;
  while (c < target) detail::shift_right(st, c++);
  while (c > target) detail::shift_left(st, c--);
  st.canonical_center = c;
}

// Bring an arbitrary MPS into mixed-canonical form around `center` and
// normalize it.
inline void canonicalize(MpsState& st, int center = 0) {
  for (int j = 0; j < center; ++j) detail::shift_right(st, j);
  for (int j = st.n_sites() - 1; j > center; --j) detail::shift_left(st, j);
  st.canonical_center = center;
  detail::normalize_center(st);
}

// Largest deviation of sum_s A^+A (left of centre) or sum_s AA^+ (right of
// centre) from the identity.
inline double isometry_residual(const MpsState& st) {
  if (!st.canonical_center) return std::numeric_limits<double>::infinity();
  const int c = *st.canonical_center;
  double worst = 0.0;
  for (int j = 0; j < st.n_sites(); ++j) {
    if (j == c) continue;
    const auto& A = st.site_tensors[j];
    const Eigen::Index D = (j < c) ? A[0].cols() : A[0].rows();
    Mat acc = Mat::Zero(D, D);
    for (const auto& m : A) acc += (j < c) ? Mat(m.adjoint() * m) : Mat(m * m.adjoint());
    worst = std::max(worst, (acc - Mat::Identity(D, D)).cwiseAbs().maxCoeff());
  }
  return worst;
}

// Largest magnitude of any tensor entry outside the particle-number blocks.
inline double charge_violation(const MpsState& st) {
  double worst = 0.0;
  for (int j = 0; j < st.n_sites(); ++j) {
    const auto& qL = st.bond_charges[j];
    const auto& qR = st.bond_charges[j + 1];
    for (int s = 0; s < st.phys_dim(); ++s) {
      const Mat& m = st.site_tensors[j][s];
      for (Eigen::Index a = 0; a < m.rows(); ++a)
        for (Eigen::Index b = 0; b < m.cols(); ++b)
          if (qL[a] + s != qR[b]) worst = std::max(worst, std::abs(m(a, b)));
    }
  }
  return worst;
}

inline cplx overlap(const MpsState& bra, const MpsState& ket) {
  if (bra.n_sites() != ket.n_sites()) throw DomainError("MPS length mismatch");
  Mat env = Mat::Ones(1, 1);
  for (int j = 0; j < ket.n_sites(); ++j) {
    Mat next = Mat::Zero(bra.site_tensors[j][0].cols(), ket.site_tensors[j][0].cols());
    for (int s = 0; s < std::min(bra.phys_dim(), ket.phys_dim()); ++s)
      next.noalias() += bra.site_tensors[j][s].adjoint() * env * ket.site_tensors[j][s];
    env = std::move(next);
  }
  return env(0, 0);
}

inline double norm(const MpsState& st) { return std::sqrt(std::abs(overlap(st, st))); }

// Amplitudes on an exact-engine basis, for oracle comparisons.
inline Eigen::VectorXcd to_amplitudes(const MpsState& st, const FockBasis& basis) {
  const int n = st.n_sites();
  Eigen::VectorXcd out(static_cast<Eigen::Index>(basis.size()));
  std::vector<Eigen::RowVectorXcd> prefix(n + 1);
  prefix[0] = Eigen::RowVectorXcd::Ones(1);
  std::vector<int> last(n, -1);
  for (std::size_t i = 0; i < basis.size(); ++i) {
    int depth = 0;
    while (depth < n && basis.occupation(i, depth) == last[depth]) ++depth;
    for (int j = depth; j < n; ++j) {
      const int s = basis.occupation(i, j);
      last[j] = s;
      prefix[j + 1] = prefix[j] * st.site_tensors[j][s];
      if (j + 1 < n) last[j + 1] = -1;
    }
    out(static_cast<Eigen::Index>(i)) = prefix[n](0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix-product operator for the Bose-Hubbard chain (bond dimension 4,
// lower-triangular: row 3 opens a term, column 0 closes it).

struct Mpo {
  static constexpr int kDim = 4;
  // grid[j][w * kDim + w'] is the d x d operator, empty when zero.
  std::vector<std::vector<Eigen::MatrixXd>> grid;

  const Eigen::MatrixXd& at(int site, int w, int wp) const {
    return grid[site][w * kDim + wp];
  }
  bool nonzero(int site, int w, int wp) const { return at(site, w, wp).size() != 0; }

  static Mpo bose_hubbard(const LatticeParams& p, double ratio) {
    const LocalTerms terms = hamiltonian_terms(p, ratio);
    const int d = p.local_dim();
    const Eigen::MatrixXd b = annihilation(p.n_max);
    const Eigen::MatrixXd bd = b.transpose();
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(d, d);
    const double J = ratio * p.interaction;
    Mpo mpo;
    mpo.grid.assign(p.n_sites, std::vector<Eigen::MatrixXd>(kDim * kDim));
    for (int j = 0; j < p.n_sites; ++j) {
      auto& g = mpo.grid[j];
      g[0 * kDim + 0] = id;
      g[1 * kDim + 0] = b;
      g[2 * kDim + 0] = bd;
      g[3 * kDim + 0] = terms.sites[j].matrix;
      if (J != 0.0) {
        g[3 * kDim + 1] = -J * bd;
        g[3 * kDim + 2] = -J * b;
      }
      g[3 * kDim + 3] = id;
    }
    return mpo;
  }
};

namespace detail {

// L'[w'] = sum_{w,s',s} W[w,w'](s',s) A[s']^+ L[w] A[s]
inline std::vector<Mat> grow_left(const std::vector<Mat>& L, const std::vector<Mat>& A,
                                  const Mpo& mpo, int site) {
  const int D = Mpo::kDim;
  const int d = static_cast<int>(A.size());
  const Eigen::Index Dr = A[0].cols();
  std::vector<Mat> out(D, Mat::Zero(Dr, Dr));
  for (int w = 0; w < D; ++w) {
    if (L[w].size() == 0 || L[w].squaredNorm() == 0.0) continue;
    std::vector<Mat> LA(d);
    for (int s = 0; s < d; ++s) LA[s] = L[w] * A[s];
    for (int wp = 0; wp < D; ++wp) {
      if (!mpo.nonzero(site, w, wp)) continue;
      const Eigen::MatrixXd& op = mpo.at(site, w, wp);
      for (int sp = 0; sp < d; ++sp)
        for (int s = 0; s < d; ++s)
          if (op(sp, s) != 0.0) out[wp].noalias() += op(sp, s) * (A[sp].adjoint() * LA[s]);
    }
  }
  return out;
}

// R'[w] = sum_{w',s',s} W[w,w'](s',s) conj(A[s']) R[w'] A[s]^T
inline std::vector<Mat> grow_right(const std::vector<Mat>& R, const std::vector<Mat>& A,
                                   const Mpo& mpo, int site) {
  const int D = Mpo::kDim;
  const int d = static_cast<int>(A.size());
  const Eigen::Index Dl = A[0].rows();
  std::vector<Mat> out(D, Mat::Zero(Dl, Dl));
  for (int wp = 0; wp < D; ++wp) {
    if (R[wp].size() == 0 || R[wp].squaredNorm() == 0.0) continue;
    std::vector<Mat> RA(d);
    for (int s = 0; s < d; ++s) RA[s] = R[wp] * A[s].transpose();
    for (int w = 0; w < D; ++w) {
      if (!mpo.nonzero(site, w, wp)) continue;
      const Eigen::MatrixXd& op = mpo.at(site, w, wp);
      for (int sp = 0; sp < d; ++sp)
        for (int s = 0; s < d; ++s)
          if (op(sp, s) != 0.0) out[w].noalias() += op(sp, s) * (A[sp].conjugate() * RA[s]);
    }
  }
  return out;
}

inline std::vector<Mat> left_boundary() {
  std::vector<Mat> L(Mpo::kDim, Mat::Zero(1, 1));
  L[Mpo::kDim - 1](0, 0) = 1.0;
  return L;
}

inline std::vector<Mat> right_boundary() {
  std::vector<Mat> R(Mpo::kDim, Mat::Zero(1, 1));
  R[0](0, 0) = 1.0;
  return R;
}

}  // namespace detail

inline double mpo_expectation(const MpsState& st, const Mpo& mpo) {
  std::vector<Mat> L = detail::left_boundary();
  for (int j = 0; j < st.n_sites(); ++j) L = detail::grow_left(L, st.site_tensors[j], mpo, j);
  const double n2 = std::abs(overlap(st, st));
  return L[0](0, 0).real() / n2;
}

// <n_i>, <dn_i^2> from norm environments; valid for any gauge.
inline SiteProfile mps_site_profile(const MpsState& st, double filling) {
  const int n = st.n_sites();
  const int d = st.phys_dim();
  std::vector<Mat> left(n + 1), right(n + 1);
  left[0] = Mat::Ones(1, 1);
  for (int j = 0; j < n; ++j) {
    Mat next = Mat::Zero(st.site_tensors[j][0].cols(), st.site_tensors[j][0].cols());
    for (int s = 0; s < d; ++s)
      next.noalias() += st.site_tensors[j][s].adjoint() * left[j] * st.site_tensors[j][s];
    left[j + 1] = std::move(next);
  }
  right[n] = Mat::Ones(1, 1);
  for (int j = n - 1; j >= 0; --j) {
    Mat next = Mat::Zero(st.site_tensors[j][0].rows(), st.site_tensors[j][0].rows());
    for (int s = 0; s < d; ++s)
      next.noalias() += st.site_tensors[j][s] * right[j + 1] * st.site_tensors[j][s].adjoint();
    right[j] = std::move(next);
  }
  const double n2 = left[n](0, 0).real();
  SiteProfile p;
  p.n_sites = n;
  p.filling = filling;
  p.occupations.resize(n);
  p.fluctuations.resize(n);
  for (int j = 0; j < n; ++j) {
    double m1 = 0.0, m2 = 0.0;
    for (int s = 1; s < d; ++s) {
      const Mat& A = st.site_tensors[j][s];
      const double w = (A.adjoint() * left[j] * A * right[j + 1].transpose()).trace().real();
      m1 += s * w;
      m2 += s * s * w;
    }
    m1 /= n2;
    m2 /= n2;
    p.occupations[j] = m1;
    p.fluctuations[j] = m2 - m1 * m1;
  }
  return p;
}

struct CompressResult {
  MpsState state;
  double fidelity = 1.0;
};

// SVD truncation to bond dimension <= m_new: left-canonicalize, then sweep
// right-to-left truncating every bond.
inline CompressResult compress(const MpsState& input, int m_new) {
  if (m_new < 1) throw DomainError("target bond dimension must be >= 1");
  if (m_new >= input.max_bond_dim()) return {input, 1.0};
  MpsState out = input;
  const int n = out.n_sites();
  if (!out.canonical_center) canonicalize(out, 0);
  move_center(out, n - 1);
  for (int j = n - 1; j > 0; --j) detail::shift_left(out, j, m_new, 0.0);
  out.canonical_center = 0;
  detail::normalize_center(out);
  const double f = std::abs(overlap(input, out)) / (norm(input) * norm(out));
  return {std::move(out), f};
}

// ---------------------------------------------------------------------------
// Time evolution.

enum class BondParity { even, odd };  // bonds (0,1),(2,3),... vs (1,2),(3,4),...

struct GateLayer {
  BondParity parity;
  double fraction;  // of dt
};

// Second-order palindromic splitting exp(-iH dt) ~ A(dt/2) B(dt) A(dt/2).
// Consecutive half layers of neighbouring steps are fused into one layer
// during evolution.
struct TrotterPlan {
  double dt = 1e-2;
  int order = 2;
  std::vector<GateLayer> gate_schedule{{BondParity::even, 0.5},
                                       {BondParity::odd, 1.0},
                                       {BondParity::even, 0.5}};
  int m_max = 64;
  double svd_cutoff = 1e-12;
  double abort_discarded = 1e-2;

  void validate() const {
    if (!(dt > 0.0)) throw DomainError("time step must be positive");
    if (order != 2) throw DomainError("only second-order splitting is implemented");
    if (m_max < 1) throw DomainError("m_max must be >= 1");
    if (!(svd_cutoff >= 0.0)) throw DomainError("svd_cutoff must be nonnegative");
  }

  bool replication_range() const { return m_max >= 20 && m_max <= 100; }
};

struct MpsOptions {
  double dmrg_cutoff = 1e-13;
  int max_sweeps = 40;
  double sweep_tolerance = 1e-10;
  int lanczos_iterations = 40;
  double lanczos_residual = 1e-9;
};

struct MpsGroundState {
  double energy = 0.0;
  MpsState state;
  std::vector<double> sweep_energies;
};

struct MpsMeasurement {
  SiteProfile profile;
  double energy = 0.0;
};

namespace detail {

// Lowest eigenpair of a Hermitian operator given as a matrix-free action,
// by restarted Lanczos with full reorthogonalization.
template <class Apply>
std::pair<double, Eigen::VectorXcd> lowest_eigenpair(Apply&& apply, Eigen::VectorXcd v,
                                                     int max_krylov, double tol,
                                                     int max_restarts = 8) {
  const Eigen::Index n = v.size();
  const int kmax = static_cast<int>(std::min<Eigen::Index>(max_krylov, n));
  v.normalize();
  Mat V(n, kmax);
  Eigen::VectorXcd w(n);
  double theta = 0.0;
  for (int restart = 0; restart <= max_restarts; ++restart) {
    std::vector<double> alpha, beta;
    V.col(0) = v;
    int k = 0;
    for (; k < kmax;) {
      apply(V.col(k), w);
      alpha.push_back(V.col(k).dot(w).real());
      for (int pass = 0; pass < 2; ++pass) w -= V.leftCols(k + 1) * (V.leftCols(k + 1).adjoint() * w);
      const double b = w.norm();
      ++k;
      if (b < 1e-12 || k == kmax) break;
      beta.push_back(b);
      V.col(k) = w / b;
    }
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(k, k);
    for (int i = 0; i < k; ++i) T(i, i) = alpha[i];
    for (int i = 0; i + 1 < k; ++i) T(i, i + 1) = T(i + 1, i) = beta[i];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(T);
    theta = eig.eigenvalues()(0);
    v = V.leftCols(k) * eig.eigenvectors().col(0).cast<cplx>();
    v.normalize();
    apply(v, w);
    theta = v.dot(w).real();
    if ((w - theta * v).norm() <= tol) break;
  }
  return {theta, v};
}

}  // namespace detail

class MpsEngine {
 public:
  explicit MpsEngine(const LatticeParams& params, MpsOptions options = {})
      : params_(params), options_(options) {
    params_.validate();
  }

  const LatticeParams& params() const { return params_; }
  const MpsOptions& options() const { return options_; }

  MpsState product_state() const {
    const auto occ = uniform_occupations(params_);
    return MpsState::product(occ, params_.n_max);
  }

  // Two-site variational ground-state search from the uniform product state.
  MpsGroundState ground_state(double ratio, int m_max) const {
    if (m_max < 1) throw DomainError("m_max must be >= 1");
    const int n = params_.n_sites;
    const Mpo mpo = Mpo::bose_hubbard(params_, ratio);
    MpsState st = product_state();

    std::vector<std::vector<Mat>> L(n + 1), R(n + 1);
    L[0] = detail::left_boundary();
    R[n] = detail::right_boundary();
    for (int j = n - 1; j >= 1; --j) R[j] = detail::grow_right(R[j + 1], st.site_tensors[j], mpo, j);

    std::vector<double> history;
    double last = std::numeric_limits<double>::infinity();
    for (int sweep = 0; sweep < options_.max_sweeps; ++sweep) {
      double energy = 0.0;
      for (int j = 0; j + 1 < n; ++j) {
        energy = optimize_bond(st, j, mpo, L[j], R[j + 2], m_max, true);
        L[j + 1] = detail::grow_left(L[j], st.site_tensors[j], mpo, j);
      }
      for (int j = n - 2; j >= 0; --j) {
        energy = optimize_bond(st, j, mpo, L[j], R[j + 2], m_max, false);
        R[j + 1] = detail::grow_right(R[j + 2], st.site_tensors[j + 1], mpo, j + 1);
      }
      history.push_back(energy);
      if (std::abs(energy - last) <= options_.sweep_tolerance) {
        st.canonical_center = 0;
        detail::normalize_center(st);
        return {mpo_expectation(st, mpo), std::move(st), std::move(history)};
      }
      last = energy;
    }
    std::vector<double> tail(history.end() - std::min<std::size_t>(2, history.size()),
                             history.end());
    throw ConvergenceError("DMRG did not converge within max sweeps",
                           tail.size() == 2 ? std::abs(tail[1] - tail[0]) : last, tail);
  }

  MpsMeasurement measure(const MpsState& st, double ratio) const {
    return {mps_site_profile(st, params_.filling),
            mpo_expectation(st, Mpo::bose_hubbard(params_, ratio))};
  }

  // Second-order TEBD under a piecewise-constant control: step k uses the
  // pulse value at its midpoint for every gate.
  MpsState evolve(MpsState st, const SampledPulse& pulse, const TrotterPlan& plan,
                  const Deadline& deadline = std::nullopt) const {
    plan.validate();
    if (!(pulse.dt > 0.0)) throw DomainError("time step must be positive");
    if (std::abs(pulse.dt - plan.dt) > 1e-12 * plan.dt)
      throw DomainError("pulse grid spacing does not match the Trotter step");
    const int steps = pulse.n_steps();
    if (steps == 0) return st;
    if (!st.canonical_center) canonicalize(st, 0);

    const int n = params_.n_sites;
    std::vector<double> step_discard(steps, 0.0);
    bool left_to_right = true;
    auto run_layer = [&](BondParity parity, const std::vector<Mat>& gates, int step) {
      std::vector<int> bonds;
      for (int b = (parity == BondParity::even ? 0 : 1); b + 1 < n; b += 2) bonds.push_back(b);
      if (bonds.empty()) return;
      if (!left_to_right) std::reverse(bonds.begin(), bonds.end());
      for (int b : bonds) {
        move_center(st, left_to_right ? b : b + 1);
        step_discard[step] += apply_gate(st, b, gates[b], plan, left_to_right);
      }
      left_to_right = !left_to_right;
    };

    // Layer sequence: A(J0/2) B(J0) [A(J0/2)A(J1/2)] B(J1) ... A(J_{n-1}/2)
    std::vector<Mat> half_prev = bond_gates(pulse.midpoints[0], 0.5 * plan.dt);
    run_layer(BondParity::even, half_prev, 0);
    for (int k = 0; k < steps; ++k) {
      run_layer(BondParity::odd, bond_gates(pulse.midpoints[k], plan.dt), k);
      if (k + 1 < steps) {
        std::vector<Mat> half_next = bond_gates(pulse.midpoints[k + 1], 0.5 * plan.dt);
        std::vector<Mat> fused(half_next.size());
        for (std::size_t b = 0; b < fused.size(); ++b)
          if (half_next[b].size() != 0) fused[b] = half_next[b] * half_prev[b];
        run_layer(BondParity::even, fused, k + 1);
        half_prev = std::move(half_next);
      } else {
        run_layer(BondParity::even, half_prev, k);
      }
      st.discarded_weight += step_discard[k];
      st.truncation_log.push_back(st.discarded_weight);
      if (st.discarded_weight > plan.abort_discarded)
        throw TruncationOverflowError(st.discarded_weight, plan.abort_discarded);
      if ((k & 15) == 15) check_deadline(deadline);
    }
    return st;
  }

  // exp(-i tau h_b) for every bond b, where h_b carries the hopping and the
  // shared halves of the adjacent single-site terms (edge sites keep their
  // full term). Gates are assembled per particle-number sector of the
  // two-site space so that off-sector entries are exactly zero.
  std::vector<Mat> bond_gates(double ratio, double tau) const {
    const LocalTerms terms = hamiltonian_terms(params_, ratio);
    const int n = params_.n_sites;
    const int d = params_.local_dim();
    std::vector<Mat> gates(n - 1);
    for (int b = 0; b + 1 < n; ++b) {
      const double wl = (b == 0) ? 1.0 : 0.5;
      const double wr = (b + 1 == n - 1) ? 1.0 : 0.5;
      Eigen::MatrixXd h = terms.bonds[b].matrix;
      for (int s1 = 0; s1 < d; ++s1)
        for (int s2 = 0; s2 < d; ++s2)
          h(s1 * d + s2, s1 * d + s2) += wl * terms.sites[b].matrix(s1, s1) +
                                         wr * terms.sites[b + 1].matrix(s2, s2);
      gates[b] = sector_exponential(h, d, tau);
    }
    return gates;
  }

 private:
  static Mat sector_exponential(const Eigen::MatrixXd& h, int d, double tau) {
    Mat g = Mat::Zero(d * d, d * d);
    for (int total = 0; total <= 2 * (d - 1); ++total) {
      std::vector<int> idx;
      for (int s1 = 0; s1 < d; ++s1) {
        const int s2 = total - s1;
        if (s2 >= 0 && s2 < d) idx.push_back(s1 * d + s2);
      }
      const auto k = static_cast<Eigen::Index>(idx.size());
      Eigen::MatrixXd block(k, k);
      for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < k; ++j) block(i, j) = h(idx[i], idx[j]);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block);
      Eigen::VectorXcd phase(k);
      for (Eigen::Index i = 0; i < k; ++i)
        phase(i) = std::exp(cplx(0.0, -tau * eig.eigenvalues()(i)));
      const Mat U = eig.eigenvectors().cast<cplx>();
      const Mat e = U * phase.asDiagonal() * U.adjoint();
      for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < k; ++j) g(idx[i], idx[j]) = e(i, j);
    }
    return g;
  }

  // theta[s1 * d + s2] = A_b[s1] A_{b+1}[s2], computed block by block.
  static std::vector<Mat> two_site_theta(const MpsState& st, int b) {
    const int d = st.phys_dim();
    const auto& A = st.site_tensors[b];
    const auto& B = st.site_tensors[b + 1];
    const auto& qL = st.bond_charges[b];
    const auto& qM = st.bond_charges[b + 1];
    const auto& qR = st.bond_charges[b + 2];
    std::vector<Mat> theta(d * d, Mat::Zero(static_cast<Eigen::Index>(qL.size()),
                                            static_cast<Eigen::Index>(qR.size())));
    for (int q : detail::unique_charges(qL)) {
      const auto [oL, nL] = detail::charge_range(qL, q);
      for (int s1 = 0; s1 < d; ++s1) {
        const auto [oM, nM] = detail::charge_range(qM, q + s1);
        if (nM == 0) continue;
        for (int s2 = 0; s2 < d; ++s2) {
          const auto [oR, nR] = detail::charge_range(qR, q + s1 + s2);
          if (nR == 0) continue;
          theta[s1 * d + s2].block(oL, oR, nL, nR).noalias() +=
              A[s1].block(oL, oM, nL, nM) * B[s2].block(oM, oR, nM, nR);
        }
      }
    }
    return theta;
  }

  // Split a two-site tensor back into sites b, b+1; the singular values go
  // right (centre moves to b+1) or left (centre stays at b).
  static double split_theta(MpsState& st, int b, const std::vector<Mat>& theta, int max_dim,
                            double cutoff, bool absorb_right) {
    const int d = st.phys_dim();
    const auto& qL = st.bond_charges[b];
    const auto& qR = st.bond_charges[b + 2];
    const auto Dl = static_cast<Eigen::Index>(qL.size());
    const auto Dr = static_cast<Eigen::Index>(qR.size());
    Mat m(d * Dl, d * Dr);
    std::vector<int> rq(d * Dl), cq(d * Dr);
    for (int s1 = 0; s1 < d; ++s1) {
      for (Eigen::Index a = 0; a < Dl; ++a) rq[s1 * Dl + a] = qL[a] + s1;
      for (int s2 = 0; s2 < d; ++s2) m.block(s1 * Dl, s2 * Dr, Dl, Dr) = theta[s1 * d + s2];
    }
    for (int s2 = 0; s2 < d; ++s2)
      for (Eigen::Index c = 0; c < Dr; ++c) cq[s2 * Dr + c] = qR[c] - s2;
    BlockSvd svd = block_svd(m, rq, cq, max_dim, cutoff);
    Mat left = svd.u, right = svd.vh;
    if (absorb_right) right = svd.s.asDiagonal() * right;
    else left = left * svd.s.asDiagonal();
    for (int s = 0; s < d; ++s) {
      st.site_tensors[b][s] = left.middleRows(s * Dl, Dl);
      st.site_tensors[b + 1][s] = right.middleCols(s * Dr, Dr);
    }
    st.bond_charges[b + 1] = std::move(svd.charges);
    st.canonical_center = absorb_right ? b + 1 : b;
    return svd.discarded;
  }

  static double apply_gate(MpsState& st, int b, const Mat& gate, const TrotterPlan& plan,
                           bool moving_right) {
    const int d = st.phys_dim();
    const std::vector<Mat> theta = two_site_theta(st, b);
    std::vector<Mat> out(d * d, Mat::Zero(theta[0].rows(), theta[0].cols()));
    for (int p = 0; p < d * d; ++p)
      for (int q = 0; q < d * d; ++q)
        if (gate(p, q) != cplx(0.0)) out[p].noalias() += gate(p, q) * theta[q];
    return split_theta(st, b, out, plan.m_max, plan.svd_cutoff, moving_right);
  }

  double optimize_bond(MpsState& st, int j, const Mpo& mpo, const std::vector<Mat>& L,
                       const std::vector<Mat>& R, int m_max, bool moving_right) const {
    const int d = st.phys_dim();
    const std::vector<Mat> theta = two_site_theta(st, j);
    const Eigen::Index Dl = theta[0].rows(), Dr = theta[0].cols();
    const Eigen::Index block = Dl * Dr;
    Eigen::VectorXcd v(block * d * d);
    for (int p = 0; p < d * d; ++p)
      v.segment(p * block, block) = Eigen::Map<const Eigen::VectorXcd>(theta[p].data(), block);

    const int D = Mpo::kDim;
    auto apply = [&](const auto& x, Eigen::VectorXcd& y) {
      std::vector<std::vector<Mat>> Lx(D);
      for (int w0 = 0; w0 < D; ++w0) {
        if (L[w0].squaredNorm() == 0.0) continue;
        Lx[w0].resize(d * d);
        for (int p = 0; p < d * d; ++p)
          Lx[w0][p] = L[w0] * Eigen::Map<const Mat>(x.data() + p * block, Dl, Dr);
      }
      y.setZero(x.size());
      Mat acc(Dl, Dr);
      for (int w2 = 0; w2 < D; ++w2) {
        if (R[w2].squaredNorm() == 0.0) continue;
        for (int p_out = 0; p_out < d * d; ++p_out) {
          const int s1o = p_out / d, s2o = p_out % d;
          acc.setZero();
          bool any = false;
          for (int w0 = 0; w0 < D; ++w0) {
            if (Lx[w0].empty()) continue;
            for (int w1 = 0; w1 < D; ++w1) {
              if (!mpo.nonzero(j, w0, w1) || !mpo.nonzero(j + 1, w1, w2)) continue;
              const Eigen::MatrixXd& o1 = mpo.at(j, w0, w1);
              const Eigen::MatrixXd& o2 = mpo.at(j + 1, w1, w2);
              for (int s1 = 0; s1 < d; ++s1) {
                const double c1 = o1(s1o, s1);
                if (c1 == 0.0) continue;
                for (int s2 = 0; s2 < d; ++s2) {
                  const double c2 = o2(s2o, s2);
                  if (c2 == 0.0) continue;
                  acc += (c1 * c2) * Lx[w0][s1 * d + s2];
                  any = true;
                }
              }
            }
          }
          if (!any) continue;
          Eigen::Map<Mat>(y.data() + p_out * block, Dl, Dr).noalias() += acc * R[w2].transpose();
        }
      }
    };
    auto [energy, ground] = detail::lowest_eigenpair(apply, v, options_.lanczos_iterations,
                                                     options_.lanczos_residual);
    std::vector<Mat> out(d * d);
    for (int p = 0; p < d * d; ++p)
      out[p] = Eigen::Map<const Mat>(ground.data() + p * block, Dl, Dr);
    split_theta(st, j, out, m_max, options_.dmrg_cutoff, moving_right);
    return energy;
  }

  LatticeParams params_;
  MpsOptions options_;
};

}  // namespace crab
