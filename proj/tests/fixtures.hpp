#pragma once

// Reference values produced by tests/oracle/bose_hubbard_oracle.py, an
// independent dense numpy/scipy implementation. Regenerate with
//   python3 tests/oracle/bose_hubbard_oracle.py
// All runs: unit filling, n_max = 4 unless noted, homogeneous lattice, U = 1,
// ramp from J/U = 0.52 to 0.0024.

namespace fixture {

// N = 2, n_max = 2, J = 0.3.
inline constexpr double kTwoSiteAnalyticEnergy = -0.2810249675906654;

// N = 6 ground state at J/U = 0.52.
inline constexpr double kSixSiteGroundEnergy = -3.534684650919763;
inline constexpr double kSixSiteFluctuations[6] = {0.358601983949216, 0.507230223980365,
                                                   0.542385274580879, 0.542385274580880,
                                                   0.507230223980362, 0.358601983949214};
// |<psi|psi_4>| after right-to-left sequential SVD truncation to rank 4.
inline constexpr double kSixSiteCompressFidelityM4 = 0.987464830114248;

// N = 4, linear guess, T = 50, dt = 1e-3.
inline constexpr double kFourSiteLinearRho = 5.916042671777477e-06;
inline constexpr double kFourSiteLinearResidual = 3.139133405923027e-04;

// N = 6, exponential guess, T = 50, dt = 1e-2.
inline constexpr double kSixSiteExpRampRho = 3.865172357953028e-06;
inline constexpr double kSixSiteExpRampResidual = 1.262996588633903e-04;

// Frequency jitter for seed 7, two modes.
inline constexpr double kJitterSeed7[2] = {0.3898297483912715, 0.01678829452815611};

// N = 4, exponential guess, T = 20, dt = 1e-2, A = (0.2, -0.1), B = (0.05, 0.1),
// jitter from seed 7.
inline constexpr double kCrabToyRho = 5.402123086493654e-03;
inline constexpr double kCrabToyResidual = 1.032383671249210e-02;

}  // namespace fixture
