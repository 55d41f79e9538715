// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (capped at 125).
//
//   acceptance [--out DIR] [--only 1,4,9]

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crab/backend.hpp"
#include "crab/control.hpp"
#include "crab/exact.hpp"
#include "crab/harness.hpp"
#include "crab/mps.hpp"
#include "crab/nelder_mead.hpp"

using namespace crab;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

fs::path g_out = "acceptance_runs";
std::string g_cli;
std::vector<fs::path> g_traces;  // every optimizer trace written by the suite

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

LatticeParams chain(int n) {
  LatticeParams p;
  p.n_sites = n;
  return p;
}

SampledPulse exponential_ramp(double T, double dt) {
  return guess_pulse(GuessPulse(GuessKind::exponential, 0.52, 2.4e-3, T), TimeGrid::with_step(T, dt));
}

double log_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cli(const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = "'" + g_cli + "'";
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 1. MPS ground energy vs ED within 1e-8 at m = 64, and TEBD fidelity under
// the exponential ramp (T = 50, dt = 1e-3) at least 1 - 1e-6, N = 4, 6, 8.
Verdict oracle_equivalence() {
  Verdict v{true, ""};
  for (int n : {4, 6, 8}) {
    const auto t0 = std::chrono::steady_clock::now();
    ExactEngine ed(chain(n));
    MpsEngine me(chain(n));
    const ExactGroundState a = ed.ground_state(0.52);
    const MpsGroundState b = me.ground_state(0.52, 64);
    const double de = std::abs(a.energy - b.energy);

    const SampledPulse pulse = exponential_ramp(50.0, 1e-3);
    const QuantumStateED psi = ed.evolve(a.state, pulse);
    TrotterPlan plan;
    plan.dt = 1e-3;
    plan.m_max = 64;
    const MpsState phi = me.evolve(b.state, pulse, plan);
    const Eigen::VectorXcd amp = to_amplitudes(phi, ed.basis());
    const double f = std::abs(psi.amplitudes.dot(amp)) / (psi.amplitudes.norm() * amp.norm());

    const bool ok = de <= 1e-8 && f >= 1.0 - 1e-6;
    v.pass = v.pass && ok;
    v.detail += "N=" + std::to_string(n) + ": |dE|=" + num(de) + " 1-F=" + num(1.0 - f) +
                " (" + num(log_seconds(t0)) + " s); ";
  }
  return v;
}

// 2. Norm drift per 1e4 steps <= 1e-8, particle number exact by construction
// in both backends, energy constant within 1e-8 under constant control.
Verdict conservation() {
  Verdict v{true, ""};
  const int n = 8;
  ExactEngine ed(chain(n));
  MpsEngine me(chain(n));

  // Norm: 1e4 steps of the ramp in each backend.
  const SampledPulse ramp = exponential_ramp(100.0, 1e-2);
  const QuantumStateED psi = ed.evolve(ed.ground_state(0.52).state, ramp);
  TrotterPlan plan;
  plan.dt = 1e-2;
  const MpsState phi = me.evolve(me.ground_state(0.52, 64).state, ramp, plan);
  const double drift_ed = std::abs(psi.norm() - 1.0);
  const double drift_mps = std::abs(norm(phi) - 1.0);
  v.pass = v.pass && drift_ed <= 1e-8 && drift_mps <= 1e-8;
  v.detail += "norm drift ED " + num(drift_ed) + " MPS " + num(drift_mps) + "; ";

  // Particle number: every basis tuple sums to N; every MPS block respects
  // the bond charges and the last bond carries exactly N.
  bool basis_ok = true;
  for (std::size_t i = 0; i < ed.basis().size() && basis_ok; ++i) {
    int total = 0;
    for (int j = 0; j < n; ++j) total += ed.basis().occupation(i, j);
    basis_ok = total == n;
  }
  const bool mps_ok = charge_violation(phi) == 0.0 && phi.bond_charges.back() == std::vector<int>{n} &&
                      phi.bond_charges.front() == std::vector<int>{0};
  const SiteProfile prof = me.measure(phi, 2.4e-3).profile;
  double total_mps = 0.0;
  for (double x : prof.occupations) total_mps += x;
  v.pass = v.pass && basis_ok && mps_ok;
  v.detail += std::string("number ED ") + (basis_ok ? "exact" : "BROKEN") + " MPS " +
              (mps_ok ? "exact" : "BROKEN") + " (sum<n>=" + num(total_mps) + "); ";

  // Energy under a constant control after a quench, with the exact propagator.
  const QuantumStateED q0 = ed.ground_state(0.52).state;
  const double e0 = ed.energy(q0, 0.2);
  const QuantumStateED q1 = ed.evolve(q0, SampledPulse::constant(0.2, TimeGrid::with_step(100.0, 1e-2)));
  const double de = std::abs(ed.energy(q1, 0.2) - e0);
  v.pass = v.pass && de <= 1e-8;
  v.detail += "energy drift ED " + num(de);

  // Under TEBD <H> is only conserved up to the splitting error; reported.
  TrotterPlan fine;
  fine.dt = 1e-3;
  const MpsState m0 = me.ground_state(0.52, 64).state;
  const double em0 = me.measure(m0, 0.2).energy;
  const MpsState m1 = me.evolve(m0, SampledPulse::constant(0.2, TimeGrid::with_step(10.0, 1e-3)), fine);
  v.detail += " (TEBD dt=1e-3: " + num(std::abs(me.measure(m1, 0.2).energy - em0)) + ", not gated)";
  return v;
}

// 3. Observable error vs a dt/8 reference shrinks about 4x per halving of dt
// over dt in {4, 2, 1} x 1e-3; each ratio in [3, 5].
Verdict trotter_order() {
  const int n = 6;
  const double T = 5.0;
  MpsEngine me(chain(n));
  const MpsState start = me.ground_state(0.52, 128).state;
  auto final_energy = [&](double dt) {
    TrotterPlan plan;
    plan.dt = dt;
    plan.m_max = 128;
    plan.svd_cutoff = 0.0;
    const MpsState st = me.evolve(start, exponential_ramp(T, dt), plan);
    return me.measure(st, 2.4e-3).energy;
  };
  const double reference = final_energy(1e-3 / 8.0);
  std::vector<double> err;
  for (double dt : {4e-3, 2e-3, 1e-3}) err.push_back(std::abs(final_energy(dt) - reference));
  const double r1 = err[0] / err[1], r2 = err[1] / err[2];
  Verdict v;
  v.pass = r1 >= 3.0 && r1 <= 5.0 && r2 >= 3.0 && r2 <= 5.0;
  v.detail = "N=6 T=5 final <H> errors " + num(err[0]) + ", " + num(err[1]) + ", " + num(err[2]) +
             "; ratios " + num(r1) + ", " + num(r2);
  return v;
}

// 4. Unoptimized exponential and linear ramps at N = 10, T = 50 give rho in
// [0.03, 0.3].
Verdict baseline_reproduction() {
  const auto t0 = std::chrono::steady_clock::now();
  BackendSettings bs;
  bs.dt = 1e-2;
  const auto backend = make_backend(chain(10), bs);
  Verdict v{true, ""};
  for (GuessKind kind : {GuessKind::exponential, GuessKind::linear}) {
    const GuessPulse guess(kind, 0.52, 2.4e-3, 50.0);
    const Objective obj(backend, guess);
    const FigureOfMerit f = obj.evaluate(PulseSpec::uncorrected(guess, 4, 1));
    v.pass = v.pass && f.defect_density >= 0.03 && f.defect_density <= 0.3;
    v.detail += to_string(kind) + " rho=" + num(f.defect_density) + " dE/N=" + num(f.residual_energy) + "; ";
  }
  v.detail += "(" + num(log_seconds(t0)) + " s)";
  return v;
}

// Shared by criteria 5, 7 and 8: CRAB at N0 = 10, M = 4, budget 2000, ED.
struct OptimizedPulse {
  bool ran = false;
  fs::path dir;
  PulseSpec pulse;
  double baseline = 0.0;
  double rho = 0.0;
  double rho_fine = 0.0;
  std::string stop_reason;
  std::size_t evaluations = 0;
};
OptimizedPulse g_opt;

// Control grid for the optimization. The Krylov propagator is exact for a
// piecewise-constant control, so the step only sets how finely c(t) is
// sampled: for the exponential ramp at N = 10 rho moves by 2e-7 relative
// between dt = 0.01 and 0.1.
constexpr double kOptimizeDt = 0.1;

const OptimizedPulse& optimized_pulse() {
  if (g_opt.ran) return g_opt;
  g_opt.ran = true;
  g_opt.dir = g_out / "optimize_n10";

  BackendSettings fine;
  fine.dt = 1e-2;
  const GuessPulse guess(GuessKind::exponential, 0.52, 2.4e-3, 50.0);
  const Objective fine_obj(make_backend(chain(10), fine), guess);
  g_opt.baseline = fine_obj.evaluate(PulseSpec::uncorrected(guess, 4, 1)).defect_density;

  // Halt a little below a tenth of the baseline so the dt = 0.01 re-check
  // has margin.
  const double halt = 0.9 * g_opt.baseline / 10.0;
  RunConfig cfg = load_config(std::nullopt, {"model.n_sites=10", "control.n_modes=4", "optimizer.budget=2000",
                                             "optimizer.seed=1", "backend.dt=" + fmt(kOptimizeDt),
                                             "optimizer.rho_halt=" + fmt(halt),
                                             "output_dir=" + json(g_opt.dir.string()).dump()});
  Harness h(cfg);
  const RunRecord r = h.run();
  g_traces.push_back(g_opt.dir / "trace.tsv");
  g_opt.pulse = *r.best_pulse;
  g_opt.rho = r.best_merit->defect_density;
  g_opt.stop_reason = r.stop_reason;
  g_opt.evaluations = r.trace.size();
  g_opt.rho_fine = fine_obj.evaluate(g_opt.pulse).defect_density;
  return g_opt;
}

// 5. CRAB (M = 4, <= 2000 evaluations, ED, N = 10) reaches rho <= 1e-2 and
// at least 10x below its own baseline; 5e-3 is reported as the stretch target.
Verdict optimization_gain() {
  const auto t0 = std::chrono::steady_clock::now();
  const OptimizedPulse& o = optimized_pulse();
  Verdict v;
  v.pass = o.evaluations <= 2000 && o.rho_fine <= 1e-2 && o.rho_fine <= o.baseline / 10.0;
  v.detail = "N=10 baseline rho=" + num(o.baseline) + ", optimized rho=" + num(o.rho_fine) +
             " at dt=0.01 (" + num(o.rho) + " on the dt=" + num(kOptimizeDt) + " optimization grid), gain " +
             num(o.baseline / o.rho_fine) + "x after " + std::to_string(o.evaluations) + " evaluations, " +
             o.stop_reason + "; stretch 5e-3 " + (o.rho_fine <= 5e-3 ? "met" : "missed") + " (" +
             num(log_seconds(t0)) + " s)";
  return v;
}

// 6. rho_halt = 1e-3 stops exactly at the first evaluation with rho <= 1e-3,
// with status halted-at-threshold (exit code 2).
Verdict halting_rule() {
  const fs::path dir = g_out / "halting";
  fs::remove_all(dir);
  const int code = run_cli({"optimize", "--set", "model.n_sites=10", "--set", "backend.dt=" + fmt(kOptimizeDt),
                            "--set", "optimizer.rho_halt=1e-3", "--set", "optimizer.budget=2000", "--seed", "3",
                            "--out", dir.string()},
                           g_out / "halting.log");
  Verdict v;
  if (!fs::exists(dir / "trace.tsv")) {
    v.detail = "no trace written, exit code " + std::to_string(code);
    return v;
  }
  g_traces.push_back(dir / "trace.tsv");
  const RunRecord r = load_record(dir);
  const double first_rho = r.trace.front().defect_density;
  std::size_t first = r.trace.size();
  for (std::size_t i = 0; i < r.trace.size(); ++i)
    if (r.trace[i].defect_density <= 1e-3) {
      first = i;
      break;
    }
  v.pass = code == 2 && r.stop_reason == "halted-at-threshold" && first + 1 == r.trace.size();
  v.detail = "exit " + std::to_string(code) + ", status " + r.stop_reason + ", " +
             std::to_string(r.trace.size()) + " evaluations, initial rho=" + num(first_rho) + ", last rho=" +
             num(r.trace.back().defect_density) + ", first qualifying index " +
             (first < r.trace.size() ? std::to_string(first) : std::string("none"));
  return v;
}

// 7. The N0 = 10 pulse applied at N0 +- 2 gives rho within one order of
// magnitude of the N0 value.
Verdict robustness() {
  const auto t0 = std::chrono::steady_clock::now();
  const OptimizedPulse& o = optimized_pulse();
  const fs::path dir = g_out / "robustness_n10";
  RunConfig cfg = load_config(std::nullopt, {"experiment=\"robustness-sweep\"", "model.n_sites=10",
                                             "backend.dt=" + fmt(kOptimizeDt), "robustness.delta_n=[-2, 0, 2]",
                                             "control.pulse_from=" + json(o.dir.string()).dump(),
                                             "output_dir=" + json(dir.string()).dump()});
  Harness(cfg).run();
  const Table t = read_table(dir / "robustness.tsv");
  const int c_d = t.column("delta_n"), c_rho = t.column("rho"), c_status = t.column("status");
  double rho0 = 0.0;
  std::vector<std::pair<int, double>> others;
  bool all_ok = true;
  for (const auto& row : t.rows) {
    all_ok = all_ok && row[c_status] == "ok";
    const int d = std::stoi(row[c_d]);
    const double rho = parse_number(row[c_rho]);
    if (d == 0) rho0 = rho;
    else others.emplace_back(d, rho);
  }
  Verdict v{all_ok && rho0 > 0.0, "rho(N=10)=" + num(rho0)};
  for (const auto& [d, rho] : others) {
    const double decades = std::abs(std::log10(rho / rho0));
    v.pass = v.pass && decades <= 1.0;
    v.detail += ", rho(N=" + std::to_string(10 + d) + ")=" + num(rho) + " (" + num(decades) + " decades)";
  }
  v.detail += " (" + num(log_seconds(t0)) + " s)";
  return v;
}

// 8. Fixed-pulse rho at m = 64 and m = 100 agree within 1e-4 at N = 10.
Verdict truncation_independence() {
  const auto t0 = std::chrono::steady_clock::now();
  const OptimizedPulse& o = optimized_pulse();
  std::vector<double> rho;
  std::vector<int> dims;
  for (int m : {64, 100}) {
    BackendSettings bs;
    bs.kind = BackendKind::mps;
    bs.dt = 1e-2;
    bs.m_max = m;
    const Objective obj(make_backend(chain(10), bs), o.pulse.guess);
    const FigureOfMerit f = obj.evaluate(o.pulse);
    rho.push_back(f.defect_density);
  }
  const double diff = std::abs(rho[0] - rho[1]);
  return {diff <= 1e-4, "optimized pulse, MPS dt=0.01: rho(m=64)=" + num(rho[0]) + " rho(m=100)=" + num(rho[1]) +
                            " |diff|=" + num(diff) + " (" + num(log_seconds(t0)) + " s)"};
}

// 9. Nelder-Mead takes a 4-d convex quadratic below 1e-6 within 500
// evaluations; best-so-far is non-increasing in every recorded trace.
Verdict optimizer_sanity() {
  const double w[] = {1.0, 3.0, 10.0, 0.5};
  const double x_star[] = {0.4, -1.2, 2.0, 0.7};
  std::vector<double> best_so_far;
  auto eval = [&](const std::vector<Point>& pts) {
    BatchResult r;
    for (const auto& x : pts) {
      double s = 0.0;
      for (int i = 0; i < 4; ++i) s += w[i] * (x[i] - x_star[i]) * (x[i] - x_star[i]);
      r.values.push_back(s);
      best_so_far.push_back(best_so_far.empty() ? s : std::min(best_so_far.back(), s));
    }
    return r;
  };
  const NelderMeadResult res = nelder_mead(eval, Point{0.0, 0.0, 0.0, 0.0}, 500);
  Verdict v;
  v.pass = res.best_value < 1e-6 && res.evaluations <= 500;
  v.detail = "quadratic min " + num(res.best_value) + " after " + std::to_string(res.evaluations) + " evaluations; ";

  int checked = 0;
  for (const fs::path& p : g_traces) {
    if (!fs::exists(p)) continue;
    const Table t = read_table(p);
    const int c = t.column("best_value");
    double prev = std::numeric_limits<double>::infinity();
    bool mono = true;
    for (const auto& row : t.rows) {
      const double b = parse_number(row[c]);
      mono = mono && b <= prev;
      prev = b;
    }
    v.pass = v.pass && mono;
    v.detail += p.parent_path().filename().string() + (mono ? " monotone" : " NOT monotone") + "; ";
    ++checked;
  }
  v.detail += std::to_string(checked) + " recorded traces checked";
  return v;
}

// 10. Identical config and seed give byte-identical trace tables.
Verdict determinism() {
  std::vector<std::string> args{"optimize",         "--set", "model.n_sites=6", "--set", "backend.dt=0.1",
                                "--set",            "optimizer.budget=60", "--set", "optimizer.rho_halt=null",
                                "--seed",           "17"};
  std::vector<std::string> traces;
  std::vector<int> codes;
  for (const char* name : {"determinism_a", "determinism_b"}) {
    const fs::path dir = g_out / name;
    fs::remove_all(dir);
    std::vector<std::string> a = args;
    a.insert(a.end(), {"--out", dir.string()});
    codes.push_back(run_cli(a, g_out / (std::string(name) + ".log")));
    traces.push_back(slurp(dir / "trace.tsv"));
    g_traces.push_back(dir / "trace.tsv");
  }
  const bool same = !traces[0].empty() && traces[0] == traces[1];
  return {same && codes[0] == codes[1], std::string("two runs, exit codes ") + std::to_string(codes[0]) + "/" +
                                            std::to_string(codes[1]) + ", trace.tsv " +
                                            std::to_string(traces[0].size()) + " bytes, " +
                                            (same ? "byte-identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      g_out = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: acceptance [--out DIR] [--only 1,2,...]\n";
      return 125;
    }
  }
  if (const char* cli = std::getenv("CRAB_CLI")) g_cli = cli;
  else g_cli = (fs::absolute(argv[0]).parent_path() / "crab").string();
  fs::create_directories(g_out);

  // Criterion 9 runs last so that it sees every trace the suite wrote.
  const std::vector<std::pair<int, std::pair<const char*, std::function<Verdict()>>>> criteria{
      {1, {"oracle-equivalence", oracle_equivalence}},
      {2, {"conservation", conservation}},
      {3, {"trotter-order", trotter_order}},
      {4, {"baseline-reproduction", baseline_reproduction}},
      {5, {"optimization-gain", optimization_gain}},
      {6, {"halting-rule", halting_rule}},
      {7, {"robustness", robustness}},
      {8, {"truncation-independence", truncation_independence}},
      {10, {"determinism", determinism}},
      {9, {"optimizer-sanity", optimizer_sanity}},
  };
  std::vector<std::string> lines(11);
  int failed = 0;
  for (const auto& [id, entry] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    try {
      v = entry.second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    if (!v.pass) ++failed;
    lines[id] = std::string(v.pass ? "PASS" : "FAIL") + " " + std::to_string(id) + " " + entry.first + ": " +
                v.detail;
    std::cerr << lines[id] << '\n';
  }
  std::ofstream summary(g_out / "summary.txt");
  for (const auto& l : lines)
    if (!l.empty()) {
      std::cout << l << '\n';
      summary << l << '\n';
    }
  return std::min(failed, 125);
}
