#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "crab/errors.hpp"

namespace crab {

using Point = std::vector<double>;

struct SimplexState {
  std::vector<Point> vertices;
  std::vector<double> values;
  int iteration = 0;

  std::size_t best() const {
    return static_cast<std::size_t>(std::min_element(values.begin(), values.end()) -
                                    values.begin());
  }

  double spread() const {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double s = *hi - *lo;
    return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
  }
};

struct NelderMeadOptions {
  double reflection = 1.0;
  double expansion = 2.0;
  double contraction = 0.5;
  double shrink = 0.5;
  double spread_tolerance = 1e-10;
  double initial_step = 0.1;
};

enum class StopReason { halted, converged, budget };

inline std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::halted: return "halted-at-threshold";
    case StopReason::converged: return "converged";
    case StopReason::budget: return "budget-exhausted";
  }
  return "?";
}

// Values for a batch of points, in order. `halt` truncates the batch: the
// last returned value is the one that triggered the stop rule.
struct BatchResult {
  std::vector<double> values;
  bool halt = false;
};

struct NelderMeadResult {
  Point best_point;
  double best_value = std::numeric_limits<double>::infinity();
  StopReason reason = StopReason::budget;
  int evaluations = 0;
  SimplexState simplex;
};

// Minimizes through `eval(const std::vector<Point>&) -> BatchResult`.
// Batches are the initial polytope and shrink steps; reflection, expansion
// and contraction are single evaluations.
template <class Eval>
NelderMeadResult nelder_mead(Eval&& eval, const Point& x0, int budget,
                             const NelderMeadOptions& opt = {}) {
  const std::size_t n = x0.size();
  if (n == 0) throw ConfigError("Nelder-Mead needs at least one parameter");
  if (budget < static_cast<int>(n) + 1)
    throw ConfigError("evaluation budget " + std::to_string(budget) +
                      " is below dimension + 1 = " + std::to_string(n + 1));

  NelderMeadResult res;
  auto run = [&](std::vector<Point> pts, std::vector<double>& out) -> bool {
    const int left = budget - res.evaluations;
    if (left <= 0) {
      res.reason = StopReason::budget;
      return true;
    }
    bool truncated = false;
    if (static_cast<int>(pts.size()) > left) {
      pts.resize(static_cast<std::size_t>(left));
      truncated = true;
    }
    BatchResult r = eval(pts);
    if (r.values.size() > pts.size() || (!r.halt && r.values.size() != pts.size()))
      throw Error("evaluator returned a malformed batch");
    res.evaluations += static_cast<int>(r.values.size());
    for (std::size_t i = 0; i < r.values.size(); ++i)
      if (r.values[i] < res.best_value || res.best_point.empty()) {
        res.best_value = r.values[i];
        res.best_point = pts[i];
      }
    out = std::move(r.values);
    if (r.halt) {
      res.reason = StopReason::halted;
      return true;
    }
    if (truncated) {
      res.reason = StopReason::budget;
      return true;
    }
    return false;
  };
  auto single = [&](const Point& p, double& v) -> bool {
    std::vector<double> out;
    if (run({p}, out)) return true;
    v = out[0];
    return false;
  };

  SimplexState& S = res.simplex;
  S.vertices.assign(1, x0);
  for (std::size_t i = 0; i < n; ++i) {
    Point p = x0;
    p[i] += opt.initial_step;
    S.vertices.push_back(std::move(p));
  }
  if (run(S.vertices, S.values)) {
    S.vertices.resize(S.values.size());
    return res;
  }

  std::vector<std::size_t> order(n + 1);
  while (true) {
    if (S.spread() <= opt.spread_tolerance) {
      res.reason = StopReason::converged;
      return res;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return S.values[a] < S.values[b]; });
    const std::size_t ib = order[0], iw = order[n], isw = order[n - 1];
    Point c(n, 0.0);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[j] += S.vertices[order[k]][j] / static_cast<double>(n);
    auto along = [&](const Point& from, double t) {
      Point p(n);
      for (std::size_t j = 0; j < n; ++j) p[j] = c[j] + t * (from[j] - c[j]);
      return p;
    };
    ++S.iteration;

    const Point xr = along(S.vertices[iw], -opt.reflection);
    double fr;
    if (single(xr, fr)) return res;
    if (fr < S.values[ib]) {
      const Point xe = along(xr, opt.expansion);
      double fe;
      if (single(xe, fe)) return res;
      if (fe < fr) {
        S.vertices[iw] = xe;
        S.values[iw] = fe;
      } else {
        S.vertices[iw] = xr;
        S.values[iw] = fr;
      }
      continue;
    }
    if (fr < S.values[isw]) {
      S.vertices[iw] = xr;
      S.values[iw] = fr;
      continue;
    }
    const bool outside = fr < S.values[iw];
    const Point xc = outside ? along(xr, opt.contraction) : along(S.vertices[iw], opt.contraction);
    double fc;
    if (single(xc, fc)) return res;
    if (outside ? (fc <= fr) : (fc < S.values[iw])) {
      S.vertices[iw] = xc;
      S.values[iw] = fc;
      continue;
    }
    std::vector<Point> shrunk;
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k <= n; ++k) {
      if (k == ib) continue;
      Point p(n);
      for (std::size_t j = 0; j < n; ++j)
        p[j] = S.vertices[ib][j] + opt.shrink * (S.vertices[k][j] - S.vertices[ib][j]);
      shrunk.push_back(std::move(p));
      idx.push_back(k);
    }
    std::vector<double> fs;
    const bool stop = run(shrunk, fs);
    for (std::size_t k = 0; k < fs.size(); ++k) {
      S.vertices[idx[k]] = shrunk[k];
      S.values[idx[k]] = fs[k];
    }
    if (stop) return res;
  }
}

}  // namespace crab
