#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyperkin/conditions.hpp"
#include "hyperkin/linalg.hpp"
#include "hyperkin/parallel.hpp"
#include "hyperkin/rng.hpp"

namespace hyperkin {

/// Row-stochastic P with invariant law mu, acting on functions by (Pf)_i = sum_j P_ij f_j.
struct FiniteMarkovOperator {
  Matrix P;
  Vector mu;

  Eigen::Index n() const { return P.rows(); }
};

namespace tag {
inline constexpr std::uint64_t restart = 0x70;
inline constexpr std::uint64_t audit = 0x80;
inline constexpr std::uint64_t chain_gen = 0x90;
}  // namespace tag

inline constexpr double kStochasticTol = 1e-12;

/// Row sums, invariance mu P = mu, positivity and normalisation of mu.
inline ConditionReport validate_operator(const FiniteMarkovOperator& op) {
  ConditionReport r{"markov_operator"};
  const bool shapes = op.P.rows() == op.P.cols() && op.mu.size() == op.P.rows() && op.P.rows() >= 1;
  if (!shapes) {
    r.notes = "shape mismatch between P and mu";
    r.add("n", static_cast<double>(op.P.rows()));
    return r;
  }
  const double row_err = (op.P.rowwise().sum().array() - 1.0).abs().maxCoeff();
  const double inv_err = (op.P.transpose() * op.mu - op.mu).cwiseAbs().maxCoeff();
  const double mass_err = std::abs(op.mu.sum() - 1.0);
  const double min_mu = op.mu.minCoeff();
  const double min_entry = op.P.minCoeff();
  r.add("n", static_cast<double>(op.n()));
  r.add("row_sum_violation", row_err);
  r.add("invariance_violation", inv_err);
  r.add("mu_mass_violation", mass_err);
  r.add("min_mu", min_mu);
  r.add("min_entry", min_entry);
  r.holds = op.P.allFinite() && op.mu.allFinite() && row_err <= kStochasticTol && inv_err <= kStochasticTol &&
            mass_err <= kStochasticTol && min_mu > 0.0 && min_entry >= 0.0;
  if (!r.holds) r.notes = "operator violates stochasticity, invariance or positivity";
  return r;
}

namespace detail {
inline void require_valid(const FiniteMarkovOperator& op) {
  const ConditionReport v = validate_operator(op);
  if (!v.holds) {
    std::string msg = "invalid Markov operator:";
    for (const auto& [k, x] : v.witnesses) msg += " " + k + "=" + std::to_string(x);
    throw InvalidInput(msg);
  }
}
}  // namespace detail

/// ||P - mu||_2: largest singular value of D^{1/2} (P - 1 mu^T) D^{-1/2}.
inline double norm2_gap(const FiniteMarkovOperator& op) {
  require(op.mu.size() == op.P.rows(), "norm2_gap: mu has the wrong length");
  if (!(op.mu.minCoeff() > 0.0)) throw InvalidInput("norm2_gap: mu must be strictly positive");
  const Vector s = op.mu.cwiseSqrt();
  const Matrix C = op.P - Vector::Ones(op.n()) * op.mu.transpose();
  const Matrix W = s.asDiagonal() * C * s.cwiseInverse().asDiagonal();
  return Eigen::JacobiSVD<Matrix>(W).singularValues()(0);
}

/// (sum_i mu_i |g_i|^p)^{1/p}
inline double lp_norm(const Vector& g, const Vector& mu, double p) {
  return std::pow(mu.dot(g.cwiseAbs().array().pow(p).matrix()), 1.0 / p);
}

struct NormResult {
  double value = 0.0;  // ||P||_{p->q}, best found
  Vector argmax;       // maximiser, with ||f||_p = 1
  bool converged = true;
  int best_restart = -1;  // -1 constant start, -2 - i atom i, >= 0 random restart
  int iterations = 0;     // of the best run
  std::optional<double> exact_scan;  // n = 2 only
};

struct NormOptions {
  int restarts = 64;
  double tol = 1e-11;
  int max_iter = 10000;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

namespace detail {

struct AscentRun {
  double objective = 0.0;  // mu(|Pf|^q)
  Vector f;
  bool converged = false;
  int iterations = 0;
};

/// Projected gradient ascent on mu(|Pf|^q) over the L^p(mu) unit sphere, with
/// step halving on failure and mild growth on success.
inline AscentRun ascend(const FiniteMarkovOperator& op, const Matrix& adjoint, double p, double q, Vector f,
                        const NormOptions& opt) {
  auto normalise = [&](Vector& g) {
    const double nrm = lp_norm(g, op.mu, p);
    if (nrm > 0.0) g /= nrm;
  };
  auto objective = [&](const Vector& g) { return op.mu.dot((op.P * g).cwiseAbs().array().pow(q).matrix()); };
  normalise(f);
  AscentRun run{objective(f), f, false, 0};
  double step = 1.0;
  Vector grad(f.size()), trial(f.size()), Pf(f.size());
  for (int it = 0; it < opt.max_iter; ++it) {
    run.iterations = it + 1;
    Pf.noalias() = op.P * run.f;
    // gradient of mu(|Pf|^q) in the mu-weighted inner product
    grad.noalias() = adjoint * (Pf.cwiseAbs().array().pow(q - 1.0) * Pf.array().sign()).matrix();
    grad *= q;
    bool accepted = false;
    while (step > 1e-16) {
      trial = run.f + step * grad;
      normalise(trial);
      const double val = objective(trial);
      if (val > run.objective) {
        const double gain = val - run.objective;
        run.objective = val;
        run.f = trial;
        accepted = true;
        step *= 1.5;
        if (gain <= opt.tol * run.objective) {
          run.converged = true;
          return run;
        }
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      run.converged = true;  // no ascent direction at machine precision
      return run;
    }
  }
  return run;
}

}  // namespace detail

/// ||P||_{p->q} = sup { ||Pf||_q : ||f||_p = 1 } by multi-start projected
/// gradient ascent: `restarts` Gaussian starts plus the constant and every
/// normalised atom e_i / mu_i^{1/p}. Ties are broken by start order, so the
/// result does not depend on the worker count.
inline NormResult norm_p_to_q(const FiniteMarkovOperator& op, double p, double q, const NormOptions& opt = {}) {
  detail::require_valid(op);
  require(p >= 1.0 && q >= 1.0 && std::isfinite(p) && std::isfinite(q), "norm_p_to_q: need finite p, q >= 1");
  const Eigen::Index n = op.n();
  // mu-adjoint D^{-1} P^T D
  const Matrix adjoint = op.mu.cwiseInverse().asDiagonal() * op.P.transpose() * op.mu.asDiagonal();
  const std::size_t n_starts = static_cast<std::size_t>(1 + n + opt.restarts);
  std::vector<detail::AscentRun> runs(n_starts);
  parallel_for(n_starts, opt.threads, [&](std::size_t s) {
    Vector f0 = Vector::Ones(n);
    if (s >= 1 && s <= static_cast<std::size_t>(n)) {
      f0.setZero();
      f0(static_cast<Eigen::Index>(s - 1)) = 1.0;
    } else if (s > static_cast<std::size_t>(n)) {
      NormalStream rng(StreamId{opt.seed, s - 1 - static_cast<std::size_t>(n), tag::restart});
      for (Eigen::Index i = 0; i < n; ++i) f0(i) = rng();
    }
    runs[s] = detail::ascend(op, adjoint, p, q, f0, opt);
  });
  std::size_t best = 0;
  bool all_converged = true;
  for (std::size_t s = 0; s < n_starts; ++s) {
    all_converged = all_converged && runs[s].converged;
    if (runs[s].objective > runs[best].objective) best = s;
  }
  NormResult out;
  out.value = std::pow(runs[best].objective, 1.0 / q);
  out.argmax = runs[best].f;
  out.converged = all_converged;
  out.iterations = runs[best].iterations;
  out.best_restart = best == 0 ? -1 : (best <= static_cast<std::size_t>(n) ? -1 - static_cast<int>(best)
                                                                         : static_cast<int>(best) - 1 - static_cast<int>(n));
  if (!std::isfinite(out.value)) throw NumericalFailure("norm_p_to_q: non-finite objective");
  return out;
}

/// Exact scan of ||P||_{p->q} for n = 2 over f = (cos t / mu_1^{1/p}, sin t / mu_2^{1/p}) rescaled to the sphere.
inline double two_state_norm_scan(const FiniteMarkovOperator& op, double p, double q, int points = 200000) {
  require(op.n() == 2, "two_state_norm_scan: n must be 2");
  double best = 0.0;
  for (int i = 0; i < points; ++i) {
    const double t = M_PI * i / points;
    Vector f(2);
    f << std::cos(t), std::sin(t);
    f /= lp_norm(f, op.mu, p);
    best = std::max(best, lp_norm(op.P * f, op.mu, q));
  }
  return best;
}

/// ||P||_{2->4}; for two states the exact scan is attached and the larger value returned.
inline NormResult norm_2_to_4(const FiniteMarkovOperator& op, const NormOptions& opt = {}) {
  NormResult r = norm_p_to_q(op, 2.0, 4.0, opt);
  if (op.n() == 2) {
    r.exact_scan = two_state_norm_scan(op, 2.0, 4.0);
    r.value = std::max(r.value, *r.exact_scan);
  }
  return r;
}

/// delta(P) = ||P||_{2->4}^4
inline double delta_of(const FiniteMarkovOperator& op, const NormOptions& opt = {}) {
  return std::pow(norm_2_to_4(op, opt).value, 4);
}

struct PropBound {
  double bound = 0.0;        // clamped at 0
  double raw = 0.0;          // unclamped infimum
  double argmin = 0.0;       // minimising epsilon
  double grid_bound = 0.0;   // best value on the 1e4-point grid, clamped
};

/// inf over eps in (0, 1) of (sqrt(8 eps^2 + delta) - 3 eps) / (1 - eps), clamped at 0.
inline PropBound prop_p_bound_details(double delta) {
  require(std::isfinite(delta) && delta >= 0.0, "prop_p_bound: delta must be a nonnegative number");
  require(delta < 2.0, "prop_p_bound: delta must be < 2");
  // sqrt(8e^2 + delta) - 3e rationalised, which avoids cancellation as e -> 1
  auto g = [delta](double e) { return (delta - e * e) / ((std::sqrt(8.0 * e * e + delta) + 3.0 * e) * (1.0 - e)); };
  constexpr int kGrid = 10000;
  int best_i = 1;
  double best = g(1.0 / (kGrid + 1));
  for (int i = 1; i <= kGrid; ++i) {
    const double v = g(static_cast<double>(i) / (kGrid + 1));
    if (v < best) {
      best = v;
      best_i = i;
    }
  }
  PropBound out;
  out.grid_bound = std::max(0.0, best);
  double lo = static_cast<double>(best_i - 1) / (kGrid + 1), hi = static_cast<double>(best_i + 1) / (kGrid + 1);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = hi - gr * (hi - lo), b = lo + gr * (hi - lo);
  double ga = g(a), gb = g(b);
  while (hi - lo > 1e-12) {
    if (ga < gb) {
      hi = b;
      b = a;
      gb = ga;
      a = hi - gr * (hi - lo);
      ga = g(a);
    } else {
      lo = a;
      a = b;
      ga = gb;
      b = lo + gr * (hi - lo);
      gb = g(b);
    }
  }
  out.argmin = 0.5 * (lo + hi);
  out.raw = std::min(best, g(out.argmin));
  if (out.raw == best) out.argmin = static_cast<double>(best_i) / (kGrid + 1);
  out.bound = std::max(0.0, out.raw);
  return out;
}

inline double prop_p_bound(double delta) { return prop_p_bound_details(delta).bound; }

/// (p - 1) q / (p (q - 1))
inline double entropy_factor(double p, double q) { return (p - 1.0) * q / (p * (q - 1.0)); }

/// mu(f log f) with entries floored at 1e-12 and 0 log 0 = 0.
inline double entropy_functional(const Vector& f, const Vector& mu) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    const double v = std::max(f(i), 1e-12);
    s += mu(i) * v * std::log(v);
  }
  return s;
}

/// Checks mu((Pf) log Pf) <= k mu(f log f) for random densities f and
/// mu((Pf - mu f)^2) <= k mu((f - mu f)^2) for random signed f, with
/// k = (p-1)q / (p(q-1)). Refuses to run unless ||P||_{p->q} <= 1 + 1e-9.
inline ConditionReport entropy_contraction_audit(const FiniteMarkovOperator& op, double p, double q, int trials,
                                                 std::uint64_t seed, const NormOptions& norm_opt = {}) {
  require(q > p && p > 1.0, "entropy_contraction_audit: need q > p > 1");
  require(trials >= 1, "entropy_contraction_audit: trials must be positive");
  detail::require_valid(op);
  const double npq = norm_p_to_q(op, p, q, norm_opt).value;
  if (npq > 1.0 + 1e-9)
    throw InvalidInput("entropy_contraction_audit: ||P||_{p->q} = " + std::to_string(npq) +
                       " > 1, premise unmet; audit not run");
  const double k = entropy_factor(p, q);
  const Eigen::Index n = op.n();
  double max_excess = -std::numeric_limits<double>::infinity(), max_excess_l2 = max_excess;
  int violations = 0, violations_l2 = 0;
  Vector f(n);
  for (int t = 0; t < trials; ++t) {
    NormalStream rng(StreamId{seed, static_cast<std::uint64_t>(t), tag::audit});
    std::exponential_distribution<double> expo(1.0);
    for (Eigen::Index i = 0; i < n; ++i) f(i) = expo(rng.engine());  // Dirichlet(1) up to scale
    f /= op.mu.dot(f);
    const Vector Pf = op.P * f;
    const double lhs = entropy_functional(Pf, op.mu), rhs = entropy_functional(f, op.mu);
    const double ex = lhs - k * rhs;
    max_excess = std::max(max_excess, ex);
    if (ex > 1e-9) ++violations;

    for (Eigen::Index i = 0; i < n; ++i) f(i) = rng();
    const double m = op.mu.dot(f);
    const Vector c = (f.array() - m).matrix();
    const Vector Pc = op.P * f - Vector::Constant(n, m);
    const double ex2 = op.mu.dot(Pc.cwiseAbs2()) - k * op.mu.dot(c.cwiseAbs2());
    max_excess_l2 = std::max(max_excess_l2, ex2);
    if (ex2 > 1e-9) ++violations_l2;
  }
  ConditionReport r{"entropy_contraction"};
  r.add("p", p);
  r.add("q", q);
  r.add("factor", k);
  r.add("norm_p_to_q", npq);
  r.add("trials", trials);
  r.add("max_excess", max_excess);
  r.add("violations", violations);
  r.add("max_excess_l2", max_excess_l2);
  r.add("violations_l2", violations_l2);
  r.holds = violations == 0 && violations_l2 == 0;
  return r;
}

struct PowerResult {
  std::optional<int> n;
  double final_norm = 0.0;  // ||P^n||_{2->4} at the returned or last tried n
};

/// Smallest n <= n_max with ||P^n||_{2->4} <= 1 + 1e-9.
inline PowerResult hypercontractive_power(const FiniteMarkovOperator& op, int n_max, const NormOptions& opt = {}) {
  require(n_max >= 1, "hypercontractive_power: n_max must be positive");
  const double delta = delta_of(op, opt);
  // the optimiser approaches delta = 2 from below, so allow for its tolerance
  if (!(delta < 2.0 - 1e-9)) throw InvalidInput("hypercontractive_power: delta(P) = " + std::to_string(delta) + " >= 2");
  PowerResult out;
  FiniteMarkovOperator Q{op.P, op.mu};
  for (int k = 1; k <= n_max; ++k) {
    if (k > 1) Q.P = Q.P * op.P;
    // P^k drifts from exact stochasticity by rounding; renormalise rows.
    Q.P = Q.P.array().colwise() / Q.P.rowwise().sum().array();
    out.final_norm = norm_2_to_4(Q, opt).value;
    if (out.final_norm <= 1.0 + 1e-9) {
      out.n = k;
      return out;
    }
  }
  return out;
}

/// Random chain reversible with respect to a random mu: a mix of a Metropolis
/// chain, the rank-one projection 1 mu^T and the identity.
inline FiniteMarkovOperator random_reversible_chain(int n, std::uint64_t seed, std::uint64_t index = 0) {
  require(n >= 2, "random_reversible_chain: n must be >= 2");
  NormalStream rng(StreamId{seed, index, tag::chain_gen});
  Vector mu(n);
  for (int i = 0; i < n; ++i) mu(i) = 0.2 + rng.uniform();
  mu /= mu.sum();
  Matrix W(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) W(i, j) = W(j, i) = rng.uniform();
  // Metropolis with symmetric proposal W / n
  Matrix K = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j)
      if (i != j) K(i, j) = W(i, j) / n * std::min(1.0, mu(j) / mu(i));
    K(i, i) = 1.0 - (K.row(i).sum() - K(i, i));
  }
  double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
  c *= 0.5;
  const double s = a + b + c;
  a /= s;
  b /= s;
  c /= s;
  FiniteMarkovOperator op;
  op.mu = mu;
  op.P = a * K + b * Vector::Ones(n) * mu.transpose() + c * Matrix::Identity(n, n);
  // exact stochasticity and invariance up to rounding
  op.P = op.P.array().colwise() / op.P.rowwise().sum().array();
  return op;
}

}  // namespace hyperkin
