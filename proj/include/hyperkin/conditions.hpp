#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hyperkin/linalg.hpp"
#include "hyperkin/model.hpp"
#include "hyperkin/rng.hpp"

namespace hyperkin {

/// Verdict plus the numbers needed to reproduce it.
struct ConditionReport {
  std::string condition_id;
  bool holds = false;
  std::vector<std::pair<std::string, double>> witnesses;
  std::string notes;

  void add(const std::string& name, double value) { witnesses.emplace_back(name, value); }

  std::optional<double> find(const std::string& name) const {
    for (const auto& [k, v] : witnesses)
      if (k == name) return v;
    return std::nullopt;
  }
  double witness(const std::string& name) const {
    auto v = find(name);
    if (!v) throw InvalidInput("report " + condition_id + " has no witness '" + name + "'");
    return *v;
  }
};

// ---------------------------------------------------------------------------
// Rank condition and Gramians

inline Matrix controllability_matrix(const Matrix& A, const Matrix& B) {
  const Eigen::Index m = A.rows(), d = B.cols();
  Matrix K(m, m * d);
  Matrix block = B;
  for (Eigen::Index i = 0; i < m; ++i) {
    K.middleCols(i * d, d) = block;
    block = A * block;
  }
  return K;
}

/// Rank[B, AB, ..., A^{m-1}B] = m.
inline ConditionReport kalman_rank(const Matrix& A, const Matrix& B) {
  require(A.rows() == A.cols() && B.rows() == A.rows() && B.cols() >= 1, "kalman_rank: inconsistent shapes");
  const Matrix K = controllability_matrix(A, B);
  ConditionReport r{"A1"};
  const int rank = numerical_rank(K);
  r.add("rank", rank);
  r.add("m", static_cast<double>(A.rows()));
  r.add("min_singular_value", Eigen::JacobiSVD<Matrix>(K).singularValues()(std::min(K.rows(), K.cols()) - 1));
  r.holds = rank == A.rows();
  return r;
}

struct GramianResult {
  Matrix value;
  double min_eigenvalue = 0.0;
  int nodes = 0;
};

/// Unweighted: int_0^t e^{sA} B B^T e^{sA^T} ds.
/// Weighted:   int_0^t s (t - s) e^{A(t-s)} B B^T e^{(t-s)A^T} ds.
inline GramianResult gramian(const Matrix& A, const Matrix& B, double t, bool weighted) {
  require(t > 0.0, "gramian: t must be positive");
  require(A.rows() == A.cols() && B.rows() == A.rows(), "gramian: inconsistent shapes");
  const Matrix BBt = B * B.transpose();
  auto integrand = [&](double s) -> Matrix {
    if (weighted) {
      const Matrix E = expm(A * (t - s));
      return (s * (t - s)) * (E * BBt * E.transpose());
    }
    const Matrix E = expm(A * s);
    return E * BBt * E.transpose();
  };
  auto q = integrate_matrix(integrand, 0.0, t);
  GramianResult out;
  out.value = symmetric_part(q.value);
  out.min_eigenvalue = lambda_min(out.value);
  out.nodes = q.nodes;
  return out;
}

// ---------------------------------------------------------------------------
// Dissipativity

/// 2001 points on the open interval (-1/|B|, 1/|B|), endpoints inset by 1e-6/|B|.
inline std::vector<double> admissible_r_grid(double norm_B, int points = 2001) {
  require(points >= 1, "r grid needs at least one point");
  const double half = norm_B > 0.0 ? (1.0 - 1e-6) / norm_B : 1.0;
  std::vector<double> grid(static_cast<std::size_t>(points));
  if (points == 1) {
    grid[0] = 0.0;
    return grid;
  }
  for (int i = 0; i < points; ++i) grid[static_cast<std::size_t>(i)] = -half + 2.0 * half * i / (points - 1);
  return grid;
}

/// [[I, rB], [rB^T, I]]; the cross-weighted inner product of the dissipativity form.
inline Matrix r_weight_matrix(const Matrix& B, double r) {
  const Eigen::Index m = B.rows(), d = B.cols();
  Matrix P = Matrix::Identity(m + d, m + d);
  P.topRightCorner(m, d) = r * B;
  P.bottomLeftCorner(d, m) = r * B.transpose();
  return P;
}

/// Symmetric matrix S(r) with Q(dx, dy) = u^T S(r) u for u = (dx, dy).
inline Matrix a3_form_matrix(const SystemSpec& spec, double r) {
  return symmetric_part(r_weight_matrix(spec.B(), r) * full_drift_matrix(spec));
}

inline double a3_theta(const SystemSpec& spec, double r) { return -lambda_max(a3_form_matrix(spec, r)); }

/// Dissipativity for affine drifts: theta(r) = -lambda_max(S(r)), maximized over the grid.
inline ConditionReport check_A3_linear(const SystemSpec& spec, const std::vector<double>& r_grid) {
  require(!r_grid.empty(), "check_A3_linear: empty r grid");
  const double nb = spec.norm_B();
  const Matrix M = full_drift_matrix(spec);
  double best_theta = -std::numeric_limits<double>::infinity();
  double best_r = r_grid.front();
  for (double r : r_grid) {
    require(nb == 0.0 || std::abs(r) * nb < 1.0, "check_A3_linear: r outside (-1/|B|, 1/|B|)");
    const double theta = -lambda_max(symmetric_part(r_weight_matrix(spec.B(), r) * M));
    if (theta > best_theta) {
      best_theta = theta;
      best_r = r;
    }
  }
  ConditionReport rep{"A3"};
  rep.add("best_r", best_r);
  rep.add("best_theta", best_theta);
  rep.add("grid_points", static_cast<double>(r_grid.size()));
  rep.holds = best_theta > 0.0;
  return rep;
}

/// Dissipativity ratio Q / (|dx|^2 + |dy|^2) for one pair; nullopt when the pair coincides.
inline std::optional<double> a3_ratio(const SystemSpec& spec, double r, const StatePair& a, const StatePair& b) {
  const StatePair delta = a - b;
  const double denom = delta.norm_sq();
  if (denom == 0.0) return std::nullopt;
  const StatePair fa = total_drift(spec, a);
  const StatePair fb = total_drift(spec, b);
  const StatePair df = fa - fb;
  const Vector left_x = delta.x + r * (spec.B() * delta.y);
  const Vector right_y = delta.y + r * (spec.B().transpose() * delta.x);
  return (left_x.dot(df.x) + df.y.dot(right_y)) / denom;
}

/// Sampling audit on given pairs. A positive empirical theta only means the
/// condition was not falsified by these samples.
inline ConditionReport check_A3_pairs(const SystemSpec& spec, const std::vector<std::pair<StatePair, StatePair>>& pairs,
                                      const std::vector<double>& r_grid) {
  require(!r_grid.empty(), "check_A3_pairs: empty r grid");
  std::vector<std::pair<StatePair, StatePair>> usable;
  usable.reserve(pairs.size());
  int skipped = 0;
  for (const auto& p : pairs) {
    check_dims(spec, p.first);
    check_dims(spec, p.second);
    if ((p.first - p.second).norm_sq() == 0.0)
      ++skipped;
    else
      usable.push_back(p);
  }
  if (usable.empty()) throw NumericalFailure("check_A3_sampled: every sampled pair was degenerate");

  double best_theta = -std::numeric_limits<double>::infinity();
  double best_r = r_grid.front();
  for (double r : r_grid) {
    double sup_ratio = -std::numeric_limits<double>::infinity();
    for (const auto& [a, b] : usable) sup_ratio = std::max(sup_ratio, *a3_ratio(spec, r, a, b));
    if (-sup_ratio > best_theta) {
      best_theta = -sup_ratio;
      best_r = r;
    }
  }
  ConditionReport rep{"A3_sampled"};
  rep.add("empirical_theta", best_theta);
  rep.add("best_r", best_r);
  rep.add("pairs_used", static_cast<double>(usable.size()));
  rep.add("pairs_skipped", skipped);
  rep.holds = best_theta > 0.0;
  rep.notes = rep.holds ? "not falsified (sampling cannot certify)" : "falsified by sampled pairs";
  return rep;
}

namespace detail {

inline Vector uniform_in_ball(NormalStream& rng, Eigen::Index dim, double radius) {
  Vector v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v(i) = rng();
  const double n = v.norm();
  if (n == 0.0) return v;
  const double scale = radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim)) / n;
  return v * scale;
}

}  // namespace detail

inline ConditionReport check_A3_sampled(const SystemSpec& spec, int n_pairs, double radius, std::uint64_t seed,
                                        const std::vector<double>& r_grid) {
  require(n_pairs >= 1, "check_A3_sampled: n_pairs must be >= 1");
  require(radius > 0.0, "check_A3_sampled: radius must be positive");
  NormalStream rng(StreamId{seed, 0, 0xa3});
  const Eigen::Index dim = spec.m() + spec.d();
  std::vector<std::pair<StatePair, StatePair>> pairs;
  pairs.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    const Vector a = detail::uniform_in_ball(rng, dim, radius);
    const Vector b = detail::uniform_in_ball(rng, dim, radius);
    pairs.emplace_back(StatePair::split(a, spec.m()), StatePair::split(b, spec.m()));
  }
  return check_A3_pairs(spec, pairs, r_grid);
}

// ---------------------------------------------------------------------------
// Closed-form conditions

using NamedParams = std::map<std::string, double>;

namespace detail {

inline double need(const NamedParams& p, const std::string& key, const std::string& id) {
  auto it = p.find(key);
  if (it == p.end()) throw InvalidInput(id + ": missing parameter '" + key + "'");
  if (!std::isfinite(it->second)) throw InvalidInput(id + ": parameter '" + key + "' is not finite");
  return it->second;
}

inline void finite_or_throw(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericalFailure(what + " is not finite");
}

inline double pos(double v) { return v > 0.0 ? v : 0.0; }

/// sup over r in (0, 1/|B|) of (r - gamma)^+ (beta - r)^+ / r^2 on a uniform grid.
inline double w1_sup_grid(double beta, double gamma, double norm_B, int points = 10000) {
  if (gamma <= 0.0) return std::numeric_limits<double>::infinity();
  const double upper = 1.0 / norm_B;
  double best = 0.0;
  for (int j = 1; j <= points; ++j) {
    const double r = upper * j / (points + 1.0);
    best = std::max(best, pos(r - gamma) * pos(beta - r) / (r * r));
  }
  return best;
}

}  // namespace detail

inline ConditionReport check_W1(const NamedParams& p) {
  const double K = detail::need(p, "K", "W1"), beta = detail::need(p, "beta", "W1"),
               gamma = detail::need(p, "gamma", "W1"), nb = detail::need(p, "normB", "W1"),
               a = detail::need(p, "normBinvAstar", "W1");
  require(nb > 0.0, "W1: normB must be positive");
  ConditionReport rep{"W1"};
  const double sup = detail::w1_sup_grid(beta, gamma, nb);
  const double rhs = 0.25 * (K + a) * (K + a);
  rep.add("lhs", sup);
  rep.add("rhs", rhs);
  rep.add("grid_points", 10000);
  rep.holds = sup > rhs;
  if (gamma <= 0.0) rep.notes = "gamma <= 0: supremum is infinite";
  return rep;
}

/// Named closed-form inequalities: C4 (with W1 cross-check), C5, C11, EEX, W1.
inline ConditionReport check_named_condition(const std::string& id, const NamedParams& p) {
  ConditionReport rep{id};
  if (id == "C4") {
    const double K = detail::need(p, "K", id), beta = detail::need(p, "beta", id),
                 gamma = detail::need(p, "gamma", id), nb = detail::need(p, "normB", id),
                 a = detail::need(p, "normBinvAstar", id);
    const double u = 2.0 + (a + K) * (a + K);
    const double excess = detail::pos(nb * beta - 1.0);
    const double rhs = 2.0 * beta / (u + std::sqrt(u * u - 4.0 + 4.0 * excess * excess));
    detail::finite_or_throw(u, "C4: u");
    detail::finite_or_throw(rhs, "C4: rhs");
    rep.add("u", u);
    rep.add("lhs", gamma);
    rep.add("rhs", rhs);
    rep.add("margin", rhs - gamma);
    rep.holds = gamma < rhs;
    const ConditionReport w1 = check_W1(p);
    rep.add("w1_lhs", w1.witness("lhs"));
    rep.add("w1_rhs", w1.witness("rhs"));
    rep.add("w1_holds", w1.holds ? 1.0 : 0.0);
    rep.add("verdicts_agree", w1.holds == rep.holds ? 1.0 : 0.0);
    if (gamma <= 0.0) rep.notes = "gamma <= 0: W1 supremum infinite, verdicts reported separately";
    return rep;
  }
  if (id == "C5") {
    const double K = detail::need(p, "K", id), beta = detail::need(p, "beta", id),
                 gamma = detail::need(p, "gamma", id);
    const double bound = std::min(1.0, 2.0 * beta / (2.0 + K * K));
    detail::finite_or_throw(bound, "C5: bound");
    rep.add("lhs", std::abs(gamma));
    rep.add("rhs", bound);
    rep.add("margin", bound - std::abs(gamma));
    rep.holds = gamma != 0.0 && std::abs(gamma) < bound;
    return rep;
  }
  if (id == "C11") {
    const double delta = detail::need(p, "delta", id), K1 = detail::need(p, "K1", id),
                 K2 = detail::need(p, "K2", id), nb = detail::need(p, "normB", id),
                 l1 = detail::need(p, "lambda1", id);
    const double lp = 0.5 * (delta + K2 + std::sqrt((K2 - delta) * (K2 - delta) + 4.0 * K1 * nb));
    detail::finite_or_throw(lp, "C11: lambda'");
    rep.add("lambda_prime", lp);
    rep.add("lhs", lp);
    rep.add("rhs", l1);
    rep.add("margin", l1 - lp);
    rep.holds = lp < l1;
    return rep;
  }
  if (id == "EEX") {
    const double alpha = detail::need(p, "alpha", id), beta = detail::need(p, "beta", id),
                 gamma = detail::need(p, "gamma", id);
    const double s = std::sqrt(1.0 + gamma * gamma);
    const double inner = (2.0 * beta - 1.0 - s) * (2.0 * beta - 1.0 - s) + 8.0 * alpha;
    const double lhs = s + 4.0 * beta + std::sqrt(inner);
    detail::finite_or_throw(lhs, "EEX: lhs");
    rep.add("lhs", lhs);
    rep.add("rhs", 7.0);
    rep.add("margin", 7.0 - lhs);
    rep.holds = lhs < 7.0;
    return rep;
  }
  if (id == "W1") return check_W1(p);
  throw InvalidInput("unknown condition id '" + id + "'");
}

struct AlphaLambda {
  double alpha = 0.0;
  double lambda_prime = 0.0;
};

/// Weight alpha and rate lambda' with lambda' alpha = alpha delta + K1 and
/// alpha |B| + K2 = lambda'.
inline AlphaLambda alpha_lambda_prime(double delta, double K1, double K2, double norm_B) {
  require(norm_B > 0.0, "alpha_lambda_prime: normB must be positive");
  require(delta >= 0.0 && K1 >= 0.0 && K2 >= 0.0, "alpha_lambda_prime: constants must be nonnegative");
  const double root = std::sqrt((K2 - delta) * (K2 - delta) + 4.0 * K1 * norm_B);
  return {(delta - K2 + root) / (2.0 * norm_B), 0.5 * (delta + K2 + root)};
}

// ---------------------------------------------------------------------------
// Parameters derived from a system

namespace detail {

/// Constants of the kinetic example when Z = b(y) - B^T x with affine b and B invertible.
inline std::optional<NamedParams> kinetic_params(const SystemSpec& spec) {
  if (spec.m() != spec.d() || spec.has_stiff_part()) return std::nullopt;
  if (min_singular_value(spec.B()) <= 1e-12 * std::max(1.0, spec.norm_B())) return std::nullopt;
  const LinearDrift& lf = spec.linear_form();
  if ((lf.G + spec.B().transpose()).norm() > 1e-12 * (1.0 + spec.norm_B())) return std::nullopt;
  const Matrix Binv = spec.B().inverse();
  NamedParams p;
  p["K"] = operator_norm(lf.H * Binv);
  p["beta"] = -lambda_max(Binv.transpose() * symmetric_part(lf.H) * Binv);
  p["gamma"] = lambda_max(Binv * symmetric_part(spec.A()) * Binv.transpose());
  p["normB"] = spec.norm_B();
  p["normBinvAstar"] = operator_norm(Binv * spec.A().transpose());
  return p;
}

}  // namespace detail

/// delta of the stiff example as chosen in its dissipativity estimate: (1 + sqrt(1 + gamma^2)) / 2 * lambda_1.
inline double galerkin_delta_formula(const GalerkinDrift& g) {
  return 0.5 * (1.0 + std::sqrt(1.0 + g.gamma * g.gamma)) * g.lambda1();
}

/// Smallest delta >= 0 with L1 - A >= lambda_1 - delta, from the spectrum of sym(L1 - A).
inline double galerkin_delta_sharp(const SystemSpec& spec) {
  const auto& g = std::get<GalerkinDrift>(spec.drift());
  const Matrix L1mA = Matrix(spec.stiff_x().asDiagonal()) - spec.A();
  return std::max(0.0, g.lambda1() - lambda_min(symmetric_part(L1mA)));
}

/// Every checkable hypothesis for one system, with witnesses.
inline std::vector<ConditionReport> conditions_for(const SystemSpec& spec, std::uint64_t seed, int r_points = 2001,
                                                   int sample_pairs = 1000, double sample_radius = 2.0, double t0 = 1.0) {
  std::vector<ConditionReport> out;
  ConditionReport a1 = kalman_rank(spec.A(), spec.B());
  a1.add("sigma_min_singular_value", spec.sigma_min_singular());
  a1.holds = a1.holds && spec.sigma_min_singular() > 0.0;
  out.push_back(a1);

  const GramianResult qw = gramian(spec.A(), spec.B(), t0, true);
  ConditionReport gram{"gramian_weighted"};
  gram.add("t0", t0);
  gram.add("min_gramian_eigenvalue", qw.min_eigenvalue);
  gram.add("nodes", qw.nodes);
  gram.holds = qw.min_eigenvalue > 0.0 && a1.holds;
  out.push_back(gram);

  const auto grid = admissible_r_grid(spec.norm_B(), r_points);
  out.push_back(check_A3_linear(spec, grid));
  out.push_back(check_A3_sampled(spec, sample_pairs, sample_radius, seed, grid));

  if (auto kp = detail::kinetic_params(spec)) {
    out.push_back(check_named_condition("C4", *kp));
  }
  if (const auto* c = std::get_if<ChainDrift>(&spec.drift())) {
    const double s = c->b.slope();
    out.push_back(check_named_condition("C5", {{"K", s}, {"beta", s}, {"gamma", c->gamma}}));
  }
  if (const auto* g = std::get_if<GalerkinDrift>(&spec.drift())) {
    out.push_back(check_named_condition("EEX", {{"alpha", g->alpha}, {"beta", g->beta}, {"gamma", g->gamma}}));
    NamedParams c11{{"delta", galerkin_delta_formula(*g)},
                    {"K1", spec.K1()},
                    {"K2", spec.K2()},
                    {"normB", spec.norm_B()},
                    {"lambda1", g->lambda1()}};
    ConditionReport formula = check_named_condition("C11", c11);
    formula.add("delta", c11["delta"]);
    out.push_back(formula);
    c11["delta"] = galerkin_delta_sharp(spec);
    ConditionReport sharp = check_named_condition("C11", c11);
    sharp.condition_id = "C11_sharp_delta";
    sharp.add("delta", c11["delta"]);
    out.push_back(sharp);

    ConditionReport b3{"B3"};
    const GramianResult qu = gramian(spec.A(), spec.B(), t0, false);
    b3.add("min_gramian_eigenvalue", qu.min_eigenvalue);
    b3.add("dissipativity_lambda_min", lambda_min(symmetric_part(Matrix(spec.stiff_x().asDiagonal()) - spec.A())));
    b3.holds = qu.min_eigenvalue > 0.0 && kalman_rank(spec.A(), spec.B()).holds;
    out.push_back(b3);
  }
  return out;
}

}  // namespace hyperkin
