#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hyperkin/conditions.hpp"
#include "hyperkin/coupling.hpp"
#include "hyperkin/linalg.hpp"
#include "hyperkin/model.hpp"
#include "hyperkin/parallel.hpp"
#include "hyperkin/rng.hpp"

namespace hyperkin {

struct EstimateReport {
  std::string name;
  double value = 0.0;
  double stderr_ = 0.0;
  std::int64_t n = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> meta;
};

// Stream tags, so that different estimators never share noise.
namespace tag {
inline constexpr std::uint64_t ergodic = 0x10;
inline constexpr std::uint64_t exp_moment = 0x20;
inline constexpr std::uint64_t semigroup = 0x30;
inline constexpr std::uint64_t outer = 0x40;
inline constexpr std::uint64_t inner = 0x50;
inline constexpr std::uint64_t harnack = 0x60;
}  // namespace tag

// ---------------------------------------------------------------------------
// Observables

enum class ObservableKind { coord_x, coord_y, quadratic, bounded_tanh, indicator_halfspace, constant };

/// Test functions f(x, y).
///   coord_x / coord_y: component `index`
///   quadratic: |x|^2 + |y|^2
///   bounded_tanh: shift + tanh(u_index / scale), u = (x, y) stacked
///   indicator_halfspace: 1{<normal, u> >= threshold}
///   constant: shift
struct Observable {
  ObservableKind kind = ObservableKind::coord_x;
  int index = 0;
  double scale = 1.0;
  double shift = 0.0;
  Vector normal;
  double threshold = 0.0;

  double operator()(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y) const {
    switch (kind) {
      case ObservableKind::coord_x: return x(index);
      case ObservableKind::coord_y: return y(index);
      case ObservableKind::quadratic: return x.squaredNorm() + y.squaredNorm();
      case ObservableKind::bounded_tanh: {
        const double u = index < x.size() ? x(index) : y(index - x.size());
        return shift + std::tanh(u / scale);
      }
      case ObservableKind::indicator_halfspace:
        return normal.head(x.size()).dot(x) + normal.tail(y.size()).dot(y) >= threshold ? 1.0 : 0.0;
      case ObservableKind::constant: return shift;
    }
    return 0.0;
  }
  double operator()(const StatePair& s) const { return (*this)(s.x, s.y); }

  bool bounded() const {
    return kind == ObservableKind::bounded_tanh || kind == ObservableKind::indicator_halfspace ||
           kind == ObservableKind::constant;
  }

  void validate(const SystemSpec& spec) const {
    switch (kind) {
      case ObservableKind::coord_x: require(index >= 0 && index < spec.m(), "observable index out of range"); break;
      case ObservableKind::coord_y: require(index >= 0 && index < spec.d(), "observable index out of range"); break;
      case ObservableKind::bounded_tanh:
        require(index >= 0 && index < spec.m() + spec.d(), "observable index out of range");
        require(scale > 0.0, "bounded_tanh scale must be positive");
        break;
      case ObservableKind::indicator_halfspace:
        require(normal.size() == spec.m() + spec.d(), "halfspace normal must have length m + d");
        break;
      default: break;
    }
  }

  static Observable coord_x(int i) { return {ObservableKind::coord_x, i}; }
  static Observable coord_y(int i) { return {ObservableKind::coord_y, i}; }
  static Observable quadratic() { return {ObservableKind::quadratic}; }
  static Observable tanh_of(int i, double scale, double shift = 0.0) {
    return {ObservableKind::bounded_tanh, i, scale, shift};
  }
  static Observable halfspace(Vector normal, double threshold) {
    Observable o{ObservableKind::indicator_halfspace};
    o.normal = std::move(normal);
    o.threshold = threshold;
    return o;
  }
  static Observable constant(double c) {
    Observable o{ObservableKind::constant};
    o.shift = c;
    return o;
  }
};

inline std::string observable_name(ObservableKind k) {
  switch (k) {
    case ObservableKind::coord_x: return "coord_x";
    case ObservableKind::coord_y: return "coord_y";
    case ObservableKind::quadratic: return "quadratic";
    case ObservableKind::bounded_tanh: return "bounded_tanh";
    case ObservableKind::indicator_halfspace: return "indicator_halfspace";
    case ObservableKind::constant: return "constant";
  }
  return "?";
}

/// f evaluated on each column of (X, Y).
inline void evaluate_columns(const Observable& f, const Matrix& X, const Matrix& Y, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j) out[static_cast<std::size_t>(j)] = f(X.col(j), Y.col(j));
}

// ---------------------------------------------------------------------------
// Linear-system oracles

inline bool is_hurwitz(const Matrix& M, double* max_real_part = nullptr) {
  const Eigen::VectorXcd ev = M.eigenvalues();
  double mr = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < ev.size(); ++i) mr = std::max(mr, ev(i).real());
  if (max_real_part) *max_real_part = mr;
  return mr < 0.0;
}

/// Noise input [0; sigma] of the stacked system.
inline Matrix noise_input(const SystemSpec& spec) {
  Matrix S = Matrix::Zero(spec.m() + spec.d(), spec.d());
  S.bottomRows(spec.d()) = spec.sigma();
  return S;
}

/// Solves M S + S M^T + Q = 0 by the Kronecker-product linear system.
inline Matrix solve_lyapunov(const Matrix& M, const Matrix& Q) {
  const Eigen::Index n = M.rows();
  const Matrix I = Matrix::Identity(n, n);
  Matrix K(n * n, n * n);
  // vec(M S) = (I kron M) vec S, vec(S M^T) = (M kron I) vec S
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) K.block(i * n, j * n, n, n) = I(i, j) * M + M(i, j) * I;
  const Vector q = Eigen::Map<const Vector>(Q.data(), n * n);
  const Vector s = K.fullPivLu().solve(-q);
  return symmetric_part(Eigen::Map<const Matrix>(s.data(), n, n));
}

/// Invariant covariance of the linear dynamics.
inline Matrix stationary_covariance_linear(const SystemSpec& spec) {
  const Matrix M = full_drift_matrix(spec);
  double mr = 0.0;
  if (!is_hurwitz(M, &mr))
    throw NumericalFailure("drift matrix is not Hurwitz (max real part " + std::to_string(mr) + ")");
  const Matrix S = noise_input(spec);
  return solve_lyapunov(M, S * S.transpose());
}

/// Invariant mean: solves M mu + (0; z0) = 0.
inline Vector stationary_mean_linear(const SystemSpec& spec) {
  const Matrix M = full_drift_matrix(spec);
  if (!is_hurwitz(M)) throw NumericalFailure("drift matrix is not Hurwitz");
  Vector c = Vector::Zero(spec.m() + spec.d());
  c.tail(spec.d()) = spec.linear_form().z0;
  return M.partialPivLu().solve(-c);
}

/// Covariance at time t of the linear dynamics started from a point.
inline Matrix transient_covariance_linear(const SystemSpec& spec, double t) {
  if (t == 0.0) return Matrix::Zero(spec.m() + spec.d(), spec.m() + spec.d());
  const Matrix M = full_drift_matrix(spec);
  const Matrix S = noise_input(spec);
  const Matrix Q = S * S.transpose();
  auto q = integrate_matrix([&](double s) -> Matrix {
    const Matrix E = expm(M * s);
    return E * Q * E.transpose();
  }, 0.0, t);
  return symmetric_part(q.value);
}

// ---------------------------------------------------------------------------
// Ergodic averages

struct ErgodicReport {
  Vector mean;
  Vector mean_stderr;
  Matrix covariance;
  Matrix covariance_stderr;
  std::vector<EstimateReport> entries;  // mean_i and cov_ij as reports
  bool stationary = true;               // batch second moments do not drift
  double drift_ratio = 1.0;             // late / early batch second moments
  std::int64_t samples = 0;
};

inline constexpr int kBatches = 20;

/// Time averages over [burn_in, T] of the state and its outer products,
/// pooled over independent chains started at x0. Standard errors by batch
/// means over 20 batches.
inline ErgodicReport ergodic_moments(const SystemSpec& spec, double dt, double T, double burn_in, std::uint64_t seed,
                                     int chains = 1, std::optional<StatePair> x0 = std::nullopt) {
  require(T > burn_in && burn_in >= 0.0, "ergodic_moments: need T > burn_in >= 0");
  require(chains >= 1, "ergodic_moments: chains must be >= 1");
  const int n_total = step_count(dt, T);
  const int n_burn = static_cast<int>(std::llround(burn_in / dt));
  const int n_keep = n_total - n_burn;
  require(n_keep >= kBatches, "ergodic_moments: fewer kept steps than batches");
  const StatePair start = x0.value_or(StatePair{Vector::Zero(spec.m()), Vector::Zero(spec.d())});
  check_dims(spec, start);
  const Eigen::Index D = spec.m() + spec.d();

  Matrix X = start.x.replicate(1, chains), Y = start.y.replicate(1, chains);
  Matrix zeta(spec.d(), chains), U(D, chains);
  std::vector<NormalStream> streams;
  streams.reserve(static_cast<std::size_t>(chains));
  for (int c = 0; c < chains; ++c) streams.emplace_back(StreamId{seed, static_cast<std::uint64_t>(c), tag::ergodic});
  BatchStepper stepper(spec, dt, default_scheme(spec));

  std::vector<Vector> bsum(kBatches, Vector::Zero(D));
  std::vector<Matrix> bsq(kBatches, Matrix::Zero(D, D));
  std::vector<std::int64_t> bcount(kBatches, 0);
  for (int k = 1; k <= n_total; ++k) {
    fill_normals(streams, zeta);
    stepper.step(X, Y, zeta);
    if (!X.allFinite() || !Y.allFinite()) throw NumericalFailure("non-finite state at step " + std::to_string(k));
    if (k <= n_burn) continue;
    const int b = static_cast<int>((static_cast<std::int64_t>(k - n_burn - 1) * kBatches) / n_keep);
    U.topRows(spec.m()) = X;
    U.bottomRows(spec.d()) = Y;
    bsum[static_cast<std::size_t>(b)] += U.rowwise().sum();
    bsq[static_cast<std::size_t>(b)].noalias() += U * U.transpose();
    bcount[static_cast<std::size_t>(b)] += chains;
  }

  std::int64_t total = 0;
  Vector sum = Vector::Zero(D);
  Matrix sq = Matrix::Zero(D, D);
  for (int b = 0; b < kBatches; ++b) {
    total += bcount[static_cast<std::size_t>(b)];
    sum += bsum[static_cast<std::size_t>(b)];
    sq += bsq[static_cast<std::size_t>(b)];
  }
  ErgodicReport rep;
  rep.samples = total;
  rep.mean = sum / static_cast<double>(total);
  rep.covariance = sq / static_cast<double>(total) - rep.mean * rep.mean.transpose();
  rep.mean_stderr = Vector::Zero(D);
  rep.covariance_stderr = Matrix::Zero(D, D);

  std::vector<double> tr(kBatches);
  std::vector<double> vals(kBatches);
  for (Eigen::Index i = 0; i < D; ++i) {
    for (int b = 0; b < kBatches; ++b)
      vals[static_cast<std::size_t>(b)] = bsum[static_cast<std::size_t>(b)](i) / bcount[static_cast<std::size_t>(b)];
    rep.mean_stderr(i) = mean_stderr(vals).stderr_;
    for (Eigen::Index j = 0; j < D; ++j) {
      for (int b = 0; b < kBatches; ++b) {
        const auto sb = static_cast<std::size_t>(b);
        const double n = static_cast<double>(bcount[sb]);
        vals[sb] = bsq[sb](i, j) / n - rep.mean(i) * rep.mean(j);
      }
      rep.covariance_stderr(i, j) = mean_stderr(vals).stderr_;
    }
  }
  for (int b = 0; b < kBatches; ++b)
    tr[static_cast<std::size_t>(b)] = bsq[static_cast<std::size_t>(b)].trace() / bcount[static_cast<std::size_t>(b)];
  const double early = pairwise_mean(std::span<const double>(tr).subspan(0, 5));
  const double late = pairwise_mean(std::span<const double>(tr).subspan(kBatches - 5, 5));
  rep.drift_ratio = early > 0.0 ? late / early : std::numeric_limits<double>::infinity();
  rep.stationary = rep.drift_ratio < 2.0 && rep.drift_ratio > 0.5;

  const std::map<std::string, double> meta{{"dt", dt}, {"T", T}, {"burn_in", burn_in}, {"chains", chains},
                                           {"batches", kBatches}};
  for (Eigen::Index i = 0; i < D; ++i)
    rep.entries.push_back({"mean_" + std::to_string(i), rep.mean(i), rep.mean_stderr(i), total, seed, meta});
  for (Eigen::Index i = 0; i < D; ++i)
    for (Eigen::Index j = 0; j < D; ++j)
      rep.entries.push_back({"cov_" + std::to_string(i) + "_" + std::to_string(j), rep.covariance(i, j),
                             rep.covariance_stderr(i, j), total, seed, meta});
  return rep;
}

// ---------------------------------------------------------------------------
// Exponential moments

struct ExpMomentCurve {
  std::vector<EstimateReport> checkpoints;
  bool bounded = true;    // final <= 2 * median of the curve
  bool diverged = false;  // estimator overflow or Gaussian threshold crossed
  double safe_epsilon = 0.0;
  double tail_value = 0.0;  // mean over the last quarter of checkpoints
  std::string notes;
};

inline constexpr int kCheckpoints = 20;

/// E exp(eps(|X_t|^2 + |Y_t|^2)) from the origin at 20 uniform checkpoints.
inline ExpMomentCurve exp_moment_curve(const SystemSpec& spec, double eps, double dt, double T, int n_paths,
                                       std::uint64_t seed) {
  require(eps >= 0.0 && std::isfinite(eps), "exp_moment: epsilon must be nonnegative");
  require(n_paths >= 2, "exp_moment: need at least two paths");
  const int n = step_count(dt, T);
  require(n % kCheckpoints == 0, "exp_moment: T / dt must be a multiple of 20");
  const int every = n / kCheckpoints;

  Matrix X = Matrix::Zero(spec.m(), n_paths), Y = Matrix::Zero(spec.d(), n_paths), zeta(spec.d(), n_paths);
  std::vector<NormalStream> streams;
  streams.reserve(static_cast<std::size_t>(n_paths));
  for (int p = 0; p < n_paths; ++p) streams.emplace_back(StreamId{seed, static_cast<std::uint64_t>(p), tag::exp_moment});
  BatchStepper stepper(spec, dt, default_scheme(spec));

  std::vector<std::vector<double>> radius_sq(kCheckpoints, std::vector<double>(static_cast<std::size_t>(n_paths)));
  std::vector<double> times(kCheckpoints);
  for (int k = 1; k <= n; ++k) {
    fill_normals(streams, zeta);
    stepper.step(X, Y, zeta);
    if (!X.allFinite() || !Y.allFinite()) throw NumericalFailure("non-finite state at step " + std::to_string(k));
    if (k % every == 0) {
      const int c = k / every - 1;
      times[static_cast<std::size_t>(c)] = k * dt;
      for (int p = 0; p < n_paths; ++p)
        radius_sq[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)] = X.col(p).squaredNorm() + Y.col(p).squaredNorm();
    }
  }

  // Gaussian threshold, exact for affine drifts: E e^{eps|u|^2} is finite iff 2 eps lambda_max(Cov_t) < 1.
  double s_max = 0.0;
  const bool gaussian = true;  // every drift variant is affine
  if (gaussian) {
    for (int c = 0; c < kCheckpoints; ++c) {
      const Matrix S = transient_covariance_linear(spec, times[static_cast<std::size_t>(c)]);
      s_max = std::max(s_max, lambda_max(S));
    }
  }

  auto estimate = [&](double e, int c) {
    std::vector<double> v(static_cast<std::size_t>(n_paths));
    for (int p = 0; p < n_paths; ++p)
      v[static_cast<std::size_t>(p)] = std::exp(e * radius_sq[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)]);
    return mean_stderr(v);
  };
  auto well_behaved = [&](double e) {
    if (2.0 * e * s_max >= 1.0) return false;
    for (int c = 0; c < kCheckpoints; ++c) {
      const auto ms = estimate(e, c);
      if (!std::isfinite(ms.mean) || !std::isfinite(ms.stderr_) || ms.stderr_ > 0.5 * ms.mean) return false;
    }
    return true;
  };

  ExpMomentCurve out;
  for (int c = 0; c < kCheckpoints; ++c) {
    const auto ms = estimate(eps, c);
    out.checkpoints.push_back({"exp_moment", ms.mean, ms.stderr_, n_paths, seed,
                               {{"t", times[static_cast<std::size_t>(c)]}, {"epsilon", eps}, {"dt", dt}, {"T", T}}});
  }
  out.diverged = !well_behaved(eps) && eps > 0.0;
  if (out.diverged) {
    double lo = 0.0, hi = eps;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      (well_behaved(mid) ? lo : hi) = mid;
    }
    out.safe_epsilon = lo;
    out.notes = "estimator unreliable at this epsilon; largest safe epsilon found by bisection";
  } else {
    out.safe_epsilon = eps;
  }
  std::vector<double> vals;
  for (const auto& r : out.checkpoints) vals.push_back(r.value);
  std::vector<double> sorted = vals;
  std::sort(sorted.begin(), sorted.end());
  const double median = 0.5 * (sorted[kCheckpoints / 2 - 1] + sorted[kCheckpoints / 2]);
  out.bounded = std::isfinite(vals.back()) && vals.back() <= 2.0 * median;
  out.tail_value = pairwise_mean(std::span<const double>(vals).subspan(kCheckpoints - kCheckpoints / 4));
  return out;
}

// ---------------------------------------------------------------------------
// Semigroup

/// f evaluated along `inner_n` paths from xi at each of the step indices in
/// `record_at`. Returns values[time][path].
inline std::vector<std::vector<double>> propagate_observable(const SystemSpec& spec, const Observable& f,
                                                             const StatePair& xi, double dt,
                                                             const std::vector<int>& record_at, int inner_n,
                                                             std::uint64_t seed, std::uint64_t index_base,
                                                             std::uint64_t stream_tag) {
  check_dims(spec, xi);
  std::vector<std::vector<double>> out(record_at.size());
  const int n_max = record_at.empty() ? 0 : *std::max_element(record_at.begin(), record_at.end());
  Matrix X = xi.x.replicate(1, inner_n), Y = xi.y.replicate(1, inner_n), zeta(spec.d(), inner_n);
  auto record = [&](int k) {
    for (std::size_t r = 0; r < record_at.size(); ++r)
      if (record_at[r] == k) evaluate_columns(f, X, Y, out[r]);
  };
  record(0);
  if (n_max == 0) return out;
  std::vector<NormalStream> streams;
  streams.reserve(static_cast<std::size_t>(inner_n));
  for (int p = 0; p < inner_n; ++p)
    streams.emplace_back(StreamId{seed, index_base + static_cast<std::uint64_t>(p), stream_tag});
  BatchStepper stepper(spec, dt, default_scheme(spec));
  for (int k = 1; k <= n_max; ++k) {
    fill_normals(streams, zeta);
    stepper.step(X, Y, zeta);
    if (!X.allFinite() || !Y.allFinite()) throw NumericalFailure("non-finite state at step " + std::to_string(k));
    record(k);
  }
  return out;
}

/// P_t f(xi) by averaging f over inner_n independent paths.
inline EstimateReport semigroup_apply(const SystemSpec& spec, const Observable& f, const StatePair& xi, double t,
                                      int inner_n, double dt, std::uint64_t seed) {
  require(inner_n >= 100, "semigroup_apply: inner_n must be >= 100");
  f.validate(spec);
  check_dims(spec, xi);
  EstimateReport r{"semigroup", 0.0, 0.0, inner_n, seed, {{"t", t}, {"dt", dt}, {"inner_n", inner_n}}};
  if (t == 0.0) {
    r.value = f(xi);
    return r;
  }
  const int n = step_count(dt, t, "t");
  const auto vals = propagate_observable(spec, f, xi, dt, {n}, inner_n, seed, 0, tag::semigroup);
  const auto ms = mean_stderr(vals[0]);
  r.value = ms.mean;
  r.stderr_ = ms.stderr_;
  return r;
}

// ---------------------------------------------------------------------------
// Decay fits

/// Draws n points from a thinned ergodic trajectory.
inline std::vector<StatePair> ergodic_sample(const SystemSpec& spec, int n, double dt, double burn_in, int thin,
                                             std::uint64_t seed) {
  require(n >= 1 && thin >= 1, "ergodic_sample: n and thin must be positive");
  const int n_burn = static_cast<int>(std::llround(burn_in / dt));
  const int total = n_burn + n * thin;
  std::vector<StatePair> out;
  out.reserve(static_cast<std::size_t>(n));
  integrate_visit(spec, {Vector::Zero(spec.m()), Vector::Zero(spec.d())}, dt, total, StreamId{seed, 0, tag::outer},
                  default_scheme(spec), [&](int k, const Vector& x, const Vector& y) {
                    if (k > n_burn && (k - n_burn) % thin == 0) out.push_back({x, y});
                  });
  return out;
}

enum class DecayMode { variance, entropy };

struct DecayPoint {
  double t = 0.0;
  double value = 0.0;   // V(t) or Ent(t), debiased
  double stderr_ = 0.0;
  double inner_bias = 0.0;
};

struct DecayFit {
  EstimateReport rate;       // lambda-hat with slope standard error
  EstimateReport prefactor;  // c-hat relative to the t = 0 value
  std::vector<DecayPoint> curve;
  double residual_rms = 0.0;
  bool residual_ok = false;
};

struct DecayOptions {
  DecayMode mode = DecayMode::variance;
  double burn_in = 20.0;
  int thin = 1000;
  double residual_threshold = 0.5;
  unsigned threads = 1;
};

/// Fits log V(t) = log c' - lambda t, V(t) = Var over the invariant law of P_t f,
/// by nested Monte Carlo: outer points from a thinned ergodic run, inner
/// averages for P_t f, inner variance subtracted. Entropy mode replaces V by
/// mu((P_t f) log P_t f) for f >= 0 normalised to mean 1.
inline DecayFit decay_fit(const SystemSpec& spec, const Observable& f, const std::vector<double>& t_grid, int outer_n,
                          int inner_n, double dt, std::uint64_t seed, const DecayOptions& opt = {}) {
  f.validate(spec);
  require(t_grid.size() >= 2, "decay_fit: need at least two grid times");
  require(outer_n >= 10 && inner_n >= 2, "decay_fit: outer_n >= 10 and inner_n >= 2 required");
  if (opt.mode == DecayMode::entropy)
    require(spec.m() + spec.d() <= 2, "decay_fit: entropy mode only for total dimension <= 2");
  std::vector<int> steps;
  for (double t : t_grid) {
    require(t >= 0.0, "decay_fit: grid times must be nonnegative");
    steps.push_back(t == 0.0 ? 0 : step_count(dt, t, "grid time"));
  }
  for (std::size_t i = 1; i < steps.size(); ++i) require(steps[i] > steps[i - 1], "decay_fit: grid must increase");

  const auto outer = ergodic_sample(spec, outer_n, dt, opt.burn_in, opt.thin, seed);
  const std::size_t G = t_grid.size();
  std::vector<std::vector<double>> means(G, std::vector<double>(static_cast<std::size_t>(outer_n)));
  std::vector<std::vector<double>> se2(G, std::vector<double>(static_cast<std::size_t>(outer_n)));

  parallel_for(static_cast<std::size_t>(outer_n), opt.threads, [&](std::size_t j) {
    const auto vals = propagate_observable(spec, f, outer[j], dt, steps, inner_n, seed,
                                           static_cast<std::uint64_t>(j) * static_cast<std::uint64_t>(inner_n), tag::inner);
    for (std::size_t g = 0; g < G; ++g) {
      const auto ms = mean_stderr(vals[g]);
      means[g][j] = ms.mean;
      se2[g][j] = ms.stderr_ * ms.stderr_;
    }
  });

  DecayFit fit;
  if (opt.mode == DecayMode::variance) {
    double spread0 = 0.0;
    {
      const auto ms = mean_stderr(means[0]);
      spread0 = ms.stderr_;
    }
    if (!(spread0 > 0.0)) throw InvalidInput("decay_fit: f is constant on the sample; a centred non-constant f is required");
    for (std::size_t g = 0; g < G; ++g) {
      const auto ms = mean_stderr(means[g]);
      const double var = ms.stderr_ * ms.stderr_ * outer_n;  // sample variance
      const double bias = pairwise_mean(se2[g]);
      std::vector<double> dev(static_cast<std::size_t>(outer_n));
      for (int j = 0; j < outer_n; ++j) dev[static_cast<std::size_t>(j)] = (means[g][j] - ms.mean) * (means[g][j] - ms.mean);
      const auto dms = mean_stderr(dev);
      fit.curve.push_back({t_grid[g], var - bias, dms.stderr_, bias});
    }
  } else {
    // Normalising by the sample mean at each t (mu(P_t f) = mu(f) by invariance)
    // removes the first-order term of x log x, leaving the entropy itself.
    for (std::size_t g = 0; g < G; ++g) {
      const double norm = pairwise_mean(means[g]);
      if (!(norm > 0.0)) throw InvalidInput("decay_fit: entropy mode needs f >= 0 with positive mean");
      std::vector<double> ent(static_cast<std::size_t>(outer_n)), bias(static_cast<std::size_t>(outer_n));
      for (int j = 0; j < outer_n; ++j) {
        const auto sj = static_cast<std::size_t>(j);
        if (means[g][j] < 0.0) throw InvalidInput("decay_fit: entropy mode needs f >= 0");
        const double p = std::max(means[g][j] / norm, 1e-12);
        ent[sj] = p * std::log(p);
        bias[sj] = 0.5 * se2[g][j] / (norm * norm) / p;  // second-order Jensen bias of p log p
      }
      const auto ms = mean_stderr(ent);
      const double b = pairwise_mean(bias);
      fit.curve.push_back({t_grid[g], ms.mean - b, ms.stderr_, b});
    }
  }

  for (const auto& p : fit.curve)
    if (!(p.value > 0.0))
      throw NumericalFailure("decay_fit: estimate " + std::to_string(p.value) + " <= 0 at t = " + std::to_string(p.t) +
                             " (inner noise dominates)");

  // Least squares of log value on t.
  const double n = static_cast<double>(G);
  double st = 0, sl = 0, stt = 0, stl = 0;
  for (const auto& p : fit.curve) {
    const double l = std::log(p.value);
    st += p.t;
    sl += l;
    stt += p.t * p.t;
    stl += p.t * l;
  }
  const double denom = n * stt - st * st;
  const double slope = (n * stl - st * sl) / denom;
  const double intercept = (sl - slope * st) / n;
  double rss = 0.0;
  for (const auto& p : fit.curve) {
    const double res = std::log(p.value) - (intercept + slope * p.t);
    rss += res * res;
  }
  fit.residual_rms = std::sqrt(rss / n);
  const double slope_se = G > 2 ? std::sqrt(rss / (n - 2.0) / (stt - st * st / n)) : 0.0;
  fit.residual_ok = fit.residual_rms < opt.residual_threshold;

  const std::map<std::string, double> meta{{"dt", dt},
                                           {"outer_n", outer_n},
                                           {"inner_n", inner_n},
                                           {"burn_in", opt.burn_in},
                                           {"thin", opt.thin},
                                           {"t_min", t_grid.front()},
                                           {"t_max", t_grid.back()},
                                           {"residual_rms", fit.residual_rms}};
  fit.rate = {opt.mode == DecayMode::variance ? "variance_rate" : "entropy_rate", -slope, slope_se, outer_n, seed, meta};
  fit.prefactor = {"prefactor", std::exp(intercept) / fit.curve.front().value, 0.0, outer_n, seed, meta};
  return fit;
}

// ---------------------------------------------------------------------------
// Harnack audit

struct HarnackReport {
  EstimateReport L;   // (mean R f)^2
  EstimateReport R2;  // mean R^2
  EstimateReport F2;  // mean f^2
  EstimateReport mean_weight;
  double combined_se = 0.0;
  bool chain_holds = false;
  double ess = 0.0;
  double gap = 0.0;
  double c0 = 0.0;                    // log R2 / |xi - eta|^2
  double exact_log_r2 = 0.0;          // variance of log R, so E R^2 = exp of it
  double max_terminal_gap = 0.0;
};

/// Runs control-coupling transcripts and audits
/// (P f(xi))^2 <= E R^2 * P f^2(eta) through its sample Cauchy-Schwarz chain.
inline HarnackReport harnack_audit(const SystemSpec& spec, const Observable& f, const StatePair& xi,
                                   const StatePair& eta, double t0, int n_paths, double dt, std::uint64_t seed,
                                   unsigned threads = 1) {
  require(f.bounded(), "harnack_audit: f must be globally bounded");
  f.validate(spec);
  require(n_paths >= 2, "harnack_audit: need at least two paths");
  const CouplingPlan plan(spec, xi, eta, t0, dt);
  std::vector<double> rf(static_cast<std::size_t>(n_paths)), r2(rf.size()), f2(rf.size()), w(rf.size()), gaps(rf.size());
  parallel_for(rf.size(), threads, [&](std::size_t i) {
    const CouplingOutcome o = plan.run(StreamId{seed, i, tag::harnack});
    const double R = std::exp(o.log_weight);
    const double fv = f(o.terminal);
    w[i] = R;
    rf[i] = R * fv;
    r2[i] = R * R;
    f2[i] = fv * fv;
    gaps[i] = o.terminal_gap;
  });
  const auto mrf = mean_stderr(rf), mr2 = mean_stderr(r2), mf2 = mean_stderr(f2), mw = mean_stderr(w);
  HarnackReport rep;
  const std::map<std::string, double> meta{{"t0", t0}, {"dt", dt}, {"n_paths", n_paths}};
  rep.L = {"L_hat", mrf.mean * mrf.mean, 2.0 * std::abs(mrf.mean) * mrf.stderr_, n_paths, seed, meta};
  rep.R2 = {"R2_hat", mr2.mean, mr2.stderr_, n_paths, seed, meta};
  rep.F2 = {"F2_hat", mf2.mean, mf2.stderr_, n_paths, seed, meta};
  rep.mean_weight = {"mean_weight", mw.mean, mw.stderr_, n_paths, seed, meta};
  const double rhs = mr2.mean * mf2.mean;
  const double rhs_se = std::hypot(mf2.mean * mr2.stderr_, mr2.mean * mf2.stderr_);
  rep.combined_se = std::hypot(rep.L.stderr_, rhs_se);
  rep.chain_holds = rep.L.value <= rhs + 3.0 * rep.combined_se;
  const double sw = pairwise_sum(w), sw2 = pairwise_sum(r2);
  rep.ess = sw * sw / sw2;
  if (rep.ess < 0.01 * n_paths)
    throw NumericalFailure("harnack_audit: weight degeneracy (effective sample size " + std::to_string(rep.ess) + ")");
  rep.gap = (eta - xi).norm();
  rep.c0 = rep.gap > 0.0 ? std::log(mr2.mean) / (rep.gap * rep.gap) : 0.0;
  rep.exact_log_r2 = plan.log_weight_variance();
  rep.max_terminal_gap = *std::max_element(gaps.begin(), gaps.end());
  return rep;
}

struct HarnackScan {
  std::vector<HarnackReport> runs;
  double c0_min = 0.0, c0_max = 0.0;
  bool all_chains_hold = false;
  bool stable = false;  // c0 within a factor 2 across gaps
};

/// Harnack audits at xi and eta = xi + gap * direction for each gap.
inline HarnackScan harnack_gap_scan(const SystemSpec& spec, const Observable& f, const StatePair& xi,
                                    const StatePair& direction, const std::vector<double>& gaps, double t0,
                                    int n_paths, double dt, std::uint64_t seed, unsigned threads = 1) {
  require(!gaps.empty(), "harnack_gap_scan: empty gap list");
  const double dn = direction.norm();
  require(dn > 0.0, "harnack_gap_scan: direction must be nonzero");
  HarnackScan scan;
  scan.all_chains_hold = true;
  scan.c0_min = std::numeric_limits<double>::infinity();
  scan.c0_max = -std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < gaps.size(); ++g) {
    require(gaps[g] > 0.0, "harnack_gap_scan: gaps must be positive");
    const StatePair eta{xi.x + (gaps[g] / dn) * direction.x, xi.y + (gaps[g] / dn) * direction.y};
    HarnackReport r = harnack_audit(spec, f, xi, eta, t0, n_paths, dt, seed + g, threads);
    scan.all_chains_hold = scan.all_chains_hold && r.chain_holds;
    scan.c0_min = std::min(scan.c0_min, r.c0);
    scan.c0_max = std::max(scan.c0_max, r.c0);
    scan.runs.push_back(std::move(r));
  }
  scan.stable = scan.c0_min > 0.0 && scan.c0_max < 2.0 * scan.c0_min;
  return scan;
}

}  // namespace hyperkin
