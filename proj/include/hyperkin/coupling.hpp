#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hyperkin/conditions.hpp"
#include "hyperkin/linalg.hpp"
#include "hyperkin/model.hpp"
#include "hyperkin/rng.hpp"

namespace hyperkin {

struct PathSample {
  std::vector<double> grid;
  std::vector<StatePair> states;
  StreamId seed;
};

enum class Scheme {
  euler_maruyama,         // explicit step of the full drift, stiff part included
  exponential_splitting,  // exact e^{-L dt} factor, then explicit step of the remainder
};

inline Scheme default_scheme(const SystemSpec& spec) {
  return spec.has_stiff_part() ? Scheme::exponential_splitting : Scheme::euler_maruyama;
}

/// Number of uniform steps of size dt covering [0, T]; T must be a multiple of dt.
inline int step_count(double dt, double T, const std::string& what = "T") {
  require(std::isfinite(dt) && dt > 0.0, "dt must be positive");
  require(std::isfinite(T) && T >= dt, what + " must be at least dt");
  const double ratio = T / dt;
  const double n = std::round(ratio);
  require(std::abs(ratio - n) <= 1e-9 * std::max(1.0, ratio), "dt must divide " + what);
  require(n < 2e9, "too many steps");
  return static_cast<int>(n);
}

/// In-place single step of the discretized system. Holds scratch buffers, so
/// one instance per worker.
class Stepper {
 public:
  Stepper(const SystemSpec& spec, double dt, Scheme scheme)
      : dt_(dt), scheme_(scheme), B_(spec.B()), G_(spec.linear_form().G), z0_(spec.linear_form().z0) {
    require(dt > 0.0, "dt must be positive");
    if (scheme == Scheme::exponential_splitting) {
      A_ = spec.A();
      H_ = spec.linear_form().H;
      decay_x_ = (-dt * spec.stiff_x().array()).exp().matrix();
      decay_y_ = (-dt * spec.stiff_y().array()).exp().matrix();
    } else {
      A_ = spec.effective_A();
      H_ = spec.linear_form().H - Matrix(spec.stiff_y().asDiagonal());
    }
    noise_ = spec.sigma() * std::sqrt(dt);
    split_ = scheme == Scheme::exponential_splitting && spec.has_stiff_part();
    tx_.resize(spec.m());
    ty_.resize(spec.d());
    tn_.resize(spec.d());
  }

  double dt() const { return dt_; }
  Scheme scheme() const { return scheme_; }

  /// Advances (x, y) by one step with standard-normal innovation zeta; extra_y
  /// is added to the y-drift (a control correction), may be null.
  void step(Vector& x, Vector& y, const Vector& zeta, const Vector* extra_y = nullptr) {
    if (split_) {
      x.array() *= decay_x_.array();
      y.array() *= decay_y_.array();
    }
    drift_into(x, y);
    if (extra_y) ty_ += *extra_y;
    tn_.noalias() = noise_ * zeta;
    x.noalias() += dt_ * tx_;
    y.noalias() += dt_ * ty_;
    y += tn_;
  }

  /// The drift used by the explicit part, evaluated into the scratch buffers.
  void drift_into(const Vector& x, const Vector& y) {
    tx_.noalias() = A_ * x;
    tx_.noalias() += B_ * y;
    ty_.noalias() = G_ * x;
    ty_.noalias() += H_ * y;
    ty_ += z0_;
  }

 private:
  double dt_;
  Scheme scheme_;
  bool split_ = false;
  Matrix A_, B_, G_, H_, noise_;
  Vector z0_, decay_x_, decay_y_;
  Vector tx_, ty_, tn_;
};

namespace detail {

inline void fill_normals(NormalStream& rng, Vector& zeta) {
  for (Eigen::Index i = 0; i < zeta.size(); ++i) zeta(i) = rng();
}

inline void check_finite_state(const Vector& x, const Vector& y, int step) {
  if (!x.allFinite() || !y.allFinite())
    throw NumericalFailure("non-finite state at step " + std::to_string(step));
}

}  // namespace detail

/// Advances many independent paths at once, one path per column. Each column
/// draws from its own stream, so a column's trajectory depends only on its seed.
class BatchStepper {
 public:
  BatchStepper(const SystemSpec& spec, double dt, Scheme scheme)
      : dt_(dt), B_(spec.B()), G_(spec.linear_form().G), z0_(spec.linear_form().z0) {
    require(dt > 0.0, "dt must be positive");
    split_ = scheme == Scheme::exponential_splitting && spec.has_stiff_part();
    if (split_) {
      A_ = spec.A();
      H_ = spec.linear_form().H;
      decay_x_ = (-dt * spec.stiff_x().array()).exp().matrix();
      decay_y_ = (-dt * spec.stiff_y().array()).exp().matrix();
    } else {
      A_ = spec.effective_A();
      H_ = spec.linear_form().H - Matrix(spec.stiff_y().asDiagonal());
    }
    noise_ = spec.sigma() * std::sqrt(dt);
    has_offset_ = z0_.size() > 0 && z0_.cwiseAbs().maxCoeff() > 0.0;
  }

  void step(Matrix& X, Matrix& Y, const Matrix& zeta) {
    if (split_) {
      X = decay_x_.asDiagonal() * X;
      Y = decay_y_.asDiagonal() * Y;
    }
    tx_.noalias() = A_ * X;
    tx_.noalias() += B_ * Y;
    ty_.noalias() = G_ * X;
    ty_.noalias() += H_ * Y;
    if (has_offset_) ty_.colwise() += z0_;
    X.noalias() += dt_ * tx_;
    Y.noalias() += dt_ * ty_;
    Y.noalias() += noise_ * zeta;
  }

 private:
  double dt_;
  bool split_ = false, has_offset_ = false;
  Matrix A_, B_, G_, H_, noise_;
  Vector z0_, decay_x_, decay_y_;
  Matrix tx_, ty_;
};

/// One normal stream per column.
inline void fill_normals(std::vector<NormalStream>& streams, Matrix& zeta) {
  for (Eigen::Index j = 0; j < zeta.cols(); ++j) {
    NormalStream& s = streams[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 0; i < zeta.rows(); ++i) zeta(i, j) = s();
  }
}

/// Calls visit(k, x, y) at every grid index k = 0..n_steps, without storing the path.
template <class Visit>
void integrate_visit(const SystemSpec& spec, const StatePair& xi0, double dt, int n_steps, const StreamId& seed,
                     Scheme scheme, Visit&& visit) {
  check_dims(spec, xi0);
  require(xi0.finite(), "initial state must be finite");
  Stepper stepper(spec, dt, scheme);
  NormalStream rng(seed);
  Vector x = xi0.x, y = xi0.y, zeta(spec.d());
  visit(0, static_cast<const Vector&>(x), static_cast<const Vector&>(y));
  for (int k = 1; k <= n_steps; ++k) {
    detail::fill_normals(rng, zeta);
    stepper.step(x, y, zeta);
    detail::check_finite_state(x, y, k);
    visit(k, static_cast<const Vector&>(x), static_cast<const Vector&>(y));
  }
}

inline PathSample integrate_path(const SystemSpec& spec, const StatePair& xi0, double dt, double T,
                                 const StreamId& seed, Scheme scheme) {
  const int n = step_count(dt, T);
  PathSample p;
  p.seed = seed;
  p.grid.reserve(static_cast<std::size_t>(n) + 1);
  p.states.reserve(static_cast<std::size_t>(n) + 1);
  integrate_visit(spec, xi0, dt, n, seed, scheme, [&](int k, const Vector& x, const Vector& y) {
    p.grid.push_back(k * dt);
    p.states.push_back({x, y});
  });
  return p;
}

inline PathSample integrate_path(const SystemSpec& spec, const StatePair& xi0, double dt, double T,
                                 const StreamId& seed) {
  return integrate_path(spec, xi0, dt, T, seed, default_scheme(spec));
}

/// Two solutions driven by identical Gaussian increments.
inline std::pair<PathSample, PathSample> simulate_sync_pair(const SystemSpec& spec, const StatePair& xi0,
                                                            const StatePair& eta0, double dt, double T,
                                                            const StreamId& seed, Scheme scheme) {
  return {integrate_path(spec, xi0, dt, T, seed, scheme), integrate_path(spec, eta0, dt, T, seed, scheme)};
}

inline std::pair<PathSample, PathSample> simulate_sync_pair(const SystemSpec& spec, const StatePair& xi0,
                                                            const StatePair& eta0, double dt, double T,
                                                            const StreamId& seed) {
  return simulate_sync_pair(spec, xi0, eta0, dt, T, seed, default_scheme(spec));
}

enum class FlowScheme { exact, euler };

/// Deterministic difference dynamics of two synchronously coupled solutions
/// (the noise and the affine offset cancel). `exact` propagates by e^{M dt}.
inline std::vector<StatePair> difference_flow(const SystemSpec& spec, const StatePair& delta0, double dt, double T,
                                              FlowScheme scheme = FlowScheme::exact) {
  check_dims(spec, delta0);
  const int n = step_count(dt, T);
  const Matrix M = full_drift_matrix(spec);
  const Matrix step = scheme == FlowScheme::exact ? expm(M * dt)
                                                  : Matrix(Matrix::Identity(M.rows(), M.cols()) + dt * M);
  std::vector<StatePair> out;
  out.reserve(static_cast<std::size_t>(n) + 1);
  Vector u = delta0.stacked();
  out.push_back(delta0);
  for (int k = 1; k <= n; ++k) {
    u = step * u;
    if (!u.allFinite()) throw NumericalFailure("non-finite difference at step " + std::to_string(k));
    out.push_back(StatePair::split(u, spec.m()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contraction functional

struct PhiValue {
  double value = 0.0;
  double C = 0.0;  // (1/C)|delta|^2 <= Phi <= C|delta|^2
  double lambda_min = 0.0;
  double lambda_max = 0.0;
};

/// Phi = 1/2|dx|^2 + 1/2|dy|^2 + r<dx, B dy>.
inline PhiValue phi_functional(const Vector& dx, const Vector& dy, double r, const Matrix& B) {
  require(dx.size() == B.rows() && dy.size() == B.cols(), "phi_functional: dimension mismatch");
  const double nb = operator_norm(B);
  require(std::abs(r) * nb < 1.0, "phi_functional: |r| must be below 1/|B|");
  const Matrix half = 0.5 * r_weight_matrix(B, r);
  const Vector ev = symmetric_eigenvalues(half);
  PhiValue out;
  out.lambda_min = ev.minCoeff();
  out.lambda_max = ev.maxCoeff();
  out.C = std::max(out.lambda_max, 1.0 / out.lambda_min);
  out.value = 0.5 * dx.squaredNorm() + 0.5 * dy.squaredNorm() + r * dx.dot(B * dy);
  return out;
}

// ---------------------------------------------------------------------------
// Exact-meeting control

struct ControlSolution {
  Vector b;
  Matrix gramian;  // weighted Gramian at t0
  Vector rhs;
  int nodes = 0;
};

/// Solves Q b = e^{t0 A}(X0 - Xbar0) + (int_0^t0 ((t0-s)/t0) e^{A(t0-s)} ds) B (Y0 - Ybar0),
/// with (Xbar, Ybar) started at xi and (X, Y) at eta. A here is the full
/// linear X-drift, including any stiff part.
inline ControlSolution control_solution(const SystemSpec& spec, const StatePair& xi, const StatePair& eta, double t0) {
  check_dims(spec, xi);
  check_dims(spec, eta);
  require(std::isfinite(t0) && t0 > 0.0, "control: t0 must be positive");
  const Matrix A = spec.effective_A();
  const ConditionReport rank = kalman_rank(A, spec.B());
  if (!rank.holds) throw NumericalFailure("control: rank condition fails, weighted Gramian is singular");
  const GramianResult q = gramian(A, spec.B(), t0, true);
  const StatePair delta = eta - xi;
  const auto inner = integrate_matrix([&](double s) -> Matrix { return ((t0 - s) / t0) * expm(A * (t0 - s)); }, 0.0, t0);
  ControlSolution out;
  out.gramian = q.value;
  out.rhs = expm(A * t0) * delta.x + inner.value * (spec.B() * delta.y);
  out.nodes = q.nodes + inner.nodes;
  Eigen::LLT<Matrix> llt(q.value);
  if (llt.info() != Eigen::Success || q.min_eigenvalue <= 0.0)
    throw NumericalFailure("control: weighted Gramian is not positive definite");
  out.b = llt.solve(out.rhs);
  if (!out.b.allFinite()) throw NumericalFailure("control: non-finite solution");
  return out;
}

inline Vector control_vector(const SystemSpec& spec, const StatePair& xi, const StatePair& eta, double t0) {
  return control_solution(spec, xi, eta, t0).b;
}

/// (X_t - Xbar_t, Y_t - Ybar_t) of the controlled pair in closed form, 0 <= t <= t0.
inline StatePair closed_form_difference(const SystemSpec& spec, const StatePair& xi, const StatePair& eta, double t0,
                                        const Vector& b, double t) {
  check_dims(spec, xi);
  check_dims(spec, eta);
  require(b.size() == spec.m(), "closed_form_difference: b must have length m");
  require(t >= 0.0 && t <= t0, "closed_form_difference: t must lie in [0, t0]");
  const Matrix A = spec.effective_A();
  const Matrix& B = spec.B();
  const StatePair d0 = eta - xi;
  auto dy_at = [&](double s) -> Vector {
    return ((t0 - s) / t0) * d0.y - s * (t0 - s) * (B.transpose() * (expm(A.transpose() * (t0 - s)) * b));
  };
  StatePair out;
  out.y = dy_at(t);
  if (t == 0.0) {
    out.x = d0.x;
    return out;
  }
  const auto conv = integrate_matrix([&](double s) -> Matrix { return expm(A * (t - s)) * (B * dy_at(s)); }, 0.0, t);
  out.x = expm(A * t) * d0.x + conv.value;
  return out;
}

// ---------------------------------------------------------------------------
// Control coupling with Girsanov weight

struct CouplingTranscript {
  double t0 = 0.0;
  Vector control_b;
  PathSample path;      // (X, Y) from eta
  PathSample bar_path;  // (Xbar, Ybar) from xi, modified drift
  std::vector<Vector> psi;
  double log_weight = 0.0;
  double terminal_gap = 0.0;
};

struct CouplingOutcome {
  double log_weight = 0.0;
  double terminal_gap = 0.0;
  double max_psi_sq = 0.0;
  StatePair terminal;      // (X, Y) at t0
  StatePair bar_terminal;  // (Xbar, Ybar) at t0
};

/// Everything about a control coupling that does not depend on the noise:
/// the control b and the deterministic part of the Ybar drift correction,
///   (Y0 - Ybar0)/t0 + (t0 - 2t) B^T e^{(t0-t)A^T} b - t (t0 - t) B^T A^T e^{(t0-t)A^T} b,
/// at every left endpoint.
class CouplingPlan {
 public:
  CouplingPlan(const SystemSpec& spec, const StatePair& xi, const StatePair& eta, double t0, double dt)
      : spec_(spec), xi_(xi), eta_(eta), t0_(t0), dt_(dt) {
    n_steps_ = step_count(dt, t0, "t0");
    require(n_steps_ >= 10, "t0 must be at least 10 dt");
    const ControlSolution sol = control_solution(spec, xi, eta, t0);
    b_ = sol.b;
    const Matrix A = spec.effective_A();
    const Matrix Bt = spec.B().transpose();
    const Matrix BtAt = Bt * A.transpose();
    const Matrix back = expm(A.transpose() * dt);
    const Vector dy0_over_t0 = (eta.y - xi.y) / t0;
    correction_.assign(static_cast<std::size_t>(n_steps_), Vector());
    Vector w = b_;  // e^{(t0 - t_k) A^T} b, built backwards from t_n = t0
    for (int k = n_steps_ - 1; k >= 0; --k) {
      w = back * w;
      const double t = k * dt;
      correction_[static_cast<std::size_t>(k)] = dy0_over_t0 + (t0 - 2.0 * t) * (Bt * w) - t * (t0 - t) * (BtAt * w);
    }
  }

  const SystemSpec& spec() const { return spec_; }
  const StatePair& xi() const { return xi_; }
  const StatePair& eta() const { return eta_; }
  double t0() const { return t0_; }
  double dt() const { return dt_; }
  int n_steps() const { return n_steps_; }
  const Vector& b() const { return b_; }
  const std::vector<Vector>& correction() const { return correction_; }

  /// One realization. When `record` is given, full paths and psi are stored.
  CouplingOutcome run(const StreamId& seed, CouplingTranscript* record = nullptr) const {
    const SystemSpec& spec = spec_;
    Stepper main(spec, dt_, Scheme::euler_maruyama);
    Stepper bar(spec, dt_, Scheme::euler_maruyama);
    NormalStream rng(seed);
    const LinearDrift& lf = spec.linear_form();
    const Matrix He = lf.H - Matrix(spec.stiff_y().asDiagonal());
    const Matrix& sinv = spec.sigma_inv();
    const double sqdt = std::sqrt(dt_);

    Vector x = eta_.x, y = eta_.y, xb = xi_.x, yb = xi_.y;
    Vector zeta(spec.d()), psi(spec.d()), extra(spec.d()), u(spec.d());

    if (record) {
      record->t0 = t0_;
      record->control_b = b_;
      for (PathSample* p : {&record->path, &record->bar_path}) {
        p->seed = seed;
        p->grid.clear();
        p->states.clear();
        p->grid.reserve(static_cast<std::size_t>(n_steps_) + 1);
        p->states.reserve(static_cast<std::size_t>(n_steps_) + 1);
      }
      record->psi.clear();
      record->psi.reserve(static_cast<std::size_t>(n_steps_));
      record->path.grid.push_back(0.0);
      record->bar_path.grid.push_back(0.0);
      record->path.states.push_back({x, y});
      record->bar_path.states.push_back({xb, yb});
    }

    CouplingOutcome out;
    double stoch = 0.0, quad = 0.0;
    for (int k = 0; k < n_steps_; ++k) {
      const Vector& c = correction_[static_cast<std::size_t>(k)];
      // psi_k = Z(X, Y) - Z(Xbar, Ybar) + c_k, full linear y-drift.
      psi.noalias() = lf.G * (x - xb);
      psi.noalias() += He * (y - yb);
      psi += c;
      u.noalias() = sinv * psi;
      detail::fill_normals(rng, zeta);
      stoch += u.dot(zeta) * sqdt;
      quad += u.squaredNorm() * dt_;
      out.max_psi_sq = std::max(out.max_psi_sq, psi.squaredNorm());
      if (record) record->psi.push_back(psi);

      // Ybar drift = Z(X, Y) + c_k = Z(Xbar, Ybar) + psi.
      extra = psi;
      main.step(x, y, zeta);
      bar.step(xb, yb, zeta, &extra);
      detail::check_finite_state(x, y, k + 1);
      detail::check_finite_state(xb, yb, k + 1);
      if (record) {
        const double t = (k + 1) * dt_;
        record->path.grid.push_back(t);
        record->bar_path.grid.push_back(t);
        record->path.states.push_back({x, y});
        record->bar_path.states.push_back({xb, yb});
      }
    }
    out.log_weight = -stoch - 0.5 * quad;
    if (!std::isfinite(out.log_weight)) throw NumericalFailure("non-finite log weight");
    out.terminal_gap = (x - xb).norm() + (y - yb).norm();
    out.terminal = {x, y};
    out.bar_terminal = {xb, yb};
    if (record) {
      record->log_weight = out.log_weight;
      record->terminal_gap = out.terminal_gap;
    }
    return out;
  }

  /// Sum of |sigma^{-1} psi_k|^2 dt, deterministic for affine drifts; log R is
  /// then Gaussian with this variance, so E R^2 = exp of it.
  double log_weight_variance() const {
    const SystemSpec& spec = spec_;
    const LinearDrift& lf = spec.linear_form();
    const Matrix He = lf.H - Matrix(spec.stiff_y().asDiagonal());
    const Matrix Ae = spec.effective_A();
    Vector dx = eta_.x - xi_.x, dy = eta_.y - xi_.y;
    double v = 0.0;
    for (int k = 0; k < n_steps_; ++k) {
      const Vector& c = correction_[static_cast<std::size_t>(k)];
      const Vector psi = lf.G * dx + He * dy + c;
      v += (spec.sigma_inv() * psi).squaredNorm() * dt_;
      const Vector ndx = dx + dt_ * (Ae * dx + spec.B() * dy);
      dy = dy - dt_ * c;
      dx = ndx;
    }
    return v;
  }

 private:
  SystemSpec spec_;
  StatePair xi_, eta_;
  double t0_, dt_;
  int n_steps_ = 0;
  Vector b_;
  std::vector<Vector> correction_;
};

inline CouplingTranscript simulate_control_coupling(const SystemSpec& spec, const StatePair& xi, const StatePair& eta,
                                                    double t0, double dt, const StreamId& seed) {
  CouplingPlan plan(spec, xi, eta, t0, dt);
  CouplingTranscript tr;
  plan.run(seed, &tr);
  return tr;
}

}  // namespace hyperkin
