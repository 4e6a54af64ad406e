#include <gtest/gtest.h>

#include <random>

#include "hyperkin/coupling.hpp"
#include "hyperkin/parallel.hpp"
#include "oracles.hpp"

using namespace hyperkin;

namespace {

Matrix randm(std::mt19937_64& g, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = nd(g);
  return m;
}

StatePair sp(double x, double y) { return {Vector::Constant(1, x), Vector::Constant(1, y)}; }

SystemSpec kfp() { return build_preset("kinetic_fp"); }

SystemSpec kfp_with_sigma(double s) {
  const Matrix I = Matrix::Identity(1, 1);
  return SystemSpec::create(Matrix::Zero(1, 1), I, s * I, LinearDrift{-I, -I, Vector::Zero(1)});
}

}  // namespace

TEST(IntegratePath, PureNoiseIsBrownian) {
  const Matrix Z2 = Matrix::Zero(2, 2);
  const SystemSpec s =
      SystemSpec::create(Z2, Z2, Matrix::Identity(2, 2), LinearDrift{Z2, Z2, Vector::Zero(2)});
  const double dt = 1e-3;
  const auto p = integrate_path(s, {Vector::Zero(2), Vector::Zero(2)}, dt, 20.0, StreamId{3, 0, 0});
  ASSERT_EQ(p.states.size(), p.grid.size());
  ASSERT_EQ(p.grid.size(), 20001u);
  double sq = 0.0;
  for (std::size_t k = 0; k < p.states.size(); ++k) {
    ASSERT_EQ(p.states[k].x.norm(), 0.0);
    if (k > 0) sq += (p.states[k].y - p.states[k - 1].y).squaredNorm();
  }
  const double per_coord = sq / (2.0 * 20000.0);
  EXPECT_NEAR(per_coord / dt, 1.0, 0.03);
}

TEST(IntegratePath, NoiselessLimitMatchesExponential) {
  const SystemSpec s = kfp_with_sigma(1e-15);
  const Matrix M = full_drift_matrix(s);
  for (double dt : {1e-2, 1e-3}) {
    const auto p = integrate_path(s, sp(1.0, -0.5), dt, 5.0, StreamId{1, 0, 0});
    double err = 0.0;
    for (std::size_t k = 0; k < p.states.size(); ++k) {
      Vector u0(2);
      u0 << 1.0, -0.5;
      const Vector exact = oracle::taylor_expm(M * p.grid[k]) * u0;
      err = std::max(err, (p.states[k].stacked() - exact).norm());
    }
    EXPECT_LE(err, 1.0 * dt) << dt;
    EXPECT_GE(err, 0.01 * dt) << dt;  // first order, not exact
  }
}

TEST(IntegratePath, DeterministicUnderSeed) {
  const SystemSpec s = build_preset("chain", {{"k", 3}, {"d", 2}, {"gamma", 0.4}});
  const StatePair xi{Vector::Constant(6, 0.5), Vector::Constant(2, -1.0)};
  const auto a = integrate_path(s, xi, 1e-2, 3.0, StreamId{9, 4, 0});
  const auto b = integrate_path(s, xi, 1e-2, 3.0, StreamId{9, 4, 0});
  const auto c = integrate_path(s, xi, 1e-2, 3.0, StreamId{9, 5, 0});
  ASSERT_EQ(a.states.size(), b.states.size());
  for (std::size_t k = 0; k < a.states.size(); ++k) {
    ASSERT_EQ(a.states[k].x, b.states[k].x);
    ASSERT_EQ(a.states[k].y, b.states[k].y);
  }
  EXPECT_NE(a.states.back().y, c.states.back().y);
  EXPECT_EQ(a.states.front().x, xi.x);
}

TEST(IntegratePath, BlowUpReportsStep) {
  const Matrix I = Matrix::Identity(1, 1);
  const SystemSpec s = SystemSpec::create(50.0 * I, I, I, LinearDrift{I, 50.0 * I, Vector::Zero(1)});
  try {
    integrate_path(s, sp(1, 1), 0.1, 1000.0, StreamId{1, 0, 0});
    FAIL() << "expected blow-up";
  } catch (const NumericalFailure& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(IntegratePath, Preconditions) {
  EXPECT_THROW(integrate_path(kfp(), sp(0, 0), 0.0, 1.0, StreamId{}), InvalidInput);
  EXPECT_THROW(integrate_path(kfp(), sp(0, 0), 0.1, 0.05, StreamId{}), InvalidInput);
  EXPECT_THROW(integrate_path(kfp(), {Vector::Zero(2), Vector::Zero(1)}, 0.1, 1.0, StreamId{}), InvalidInput);
}

TEST(IntegratePath, GalerkinSplittingIsStable) {
  const SystemSpec s = build_preset("galerkin", {{"N", 8}, {"gamma", 0.5}, {"alpha", 0.1}, {"beta", 0.1}});
  // dt above the explicit stability limit 2/64 of the stiffest mode
  const auto p = integrate_path(s, {Vector::Ones(16), Vector::Ones(8)}, 0.05, 20.0, StreamId{2, 0, 0});
  EXPECT_TRUE(p.states.back().finite());
  EXPECT_LT(p.states.back().norm(), 10.0);
  const auto em = integrate_path(s, {Vector::Ones(16), Vector::Ones(8)}, 0.05, 20.0, StreamId{2, 0, 0},
                                 Scheme::euler_maruyama);
  EXPECT_GT(em.states.back().norm(), 1e50);
}

TEST(SyncPair, CoalescedPathsIdentical) {
  const auto [a, b] = simulate_sync_pair(kfp(), sp(0.3, 1), sp(0.3, 1), 1e-3, 2.0, StreamId{5, 0, 0});
  for (std::size_t k = 0; k < a.states.size(); ++k) ASSERT_EQ(a.states[k].stacked(), b.states[k].stacked());
}

TEST(SyncPair, DifferenceFollowsLinearOde) {
  Matrix M(2, 2);
  M << 0, 1, -1, -1;
  const double dt = 1e-3;
  const auto [a, b] = simulate_sync_pair(kfp(), sp(1.5, 0.2), sp(0.5, 0.2), dt, 5.0, StreamId{6, 0, 0});
  Vector d0(2);
  d0 << 1.0, 0.0;
  double err = 0.0;
  for (std::size_t k = 0; k < a.states.size(); ++k) {
    const Vector diff = (a.states[k] - b.states[k]).stacked();
    err = std::max(err, (diff - oracle::taylor_expm(M * a.grid[k]) * d0).norm());
  }
  EXPECT_LE(err, 10.0 * dt);
  const auto flow = difference_flow(kfp(), sp(1, 0), dt, 5.0, FlowScheme::euler);
  for (std::size_t k = 0; k < flow.size(); ++k)
    ASSERT_LE((flow[k].stacked() - (a.states[k] - b.states[k]).stacked()).norm(), 1e-12);
}

TEST(SyncPair, PhiContractsPerStep) {
  const SystemSpec s = kfp();
  const double r = 0.5, theta = a3_theta(s, r), dt = 1e-3;
  ASSERT_NEAR(theta, 0.25, 1e-14);
  std::mt19937_64 g(8);
  for (int traj = 0; traj < 20; ++traj) {
    const Vector a = randm(g, 2, 1), b = randm(g, 2, 1);
    const auto [p, q] = simulate_sync_pair(s, StatePair::split(a, 1), StatePair::split(b, 1), dt, 3.0,
                                           StreamId{10, static_cast<std::uint64_t>(traj), 0});
    const double C = phi_functional(Vector::Zero(1), Vector::Zero(1), r, s.B()).C;
    double prev = -1.0;
    for (std::size_t k = 0; k < p.states.size(); ++k) {
      const StatePair d = p.states[k] - q.states[k];
      const double phi = phi_functional(d.x, d.y, r, s.B()).value;
      if (prev >= 0.0) ASSERT_LE(phi, prev * std::exp(-theta / C * dt) * (1.0 + 1e-6)) << k;
      prev = phi;
    }
  }
}

TEST(DifferenceFlow, ExactMatchesExponential) {
  const SystemSpec s = build_preset("chain", {{"k", 2}, {"d", 1}, {"gamma", 0.5}});
  Vector u0(3);
  u0 << 1.0, -2.0, 0.5;
  const auto flow = difference_flow(s, StatePair::split(u0, 2), 0.01, 2.0);
  const Vector exact = oracle::taylor_expm(full_drift_matrix(s) * 2.0) * u0;
  EXPECT_LE((flow.back().stacked() - exact).norm(), 1e-12);
}

TEST(Phi, Examples) {
  const Matrix B = Matrix::Identity(1, 1);
  EXPECT_EQ(phi_functional(Vector::Zero(1), Vector::Zero(1), 0.5, B).value, 0.0);
  EXPECT_DOUBLE_EQ(phi_functional(Vector::Constant(1, 2), Vector::Constant(1, 3), 0.0, B).value, 6.5);
  const auto p = phi_functional(Vector::Constant(1, 1), Vector::Constant(1, 1), 0.5, B);
  EXPECT_DOUBLE_EQ(p.value, 1.5);
  EXPECT_NEAR(p.lambda_min, 0.25, 1e-15);
  EXPECT_NEAR(p.lambda_max, 0.75, 1e-15);
  EXPECT_NEAR(p.C, 4.0, 1e-14);
  EXPECT_THROW(phi_functional(Vector::Zero(1), Vector::Zero(1), 1.0, B), InvalidInput);
}

TEST(Phi, TwoSidedBound) {
  std::mt19937_64 g(14);
  const Matrix B = randm(g, 3, 2);
  const double r = 0.9 / operator_norm(B);
  for (int i = 0; i < 200; ++i) {
    const Vector dx = randm(g, 3, 1), dy = randm(g, 2, 1);
    const auto p = phi_functional(dx, dy, r, B);
    const double n2 = dx.squaredNorm() + dy.squaredNorm();
    EXPECT_LE(n2 / p.C, p.value * (1 + 1e-12));
    EXPECT_LE(p.value, p.C * n2 * (1 + 1e-12));
  }
}

TEST(Control, ZeroGapNeedsNoControl) {
  EXPECT_EQ(control_vector(kfp(), sp(1, 2), sp(1, 2), 1.0).norm(), 0.0);
}

TEST(Control, KineticValues) {
  EXPECT_NEAR(control_vector(kfp(), sp(0, 0), sp(1, 0), 1.0)(0), 6.0, 1e-10);
  EXPECT_NEAR(control_vector(kfp(), sp(0, 0), sp(0, 1), 1.0)(0), 3.0, 1e-10);
}

TEST(Control, RankFailureRaises) {
  auto [A, B] = chain_matrices(2, 1, 0.0);
  Matrix G(1, 2), H(1, 1);
  G << 0, -1;
  H << -1;
  const SystemSpec s = SystemSpec::create(A, B, Matrix::Identity(1, 1), LinearDrift{G, H, Vector::Zero(1)});
  EXPECT_THROW(control_vector(s, {Vector::Zero(2), Vector::Zero(1)}, {Vector::Ones(2), Vector::Zero(1)}, 1.0),
               NumericalFailure);
  EXPECT_THROW(control_vector(kfp(), sp(0, 0), sp(1, 0), 0.0), InvalidInput);
}

TEST(ClosedForm, Endpoints) {
  const StatePair xi = sp(0.2, -0.4), eta = sp(1.0, 0.3);
  const Vector b = control_vector(kfp(), xi, eta, 1.0);
  const StatePair d0 = closed_form_difference(kfp(), xi, eta, 1.0, b, 0.0);
  EXPECT_EQ(d0.x(0), 0.8);
  EXPECT_EQ(d0.y(0), eta.y(0) - xi.y(0));
  const StatePair d1 = closed_form_difference(kfp(), xi, eta, 1.0, b, 1.0);
  EXPECT_LE(d1.norm(), 1e-10 * (eta - xi).norm());
  EXPECT_THROW(closed_form_difference(kfp(), xi, eta, 1.0, b, 1.5), InvalidInput);
}

TEST(ClosedForm, KineticMidpoint) {
  const StatePair d = closed_form_difference(kfp(), sp(0, 0), sp(0, 1), 1.0, Vector::Constant(1, 3.0), 0.5);
  EXPECT_NEAR(d.y(0), -0.25, 1e-15);
}

TEST(ClosedForm, MatchesNoiselessSimulation) {
  // With identical noise the controlled difference is deterministic; it must
  // match the closed form to first order in dt.
  const StatePair xi = sp(0.0, 0.0), eta = sp(1.0, 0.5);
  const auto tr = simulate_control_coupling(kfp(), xi, eta, 1.0, 1e-4, StreamId{3, 0, 0});
  for (double t : {0.25, 0.5, 0.75}) {
    const auto k = static_cast<std::size_t>(std::lround(t / 1e-4));
    const StatePair sim = tr.path.states[k] - tr.bar_path.states[k];
    const StatePair cf = closed_form_difference(kfp(), xi, eta, 1.0, tr.control_b, t);
    EXPECT_LE((sim - cf).norm(), 5e-3) << t;
  }
}

TEST(ClosedForm, ExactMeetingOnRandomSystems) {
  std::mt19937_64 g(15);
  std::uniform_int_distribution<int> dim(1, 3);
  int tested = 0;
  while (tested < 100) {
    const int m = dim(g), d = dim(g);
    const Matrix A = randm(g, m, m), B = randm(g, m, d);
    if (!kalman_rank(A, B).holds) continue;
    const SystemSpec s = SystemSpec::create(A, B, Matrix::Identity(d, d),
                                            LinearDrift{randm(g, d, m), randm(g, d, d), Vector::Zero(d)});
    const StatePair xi{randm(g, m, 1), randm(g, d, 1)}, eta{randm(g, m, 1), randm(g, d, 1)};
    const Vector b = control_vector(s, xi, eta, 1.0);
    const StatePair end = closed_form_difference(s, xi, eta, 1.0, b, 1.0);
    const double scale = (eta - xi).norm() + (closed_form_difference(s, xi, eta, 1.0, b, 0.5)).norm();
    EXPECT_LE(end.norm(), 1e-8 * scale) << tested;
    ++tested;
  }
}

TEST(ControlCoupling, CoincidentStartsNeedNoWeight) {
  const auto tr = simulate_control_coupling(kfp(), sp(0.4, -1), sp(0.4, -1), 1.0, 1e-3, StreamId{1, 0, 0});
  EXPECT_EQ(tr.log_weight, 0.0);
  EXPECT_EQ(tr.terminal_gap, 0.0);
  for (const auto& p : tr.psi) ASSERT_EQ(p.norm(), 0.0);
  for (std::size_t k = 0; k < tr.path.states.size(); ++k)
    ASSERT_EQ(tr.path.states[k].stacked(), tr.bar_path.states[k].stacked());
}

TEST(ControlCoupling, TranscriptShape) {
  const auto tr = simulate_control_coupling(kfp(), sp(0, 0), sp(1, 0), 1.0, 1e-2, StreamId{1, 0, 0});
  EXPECT_EQ(tr.psi.size(), tr.path.grid.size() - 1);
  EXPECT_EQ(tr.path.states.front().x(0), 1.0);  // (X, Y) starts at eta
  EXPECT_EQ(tr.bar_path.states.front().x(0), 0.0);
  EXPECT_TRUE(std::isfinite(tr.log_weight));
  EXPECT_GE(tr.terminal_gap, 0.0);
  EXPECT_NEAR(tr.control_b(0), 6.0, 1e-10);
}

TEST(ControlCoupling, TerminalGapShrinksWithDt) {
  const double g3 = simulate_control_coupling(kfp(), sp(0, 0), sp(1, 0), 1.0, 1e-3, StreamId{2, 0, 0}).terminal_gap;
  const double g4 = simulate_control_coupling(kfp(), sp(0, 0), sp(1, 0), 1.0, 1e-4, StreamId{2, 0, 0}).terminal_gap;
  EXPECT_LE(g3, 0.05);
  EXPECT_LE(g4, 0.005);
  EXPECT_NEAR(g3 / g4, 10.0, 1.0);
}

TEST(ControlCoupling, Preconditions) {
  EXPECT_THROW(CouplingPlan(kfp(), sp(0, 0), sp(1, 0), 0.05, 0.01), InvalidInput);   // t0 < 10 dt
  EXPECT_THROW(CouplingPlan(kfp(), sp(0, 0), sp(1, 0), 1.0, 0.3), InvalidInput);     // ragged final step
}

TEST(ControlCoupling, WeightHasUnitMean) {
  const CouplingPlan plan(kfp(), sp(0, 0), sp(-0.5, 1.0), 1.0, 1e-3);
  const std::size_t n = 4000;
  std::vector<double> w(n);
  parallel_for(n, 1, [&](std::size_t i) { w[i] = std::exp(plan.run(StreamId{77, i, 0}).log_weight); });
  const auto ms = mean_stderr(w);
  EXPECT_LE(std::abs(ms.mean - 1.0), 3.0 * ms.stderr_);
}

TEST(ControlCoupling, LogWeightIsGaussianWithPlanVariance) {
  const CouplingPlan plan(kfp(), sp(0, 0), sp(-0.5, 1.0), 1.0, 1e-3);
  const double v = plan.log_weight_variance();
  std::vector<double> lw(3000);
  for (std::size_t i = 0; i < lw.size(); ++i) lw[i] = plan.run(StreamId{78, i, 0}).log_weight;
  const auto ms = mean_stderr(lw);
  EXPECT_NEAR(ms.mean, -0.5 * v, 4.0 * ms.stderr_);
  const double sd = ms.stderr_ * std::sqrt(static_cast<double>(lw.size()));
  EXPECT_NEAR(sd * sd, v, 0.1 * v);
}

TEST(ControlCoupling, PsiBoundStableAcrossSeeds) {
  const StatePair xi = sp(0, 0), eta = sp(0.6, -0.8);
  const CouplingPlan plan(kfp(), xi, eta, 1.0, 1e-3);
  const double gap2 = (eta - xi).norm_sq();
  const double c1 = plan.run(StreamId{1, 0, 0}).max_psi_sq / gap2;
  EXPECT_TRUE(std::isfinite(c1));
  EXPECT_GT(c1, 0.0);
  for (std::uint64_t s = 2; s < 6; ++s) EXPECT_NEAR(plan.run(StreamId{s, 0, 0}).max_psi_sq / gap2, c1, 1e-9 * c1);
  // scaling the gap scales psi linearly
  const CouplingPlan twice(kfp(), xi, StatePair{2.0 * eta.x, 2.0 * eta.y}, 1.0, 1e-3);
  EXPECT_NEAR(twice.run(StreamId{1, 0, 0}).max_psi_sq / (4.0 * gap2), c1, 1e-9 * c1);
}

TEST(ControlCoupling, ReductionIndependentOfWorkers) {
  const CouplingPlan plan(build_preset("chain", {{"k", 2}, {"d", 1}, {"gamma", 0.5}}),
                          {Vector::Zero(2), Vector::Zero(1)}, {Vector::Ones(2), Vector::Ones(1)}, 1.0, 1e-2);
  auto run = [&](unsigned threads) {
    std::vector<double> lw(257);
    parallel_for(lw.size(), threads, [&](std::size_t i) { lw[i] = plan.run(StreamId{4, i, 0}).log_weight; });
    return pairwise_sum(lw);
  };
  const double one = run(1);
  EXPECT_EQ(one, run(3));
  EXPECT_EQ(one, run(8));
}

TEST(ControlCoupling, GalerkinMeets) {
  const SystemSpec s = build_preset("galerkin", {{"N", 3}, {"gamma", 0.5}, {"alpha", 0.1}, {"beta", 0.1}});
  const StatePair xi{Vector::Zero(6), Vector::Zero(3)};
  StatePair eta{Vector::Zero(6), Vector::Zero(3)};
  eta.x(0) = 0.3;
  eta.y(1) = -0.2;
  const Vector b = control_vector(s, xi, eta, 1.0);
  EXPECT_LE(closed_form_difference(s, xi, eta, 1.0, b, 1.0).norm(), 1e-8 * eta.norm());
  const auto tr = simulate_control_coupling(s, xi, eta, 1.0, 1e-3, StreamId{5, 0, 0});
  EXPECT_LE(tr.terminal_gap, 0.05 * eta.norm());
}
