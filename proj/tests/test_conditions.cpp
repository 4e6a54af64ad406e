#include <gtest/gtest.h>

#include <random>

#include "hyperkin/conditions.hpp"
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

Matrix random_orthogonal(std::mt19937_64& g, Eigen::Index n) {
  Eigen::HouseholderQR<Matrix> qr(randm(g, n, n));
  return qr.householderQ();
}

SystemSpec linear_system(const Matrix& A, const Matrix& B, const Matrix& G, const Matrix& H) {
  return SystemSpec::create(A, B, Matrix::Identity(B.cols(), B.cols()), LinearDrift{G, H, Vector::Zero(B.cols())});
}

}  // namespace

TEST(KalmanRank, ScalarIdentity) {
  const auto r = kalman_rank(Matrix::Zero(1, 1), Matrix::Identity(1, 1));
  EXPECT_TRUE(r.holds);
  EXPECT_EQ(r.witness("rank"), 1.0);
}

TEST(KalmanRank, ChainControllable) {
  auto [A, B] = chain_matrices(2, 1, 0.5);
  const auto r = kalman_rank(A, B);
  EXPECT_TRUE(r.holds);
  EXPECT_EQ(r.witness("rank"), 2.0);
}

TEST(KalmanRank, ChainWithZeroGammaFails) {
  auto [A, B] = chain_matrices(2, 1, 0.0);
  const auto r = kalman_rank(A, B);
  EXPECT_FALSE(r.holds);
  EXPECT_EQ(r.witness("rank"), 1.0);
}

TEST(KalmanRank, ShapeMismatchThrows) {
  EXPECT_THROW(kalman_rank(Matrix::Zero(2, 2), Matrix::Zero(3, 1)), InvalidInput);
}

TEST(Gramian, UnweightedIdentity) {
  const auto q = gramian(Matrix::Zero(2, 2), Matrix::Identity(2, 2), 1.0, false);
  EXPECT_LE((q.value - Matrix::Identity(2, 2)).norm(), 1e-13);
}

TEST(Gramian, WeightedIdentityIsOneSixth) {
  const auto q = gramian(Matrix::Zero(2, 2), Matrix::Identity(2, 2), 1.0, true);
  EXPECT_LE((q.value - Matrix::Identity(2, 2) / 6.0).norm(), 1e-13);
  const Matrix ref = oracle::weighted_gramian(Matrix::Zero(2, 2), Matrix::Identity(2, 2), 1.0, 100000);
  EXPECT_LE((q.value - ref).norm(), 1e-9);
}

TEST(Gramian, ChainWeightedMatchesTrapezoidOracle) {
  auto [A, B] = chain_matrices(2, 1, 0.5);
  const auto q = gramian(A, B, 1.0, true);
  const Matrix ref = oracle::weighted_gramian(A, B, 1.0, 100000);
  EXPECT_LE((q.value - ref).norm(), 1e-9 * ref.norm());
  EXPECT_GT(q.min_eigenvalue, 0.0);
  EXPECT_LE((q.value - q.value.transpose()).norm(), 0.0);
}

TEST(Gramian, RejectsNonPositiveTime) {
  EXPECT_THROW(gramian(Matrix::Zero(1, 1), Matrix::Identity(1, 1), 0.0, true), InvalidInput);
}

TEST(Gramian, PositiveDefiniteIffRankHolds) {
  std::mt19937_64 g(21);
  std::uniform_int_distribution<int> dim(1, 3);
  int deficient = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int m = dim(g), d = dim(g);
    Matrix A = randm(g, m, m), B = randm(g, m, d);
    if (trial % 3 == 0 && m >= 2) {
      // Uncontrollable: B lives in an A-invariant proper subspace.
      const Matrix Q = random_orthogonal(g, m);
      Matrix Ab = randm(g, m, m);
      Ab.bottomLeftCorner(1, m - 1).setZero();
      Matrix Bb = randm(g, m, d);
      Bb.bottomRows(1).setZero();
      A = Q * Ab * Q.transpose();
      B = Q * Bb;
    }
    const auto rank = kalman_rank(A, B);
    const auto q = gramian(A, B, 1.0, true);
    EXPECT_LE((q.value - q.value.transpose()).norm(), 0.0);
    EXPECT_GE(q.min_eigenvalue, -1e-12 * (1.0 + q.value.norm()));
    if (rank.holds) {
      EXPECT_GT(q.min_eigenvalue, 1e-10 * q.value.norm()) << trial;
    } else {
      ++deficient;
      EXPECT_LT(std::abs(q.min_eigenvalue), 1e-10 * (1.0 + q.value.norm())) << trial;
    }
  }
  EXPECT_GE(deficient, 5);
}

TEST(A3Linear, KineticFpAtHalf) {
  const SystemSpec s = build_preset("kinetic_fp");
  EXPECT_NEAR(a3_theta(s, 0.5), 0.25, 1e-14);
  Matrix S(2, 2);
  S << -0.5, -0.25, -0.25, -0.5;
  EXPECT_LE((a3_form_matrix(s, 0.5) - S).norm(), 1e-15);
  EXPECT_NEAR(-oracle::circle_max(S), 0.25, 1e-9);
  const auto rep = check_A3_linear(s, admissible_r_grid(s.norm_B()));
  EXPECT_TRUE(rep.holds);
  EXPECT_GE(rep.witness("best_theta"), 0.25 - 1e-12);
}

TEST(A3Linear, GridAgreesWithSphereOracle) {
  const SystemSpec s = build_preset("chain", {{"k", 2}, {"d", 1}, {"gamma", 0.5}});
  for (double r : {-0.8, -0.1, 0.3, 0.77}) {
    const Matrix S = a3_form_matrix(s, r);
    // u^T S u = Q(u) on random directions
    std::mt19937_64 g(9);
    for (int i = 0; i < 20; ++i) {
      const Vector a = randm(g, 3, 1), b = randm(g, 3, 1);
      const double q = *a3_ratio(s, r, StatePair::split(a, 2), StatePair::split(b, 2));
      const Vector u = a - b;
      EXPECT_NEAR(q, u.dot(S * u) / u.squaredNorm(), 1e-12);
    }
    EXPECT_NEAR(-a3_theta(s, r), oracle::sphere_max(S, 200000, 4), 1e-3);
  }
}

TEST(A3Linear, RepulsiveDriftFails) {
  const Matrix I = Matrix::Identity(1, 1);
  const SystemSpec s = linear_system(Matrix::Zero(1, 1), I, I, Matrix::Zero(1, 1));
  const auto grid = admissible_r_grid(s.norm_B());
  for (double r : grid) ASSERT_LE(a3_theta(s, r), 0.0);
  EXPECT_FALSE(check_A3_linear(s, grid).holds);
}

TEST(A3Linear, ZeroDifferenceGivesZeroForm) {
  const SystemSpec s = build_preset("kinetic_fp");
  const StatePair p{Vector::Constant(1, 0.3), Vector::Constant(1, -2.0)};
  EXPECT_FALSE(a3_ratio(s, 0.5, p, p).has_value());
  const Vector zero = Vector::Zero(2);
  EXPECT_EQ(zero.dot(a3_form_matrix(s, 0.5) * zero), 0.0);
}

TEST(A3Linear, EmptyGridAndOutOfRangeRejected) {
  const SystemSpec s = build_preset("kinetic_fp");
  EXPECT_THROW(check_A3_linear(s, {}), InvalidInput);
  EXPECT_THROW(check_A3_linear(s, {1.0}), InvalidInput);
}

TEST(A3Linear, GridEndpointsInset) {
  const auto g = admissible_r_grid(2.0);
  ASSERT_EQ(g.size(), 2001u);
  EXPECT_DOUBLE_EQ(g.front(), -(1.0 - 1e-6) / 2.0);
  EXPECT_DOUBLE_EQ(g.back(), (1.0 - 1e-6) / 2.0);
}

TEST(A3Linear, InvariantUnderOrthogonalConjugation) {
  std::mt19937_64 g(31);
  int holds = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 2, d = 2;
    const Matrix A = randm(g, m, m) - 1.5 * Matrix::Identity(m, m);
    const Matrix B = 0.5 * randm(g, m, d);
    const Matrix G = -B.transpose() + 0.2 * randm(g, d, m);
    const Matrix H = -1.5 * Matrix::Identity(d, d) + 0.3 * randm(g, d, d);
    const Matrix U = random_orthogonal(g, m), V = random_orthogonal(g, d);
    const SystemSpec s = linear_system(A, B, G, H);
    const SystemSpec t = linear_system(U * A * U.transpose(), U * B * V.transpose(), V * G * U.transpose(),
                                       V * H * V.transpose());
    const auto grid = admissible_r_grid(s.norm_B(), 201);
    const auto a = check_A3_linear(s, grid), b = check_A3_linear(t, grid);
    EXPECT_EQ(a.holds, b.holds);
    EXPECT_NEAR(a.witness("best_theta"), b.witness("best_theta"), 1e-10);
    holds += a.holds;
  }
  EXPECT_GT(holds, 0);
}

TEST(A3Sampled, LinearCaseMatchesLinearChecker) {
  const SystemSpec s = build_preset("kinetic_fp");
  for (std::uint64_t seed : {1u, 2u, 77u}) {
    const auto rep = check_A3_sampled(s, 500, 3.0, seed, admissible_r_grid(s.norm_B(), 201));
    EXPECT_TRUE(rep.holds);
    EXPECT_GE(rep.witness("empirical_theta"), 0.25 - 1e-9);
    EXPECT_NE(rep.notes.find("not falsified"), std::string::npos);
  }
}

TEST(A3Sampled, DegeneratePairsSkipped) {
  const SystemSpec s = build_preset("kinetic_fp");
  const StatePair p{Vector::Constant(1, 1.0), Vector::Constant(1, 2.0)};
  const StatePair q{Vector::Constant(1, -1.0), Vector::Constant(1, 0.5)};
  const auto rep = check_A3_pairs(s, {{p, p}, {p, q}}, {0.5});
  EXPECT_EQ(rep.witness("pairs_skipped"), 1.0);
  EXPECT_EQ(rep.witness("pairs_used"), 1.0);
  EXPECT_THROW(check_A3_pairs(s, {{p, p}}, {0.5}), NumericalFailure);
}

TEST(A3Sampled, RepulsiveDriftFalsified) {
  const Matrix I = Matrix::Identity(1, 1);
  const SystemSpec s = linear_system(Matrix::Zero(1, 1), I, I, Matrix::Zero(1, 1));
  // theta(r) = -(1 + r) tends to 0 at the left end of the admissible interval, so
  // finite samples can only falsify on an interval kept away from it.
  std::vector<double> inner;
  for (int i = 0; i <= 100; ++i) inner.push_back(-0.9 + 1.8 * i / 100.0);
  for (int n : {50, 200}) {
    const auto rep = check_A3_sampled(s, n, 1.0, 5, inner);
    EXPECT_FALSE(rep.holds);
    EXPECT_LT(rep.witness("empirical_theta"), 0.0);
  }
  // The form is [[r, 1], [1, r]]: the direction dx = dy falsifies every r, while
  // dy = 0 alone only falsifies r >= 0.
  const StatePair o{Vector::Zero(1), Vector::Zero(1)};
  const StatePair diag{Vector::Constant(1, 1.0), Vector::Constant(1, 1.0)};
  const StatePair flat{Vector::Constant(1, 1.0), Vector::Zero(1)};
  EXPECT_FALSE(check_A3_pairs(s, {{diag, o}}, admissible_r_grid(1.0, 101)).holds);
  EXPECT_TRUE(check_A3_pairs(s, {{flat, o}}, admissible_r_grid(1.0, 101)).holds);
}

TEST(NamedCondition, C4KineticExample) {
  const auto r = check_named_condition("C4", {{"K", 1}, {"beta", 1}, {"gamma", 0}, {"normB", 1}, {"normBinvAstar", 0}});
  EXPECT_DOUBLE_EQ(r.witness("u"), 3.0);
  EXPECT_NEAR(r.witness("rhs"), 2.0 / (3.0 + std::sqrt(5.0)), 1e-15);
  EXPECT_NEAR(r.witness("rhs"), 0.38197, 1e-5);
  EXPECT_TRUE(r.holds);
  EXPECT_GT(r.witness("margin"), 0.0);
}

TEST(NamedCondition, C5Bound) {
  const auto a = check_named_condition("C5", {{"K", 1}, {"beta", 1}, {"gamma", 0.5}});
  EXPECT_NEAR(a.witness("rhs"), 2.0 / 3.0, 1e-15);
  EXPECT_TRUE(a.holds);
  EXPECT_FALSE(check_named_condition("C5", {{"K", 1}, {"beta", 1}, {"gamma", 0.7}}).holds);
  EXPECT_FALSE(check_named_condition("C5", {{"K", 1}, {"beta", 1}, {"gamma", 0.0}}).holds);
  EXPECT_TRUE(check_named_condition("C5", {{"K", 1}, {"beta", 1}, {"gamma", -0.6}}).holds);
}

TEST(NamedCondition, C11Trivial) {
  const auto r = check_named_condition("C11", {{"delta", 0}, {"K1", 0}, {"K2", 0}, {"normB", 1}, {"lambda1", 1}});
  EXPECT_EQ(r.witness("lambda_prime"), 0.0);
  EXPECT_TRUE(r.holds);
}

TEST(NamedCondition, EEXTrivial) {
  const auto r = check_named_condition("EEX", {{"alpha", 0}, {"beta", 0}, {"gamma", 0}});
  EXPECT_DOUBLE_EQ(r.witness("lhs"), 3.0);
  EXPECT_TRUE(r.holds);
}

TEST(NamedCondition, MissingParameterAndUnknownId) {
  EXPECT_THROW(check_named_condition("C5", {{"K", 1}, {"beta", 1}}), InvalidInput);
  EXPECT_THROW(check_named_condition("C9", {}), InvalidInput);
}

TEST(NamedCondition, NonFiniteIntermediateThrows) {
  EXPECT_THROW(check_named_condition("EEX", {{"alpha", -10}, {"beta", 0}, {"gamma", 0}}), NumericalFailure);
  EXPECT_THROW(check_named_condition("C5", {{"K", 1}, {"beta", std::nan("")}, {"gamma", 0.1}}), InvalidInput);
}

TEST(NamedCondition, HoldingReportsHavePositiveMargin) {
  std::mt19937_64 g(41);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int i = 0; i < 300; ++i) {
    const NamedParams p{{"K", u(g)}, {"beta", u(g)}, {"gamma", u(g) - 0.5}, {"normB", 0.2 + u(g)},
                        {"normBinvAstar", u(g)}, {"alpha", u(g)}, {"delta", u(g)}, {"K1", u(g)},
                        {"K2", u(g)}, {"lambda1", 3 * u(g)}};
    for (const char* id : {"C4", "C5", "C11", "EEX"}) {
      const auto r = check_named_condition(id, p);
      if (r.holds) {
        EXPECT_LT(r.witness("lhs"), r.witness("rhs"));
        EXPECT_GT(r.witness("margin"), 0.0);
      }
    }
  }
}

TEST(NamedCondition, C4AgreesWithW1SupGrid) {
  std::mt19937_64 g(43);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int checked = 0, c4_true = 0, c4_false = 0;
  while (checked < 200) {
    const double nb = 0.3 + 2.0 * u(g);
    const double beta = u(g) / nb;  // |B| beta <= 1: the r-interval constraint does not bind
    const double K = 2.0 * u(g), a = u(g);
    const double uu = 2.0 + (a + K) * (a + K);
    const double crit = 2.0 * beta / (uu + std::sqrt(uu * uu - 4.0));
    const double gamma = crit * (0.2 + 1.6 * u(g));
    if (std::abs(gamma - crit) < 1e-3 * crit) continue;  // grid resolution
    const auto r = check_named_condition("C4", {{"K", K}, {"beta", beta}, {"gamma", gamma}, {"normB", nb},
                                                {"normBinvAstar", a}});
    EXPECT_EQ(r.witness("verdicts_agree"), 1.0) << "gamma=" << gamma << " crit=" << crit;
    (r.holds ? c4_true : c4_false)++;
    ++checked;
  }
  EXPECT_GT(c4_true, 20);
  EXPECT_GT(c4_false, 20);
}

TEST(NamedCondition, C4ImpliesW1WhenIntervalBinds) {
  std::mt19937_64 g(44);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int c4_true = 0;
  for (int i = 0; i < 200; ++i) {
    const double nb = 0.3 + 2.0 * u(g);
    const double beta = (1.0 + 3.0 * u(g)) / nb;
    const auto r = check_named_condition("C4", {{"K", u(g)}, {"beta", beta}, {"gamma", 0.3 * u(g) * beta},
                                                {"normB", nb}, {"normBinvAstar", u(g)}});
    if (r.holds) {
      ++c4_true;
      EXPECT_EQ(r.witness("w1_holds"), 1.0);
    }
  }
  EXPECT_GT(c4_true, 10);
}

TEST(NamedCondition, C4NonPositiveGammaReportedSeparately) {
  const auto r = check_named_condition("C4", {{"K", 1}, {"beta", 1}, {"gamma", -0.2}, {"normB", 1}, {"normBinvAstar", 0}});
  EXPECT_TRUE(r.holds);
  EXPECT_EQ(r.witness("w1_holds"), 1.0);
  EXPECT_TRUE(std::isinf(r.witness("w1_lhs")));
  EXPECT_FALSE(r.notes.empty());
}

TEST(AlphaLambda, Examples) {
  auto a = alpha_lambda_prime(0, 0, 1, 1);
  EXPECT_DOUBLE_EQ(a.alpha, 0.0);
  EXPECT_DOUBLE_EQ(a.lambda_prime, 1.0);
  a = alpha_lambda_prime(1, 0, 1, 1);
  EXPECT_DOUBLE_EQ(a.alpha, 0.0);
  EXPECT_DOUBLE_EQ(a.lambda_prime, 1.0);
  a = alpha_lambda_prime(0, 1, 0, 1);
  EXPECT_DOUBLE_EQ(a.alpha, 1.0);
  EXPECT_DOUBLE_EQ(a.lambda_prime, 1.0);
  EXPECT_THROW(alpha_lambda_prime(0, 1, 0, 0), InvalidInput);
  EXPECT_THROW(alpha_lambda_prime(-1, 1, 0, 1), InvalidInput);
}

TEST(AlphaLambda, IdentitiesOnRandomDraws) {
  std::mt19937_64 g(51);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    const double delta = u(g), K1 = u(g), K2 = u(g), nb = 0.05 + u(g);
    const auto a = alpha_lambda_prime(delta, K1, K2, nb);
    const double scale = 1.0 + a.lambda_prime * (1.0 + a.alpha);
    EXPECT_NEAR(a.lambda_prime * a.alpha, a.alpha * delta + K1, 1e-12 * scale);
    EXPECT_NEAR(a.alpha * nb + K2, a.lambda_prime, 1e-12 * scale);
    const auto c11 = check_named_condition("C11", {{"delta", delta}, {"K1", K1}, {"K2", K2}, {"normB", nb}, {"lambda1", 1}});
    EXPECT_NEAR(c11.witness("lambda_prime"), a.lambda_prime, 1e-12 * scale);
  }
}

TEST(ConditionsFor, KineticFpC4Holds) {
  const auto reps = conditions_for(build_preset("kinetic_fp"), 1);
  bool found = false;
  for (const auto& r : reps) {
    if (r.condition_id == "C4") {
      found = true;
      EXPECT_TRUE(r.holds);
      EXPECT_DOUBLE_EQ(r.witness("u"), 3.0);
    }
    if (r.condition_id == "A1") EXPECT_TRUE(r.holds);
    if (r.condition_id == "A3") EXPECT_TRUE(r.holds);
  }
  EXPECT_TRUE(found);
}

TEST(ConditionsFor, ChainReportsC5) {
  const auto reps = conditions_for(build_preset("chain", {{"gamma", 0.5}}), 1);
  bool found = false;
  for (const auto& r : reps)
    if (r.condition_id == "C5") {
      found = true;
      EXPECT_TRUE(r.holds);
    }
  EXPECT_TRUE(found);
}

TEST(ConditionsFor, GalerkinSharpDelta) {
  const SystemSpec s = build_preset("galerkin", {{"N", 8}, {"gamma", 0.5}, {"alpha", 0.1}, {"beta", 0.1}});
  EXPECT_NEAR(galerkin_delta_sharp(s), 0.25, 1e-12);
  std::map<std::string, ConditionReport> by;
  for (const auto& r : conditions_for(s, 1, 201, 100)) by.emplace(r.condition_id, r);
  EXPECT_TRUE(by.at("EEX").holds);
  EXPECT_TRUE(by.at("C11_sharp_delta").holds);
  EXPECT_NEAR(by.at("C11_sharp_delta").witness("lambda_prime"), 0.5, 1e-12);
  EXPECT_TRUE(by.at("B3").holds);
}
