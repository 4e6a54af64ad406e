#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <boost/math/quadrature/gauss.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hyperkin/error.hpp"

namespace hyperkin {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// e^{M}; scaling-and-squaring with a degree-13 Padé approximant.
inline Matrix expm(const Matrix& m) {
  if (m.size() == 0) return m;
  return m.exp();
}

inline Matrix symmetric_part(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Spectral (largest singular value) norm.
inline double operator_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

inline double min_singular_value(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(svd.singularValues().size() - 1);
}

inline Vector symmetric_eigenvalues(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetric_part(s), Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

inline double lambda_max(const Matrix& s) { return symmetric_eigenvalues(s).maxCoeff(); }
inline double lambda_min(const Matrix& s) { return symmetric_eigenvalues(s).minCoeff(); }

/// Numerical rank with threshold max(rows, cols) * eps * sigma_max.
inline int numerical_rank(const Matrix& m) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  const double tol = static_cast<double>(std::max(m.rows(), m.cols())) *
                     std::numeric_limits<double>::epsilon() * sv(0);
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++rank;
  return rank;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Pairwise summation of a sequence; result depends only on the order of terms.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

inline double pairwise_mean(std::span<const double> v) {
  return v.empty() ? 0.0 : pairwise_sum(v) / static_cast<double>(v.size());
}

/// Mean and standard error of the mean.
struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline MeanStderr mean_stderr(std::span<const double> v) {
  MeanStderr out;
  if (v.empty()) return out;
  out.mean = pairwise_mean(v);
  if (v.size() < 2) return out;
  std::vector<double> sq(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - out.mean) * (v[i] - out.mean);
  const double var = pairwise_sum(sq) / static_cast<double>(v.size() - 1);
  out.stderr_ = std::sqrt(var / static_cast<double>(v.size()));
  return out;
}

struct QuadratureResult {
  Matrix value;
  int nodes = 0;
};

/// Composite 8-point Gauss-Legendre on [a, b], panel count doubled until the
/// relative Frobenius change between successive refinements drops below rel_tol.
inline QuadratureResult integrate_matrix(const std::function<Matrix(double)>& integrand, double a,
                                         double b, double rel_tol = 1e-10, int max_nodes = 1 << 14) {
  using Rule = boost::math::quadrature::gauss<double, 8>;
  const auto& x = Rule::abscissa();
  const auto& w = Rule::weights();

  auto composite = [&](int panels) {
    const double h = (b - a) / panels;
    Matrix acc;
    for (int p = 0; p < panels; ++p) {
      const double mid = a + (p + 0.5) * h;
      const double half = 0.5 * h;
      for (std::size_t i = 0; i < x.size(); ++i) {
        // The rule stores non-negative abscissae; x = 0 appears once for odd orders.
        const double offsets[2] = {x[i], -x[i]};
        const int copies = (x[i] == 0.0) ? 1 : 2;
        for (int c = 0; c < copies; ++c) {
          Matrix term = integrand(mid + half * offsets[c]) * (w[i] * half);
          if (acc.size() == 0)
            acc = std::move(term);
          else
            acc += term;
        }
      }
    }
    return acc;
  };

  int panels = 1;
  Matrix prev = composite(panels);
  while (true) {
    panels *= 2;
    if (panels * 8 > max_nodes)
      throw NumericalFailure("quadrature did not converge within " + std::to_string(max_nodes) +
                             " nodes");
    Matrix next = composite(panels);
    if (!next.allFinite()) throw NumericalFailure("quadrature produced non-finite values");
    const double scale = std::max(next.norm(), std::numeric_limits<double>::min());
    if ((next - prev).norm() <= rel_tol * scale || next.norm() == 0.0)
      return {std::move(next), panels * 8};
    prev = std::move(next);
  }
}

}  // namespace hyperkin
