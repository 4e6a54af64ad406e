#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hyperkin/error.hpp"
#include "hyperkin/linalg.hpp"

namespace hyperkin {

using Json = nlohmann::json;

struct StatePair {
  Vector x;
  Vector y;

  double norm_sq() const { return x.squaredNorm() + y.squaredNorm(); }
  double norm() const { return std::sqrt(norm_sq()); }
  bool finite() const { return x.allFinite() && y.allFinite(); }

  Vector stacked() const {
    Vector u(x.size() + y.size());
    u << x, y;
    return u;
  }
  static StatePair split(const Vector& u, Eigen::Index m) {
    return {u.head(m), u.tail(u.size() - m)};
  }
  friend StatePair operator-(const StatePair& a, const StatePair& b) { return {a.x - b.x, a.y - b.y}; }
  friend StatePair operator+(const StatePair& a, const StatePair& b) { return {a.x + b.x, a.y + b.y}; }
};

// ---------------------------------------------------------------------------
// Drift descriptors

enum class BKind { linear_ou, scaled_linear };

/// Velocity damping b(y) = -beta * y; linear_ou pins beta = 1.
struct BFunction {
  BKind kind = BKind::linear_ou;
  double beta = 1.0;

  double slope() const { return kind == BKind::linear_ou ? 1.0 : beta; }
};

/// Z(x, y) = z0 + G x + H y.
struct LinearDrift {
  Matrix G;
  Matrix H;
  Vector z0;
};

/// Z(x, y) = b(y) - B^T x.
struct KineticGradientDrift {
  BFunction b;
};

/// Z(x, y) = b(y) - x_k for the k-block chain oscillator.
struct ChainDrift {
  int k = 2;
  double gamma = 0.5;
  BFunction b{BKind::scaled_linear, 1.0};
};

/// Eigenvalue profile of the truncated stiff operator.
struct LambdaProfile {
  double exponent = 2.0;       // lambda_i = i^exponent when `values` is empty
  std::vector<double> values;  // explicit lambda_1 .. lambda_N

  double operator()(int i) const {
    if (!values.empty()) return values.at(static_cast<std::size_t>(i - 1));
    return std::pow(static_cast<double>(i), exponent);
  }
};

/// N-mode spectral truncation of the infinite-dimensional oscillator. The
/// stiff parts -L1 x and -L2 y act on top of Z(x, y) = -alpha l1 B^T x - beta l1 y.
struct GalerkinDrift {
  int modes = 8;
  LambdaProfile profile;
  double gamma = 0.0;
  double alpha = 0.0;
  double beta = 0.0;

  double lambda1() const { return profile(1); }
};

using DriftSpec = std::variant<LinearDrift, KineticGradientDrift, ChainDrift, GalerkinDrift>;

inline std::string variant_name(const DriftSpec& d) {
  switch (d.index()) {
    case 0: return "linear";
    case 1: return "kinetic_gradient";
    case 2: return "chain";
    default: return "galerkin";
  }
}

// ---------------------------------------------------------------------------

/// dX = (A X + B Y) dt,  dY = Z(X, Y) dt + sigma dW. Immutable once built.
class SystemSpec {
 public:
  static SystemSpec create(Matrix A, Matrix B, Matrix sigma, DriftSpec drift);

  int m() const { return m_; }
  int d() const { return d_; }
  const Matrix& A() const { return A_; }
  const Matrix& B() const { return B_; }
  const Matrix& sigma() const { return sigma_; }
  const Matrix& sigma_inv() const { return sigma_inv_; }
  const DriftSpec& drift() const { return drift_; }
  double K1() const { return K1_; }
  double K2() const { return K2_; }
  double sigma_min_singular() const { return sigma_min_sv_; }
  double norm_B() const { return norm_B_; }

  /// Affine form (G, H, z0) of Z; every catalogued variant is affine.
  const LinearDrift& linear_form() const { return linear_; }
  /// Diagonals of L1 (length m) and L2 (length d); zero except for Galerkin.
  const Vector& stiff_x() const { return stiff_x_; }
  const Vector& stiff_y() const { return stiff_y_; }
  bool has_stiff_part() const { return std::holds_alternative<GalerkinDrift>(drift_); }
  bool is_linear_variant() const { return std::holds_alternative<LinearDrift>(drift_); }

  /// A - L1: the X-drift matrix of the full dynamics.
  Matrix effective_A() const { return A_ - Matrix(stiff_x_.asDiagonal()); }

 private:
  SystemSpec() = default;

  int m_ = 0;
  int d_ = 0;
  Matrix A_, B_, sigma_, sigma_inv_;
  DriftSpec drift_;
  double K1_ = 0.0, K2_ = 0.0;
  double sigma_min_sv_ = 0.0;
  double norm_B_ = 0.0;
  LinearDrift linear_;
  Vector stiff_x_, stiff_y_;
};

namespace detail {

inline void check_shape(const Matrix& mat, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  require(mat.rows() == rows && mat.cols() == cols,
          name + " has shape " + std::to_string(mat.rows()) + "x" + std::to_string(mat.cols()) +
              ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
}

inline Matrix last_block_selector(int m, int d) {
  Matrix s = Matrix::Zero(d, m);
  s.rightCols(d).setIdentity();
  return s;
}

}  // namespace detail

inline SystemSpec SystemSpec::create(Matrix A, Matrix B, Matrix sigma, DriftSpec drift) {
  SystemSpec s;
  require(A.rows() >= 1 && B.cols() >= 1, "dimensions m and d must be positive");
  s.m_ = static_cast<int>(A.rows());
  s.d_ = static_cast<int>(B.cols());
  const int m = s.m_, d = s.d_;
  detail::check_shape(A, m, m, "A");
  detail::check_shape(B, m, d, "B");
  detail::check_shape(sigma, d, d, "sigma");
  require(A.allFinite() && B.allFinite() && sigma.allFinite(), "matrices must be finite");
  s.sigma_min_sv_ = min_singular_value(sigma);
  require(s.sigma_min_sv_ > 0.0, "sigma must be invertible");
  s.sigma_inv_ = sigma.inverse();
  s.norm_B_ = operator_norm(B);
  s.stiff_x_ = Vector::Zero(m);
  s.stiff_y_ = Vector::Zero(d);

  std::visit(
      [&](const auto& z) {
        using T = std::decay_t<decltype(z)>;
        if constexpr (std::is_same_v<T, LinearDrift>) {
          detail::check_shape(z.G, d, m, "drift.G");
          detail::check_shape(z.H, d, d, "drift.H");
          require(z.z0.size() == d, "drift.z0 must have length d");
          s.linear_ = z;
          s.K1_ = operator_norm(z.G);
          s.K2_ = operator_norm(z.H);
        } else if constexpr (std::is_same_v<T, KineticGradientDrift>) {
          require(m == d, "kinetic_gradient drift requires m = d");
          s.linear_ = {-B.transpose(), -z.b.slope() * Matrix::Identity(d, d), Vector::Zero(d)};
          s.K1_ = s.norm_B_;
          s.K2_ = std::abs(z.b.slope());
        } else if constexpr (std::is_same_v<T, ChainDrift>) {
          require(z.k >= 2, "chain drift requires k >= 2");
          require(m == z.k * d, "chain drift requires m = k * d");
          s.linear_ = {-detail::last_block_selector(m, d), -z.b.slope() * Matrix::Identity(d, d),
                       Vector::Zero(d)};
          s.K1_ = 1.0;
          s.K2_ = std::abs(z.b.slope());
        } else {
          require(z.modes >= 1, "galerkin drift requires at least one mode");
          require(m == 2 * z.modes && d == z.modes, "galerkin drift requires m = 2N and d = N");
          if (!z.profile.values.empty())
            require(static_cast<int>(z.profile.values.size()) == z.modes,
                    "galerkin lambda list must have N entries");
          else
            require(z.profile.exponent > 1.0, "galerkin power profile needs exponent > 1 for summability");
          double prev = 0.0;
          for (int i = 1; i <= z.modes; ++i) {
            const double li = z.profile(i);
            require(std::isfinite(li) && li > prev, "galerkin lambda_i must be positive and strictly increasing");
            prev = li;
            s.stiff_x_(2 * i - 2) = li;
            s.stiff_x_(2 * i - 1) = li;
            s.stiff_y_(i - 1) = li;
          }
          const double l1 = z.lambda1();
          s.linear_ = {-z.alpha * l1 * B.transpose(), -z.beta * l1 * Matrix::Identity(d, d), Vector::Zero(d)};
          s.K1_ = std::abs(z.alpha) * l1 * s.norm_B_;
          s.K2_ = std::abs(z.beta) * l1;
        }
      },
      drift);
  s.A_ = std::move(A);
  s.B_ = std::move(B);
  s.sigma_ = std::move(sigma);
  s.drift_ = std::move(drift);
  return s;
}

// ---------------------------------------------------------------------------
// Drift evaluation

/// Writes Z(x, y) into `out` without allocating when out is pre-sized.
inline void drift_eval_into(const SystemSpec& spec, const Vector& x, const Vector& y, Vector& out) {
  const LinearDrift& lf = spec.linear_form();
  out.noalias() = lf.G * x;
  out.noalias() += lf.H * y;
  out += lf.z0;
}

inline void check_dims(const SystemSpec& spec, const StatePair& s) {
  require(s.x.size() == spec.m() && s.y.size() == spec.d(),
          "state has dims (" + std::to_string(s.x.size()) + ", " + std::to_string(s.y.size()) +
              "), system expects (" + std::to_string(spec.m()) + ", " + std::to_string(spec.d()) + ")");
}

/// Z(x, y) for the system's drift descriptor.
inline Vector drift_eval(const SystemSpec& spec, const StatePair& s) {
  check_dims(spec, s);
  const int d = spec.d();
  return std::visit(
      [&](const auto& z) -> Vector {
        using T = std::decay_t<decltype(z)>;
        if constexpr (std::is_same_v<T, LinearDrift>) {
          return z.z0 + z.G * s.x + z.H * s.y;
        } else if constexpr (std::is_same_v<T, KineticGradientDrift>) {
          return -z.b.slope() * s.y - spec.B().transpose() * s.x;
        } else if constexpr (std::is_same_v<T, ChainDrift>) {
          return -z.b.slope() * s.y - s.x.tail(d);
        } else {
          const double l1 = z.lambda1();
          return -z.alpha * l1 * (spec.B().transpose() * s.x) - z.beta * l1 * s.y;
        }
      },
      spec.drift());
}

/// Block matrix [[A - L1, B], [G, H - L2]] of the noiseless linear dynamics
/// (the affine offset z0 is excluded).
inline Matrix full_drift_matrix(const SystemSpec& spec) {
  const int m = spec.m(), d = spec.d();
  Matrix M(m + d, m + d);
  M.topLeftCorner(m, m) = spec.effective_A();
  M.topRightCorner(m, d) = spec.B();
  M.bottomLeftCorner(d, m) = spec.linear_form().G;
  M.bottomRightCorner(d, d) = spec.linear_form().H - Matrix(spec.stiff_y().asDiagonal());
  return M;
}

/// (Ax + By - L1 x, Z(x, y) - L2 y).
inline StatePair total_drift(const SystemSpec& spec, const StatePair& s) {
  StatePair out;
  out.x = spec.A() * s.x + spec.B() * s.y - spec.stiff_x().cwiseProduct(s.x);
  out.y = drift_eval(spec, s) - spec.stiff_y().cwiseProduct(s.y);
  return out;
}

// ---------------------------------------------------------------------------
// Presets

struct PresetInfo {
  std::string name;
  std::string provenance;
  std::string description;
};

inline std::vector<PresetInfo> preset_catalog() {
  return {
      {"kinetic_fp", "Example 5.1", "kinetic Fokker-Planck: m = d, A = 0, B = sigma = I, Z = -x - y"},
      {"kinetic_gradient", "Example 5.1", "A = 0, B = sigma = I, Z = b(y) - B^T x with b(y) = -beta y"},
      {"chain", "Example 5.2", "k-block chain, A(x)_i = gamma x_{i+1} - x_i, Z = -beta y - x_k"},
      {"galerkin", "Example 5.3", "N-mode truncation with lambda_i = i^p, coupling gamma, Lipschitz alpha, beta"},
  };
}

/// Chain matrices; accepts gamma = 0 so that rank failures can be exhibited.
inline std::pair<Matrix, Matrix> chain_matrices(int k, int d, double gamma) {
  const int m = k * d;
  Matrix A = Matrix::Zero(m, m);
  for (int i = 0; i + 1 < k; ++i) {
    A.block(i * d, i * d, d, d) = -Matrix::Identity(d, d);
    A.block(i * d, (i + 1) * d, d, d) = gamma * Matrix::Identity(d, d);
  }
  Matrix B = Matrix::Zero(m, d);
  B.bottomRows(d).setIdentity();
  return {A, B};
}

namespace detail {

inline void check_param_keys(const Json& params, const std::set<std::string>& allowed, const std::string& preset) {
  require(params.is_object() || params.is_null(), "preset params must be an object");
  if (params.is_null()) return;
  for (const auto& [key, _] : params.items())
    require(allowed.count(key) > 0, "unknown parameter '" + key + "' for preset " + preset);
}

template <class T>
T param_or(const Json& params, const std::string& key, T fallback) {
  if (params.is_null() || !params.contains(key)) return fallback;
  try {
    return params.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw InvalidInput("parameter '" + key + "': " + e.what());
  }
}

inline BFunction parse_b(const Json& params, BKind default_kind) {
  BFunction b;
  const std::string kind =
      param_or<std::string>(params, "b_kind", default_kind == BKind::linear_ou ? "linear_ou" : "scaled_linear");
  if (kind == "linear_ou")
    b.kind = BKind::linear_ou;
  else if (kind == "scaled_linear")
    b.kind = BKind::scaled_linear;
  else
    throw InvalidInput("unknown b_kind '" + kind + "'");
  b.beta = param_or<double>(params, "beta", 1.0);
  require(b.kind == BKind::linear_ou || b.beta > 0.0, "beta must be positive");
  return b;
}

inline LambdaProfile parse_profile(const Json& params) {
  LambdaProfile p;
  p.exponent = param_or<double>(params, "exponent", 2.0);
  p.values = param_or<std::vector<double>>(params, "lambdas", {});
  return p;
}

}  // namespace detail

/// Builds a named preset; unknown tags or parameters raise InvalidInput.
inline SystemSpec build_preset(const std::string& name, const Json& params = Json::object()) {
  if (name == "kinetic_fp") {
    detail::check_param_keys(params, {"d"}, name);
    const int d = detail::param_or<int>(params, "d", 1);
    require(d >= 1, "kinetic_fp requires d >= 1");
    const Matrix I = Matrix::Identity(d, d);
    return SystemSpec::create(Matrix::Zero(d, d), I, I, LinearDrift{-I, -I, Vector::Zero(d)});
  }
  if (name == "kinetic_gradient") {
    detail::check_param_keys(params, {"d", "b_kind", "beta"}, name);
    const int d = detail::param_or<int>(params, "d", 1);
    require(d >= 1, "kinetic_gradient requires d >= 1");
    const Matrix I = Matrix::Identity(d, d);
    return SystemSpec::create(Matrix::Zero(d, d), I, I,
                              KineticGradientDrift{detail::parse_b(params, BKind::scaled_linear)});
  }
  if (name == "chain") {
    detail::check_param_keys(params, {"k", "d", "gamma", "b_kind", "beta"}, name);
    ChainDrift z;
    z.k = detail::param_or<int>(params, "k", 2);
    const int d = detail::param_or<int>(params, "d", 1);
    z.gamma = detail::param_or<double>(params, "gamma", 0.5);
    z.b = detail::parse_b(params, BKind::scaled_linear);
    require(z.k >= 2 && d >= 1, "chain requires k >= 2 and d >= 1");
    require(z.gamma != 0.0, "chain requires gamma != 0 (rank condition)");
    auto [A, B] = chain_matrices(z.k, d, z.gamma);
    return SystemSpec::create(A, B, Matrix::Identity(d, d), z);
  }
  if (name == "galerkin") {
    detail::check_param_keys(params, {"N", "exponent", "lambdas", "gamma", "alpha", "beta"}, name);
    GalerkinDrift z;
    z.modes = detail::param_or<int>(params, "N", 8);
    z.profile = detail::parse_profile(params);
    z.gamma = detail::param_or<double>(params, "gamma", 0.0);
    z.alpha = detail::param_or<double>(params, "alpha", 0.0);
    z.beta = detail::param_or<double>(params, "beta", 0.0);
    require(z.modes >= 1, "galerkin requires N >= 1");
    require(z.alpha >= 0.0 && z.beta >= 0.0, "galerkin requires alpha, beta >= 0");
    const int N = z.modes;
    const double l1 = z.profile(1);
    Matrix A = Matrix::Zero(2 * N, 2 * N);
    Matrix B = Matrix::Zero(2 * N, N);
    for (int i = 1; i <= N; ++i) {
      // u_{2i} sits at index 2i-1 and u_{2i-1} at 2i-2.
      B(2 * i - 1, i - 1) = 1.0;
      A(2 * i - 2, 2 * i - 1) = z.gamma * l1;
    }
    return SystemSpec::create(A, B, Matrix::Identity(N, N), z);
  }
  throw InvalidInput("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline Json matrix_to_json(const Matrix& m) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) arr.push_back(m(i, j));
  return arr;
}

inline Matrix matrix_from_json(const Json& j, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  require(j.is_array(), name + " must be a row-major array");
  require(static_cast<Eigen::Index>(j.size()) == rows * cols,
          name + " must have " + std::to_string(rows * cols) + " entries");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) {
      const Json& v = j[static_cast<std::size_t>(i * cols + k)];
      require(v.is_number(), name + " entries must be numbers");
      m(i, k) = v.get<double>();
    }
  return m;
}

inline Json b_to_json(const BFunction& b) {
  return {{"b_kind", b.kind == BKind::linear_ou ? "linear_ou" : "scaled_linear"}, {"beta", b.beta}};
}

}  // namespace detail

inline Json to_json(const SystemSpec& spec) {
  Json j;
  const int m = spec.m(), d = spec.d();
  j["dims"] = {{"m", m}, {"d", d}};
  j["A"] = detail::matrix_to_json(spec.A());
  j["B"] = detail::matrix_to_json(spec.B());
  j["sigma"] = detail::matrix_to_json(spec.sigma());
  Json drift;
  drift["variant"] = variant_name(spec.drift());
  std::visit(
      [&](const auto& z) {
        using T = std::decay_t<decltype(z)>;
        if constexpr (std::is_same_v<T, LinearDrift>) {
          drift["params"] = {{"G", detail::matrix_to_json(z.G)},
                             {"H", detail::matrix_to_json(z.H)},
                             {"z0", detail::matrix_to_json(z.z0)}};
        } else if constexpr (std::is_same_v<T, KineticGradientDrift>) {
          drift["params"] = detail::b_to_json(z.b);
        } else if constexpr (std::is_same_v<T, ChainDrift>) {
          Json p = detail::b_to_json(z.b);
          p["k"] = z.k;
          p["gamma"] = z.gamma;
          drift["params"] = p;
        } else {
          Json p = {{"N", z.modes}, {"gamma", z.gamma}, {"alpha", z.alpha}, {"beta", z.beta}};
          if (z.profile.values.empty())
            p["exponent"] = z.profile.exponent;
          else
            p["lambdas"] = z.profile.values;
          drift["params"] = p;
        }
      },
      spec.drift());
  j["drift"] = drift;
  j["lipschitz"] = {spec.K1(), spec.K2()};
  return j;
}

inline const std::set<std::string>& system_keys() {
  static const std::set<std::string> keys{"dims", "A", "B", "sigma", "drift", "lipschitz"};
  return keys;
}

/// Parses the explicit system schema (dims, A, B, sigma, drift, optional lipschitz).
inline SystemSpec system_from_json(const Json& j) {
  require(j.is_object(), "system must be an object");
  for (const auto& key : {"dims", "A", "B", "sigma", "drift"})
    require(j.contains(key), std::string("system is missing '") + key + "'");
  const Json& dims = j.at("dims");
  require(dims.is_object() && dims.contains("m") && dims.contains("d") && dims.size() == 2,
          "dims must be {\"m\": int, \"d\": int}");
  const int m = dims.at("m").get<int>();
  const int d = dims.at("d").get<int>();
  require(m >= 1 && d >= 1, "dims must be positive");
  Matrix A = detail::matrix_from_json(j.at("A"), m, m, "A");
  Matrix B = detail::matrix_from_json(j.at("B"), m, d, "B");
  Matrix sigma = detail::matrix_from_json(j.at("sigma"), d, d, "sigma");

  const Json& drift = j.at("drift");
  require(drift.is_object() && drift.contains("variant"), "drift.variant is required");
  for (const auto& [key, _] : drift.items())
    require(key == "variant" || key == "params", "unknown drift key '" + key + "'");
  const std::string variant = drift.at("variant").get<std::string>();
  const Json params = drift.value("params", Json::object());

  DriftSpec z;
  if (variant == "linear") {
    detail::check_param_keys(params, {"G", "H", "z0"}, "linear");
    require(params.contains("G") && params.contains("H"), "linear drift needs G and H");
    Vector z0 = params.contains("z0") ? Vector(detail::matrix_from_json(params.at("z0"), d, 1, "z0"))
                                      : Vector(Vector::Zero(d));
    z = LinearDrift{detail::matrix_from_json(params.at("G"), d, m, "G"),
                    detail::matrix_from_json(params.at("H"), d, d, "H"), z0};
  } else if (variant == "kinetic_gradient") {
    detail::check_param_keys(params, {"b_kind", "beta"}, variant);
    z = KineticGradientDrift{detail::parse_b(params, BKind::scaled_linear)};
  } else if (variant == "chain") {
    detail::check_param_keys(params, {"k", "gamma", "b_kind", "beta"}, variant);
    ChainDrift c;
    c.k = detail::param_or<int>(params, "k", 2);
    c.gamma = detail::param_or<double>(params, "gamma", 0.5);
    c.b = detail::parse_b(params, BKind::scaled_linear);
    z = c;
  } else if (variant == "galerkin") {
    detail::check_param_keys(params, {"N", "exponent", "lambdas", "gamma", "alpha", "beta"}, variant);
    GalerkinDrift g;
    g.modes = detail::param_or<int>(params, "N", d);
    g.profile = detail::parse_profile(params);
    g.gamma = detail::param_or<double>(params, "gamma", 0.0);
    g.alpha = detail::param_or<double>(params, "alpha", 0.0);
    g.beta = detail::param_or<double>(params, "beta", 0.0);
    z = g;
  } else {
    throw InvalidInput("unknown drift variant '" + variant + "'");
  }
  SystemSpec spec = SystemSpec::create(std::move(A), std::move(B), std::move(sigma), std::move(z));
  if (j.contains("lipschitz")) {
    const auto lip = j.at("lipschitz").get<std::vector<double>>();
    require(lip.size() == 2, "lipschitz must be [K1, K2]");
    require(std::abs(lip[0] - spec.K1()) <= 1e-12 * (1.0 + spec.K1()) &&
                std::abs(lip[1] - spec.K2()) <= 1e-12 * (1.0 + spec.K2()),
            "declared lipschitz pair does not match the drift");
  }
  return spec;
}

}  // namespace hyperkin
