#pragma once

// Non-negative matrices, beta divergences and the weighted power-mean family.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace unfold {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exponents closer to zero than this are evaluated with the analytic
// geometric-mean limit instead of the unstable power form.
constexpr double kMeanLimitTol = 1e-8;

/// Epsilon added to denominators throughout the toolkit; threaded, not global.
struct EpsilonPolicy {
  double eps = 1e-12;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Dense matrix whose entries are all finite and >= 0.
class NonNegMatrix {
 public:
  NonNegMatrix() = default;
  NonNegMatrix(Matrix m) : m_(std::move(m)) { check(); }  // NOLINT: implicit by design
  template <class Derived>
  NonNegMatrix(const Eigen::MatrixBase<Derived>& m) : m_(m) {  // NOLINT
    check();
  }

  Eigen::Index rows() const { return m_.rows(); }
  Eigen::Index cols() const { return m_.cols(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

  const Matrix& mat() const { return m_; }
  operator const Matrix&() const { return m_; }  // NOLINT

 private:
  void check() const {
    require((m_.array() >= 0.0).all() && m_.array().isFinite().all(),
            "NonNegMatrix: negative or non-finite element detected");
  }
  Matrix m_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* where) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(where) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()));
}

/// Beta divergence D_beta(X | Y); beta = 1 is generalized KL, beta = 2 squared error.
/// The beta = 2 form carries no 1/2 factor.
inline double beta_divergence(const NonNegMatrix& X, const NonNegMatrix& Y, double beta) {
  require_same_shape(X, Y, "beta_divergence");
  const auto& x = X.mat().array();
  const auto& y = Y.mat().array();
  if (beta == 2.0) return (x - y).square().sum();
  if (beta == 1.0) {
    // sum x*log(x/y) - x + y, with 0*log 0 := 0
    double acc = 0.0;
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double xv = X(i, j), yv = Y.mat()(i, j);
        if (xv > 0.0) acc += xv * std::log(xv / yv) - xv + yv;
        else acc += yv;
      }
    return acc;
  }
  throw std::invalid_argument("beta_divergence: only beta in {1,2} is supported");
}

namespace detail {

inline void check_mean_args(const Vector& w, Eigen::Index n_x, const char* where) {
  require(w.size() == n_x, std::string(where) + ": weight/value size mismatch");
  require((w.array() >= 0.0).all(), std::string(where) + ": negative weight");
  require(std::abs(w.sum() - 1.0) <= 1e-9, std::string(where) + ": weights not normalized");
}

}  // namespace detail

/// Log-domain power mean L_a(w, z) = (1/a) log sum_n w_n exp(a z_n).
/// a -> 0 gives sum w_n z_n; a -> +/-inf gives max/min of z over the support of w.
inline double log_power_mean(const Vector& w, const Vector& z, double a) {
  detail::check_mean_args(w, z.size(), "log_power_mean");
  require(z.array().isFinite().all(), "log_power_mean: non-finite value");
  if (std::isinf(a)) {
    double best = a > 0 ? -kInf : kInf;
    for (Eigen::Index n = 0; n < z.size(); ++n)
      if (w[n] > 0.0) best = a > 0 ? std::max(best, z[n]) : std::min(best, z[n]);
    return best;
  }
  if (std::abs(a) < kMeanLimitTol) return w.dot(z);
  // shift by the dominant exponent so the sum cannot overflow
  double m = -kInf;
  for (Eigen::Index n = 0; n < z.size(); ++n)
    if (w[n] > 0.0) m = std::max(m, a * z[n]);
  double s = 0.0;
  for (Eigen::Index n = 0; n < z.size(); ++n)
    if (w[n] > 0.0) s += w[n] * std::exp(a * z[n] - m);
  return (m + std::log(s)) / a;
}

/// Weighted power mean M_a(w, x) = (sum_n w_n x_n^a)^(1/a) for x > 0.
inline double power_mean(const Vector& w, const Vector& x, double a) {
  detail::check_mean_args(w, x.size(), "power_mean");
  require((x.array() > 0.0).all(), "power_mean: non-positive value");
  if (std::isinf(a) || std::abs(a) < kMeanLimitTol)
    return std::exp(log_power_mean(w, x.array().log().matrix(), a));
  double s = 0.0;
  for (Eigen::Index n = 0; n < x.size(); ++n)
    if (w[n] > 0.0) s += w[n] * std::pow(x[n], a);
  const double r = std::pow(s, 1.0 / a);
  if (std::isfinite(r) && r > 0.0) return r;
  return std::exp(log_power_mean(w, x.array().log().matrix(), a));  // overflow fallback
}

/// Matrix of uniform(0,1] draws; deterministic for a given seed.
inline Matrix uniform_open01(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = 1.0 - dist(gen);
  return m;
}

/// Stable logistic 1/(1 + exp(-x)).
inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Splitmix-style seed derivation for per-item streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace unfold
