#pragma once

// Per-arm linear outcome models and the ATE/CATE estimators built on them.
//
// Each treatment arm gets its own OLS fit with an intercept; the ATE at a
// site is the sample average of the fitted contrast. Gram summaries carry the
// sufficient statistics (per-arm X'X, X'y, y'y, counts, covariate mean) that
// the one-shot federated routes ship instead of rows — they are additive
// across any partition of the data, which is what makes those routes exact.

#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fedci/errors.hpp"
#include "fedci/sample.hpp"

namespace fedci {

struct ArmModel {
  int arm = 0;
  Eigen::VectorXd theta;   // intercept first, then d slopes
  Eigen::MatrixXd gram;    // sum of (1,x)(1,x)' over the arm
  Eigen::VectorXd xty;     // sum of (1,x) y
  double yty = 0.0;        // sum of y^2
  int n_used = 0;
};

struct AteEstimate {
  double value = 0.0;
  double variance = 0.0;
  int site_id = -1;
  double n = 0.0;
};

// Additive per-arm second-moment summary of one site (or any row subset).
struct GramSummary {
  struct Arm {
    Eigen::MatrixXd gram;  // (d+1) x (d+1)
    Eigen::VectorXd xty;   // d+1
    double yty = 0.0;
    int n = 0;
  };
  Arm arms[2];
  Eigen::VectorXd mean_x;  // covariate mean over all rows
  int n = 0;
  int site_id = -1;

  int dim() const { return static_cast<int>(mean_x.size()); }

  GramSummary& operator+=(const GramSummary& o) {
    if (dim() != o.dim()) throw ConfigError("GramSummary: dimension mismatch");
    mean_x = (n * mean_x + o.n * o.mean_x) / static_cast<double>(n + o.n);
    for (int a = 0; a < 2; ++a) {
      arms[a].gram += o.arms[a].gram;
      arms[a].xty += o.arms[a].xty;
      arms[a].yty += o.arms[a].yty;
      arms[a].n += o.arms[a].n;
    }
    n += o.n;
    site_id = -1;
    return *this;
  }
  friend GramSummary operator+(GramSummary a, const GramSummary& b) {
    a += b;
    return a;
  }

  // Scalars on the wire when a site uploads this summary: two dense Gram
  // blocks, two moment vectors, per-arm (n, yty), covariate mean, total n.
  static long wire_size(int d) {
    const long p = d + 1;
    return 2 * (p * p + p + 2) + d + 1;
  }
};

namespace detail {

inline Eigen::MatrixXd design_with_intercept(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd A(X.rows(), X.cols() + 1);
  A.col(0).setOnes();
  A.rightCols(X.cols()) = X;
  return A;
}

}  // namespace detail

inline ArmModel fit_arm_ols(const SiteSample& sample, int arm) {
  if (sample.kind() != SampleKind::Linear)
    throw ConfigError("fit_arm_ols: linear samples only");
  if (arm != 0 && arm != 1) throw ConfigError("fit_arm_ols: arm must be 0 or 1");
  const int d = sample.dim();
  const int p = d + 1;
  const auto& X = sample.X();
  const auto& W = sample.W();
  const auto& Y = sample.Y();
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < sample.n(); ++i)
    if (W[i] == arm) rows.push_back(i);
  Eigen::MatrixXd A(rows.size(), p);
  Eigen::VectorXd y(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    A(r, 0) = 1.0;
    A.row(r).tail(d) = X.row(rows[r]);
    y[r] = Y[rows[r]];
  }
  // Rank-revealing QR on the augmented design; a deficient arm means the site
  // cannot identify its own regression and must fail loudly.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < p)
    throw Condition1Violation(arm, static_cast<int>(qr.rank()), p);
  ArmModel m;
  m.arm = arm;
  m.theta = qr.solve(y);
  m.gram = A.transpose() * A;
  m.xty = A.transpose() * y;
  m.yty = y.squaredNorm();
  m.n_used = static_cast<int>(rows.size());
  return m;
}

// Residual sum of squares from sufficient statistics: at the OLS solution
// theta'G theta = theta'X'y, so SSR = y'y - theta'X'y.
inline double arm_ssr(const ArmModel& m) {
  return std::max(0.0, m.yty - m.theta.dot(m.xty));
}

namespace detail {

// Plug-in large-sample variance of an ATE built from the arm contrast
// (1,xbar)'(theta1-theta0): noise part sigma^2/(n p(1-p)) plus the
// covariate-dispersion part (b1-b0)' Sigma (b1-b0) / n.
inline double ate_plugin_variance(double sigma2, double n, double p_treat,
                                  const Eigen::VectorXd& slope_diff,
                                  const Eigen::MatrixXd& cov_x) {
  double v = sigma2 / (n * p_treat * (1.0 - p_treat));
  if (slope_diff.size() > 0)
    v += slope_diff.dot(cov_x * slope_diff) / n;
  return v;
}

inline Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows();
  if (X.cols() == 0) return Eigen::MatrixXd(0, 0);
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - mu;
  return C.transpose() * C / static_cast<double>(n > 1 ? n - 1 : 1);
}

}  // namespace detail

// One site working alone: fit both arms, average the contrast over the site's
// own covariates, attach the plug-in variance.
inline AteEstimate local_ate(const SiteSample& sample) {
  const ArmModel m0 = fit_arm_ols(sample, 0);
  const ArmModel m1 = fit_arm_ols(sample, 1);
  const int d = sample.dim();
  const double n = static_cast<double>(sample.n());
  const Eigen::VectorXd diff = m1.theta - m0.theta;
  const auto& X = sample.X();
  double tau = diff[0];
  if (d > 0) tau += (X * diff.tail(d)).mean();
  const double df = n - 2.0 * (d + 1);
  const double sigma2 = (arm_ssr(m0) + arm_ssr(m1)) / std::max(df, 1.0);
  const double p_treat = m1.n_used / n;
  AteEstimate est;
  est.value = tau;
  est.variance = detail::ate_plugin_variance(sigma2, n, p_treat, diff.tail(d),
                                             detail::sample_cov(X));
  est.site_id = sample.site_id();
  est.n = n;
  return est;
}

// ATE under a supplied coefficient pair, averaged over this sample's
// covariates. This is how a site evaluates a federated model locally.
inline double model_ate(const SiteSample& sample, const Eigen::VectorXd& theta1,
                        const Eigen::VectorXd& theta0) {
  const int d = sample.dim();
  if (theta1.size() != d + 1 || theta0.size() != d + 1)
    throw ConfigError("model_ate: coefficient length must be d+1");
  const Eigen::VectorXd diff = theta1 - theta0;
  double tau = diff[0];
  if (d > 0) tau += (sample.X() * diff.tail(d)).mean();
  return tau;
}

inline double cate(const Eigen::VectorXd& x, const Eigen::VectorXd& theta1,
                   const Eigen::VectorXd& theta0) {
  if (theta1.size() != theta0.size() || theta1.size() != x.size() + 1)
    throw ConfigError("cate: coefficient length must be d+1");
  const Eigen::VectorXd diff = theta1 - theta0;
  return diff[0] + x.dot(diff.tail(x.size()));
}

inline GramSummary gram_summary(const SiteSample& sample) {
  if (sample.kind() != SampleKind::Linear)
    throw ConfigError("gram_summary: linear samples only");
  const int d = sample.dim();
  const int p = d + 1;
  GramSummary g;
  for (int a = 0; a < 2; ++a) {
    g.arms[a].gram = Eigen::MatrixXd::Zero(p, p);
    g.arms[a].xty = Eigen::VectorXd::Zero(p);
  }
  g.mean_x = Eigen::VectorXd::Zero(d);
  g.n = static_cast<int>(sample.n());
  g.site_id = sample.site_id();
  const auto& X = sample.X();
  const auto& W = sample.W();
  const auto& Y = sample.Y();
  Eigen::VectorXd row(p);
  for (Eigen::Index i = 0; i < sample.n(); ++i) {
    row[0] = 1.0;
    row.tail(d) = X.row(i);
    auto& arm = g.arms[W[i]];
    arm.gram.noalias() += row * row.transpose();
    arm.xty.noalias() += row * Y[i];
    arm.yty += Y[i] * Y[i];
    arm.n += 1;
    if (d > 0) g.mean_x += X.row(i).transpose();
  }
  if (g.n > 0 && d > 0) g.mean_x /= static_cast<double>(g.n);
  return g;
}

// Solve one arm's normal equations from a (possibly summed) summary. A
// singular single-site Gram is the site's own identification failure; a
// singular summed Gram means even the union of sites cannot identify the arm.
inline Eigen::VectorXd solve_arm(const GramSummary::Arm& arm, int d, int which,
                                 bool federated) {
  const int p = d + 1;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(arm.gram);
  if (qr.rank() < p) {
    if (federated)
      throw Condition2Violation(which, static_cast<int>(qr.rank()), p);
    throw Condition1Violation(which, static_cast<int>(qr.rank()), p);
  }
  return qr.solve(arm.xty);
}

}  // namespace fedci
