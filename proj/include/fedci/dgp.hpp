#pragma once

// Synthetic multi-site data.
//
// Sites share a covariate covariance and outcome coefficients; heterogeneity
// enters through per-site covariate means (covariate shift), per-site
// treatment propensities, and per-site baseline hazards (survival designs).
// Generators draw from a caller-supplied stream, consuming a fixed number of
// variates per subject, so a site's data is a pure function of (spec, site,
// stream seed).

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "fedci/errors.hpp"
#include "fedci/rng.hpp"
#include "fedci/sample.hpp"

namespace fedci {

struct LinearDgpSpec {
  std::vector<int> site_sizes;           // n_k
  std::vector<double> propensities;      // P(W=1) at site k
  std::vector<Eigen::VectorXd> means;    // covariate mean per site
  Eigen::MatrixXd covariance;            // shared covariate covariance (d x d)
  Eigen::VectorXd theta_control;         // intercept followed by d slopes
  Eigen::VectorXd theta_treated;
  double noise_sd = 1.0;

  int num_sites() const { return static_cast<int>(site_sizes.size()); }
  int dim() const { return static_cast<int>(covariance.rows()); }

  void validate() const {
    const int K = num_sites();
    const int d = dim();
    if (K == 0) throw ConfigError("linear dgp: no sites");
    if (static_cast<int>(propensities.size()) != K ||
        static_cast<int>(means.size()) != K)
      throw ConfigError("linear dgp: per-site vectors disagree on K");
    for (int k = 0; k < K; ++k) {
      if (site_sizes[k] < 1)
        throw ConfigError("linear dgp: site_sizes[" + std::to_string(k) +
                          "] must be >= 1");
      if (!(propensities[k] > 0.0 && propensities[k] < 1.0))
        throw ConfigError("linear dgp: propensities[" + std::to_string(k) +
                          "] must lie in (0,1)");
      if (means[k].size() != d)
        throw ConfigError("linear dgp: means[" + std::to_string(k) +
                          "] has wrong dimension");
    }
    if (covariance.rows() != covariance.cols())
      throw ConfigError("linear dgp: covariance must be square");
    if (d > 0) {
      Eigen::LLT<Eigen::MatrixXd> llt(covariance);
      if (llt.info() != Eigen::Success)
        throw ConfigError("linear dgp: covariance is not positive definite");
    }
    if (theta_control.size() != d + 1 || theta_treated.size() != d + 1)
      throw ConfigError("linear dgp: coefficient vectors must have length d+1");
    if (!(noise_sd > 0.0))
      throw ConfigError("linear dgp: noise_sd must be > 0");
  }
};

// Baseline hazard families used by the survival designs. Constant gives an
// exponential margin; Weibull covers the heterogeneous-baseline scenarios.
struct BaselineHazard {
  enum class Family { Constant, Weibull };
  Family family = Family::Constant;
  double rate = 1.0;    // Constant: h(t) = rate
  double shape = 1.0;   // Weibull: H(t) = (t/scale)^shape
  double scale = 1.0;

  static BaselineHazard constant(double rate) {
    BaselineHazard b;
    b.family = Family::Constant;
    b.rate = rate;
    return b;
  }
  static BaselineHazard weibull(double shape, double scale) {
    BaselineHazard b;
    b.family = Family::Weibull;
    b.shape = shape;
    b.scale = scale;
    return b;
  }

  double cum_hazard(double t) const {
    if (t <= 0.0) return 0.0;
    return family == Family::Constant ? rate * t
                                      : std::pow(t / scale, shape);
  }
  // Inverse cumulative hazard; the sampling transform T = H^{-1}(E e^{-x'b}).
  double inv_cum_hazard(double u) const {
    return family == Family::Constant ? u / rate
                                      : scale * std::pow(u, 1.0 / shape);
  }
  void validate(const std::string& where) const {
    if (family == Family::Constant) {
      if (!(rate > 0.0)) throw ConfigError(where + ": rate must be > 0");
    } else {
      if (!(shape > 0.0) || !(scale > 0.0))
        throw ConfigError(where + ": shape and scale must be > 0");
    }
  }
};

struct SurvivalDgpSpec {
  std::vector<int> site_sizes;
  std::vector<Eigen::VectorXd> means;
  Eigen::MatrixXd covariance;
  // Cause-specific log-hazard coefficients, shared across sites. One entry for
  // a single-cause design, J entries for competing risks.
  std::vector<Eigen::VectorXd> cause_betas;
  // Baseline hazard per site and cause: baselines[k][j].
  std::vector<std::vector<BaselineHazard>> baselines;
  double censoring_rate = 0.0;  // exponential censoring; 0 disables
  // Administrative end of follow-up; +inf disables truncation.
  double horizon = std::numeric_limits<double>::infinity();

  int num_sites() const { return static_cast<int>(site_sizes.size()); }
  int num_causes() const { return static_cast<int>(cause_betas.size()); }
  int dim() const { return static_cast<int>(covariance.rows()); }

  void validate() const {
    const int K = num_sites();
    const int d = dim();
    const int J = num_causes();
    if (K == 0) throw ConfigError("survival dgp: no sites");
    if (J == 0) throw ConfigError("survival dgp: no causes");
    if (static_cast<int>(means.size()) != K ||
        static_cast<int>(baselines.size()) != K)
      throw ConfigError("survival dgp: per-site vectors disagree on K");
    for (int k = 0; k < K; ++k) {
      if (site_sizes[k] < 1)
        throw ConfigError("survival dgp: site_sizes[" + std::to_string(k) +
                          "] must be >= 1");
      if (means[k].size() != d)
        throw ConfigError("survival dgp: means[" + std::to_string(k) +
                          "] has wrong dimension");
      if (static_cast<int>(baselines[k].size()) != J)
        throw ConfigError("survival dgp: baselines[" + std::to_string(k) +
                          "] must list one hazard per cause");
      for (int j = 0; j < J; ++j)
        baselines[k][j].validate("survival dgp baselines[" +
                                 std::to_string(k) + "][" + std::to_string(j) +
                                 "]");
    }
    for (int j = 0; j < J; ++j)
      if (cause_betas[j].size() != d)
        throw ConfigError("survival dgp: cause_betas[" + std::to_string(j) +
                          "] has wrong dimension");
    if (covariance.rows() != covariance.cols())
      throw ConfigError("survival dgp: covariance must be square");
    if (d > 0) {
      Eigen::LLT<Eigen::MatrixXd> llt(covariance);
      if (llt.info() != Eigen::Success)
        throw ConfigError("survival dgp: covariance is not positive definite");
    }
    if (censoring_rate < 0.0)
      throw ConfigError("survival dgp: censoring_rate must be >= 0");
    if (std::isnan(horizon) || !(horizon > 0.0))
      throw ConfigError("survival dgp: horizon must be positive (inf allowed)");
  }
};

namespace detail {

inline Eigen::MatrixXd chol_factor(const Eigen::MatrixXd& cov) {
  if (cov.rows() == 0) return cov;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw ConfigError("covariance is not positive definite");
  return llt.matrixL();
}

}  // namespace detail

inline SiteSample gen_linear_site(const LinearDgpSpec& spec, int site,
                                  RngStream& rng) {
  spec.validate();
  if (site < 0 || site >= spec.num_sites())
    throw ConfigError("gen_linear_site: site index out of range");
  const int n = spec.site_sizes[site];
  const int d = spec.dim();
  const Eigen::MatrixXd L = detail::chol_factor(spec.covariance);
  Eigen::MatrixXd X(n, d);
  Eigen::VectorXi W(n);
  Eigen::VectorXd Y(n);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x = spec.means[site];
    if (d > 0) x += L * rng.normal_vector(d);
    X.row(i) = x.transpose();
    const int w = rng.bernoulli(spec.propensities[site]) ? 1 : 0;
    W[i] = w;
    const Eigen::VectorXd& th = w ? spec.theta_treated : spec.theta_control;
    Y[i] = th[0] + x.dot(th.tail(d)) + spec.noise_sd * rng.normal();
  }
  return SiteSample::linear(site, std::move(X), std::move(W), std::move(Y));
}

namespace detail {

inline SiteSample gen_survival_site(const SurvivalDgpSpec& spec, int site,
                                    RngStream& rng) {
  const int n = spec.site_sizes[site];
  const int d = spec.dim();
  const int J = spec.num_causes();
  const Eigen::MatrixXd L = chol_factor(spec.covariance);
  Eigen::MatrixXd X(n, d);
  Eigen::VectorXd time(n);
  Eigen::VectorXi event(n);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x = spec.means[site];
    if (d > 0) x += L * rng.normal_vector(d);
    X.row(i) = x.transpose();
    // Latent time per cause via the inverse cumulative hazard; the minimum
    // realises the cause-specific hazard model exactly.
    double t_min = std::numeric_limits<double>::infinity();
    int cause = 0;
    for (int j = 0; j < J; ++j) {
      const double lin = x.dot(spec.cause_betas[j]);
      const double e = rng.exponential(1.0);
      const double t = spec.baselines[site][j].inv_cum_hazard(
          e * std::exp(-lin));
      if (t < t_min) {
        t_min = t;
        cause = j + 1;
      }
    }
    double t_obs = t_min;
    int ev = cause;
    if (spec.censoring_rate > 0.0) {
      const double c = rng.exponential(spec.censoring_rate);
      if (c < t_obs) {
        t_obs = c;
        ev = 0;
      }
    }
    if (t_obs >= spec.horizon && std::isfinite(spec.horizon)) {
      t_obs = spec.horizon;
      ev = 0;
    }
    time[i] = t_obs;
    event[i] = ev;
  }
  return SiteSample::survival(site, std::move(X), std::move(time),
                              std::move(event), J);
}

}  // namespace detail

inline SiteSample gen_cox_site(const SurvivalDgpSpec& spec, int site,
                               RngStream& rng) {
  spec.validate();
  if (spec.num_causes() != 1)
    throw ConfigError("gen_cox_site: expected a single-cause design");
  if (site < 0 || site >= spec.num_sites())
    throw ConfigError("gen_cox_site: site index out of range");
  return detail::gen_survival_site(spec, site, rng);
}

inline SiteSample gen_competing_risks_site(const SurvivalDgpSpec& spec,
                                           int site, RngStream& rng) {
  spec.validate();
  if (spec.num_causes() < 2)
    throw ConfigError("gen_competing_risks_site: need at least two causes");
  if (site < 0 || site >= spec.num_sites())
    throw ConfigError("gen_competing_risks_site: site index out of range");
  return detail::gen_survival_site(spec, site, rng);
}

struct TrueEstimands {
  double ate = 0.0;               // population ATE across the site mixture
  Eigen::VectorXd site_ates;      // per-site ATE
  Eigen::VectorXd site_weights;   // rho_k = n_k / n
};

inline double true_cate(const LinearDgpSpec& spec, const Eigen::VectorXd& x) {
  const int d = spec.dim();
  if (x.size() != d) throw ConfigError("true_cate: covariate dimension");
  const Eigen::VectorXd diff = spec.theta_treated - spec.theta_control;
  return diff[0] + x.dot(diff.tail(d));
}

inline TrueEstimands true_estimands(const LinearDgpSpec& spec) {
  spec.validate();
  const int K = spec.num_sites();
  TrueEstimands out;
  out.site_ates.resize(K);
  out.site_weights.resize(K);
  double n = 0;
  for (int k = 0; k < K; ++k) n += spec.site_sizes[k];
  for (int k = 0; k < K; ++k) {
    out.site_ates[k] = true_cate(spec, spec.means[k]);
    out.site_weights[k] = spec.site_sizes[k] / n;
  }
  out.ate = out.site_weights.dot(out.site_ates);
  return out;
}

// Exact cumulative incidence for constant-rate designs with no covariate
// effect: F_j(t) = (lambda_j / lambda_tot) (1 - exp(-lambda_tot t)). This is
// the closed-form oracle the simulation studies compare against; anything
// fancier has no closed form and is out of scope here.
inline double true_cif(const SurvivalDgpSpec& spec, int site, int cause,
                       double t) {
  spec.validate();
  if (site < 0 || site >= spec.num_sites())
    throw ConfigError("true_cif: site index out of range");
  if (cause < 1 || cause > spec.num_causes())
    throw ConfigError("true_cif: cause out of range");
  for (const auto& b : spec.cause_betas)
    if (b.size() != 0 && b.cwiseAbs().maxCoeff() > 0.0)
      throw ConfigError("true_cif: closed form requires zero covariate effect");
  double total = 0.0;
  for (int j = 0; j < spec.num_causes(); ++j) {
    const auto& bh = spec.baselines[site][j];
    if (bh.family != BaselineHazard::Family::Constant)
      throw ConfigError("true_cif: closed form requires constant rates");
    total += bh.rate;
  }
  const double lam_j = spec.baselines[site][cause - 1].rate;
  if (t <= 0.0) return 0.0;
  return lam_j / total * (1.0 - std::exp(-total * t));
}

// Marginal survival for single-cause designs with zero covariate effect.
inline double true_survival(const SurvivalDgpSpec& spec, int site, double t) {
  spec.validate();
  if (spec.num_causes() != 1)
    throw ConfigError("true_survival: single-cause designs only");
  if (spec.cause_betas[0].size() != 0 &&
      spec.cause_betas[0].cwiseAbs().maxCoeff() > 0.0)
    throw ConfigError("true_survival: closed form requires zero covariate effect");
  return std::exp(-spec.baselines[site][0].cum_hazard(t));
}

}  // namespace fedci
