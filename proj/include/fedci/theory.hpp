#pragma once

// Closed-form asymptotic bias/variance predictions — the reference lines the
// Monte Carlo study is checked against.
//
// Linear rows (variance of the ATE estimate, finite-n scale):
//   Local_k:   sigma^2/(n_k p_k(1-p_k)) + ||db||_Sigma^2 / n_k
//   Meta-SW:   (sigma^2/n) sum_k rho_k/(p_k(1-p_k)) + ||db||_Sigma^2 / n
//   1S-SW, 1S-IVW, GD, Pooled (and FedProx, which fits the same pooled
//   least-squares problem): sigma^2/(n p(1-p)) + ||db||_Sigma^2 / n,
//   with p = sum rho_k p_k and db the slope difference between arms.
//   Meta-IVW carries no printed row; the harmonic combination
//   1/ sum_k 1/V^inf(Local_k) is the natural fixed-weight limit and
//   reproduces the published ordering chain.
// These scalar rows are exact when site covariate means coincide; with
// shifted means the bias entries below are the quantities of interest.
//
// Cox rows (info H_k is minus the mean partial-likelihood Hessian at beta0):
//   Pooled/FedProx: bias 0, covariance (sum n_k H_k)^{-1}
//   FedAvg:         bias sum rho_k delta_k, cov sum rho_k^2 (n_k H_k)^{-1}
//   Meta fixed/random: bias sum wt_k delta_k, cov sum wt_k^2 (n_k H_k)^{-1}
//
// Cumulative-incidence rows at each grid time, with V_k(t) in the
// large-sample per-site scale lim n_k Var(F_k(t)) (so every variance below is
// reported in final-estimator scale by dividing per-site contributions by
// n_k):
//   Pooled/FedProx: bias 0, variance (1/n) sum rho_k V_k(t)
//   FedAvg / Meta fixed: bias sum rho_k b_k(t), variance sum rho_k^2 V_k(t)/n_k
//   Meta random: time-varying weights wt_k(t) = norm (V_k(t)/n_k + tau^2)^{-1}.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedci/dgp.hpp"
#include "fedci/errors.hpp"

namespace fedci {

enum class EstimatorKind {
  Local,
  MetaSW,
  MetaIVW,
  OneShotSW,
  OneShotIVW,
  GD,
  Pooled,
  FedProx,
  FedAvg,
  MetaFixed,
  MetaRandom,
};

inline std::string estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::Local: return "local";
    case EstimatorKind::MetaSW: return "meta-sw";
    case EstimatorKind::MetaIVW: return "meta-ivw";
    case EstimatorKind::OneShotSW: return "one-shot-sw";
    case EstimatorKind::OneShotIVW: return "one-shot-ivw";
    case EstimatorKind::GD: return "gd";
    case EstimatorKind::Pooled: return "pooled";
    case EstimatorKind::FedProx: return "fedprox";
    case EstimatorKind::FedAvg: return "fedavg";
    case EstimatorKind::MetaFixed: return "meta-fixed";
    case EstimatorKind::MetaRandom: return "meta-random";
  }
  return "?";
}

struct AsymptoticPrediction {
  EstimatorKind kind = EstimatorKind::Pooled;
  Eigen::VectorXd times;       // empty for scalar predictions
  Eigen::VectorXd bias;        // length 1, d, or |times|
  Eigen::VectorXd variance;    // length 1 or |times|
  Eigen::MatrixXd covariance;  // d x d, Cox kinds only
  bool bias_known = true;
};

namespace detail {

struct LinearAsymptotics {
  int K = 0;
  double n = 0, p_bar = 0, sigma2 = 0, slope_disp = 0;
  Eigen::VectorXd rho, taus;
  double tau_global = 0;
  std::vector<double> local_var;
};

inline LinearAsymptotics linear_asymptotics(const LinearDgpSpec& spec) {
  spec.validate();
  LinearAsymptotics a;
  a.K = spec.num_sites();
  const int d = spec.dim();
  a.rho.resize(a.K);
  a.taus.resize(a.K);
  for (int k = 0; k < a.K; ++k) a.n += spec.site_sizes[k];
  a.sigma2 = spec.noise_sd * spec.noise_sd;
  const Eigen::VectorXd db =
      spec.theta_treated.tail(d) - spec.theta_control.tail(d);
  a.slope_disp = d > 0 ? db.dot(spec.covariance * db) : 0.0;
  for (int k = 0; k < a.K; ++k) {
    a.rho[k] = spec.site_sizes[k] / a.n;
    a.p_bar += a.rho[k] * spec.propensities[k];
    a.taus[k] = true_cate(spec, spec.means[k]);
  }
  a.tau_global = a.rho.dot(a.taus);
  a.local_var.resize(a.K);
  for (int k = 0; k < a.K; ++k) {
    const double nk = spec.site_sizes[k];
    const double pk = spec.propensities[k];
    a.local_var[k] = a.sigma2 / (nk * pk * (1.0 - pk)) + a.slope_disp / nk;
  }
  return a;
}

}  // namespace detail

// Asymptotic ATE variance (and bias against the mixture estimand) for the
// linear designs. `site` selects which site a Local prediction refers to.
inline AsymptoticPrediction v_infinity_linear(EstimatorKind kind,
                                              const LinearDgpSpec& spec,
                                              int site = 0) {
  const auto a = detail::linear_asymptotics(spec);
  AsymptoticPrediction out;
  out.kind = kind;
  out.bias = Eigen::VectorXd::Zero(1);
  out.variance = Eigen::VectorXd::Zero(1);
  switch (kind) {
    case EstimatorKind::Local: {
      if (site < 0 || site >= a.K)
        throw ConfigError("v_infinity_linear: site out of range");
      out.variance[0] = a.local_var[site];
      out.bias[0] = a.taus[site] - a.tau_global;
      break;
    }
    case EstimatorKind::MetaSW: {
      double acc = 0;
      for (int k = 0; k < a.K; ++k) {
        const double pk = spec.propensities[k];
        acc += a.rho[k] / (pk * (1.0 - pk));
      }
      out.variance[0] = a.sigma2 / a.n * acc + a.slope_disp / a.n;
      break;
    }
    case EstimatorKind::MetaIVW: {
      double inv = 0;
      for (int k = 0; k < a.K; ++k) inv += 1.0 / a.local_var[k];
      out.variance[0] = 1.0 / inv;
      // Inverse-variance weights drift away from rho_k whenever local
      // variances differ, so under covariate shift the combination aims at a
      // reweighted estimand, not the mixture ATE.
      double bias = 0;
      for (int k = 0; k < a.K; ++k)
        bias += (1.0 / a.local_var[k]) / inv * a.taus[k];
      out.bias[0] = bias - a.tau_global;
      break;
    }
    case EstimatorKind::OneShotSW:
    case EstimatorKind::OneShotIVW:
    case EstimatorKind::GD:
    case EstimatorKind::Pooled:
    case EstimatorKind::FedProx:
      out.variance[0] =
          a.sigma2 / (a.n * a.p_bar * (1.0 - a.p_bar)) + a.slope_disp / a.n;
      break;
    default:
      throw ConfigError("v_infinity_linear: unknown estimator kind " +
                        estimator_name(kind));
  }
  return out;
}

// Cox table rows. `infos` holds per-site H_k on the mean (per-observation)
// scale, as reported by fit_cox; `weights` feeds the Meta rows and defaults
// to information-trace weights for Meta(fixed).
inline AsymptoticPrediction cox_asymptotics(
    EstimatorKind kind, const std::vector<Eigen::VectorXd>& deltas,
    const std::vector<Eigen::MatrixXd>& infos, const std::vector<double>& nks,
    Eigen::VectorXd weights = Eigen::VectorXd()) {
  const int K = static_cast<int>(nks.size());
  if (K == 0 || deltas.size() != static_cast<std::size_t>(K) ||
      infos.size() != static_cast<std::size_t>(K))
    throw ConfigError("cox_asymptotics: inconsistent site lists");
  const int d = static_cast<int>(deltas.front().size());
  double n = 0;
  for (double nk : nks) n += nk;
  Eigen::VectorXd rho(K);
  for (int k = 0; k < K; ++k) rho[k] = nks[k] / n;

  if (weights.size() == 0 &&
      (kind == EstimatorKind::MetaFixed || kind == EstimatorKind::MetaRandom)) {
    weights.resize(K);
    for (int k = 0; k < K; ++k) weights[k] = nks[k] * infos[k].trace();
    weights /= weights.sum();
  }

  auto inv_total_info = [&]() {
    Eigen::MatrixXd total = Eigen::MatrixXd::Zero(d, d);
    for (int k = 0; k < K; ++k) total += nks[k] * infos[k];
    Eigen::LDLT<Eigen::MatrixXd> ldlt(total);
    Eigen::MatrixXd inv = ldlt.solve(Eigen::MatrixXd::Identity(d, d));
    if (ldlt.info() != Eigen::Success || !inv.allFinite())
      throw DegenerateWeights("cox_asymptotics: singular information sum");
    return inv;
  };
  auto site_inv_info = [&](int k) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(nks[k] * infos[k]);
    Eigen::MatrixXd inv = ldlt.solve(Eigen::MatrixXd::Identity(d, d));
    if (ldlt.info() != Eigen::Success || !inv.allFinite())
      throw DegenerateWeights("cox_asymptotics: singular site information");
    return inv;
  };

  AsymptoticPrediction out;
  out.kind = kind;
  out.bias = Eigen::VectorXd::Zero(d);
  out.covariance = Eigen::MatrixXd::Zero(d, d);
  switch (kind) {
    case EstimatorKind::Pooled:
    case EstimatorKind::FedProx:
      out.covariance = inv_total_info();
      break;
    case EstimatorKind::FedAvg:
      for (int k = 0; k < K; ++k) {
        out.bias += rho[k] * deltas[k];
        out.covariance += rho[k] * rho[k] * site_inv_info(k);
      }
      break;
    case EstimatorKind::MetaFixed:
    case EstimatorKind::MetaRandom:
      if (weights.size() != K)
        throw ConfigError("cox_asymptotics: weight length mismatch");
      for (int k = 0; k < K; ++k) {
        out.bias += weights[k] * deltas[k];
        out.covariance += weights[k] * weights[k] * site_inv_info(k);
      }
      break;
    default:
      throw ConfigError("cox_asymptotics: unknown estimator kind " +
                        estimator_name(kind));
  }
  out.variance = out.covariance.diagonal();
  return out;
}

// Cumulative-incidence table rows on a common grid. b_k and V_k are per-site
// curves sampled on `grid`; V_k is in per-site scale (n_k Var). `re_weights`
// (K x |grid|) supplies the time-varying Meta(random) weights.
inline AsymptoticPrediction aj_asymptotics(
    EstimatorKind kind, const Eigen::VectorXd& grid,
    const std::vector<Eigen::VectorXd>& b_curves,
    const std::vector<Eigen::VectorXd>& v_curves,
    const std::vector<double>& nks,
    const Eigen::MatrixXd& re_weights = Eigen::MatrixXd()) {
  const int K = static_cast<int>(nks.size());
  const int G = static_cast<int>(grid.size());
  if (K == 0 || b_curves.size() != static_cast<std::size_t>(K) ||
      v_curves.size() != static_cast<std::size_t>(K))
    throw ConfigError("aj_asymptotics: inconsistent site lists");
  for (int k = 0; k < K; ++k)
    if (b_curves[k].size() != G || v_curves[k].size() != G)
      throw ConfigError("aj_asymptotics: curve/grid length mismatch");
  double n = 0;
  for (double nk : nks) n += nk;

  AsymptoticPrediction out;
  out.kind = kind;
  out.times = grid;
  out.bias = Eigen::VectorXd::Zero(G);
  out.variance = Eigen::VectorXd::Zero(G);
  for (int g = 0; g < G; ++g) {
    switch (kind) {
      case EstimatorKind::Pooled:
      case EstimatorKind::FedProx:
        for (int k = 0; k < K; ++k)
          out.variance[g] += (nks[k] / n) * v_curves[k][g] / n;
        break;
      case EstimatorKind::FedAvg:
      case EstimatorKind::MetaFixed:
        // Meta(fixed) combines with pointwise precision weights when they are
        // supplied; otherwise both rows fall back to size weights rho_k.
        for (int k = 0; k < K; ++k) {
          double w = nks[k] / n;
          if (kind == EstimatorKind::MetaFixed && re_weights.rows() == K &&
              re_weights.cols() == G)
            w = re_weights(k, g);
          out.bias[g] += w * b_curves[k][g];
          out.variance[g] += w * w * v_curves[k][g] / nks[k];
        }
        break;
      case EstimatorKind::MetaRandom: {
        if (re_weights.rows() != K || re_weights.cols() != G)
          throw ConfigError("aj_asymptotics: random-effects weights must be K x |grid|");
        for (int k = 0; k < K; ++k) {
          const double w = re_weights(k, g);
          out.bias[g] += w * b_curves[k][g];
          out.variance[g] += w * w * v_curves[k][g] / nks[k];
        }
        break;
      }
      default:
        throw ConfigError("aj_asymptotics: unknown estimator kind " +
                          estimator_name(kind));
    }
  }
  return out;
}

// The Meta(random) pointwise weights: wt_k(t) = norm (V_k(t)/n_k + tau^2)^{-1}.
inline Eigen::MatrixXd random_effects_weights(
    const std::vector<Eigen::VectorXd>& v_curves,
    const std::vector<double>& nks, const Eigen::VectorXd& tau2_by_time) {
  const int K = static_cast<int>(nks.size());
  if (K == 0 || v_curves.size() != static_cast<std::size_t>(K))
    throw ConfigError("random_effects_weights: inconsistent site lists");
  const int G = static_cast<int>(v_curves.front().size());
  if (tau2_by_time.size() != G)
    throw ConfigError("random_effects_weights: tau2 grid mismatch");
  Eigen::MatrixXd w(K, G);
  for (int g = 0; g < G; ++g) {
    double total = 0;
    for (int k = 0; k < K; ++k) {
      w(k, g) = 1.0 / (v_curves[k][g] / nks[k] + tau2_by_time[g]);
      total += w(k, g);
    }
    if (!(total > 0))
      throw DegenerateWeights("random_effects_weights: zero weight mass");
    w.col(g) /= total;
  }
  return w;
}

}  // namespace fedci
