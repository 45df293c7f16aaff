#pragma once

// Server-side combination rules: fixed- and random-effects meta-analysis,
// similarity weighting on covariate summaries, one-shot pooled solves from
// Gram summaries, information-weighted Cox pooling, and pointwise aggregation
// of cumulative-incidence curves.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedci/errors.hpp"
#include "fedci/linear.hpp"
#include "fedci/survival.hpp"

namespace fedci {

enum class WeightKind {
  SampleSize,      // w ~ n_k
  InverseVariance, // w ~ 1 / V_k
  RandomEffects,   // w ~ 1 / (V_k + tau^2), tau^2 estimated
  Kernel,          // w ~ exp(-||m_k - m_ref||^2 / (2 bw^2))
  Distance,        // w ~ 1 / dist(m_k, m_ref)
};

enum class DistanceMetric { Euclidean, Mahalanobis };

struct WeightScheme {
  WeightKind kind = WeightKind::SampleSize;
  double bandwidth = 1.0;                // Kernel only
  DistanceMetric metric = DistanceMetric::Euclidean;  // Distance only

  std::string name() const {
    switch (kind) {
      case WeightKind::SampleSize: return "sample-size";
      case WeightKind::InverseVariance: return "inverse-variance";
      case WeightKind::RandomEffects: return "random-effects";
      case WeightKind::Kernel: return "kernel";
      case WeightKind::Distance: return "distance";
    }
    return "?";
  }
};

struct AggregateEstimate {
  double value = 0.0;
  double variance = 0.0;
  Eigen::VectorXd weights;   // normalized per-site weights, sum 1
  std::string scheme;
  double tau2 = 0.0;         // between-site variance (random effects)
  double n = 0.0;
};

// DerSimonian-Laird between-site variance from (estimate, variance) pairs,
// truncated at zero.
inline double estimate_tau2(const std::vector<AteEstimate>& ests) {
  const int K = static_cast<int>(ests.size());
  if (K < 2)
    throw DegenerateWeights("estimate_tau2: need at least two sites");
  double sw = 0, sw2 = 0, swy = 0;
  for (const auto& e : ests) {
    if (!(e.variance > 0.0))
      throw DegenerateWeights("estimate_tau2: nonpositive variance");
    const double w = 1.0 / e.variance;
    sw += w;
    sw2 += w * w;
    swy += w * e.value;
  }
  const double ybar = swy / sw;
  double q = 0;
  for (const auto& e : ests) q += (e.value - ybar) * (e.value - ybar) / e.variance;
  const double denom = sw - sw2 / sw;
  if (denom <= 0.0) return 0.0;
  return std::max(0.0, (q - (K - 1)) / denom);
}

// Meta-analytic combination of per-site scalar estimates. Sample-size weights
// never look at the variances; inverse-variance and random-effects weights
// require strictly positive ones.
inline AggregateEstimate meta_combine(const std::vector<AteEstimate>& ests,
                                      const WeightScheme& scheme) {
  const int K = static_cast<int>(ests.size());
  if (K == 0) throw DegenerateWeights("meta_combine: empty estimate list");
  Eigen::VectorXd w(K);
  double tau2 = 0.0;
  switch (scheme.kind) {
    case WeightKind::SampleSize:
      for (int k = 0; k < K; ++k) w[k] = ests[k].n;
      break;
    case WeightKind::InverseVariance:
      for (int k = 0; k < K; ++k) {
        if (!(ests[k].variance > 0.0))
          throw DegenerateWeights("meta_combine: nonpositive variance");
        w[k] = 1.0 / ests[k].variance;
      }
      break;
    case WeightKind::RandomEffects:
      tau2 = K >= 2 ? estimate_tau2(ests) : 0.0;
      for (int k = 0; k < K; ++k) {
        if (!(ests[k].variance > 0.0))
          throw DegenerateWeights("meta_combine: nonpositive variance");
        w[k] = 1.0 / (ests[k].variance + tau2);
      }
      break;
    default:
      throw ConfigError("meta_combine: similarity schemes need covariate "
                        "summaries; use similarity_weights");
  }
  const double total = w.sum();
  if (!(total > 0.0))
    throw DegenerateWeights("meta_combine: zero total weight");
  w /= total;
  AggregateEstimate out;
  out.scheme = scheme.name();
  out.weights = w;
  out.tau2 = tau2;
  for (int k = 0; k < K; ++k) {
    out.value += w[k] * ests[k].value;
    out.variance += w[k] * w[k] * ests[k].variance;
    out.n += ests[k].n;
  }
  return out;
}

struct ReferenceSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  double n = 0.0;
};

// Pooled covariate mean/covariance assembled from per-site Gram summaries
// (both arms together), again without touching rows.
inline ReferenceSummary make_reference(const std::vector<GramSummary>& gs) {
  if (gs.empty()) throw ConfigError("make_reference: no summaries");
  const int d = gs.front().dim();
  ReferenceSummary ref;
  ref.mean = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
  for (const auto& g : gs) {
    if (g.dim() != d) throw ConfigError("make_reference: dimension mismatch");
    ref.mean += g.n * g.mean_x;
    // Covariate block of the per-arm Grams, intercept row/col stripped.
    for (int a = 0; a < 2; ++a)
      m2 += g.arms[a].gram.bottomRightCorner(d, d);
    ref.n += g.n;
  }
  ref.mean /= ref.n;
  ref.cov = (m2 - ref.n * ref.mean * ref.mean.transpose()) /
            std::max(ref.n - 1.0, 1.0);
  return ref;
}

// Similarity of each site's covariate mean to a reference population,
// normalized to sum one. Distance weights are floored at 1e-9 distance so a
// site sitting exactly on the reference cannot blow up the weight vector.
inline Eigen::VectorXd similarity_weights(
    const std::vector<Eigen::VectorXd>& site_means,
    const ReferenceSummary& ref, const WeightScheme& scheme) {
  const int K = static_cast<int>(site_means.size());
  if (K == 0) throw DegenerateWeights("similarity_weights: no sites");
  Eigen::VectorXd w(K);
  Eigen::LDLT<Eigen::MatrixXd> cov_ldlt;
  if (scheme.kind == WeightKind::Distance &&
      scheme.metric == DistanceMetric::Mahalanobis) {
    cov_ldlt.compute(ref.cov);
    if (cov_ldlt.info() != Eigen::Success)
      throw DegenerateWeights("similarity_weights: reference covariance not PD");
  }
  for (int k = 0; k < K; ++k) {
    if (site_means[k].size() != ref.mean.size())
      throw ConfigError("similarity_weights: dimension mismatch");
    const Eigen::VectorXd diff = site_means[k] - ref.mean;
    switch (scheme.kind) {
      case WeightKind::Kernel: {
        if (!(scheme.bandwidth > 0.0))
          throw ConfigError("similarity_weights: bandwidth must be > 0");
        const double b2 = scheme.bandwidth * scheme.bandwidth;
        w[k] = std::exp(-diff.squaredNorm() / (2.0 * b2));
        break;
      }
      case WeightKind::Distance: {
        double dist;
        if (scheme.metric == DistanceMetric::Mahalanobis)
          dist = std::sqrt(std::max(0.0, diff.dot(cov_ldlt.solve(diff))));
        else
          dist = diff.norm();
        w[k] = 1.0 / std::max(dist, 1e-9);
        break;
      }
      default:
        throw ConfigError("similarity_weights: scheme is not similarity-based");
    }
  }
  const double total = w.sum();
  if (!(total > 0.0) || !std::isfinite(total))
    throw DegenerateWeights("similarity_weights: degenerate weight mass");
  return w / total;
}

enum class OneShotMode { SampleSize, GramWeighted };

struct OneShotResult {
  AggregateEstimate estimate;
  Eigen::VectorXd theta0;
  Eigen::VectorXd theta1;
};

// One-shot federated ATE from per-site summaries.
//
// SampleSize: every site solves its own arms, the server averages the
// coefficient vectors with n_k/n weights. GramWeighted: the server sums the
// per-arm normal equations and solves once — algebraically identical to OLS
// on the concatenated rows, which is the entire point of shipping Grams.
// Either way the ATE evaluates the contrast at the pooled covariate mean, and
// the variance is the pooled plug-in computed from the same summaries.
inline OneShotResult one_shot_ate(const std::vector<GramSummary>& gs,
                                  OneShotMode mode) {
  const int K = static_cast<int>(gs.size());
  if (K == 0) throw DegenerateWeights("one_shot_ate: no summaries");
  const int d = gs.front().dim();
  const int p = d + 1;
  GramSummary total = gs.front();
  for (int k = 1; k < K; ++k) total += gs[k];
  if (total.arms[0].n == 0 || total.arms[1].n == 0)
    throw DegenerateWeights("one_shot_ate: a treatment arm is empty overall");

  Eigen::VectorXd theta0, theta1;
  if (mode == OneShotMode::GramWeighted) {
    theta0 = solve_arm(total.arms[0], d, 0, /*federated=*/true);
    theta1 = solve_arm(total.arms[1], d, 1, /*federated=*/true);
  } else {
    // Per-arm sample-size weights: each site's coefficient vector counts in
    // proportion to the rows that estimated it. (Weighting by total site size
    // instead would drag the federated model toward sites whose arm is
    // thinly populated and lose the pooled-level asymptotics.)
    theta0 = Eigen::VectorXd::Zero(p);
    theta1 = Eigen::VectorXd::Zero(p);
    for (const auto& g : gs) {
      const double w0 = static_cast<double>(g.arms[0].n) / total.arms[0].n;
      const double w1 = static_cast<double>(g.arms[1].n) / total.arms[1].n;
      theta0 += w0 * solve_arm(g.arms[0], d, 0, /*federated=*/false);
      theta1 += w1 * solve_arm(g.arms[1], d, 1, /*federated=*/false);
    }
  }
  const Eigen::VectorXd diff = theta1 - theta0;
  AggregateEstimate est;
  est.scheme = mode == OneShotMode::GramWeighted ? "one-shot-ivw" : "one-shot-sw";
  est.value = diff[0] + total.mean_x.dot(diff.tail(d));
  est.n = total.n;
  est.weights.resize(K);
  for (int k = 0; k < K; ++k)
    est.weights[k] = static_cast<double>(gs[k].n) / total.n;

  // Pooled plug-in variance, from summaries alone. Residual sums use each
  // arm's own pooled solution; the covariate covariance comes from the summed
  // second moments.
  const double n = total.n;
  double ssr = 0.0;
  {
    // For the SampleSize route the averaged theta is not the pooled LS
    // minimizer, so compute the quadratic form explicitly.
    const Eigen::VectorXd* th[2] = {&theta0, &theta1};
    for (int a = 0; a < 2; ++a) {
      const auto& arm = total.arms[a];
      ssr += arm.yty - 2.0 * th[a]->dot(arm.xty) +
             th[a]->dot(arm.gram * (*th[a]));
    }
  }
  const double df = n - 2.0 * p;
  const double sigma2 = std::max(ssr, 0.0) / std::max(df, 1.0);
  const double p_treat = static_cast<double>(total.arms[1].n) / n;
  if (!(p_treat > 0.0 && p_treat < 1.0))
    throw DegenerateWeights("one_shot_ate: a treatment arm is empty overall");
  Eigen::MatrixXd cov_x(0, 0);
  if (d > 0) {
    Eigen::MatrixXd m2 = total.arms[0].gram.bottomRightCorner(d, d) +
                         total.arms[1].gram.bottomRightCorner(d, d);
    cov_x = (m2 - n * total.mean_x * total.mean_x.transpose()) /
            std::max(n - 1.0, 1.0);
  }
  est.variance = detail::ate_plugin_variance(sigma2, n, p_treat, diff.tail(d),
                                             cov_x);
  OneShotResult out;
  out.estimate = est;
  out.theta0 = theta0;
  out.theta1 = theta1;
  return out;
}

struct FedCoxEstimate {
  Eigen::VectorXd beta;
  Eigen::MatrixXd covariance;
  Eigen::VectorXd weights;  // normalized information mass per site (trace)
};

// Information-weighted pooling of per-site Cox fits:
//   beta = (sum n_k H_k)^{-1} sum n_k H_k beta_k,  cov = (sum n_k H_k)^{-1}.
inline FedCoxEstimate fed_cox_ivw(const std::vector<CoxFit>& fits) {
  const int K = static_cast<int>(fits.size());
  if (K == 0) throw DegenerateWeights("fed_cox_ivw: no fits");
  const int d = static_cast<int>(fits.front().beta.size());
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd w(K);
  for (int k = 0; k < K; ++k) {
    const auto& f = fits[k];
    if (!f.converged)
      throw DegenerateWeights("fed_cox_ivw: unconverged site fit");
    if (f.beta.size() != d)
      throw ConfigError("fed_cox_ivw: dimension mismatch");
    const Eigen::MatrixXd ik = f.n * f.info;
    total += ik;
    rhs.noalias() += ik * f.beta;
    w[k] = ik.trace();
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(total);
  if (ldlt.info() != Eigen::Success)
    throw DegenerateWeights("fed_cox_ivw: singular total information");
  FedCoxEstimate out;
  out.beta = ldlt.solve(rhs);
  out.covariance = ldlt.solve(Eigen::MatrixXd::Identity(d, d));
  if (!out.beta.allFinite())
    throw DegenerateWeights("fed_cox_ivw: singular total information");
  out.weights = w / w.sum();
  return out;
}

struct CifAggregateResult {
  CifEstimate estimate;
  std::string scheme;
  int floored_points = 0;     // variance floor applied this many times
  int isotonized_points = 0;  // monotonicity repairs applied
};

// Pointwise combination of per-site cumulative-incidence curves on the union
// of their jump grids. Inverse-variance and random-effects weights vary with
// t; since a convex combination with moving weights need not be monotone even
// when every input is, the combined curve is clamped to [0,1] and isotonized,
// and the number of repairs is reported. Variances are floored at 1e-9 before
// inversion (early times routinely report zero variance).
inline CifAggregateResult cif_aggregate(const std::vector<CifEstimate>& cifs,
                                        const WeightScheme& scheme) {
  const int K = static_cast<int>(cifs.size());
  if (K == 0) throw DegenerateWeights("cif_aggregate: no curves");
  if (scheme.kind != WeightKind::SampleSize &&
      scheme.kind != WeightKind::InverseVariance &&
      scheme.kind != WeightKind::RandomEffects)
    throw ConfigError("cif_aggregate: unsupported weight scheme");
  constexpr double kVarFloor = 1e-9;
  const int cause = cifs.front().cause;
  double n_total = 0;
  std::set<double> grid;
  for (const auto& c : cifs) {
    if (c.cause != cause) throw ConfigError("cif_aggregate: mixed causes");
    n_total += c.n;
    for (Eigen::Index i = 0; i < c.curve.size(); ++i)
      grid.insert(c.curve.times[i]);
  }
  CifAggregateResult out;
  out.scheme = scheme.name();
  const int G = static_cast<int>(grid.size());
  Eigen::VectorXd times(G), values(G), variances(G);
  int g = 0;
  double running_max = 0.0;
  for (double t : grid) {
    Eigen::VectorXd f(K), v(K), w(K);
    for (int k = 0; k < K; ++k) {
      f[k] = cifs[k].curve.value_at(t);
      v[k] = cifs[k].curve.variance_at(t);
    }
    switch (scheme.kind) {
      case WeightKind::SampleSize:
        for (int k = 0; k < K; ++k) w[k] = cifs[k].n / n_total;
        break;
      case WeightKind::InverseVariance:
        for (int k = 0; k < K; ++k) {
          if (v[k] < kVarFloor) ++out.floored_points;
          w[k] = 1.0 / std::max(v[k], kVarFloor);
        }
        w /= w.sum();
        break;
      case WeightKind::RandomEffects: {
        double tau2 = 0.0;
        if (K >= 2) {
          std::vector<AteEstimate> pts(K);
          for (int k = 0; k < K; ++k) {
            if (v[k] < kVarFloor) ++out.floored_points;
            pts[k] = AteEstimate{f[k], std::max(v[k], kVarFloor),
                                 cifs[k].site_id,
                                 static_cast<double>(cifs[k].n)};
          }
          tau2 = estimate_tau2(pts);
        }
        for (int k = 0; k < K; ++k)
          w[k] = 1.0 / (std::max(v[k], kVarFloor) + tau2);
        w /= w.sum();
        break;
      }
      default:
        break;
    }
    double val = w.dot(f);
    double var = (w.array().square() * v.array()).sum();
    val = std::min(1.0, std::max(0.0, val));
    if (val < running_max) {
      val = running_max;
      ++out.isotonized_points;
    }
    running_max = val;
    times[g] = t;
    values[g] = val;
    variances[g] = var;
    ++g;
  }
  out.estimate.cause = cause;
  out.estimate.n = static_cast<int>(n_total);
  out.estimate.site_id = -1;
  out.estimate.curve.initial_value = 0.0;
  out.estimate.curve.times = times;
  out.estimate.curve.values = values;
  out.estimate.curve.variances = variances;
  return out;
}

}  // namespace fedci
