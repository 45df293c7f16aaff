#pragma once

// Survival estimators: Cox partial likelihood (Breslow ties), Kaplan-Meier
// with Greenwood variance, Nelson-Aalen, and the Aalen-Johansen cumulative
// incidence for competing risks with a martingale plug-in variance.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "fedci/errors.hpp"
#include "fedci/sample.hpp"

namespace fedci {

// Right-continuous step function: value_at(t) is the value attached to the
// largest jump time <= t, or the initial value before any jump.
struct StepCurve {
  Eigen::VectorXd times;
  Eigen::VectorXd values;
  Eigen::VectorXd variances;
  double initial_value = 0.0;

  Eigen::Index size() const { return times.size(); }

  double value_at(double t) const {
    const Eigen::Index i = last_jump_index(t);
    return i < 0 ? initial_value : values[i];
  }
  double variance_at(double t) const {
    const Eigen::Index i = last_jump_index(t);
    return i < 0 ? 0.0 : variances[i];
  }

 private:
  Eigen::Index last_jump_index(double t) const {
    const double* begin = times.data();
    const double* end = begin + times.size();
    return std::upper_bound(begin, end, t) - begin - 1;
  }
};

struct CoxFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd info;   // minus the Hessian of the mean log-likelihood
  double loglik = 0.0;    // partial log-likelihood (sum scale) at beta
  int n = 0;
  int iterations = 0;
  bool converged = false;
  int site_id = -1;
};

struct CoxDerivs {
  double loglik = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd neg_hessian;
};

namespace detail {

struct SurvOrder {
  std::vector<Eigen::Index> idx;  // ascending follow-up time
};

inline SurvOrder sort_by_time(const Eigen::VectorXd& time) {
  SurvOrder o;
  o.idx.resize(time.size());
  std::iota(o.idx.begin(), o.idx.end(), Eigen::Index{0});
  std::stable_sort(o.idx.begin(), o.idx.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     return time[a] < time[b];
                   });
  return o;
}

}  // namespace detail

// Breslow partial log-likelihood with analytic gradient and negative Hessian,
// treating events of `cause` as events and everything else (censoring or a
// competing cause) as censored at its time. Everyone still in follow-up at an
// event time, including ties, is in the risk set.
inline CoxDerivs cox_partial_loglik(const Eigen::VectorXd& beta,
                                    const SiteSample& sample, int cause = 1) {
  if (sample.kind() != SampleKind::Survival)
    throw ConfigError("cox_partial_loglik: survival samples only");
  const int d = sample.dim();
  if (beta.size() != d)
    throw ConfigError("cox_partial_loglik: beta must have length d");
  if (cause < 1 || cause > sample.num_causes())
    throw ConfigError("cox_partial_loglik: unknown cause");
  const auto& X = sample.X();
  const auto& time = sample.time();
  const auto& event = sample.event();
  const auto order = detail::sort_by_time(time);
  const Eigen::Index n = sample.n();

  CoxDerivs out;
  out.grad = Eigen::VectorXd::Zero(d);
  out.neg_hessian = Eigen::MatrixXd::Zero(d, d);

  // Walk from the largest time downward, growing the risk-set sums
  // S0 = sum e^eta, S1 = sum x e^eta, S2 = sum x x' e^eta.
  double S0 = 0.0;
  Eigen::VectorXd S1 = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd S2 = Eigen::MatrixXd::Zero(d, d);
  long total_events = 0;
  Eigen::Index i = n - 1;
  while (i >= 0) {
    const double t = time[order.idx[i]];
    Eigen::Index j = i;
    while (j >= 0 && time[order.idx[j]] == t) --j;
    // Add everyone tied at t to the risk set first.
    for (Eigen::Index r = j + 1; r <= i; ++r) {
      const Eigen::Index row = order.idx[r];
      const Eigen::VectorXd x = X.row(row).transpose();
      const double w = std::exp(x.dot(beta));
      S0 += w;
      S1.noalias() += w * x;
      S2.noalias() += w * x * x.transpose();
    }
    // Then account for the events at t.
    int dt = 0;
    for (Eigen::Index r = j + 1; r <= i; ++r) {
      const Eigen::Index row = order.idx[r];
      if (event[row] != cause) continue;
      ++dt;
      const Eigen::VectorXd x = X.row(row).transpose();
      out.loglik += x.dot(beta);
      out.grad.noalias() += x;
    }
    if (dt > 0) {
      total_events += dt;
      out.loglik -= dt * std::log(S0);
      const Eigen::VectorXd xbar = S1 / S0;
      out.grad.noalias() -= dt * xbar;
      out.neg_hessian.noalias() +=
          dt * (S2 / S0 - xbar * xbar.transpose());
    }
    i = j;
  }
  if (total_events == 0)
    throw EmptyRiskSet("cox_partial_loglik: no events of cause " +
                       std::to_string(cause));
  return out;
}

namespace detail {

// Newton with step-halving, shared by the single-sample and stratified Cox
// fits. `derivs_at` evaluates the partial-likelihood derivatives at a trial
// beta, summed over whatever samples the caller owns (n observations in
// total). The likelihood is concave, so the Newton direction ascends and
// halving always finds an improving step. Separation (a monotone likelihood)
// is flagged two ways: iterates running past a fixed box, and a terminal
// Newton step that stays large after the score has vanished — under
// separation the score decays like exp(-x'b) but the information decays even
// faster, so the step never contracts the way it does at an interior optimum.
template <class DerivsFn>
inline CoxFit cox_newton(DerivsFn&& derivs_at, double n, Eigen::VectorXd beta,
                         double tol, int max_iter) {
  constexpr double kBetaBox = 50.0;
  CoxDerivs derivs = derivs_at(beta);
  CoxFit fit;
  for (int it = 0; it <= max_iter; ++it) {
    if (derivs.grad.cwiseAbs().maxCoeff() / n < tol) {
      Eigen::LDLT<Eigen::MatrixXd> term(derivs.neg_hessian);
      const Eigen::VectorXd resid_step = term.solve(derivs.grad);
      if (term.info() == Eigen::Success && resid_step.allFinite() &&
          resid_step.cwiseAbs().maxCoeff() >
              1e-2 * std::max(1.0, beta.cwiseAbs().maxCoeff()))
        throw MonotoneLikelihood(
            "fit_cox: score vanished but the Newton step did not; "
            "risk scores appear separated");
      fit.converged = true;
      fit.iterations = it;
      break;
    }
    if (it == max_iter) break;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(derivs.neg_hessian);
    Eigen::VectorXd step = ldlt.solve(derivs.grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite())
      throw NonConvergence("fit_cox: singular information matrix");
    double scale = 1.0;
    Eigen::VectorXd cand;
    CoxDerivs cand_derivs;
    bool improved = false;
    for (int h = 0; h < 40; ++h) {
      cand = beta + scale * step;
      if (cand.cwiseAbs().maxCoeff() > kBetaBox)
        throw MonotoneLikelihood(
            "fit_cox: coefficients diverging; likelihood appears monotone");
      cand_derivs = derivs_at(cand);
      if (cand_derivs.loglik >= derivs.loglik) {
        improved = true;
        break;
      }
      scale *= 0.5;
    }
    if (!improved)
      throw NonConvergence("fit_cox: step-halving failed to improve");
    const double moved = (cand - beta).cwiseAbs().maxCoeff();
    beta = cand;
    derivs = cand_derivs;
    // At large n the summed score bottoms out at its round-off floor, which
    // can sit just above the gradient gate while the iterate has stopped
    // moving entirely. A frozen iterate with a near-gate score is converged
    // at the arithmetic's noise floor; frozen with a large score is a bug.
    if (moved < 1e-10 * std::max(1.0, beta.cwiseAbs().maxCoeff())) {
      if (derivs.grad.cwiseAbs().maxCoeff() / n < 1e3 * tol) {
        fit.converged = true;
        fit.iterations = it + 1;
        break;
      }
      throw NonConvergence(
          "fit_cox: iterate stalled with the score far from zero");
    }
  }
  if (!fit.converged)
    throw NonConvergence("fit_cox: no convergence in " +
                         std::to_string(max_iter) + " iterations");
  fit.beta = beta;
  fit.info = derivs.neg_hessian / n;
  fit.loglik = derivs.loglik;
  return fit;
}

}  // namespace detail

inline CoxFit fit_cox(const SiteSample& sample, int cause = 1,
                      Eigen::VectorXd init = Eigen::VectorXd(),
                      double tol = 1e-8, int max_iter = 50) {
  const int d = sample.dim();
  if (d < 1) throw ConfigError("fit_cox: need at least one covariate");
  if (init.size() != 0 && init.size() != d)
    throw ConfigError("fit_cox: init has wrong length");
  Eigen::VectorXd beta =
      init.size() == d ? init : Eigen::VectorXd::Zero(d).eval();
  CoxFit fit = detail::cox_newton(
      [&](const Eigen::VectorXd& b) {
        return cox_partial_loglik(b, sample, cause);
      },
      static_cast<double>(sample.n()), std::move(beta), tol, max_iter);
  fit.n = static_cast<int>(sample.n());
  fit.site_id = sample.site_id();
  return fit;
}

// Shared-coefficient fit across several samples, each keeping its own risk
// sets (a stratified baseline): maximizes the sum of the per-sample partial
// log-likelihoods. This is the centralized benchmark when the samples come
// from populations with different baseline hazards — dumping all rows into
// one risk set would tie them to a single baseline they do not share, and
// the resulting fit is no longer consistent for a shared coefficient. A
// stratum with no events of the requested cause contributes no factors and
// is skipped.
inline CoxFit fit_cox_stratified(const std::vector<SiteSample>& samples,
                                 int cause = 1,
                                 Eigen::VectorXd init = Eigen::VectorXd(),
                                 double tol = 1e-8, int max_iter = 50) {
  if (samples.empty()) throw ConfigError("fit_cox_stratified: no samples");
  const int d = samples.front().dim();
  if (d < 1)
    throw ConfigError("fit_cox_stratified: need at least one covariate");
  double n = 0;
  for (const auto& s : samples) {
    if (s.dim() != d)
      throw ConfigError("fit_cox_stratified: dimension mismatch across strata");
    n += static_cast<double>(s.n());
  }
  if (init.size() != 0 && init.size() != d)
    throw ConfigError("fit_cox_stratified: init has wrong length");
  Eigen::VectorXd beta =
      init.size() == d ? init : Eigen::VectorXd::Zero(d).eval();
  CoxFit fit = detail::cox_newton(
      [&](const Eigen::VectorXd& b) {
        CoxDerivs total;
        total.grad = Eigen::VectorXd::Zero(d);
        total.neg_hessian = Eigen::MatrixXd::Zero(d, d);
        bool any = false;
        for (const auto& s : samples) {
          try {
            const CoxDerivs one = cox_partial_loglik(b, s, cause);
            total.loglik += one.loglik;
            total.grad += one.grad;
            total.neg_hessian += one.neg_hessian;
            any = true;
          } catch (const EmptyRiskSet&) {
          }
        }
        if (!any)
          throw EmptyRiskSet("fit_cox_stratified: no events of cause " +
                             std::to_string(cause) + " in any stratum");
        return total;
      },
      n, std::move(beta), tol, max_iter);
  fit.n = static_cast<int>(n);
  return fit;
}

// Kaplan-Meier with Greenwood variance. Any nonzero event code counts as an
// event (all-cause survival); once the survival hits zero the variance is
// pinned to zero.
inline StepCurve kaplan_meier(const SiteSample& sample) {
  if (sample.kind() != SampleKind::Survival)
    throw ConfigError("kaplan_meier: survival samples only");
  const auto& time = sample.time();
  const auto& event = sample.event();
  const auto order = detail::sort_by_time(time);
  const Eigen::Index n = sample.n();

  std::vector<double> ts, vs, vars;
  double surv = 1.0;
  double greenwood = 0.0;
  Eigen::Index i = 0;
  while (i < n) {
    const double t = time[order.idx[i]];
    const double at_risk = static_cast<double>(n - i);
    int d = 0;
    Eigen::Index j = i;
    while (j < n && time[order.idx[j]] == t) {
      if (event[order.idx[j]] != 0) ++d;
      ++j;
    }
    if (d > 0) {
      surv *= 1.0 - d / at_risk;
      if (d < at_risk)
        greenwood += d / (at_risk * (at_risk - d));
      ts.push_back(t);
      vs.push_back(surv);
      vars.push_back(surv > 0.0 ? surv * surv * greenwood : 0.0);
    }
    i = j;
  }
  StepCurve c;
  c.initial_value = 1.0;
  c.times = Eigen::Map<Eigen::VectorXd>(ts.data(), ts.size());
  c.values = Eigen::Map<Eigen::VectorXd>(vs.data(), vs.size());
  c.variances = Eigen::Map<Eigen::VectorXd>(vars.data(), vars.size());
  return c;
}

// Nelson-Aalen cumulative hazard for one cause, variance sum d/Y^2.
inline StepCurve nelson_aalen(const SiteSample& sample, int cause = 1) {
  if (sample.kind() != SampleKind::Survival)
    throw ConfigError("nelson_aalen: survival samples only");
  if (cause < 1 || cause > sample.num_causes())
    throw ConfigError("nelson_aalen: unknown cause");
  const auto& time = sample.time();
  const auto& event = sample.event();
  const auto order = detail::sort_by_time(time);
  const Eigen::Index n = sample.n();

  std::vector<double> ts, vs, vars;
  double cumhaz = 0.0, var = 0.0;
  Eigen::Index i = 0;
  while (i < n) {
    const double t = time[order.idx[i]];
    const double at_risk = static_cast<double>(n - i);
    int d = 0;
    Eigen::Index j = i;
    while (j < n && time[order.idx[j]] == t) {
      if (event[order.idx[j]] == cause) ++d;
      ++j;
    }
    if (d > 0) {
      cumhaz += d / at_risk;
      var += d / (at_risk * at_risk);
      ts.push_back(t);
      vs.push_back(cumhaz);
      vars.push_back(var);
    }
    i = j;
  }
  StepCurve c;
  c.initial_value = 0.0;
  c.times = Eigen::Map<Eigen::VectorXd>(ts.data(), ts.size());
  c.values = Eigen::Map<Eigen::VectorXd>(vs.data(), vs.size());
  c.variances = Eigen::Map<Eigen::VectorXd>(vars.data(), vars.size());
  return c;
}

struct CifEstimate {
  int cause = 0;
  StepCurve curve;
  int n = 0;
  int site_id = -1;
};

// Aalen-Johansen cumulative incidence for one cause:
//   F_j(t) = sum over event times u <= t of S(u-) dN_j(u) / Y(u)
// with S the all-cause Kaplan-Meier. The variance is the martingale plug-in:
// cause-j jumps contribute (S(u-) + F_j(u) - F_j(t))^2 dN_j/Y^2 and other
// jumps contribute (F_j(t) - F_j(u))^2 dN_other/Y^2; prefix sums in u make
// the whole curve O(n) after sorting. At tied times F_j(u) is taken after the
// jump at u and S(u-) before it.
inline CifEstimate aalen_johansen(const SiteSample& sample, int cause = 1) {
  if (sample.kind() != SampleKind::Survival)
    throw ConfigError("aalen_johansen: survival samples only");
  if (cause < 1 || cause > sample.num_causes())
    throw ConfigError("aalen_johansen: unknown cause");
  const auto& time = sample.time();
  const auto& event = sample.event();
  const auto order = detail::sort_by_time(time);
  const Eigen::Index n = sample.n();

  std::vector<double> ts, vs, vars;
  double surv = 1.0;  // all-cause survival, S(t)
  double cif = 0.0;
  // Prefix sums over processed event times u with c_j = dN_j/Y^2 and
  // c_o = (dN_all - dN_j)/Y^2, u_val = S(u-) + F_j(u):
  double P0 = 0, P1 = 0, P2 = 0;  // c_j, u_val*c_j, u_val^2*c_j
  double Q0 = 0, Q1 = 0, Q2 = 0;  // c_o, F_j(u)*c_o, F_j(u)^2*c_o
  Eigen::Index i = 0;
  while (i < n) {
    const double t = time[order.idx[i]];
    const double at_risk = static_cast<double>(n - i);
    int d_cause = 0, d_all = 0;
    Eigen::Index j = i;
    while (j < n && time[order.idx[j]] == t) {
      if (event[order.idx[j]] != 0) {
        ++d_all;
        if (event[order.idx[j]] == cause) ++d_cause;
      }
      ++j;
    }
    if (d_all > 0) {
      const double s_minus = surv;
      cif += s_minus * d_cause / at_risk;
      surv *= 1.0 - d_all / at_risk;
      const double inv2 = 1.0 / (at_risk * at_risk);
      if (d_cause > 0) {
        const double u_val = s_minus + cif;
        const double cj = d_cause * inv2;
        P0 += cj;
        P1 += u_val * cj;
        P2 += u_val * u_val * cj;
      }
      if (d_all > d_cause) {
        const double co = (d_all - d_cause) * inv2;
        Q0 += co;
        Q1 += cif * co;
        Q2 += cif * cif * co;
      }
      if (d_cause > 0) {
        const double v = (P2 - 2.0 * cif * P1 + cif * cif * P0) +
                         (cif * cif * Q0 - 2.0 * cif * Q1 + Q2);
        ts.push_back(t);
        vs.push_back(cif);
        vars.push_back(std::max(v, 0.0));
      }
    }
    i = j;
  }
  CifEstimate est;
  est.cause = cause;
  est.n = static_cast<int>(n);
  est.site_id = sample.site_id();
  est.curve.initial_value = 0.0;
  est.curve.times = Eigen::Map<Eigen::VectorXd>(ts.data(), ts.size());
  est.curve.values = Eigen::Map<Eigen::VectorXd>(vs.data(), vs.size());
  est.curve.variances = Eigen::Map<Eigen::VectorXd>(vars.data(), vars.size());
  return est;
}

}  // namespace fedci
