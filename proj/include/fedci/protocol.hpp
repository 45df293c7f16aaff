#pragma once

// Federated protocol execution over a simulated network.
//
// Every runner opens a FederationScope, prepares each site's objective under
// that site's SiteScope (the only place rows are read), and then iterates
// rounds in fixed site order — deterministic, and structurally incapable of
// touching another site's rows. RoundLog records the declared wire payloads
// (model vectors, gradients, summary blocks); site sizes and dimensions are
// treated as known metadata and never counted. Objective values used by the
// divergence detector are simulation-side instrumentation, not traffic.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "fedci/aggregate.hpp"
#include "fedci/errors.hpp"
#include "fedci/linear.hpp"
#include "fedci/sample.hpp"
#include "fedci/survival.hpp"

namespace fedci {

struct ProtocolConfig {
  int rounds = 50;         // T, global aggregation steps
  double lambda = 1.0;     // proximal coefficient (one knob for mu/lambda)
  double step_size = 0.0;  // eta; 0 selects 1/L from site curvature reports
  int local_steps = 1;     // M, personalized local gradient steps
  double tol = 1e-8;
  int max_local_iters = 50;
  Eigen::VectorXd init;    // empty = zeros

  void validate() const {
    if (rounds < 1) throw ConfigError("protocol: rounds must be >= 1");
    if (lambda < 0.0) throw ConfigError("protocol: lambda must be >= 0");
    if (step_size < 0.0)
      throw ConfigError("protocol: step_size must be >= 0 (0 = auto)");
    if (local_steps < 0) throw ConfigError("protocol: local_steps must be >= 0");
    if (max_local_iters < 1)
      throw ConfigError("protocol: max_local_iters must be >= 1");
  }
};

// Communication graph with mixing weights (self-weight included). The default
// construction is Metropolis-Hastings: symmetric, doubly stochastic, and
// positive exactly on the declared edges.
struct Topology {
  int K = 0;
  std::vector<std::vector<int>> neighbors;  // excluding self
  Eigen::MatrixXd mixing;                   // K x K

  static Topology metropolis(std::vector<std::vector<int>> nbrs) {
    Topology t;
    t.K = static_cast<int>(nbrs.size());
    t.neighbors = std::move(nbrs);
    t.mixing = Eigen::MatrixXd::Zero(t.K, t.K);
    std::vector<int> deg(t.K);
    for (int k = 0; k < t.K; ++k) deg[k] = static_cast<int>(t.neighbors[k].size());
    for (int k = 0; k < t.K; ++k) {
      double self = 1.0;
      for (int j : t.neighbors[k]) {
        if (j < 0 || j >= t.K || j == k)
          throw ConfigError("topology: bad neighbor index");
        const double w = 1.0 / (1.0 + std::max(deg[k], deg[j]));
        t.mixing(k, j) = w;
        self -= w;
      }
      t.mixing(k, k) = self;
    }
    t.validate();
    return t;
  }

  static Topology ring(int K) {
    if (K < 2) throw ConfigError("topology: ring needs K >= 2");
    std::vector<std::vector<int>> nbrs(K);
    for (int k = 0; k < K; ++k) {
      const int prev = (k + K - 1) % K;
      const int next = (k + 1) % K;
      nbrs[k].push_back(prev);
      if (next != prev) nbrs[k].push_back(next);
    }
    return metropolis(std::move(nbrs));
  }

  static Topology complete(int K) {
    if (K < 2) throw ConfigError("topology: complete graph needs K >= 2");
    std::vector<std::vector<int>> nbrs(K);
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < K; ++j)
        if (j != k) nbrs[k].push_back(j);
    return metropolis(std::move(nbrs));
  }

  long total_directed_edges() const {
    long e = 0;
    for (const auto& nb : neighbors) e += static_cast<long>(nb.size());
    return e;
  }

  void validate() const {
    if (K < 1) throw ConfigError("topology: empty graph");
    if (mixing.rows() != K || mixing.cols() != K)
      throw ConfigError("topology: mixing matrix must be K x K");
    for (int k = 0; k < K; ++k) {
      double row = 0;
      for (int j = 0; j < K; ++j) {
        if (mixing(k, j) < -1e-15)
          throw ConfigError("topology: negative mixing weight");
        if ((mixing(k, j) > 0) != (mixing(j, k) > 0))
          throw ConfigError("topology: asymmetric support");
        row += mixing(k, j);
      }
      if (std::abs(row - 1.0) > 1e-12)
        throw ConfigError("topology: mixing row " + std::to_string(k) +
                          " does not sum to 1");
    }
    // Connectivity over the positive support.
    std::vector<bool> seen(K, false);
    std::queue<int> q;
    q.push(0);
    seen[0] = true;
    int reached = 1;
    while (!q.empty()) {
      const int k = q.front();
      q.pop();
      for (int j = 0; j < K; ++j)
        if (j != k && mixing(k, j) > 0 && !seen[j]) {
          seen[j] = true;
          ++reached;
          q.push(j);
        }
    }
    if (reached < K) throw ConfigError("topology: graph is not connected");
  }
};

struct RoundEntry {
  int round = 0;
  long site_to_server = 0;
  long server_to_site = 0;
  long site_to_site = 0;
};

struct RoundLog {
  std::string protocol;
  int num_sites = 0;
  int param_dim = 0;
  std::vector<RoundEntry> entries;

  int rounds() const { return static_cast<int>(entries.size()); }
  long total_scalars() const {
    long t = 0;
    for (const auto& e : entries)
      t += e.site_to_server + e.server_to_site + e.site_to_site;
    return t;
  }
  nlohmann::json to_json() const {
    nlohmann::json rounds_json = nlohmann::json::array();
    for (const auto& e : entries)
      rounds_json.push_back({{"round", e.round},
                             {"site_to_server", e.site_to_server},
                             {"server_to_site", e.server_to_site},
                             {"site_to_site", e.site_to_site}});
    return {{"protocol", protocol},
            {"num_sites", num_sites},
            {"param_dim", param_dim},
            {"rounds", rounds_json}};
  }
};

// A per-site differentiable loss, scaled per observation over the site's
// total row count so that sum_k (n_k/n) L_k is the pooled mean loss.
// prepare() is called exactly once per site, in site order, under that site's
// scope; all later hooks work from the cached sufficient statistics and are
// invoked by runners only inside the owning site's scope.
class LocalObjective {
 public:
  virtual ~LocalObjective() = default;
  virtual int dim() const = 0;
  virtual void prepare(const SiteSample& site) = 0;
  virtual double value(int site, const Eigen::VectorXd& theta) const = 0;
  virtual Eigen::VectorXd gradient(int site,
                                   const Eigen::VectorXd& theta) const = 0;
  // argmin_theta L_k(theta) + (lambda/2) ||theta - anchor||^2
  virtual Eigen::VectorXd prox_solve(int site, const Eigen::VectorXd& anchor,
                                     double lambda, double tol,
                                     int max_iter) const = 0;
  // Upper bound on the largest Hessian eigenvalue of L_k.
  virtual double curvature_bound(int site) const = 0;

  // Central-difference gradient for consistency tests.
  Eigen::VectorXd fd_gradient(int site, const Eigen::VectorXd& theta,
                              double h = 1e-6) const {
    Eigen::VectorXd g(theta.size());
    Eigen::VectorXd probe = theta;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      probe[i] = theta[i] + h;
      const double up = value(site, probe);
      probe[i] = theta[i] - h;
      const double dn = value(site, probe);
      probe[i] = theta[i];
      g[i] = (up - dn) / (2.0 * h);
    }
    return g;
  }
};

// Least squares on one treatment arm (arm = -1 takes every row), optionally
// with an intercept column. Parameter layout matches fit_arm_ols.
class ArmLeastSquares final : public LocalObjective {
 public:
  explicit ArmLeastSquares(int arm, bool intercept = true)
      : arm_(arm), intercept_(intercept) {
    if (arm != -1 && arm != 0 && arm != 1)
      throw ConfigError("ArmLeastSquares: arm must be -1, 0 or 1");
  }

  int dim() const override { return p_; }

  void prepare(const SiteSample& site) override {
    if (site.kind() != SampleKind::Linear)
      throw ConfigError("ArmLeastSquares: linear samples only");
    const int d = site.dim();
    const int p = d + (intercept_ ? 1 : 0);
    if (p_ == 0) p_ = p;
    if (p_ != p) throw ConfigError("ArmLeastSquares: dimension mismatch");
    Stats s;
    s.gram = Eigen::MatrixXd::Zero(p, p);
    s.xty = Eigen::VectorXd::Zero(p);
    const auto& X = site.X();
    const auto& W = site.W();
    const auto& Y = site.Y();
    Eigen::VectorXd row(p);
    for (Eigen::Index i = 0; i < site.n(); ++i) {
      if (arm_ != -1 && W[i] != arm_) continue;
      if (intercept_) {
        row[0] = 1.0;
        row.tail(d) = X.row(i);
      } else {
        row = X.row(i).transpose();
      }
      s.gram.noalias() += row * row.transpose();
      s.xty.noalias() += row * Y[i];
      s.yty += Y[i] * Y[i];
    }
    s.n_site = static_cast<double>(site.n());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.gram);
    s.spectral = eig.eigenvalues().maxCoeff() / s.n_site;
    stats_.push_back(std::move(s));
  }

  double value(int site, const Eigen::VectorXd& th) const override {
    const Stats& s = at(site);
    return 0.5 / s.n_site *
           (th.dot(s.gram * th) - 2.0 * th.dot(s.xty) + s.yty);
  }

  Eigen::VectorXd gradient(int site, const Eigen::VectorXd& th) const override {
    const Stats& s = at(site);
    return (s.gram * th - s.xty) / s.n_site;
  }

  Eigen::VectorXd prox_solve(int site, const Eigen::VectorXd& anchor,
                             double lambda, double, int) const override {
    const Stats& s = at(site);
    if (lambda > 0.0) {
      Eigen::MatrixXd lhs = s.gram / s.n_site;
      lhs.diagonal().array() += lambda;
      return Eigen::LDLT<Eigen::MatrixXd>(lhs).solve(s.xty / s.n_site +
                                                     lambda * anchor);
    }
    // Unpenalized local minimizer; least-squares solve tolerates a singular
    // Gram (any minimizer will do for the averaging step).
    return s.gram.colPivHouseholderQr().solve(s.xty);
  }

  double curvature_bound(int site) const override { return at(site).spectral; }

 private:
  struct Stats {
    Eigen::MatrixXd gram;
    Eigen::VectorXd xty;
    double yty = 0.0;
    double n_site = 0.0;
    double spectral = 0.0;
  };
  const Stats& at(int site) const {
    if (site < 0 || site >= static_cast<int>(stats_.size()))
      throw ConfigError("ArmLeastSquares: unknown site index");
    return stats_[site];
  }
  int arm_;
  bool intercept_;
  int p_ = 0;
  std::vector<Stats> stats_;
};

// Negated mean Cox partial likelihood for one cause. prepare() copies the
// site's rows into objective-owned storage (this is the site's own working
// memory, not a transfer); the proximal solve is damped Newton on the
// penalized objective.
class CoxPartialObjective final : public LocalObjective {
 public:
  explicit CoxPartialObjective(int cause = 1) : cause_(cause) {}

  int dim() const override { return d_; }

  void prepare(const SiteSample& site) override {
    if (site.kind() != SampleKind::Survival)
      throw ConfigError("CoxPartialObjective: survival samples only");
    if (d_ == 0) d_ = site.dim();
    if (d_ != site.dim())
      throw ConfigError("CoxPartialObjective: dimension mismatch");
    Cache c;
    c.sample = std::make_shared<SiteSample>(site);  // shares the owning site id
    c.n = static_cast<double>(site.n());
    caches_.push_back(std::move(c));
  }

  double value(int site, const Eigen::VectorXd& th) const override {
    return -cox_partial_loglik(th, *at(site).sample, cause_).loglik /
           at(site).n;
  }

  Eigen::VectorXd gradient(int site, const Eigen::VectorXd& th) const override {
    return -cox_partial_loglik(th, *at(site).sample, cause_).grad / at(site).n;
  }

  Eigen::VectorXd prox_solve(int site, const Eigen::VectorXd& anchor,
                             double lambda, double tol,
                             int max_iter) const override {
    const Cache& c = at(site);
    Eigen::VectorXd beta = anchor;
    CoxDerivs derivs = cox_partial_loglik(beta, *c.sample, cause_);
    auto penalized = [&](double loglik, const Eigen::VectorXd& b) {
      return -loglik / c.n + 0.5 * lambda * (b - anchor).squaredNorm();
    };
    double obj = penalized(derivs.loglik, beta);
    for (int it = 0; it < max_iter; ++it) {
      Eigen::VectorXd grad = -derivs.grad / c.n + lambda * (beta - anchor);
      if (grad.cwiseAbs().maxCoeff() < tol) return beta;
      Eigen::MatrixXd hess = derivs.neg_hessian / c.n;
      hess.diagonal().array() += lambda;
      Eigen::VectorXd step = Eigen::LDLT<Eigen::MatrixXd>(hess).solve(grad);
      double scale = 1.0;
      for (int h = 0; h < 40; ++h) {
        const Eigen::VectorXd cand = beta - scale * step;
        CoxDerivs cd = cox_partial_loglik(cand, *c.sample, cause_);
        const double cand_obj = penalized(cd.loglik, cand);
        if (cand_obj <= obj) {
          const double moved = (cand - beta).cwiseAbs().maxCoeff();
          beta = cand;
          derivs = cd;
          obj = cand_obj;
          // Same stall rule as fit_cox: the summed score carries a round-off
          // floor that can sit just above the gate while the iterate has
          // stopped moving. Frozen with a near-gate penalized gradient is
          // converged at the arithmetic's noise floor; frozen far from the
          // gate is a bug.
          if (moved < 1e-10 * std::max(1.0, beta.cwiseAbs().maxCoeff())) {
            const Eigen::VectorXd g =
                -derivs.grad / c.n + lambda * (beta - anchor);
            if (g.cwiseAbs().maxCoeff() < 1e3 * tol) return beta;
            throw NonConvergence(
                "CoxPartialObjective: iterate stalled away from the optimum");
          }
          break;
        }
        scale *= 0.5;
        if (h == 39)
          throw NonConvergence("CoxPartialObjective: no descent direction");
      }
    }
    Eigen::VectorXd grad = -derivs.grad / c.n + lambda * (beta - anchor);
    if (grad.cwiseAbs().maxCoeff() < tol) return beta;
    throw NonConvergence("CoxPartialObjective: proximal Newton hit max_iter");
  }

  double curvature_bound(int site) const override {
    const Cache& c = at(site);
    const Eigen::MatrixXd h =
        cox_partial_loglik(Eigen::VectorXd::Zero(d_), *c.sample, cause_)
            .neg_hessian /
        c.n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h);
    return eig.eigenvalues().maxCoeff();
  }

 private:
  struct Cache {
    std::shared_ptr<SiteSample> sample;
    double n = 0.0;
  };
  const Cache& at(int site) const {
    if (site < 0 || site >= static_cast<int>(caches_.size()))
      throw ConfigError("CoxPartialObjective: unknown site index");
    return caches_[site];
  }
  int cause_;
  int d_ = 0;
  std::vector<Cache> caches_;
};

struct FedRunResult {
  Eigen::VectorXd global;
  std::vector<Eigen::VectorXd> per_site;
  RoundLog log;
};

namespace detail {

inline Eigen::VectorXd initial_theta(const ProtocolConfig& cfg, int p) {
  if (cfg.init.size() == 0) return Eigen::VectorXd::Zero(p);
  if (cfg.init.size() != p)
    throw ConfigError("protocol: init vector has wrong length");
  return cfg.init;
}

inline Eigen::VectorXd site_fractions(const std::vector<SiteSample>& sites) {
  Eigen::VectorXd rho(sites.size());
  double n = 0;
  for (std::size_t k = 0; k < sites.size(); ++k) n += sites[k].n();
  for (std::size_t k = 0; k < sites.size(); ++k) rho[k] = sites[k].n() / n;
  return rho;
}

inline void prepare_all(LocalObjective& obj,
                        const std::vector<SiteSample>& sites) {
  for (const auto& s : sites) {
    SiteScope scope(s.site_id());
    obj.prepare(s);
  }
}

inline double auto_step(const LocalObjective& obj, const Eigen::VectorXd& rho,
                        int K) {
  double lbar = 0;
  for (int k = 0; k < K; ++k) lbar += rho[k] * obj.curvature_bound(k);
  if (!(lbar > 0)) throw ConfigError("protocol: zero curvature bound");
  return 1.0 / lbar;
}

}  // namespace detail

// FedProx: every round each site solves its proximal subproblem anchored at
// the broadcast model, the server averages with n_k/n weights; one final
// broadcast ships the aggregate back, for T+1 logged rounds.
inline FedRunResult run_fedprox(const std::vector<SiteSample>& sites,
                                LocalObjective& obj,
                                const ProtocolConfig& cfg) {
  cfg.validate();
  if (sites.empty()) throw ConfigError("run_fedprox: no sites");
  FederationScope fed;
  detail::prepare_all(obj, sites);
  const int K = static_cast<int>(sites.size());
  const int p = obj.dim();
  const Eigen::VectorXd rho = detail::site_fractions(sites);
  Eigen::VectorXd theta = detail::initial_theta(cfg, p);
  FedRunResult res;
  res.per_site.assign(K, theta);
  res.log.protocol = "fedprox";
  res.log.num_sites = K;
  res.log.param_dim = p;
  for (int t = 1; t <= cfg.rounds; ++t) {
    Eigen::VectorXd next = Eigen::VectorXd::Zero(p);
    for (int k = 0; k < K; ++k) {
      SiteScope scope(sites[k].site_id());
      try {
        res.per_site[k] = obj.prox_solve(k, theta, cfg.lambda, cfg.tol,
                                         cfg.max_local_iters);
      } catch (const NonConvergence& e) {
        throw NonConvergence("run_fedprox: site " +
                             std::to_string(sites[k].site_id()) + ", round " +
                             std::to_string(t) + ": " + e.what());
      }
      next += rho[k] * res.per_site[k];
    }
    theta = next;
    res.log.entries.push_back(
        {t, static_cast<long>(K) * p, static_cast<long>(K) * p, 0});
  }
  res.log.entries.push_back(
      {cfg.rounds + 1, 0, static_cast<long>(K) * p, 0});
  res.global = theta;
  return res;
}

// Full-batch gradient descent on the pooled objective (FedAvg with one local
// step and exact gradients). The aggregate loss at each broadcast model is
// tracked as instrumentation; five consecutive increases abort the run.
inline FedRunResult run_gd(const std::vector<SiteSample>& sites,
                           LocalObjective& obj, const ProtocolConfig& cfg) {
  cfg.validate();
  if (sites.empty()) throw ConfigError("run_gd: no sites");
  FederationScope fed;
  detail::prepare_all(obj, sites);
  const int K = static_cast<int>(sites.size());
  const int p = obj.dim();
  const Eigen::VectorXd rho = detail::site_fractions(sites);
  const double eta =
      cfg.step_size > 0 ? cfg.step_size : detail::auto_step(obj, rho, K);
  Eigen::VectorXd theta = detail::initial_theta(cfg, p);
  FedRunResult res;
  res.log.protocol = "gd";
  res.log.num_sites = K;
  res.log.param_dim = p;
  double prev_loss = std::numeric_limits<double>::infinity();
  int rising = 0;
  for (int t = 1; t <= cfg.rounds; ++t) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(p);
    double loss = 0;
    for (int k = 0; k < K; ++k) {
      SiteScope scope(sites[k].site_id());
      grad += rho[k] * obj.gradient(k, theta);
      loss += rho[k] * obj.value(k, theta);
    }
    // Only material increases count: at the convergence plateau the loss
    // wobbles by round-off, which is not divergence.
    if (loss > prev_loss + 1e-12 * std::max(1.0, std::abs(prev_loss))) {
      if (++rising >= 5)
        throw StepSizeTooLarge("run_gd: aggregate loss rose for 5 consecutive "
                               "rounds (round " + std::to_string(t) + ")");
    } else {
      rising = 0;
    }
    prev_loss = loss;
    theta -= eta * grad;
    res.log.entries.push_back(
        {t, static_cast<long>(K) * p, static_cast<long>(K) * p, 0});
  }
  res.log.entries.push_back(
      {cfg.rounds + 1, 0, static_cast<long>(K) * p, 0});
  res.global = theta;
  res.per_site.assign(K, theta);
  return res;
}

// Personalized averaging: each round sites take M local gradient steps from
// the broadcast model and the server averages the results. The per-site
// models of the final round are returned alongside the global average; there
// is no extra broadcast (the personalized models live at the sites).
inline FedRunResult run_personalized(const std::vector<SiteSample>& sites,
                                     LocalObjective& obj,
                                     const ProtocolConfig& cfg) {
  cfg.validate();
  if (sites.empty()) throw ConfigError("run_personalized: no sites");
  FederationScope fed;
  detail::prepare_all(obj, sites);
  const int K = static_cast<int>(sites.size());
  const int p = obj.dim();
  const Eigen::VectorXd rho = detail::site_fractions(sites);
  Eigen::VectorXd theta = detail::initial_theta(cfg, p);
  FedRunResult res;
  res.per_site.assign(K, theta);
  res.log.protocol = "personalized";
  res.log.num_sites = K;
  res.log.param_dim = p;
  for (int t = 1; t <= cfg.rounds; ++t) {
    Eigen::VectorXd next = Eigen::VectorXd::Zero(p);
    for (int k = 0; k < K; ++k) {
      SiteScope scope(sites[k].site_id());
      const double eta = cfg.step_size > 0
                             ? cfg.step_size
                             : 1.0 / std::max(obj.curvature_bound(k), 1e-12);
      Eigen::VectorXd local = theta;
      for (int m = 0; m < cfg.local_steps; ++m)
        local -= eta * obj.gradient(k, local);
      res.per_site[k] = local;
      next += rho[k] * local;
    }
    theta = next;
    res.log.entries.push_back(
        {t, static_cast<long>(K) * p, static_cast<long>(K) * p, 0});
  }
  res.global = theta;
  return res;
}

// Decentralized gradient half-step plus neighbor mixing. Each round every
// site ships its interim model to each neighbor; there is no server.
inline FedRunResult run_p2p(const std::vector<SiteSample>& sites,
                            LocalObjective& obj, const Topology& topo,
                            const ProtocolConfig& cfg) {
  cfg.validate();
  topo.validate();
  const int K = static_cast<int>(sites.size());
  if (K != topo.K) throw ConfigError("run_p2p: topology size mismatch");
  FederationScope fed;
  detail::prepare_all(obj, sites);
  const int p = obj.dim();
  const Eigen::VectorXd rho = detail::site_fractions(sites);
  double eta = cfg.step_size;
  if (eta == 0.0 && cfg.rounds > 0) {
    double lmax = 0;
    for (int k = 0; k < K; ++k)
      lmax = std::max(lmax, obj.curvature_bound(k));
    eta = lmax > 0 ? 1.0 / lmax : 0.0;
  }
  std::vector<Eigen::VectorXd> models(K, detail::initial_theta(cfg, p));
  FedRunResult res;
  res.log.protocol = "p2p";
  res.log.num_sites = K;
  res.log.param_dim = p;
  const long wire = topo.total_directed_edges() * static_cast<long>(p);
  std::vector<Eigen::VectorXd> interim(K);
  for (int t = 1; t <= cfg.rounds; ++t) {
    for (int k = 0; k < K; ++k) {
      SiteScope scope(sites[k].site_id());
      interim[k] = models[k];
      if (eta != 0.0) interim[k] -= eta * obj.gradient(k, models[k]);
    }
    for (int k = 0; k < K; ++k) {
      Eigen::VectorXd mixed = topo.mixing(k, k) * interim[k];
      for (int j : topo.neighbors[k]) mixed += topo.mixing(k, j) * interim[j];
      models[k] = mixed;
    }
    res.log.entries.push_back({t, 0, 0, wire});
  }
  res.per_site = models;
  res.global = Eigen::VectorXd::Zero(p);
  for (int k = 0; k < K; ++k) res.global += rho[k] * models[k];
  return res;
}

struct DecompositionResult {
  Eigen::MatrixXd shared;  // d x s projection
  std::vector<std::array<Eigen::VectorXd, 2>> heads;  // per site, per arm
  RoundLog log;
};

// Shared-projection model: y ~ head_w(1, f' x) with f a d x s projection
// shared across sites and per-arm linear heads kept local. Each round a site
// alternates closed-form solves — heads given f, then vec(f) from the
// Kronecker normal equations given heads — under a proximal pull toward the
// broadcast f; the server averages f with n_k/n weights. Optionally the heads
// can be frozen, which reduces the round to a single quadratic solve in f.
inline DecompositionResult run_decomposition(
    const std::vector<SiteSample>& sites, const ProtocolConfig& cfg,
    int shared_dim,
    std::optional<std::array<Eigen::VectorXd, 2>> fixed_heads = std::nullopt) {
  cfg.validate();
  if (sites.empty()) throw ConfigError("run_decomposition: no sites");
  const int d = sites.front().dim();
  const int s = shared_dim;
  if (s < 1 || s > d)
    throw ConfigError("run_decomposition: need 1 <= shared_dim <= d");
  if (fixed_heads) {
    for (int a = 0; a < 2; ++a)
      if ((*fixed_heads)[a].size() != s + 1)
        throw ConfigError("run_decomposition: fixed head length must be s+1");
  }
  FederationScope fed;
  const int K = static_cast<int>(sites.size());

  // Per-site, per-arm sufficient statistics in x-space.
  struct ArmStats {
    Eigen::MatrixXd gxx;
    Eigen::VectorXd bxy, mx;
    double sy = 0, syy = 0, cnt = 0;
  };
  std::vector<std::array<ArmStats, 2>> stats(K);
  Eigen::VectorXd rho = detail::site_fractions(sites);
  for (int k = 0; k < K; ++k) {
    SiteScope scope(sites[k].site_id());
    const auto& smp = sites[k];
    if (smp.kind() != SampleKind::Linear)
      throw ConfigError("run_decomposition: linear samples only");
    if (smp.dim() != d) throw ConfigError("run_decomposition: dim mismatch");
    for (int a = 0; a < 2; ++a) {
      stats[k][a].gxx = Eigen::MatrixXd::Zero(d, d);
      stats[k][a].bxy = Eigen::VectorXd::Zero(d);
      stats[k][a].mx = Eigen::VectorXd::Zero(d);
    }
    const auto& X = smp.X();
    const auto& W = smp.W();
    const auto& Y = smp.Y();
    for (Eigen::Index i = 0; i < smp.n(); ++i) {
      ArmStats& a = stats[k][W[i]];
      const Eigen::VectorXd x = X.row(i).transpose();
      a.gxx.noalias() += x * x.transpose();
      a.bxy.noalias() += x * Y[i];
      a.mx += x;
      a.sy += Y[i];
      a.syy += Y[i] * Y[i];
      a.cnt += 1;
    }
  }

  auto local_loss = [&](int k, const Eigen::MatrixXd& f,
                        const std::array<Eigen::VectorXd, 2>& heads) {
    double loss = 0;
    const double n_site = static_cast<double>(sites[k].n());
    for (int a = 0; a < 2; ++a) {
      const ArmStats& st = stats[k][a];
      const double h0 = heads[a][0];
      const Eigen::VectorXd fs = f * heads[a].tail(s);  // d-vector
      loss += st.syy - 2.0 * h0 * st.sy - 2.0 * fs.dot(st.bxy) +
              2.0 * h0 * fs.dot(st.mx) + st.cnt * h0 * h0 +
              fs.dot(st.gxx * fs);
    }
    return 0.5 * loss / n_site;
  };

  Eigen::MatrixXd f_global(d, s);
  if (cfg.init.size() == 0) {
    // Leading-coordinate projection: a deterministic, full-rank start.
    f_global.setZero();
    for (int j = 0; j < s; ++j) f_global(j, j) = 1.0;
  } else if (cfg.init.size() == d * s) {
    f_global = Eigen::Map<const Eigen::MatrixXd>(cfg.init.data(), d, s);
  } else {
    throw ConfigError("run_decomposition: init must have d*shared_dim entries");
  }

  DecompositionResult res;
  res.heads.assign(K, {Eigen::VectorXd::Zero(s + 1), Eigen::VectorXd::Zero(s + 1)});
  if (fixed_heads) res.heads.assign(K, *fixed_heads);
  res.log.protocol = "decomposition";
  res.log.num_sites = K;
  res.log.param_dim = d * s;

  for (int t = 1; t <= cfg.rounds; ++t) {
    Eigen::MatrixXd f_next = Eigen::MatrixXd::Zero(d, s);
    for (int k = 0; k < K; ++k) {
      SiteScope scope(sites[k].site_id());
      const double n_site = static_cast<double>(sites[k].n());
      Eigen::MatrixXd f = f_global;
      auto& heads = res.heads[k];
      // Convergence is judged on the data fit alone. The model has a flat
      // scale direction (f -> c f, slopes -> slopes / c) that the proximal
      // term pins only at O(lambda) strength; including it in the stopping
      // metric makes the loop chase that valley for ~1/lambda iterations
      // with no effect on predictions.
      double prev = local_loss(k, f, heads);
      bool settled = false;
      for (int it = 0; it < cfg.max_local_iters; ++it) {
        if (!fixed_heads) {
          // Head solve per arm: OLS of y on (1, f'x) from the cached moments.
          for (int a = 0; a < 2; ++a) {
            const ArmStats& st = stats[k][a];
            if (st.cnt == 0) continue;
            Eigen::MatrixXd g(s + 1, s + 1);
            Eigen::VectorXd b(s + 1);
            const Eigen::MatrixXd ftg = f.transpose() * st.gxx * f;
            const Eigen::VectorXd ftm = f.transpose() * st.mx;
            g(0, 0) = st.cnt;
            g.block(0, 1, 1, s) = ftm.transpose();
            g.block(1, 0, s, 1) = ftm;
            g.block(1, 1, s, s) = ftg;
            b[0] = st.sy;
            b.tail(s) = f.transpose() * st.bxy;
            // Tiny ridge keeps a thin arm from going singular mid-iteration.
            g.diagonal().array() += 1e-10 * std::max(1.0, g.trace());
            heads[a] = Eigen::LDLT<Eigen::MatrixXd>(g).solve(b);
          }
        }
        // f solve: vec(f) from sum_a (h_s h_s') kron (Gxx) / n + lambda I.
        Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(d * s, d * s);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d * s);
        for (int a = 0; a < 2; ++a) {
          const ArmStats& st = stats[k][a];
          if (st.cnt == 0) continue;
          const Eigen::VectorXd hs = heads[a].tail(s);
          const double h0 = heads[a][0];
          const Eigen::MatrixXd outer = hs * hs.transpose();
          for (int c = 0; c < s; ++c)
            for (int r = 0; r < s; ++r)
              lhs.block(r * d, c * d, d, d) += outer(r, c) / n_site * st.gxx;
          const Eigen::VectorXd xres = (st.bxy - h0 * st.mx) / n_site;
          for (int r = 0; r < s; ++r) rhs.segment(r * d, d) += hs[r] * xres;
        }
        lhs.diagonal().array() += cfg.lambda;
        rhs += cfg.lambda *
               Eigen::Map<const Eigen::VectorXd>(f_global.data(), d * s);
        const Eigen::VectorXd vf =
            Eigen::LDLT<Eigen::MatrixXd>(lhs).solve(rhs);
        f = Eigen::Map<const Eigen::MatrixXd>(vf.data(), d, s);
        const double cur = local_loss(k, f, heads);
        if (std::abs(prev - cur) < cfg.tol * std::max(1.0, std::abs(prev))) {
          settled = true;
          break;
        }
        prev = cur;
        if (fixed_heads) {  // single quadratic solve; already exact
          settled = true;
          break;
        }
      }
      if (!settled)
        throw NonConvergence("run_decomposition: site " +
                             std::to_string(sites[k].site_id()) + ", round " +
                             std::to_string(t) +
                             ": alternating solve did not settle");
      f_next += rho[k] * f;
    }
    f_global = f_next;
    res.log.entries.push_back({t, static_cast<long>(K) * d * s,
                               static_cast<long>(K) * d * s, 0});
  }
  res.log.entries.push_back(
      {cfg.rounds + 1, 0, static_cast<long>(K) * d * s, 0});
  res.shared = f_global;
  return res;
}

struct MetaRunResult {
  AggregateEstimate estimate;
  std::vector<AteEstimate> locals;
  RoundLog log;
};

// The meta pipeline: one upload of (estimate, variance) per site, combined at
// the server. Site sizes ride along as metadata.
inline MetaRunResult run_meta_ate(const std::vector<SiteSample>& sites,
                                  const WeightScheme& scheme) {
  if (sites.empty()) throw ConfigError("run_meta_ate: no sites");
  FederationScope fed;
  MetaRunResult res;
  for (const auto& s : sites) {
    SiteScope scope(s.site_id());
    res.locals.push_back(local_ate(s));
  }
  res.estimate = meta_combine(res.locals, scheme);
  res.log.protocol = "meta";
  res.log.num_sites = static_cast<int>(sites.size());
  res.log.param_dim = 1;
  res.log.entries.push_back({1, 2L * static_cast<long>(sites.size()), 0, 0});
  return res;
}

struct OneShotRunResult {
  AggregateEstimate estimate;
  Eigen::VectorXd theta0;
  Eigen::VectorXd theta1;
  RoundLog log;
};

// Two rounds: sites upload model payloads (coefficient pair for the
// sample-size route, per-arm Gram blocks for the Gram-weighted route), the
// server federates, broadcasts the coefficient pair, and sites reply with
// their local evaluation of the federated contrast.
inline OneShotRunResult run_one_shot(const std::vector<SiteSample>& sites,
                                     OneShotMode mode) {
  if (sites.empty()) throw ConfigError("run_one_shot: no sites");
  FederationScope fed;
  const int K = static_cast<int>(sites.size());
  const int d = sites.front().dim();
  const long p = d + 1;
  std::vector<GramSummary> summaries;
  summaries.reserve(K);
  for (const auto& s : sites) {
    SiteScope scope(s.site_id());
    summaries.push_back(gram_summary(s));
  }
  OneShotRunResult res;
  const OneShotResult os = one_shot_ate(summaries, mode);
  res.theta0 = os.theta0;
  res.theta1 = os.theta1;
  res.estimate = os.estimate;
  // Round 2: sites evaluate the federated contrast on their own covariates;
  // the sample-size average of those evaluations is the final estimate (and
  // equals the pooled-mean evaluation algebraically).
  double tau = 0;
  double n = 0;
  for (const auto& s : sites) n += s.n();
  for (const auto& s : sites) {
    SiteScope scope(s.site_id());
    tau += s.n() / n * model_ate(s, res.theta1, res.theta0);
  }
  res.estimate.value = tau;
  res.log.protocol = mode == OneShotMode::GramWeighted ? "one-shot-ivw"
                                                       : "one-shot-sw";
  res.log.num_sites = K;
  res.log.param_dim = static_cast<int>(p);
  const long upload =
      mode == OneShotMode::GramWeighted ? 2 * (p * p + p) : 2 * p;
  res.log.entries.push_back({1, K * upload, 0, 0});
  res.log.entries.push_back({2, static_cast<long>(K), K * 2 * p, 0});
  return res;
}

enum class ProtocolKind {
  Meta,
  OneShotSW,
  OneShotIVW,
  GD,
  FedProx,
  Personalized,
  P2P,
  Decomposition,
};

struct AuditVerdict {
  bool ok = true;
  int first_bad_round = -1;
  std::string detail;
};

// Replays the declared wire format of a protocol against a recorded log and
// reports the first deviation. param_dim is the scalar count of one model
// message (d+1 for per-arm linear models, d for Cox, d*s for decomposition);
// total_directed_edges is only consulted for peer-to-peer runs.
inline AuditVerdict audit_communication(const RoundLog& log, ProtocolKind kind,
                                        int param_dim, int T,
                                        long total_directed_edges = 0) {
  const long K = log.num_sites;
  const long p = param_dim;
  std::vector<RoundEntry> expect;
  switch (kind) {
    case ProtocolKind::Meta:
      expect.push_back({1, 2 * K, 0, 0});
      break;
    case ProtocolKind::OneShotSW:
      expect.push_back({1, K * 2 * p, 0, 0});
      expect.push_back({2, K, K * 2 * p, 0});
      break;
    case ProtocolKind::OneShotIVW:
      expect.push_back({1, K * 2 * (p * p + p), 0, 0});
      expect.push_back({2, K, K * 2 * p, 0});
      break;
    case ProtocolKind::GD:
    case ProtocolKind::FedProx:
    case ProtocolKind::Decomposition:
      for (int t = 1; t <= T; ++t) expect.push_back({t, K * p, K * p, 0});
      expect.push_back({T + 1, 0, K * p, 0});
      break;
    case ProtocolKind::Personalized:
      for (int t = 1; t <= T; ++t) expect.push_back({t, K * p, K * p, 0});
      break;
    case ProtocolKind::P2P:
      for (int t = 1; t <= T; ++t)
        expect.push_back({t, 0, 0, total_directed_edges * p});
      break;
  }
  AuditVerdict v;
  if (log.param_dim != param_dim) {
    v.ok = false;
    v.detail = "declared param_dim " + std::to_string(param_dim) +
               " but log says " + std::to_string(log.param_dim);
    return v;
  }
  if (log.rounds() != static_cast<int>(expect.size())) {
    v.ok = false;
    v.detail = "expected " + std::to_string(expect.size()) + " rounds, log has " +
               std::to_string(log.rounds());
    return v;
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const auto& e = expect[i];
    const auto& o = log.entries[i];
    if (e.site_to_server != o.site_to_server ||
        e.server_to_site != o.server_to_site ||
        e.site_to_site != o.site_to_site) {
      v.ok = false;
      v.first_bad_round = e.round;
      v.detail = "round " + std::to_string(e.round) + ": expected up/down/p2p " +
                 std::to_string(e.site_to_server) + "/" +
                 std::to_string(e.server_to_site) + "/" +
                 std::to_string(e.site_to_site) + ", observed " +
                 std::to_string(o.site_to_server) + "/" +
                 std::to_string(o.server_to_site) + "/" +
                 std::to_string(o.site_to_site);
      return v;
    }
  }
  v.detail = "ok: " + std::to_string(log.rounds()) + " rounds, " +
             std::to_string(log.total_scalars()) + " scalars";
  return v;
}

}  // namespace fedci
