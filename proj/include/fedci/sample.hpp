#pragma once

// Per-site data and the federation contract.
//
// A SiteSample owns one site's rows. While a FederationScope is active on the
// current thread, raw rows are only readable under a SiteScope for the owning
// site; anything else throws FederationViolation. Outside any federation
// scope (unit tests, pooled oracle baselines) access is unrestricted. Scalar
// metadata (n, dim, site id) is never guarded — protocols legitimately ship
// those.

#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fedci/errors.hpp"

namespace fedci {

enum class SampleKind { Linear, Survival };

namespace detail {
inline thread_local int federation_depth = 0;
inline thread_local int active_site = -1;
}  // namespace detail

class FederationScope {
 public:
  FederationScope() { ++detail::federation_depth; }
  ~FederationScope() { --detail::federation_depth; }
  FederationScope(const FederationScope&) = delete;
  FederationScope& operator=(const FederationScope&) = delete;
};

class SiteScope {
 public:
  explicit SiteScope(int site_id) : prev_(detail::active_site) {
    detail::active_site = site_id;
  }
  ~SiteScope() { detail::active_site = prev_; }
  SiteScope(const SiteScope&) = delete;
  SiteScope& operator=(const SiteScope&) = delete;

 private:
  int prev_;
};

class SiteSample {
 public:
  // Linear-outcome site: covariates X (n x d), treatment W in {0,1}, outcome Y.
  static SiteSample linear(int site_id, Eigen::MatrixXd X, Eigen::VectorXi W,
                           Eigen::VectorXd Y) {
    SiteSample s;
    s.kind_ = SampleKind::Linear;
    s.site_id_ = site_id;
    s.X_ = std::move(X);
    s.W_ = std::move(W);
    s.Y_ = std::move(Y);
    if (s.W_.size() != s.X_.rows() || s.Y_.size() != s.X_.rows())
      throw ConfigError("linear sample: X, W, Y row counts disagree");
    return s;
  }

  // Survival site: follow-up time and event cause (0 = censored, 1..J).
  static SiteSample survival(int site_id, Eigen::MatrixXd X,
                             Eigen::VectorXd time, Eigen::VectorXi event,
                             int num_causes) {
    SiteSample s;
    s.kind_ = SampleKind::Survival;
    s.site_id_ = site_id;
    s.X_ = std::move(X);
    s.time_ = std::move(time);
    s.event_ = std::move(event);
    s.num_causes_ = num_causes;
    if (s.time_.size() != s.X_.rows() || s.event_.size() != s.X_.rows())
      throw ConfigError("survival sample: X, time, event row counts disagree");
    for (Eigen::Index i = 0; i < s.event_.size(); ++i)
      if (s.event_[i] < 0 || s.event_[i] > num_causes)
        throw ConfigError("survival sample: event code out of range");
    return s;
  }

  // Unguarded metadata.
  int site_id() const { return site_id_; }
  SampleKind kind() const { return kind_; }
  Eigen::Index n() const { return X_.rows(); }
  int dim() const { return static_cast<int>(X_.cols()); }
  int num_causes() const { return num_causes_; }

  // Row-level access, subject to the federation contract.
  const Eigen::MatrixXd& X() const { return checked(X_); }
  const Eigen::VectorXi& W() const { return checked(W_); }
  const Eigen::VectorXd& Y() const { return checked(Y_); }
  const Eigen::VectorXd& time() const { return checked(time_); }
  const Eigen::VectorXi& event() const { return checked(event_); }

 private:
  SiteSample() = default;

  template <typename T>
  const T& checked(const T& field) const {
    if (detail::federation_depth > 0 && detail::active_site != site_id_)
      throw FederationViolation(
          "raw rows of site " + std::to_string(site_id_) +
          " touched from " +
          (detail::active_site < 0
               ? std::string("the coordinator")
               : "site " + std::to_string(detail::active_site)));
    return field;
  }

  SampleKind kind_ = SampleKind::Linear;
  int site_id_ = -1;
  int num_causes_ = 0;
  Eigen::MatrixXd X_;
  Eigen::VectorXi W_;
  Eigen::VectorXd Y_;
  Eigen::VectorXd time_;
  Eigen::VectorXi event_;
};

// Row-concatenation of several sites into one benchmark sample (site id -1).
// This is the pooled oracle's input; by construction it must run outside any
// federation scope or the accessors will throw.
inline SiteSample concat_samples(const std::vector<SiteSample>& sites) {
  if (sites.empty()) throw ConfigError("concat_samples: no sites");
  const SampleKind kind = sites.front().kind();
  const int d = sites.front().dim();
  Eigen::Index total = 0;
  for (const auto& s : sites) {
    if (s.kind() != kind || s.dim() != d)
      throw ConfigError("concat_samples: mixed sample shapes");
    total += s.n();
  }
  Eigen::MatrixXd X(total, d);
  if (kind == SampleKind::Linear) {
    Eigen::VectorXi W(total);
    Eigen::VectorXd Y(total);
    Eigen::Index at = 0;
    for (const auto& s : sites) {
      X.middleRows(at, s.n()) = s.X();
      W.segment(at, s.n()) = s.W();
      Y.segment(at, s.n()) = s.Y();
      at += s.n();
    }
    return SiteSample::linear(-1, std::move(X), std::move(W), std::move(Y));
  }
  int causes = 0;
  for (const auto& s : sites) causes = std::max(causes, s.num_causes());
  Eigen::VectorXd time(total);
  Eigen::VectorXi event(total);
  Eigen::Index at = 0;
  for (const auto& s : sites) {
    X.middleRows(at, s.n()) = s.X();
    time.segment(at, s.n()) = s.time();
    event.segment(at, s.n()) = s.event();
    at += s.n();
  }
  return SiteSample::survival(-1, std::move(X), std::move(time),
                              std::move(event), causes);
}

}  // namespace fedci
