#pragma once

#include <stdexcept>
#include <string>

namespace fedci {

// Base for everything the library throws on purpose. Catching this (plus
// std::bad_alloc) is enough to contain a failed replicate in a simulation.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: malformed config, invalid dimensions, unknown scenario.
struct ConfigError : Error {
  using Error::Error;
};

// A site's own design matrix is rank deficient in one treatment arm, so the
// site cannot fit its local model.
struct Condition1Violation : Error {
  Condition1Violation(int arm_, int rank_, int need_)
      : Error("arm " + std::to_string(arm_) + " design has rank " +
              std::to_string(rank_) + " < " + std::to_string(need_) +
              "; local fit impossible"),
        arm(arm_), rank(rank_), needed(need_) {}
  int arm;
  int rank;
  int needed;
};

// The summed cross-site Gram matrix is singular: no site is full rank and the
// union does not repair it, so the one-shot pooled solve fails.
struct Condition2Violation : Error {
  Condition2Violation(int arm_, int rank_, int need_)
      : Error("summed arm-" + std::to_string(arm_) + " Gram has rank " +
              std::to_string(rank_) + " < " + std::to_string(need_) +
              "; federated solve impossible"),
        arm(arm_), rank(rank_), needed(need_) {}
  int arm;
  int rank;
  int needed;
};

// Partial-likelihood machinery asked to operate with no qualifying events.
struct EmptyRiskSet : Error {
  using Error::Error;
};

// Newton iterates for the partial likelihood ran off to infinity, the classic
// monotone-likelihood / separation failure mode.
struct MonotoneLikelihood : Error {
  using Error::Error;
};

// An iterative solver exhausted its iteration budget without meeting tol.
struct NonConvergence : Error {
  using Error::Error;
};

// Weight construction degenerated: nonpositive variances for inverse-variance
// weights, all-zero similarity mass, or an empty estimate list.
struct DegenerateWeights : Error {
  using Error::Error;
};

// Gradient descent diverged (aggregate objective rose repeatedly).
struct StepSizeTooLarge : Error {
  using Error::Error;
};

// Code running inside a federation touched another site's raw rows.
struct FederationViolation : Error {
  using Error::Error;
};

}  // namespace fedci
