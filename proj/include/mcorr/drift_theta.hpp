#pragma once

#include <optional>

namespace mcorr {

/// Cubic drift in monomial form theta0 + theta1 x + theta2 x^2 + theta3 x^3,
/// amplitude theta4 (sigma for the Markov model, coupling for the hidden-OU
/// model) and the optional OU scale theta5 of the hidden driver.
struct DriftThetaVector {
  double theta0 = 0.0;
  double theta1 = 0.0;
  double theta2 = 0.0;
  double theta3 = 0.0;
  double theta4 = 0.0;
  std::optional<double> theta5;
  double fixed_point = 0.0;

  double drift(double x) const { return theta0 + x * (theta1 + x * (theta2 + x * theta3)); }
};

}  // namespace mcorr
