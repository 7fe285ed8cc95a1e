#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "condacl/graph.hpp"
#include "condacl/rng.hpp"

namespace condacl::checks {

// Verification oracles. Everything here recomputes results from first
// principles (finite differences, Gaussian elimination, literal pixel sets)
// and must stay independent of the implementation paths it cross-checks.

struct GradCheckReport {
  double max_rel_err = 0.0;
  int n_checked = 0;
};

/// Central finite differences (default step 1e-5) on `coords` random
/// coordinates of `leaf_node` against the gradient computed by backward().
/// rebuild() must construct a fresh scalar loss from the current leaf values.
/// Relative error uses denominator max(|fd|, |analytic|, 1).
GradCheckReport gradient_check(const std::function<NodePtr()>& rebuild, const NodePtr& leaf_node,
                               int coords, Rng& rng, double step = 1e-5);

/// Dense Jacobian of f: R^n -> R^m by central differences, row-major m×n.
std::vector<double> fd_jacobian(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                const std::vector<double>& x, double step = 1e-6);

/// log|det| by Gaussian elimination with partial pivoting.
double log_abs_det(std::vector<double> m, int64_t n);

/// Closed-form log N(y; 0, (AᵀA)⁻¹) for the linear map z = A·y.
double linear_gaussian_logpdf(const std::vector<double>& a, int64_t d, const std::vector<double>& y);

/// Per-class IoU from literal pixel sets; NaN marks undefined classes.
std::vector<double> iou_from_pixels(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                                    int n_classes, uint8_t ignore_id);

double kl_direct(const std::vector<double>& p, const std::vector<double>& q);
double cross_entropy_direct(const std::vector<double>& p, const std::vector<double>& q);
double entropy_direct(const std::vector<double>& p);

/// Random point on the probability simplex (uniform via exponential spacings).
std::vector<double> random_simplex(int n, Rng& rng);

}  // namespace condacl::checks
