#include "condacl/checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace condacl::checks {

GradCheckReport gradient_check(const std::function<NodePtr()>& rebuild, const NodePtr& leaf_node,
                               int coords, Rng& rng, double step) {
  NodePtr loss = rebuild();
  leaf_node->ensure_grad();
  std::fill(leaf_node->grad.vec().begin(), leaf_node->grad.vec().end(), 0.0);
  backward(loss);
  Tensor analytic = leaf_node->grad;

  GradCheckReport report;
  int64_t n = leaf_node->value.numel();
  for (int k = 0; k < coords; ++k) {
    int64_t idx = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
    double saved = leaf_node->value[idx];
    leaf_node->value[idx] = saved + step;
    double f_plus = rebuild()->value[0];
    leaf_node->value[idx] = saved - step;
    double f_minus = rebuild()->value[0];
    leaf_node->value[idx] = saved;
    double fd = (f_plus - f_minus) / (2.0 * step);
    double an = analytic[idx];
    double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1.0});
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.n_checked;
  }
  return report;
}

std::vector<double> fd_jacobian(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                const std::vector<double>& x, double step) {
  size_t n = x.size();
  std::vector<double> base = f(x);
  size_t m = base.size();
  std::vector<double> jac(m * n);
  std::vector<double> xp = x;
  for (size_t j = 0; j < n; ++j) {
    xp[j] = x[j] + step;
    std::vector<double> fp = f(xp);
    xp[j] = x[j] - step;
    std::vector<double> fm = f(xp);
    xp[j] = x[j];
    for (size_t i = 0; i < m; ++i) jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * step);
  }
  return jac;
}

double log_abs_det(std::vector<double> m, int64_t n) {
  double acc = 0.0;
  for (int64_t col = 0; col < n; ++col) {
    int64_t piv = col;
    double best = std::fabs(m[static_cast<size_t>(col * n + col)]);
    for (int64_t r = col + 1; r < n; ++r) {
      double v = std::fabs(m[static_cast<size_t>(r * n + col)]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (best == 0.0) return -std::numeric_limits<double>::infinity();
    if (piv != col)
      for (int64_t j = 0; j < n; ++j)
        std::swap(m[static_cast<size_t>(piv * n + j)], m[static_cast<size_t>(col * n + j)]);
    double d = m[static_cast<size_t>(col * n + col)];
    acc += std::log(std::fabs(d));
    for (int64_t r = col + 1; r < n; ++r) {
      double factor = m[static_cast<size_t>(r * n + col)] / d;
      if (factor == 0.0) continue;
      for (int64_t j = col + 1; j < n; ++j)
        m[static_cast<size_t>(r * n + j)] -= factor * m[static_cast<size_t>(col * n + j)];
    }
  }
  return acc;
}

double linear_gaussian_logpdf(const std::vector<double>& a, int64_t d, const std::vector<double>& y) {
  // z = A y is standard normal, so log p(y) = log N(Ay; 0, I) + log|det A|.
  double quad = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    double zi = 0.0;
    for (int64_t j = 0; j < d; ++j) zi += a[static_cast<size_t>(i * d + j)] * y[static_cast<size_t>(j)];
    quad += zi * zi;
  }
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  return -0.5 * static_cast<double>(d) * kLog2Pi - 0.5 * quad + log_abs_det(a, d);
}

std::vector<double> iou_from_pixels(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                                    int n_classes, uint8_t ignore_id) {
  std::vector<double> out(static_cast<size_t>(n_classes));
  for (int c = 0; c < n_classes; ++c) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore_id) continue;
      bool in_pred = pred[i] == c;
      bool in_gt = gt[i] == c;
      if (in_pred && in_gt) ++inter;
      if (in_pred || in_gt) ++uni;
    }
    out[static_cast<size_t>(c)] =
        uni == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

double kl_direct(const std::vector<double>& p, const std::vector<double>& q) {
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / q[i]);
  return acc;
}

double cross_entropy_direct(const std::vector<double>& p, const std::vector<double>& q) {
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) acc -= p[i] * std::log(q[i]);
  return acc;
}

double entropy_direct(const std::vector<double>& p) {
  double acc = 0.0;
  for (double v : p)
    if (v > 0.0) acc -= v * std::log(v);
  return acc;
}

std::vector<double> random_simplex(int n, Rng& rng) {
  std::vector<double> out(static_cast<size_t>(n));
  double total = 0.0;
  for (auto& v : out) {
    v = -std::log(rng.uniform_pos());
    total += v;
  }
  for (auto& v : out) v /= total;
  return out;
}

}  // namespace condacl::checks
