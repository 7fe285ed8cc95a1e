#include "condacl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <thread>

namespace condacl {

int intra_op_threads() {
  static int cached = [] {
    const char* env = std::getenv("CONDA_CL_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
  }();
  return cached;
}

namespace {

// Splits [0, M) into contiguous row ranges and runs fn(r0, r1) on each.
template <typename Fn>
void parallel_rows(int64_t M, int64_t min_rows_per_thread, Fn&& fn) {
  int threads = intra_op_threads();
  if (threads <= 1 || M < 2 * min_rows_per_thread) {
    fn(0, M);
    return;
  }
  int use = static_cast<int>(std::min<int64_t>(threads, (M + min_rows_per_thread - 1) / min_rows_per_thread));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(use));
  int64_t chunk = (M + use - 1) / use;
  for (int t = 0; t < use; ++t) {
    int64_t r0 = t * chunk;
    int64_t r1 = std::min(M, r0 + chunk);
    if (r0 >= r1) break;
    pool.emplace_back([&fn, r0, r1] { fn(r0, r1); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

void gemm_nn(int64_t M, int64_t K, int64_t N, const double* A, const double* B, double* C) {
  parallel_rows(M, 16, [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      double* ci = C + i * N;
      const double* ai = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        double a = ai[k];
        if (a == 0.0) continue;
        const double* bk = B + k * N;
        for (int64_t j = 0; j < N; ++j) ci[j] += a * bk[j];
      }
    }
  });
}

void gemm_tn(int64_t M, int64_t K, int64_t N, const double* A, const double* B, double* C) {
  // No row partitioning: every k touches all output rows. Serial keeps the
  // accumulation order fixed; M here is small in practice (channel counts).
  for (int64_t k = 0; k < K; ++k) {
    const double* ak = A + k * M;
    const double* bk = B + k * N;
    for (int64_t m = 0; m < M; ++m) {
      double a = ak[m];
      if (a == 0.0) continue;
      double* cm = C + m * N;
      for (int64_t j = 0; j < N; ++j) cm[j] += a * bk[j];
    }
  }
}

void gemm_nt(int64_t M, int64_t K, int64_t N, const double* A, const double* B, double* C) {
  parallel_rows(M, 16, [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      const double* ai = A + i * K;
      double* ci = C + i * N;
      for (int64_t j = 0; j < N; ++j) {
        const double* bj = B + j * K;
        double s = 0.0;
        for (int64_t k = 0; k < K; ++k) s += ai[k] * bj[k];
        ci[j] += s;
      }
    }
  });
}

LuResult lu_factor(const double* m, int64_t n) {
  LuResult r;
  r.lu.assign(m, m + n * n);
  r.pivots.resize(static_cast<size_t>(n));
  r.sign = 1;
  r.log_abs_det = 0.0;
  double* a = r.lu.data();
  for (int64_t col = 0; col < n; ++col) {
    int64_t piv = col;
    double best = std::fabs(a[col * n + col]);
    for (int64_t row = col + 1; row < n; ++row) {
      double v = std::fabs(a[row * n + col]);
      if (v > best) {
        best = v;
        piv = row;
      }
    }
    r.pivots[static_cast<size_t>(col)] = static_cast<int>(piv);
    if (best == 0.0) {
      r.sign = 0;
      r.log_abs_det = -std::numeric_limits<double>::infinity();
      return r;
    }
    if (piv != col) {
      for (int64_t j = 0; j < n; ++j) std::swap(a[piv * n + j], a[col * n + j]);
      r.sign = -r.sign;
    }
    double d = a[col * n + col];
    if (d < 0) r.sign = -r.sign;
    r.log_abs_det += std::log(std::fabs(d));
    for (int64_t row = col + 1; row < n; ++row) {
      double f = a[row * n + col] / d;
      a[row * n + col] = f;
      if (f == 0.0) continue;
      for (int64_t j = col + 1; j < n; ++j) a[row * n + j] -= f * a[col * n + j];
    }
  }
  return r;
}

std::vector<double> lu_inverse(const LuResult& lu, int64_t n) {
  std::vector<double> inv(static_cast<size_t>(n * n), 0.0);
  const double* a = lu.lu.data();
  std::vector<double> col(static_cast<size_t>(n));
  for (int64_t c = 0; c < n; ++c) {
    std::fill(col.begin(), col.end(), 0.0);
    col[static_cast<size_t>(c)] = 1.0;
    // apply row swaps
    for (int64_t i = 0; i < n; ++i) {
      int piv = lu.pivots[static_cast<size_t>(i)];
      if (piv != i) std::swap(col[static_cast<size_t>(i)], col[static_cast<size_t>(piv)]);
    }
    // forward substitution (unit lower)
    for (int64_t i = 1; i < n; ++i) {
      double s = col[static_cast<size_t>(i)];
      for (int64_t j = 0; j < i; ++j) s -= a[i * n + j] * col[static_cast<size_t>(j)];
      col[static_cast<size_t>(i)] = s;
    }
    // back substitution
    for (int64_t i = n - 1; i >= 0; --i) {
      double s = col[static_cast<size_t>(i)];
      for (int64_t j = i + 1; j < n; ++j) s -= a[i * n + j] * col[static_cast<size_t>(j)];
      col[static_cast<size_t>(i)] = s / a[i * n + i];
    }
    for (int64_t i = 0; i < n; ++i) inv[static_cast<size_t>(i * n + c)] = col[static_cast<size_t>(i)];
  }
  return inv;
}

}  // namespace condacl
