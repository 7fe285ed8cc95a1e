#pragma once

#include <cstdint>
#include <vector>

namespace condacl {

// Accumulating dense kernels, row-major. All results are bitwise independent
// of the thread count (rows are partitioned, per-row order is fixed).

/// C (M×N) += A (M×K) · B (K×N)
void gemm_nn(int64_t M, int64_t K, int64_t N, const double* A, const double* B, double* C);

/// C (M×N) += Aᵀ · B with A stored as (K×M)
void gemm_tn(int64_t M, int64_t K, int64_t N, const double* A, const double* B, double* C);

/// C (M×N) += A · Bᵀ with B stored as (N×K)
void gemm_nt(int64_t M, int64_t K, int64_t N, const double* A, const double* B, double* C);

/// Intra-op worker count from CONDA_CL_THREADS (default 1).
int intra_op_threads();

struct LuResult {
  std::vector<double> lu;  // packed L\U factors
  std::vector<int> pivots;
  double log_abs_det;
  int sign;  // 0 when singular
};

/// LU with partial pivoting of an n×n row-major matrix.
LuResult lu_factor(const double* m, int64_t n);

/// Inverse from a prior factorization. Undefined when lu.sign == 0.
std::vector<double> lu_inverse(const LuResult& lu, int64_t n);

}  // namespace condacl
