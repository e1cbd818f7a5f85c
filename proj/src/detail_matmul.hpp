#pragma once

// Internal matrix-product helper. Eigen's packed gemm kernel is used for
// real matrix shapes; it packs operands into aligned scratch, so results do
// not depend on heap addresses. Products with a single output row or column
// take Eigen's gemv path instead, whose accumulation order shifts with
// pointer alignment. Eigen also reroutes tiny products (rows+cols+depth
// under its gemm-to-coeffbased threshold) to a lazy evaluator that
// vectorizes straight over the unaligned operands, which is just as
// address-sensitive. Both cases run a fixed-order scalar kernel here so
// repeated evaluations are bitwise identical; the flop counts involved are
// trivial either way.

#include <cstdint>

#include <Eigen/Dense>

namespace hmeta::detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// out [m,n] (+)= sum_k lhs(i,k) * rhs(k,j)
// lhs is row-major [m,k], or [k,m] accessed transposed when lt is set;
// rhs is row-major [k,n], or [n,k] accessed transposed when rt is set.
inline void mm(const double* lhs, bool lt, const double* rhs, bool rt,
               double* out, std::int64_t m, std::int64_t n, std::int64_t k,
               bool acc) {
  if (m >= 2 && n >= 2 && m + n + k >= 32) {
    EMap mo(out, m, n);
    if (!lt && !rt) {
      ECMap ml(lhs, m, k), mr(rhs, k, n);
      if (acc) mo.noalias() += ml * mr; else mo.noalias() = ml * mr;
    } else if (!lt && rt) {
      ECMap ml(lhs, m, k), mr(rhs, n, k);
      if (acc) mo.noalias() += ml * mr.transpose();
      else mo.noalias() = ml * mr.transpose();
    } else if (lt && !rt) {
      ECMap ml(lhs, k, m), mr(rhs, k, n);
      if (acc) mo.noalias() += ml.transpose() * mr;
      else mo.noalias() = ml.transpose() * mr;
    } else {
      ECMap ml(lhs, k, m), mr(rhs, n, k);
      if (acc) mo.noalias() += ml.transpose() * mr.transpose();
      else mo.noalias() = ml.transpose() * mr.transpose();
    }
    return;
  }
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const double lv = lt ? lhs[kk * m + i] : lhs[i * k + kk];
        const double rv = rt ? rhs[j * k + kk] : rhs[kk * n + j];
        s += lv * rv;
      }
      if (acc) out[i * n + j] += s; else out[i * n + j] = s;
    }
}

}  // namespace hmeta::detail
