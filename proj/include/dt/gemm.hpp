#pragma once

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Core>

namespace dt {

// C[m,n] (+)= A[m,k] * B[k,n], row-major buffers. Single-threaded so runs
// stay bit-reproducible.
template <class T>
inline void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> A(a, m, k);
  Eigen::Map<const Mat> B(b, k, n);
  Eigen::Map<Mat> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class T>
inline void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> A(a, m, k);
  Eigen::Map<const Mat> B(b, n, k);
  Eigen::Map<Mat> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class T>
inline void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> A(a, k, m);
  Eigen::Map<const Mat> B(b, k, n);
  Eigen::Map<Mat> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace dt
