#pragma once

#include <cstddef>

namespace unidet::kernels {

// Row-major dense kernels over double. Every lane (scalar, AVX2) must produce
// bit-identical output: each output element sees the same IEEE operations in
// the same order, so the runtime choice never changes results. SIMD variants
// therefore vectorize across independent output elements only, and the build
// disables FP contraction so the scalar lane cannot silently fuse into FMA.
struct Kernels {
  const char* name;

  // c[m x n] += a[m x k] * b[k x n]
  void (*matmul_acc)(const double* a, const double* b, double* c,
                     std::size_t m, std::size_t k, std::size_t n);

  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(const double* a, double s, double* out, std::size_t n);

  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);

  void (*relu)(const double* x, double* out, std::size_t n);

  // gx += gy wherever x > 0 (the subgradient at 0 is taken as 0)
  void (*relu_backward)(const double* x, const double* gy, double* gx,
                        std::size_t n);

  // x[r, :] += bias for every row r
  void (*bias_add_rows)(double* x, const double* bias, std::size_t rows,
                        std::size_t cols);
};

const Kernels& scalar();

// nullptr when this build or CPU has no AVX2.
const Kernels* avx2();

// Lane used by the tensor ops. Honors UNIDET_KERNELS=scalar|avx2, otherwise
// picks AVX2 when the CPU supports it. Resolved once per process.
const Kernels& active();

}  // namespace unidet::kernels
