#pragma once

// Dense row-major tensor plus a thin BLAS GEMM shim. float runs production
// inference/training; double instantiations back the finite-difference tests.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <cblas.h>

#include "pmiris/common.hpp"

namespace pmiris {

template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(count(), T(0)); }

    std::size_t count() const {
        std::size_t n = 1;
        for (int d : shape) n *= std::size_t(d);
        return shape.empty() ? 0 : n;
    }
    bool empty() const { return v.empty(); }
    int dim(int i) const { return shape[std::size_t(i)]; }

    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
};

template <typename T>
inline std::string shape_string(const Tensor<T>& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

// C[M,N] = alpha * op(A) * op(B) + beta * C, all row-major.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace pmiris
