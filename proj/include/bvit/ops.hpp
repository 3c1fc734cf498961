#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bvit/tensor.hpp"

namespace bvit {

// C = A * B for A [m x k], B [k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// C = A * B^T for A [m x k], B [n x k]. Used for x * W^T with W stored [out x in].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

// C = A^T * B for A [k x m], B [k x n].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct MatmulGrads {
  Tensor<T> da;
  Tensor<T> db;
};

// Gradients of C = A * B given dC.
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc);

// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <typename T>
T gelu_scalar(T x) noexcept;

template <typename T>
T gelu_derivative(T x) noexcept;

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
struct LayerNormGrads {
  Tensor<T> dx;
  Tensor<T> dgain;
  Tensor<T> dbias;
};

// Normalizes each row of x (last extent d >= 2). When cache is non-null it
// receives what layer_norm_backward needs.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     LayerNormCache<T>* cache = nullptr);

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& gain,
                                      const LayerNormCache<T>& cache);

// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

template <typename T>
struct CrossEntropyResult {
  double loss = 0;       // mean over the batch
  Tensor<T> dlogits;     // d(loss)/d(logits)
  std::size_t correct = 0;
};

// Mean negative log-likelihood. label_smoothing mixes the one-hot target
// with the uniform distribution.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                            double label_smoothing = 0.0);

}  // namespace bvit
