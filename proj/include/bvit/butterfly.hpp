#pragma once

// Butterfly rotations: n_layers stages, each a block-diagonal Givens
// rotation over channel pairs (2j, 2j+1) followed by the perfect shuffle
// out[2j] = x[j], out[2j+1] = x[j + d'/2]. Inputs whose width d is not a
// power of two are zero-padded to d' on entry and the last d' - d columns
// are dropped on exit. The shuffle convention is frozen: checkpoints
// depend on it.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "bvit/tensor.hpp"

namespace bvit {

std::size_t next_pow2(std::size_t d) noexcept;

template <typename T>
struct ButterflyAngles {
  std::size_t n_layers = 0;
  std::size_t dim = 0;
  std::size_t padded_dim = 0;
  Tensor<T> angles;  // [n_layers x padded_dim/2], radians

  ButterflyAngles() = default;
  ButterflyAngles(std::size_t dim, std::size_t n_layers);

  std::size_t half() const noexcept { return padded_dim / 2; }
  std::size_t parameter_count() const noexcept { return angles.size(); }
  T& angle(std::size_t layer, std::size_t pair) noexcept { return angles(layer, pair); }
  const T& angle(std::size_t layer, std::size_t pair) const noexcept { return angles(layer, pair); }
};

// Per-call state kept for the backward pass: the padded input of every layer.
template <typename T>
struct ButterflyCache {
  std::vector<Tensor<T>> layer_inputs;  // n_layers entries of [N x d']
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::uint64_t multiply_adds = 0;  // counted by the kernel loop
  bool valid = false;
};

template <typename T>
struct ButterflyGrads {
  Tensor<T> dx;      // [N x d]
  Tensor<T> dangles; // [n_layers x d'/2]
};

template <typename T>
Tensor<T> butterfly_forward(const Tensor<T>& x, const ButterflyAngles<T>& angles,
                            ButterflyCache<T>* cache = nullptr);

// Consumes the cache (it is invalidated so a second call is a usage error).
template <typename T>
ButterflyGrads<T> butterfly_backward(const Tensor<T>& grad_out, const ButterflyAngles<T>& angles,
                                     ButterflyCache<T>& cache);

template <typename T>
Tensor<T> perfect_shuffle(const Tensor<T>& x);

template <typename T>
Tensor<T> inverse_perfect_shuffle(const Tensor<T>& x);

// Dense d x d matrix B with B * x == butterfly_forward(x) for column vectors.
template <typename T>
Tensor<T> materialize(const ButterflyAngles<T>& angles);

namespace serial {
template <typename T>
Tensor<T> butterfly_forward(const Tensor<T>& x, const ButterflyAngles<T>& angles);
}

}  // namespace bvit
