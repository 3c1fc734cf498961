#pragma once

// Shared ternary substrate: AbsMean quantization, straight-through gradient,
// add/subtract application, and the packed on-disk format.
//
// Substrate file layout (little-endian):
//   offset 0   magic "BVTS"
//   offset 4   u16 version (1)
//   offset 6   u32 rows
//   offset 10  u32 cols
//   offset 14  f64 gamma
//   offset 22  ceil(rows*cols/5) payload bytes
// Each payload byte holds five trits of the row-major sequence as the
// base-3 number sum_i (t_i + 1) * 3^i, lowest index in the least
// significant digit. Unused digits of the final byte are zero.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bvit/tensor.hpp"

namespace bvit {

inline constexpr double kQuantEps = 1e-8;
inline constexpr std::uint16_t kSubstrateVersion = 1;
inline constexpr std::size_t kSubstrateHeaderBytes = 22;
inline constexpr std::size_t kTritsPerByte = 5;

struct TernaryMatrix {
  std::size_t rows = 0;  // d_ff
  std::size_t cols = 0;  // d_model
  std::vector<std::int8_t> trits;  // row-major, values in {-1, 0, +1}
  double gamma = 0;

  std::int8_t at(std::size_t r, std::size_t c) const noexcept { return trits[r * cols + c]; }

  // gamma * T as a dense matrix.
  template <typename T>
  Tensor<T> dequantize() const;

  bool operator==(const TernaryMatrix&) const = default;
};

// Full-precision master copy of the substrate.
template <typename T>
struct LatentSubstrate {
  Tensor<T> weights;  // [d_ff x d_model]
};

// gamma = mean |W|; trits = clip(round(W / (gamma + eps)), -1, 1) with
// round-half-away-from-zero.
template <typename T>
TernaryMatrix absmean_quantize(const Tensor<T>& w);

template <typename T>
TernaryMatrix absmean_quantize(const LatentSubstrate<T>& w) {
  return absmean_quantize(w.weights);
}

// dQ/dW treated as identity: the gradient passes through unchanged.
template <typename T>
Tensor<T> ste_backward(const Tensor<T>& grad_out);

// y = gamma * x * T^T for x [N x cols]; returns [N x rows].
template <typename T>
Tensor<T> ternary_apply(const Tensor<T>& x, const TernaryMatrix& t);

// dx = gamma * dy * T for dy [N x rows]; returns [N x cols].
template <typename T>
Tensor<T> ternary_apply_backward_input(const Tensor<T>& dy, const TernaryMatrix& t);

std::size_t packed_payload_bytes(std::size_t trit_count) noexcept;

std::vector<std::uint8_t> pack(const TernaryMatrix& t);
TernaryMatrix unpack(std::span<const std::uint8_t> bytes);

void write_substrate(const std::filesystem::path& path, const TernaryMatrix& t);
TernaryMatrix read_substrate(const std::filesystem::path& path);

}  // namespace bvit
