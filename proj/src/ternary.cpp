#include "bvit/ternary.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "bvit/kernels.hpp"

namespace bvit {

template <typename T>
Tensor<T> TernaryMatrix::dequantize() const {
  Tensor<T> out({rows, cols});
  for (std::size_t i = 0; i < trits.size(); ++i) out[i] = static_cast<T>(gamma * trits[i]);
  return out;
}

template <typename T>
TernaryMatrix absmean_quantize(const Tensor<T>& w) {
  TernaryMatrix t;
  t.rows = w.rows();
  t.cols = w.cols();
  t.trits.resize(w.size());
  double sum = 0;
  for (const T& v : w.values()) sum += std::abs(static_cast<double>(v));
  t.gamma = w.size() ? sum / static_cast<double>(w.size()) : 0.0;
  const double denom = t.gamma + kQuantEps;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double q = std::round(static_cast<double>(w[i]) / denom);
    t.trits[i] = static_cast<std::int8_t>(std::clamp(q, -1.0, 1.0));
  }
  return t;
}

template <typename T>
Tensor<T> ste_backward(const Tensor<T>& grad_out) {
  return grad_out;
}

template <typename T>
Tensor<T> ternary_apply(const Tensor<T>& x, const TernaryMatrix& t) {
  if (x.cols() != t.cols)
    throw DimensionError("ternary_apply: input width " + std::to_string(x.cols()) + " does not match substrate cols " +
                         std::to_string(t.cols));
  Tensor<T> y({x.rows(), t.rows});
  kernels::ternary_gemm(x.data(), t.trits.data(), y.data(), x.rows(), t.rows, t.cols, static_cast<T>(t.gamma));
  return y;
}

template <typename T>
Tensor<T> ternary_apply_backward_input(const Tensor<T>& dy, const TernaryMatrix& t) {
  if (dy.cols() != t.rows) throw DimensionError("ternary_apply_backward_input: gradient width mismatch");
  const std::size_t n = dy.rows();
  Tensor<T> dx({n, t.cols});
  const T g = static_cast<T>(t.gamma);
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * t.rows * t.cols > kernels::kParallelThreshold)
  for (std::int64_t i = 0; i < count; ++i) {
    const T* dyi = dy.data() + i * t.rows;
    T* dxi = dx.data() + i * t.cols;
    for (std::size_t r = 0; r < t.rows; ++r) {
      const T v = dyi[r];
      const std::int8_t* tr = t.trits.data() + r * t.cols;
      for (std::size_t c = 0; c < t.cols; ++c) {
        const T pos = tr[c] > 0 ? v : T{0};
        const T neg = tr[c] < 0 ? v : T{0};
        dxi[c] += pos - neg;
      }
    }
    for (std::size_t c = 0; c < t.cols; ++c) dxi[c] *= g;
  }
  return dx;
}

std::size_t packed_payload_bytes(std::size_t trit_count) noexcept {
  return (trit_count + kTritsPerByte - 1) / kTritsPerByte;
}

namespace {

static_assert(std::endian::native == std::endian::little, "substrate format assumes a little-endian host");

template <typename U>
void put(std::vector<std::uint8_t>& out, std::size_t offset, U v) {
  std::memcpy(out.data() + offset, &v, sizeof(U));
}

template <typename U>
U get(std::span<const std::uint8_t> in, std::size_t offset) {
  U v;
  std::memcpy(&v, in.data() + offset, sizeof(U));
  return v;
}

}  // namespace

std::vector<std::uint8_t> pack(const TernaryMatrix& t) {
  if (t.trits.size() != t.rows * t.cols) throw DimensionError("pack: trit count does not match rows*cols");
  std::vector<std::uint8_t> out(kSubstrateHeaderBytes);
  out.reserve(kSubstrateHeaderBytes + packed_payload_bytes(t.trits.size()));
  std::memcpy(out.data(), "BVTS", 4);
  put<std::uint16_t>(out, 4, kSubstrateVersion);
  put<std::uint32_t>(out, 6, static_cast<std::uint32_t>(t.rows));
  put<std::uint32_t>(out, 10, static_cast<std::uint32_t>(t.cols));
  put<double>(out, 14, t.gamma);
  for (std::size_t base = 0; base < t.trits.size(); base += kTritsPerByte) {
    unsigned value = 0, weight = 1;
    const std::size_t end = std::min(base + kTritsPerByte, t.trits.size());
    for (std::size_t i = base; i < end; ++i) {
      value += static_cast<unsigned>(t.trits[i] + 1) * weight;
      weight *= 3;
    }
    out.push_back(static_cast<std::uint8_t>(value));
  }
  return out;
}

TernaryMatrix unpack(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kSubstrateHeaderBytes)
    throw FormatError("substrate: truncated header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), "BVTS", 4) != 0) throw FormatError("substrate: bad magic");
  const auto version = get<std::uint16_t>(bytes, 4);
  if (version != kSubstrateVersion) throw FormatError("substrate: unsupported version " + std::to_string(version));
  TernaryMatrix t;
  t.rows = get<std::uint32_t>(bytes, 6);
  t.cols = get<std::uint32_t>(bytes, 10);
  t.gamma = get<double>(bytes, 14);
  if (!std::isfinite(t.gamma) || t.gamma < 0) throw FormatError("substrate: invalid gamma");
  const std::size_t count = t.rows * t.cols;
  const std::size_t payload = packed_payload_bytes(count);
  if (bytes.size() != kSubstrateHeaderBytes + payload)
    throw FormatError("substrate: expected " + std::to_string(kSubstrateHeaderBytes + payload) + " bytes, got " +
                      std::to_string(bytes.size()));
  t.trits.resize(count);
  for (std::size_t b = 0; b < payload; ++b) {
    unsigned value = bytes[kSubstrateHeaderBytes + b];
    const std::size_t base = b * kTritsPerByte;
    const std::size_t digits = std::min(kTritsPerByte, count - base);
    unsigned limit = 1;
    for (std::size_t i = 0; i < digits; ++i) limit *= 3;
    if (value >= limit)
      throw FormatError("substrate: payload byte " + std::to_string(b) + " value " + std::to_string(value) +
                        " is not a valid trit group");
    for (std::size_t i = 0; i < digits; ++i) {
      t.trits[base + i] = static_cast<std::int8_t>(static_cast<int>(value % 3) - 1);
      value /= 3;
    }
  }
  return t;
}

void write_substrate(const std::filesystem::path& path, const TernaryMatrix& t) {
  const auto bytes = pack(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TernaryMatrix read_substrate(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return unpack(bytes);
}

#define BVIT_INSTANTIATE_TERNARY(T)                                               \
  template Tensor<T> TernaryMatrix::dequantize<T>() const;                        \
  template TernaryMatrix absmean_quantize(const Tensor<T>&);                      \
  template Tensor<T> ste_backward(const Tensor<T>&);                              \
  template Tensor<T> ternary_apply(const Tensor<T>&, const TernaryMatrix&);       \
  template Tensor<T> ternary_apply_backward_input(const Tensor<T>&, const TernaryMatrix&);

BVIT_INSTANTIATE_TERNARY(float)
BVIT_INSTANTIATE_TERNARY(double)

}  // namespace bvit
