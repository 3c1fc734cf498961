#include "bvit/butterfly.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bvit {

std::size_t next_pow2(std::size_t d) noexcept {
  std::size_t p = 1;
  while (p < d) p <<= 1;
  return p;
}

template <typename T>
ButterflyAngles<T>::ButterflyAngles(std::size_t dim_, std::size_t n_layers_)
    : n_layers(n_layers_), dim(dim_), padded_dim(std::max<std::size_t>(2, next_pow2(dim_))),
      angles({n_layers_, std::max<std::size_t>(2, next_pow2(dim_)) / 2}) {}

namespace {

template <typename T>
struct Trig {
  std::vector<T> cos, sin;  // [n_layers * half]
};

template <typename T>
Trig<T> trig_tables(const ButterflyAngles<T>& a) {
  Trig<T> t;
  t.cos.resize(a.angles.size());
  t.sin.resize(a.angles.size());
  for (std::size_t i = 0; i < a.angles.size(); ++i) {
    t.cos[i] = std::cos(a.angles[i]);
    t.sin[i] = std::sin(a.angles[i]);
  }
  return t;
}

template <typename T>
inline void givens_pairs(T* buf, const T* c, const T* s, std::size_t half) noexcept {
  for (std::size_t j = 0; j < half; ++j) {
    const T e = buf[2 * j];
    const T o = buf[2 * j + 1];
    buf[2 * j] = c[j] * e - s[j] * o;
    buf[2 * j + 1] = s[j] * e + c[j] * o;
  }
}

template <typename T>
inline void shuffle_into(const T* src, T* dst, std::size_t half) noexcept {
  for (std::size_t j = 0; j < half; ++j) {
    dst[2 * j] = src[j];
    dst[2 * j + 1] = src[j + half];
  }
}

template <typename T>
inline void unshuffle_into(const T* src, T* dst, std::size_t half) noexcept {
  for (std::size_t j = 0; j < half; ++j) {
    dst[j] = src[2 * j];
    dst[j + half] = src[2 * j + 1];
  }
}

// Transforms one row; returns the multiply count.
template <typename T>
std::uint64_t forward_row(const T* in, T* out, const ButterflyAngles<T>& a, const Trig<T>& trig,
                          std::vector<Tensor<T>>* layer_inputs, std::size_t row, std::vector<T>& buf,
                          std::vector<T>& tmp) {
  const std::size_t dp = a.padded_dim;
  const std::size_t half = a.half();
  for (std::size_t c = 0; c < a.dim; ++c) buf[c] = in[c];
  for (std::size_t c = a.dim; c < dp; ++c) buf[c] = T{0};
  std::uint64_t ops = 0;
  for (std::size_t l = 0; l < a.n_layers; ++l) {
    if (layer_inputs) {
      T* dst = (*layer_inputs)[l].data() + row * dp;
      for (std::size_t c = 0; c < dp; ++c) dst[c] = buf[c];
    }
    givens_pairs(buf.data(), trig.cos.data() + l * half, trig.sin.data() + l * half, half);
    ops += 4 * half;
    shuffle_into(buf.data(), tmp.data(), half);
    buf.swap(tmp);
  }
  for (std::size_t c = 0; c < a.dim; ++c) out[c] = buf[c];
  return ops;
}

template <typename T>
void check_width(const Tensor<T>& x, const ButterflyAngles<T>& a, const char* what) {
  if (x.cols() != a.dim)
    throw DimensionError(std::string(what) + ": input width " + std::to_string(x.cols()) +
                         " does not match rotation width " + std::to_string(a.dim));
  if (a.angles.rank() != 2 || a.angles.dim(0) != a.n_layers || a.angles.dim(1) != a.half())
    throw DimensionError(std::string(what) + ": angle tensor shape " + shape_str(a.angles.shape()));
}

}  // namespace

template <typename T>
Tensor<T> butterfly_forward(const Tensor<T>& x, const ButterflyAngles<T>& a, ButterflyCache<T>* cache) {
  check_width(x, a, "butterfly_forward");
  const std::size_t n = x.rows();
  const std::size_t dp = a.padded_dim;
  const Trig<T> trig = trig_tables(a);
  Tensor<T> out(x.shape());
  std::vector<Tensor<T>>* layer_inputs = nullptr;
  if (cache) {
    cache->layer_inputs.assign(a.n_layers, Tensor<T>({n, dp}));
    cache->rows = n;
    cache->dim = a.dim;
    layer_inputs = &cache->layer_inputs;
  }
  std::uint64_t ops = 0;
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel reduction(+ : ops) if (n * dp * a.n_layers > 4096)
  {
    std::vector<T> buf(dp), tmp(dp);
#pragma omp for schedule(static)
    for (std::int64_t r = 0; r < count; ++r) {
      const auto row = static_cast<std::size_t>(r);
      ops += forward_row(x.data() + row * a.dim, out.data() + row * a.dim, a, trig, layer_inputs, row, buf, tmp);
    }
  }
  if (cache) {
    cache->multiply_adds = ops;
    cache->valid = true;
  }
  return out;
}

template <typename T>
ButterflyGrads<T> butterfly_backward(const Tensor<T>& grad_out, const ButterflyAngles<T>& a,
                                     ButterflyCache<T>& cache) {
  if (!cache.valid) throw UsageError("butterfly_backward: no forward cache (missing or already consumed)");
  check_width(grad_out, a, "butterfly_backward");
  if (grad_out.rows() != cache.rows || cache.dim != a.dim || cache.layer_inputs.size() != a.n_layers)
    throw UsageError("butterfly_backward: cache was produced by a different forward call");
  const std::size_t n = cache.rows;
  const std::size_t dp = a.padded_dim;
  const std::size_t half = a.half();
  const Trig<T> trig = trig_tables(a);

  // g holds the running gradient w.r.t. the current layer's output, padded.
  Tensor<T> g({n, dp});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < a.dim; ++c) g(r, c) = grad_out(r, c);
  Tensor<T> drot({n, dp});

  ButterflyGrads<T> res{Tensor<T>(grad_out.shape()), Tensor<T>({a.n_layers, half})};
  const auto count = static_cast<std::int64_t>(n);
  const auto pairs = static_cast<std::int64_t>(half);
  const bool par = n * dp > 4096;

  for (std::size_t li = a.n_layers; li-- > 0;) {
    const T* c = trig.cos.data() + li * half;
    const T* s = trig.sin.data() + li * half;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t r = 0; r < count; ++r) {
      T* gr = g.data() + r * dp;
      T* dr = drot.data() + r * dp;
      unshuffle_into(gr, dr, half);
      for (std::size_t j = 0; j < half; ++j) {
        const T de = dr[2 * j];
        const T dodd = dr[2 * j + 1];
        gr[2 * j] = c[j] * de + s[j] * dodd;
        gr[2 * j + 1] = -s[j] * de + c[j] * dodd;
      }
    }
    const Tensor<T>& xin = cache.layer_inputs[li];
    T* dang = res.dangles.data() + li * half;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t jj = 0; jj < pairs; ++jj) {
      const auto j = static_cast<std::size_t>(jj);
      T acc{0};
      for (std::size_t r = 0; r < n; ++r) {
        const T e = xin(r, 2 * j);
        const T o = xin(r, 2 * j + 1);
        const T re = c[j] * e - s[j] * o;
        const T ro = s[j] * e + c[j] * o;
        acc += drot(r, 2 * j + 1) * re - drot(r, 2 * j) * ro;
      }
      dang[j] = acc;
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t col = 0; col < a.dim; ++col) res.dx(r, col) = g(r, col);
  cache.valid = false;
  cache.layer_inputs.clear();
  return res;
}

template <typename T>
Tensor<T> perfect_shuffle(const Tensor<T>& x) {
  const std::size_t d = x.cols();
  if (d % 2 != 0) throw DimensionError("perfect_shuffle: width " + std::to_string(d) + " is odd");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) shuffle_into(x.data() + r * d, out.data() + r * d, d / 2);
  return out;
}

template <typename T>
Tensor<T> inverse_perfect_shuffle(const Tensor<T>& x) {
  const std::size_t d = x.cols();
  if (d % 2 != 0) throw DimensionError("inverse_perfect_shuffle: width " + std::to_string(d) + " is odd");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) unshuffle_into(x.data() + r * d, out.data() + r * d, d / 2);
  return out;
}

template <typename T>
Tensor<T> materialize(const ButterflyAngles<T>& a) {
  const std::size_t d = a.dim;
  Tensor<T> basis({d, d});
  for (std::size_t i = 0; i < d; ++i) basis(i, i) = T{1};
  // Row j of the result is B e_j, i.e. column j of B.
  const Tensor<T> images = butterfly_forward(basis, a);
  Tensor<T> b({d, d});
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < d; ++i) b(i, j) = images(j, i);
  return b;
}

namespace serial {

template <typename T>
Tensor<T> butterfly_forward(const Tensor<T>& x, const ButterflyAngles<T>& a) {
  check_width(x, a, "serial::butterfly_forward");
  const Trig<T> trig = trig_tables(a);
  Tensor<T> out(x.shape());
  std::vector<T> buf(a.padded_dim), tmp(a.padded_dim);
  for (std::size_t r = 0; r < x.rows(); ++r)
    forward_row<T>(x.data() + r * a.dim, out.data() + r * a.dim, a, trig, nullptr, r, buf, tmp);
  return out;
}

template Tensor<float> butterfly_forward(const Tensor<float>&, const ButterflyAngles<float>&);
template Tensor<double> butterfly_forward(const Tensor<double>&, const ButterflyAngles<double>&);

}  // namespace serial

#define BVIT_INSTANTIATE_BUTTERFLY(T)                                                                       \
  template struct ButterflyAngles<T>;                                                                       \
  template Tensor<T> butterfly_forward(const Tensor<T>&, const ButterflyAngles<T>&, ButterflyCache<T>*);    \
  template ButterflyGrads<T> butterfly_backward(const Tensor<T>&, const ButterflyAngles<T>&, ButterflyCache<T>&); \
  template Tensor<T> perfect_shuffle(const Tensor<T>&);                                                     \
  template Tensor<T> inverse_perfect_shuffle(const Tensor<T>&);                                             \
  template Tensor<T> materialize(const ButterflyAngles<T>&);

BVIT_INSTANTIATE_BUTTERFLY(float)
BVIT_INSTANTIATE_BUTTERFLY(double)

}  // namespace bvit
