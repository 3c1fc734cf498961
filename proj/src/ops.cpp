#include "bvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bvit/kernels.hpp"

namespace bvit {

namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.dim(1))
    throw DimensionError("matmul_nt: inner extents differ " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
  Tensor<T> c({a.rows(), b.dim(0)});
  kernels::gemm_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.dim(0));
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: inner extents differ " + shape_str(a.shape()) + "^T * " +
                         shape_str(b.shape()));
  Tensor<T> c({a.cols(), b.cols()});
  kernels::gemm_tn(a.data(), b.data(), c.data(), a.cols(), a.rows(), b.cols());
  return c;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc) {
  if (dc.rows() != a.rows() || dc.cols() != b.cols())
    throw DimensionError("matmul_backward: upstream gradient shape " + shape_str(dc.shape()));
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

template <typename T>
T gelu_scalar(T x) noexcept {
  return static_cast<T>(0.5) * x * (T{1} + std::erf(x * static_cast<T>(M_SQRT1_2)));
}

template <typename T>
T gelu_derivative(T x) noexcept {
  const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x * static_cast<T>(M_SQRT1_2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  if (x.shape() != dy.shape()) throw DimensionError("gelu_backward: shape mismatch");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_derivative(x[i]);
  return dx;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     LayerNormCache<T>* cache) {
  const std::size_t d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: width must be at least 2");
  if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm: gain/bias width mismatch");
  const std::size_t n = x.rows();
  Tensor<T> y(x.shape());
  if (cache) {
    cache->xhat = Tensor<T>(x.shape());
    cache->inv_std.assign(n, T{0});
  }
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * d;
    T mean{0};
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    T* yr = y.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) {
      const T xh = (xr[c] - mean) * inv;
      if (cache) cache->xhat[r * d + c] = xh;
      yr[c] = gain[c] * xh + bias[c];
    }
    if (cache) cache->inv_std[r] = inv;
  }
  return y;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& gain,
                                      const LayerNormCache<T>& cache) {
  if (dy.shape() != cache.xhat.shape()) throw UsageError("layer_norm_backward: cache does not match gradient");
  const std::size_t d = dy.cols();
  const std::size_t n = dy.rows();
  LayerNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({d}), Tensor<T>({d})};
  std::vector<T> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy.data() + r * d;
    const T* xh = cache.xhat.data() + r * d;
    T mean_dxhat{0}, mean_dxhat_xhat{0};
    for (std::size_t c = 0; c < d; ++c) {
      g.dgain[c] += dyr[c] * xh[c];
      g.dbias[c] += dyr[c];
      dxhat[c] = dyr[c] * gain[c];
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xh[c];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    T* dxr = g.dx.data() + r * d;
    const T inv = cache.inv_std[r];
    for (std::size_t c = 0; c < d; ++c) dxr[c] = inv * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
  }
  return g;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data() + r * d;
    T* yr = y.data() + r * d;
    const T mx = *std::max_element(xr, xr + d);
    T sum{0};
    for (std::size_t c = 0; c < d; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    for (std::size_t c = 0; c < d; ++c) yr[c] /= sum;
  }
  return y;
}

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                            double label_smoothing) {
  const std::size_t b = logits.rows();
  const std::size_t classes = logits.cols();
  if (labels.size() != b) throw DimensionError("softmax_cross_entropy: label count differs from batch");
  CrossEntropyResult<T> res;
  res.dlogits = Tensor<T>(logits.shape());
  const double off = label_smoothing / static_cast<double>(classes);
  const double on = 1.0 - label_smoothing + off;
  double total = 0;
  for (std::size_t r = 0; r < b; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    const T* lr = logits.data() + r * classes;
    const std::size_t argmax = static_cast<std::size_t>(std::max_element(lr, lr + classes) - lr);
    if (argmax == static_cast<std::size_t>(label)) ++res.correct;
    const double mx = static_cast<double>(lr[argmax]);
    double sum = 0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(lr[c]) - mx);
    const double log_z = mx + std::log(sum);
    double row_loss = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double target = label_smoothing > 0 ? (c == static_cast<std::size_t>(label) ? on : off)
                                                : (c == static_cast<std::size_t>(label) ? 1.0 : 0.0);
      const double logp = static_cast<double>(lr[c]) - log_z;
      if (target > 0) row_loss -= target * logp;
      res.dlogits[r * classes + c] = static_cast<T>((std::exp(logp) - target) / static_cast<double>(b));
    }
    total += row_loss;
  }
  res.loss = total / static_cast<double>(b);
  return res;
}

#define BVIT_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                                   \
  template MatmulGrads<T> matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template T gelu_scalar(T) noexcept;                                                                 \
  template T gelu_derivative(T) noexcept;                                                             \
  template Tensor<T> gelu(const Tensor<T>&);                                                          \
  template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, LayerNormCache<T>*); \
  template LayerNormGrads<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const LayerNormCache<T>&); \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                  \
  template CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>, double);

BVIT_INSTANTIATE_OPS(float)
BVIT_INSTANTIATE_OPS(double)

}  // namespace bvit
