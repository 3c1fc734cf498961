#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "bvit/tensor.hpp"

namespace bvit {

// Parameter groups used by the census and the memory cross-check.
namespace group {
inline constexpr const char* kEmbeddings = "embeddings";
inline constexpr const char* kAttention = "attention";
inline constexpr const char* kNorm = "norm";
inline constexpr const char* kGate = "gate";
inline constexpr const char* kAngles = "angles";
inline constexpr const char* kSubstrate = "substrate";
inline constexpr const char* kDownProj = "down_proj";
inline constexpr const char* kExpertUp = "expert_up";
inline constexpr const char* kExpertDown = "expert_down";
inline constexpr const char* kFfnUp = "ffn_up";
inline constexpr const char* kFfnDown = "ffn_down";
inline constexpr const char* kHead = "head";
}  // namespace group

// Non-owning handle to a learnable tensor and its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  std::string group;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
};

template <typename T>
using ParamList = std::vector<Param<T>>;

using Census = std::map<std::string, std::size_t>;

template <typename T>
Census census_of(const ParamList<T>& params) {
  Census c;
  for (const auto& p : params) c[p.group] += p.value->size();
  return c;
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.grad->zero();
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adaptive-moment optimizer over a fixed parameter list.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>& w = *params_[k].value;
      const Tensor<T>& g = *params_[k].grad;
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = opts_.beta1 * static_cast<double>(m[i]) + (1.0 - opts_.beta1) * gi;
        const double vi = opts_.beta2 * static_cast<double>(v[i]) + (1.0 - opts_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double update = (mi / bc1) / (std::sqrt(vi / bc2) + opts_.eps);
        if (opts_.weight_decay > 0) update += opts_.weight_decay * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * update);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  ParamList<T> params_;
  AdamOptions opts_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup from 0 to peak, then cosine decay reaching 0 at the last step.
struct WarmupCosine {
  double peak = 3e-4;
  std::size_t total_steps = 1;
  std::size_t warmup_steps = 0;

  static WarmupCosine with_fraction(double peak, std::size_t total, double warmup_fraction) {
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total)));
    return {peak, total, std::min(warm, total > 0 ? total - 1 : 0)};
  }

  double operator()(std::size_t step) const noexcept {
    if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::size_t span = total_steps > warmup_steps + 1 ? total_steps - 1 - warmup_steps : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
    return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
  }
};

}  // namespace bvit
