#pragma once

// Feed-forward blocks for the transformer: the orbital MoE layer (experts as
// butterfly rotations around one shared ternary substrate) and the two
// baselines, an independent-expert MoE and a dense FFN. Routing, auxiliary
// losses and expert-similarity analysis live here as well.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bvit/butterfly.hpp"
#include "bvit/params.hpp"
#include "bvit/ternary.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

enum class FfnKind { orbital, standard_moe, dense };

const char* to_string(FfnKind kind) noexcept;
FfnKind parse_ffn_kind(const std::string& s);

template <typename T>
struct RoutingStats {
  std::size_t n_experts = 0;
  std::size_t top_k = 0;
  std::size_t batch = 0;
  std::size_t tokens = 0;  // routed tokens per sample
  std::vector<std::size_t> token_counts;  // n_i, one per (token, slot) assignment
  std::vector<double> load_fractions;     // f_i = n_i / (batch * tokens * top_k)
  Tensor<T> gate_logits;                  // [batch x tokens x n_experts]
};

template <typename T>
struct Routing {
  std::size_t top_k = 0;
  std::vector<std::uint32_t> experts;  // [N x k], slot order = descending logit
  Tensor<T> weights;                   // [N x k], softmax over the selected logits
  RoutingStats<T> stats;
};

// Top-k selection on precomputed logits [batch*tokens x n_experts]. Ties go
// to the lower expert index.
template <typename T>
Routing<T> route_logits(const Tensor<T>& logits, std::size_t top_k, std::size_t batch);

// logits = h * gate_weights^T followed by route_logits.
template <typename T>
Routing<T> gate_topk(const Tensor<T>& h, const Tensor<T>& gate_weights, std::size_t top_k, std::size_t batch = 1);

// N_E * sum f_i^2.
double load_balance_loss(std::span<const double> load_fractions);

template <typename T>
double load_balance_loss(const RoutingStats<T>& stats) {
  return load_balance_loss(stats.load_fractions);
}

struct SmoothnessOptions {
  bool two_d = false;       // also penalize vertical neighbours on the patch grid
  std::size_t grid_width = 0;  // patches per row; required when two_d
};

// Mean squared difference of gate logits between adjacent patch tokens,
// G is [B x T x N_E] with tokens in row-major grid order. T < 2 gives 0.
template <typename T>
double spatial_smoothness_loss(const Tensor<T>& gate_logits, const SmoothnessOptions& opts = {});

template <typename T>
Tensor<T> spatial_smoothness_backward(const Tensor<T>& gate_logits, const SmoothnessOptions& opts = {});

// Common interface of the transformer's FFN slot. Inputs are flattened
// token rows, [batch * tokens x d_model]. backward() accumulates into the
// parameter gradients and returns the gradient w.r.t. the input.
template <typename T>
class FeedForward {
 public:
  virtual ~FeedForward() = default;
  virtual FfnKind kind() const noexcept = 0;
  virtual Tensor<T> forward(const Tensor<T>& h, std::size_t batch) = 0;
  // extra_logit_grad, when non-null, is added to d(loss)/d(gate logits).
  virtual Tensor<T> backward(const Tensor<T>& dout, const Tensor<T>* extra_logit_grad) = 0;
  virtual void collect_params(ParamList<T>& out, const std::string& prefix) = 0;
  virtual void init(Rng& rng) = 0;
  virtual const RoutingStats<T>* last_stats() const noexcept { return nullptr; }
};

// Shared gating and dispatch for the two MoE variants. Expert outputs are
// written to per-(token, slot) rows and combined in slot order, so the result
// does not depend on the order experts are evaluated in.
template <typename T>
class RoutedFeedForward : public FeedForward<T> {
 public:
  RoutedFeedForward(std::size_t d_model, std::size_t d_ff, std::size_t n_experts, std::size_t top_k);

  Tensor<T> forward(const Tensor<T>& h, std::size_t batch) override;
  Tensor<T> backward(const Tensor<T>& dout, const Tensor<T>* extra_logit_grad) override;
  const RoutingStats<T>* last_stats() const noexcept override { return has_cache_ ? &routing_.stats : nullptr; }
  const Routing<T>& last_routing() const noexcept { return routing_; }

  std::size_t d_model() const noexcept { return d_model_; }
  std::size_t d_ff() const noexcept { return d_ff_; }
  std::size_t n_experts() const noexcept { return n_experts_; }
  std::size_t top_k() const noexcept { return top_k_; }

  Tensor<T> gate_weights;  // [N_E x d_model]
  Tensor<T> gate_grad;

 protected:
  virtual void begin_forward() {}
  // rows: the tokens routed to expert e. Returns [rows x d_model].
  virtual Tensor<T> expert_forward(std::size_t e, const Tensor<T>& rows) = 0;
  // dv: gradient w.r.t. expert_forward's output. Returns gradient w.r.t. its input.
  virtual Tensor<T> expert_backward(std::size_t e, const Tensor<T>& dv) = 0;

  std::size_t d_model_, d_ff_, n_experts_, top_k_;

 private:
  struct Assignment {
    std::uint32_t token;
    std::uint32_t slot;
  };
  Tensor<T> input_;
  Routing<T> routing_;
  std::vector<std::vector<Assignment>> assignments_;  // per expert
  Tensor<T> slot_out_;                                // [N*k x d_model]
  bool has_cache_ = false;
};

// Experts share a ternary up-projection and a dense down-projection; expert i
// is u = B(phi_i, GELU(Q(W) * B(theta_i, h))), output W_down * u.
template <typename T>
class OrbitalMoELayer final : public RoutedFeedForward<T> {
 public:
  OrbitalMoELayer(std::size_t d_model, std::size_t d_ff, std::size_t n_experts, std::size_t top_k,
                  std::size_t n_butterfly_layers = 2);

  FfnKind kind() const noexcept override { return FfnKind::orbital; }
  void collect_params(ParamList<T>& out, const std::string& prefix) override;
  void init(Rng& rng) override;

  std::size_t n_butterfly_layers() const noexcept { return n_butterfly_layers_; }
  // Quantized substrate used by the most recent forward pass.
  const TernaryMatrix& quantized() const noexcept { return quantized_; }

  std::vector<ButterflyAngles<T>> theta;  // input rotations over d_model
  std::vector<ButterflyAngles<T>> phi;    // output rotations over d_ff
  std::vector<Tensor<T>> theta_grad, phi_grad;
  LatentSubstrate<T> substrate;           // [d_ff x d_model]
  Tensor<T> substrate_grad;
  Tensor<T> down_proj;                    // [d_model x d_ff]
  Tensor<T> down_proj_grad;

 protected:
  void begin_forward() override;
  Tensor<T> expert_forward(std::size_t e, const Tensor<T>& rows) override;
  Tensor<T> expert_backward(std::size_t e, const Tensor<T>& dv) override;

 private:
  struct ExpertCache {
    ButterflyCache<T> theta_cache, phi_cache;
    Tensor<T> rotated;   // B(theta, h)
    Tensor<T> pre_act;   // Q * rotated
    Tensor<T> out_rot;   // B(phi, GELU(pre_act))
  };
  std::size_t n_butterfly_layers_;
  TernaryMatrix quantized_;
  std::vector<ExpertCache> cache_;
};

// Baseline: N_E independent full-precision up/down matrices.
template <typename T>
class StandardMoELayer final : public RoutedFeedForward<T> {
 public:
  StandardMoELayer(std::size_t d_model, std::size_t d_ff, std::size_t n_experts, std::size_t top_k);

  FfnKind kind() const noexcept override { return FfnKind::standard_moe; }
  void collect_params(ParamList<T>& out, const std::string& prefix) override;
  void init(Rng& rng) override;

  std::vector<Tensor<T>> up, down;  // [d_ff x d_model], [d_model x d_ff]
  std::vector<Tensor<T>> up_grad, down_grad;

 protected:
  Tensor<T> expert_forward(std::size_t e, const Tensor<T>& rows) override;
  Tensor<T> expert_backward(std::size_t e, const Tensor<T>& dv) override;

 private:
  struct ExpertCache {
    Tensor<T> input, pre_act, act;
  };
  std::vector<ExpertCache> cache_;
};

// Baseline: one dense up/down pair, no routing.
template <typename T>
class DenseFFNLayer final : public FeedForward<T> {
 public:
  DenseFFNLayer(std::size_t d_model, std::size_t d_ff);

  FfnKind kind() const noexcept override { return FfnKind::dense; }
  Tensor<T> forward(const Tensor<T>& h, std::size_t batch) override;
  Tensor<T> backward(const Tensor<T>& dout, const Tensor<T>* extra_logit_grad) override;
  void collect_params(ParamList<T>& out, const std::string& prefix) override;
  void init(Rng& rng) override;

  Tensor<T> up, down, up_grad, down_grad;

 private:
  Tensor<T> input_, pre_act_, act_;
  bool has_cache_ = false;
};

template <typename T>
std::unique_ptr<FeedForward<T>> make_feed_forward(FfnKind kind, std::size_t d_model, std::size_t d_ff,
                                                  std::size_t n_experts, std::size_t top_k,
                                                  std::size_t n_butterfly_layers);

// Functional entry point for one orbital MoE pass on [B x T x d_model] input.
template <typename T>
struct MoeOutput {
  Tensor<T> out;
  RoutingStats<T> stats;
};

template <typename T>
MoeOutput<T> moe_forward(OrbitalMoELayer<T>& layer, const Tensor<T>& h, std::size_t batch);

// Angles ~ N(0, 0.01^2) drawn per expert from independent streams; gate,
// substrate and down-projection get fan-in scaled normal init.
template <typename T>
void init_orbital(OrbitalMoELayer<T>& layer, Rng& rng);

inline constexpr double kAngleInitStd = 0.01;

// Dense d_ff x d_model matrix whose action on h equals the linear part of
// expert i: B(phi_i) * gamma T * B(theta_i).
template <typename T>
Tensor<T> effective_expert_matrix(const OrbitalMoELayer<T>& layer, std::size_t expert);

// Pairwise cosine similarity of the flattened effective expert matrices.
template <typename T>
Tensor<double> expert_cosine_similarity(const OrbitalMoELayer<T>& layer);

double mean_off_diagonal(const Tensor<double>& sim);

}  // namespace bvit
