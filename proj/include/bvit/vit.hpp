#pragma once

// Desk-scale vision transformer: patch embedding + CLS + positional
// embedding, pre-LN blocks of multi-head self-attention and a selectable
// FFN (orbital MoE, standard MoE or dense), final LN on the CLS token and a
// linear head. Each block caches its forward inputs; backward() walks the
// blocks in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bvit/data.hpp"
#include "bvit/moe.hpp"
#include "bvit/ops.hpp"
#include "bvit/params.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

// Invalid configuration; field() names the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::invalid_argument(field + ": " + msg), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Loss became NaN/Inf during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t d_model = 256;
  std::size_t d_ff = 1024;
  std::size_t n_heads = 4;
  std::size_t depth = 7;
  std::size_t n_experts = 8;
  std::size_t top_k = 2;
  std::size_t n_butterfly_layers = 2;
  double lambda_bal = 0.05;
  double lambda_sp = 0.005;
  FfnKind ffn_kind = FfnKind::orbital;
  std::size_t classes = 100;
  std::uint64_t seed = 0;
  bool spatial_2d = false;
  double label_smoothing = 0.0;

  void validate() const;
  std::size_t grid() const noexcept { return image_size / patch_size; }
  std::size_t patches() const noexcept { return grid() * grid(); }
  std::size_t tokens() const noexcept { return patches() + 1; }
  std::size_t patch_dim() const noexcept { return patch_size * patch_size * channels; }
  std::size_t head_dim() const noexcept { return d_model / n_heads; }
};

// Sums over blocks of the auxiliary losses.
struct LossTerms {
  double bal = 0;
  double sp = 0;
  std::vector<double> bal_per_block;
  std::vector<double> sp_per_block;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [B x classes]
  LossTerms terms;
};

struct TotalLoss {
  double total = 0;
  double ce = 0;
};

// L = CE + lambda_bal * L_bal + lambda_sp * L_sp.
TotalLoss total_loss(double ce, const LossTerms& terms, const ViTConfig& config);

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention(std::size_t d_model, std::size_t n_heads);

  // x: [B*S x d]
  Tensor<T> forward(const Tensor<T>& x, std::size_t batch);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(ParamList<T>& out, const std::string& prefix);
  void init(Rng& rng);

  Tensor<T> w_qkv, b_qkv, w_out, b_out;  // [3d x d], [3d], [d x d], [d]
  Tensor<T> g_w_qkv, g_b_qkv, g_w_out, g_b_out;

 private:
  std::size_t d_model_, n_heads_;
  std::size_t batch_ = 0, seq_ = 0;
  Tensor<T> input_, qkv_, probs_, context_;  // probs_: [B*H x S x S]
};

template <typename T>
struct TransformerBlock {
  TransformerBlock(const ViTConfig& cfg);

  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Tensor<T> g_ln1_gain, g_ln1_bias, g_ln2_gain, g_ln2_bias;
  MultiHeadAttention<T> attn;
  std::unique_ptr<FeedForward<T>> ffn;

  LayerNormCache<T> ln1_cache, ln2_cache;
  Tensor<T> patch_logits;  // [B x T x N_E], CLS excluded
};

template <typename T>
class ViTModel {
 public:
  explicit ViTModel(const ViTConfig& config);

  const ViTConfig& config() const noexcept { return config_; }

  void init(Rng& rng);
  void init() {
    Rng rng(config_.seed);
    init(rng);
  }

  // images: [B x C x H x W]
  ForwardResult<T> forward(const Tensor<T>& images);
  // dlogits = d(L_CE)/d(logits); auxiliary-loss gradients are added internally.
  void backward(const Tensor<T>& dlogits);

  ParamList<T> params();
  Census parameter_census();
  void zero_grad();

  std::vector<std::unique_ptr<TransformerBlock<T>>>& blocks() noexcept { return blocks_; }

  Tensor<T> patch_embed, patch_bias;  // [d x patch_dim], [d]
  Tensor<T> cls_token;                // [d]
  Tensor<T> pos_embed;                // [(T+1) x d]
  Tensor<T> final_gain, final_bias;   // [d]
  Tensor<T> head, head_bias;          // [C x d], [C]
  Tensor<T> g_patch_embed, g_patch_bias, g_cls_token, g_pos_embed, g_final_gain, g_final_bias, g_head, g_head_bias;

 private:
  Tensor<T> extract_patches(const Tensor<T>& images) const;

  ViTConfig config_;
  std::vector<std::unique_ptr<TransformerBlock<T>>> blocks_;
  std::size_t batch_ = 0;
  Tensor<T> patches_;
  LayerNormCache<T> final_cache_;
  Tensor<T> cls_normed_;
};

struct TrainSchedule {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double peak_lr = 3e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 0.0;
  bool augment = false;  // random crop (pad 4) + horizontal flip
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean total loss over batches
  double train_ce = 0;
  double train_acc = 0;   // on-the-fly, during the epoch
  double val_loss = 0;
  double val_acc = 0;
  double bal = 0;         // mean per-batch L_bal (summed over blocks)
  double sp = 0;
  double lr = 0;          // learning rate of the last step
  std::vector<std::vector<std::size_t>> expert_tokens;  // [block][expert], summed over the epoch
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const;
  std::string routing_csv() const;
};

struct EvalResult {
  double accuracy = 0;
  double loss = 0;  // mean CE
  std::size_t samples = 0;
};

template <typename T>
EvalResult evaluate(ViTModel<T>& model, const Dataset& data, std::size_t batch_size = 64);

using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename T>
TrainingLog train(ViTModel<T>& model, const Dataset& train_set, const Dataset* val_set, const TrainSchedule& schedule,
                  const EpochCallback& on_epoch = {});

}  // namespace bvit
