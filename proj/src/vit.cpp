#include "bvit/vit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "bvit/kernels.hpp"

namespace bvit {

void ViTConfig::validate() const {
  auto positive = [](const char* field, std::size_t v) {
    if (v == 0) throw ConfigError(field, "must be positive");
  };
  positive("image_size", image_size);
  positive("patch_size", patch_size);
  positive("channels", channels);
  positive("d_model", d_model);
  positive("d_ff", d_ff);
  positive("n_heads", n_heads);
  positive("depth", depth);
  positive("classes", classes);
  if (image_size % patch_size != 0) throw ConfigError("patch_size", "must divide image_size");
  if (d_model % n_heads != 0) throw ConfigError("n_heads", "must divide d_model");
  if (d_model < 2) throw ConfigError("d_model", "must be at least 2");
  if (lambda_bal < 0) throw ConfigError("lambda_bal", "must be non-negative");
  if (lambda_sp < 0) throw ConfigError("lambda_sp", "must be non-negative");
  if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("label_smoothing", "must be in [0, 1)");
  if (ffn_kind != FfnKind::dense) {
    positive("n_experts", n_experts);
    if (top_k < 1 || top_k > n_experts) throw ConfigError("top_k", "must be in [1, n_experts]");
  }
  if (ffn_kind == FfnKind::orbital) positive("n_butterfly_layers", n_butterfly_layers);
}

TotalLoss total_loss(double ce, const LossTerms& terms, const ViTConfig& config) {
  return {ce + config.lambda_bal * terms.bal + config.lambda_sp * terms.sp, ce};
}

namespace {

template <typename T>
void add_bias_rows(Tensor<T>& y, const Tensor<T>& bias) {
  const std::size_t d = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    T* yr = y.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) yr[c] += bias[c];
  }
}

template <typename T>
void accumulate_col_sums(Tensor<T>& acc, const Tensor<T>& g) {
  const std::size_t d = g.cols();
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const T* gr = g.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) acc[c] += gr[c];
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t d_model, std::size_t n_heads)
    : w_qkv({3 * d_model, d_model}), b_qkv({3 * d_model}), w_out({d_model, d_model}), b_out({d_model}),
      g_w_qkv({3 * d_model, d_model}), g_b_qkv({3 * d_model}), g_w_out({d_model, d_model}), g_b_out({d_model}),
      d_model_(d_model), n_heads_(n_heads) {}

template <typename T>
void MultiHeadAttention<T>::init(Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d_model_));
  w_qkv = gaussian<T>(rng, w_qkv.shape(), 0.0, s);
  w_out = gaussian<T>(rng, w_out.shape(), 0.0, s);
  b_qkv.zero();
  b_out.zero();
}

template <typename T>
void MultiHeadAttention<T>::collect_params(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + ".w_qkv", group::kAttention, &w_qkv, &g_w_qkv});
  out.push_back({prefix + ".b_qkv", group::kAttention, &b_qkv, &g_b_qkv});
  out.push_back({prefix + ".w_out", group::kAttention, &w_out, &g_w_out});
  out.push_back({prefix + ".b_out", group::kAttention, &b_out, &g_b_out});
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::forward(const Tensor<T>& x, std::size_t batch) {
  const std::size_t d = d_model_, heads = n_heads_, dh = d / heads;
  batch_ = batch;
  seq_ = x.rows() / batch;
  const std::size_t s = seq_;
  input_ = x;
  qkv_ = matmul_nt(x, w_qkv);
  add_bias_rows(qkv_, b_qkv);
  probs_ = Tensor<T>({batch * heads, s, s});
  context_ = Tensor<T>({batch * s, d});
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const std::size_t stride = 3 * d;
  const auto jobs = static_cast<std::int64_t>(batch * heads);
#pragma omp parallel for schedule(static) if (batch * heads > 1 && s * s * dh * batch * heads > 65536)
  for (std::int64_t job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / heads, h = static_cast<std::size_t>(job) % heads;
    const T* base = qkv_.data() + b * s * stride;
    T* p = probs_.data() + static_cast<std::size_t>(job) * s * s;
    for (std::size_t i = 0; i < s; ++i) {
      const T* qi = base + i * stride + h * dh;
      T* pi = p + i * s;
      T mx = -INFINITY;
      for (std::size_t j = 0; j < s; ++j) {
        const T* kj = base + j * stride + d + h * dh;
        T acc{0};
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        pi[j] = acc * scale;
        mx = std::max(mx, pi[j]);
      }
      T sum{0};
      for (std::size_t j = 0; j < s; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        sum += pi[j];
      }
      for (std::size_t j = 0; j < s; ++j) pi[j] /= sum;
      T* ci = context_.data() + (b * s + i) * d + h * dh;
      for (std::size_t j = 0; j < s; ++j) {
        const T* vj = base + j * stride + 2 * d + h * dh;
        const T w = pi[j];
        for (std::size_t c = 0; c < dh; ++c) ci[c] += w * vj[c];
      }
    }
  }
  Tensor<T> y = matmul_nt(context_, w_out);
  add_bias_rows(y, b_out);
  return y;
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::backward(const Tensor<T>& dy) {
  if (input_.empty()) throw UsageError("attention backward called without a preceding forward");
  const std::size_t d = d_model_, heads = n_heads_, dh = d / heads, s = seq_, batch = batch_;
  const std::size_t n = batch * s;
  kernels::gemm_tn(dy.data(), context_.data(), g_w_out.data(), d, n, d, true);
  accumulate_col_sums(g_b_out, dy);
  Tensor<T> dctx({n, d});
  kernels::gemm_nn(dy.data(), w_out.data(), dctx.data(), n, d, d);

  const std::size_t stride = 3 * d;
  Tensor<T> dqkv({n, stride});
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto jobs = static_cast<std::int64_t>(batch * heads);
#pragma omp parallel if (batch * heads > 1 && s * s * dh * batch * heads > 65536)
  {
    std::vector<T> ds(s);
#pragma omp for schedule(static)
    for (std::int64_t job = 0; job < jobs; ++job) {
      const std::size_t b = static_cast<std::size_t>(job) / heads, h = static_cast<std::size_t>(job) % heads;
      const T* base = qkv_.data() + b * s * stride;
      T* dbase = dqkv.data() + b * s * stride;
      const T* p = probs_.data() + static_cast<std::size_t>(job) * s * s;
      for (std::size_t i = 0; i < s; ++i) {
        const T* dci = dctx.data() + (b * s + i) * d + h * dh;
        const T* pi = p + i * s;
        T dot{0};
        for (std::size_t j = 0; j < s; ++j) {
          const T* vj = base + j * stride + 2 * d + h * dh;
          T acc{0};
          for (std::size_t c = 0; c < dh; ++c) acc += dci[c] * vj[c];
          ds[j] = acc;
          dot += acc * pi[j];
        }
        for (std::size_t j = 0; j < s; ++j) ds[j] = pi[j] * (ds[j] - dot) * scale;
        const T* qi = base + i * stride + h * dh;
        T* dqi = dbase + i * stride + h * dh;
        for (std::size_t j = 0; j < s; ++j) {
          const T* kj = base + j * stride + d + h * dh;
          T* dkj = dbase + j * stride + d + h * dh;
          T* dvj = dbase + j * stride + 2 * d + h * dh;
          const T g = ds[j];
          const T w = pi[j];
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += g * kj[c];
            dkj[c] += g * qi[c];
            dvj[c] += w * dci[c];
          }
        }
      }
    }
  }
  kernels::gemm_tn(dqkv.data(), input_.data(), g_w_qkv.data(), stride, n, d, true);
  accumulate_col_sums(g_b_qkv, dqkv);
  Tensor<T> dx({n, d});
  kernels::gemm_nn(dqkv.data(), w_qkv.data(), dx.data(), n, stride, d);
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
TransformerBlock<T>::TransformerBlock(const ViTConfig& cfg)
    : ln1_gain({cfg.d_model}, T{1}), ln1_bias({cfg.d_model}), ln2_gain({cfg.d_model}, T{1}), ln2_bias({cfg.d_model}),
      g_ln1_gain({cfg.d_model}), g_ln1_bias({cfg.d_model}), g_ln2_gain({cfg.d_model}), g_ln2_bias({cfg.d_model}),
      attn(cfg.d_model, cfg.n_heads),
      ffn(make_feed_forward<T>(cfg.ffn_kind, cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k, cfg.n_butterfly_layers)) {}

template <typename T>
ViTModel<T>::ViTModel(const ViTConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  patch_embed = Tensor<T>({d, config_.patch_dim()});
  patch_bias = Tensor<T>({d});
  cls_token = Tensor<T>({d});
  pos_embed = Tensor<T>({config_.tokens(), d});
  final_gain = Tensor<T>({d}, T{1});
  final_bias = Tensor<T>({d});
  head = Tensor<T>({config_.classes, d});
  head_bias = Tensor<T>({config_.classes});
  g_patch_embed = Tensor<T>(patch_embed.shape());
  g_patch_bias = Tensor<T>(patch_bias.shape());
  g_cls_token = Tensor<T>(cls_token.shape());
  g_pos_embed = Tensor<T>(pos_embed.shape());
  g_final_gain = Tensor<T>(final_gain.shape());
  g_final_bias = Tensor<T>(final_bias.shape());
  g_head = Tensor<T>(head.shape());
  g_head_bias = Tensor<T>(head_bias.shape());
  for (std::size_t l = 0; l < config_.depth; ++l) blocks_.push_back(std::make_unique<TransformerBlock<T>>(config_));
}

template <typename T>
void ViTModel<T>::init(Rng& rng) {
  const double d = static_cast<double>(config_.d_model);
  Rng emb = rng.split(1);
  patch_embed = gaussian<T>(emb, patch_embed.shape(), 0.0, 1.0 / std::sqrt(static_cast<double>(config_.patch_dim())));
  patch_bias.zero();
  cls_token = gaussian<T>(emb, cls_token.shape(), 0.0, 0.02);
  pos_embed = gaussian<T>(emb, pos_embed.shape(), 0.0, 0.02);
  Rng head_rng = rng.split(2);
  head = gaussian<T>(head_rng, head.shape(), 0.0, 1.0 / std::sqrt(d));
  head_bias.zero();
  final_gain.fill(T{1});
  final_bias.zero();
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    auto& blk = *blocks_[l];
    Rng br = rng.split(100 + l);
    Rng attn_rng = br.split(0);
    blk.attn.init(attn_rng);
    Rng ffn_rng = br.split(1);
    blk.ffn->init(ffn_rng);
    blk.ln1_gain.fill(T{1});
    blk.ln2_gain.fill(T{1});
    blk.ln1_bias.zero();
    blk.ln2_bias.zero();
  }
}

template <typename T>
ParamList<T> ViTModel<T>::params() {
  ParamList<T> out;
  out.push_back({"patch_embed", group::kEmbeddings, &patch_embed, &g_patch_embed});
  out.push_back({"patch_bias", group::kEmbeddings, &patch_bias, &g_patch_bias});
  out.push_back({"cls_token", group::kEmbeddings, &cls_token, &g_cls_token});
  out.push_back({"pos_embed", group::kEmbeddings, &pos_embed, &g_pos_embed});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    auto& blk = *blocks_[l];
    const std::string p = "block" + std::to_string(l);
    out.push_back({p + ".ln1.gain", group::kNorm, &blk.ln1_gain, &blk.g_ln1_gain});
    out.push_back({p + ".ln1.bias", group::kNorm, &blk.ln1_bias, &blk.g_ln1_bias});
    blk.attn.collect_params(out, p + ".attn");
    out.push_back({p + ".ln2.gain", group::kNorm, &blk.ln2_gain, &blk.g_ln2_gain});
    out.push_back({p + ".ln2.bias", group::kNorm, &blk.ln2_bias, &blk.g_ln2_bias});
    blk.ffn->collect_params(out, p + ".ffn");
  }
  out.push_back({"final_ln.gain", group::kNorm, &final_gain, &g_final_gain});
  out.push_back({"final_ln.bias", group::kNorm, &final_bias, &g_final_bias});
  out.push_back({"head.weight", group::kHead, &head, &g_head});
  out.push_back({"head.bias", group::kHead, &head_bias, &g_head_bias});
  return out;
}

template <typename T>
Census ViTModel<T>::parameter_census() {
  return census_of(params());
}

template <typename T>
void ViTModel<T>::zero_grad() {
  zero_grads(params());
}

template <typename T>
Tensor<T> ViTModel<T>::extract_patches(const Tensor<T>& images) const {
  const std::size_t b = images.dim(0), ch = config_.channels, size = config_.image_size, p = config_.patch_size;
  const std::size_t g = config_.grid(), pd = config_.patch_dim();
  Tensor<T> out({b * g * g, pd});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px) {
        T* dst = out.data() + ((i * g + py) * g + px) * pd;
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              dst[(c * p + y) * p + x] = images[((i * ch + c) * size + py * p + y) * size + px * p + x];
      }
  return out;
}

template <typename T>
ForwardResult<T> ViTModel<T>::forward(const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != config_.channels || images.dim(2) != config_.image_size ||
      images.dim(3) != config_.image_size)
    throw DimensionError("ViT forward: expected [B x " + std::to_string(config_.channels) + " x " +
                         std::to_string(config_.image_size) + " x " + std::to_string(config_.image_size) + "], got " +
                         shape_str(images.shape()));
  const std::size_t b = images.dim(0), d = config_.d_model, t = config_.patches(), s = config_.tokens();
  batch_ = b;
  patches_ = extract_patches(images);
  Tensor<T> emb = matmul_nt(patches_, patch_embed);
  add_bias_rows(emb, patch_bias);

  Tensor<T> z({b * s, d});
  for (std::size_t i = 0; i < b; ++i) {
    T* z0 = z.data() + i * s * d;
    for (std::size_t c = 0; c < d; ++c) z0[c] = cls_token[c] + pos_embed(0, c);
    for (std::size_t k = 0; k < t; ++k) {
      T* zk = z.data() + (i * s + 1 + k) * d;
      const T* ek = emb.data() + (i * t + k) * d;
      for (std::size_t c = 0; c < d; ++c) zk[c] = ek[c] + pos_embed(1 + k, c);
    }
  }

  ForwardResult<T> res;
  const SmoothnessOptions smooth{config_.spatial_2d, config_.grid()};
  for (auto& blk_ptr : blocks_) {
    auto& blk = *blk_ptr;
    const Tensor<T> a = layer_norm(z, blk.ln1_gain, blk.ln1_bias, &blk.ln1_cache);
    add_into(z, blk.attn.forward(a, b));
    const Tensor<T> h = layer_norm(z, blk.ln2_gain, blk.ln2_bias, &blk.ln2_cache);
    add_into(z, blk.ffn->forward(h, b));
    double bal = 0, sp = 0;
    if (const RoutingStats<T>* stats = blk.ffn->last_stats()) {
      bal = load_balance_loss(*stats);
      const std::size_t ne = stats->n_experts;
      blk.patch_logits = Tensor<T>({b, t, ne});
      for (std::size_t i = 0; i < b; ++i)
        std::copy_n(stats->gate_logits.data() + (i * s + 1) * ne, t * ne, blk.patch_logits.data() + i * t * ne);
      sp = spatial_smoothness_loss(blk.patch_logits, smooth);
    }
    res.terms.bal += bal;
    res.terms.sp += sp;
    res.terms.bal_per_block.push_back(bal);
    res.terms.sp_per_block.push_back(sp);
  }

  Tensor<T> cls({b, d});
  for (std::size_t i = 0; i < b; ++i) std::copy_n(z.data() + i * s * d, d, cls.data() + i * d);
  cls_normed_ = layer_norm(cls, final_gain, final_bias, &final_cache_);
  res.logits = matmul_nt(cls_normed_, head);
  add_bias_rows(res.logits, head_bias);
  return res;
}

template <typename T>
void ViTModel<T>::backward(const Tensor<T>& dlogits) {
  if (cls_normed_.empty()) throw UsageError("ViT backward called without a preceding forward");
  const std::size_t b = batch_, d = config_.d_model, t = config_.patches(), s = config_.tokens();
  const std::size_t classes = config_.classes;
  kernels::gemm_tn(dlogits.data(), cls_normed_.data(), g_head.data(), classes, b, d, true);
  accumulate_col_sums(g_head_bias, dlogits);
  Tensor<T> dcn({b, d});
  kernels::gemm_nn(dlogits.data(), head.data(), dcn.data(), b, classes, d);
  const LayerNormGrads<T> fg = layer_norm_backward(dcn, final_gain, final_cache_);
  add_into(g_final_gain, fg.dgain);
  add_into(g_final_bias, fg.dbias);

  Tensor<T> dz({b * s, d});
  for (std::size_t i = 0; i < b; ++i) std::copy_n(fg.dx.data() + i * d, d, dz.data() + i * s * d);

  const SmoothnessOptions smooth{config_.spatial_2d, config_.grid()};
  for (std::size_t l = blocks_.size(); l-- > 0;) {
    auto& blk = *blocks_[l];
    Tensor<T> extra;
    const Tensor<T>* extra_ptr = nullptr;
    if (blk.ffn->last_stats() && config_.lambda_sp > 0) {
      const Tensor<T> dg = spatial_smoothness_backward(blk.patch_logits, smooth);
      const std::size_t ne = blk.patch_logits.dim(2);
      extra = Tensor<T>({b * s, ne});
      const T lam = static_cast<T>(config_.lambda_sp);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < t * ne; ++k) extra[(i * s + 1) * ne + k] = lam * dg[i * t * ne + k];
      extra_ptr = &extra;
    }
    const Tensor<T> dh = blk.ffn->backward(dz, extra_ptr);
    const LayerNormGrads<T> g2 = layer_norm_backward(dh, blk.ln2_gain, blk.ln2_cache);
    add_into(blk.g_ln2_gain, g2.dgain);
    add_into(blk.g_ln2_bias, g2.dbias);
    add_into(dz, g2.dx);
    const Tensor<T> da = blk.attn.backward(dz);
    const LayerNormGrads<T> g1 = layer_norm_backward(da, blk.ln1_gain, blk.ln1_cache);
    add_into(blk.g_ln1_gain, g1.dgain);
    add_into(blk.g_ln1_bias, g1.dbias);
    add_into(dz, g1.dx);
  }

  Tensor<T> demb({b * t, d});
  for (std::size_t i = 0; i < b; ++i) {
    const T* z0 = dz.data() + i * s * d;
    for (std::size_t c = 0; c < d; ++c) {
      g_cls_token[c] += z0[c];
      g_pos_embed(0, c) += z0[c];
    }
    for (std::size_t k = 0; k < t; ++k) {
      const T* zk = dz.data() + (i * s + 1 + k) * d;
      T* ek = demb.data() + (i * t + k) * d;
      for (std::size_t c = 0; c < d; ++c) {
        ek[c] = zk[c];
        g_pos_embed(1 + k, c) += zk[c];
      }
    }
  }
  kernels::gemm_tn(demb.data(), patches_.data(), g_patch_embed.data(), d, b * t, config_.patch_dim(), true);
  accumulate_col_sums(g_patch_bias, demb);
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string TrainingLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,train_ce,train_acc,val_loss,val_acc,bal,sp,lr,expert_tokens\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.train_ce) << ',' << fmt(e.train_acc) << ','
       << fmt(e.val_loss) << ',' << fmt(e.val_acc) << ',' << fmt(e.bal) << ',' << fmt(e.sp) << ',';
    char lr[64];
    std::snprintf(lr, sizeof lr, "%.6e", e.lr);
    os << lr << ',';
    for (std::size_t blk = 0; blk < e.expert_tokens.size(); ++blk) {
      if (blk) os << ';';
      for (std::size_t x = 0; x < e.expert_tokens[blk].size(); ++x) {
        if (x) os << ' ';
        os << e.expert_tokens[blk][x];
      }
    }
    os << '\n';
  }
  return os.str();
}

std::string TrainingLog::routing_csv() const {
  std::ostringstream os;
  os << "epoch,block,expert,tokens,fraction\n";
  for (const auto& e : epochs)
    for (std::size_t blk = 0; blk < e.expert_tokens.size(); ++blk) {
      const auto& counts = e.expert_tokens[blk];
      const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
      for (std::size_t x = 0; x < counts.size(); ++x)
        os << e.epoch << ',' << blk << ',' << x << ',' << counts[x] << ','
           << fmt(total > 0 ? static_cast<double>(counts[x]) / total : 0.0) << '\n';
    }
  return os.str();
}

template <typename T>
EvalResult evaluate(ViTModel<T>& model, const Dataset& data, std::size_t batch_size) {
  EvalResult r;
  r.samples = data.size();
  if (data.size() == 0) return r;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    const std::span<const std::size_t> batch(idx.data() + start, n);
    const auto fwd = model.forward(data.batch_images<T>(batch));
    const auto labels = data.batch_labels(batch);
    const auto ce = softmax_cross_entropy(fwd.logits, labels);
    loss_sum += ce.loss * static_cast<double>(n);
    correct += ce.correct;
  }
  r.loss = loss_sum / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

template <typename T>
TrainingLog train(ViTModel<T>& model, const Dataset& train_set, const Dataset* val_set, const TrainSchedule& schedule,
                  const EpochCallback& on_epoch) {
  if (train_set.size() == 0) throw std::invalid_argument("train: dataset is empty");
  if (schedule.batch_size == 0) throw ConfigError("batch", "must be positive");
  const ViTConfig& cfg = model.config();
  const std::size_t n = train_set.size();
  const std::size_t steps_per_epoch = (n + schedule.batch_size - 1) / schedule.batch_size;
  const WarmupCosine lr_at =
      WarmupCosine::with_fraction(schedule.peak_lr, steps_per_epoch * schedule.epochs, schedule.warmup_fraction);
  ParamList<T> params = model.params();
  Adam<T> opt(params, AdamOptions{0.9, 0.999, 1e-8, schedule.weight_decay});
  Rng root(schedule.seed);

  TrainingLog log;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng epoch_rng = root.split(1000 + epoch);
    epoch_rng.shuffle(order.begin(), order.end());
    Rng aug_rng = root.split(500000 + epoch);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.expert_tokens.assign(cfg.depth, {});
    double loss_sum = 0, ce_sum = 0, bal_sum = 0, sp_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += schedule.batch_size) {
      const std::size_t bs = std::min(schedule.batch_size, n - start);
      const std::span<const std::size_t> batch(order.data() + start, bs);
      Tensor<T> images = train_set.batch_images<T>(batch);
      if (schedule.augment) augment_batch(images, aug_rng, 4);
      const auto labels = train_set.batch_labels(batch);

      const ForwardResult<T> fwd = model.forward(images);
      const auto ce = softmax_cross_entropy(fwd.logits, labels, cfg.label_smoothing);
      const TotalLoss loss = total_loss(ce.loss, fwd.terms, cfg);
      if (!std::isfinite(loss.total))
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                              std::to_string(step) + ": total loss is " + std::to_string(loss.total));
      for (std::size_t l = 0; l < cfg.depth; ++l)
        if (const auto* stats = model.blocks()[l]->ffn->last_stats()) {
          auto& acc = rec.expert_tokens[l];
          acc.resize(stats->n_experts, 0);
          for (std::size_t x = 0; x < stats->n_experts; ++x) acc[x] += stats->token_counts[x];
        }
      model.zero_grad();
      model.backward(ce.dlogits);
      rec.lr = lr_at(step);
      opt.step(rec.lr);
      ++step;

      loss_sum += loss.total;
      ce_sum += loss.ce;
      bal_sum += fwd.terms.bal;
      sp_sum += fwd.terms.sp;
      correct += ce.correct;
    }
    if (cfg.ffn_kind == FfnKind::dense) rec.expert_tokens.clear();
    const double batches = static_cast<double>(steps_per_epoch);
    rec.train_loss = loss_sum / batches;
    rec.train_ce = ce_sum / batches;
    rec.bal = bal_sum / batches;
    rec.sp = sp_sum / batches;
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    if (val_set && val_set->size()) {
      const EvalResult ev = evaluate(model, *val_set);
      rec.val_loss = ev.loss;
      rec.val_acc = ev.accuracy;
    }
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

#define BVIT_INSTANTIATE_VIT(T)                                                                                   \
  template class MultiHeadAttention<T>;                                                                           \
  template struct TransformerBlock<T>;                                                                            \
  template class ViTModel<T>;                                                                                     \
  template EvalResult evaluate(ViTModel<T>&, const Dataset&, std::size_t);                                        \
  template TrainingLog train(ViTModel<T>&, const Dataset&, const Dataset*, const TrainSchedule&, const EpochCallback&);

BVIT_INSTANTIATE_VIT(float)
BVIT_INSTANTIATE_VIT(double)

}  // namespace bvit
