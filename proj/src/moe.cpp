#include "bvit/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bvit/kernels.hpp"
#include "bvit/ops.hpp"

namespace bvit {

const char* to_string(FfnKind kind) noexcept {
  switch (kind) {
    case FfnKind::orbital: return "orbital";
    case FfnKind::standard_moe: return "standard_moe";
    case FfnKind::dense: return "dense";
  }
  return "?";
}

FfnKind parse_ffn_kind(const std::string& s) {
  if (s == "orbital") return FfnKind::orbital;
  if (s == "standard_moe") return FfnKind::standard_moe;
  if (s == "dense") return FfnKind::dense;
  throw std::invalid_argument("unknown ffn kind '" + s + "' (expected orbital, standard_moe or dense)");
}

template <typename T>
Routing<T> route_logits(const Tensor<T>& logits, std::size_t top_k, std::size_t batch) {
  const std::size_t n = logits.rows();
  const std::size_t ne = logits.cols();
  if (top_k < 1 || top_k > ne) throw std::invalid_argument("route_logits: top_k must be in [1, n_experts]");
  if (batch == 0 || n % batch != 0) throw DimensionError("route_logits: token rows not divisible by batch");
  Routing<T> r;
  r.top_k = top_k;
  r.experts.resize(n * top_k);
  r.weights = Tensor<T>({n, top_k});
  r.stats.n_experts = ne;
  r.stats.top_k = top_k;
  r.stats.batch = batch;
  r.stats.tokens = n / batch;
  r.stats.token_counts.assign(ne, 0);
  std::vector<std::uint32_t> order(ne);
  for (std::size_t t = 0; t < n; ++t) {
    const T* lt = logits.data() + t * ne;
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k), order.end(),
                      [lt](std::uint32_t a, std::uint32_t b) { return lt[a] > lt[b] || (lt[a] == lt[b] && a < b); });
    const T mx = lt[order[0]];
    T sum{0};
    for (std::size_t s = 0; s < top_k; ++s) {
      const T w = std::exp(lt[order[s]] - mx);
      r.weights(t, s) = w;
      sum += w;
      r.experts[t * top_k + s] = order[s];
      ++r.stats.token_counts[order[s]];
    }
    for (std::size_t s = 0; s < top_k; ++s) r.weights(t, s) /= sum;
  }
  r.stats.load_fractions.resize(ne);
  const double total = static_cast<double>(n * top_k);
  for (std::size_t e = 0; e < ne; ++e)
    r.stats.load_fractions[e] = static_cast<double>(r.stats.token_counts[e]) / total;
  r.stats.gate_logits = Tensor<T>({batch, n / batch, ne}, logits.storage());
  return r;
}

template <typename T>
Routing<T> gate_topk(const Tensor<T>& h, const Tensor<T>& gate_weights, std::size_t top_k, std::size_t batch) {
  return route_logits(matmul_nt(h, gate_weights), top_k, batch);
}

double load_balance_loss(std::span<const double> f) {
  double s = 0;
  for (double v : f) s += v * v;
  return static_cast<double>(f.size()) * s;
}

namespace {

struct GridPairs {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (later, earlier) token indices
};

GridPairs neighbour_pairs(std::size_t tokens, const SmoothnessOptions& opts) {
  GridPairs g;
  if (!opts.two_d) {
    for (std::size_t t = 1; t < tokens; ++t) g.pairs.emplace_back(t, t - 1);
    return g;
  }
  const std::size_t w = opts.grid_width;
  if (w == 0 || tokens % w != 0) throw DimensionError("spatial smoothness: grid width does not divide token count");
  for (std::size_t t = 0; t < tokens; ++t) {
    if (t % w != 0) g.pairs.emplace_back(t, t - 1);
    if (t >= w) g.pairs.emplace_back(t, t - w);
  }
  return g;
}

template <typename T>
void check_logit_rank(const Tensor<T>& g) {
  if (g.rank() != 3) throw DimensionError("spatial smoothness: gate logits must be [B x T x N_E], got " + shape_str(g.shape()));
}

}  // namespace

template <typename T>
double spatial_smoothness_loss(const Tensor<T>& g, const SmoothnessOptions& opts) {
  check_logit_rank(g);
  const std::size_t b = g.dim(0), t = g.dim(1), ne = g.dim(2);
  if (t < 2 || b == 0) return 0.0;
  const GridPairs grid = neighbour_pairs(t, opts);
  double sum = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (const auto& [later, earlier] : grid.pairs) {
      const T* a = g.data() + (bi * t + later) * ne;
      const T* c = g.data() + (bi * t + earlier) * ne;
      for (std::size_t e = 0; e < ne; ++e) {
        const double d = static_cast<double>(a[e]) - static_cast<double>(c[e]);
        sum += d * d;
      }
    }
  return sum / static_cast<double>(b * grid.pairs.size());
}

template <typename T>
Tensor<T> spatial_smoothness_backward(const Tensor<T>& g, const SmoothnessOptions& opts) {
  check_logit_rank(g);
  Tensor<T> dg(g.shape());
  const std::size_t b = g.dim(0), t = g.dim(1), ne = g.dim(2);
  if (t < 2 || b == 0) return dg;
  const GridPairs grid = neighbour_pairs(t, opts);
  const T scale = static_cast<T>(2.0 / static_cast<double>(b * grid.pairs.size()));
  for (std::size_t bi = 0; bi < b; ++bi)
    for (const auto& [later, earlier] : grid.pairs) {
      const std::size_t ia = (bi * t + later) * ne;
      const std::size_t ic = (bi * t + earlier) * ne;
      for (std::size_t e = 0; e < ne; ++e) {
        const T d = scale * (g[ia + e] - g[ic + e]);
        dg[ia + e] += d;
        dg[ic + e] -= d;
      }
    }
  return dg;
}

// ---------------------------------------------------------------------------

template <typename T>
RoutedFeedForward<T>::RoutedFeedForward(std::size_t d_model, std::size_t d_ff, std::size_t n_experts,
                                        std::size_t top_k)
    : gate_weights({n_experts, d_model}), gate_grad({n_experts, d_model}), d_model_(d_model), d_ff_(d_ff),
      n_experts_(n_experts), top_k_(top_k) {
  if (n_experts == 0) throw std::invalid_argument("MoE layer needs at least one expert");
  if (top_k < 1 || top_k > n_experts) throw std::invalid_argument("MoE layer: top_k must be in [1, n_experts]");
}

template <typename T>
Tensor<T> RoutedFeedForward<T>::forward(const Tensor<T>& h, std::size_t batch) {
  if (h.cols() != d_model_) throw DimensionError("MoE forward: input width does not match d_model");
  const std::size_t n = h.rows();
  input_ = h;
  input_.reshape({n, d_model_});
  routing_ = route_logits(matmul_nt(input_, gate_weights), top_k_, batch);

  assignments_.assign(n_experts_, {});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t s = 0; s < top_k_; ++s)
      assignments_[routing_.experts[t * top_k_ + s]].push_back(
          {static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(s)});

  begin_forward();
  slot_out_ = Tensor<T>({n * top_k_, d_model_});
  for (std::size_t e = 0; e < n_experts_; ++e) {
    const auto& as = assignments_[e];
    Tensor<T> rows({as.size(), d_model_});
    for (std::size_t i = 0; i < as.size(); ++i) std::copy_n(input_.row(as[i].token).data(), d_model_, rows.row(i).data());
    const Tensor<T> v = expert_forward(e, rows);
    for (std::size_t i = 0; i < as.size(); ++i)
      std::copy_n(v.row(i).data(), d_model_, slot_out_.row(as[i].token * top_k_ + as[i].slot).data());
  }

  Tensor<T> out(h.shape());
  for (std::size_t t = 0; t < n; ++t) {
    T* o = out.data() + t * d_model_;
    for (std::size_t s = 0; s < top_k_; ++s) {
      const T w = routing_.weights(t, s);
      const T* v = slot_out_.data() + (t * top_k_ + s) * d_model_;
      for (std::size_t c = 0; c < d_model_; ++c) o[c] += w * v[c];
    }
  }
  has_cache_ = true;
  return out;
}

template <typename T>
Tensor<T> RoutedFeedForward<T>::backward(const Tensor<T>& dout, const Tensor<T>* extra_logit_grad) {
  if (!has_cache_) throw UsageError("MoE backward called without a preceding forward");
  const std::size_t n = input_.rows();
  if (dout.rows() != n || dout.cols() != d_model_) throw DimensionError("MoE backward: gradient shape mismatch");

  Tensor<T> dlogits({n, n_experts_});
  std::vector<T> dws(top_k_);
  for (std::size_t t = 0; t < n; ++t) {
    const T* g = dout.data() + t * d_model_;
    T mean{0};
    for (std::size_t s = 0; s < top_k_; ++s) {
      const T* v = slot_out_.data() + (t * top_k_ + s) * d_model_;
      T acc{0};
      for (std::size_t c = 0; c < d_model_; ++c) acc += g[c] * v[c];
      dws[s] = acc;
      mean += routing_.weights(t, s) * acc;
    }
    for (std::size_t s = 0; s < top_k_; ++s)
      dlogits(t, routing_.experts[t * top_k_ + s]) += routing_.weights(t, s) * (dws[s] - mean);
  }
  if (extra_logit_grad) {
    if (extra_logit_grad->size() != dlogits.size()) throw DimensionError("MoE backward: logit gradient shape mismatch");
    for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] += (*extra_logit_grad)[i];
  }
  kernels::gemm_tn(dlogits.data(), input_.data(), gate_grad.data(), n_experts_, n, d_model_, true);
  Tensor<T> dh({n, d_model_});
  kernels::gemm_nn(dlogits.data(), gate_weights.data(), dh.data(), n, n_experts_, d_model_);

  for (std::size_t e = 0; e < n_experts_; ++e) {
    const auto& as = assignments_[e];
    Tensor<T> dv({as.size(), d_model_});
    for (std::size_t i = 0; i < as.size(); ++i) {
      const T w = routing_.weights(as[i].token, as[i].slot);
      const T* g = dout.data() + as[i].token * d_model_;
      T* d = dv.data() + i * d_model_;
      for (std::size_t c = 0; c < d_model_; ++c) d[c] = w * g[c];
    }
    const Tensor<T> dx = expert_backward(e, dv);
    for (std::size_t i = 0; i < as.size(); ++i) {
      T* d = dh.data() + as[i].token * d_model_;
      const T* s = dx.data() + i * d_model_;
      for (std::size_t c = 0; c < d_model_; ++c) d[c] += s[c];
    }
  }
  has_cache_ = false;
  dh.reshape(dout.shape());
  return dh;
}

// ---------------------------------------------------------------------------

template <typename T>
OrbitalMoELayer<T>::OrbitalMoELayer(std::size_t d_model, std::size_t d_ff, std::size_t n_experts, std::size_t top_k,
                                    std::size_t n_butterfly_layers)
    : RoutedFeedForward<T>(d_model, d_ff, n_experts, top_k), substrate{Tensor<T>({d_ff, d_model})},
      substrate_grad({d_ff, d_model}), down_proj({d_model, d_ff}), down_proj_grad({d_model, d_ff}),
      n_butterfly_layers_(n_butterfly_layers), cache_(n_experts) {
  for (std::size_t e = 0; e < n_experts; ++e) {
    theta.emplace_back(d_model, n_butterfly_layers);
    phi.emplace_back(d_ff, n_butterfly_layers);
    theta_grad.emplace_back(theta.back().angles.shape());
    phi_grad.emplace_back(phi.back().angles.shape());
  }
}

template <typename T>
void OrbitalMoELayer<T>::collect_params(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + ".gate", group::kGate, &this->gate_weights, &this->gate_grad});
  for (std::size_t e = 0; e < this->n_experts_; ++e) {
    out.push_back({prefix + ".theta." + std::to_string(e), group::kAngles, &theta[e].angles, &theta_grad[e]});
    out.push_back({prefix + ".phi." + std::to_string(e), group::kAngles, &phi[e].angles, &phi_grad[e]});
  }
  out.push_back({prefix + ".substrate", group::kSubstrate, &substrate.weights, &substrate_grad});
  out.push_back({prefix + ".down_proj", group::kDownProj, &down_proj, &down_proj_grad});
}

template <typename T>
void OrbitalMoELayer<T>::init(Rng& rng) {
  init_orbital(*this, rng);
}

template <typename T>
void OrbitalMoELayer<T>::begin_forward() {
  quantized_ = absmean_quantize(substrate);
}

template <typename T>
Tensor<T> OrbitalMoELayer<T>::expert_forward(std::size_t e, const Tensor<T>& rows) {
  ExpertCache& c = cache_[e];
  c.rotated = butterfly_forward(rows, theta[e], &c.theta_cache);
  c.pre_act = ternary_apply(c.rotated, quantized_);
  c.out_rot = butterfly_forward(gelu(c.pre_act), phi[e], &c.phi_cache);
  return matmul_nt(c.out_rot, down_proj);
}

template <typename T>
Tensor<T> OrbitalMoELayer<T>::expert_backward(std::size_t e, const Tensor<T>& dv) {
  ExpertCache& c = cache_[e];
  const std::size_t n = dv.rows();
  const std::size_t dm = this->d_model_, dff = this->d_ff_;
  kernels::gemm_tn(dv.data(), c.out_rot.data(), down_proj_grad.data(), dm, n, dff, true);
  Tensor<T> du({n, dff});
  kernels::gemm_nn(dv.data(), down_proj.data(), du.data(), n, dm, dff);
  ButterflyGrads<T> gphi = butterfly_backward(du, phi[e], c.phi_cache);
  for (std::size_t i = 0; i < phi_grad[e].size(); ++i) phi_grad[e][i] += gphi.dangles[i];
  const Tensor<T> dpre = gelu_backward(c.pre_act, gphi.dx);
  // Straight-through: the gradient w.r.t. the quantized matrix is applied to the latent weights.
  Tensor<T> dq({dff, dm});
  kernels::gemm_tn(dpre.data(), c.rotated.data(), dq.data(), dff, n, dm);
  const Tensor<T> dlatent = ste_backward(dq);
  for (std::size_t i = 0; i < substrate_grad.size(); ++i) substrate_grad[i] += dlatent[i];
  const Tensor<T> drot = ternary_apply_backward_input(dpre, quantized_);
  ButterflyGrads<T> gtheta = butterfly_backward(drot, theta[e], c.theta_cache);
  for (std::size_t i = 0; i < theta_grad[e].size(); ++i) theta_grad[e][i] += gtheta.dangles[i];
  return std::move(gtheta.dx);
}

// ---------------------------------------------------------------------------

template <typename T>
StandardMoELayer<T>::StandardMoELayer(std::size_t d_model, std::size_t d_ff, std::size_t n_experts, std::size_t top_k)
    : RoutedFeedForward<T>(d_model, d_ff, n_experts, top_k), cache_(n_experts) {
  for (std::size_t e = 0; e < n_experts; ++e) {
    up.emplace_back(Shape{d_ff, d_model});
    down.emplace_back(Shape{d_model, d_ff});
    up_grad.emplace_back(Shape{d_ff, d_model});
    down_grad.emplace_back(Shape{d_model, d_ff});
  }
}

template <typename T>
void StandardMoELayer<T>::collect_params(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + ".gate", group::kGate, &this->gate_weights, &this->gate_grad});
  for (std::size_t e = 0; e < this->n_experts_; ++e) {
    out.push_back({prefix + ".up." + std::to_string(e), group::kExpertUp, &up[e], &up_grad[e]});
    out.push_back({prefix + ".down." + std::to_string(e), group::kExpertDown, &down[e], &down_grad[e]});
  }
}

template <typename T>
void StandardMoELayer<T>::init(Rng& rng) {
  const double dm = static_cast<double>(this->d_model_), dff = static_cast<double>(this->d_ff_);
  Rng gate_rng = rng.split(0);
  this->gate_weights = gaussian<T>(gate_rng, this->gate_weights.shape(), 0.0, 1.0 / std::sqrt(dm));
  for (std::size_t e = 0; e < this->n_experts_; ++e) {
    Rng er = rng.split(1 + e);
    up[e] = gaussian<T>(er, up[e].shape(), 0.0, 1.0 / std::sqrt(dm));
    down[e] = gaussian<T>(er, down[e].shape(), 0.0, 1.0 / std::sqrt(dff));
  }
}

template <typename T>
Tensor<T> StandardMoELayer<T>::expert_forward(std::size_t e, const Tensor<T>& rows) {
  ExpertCache& c = cache_[e];
  c.input = rows;
  c.pre_act = matmul_nt(rows, up[e]);
  c.act = gelu(c.pre_act);
  return matmul_nt(c.act, down[e]);
}

template <typename T>
Tensor<T> StandardMoELayer<T>::expert_backward(std::size_t e, const Tensor<T>& dv) {
  ExpertCache& c = cache_[e];
  const std::size_t n = dv.rows();
  const std::size_t dm = this->d_model_, dff = this->d_ff_;
  kernels::gemm_tn(dv.data(), c.act.data(), down_grad[e].data(), dm, n, dff, true);
  Tensor<T> dact({n, dff});
  kernels::gemm_nn(dv.data(), down[e].data(), dact.data(), n, dm, dff);
  const Tensor<T> dpre = gelu_backward(c.pre_act, dact);
  kernels::gemm_tn(dpre.data(), c.input.data(), up_grad[e].data(), dff, n, dm, true);
  Tensor<T> dx({n, dm});
  kernels::gemm_nn(dpre.data(), up[e].data(), dx.data(), n, dff, dm);
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
DenseFFNLayer<T>::DenseFFNLayer(std::size_t d_model, std::size_t d_ff)
    : up({d_ff, d_model}), down({d_model, d_ff}), up_grad({d_ff, d_model}), down_grad({d_model, d_ff}) {}

template <typename T>
Tensor<T> DenseFFNLayer<T>::forward(const Tensor<T>& h, std::size_t) {
  input_ = h;
  input_.reshape({h.rows(), h.cols()});
  pre_act_ = matmul_nt(input_, up);
  act_ = gelu(pre_act_);
  Tensor<T> out = matmul_nt(act_, down);
  out.reshape(h.shape());
  has_cache_ = true;
  return out;
}

template <typename T>
Tensor<T> DenseFFNLayer<T>::backward(const Tensor<T>& dout, const Tensor<T>*) {
  if (!has_cache_) throw UsageError("dense FFN backward called without a preceding forward");
  const std::size_t n = dout.rows();
  const std::size_t dm = up.dim(1), dff = up.dim(0);
  kernels::gemm_tn(dout.data(), act_.data(), down_grad.data(), dm, n, dff, true);
  Tensor<T> dact({n, dff});
  kernels::gemm_nn(dout.data(), down.data(), dact.data(), n, dm, dff);
  const Tensor<T> dpre = gelu_backward(pre_act_, dact);
  kernels::gemm_tn(dpre.data(), input_.data(), up_grad.data(), dff, n, dm, true);
  Tensor<T> dx(dout.shape());
  kernels::gemm_nn(dpre.data(), up.data(), dx.data(), n, dff, dm);
  has_cache_ = false;
  return dx;
}

template <typename T>
void DenseFFNLayer<T>::collect_params(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + ".up", group::kFfnUp, &up, &up_grad});
  out.push_back({prefix + ".down", group::kFfnDown, &down, &down_grad});
}

template <typename T>
void DenseFFNLayer<T>::init(Rng& rng) {
  up = gaussian<T>(rng, up.shape(), 0.0, 1.0 / std::sqrt(static_cast<double>(up.dim(1))));
  down = gaussian<T>(rng, down.shape(), 0.0, 1.0 / std::sqrt(static_cast<double>(down.dim(1))));
}

template <typename T>
std::unique_ptr<FeedForward<T>> make_feed_forward(FfnKind kind, std::size_t d_model, std::size_t d_ff,
                                                  std::size_t n_experts, std::size_t top_k,
                                                  std::size_t n_butterfly_layers) {
  switch (kind) {
    case FfnKind::orbital:
      return std::make_unique<OrbitalMoELayer<T>>(d_model, d_ff, n_experts, top_k, n_butterfly_layers);
    case FfnKind::standard_moe:
      return std::make_unique<StandardMoELayer<T>>(d_model, d_ff, n_experts, top_k);
    case FfnKind::dense:
      return std::make_unique<DenseFFNLayer<T>>(d_model, d_ff);
  }
  throw std::invalid_argument("make_feed_forward: unknown kind");
}

template <typename T>
MoeOutput<T> moe_forward(OrbitalMoELayer<T>& layer, const Tensor<T>& h, std::size_t batch) {
  MoeOutput<T> res;
  res.out = layer.forward(h, batch);
  res.stats = *layer.last_stats();
  return res;
}

template <typename T>
void init_orbital(OrbitalMoELayer<T>& layer, Rng& rng) {
  const double dm = static_cast<double>(layer.d_model()), dff = static_cast<double>(layer.d_ff());
  Rng gate_rng = rng.split(0);
  layer.gate_weights = gaussian<T>(gate_rng, layer.gate_weights.shape(), 0.0, 1.0 / std::sqrt(dm));
  Rng sub_rng = rng.split(1);
  layer.substrate.weights = gaussian<T>(sub_rng, layer.substrate.weights.shape(), 0.0, 1.0 / std::sqrt(dm));
  Rng down_rng = rng.split(2);
  layer.down_proj = gaussian<T>(down_rng, layer.down_proj.shape(), 0.0, 1.0 / std::sqrt(dff));
  for (std::size_t e = 0; e < layer.n_experts(); ++e) {
    Rng er = rng.split(16 + e);
    layer.theta[e].angles = gaussian<T>(er, layer.theta[e].angles.shape(), 0.0, kAngleInitStd);
    layer.phi[e].angles = gaussian<T>(er, layer.phi[e].angles.shape(), 0.0, kAngleInitStd);
  }
}

template <typename T>
Tensor<T> effective_expert_matrix(const OrbitalMoELayer<T>& layer, std::size_t expert) {
  if (expert >= layer.n_experts()) throw IndexError("effective_expert_matrix: expert index out of range");
  const Tensor<T> q = absmean_quantize(layer.substrate).template dequantize<T>();
  const Tensor<T> b_theta = materialize(layer.theta[expert]);
  const Tensor<T> b_phi = materialize(layer.phi[expert]);
  return matmul(matmul(b_phi, q), b_theta);
}

template <typename T>
Tensor<double> expert_cosine_similarity(const OrbitalMoELayer<T>& layer) {
  const std::size_t ne = layer.n_experts();
  std::vector<Tensor<T>> mats;
  mats.reserve(ne);
  for (std::size_t e = 0; e < ne; ++e) mats.push_back(effective_expert_matrix(layer, e));
  std::vector<double> norms(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    double s = 0;
    for (const T& v : mats[e].values()) s += static_cast<double>(v) * static_cast<double>(v);
    norms[e] = std::sqrt(s);
  }
  Tensor<double> sim({ne, ne});
  for (std::size_t i = 0; i < ne; ++i) {
    sim(i, i) = 1.0;
    for (std::size_t j = i + 1; j < ne; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < mats[i].size(); ++k)
        dot += static_cast<double>(mats[i][k]) * static_cast<double>(mats[j][k]);
      const double denom = norms[i] * norms[j];
      const double c = denom > 0 ? dot / denom : 0.0;
      sim(i, j) = c;
      sim(j, i) = c;
    }
  }
  return sim;
}

double mean_off_diagonal(const Tensor<double>& sim) {
  const std::size_t n = sim.dim(0);
  if (n < 2) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += sim(i, j);
  return s / static_cast<double>(n * (n - 1));
}

#define BVIT_INSTANTIATE_MOE(T)                                                                              \
  template Routing<T> route_logits(const Tensor<T>&, std::size_t, std::size_t);                              \
  template Routing<T> gate_topk(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);               \
  template double spatial_smoothness_loss(const Tensor<T>&, const SmoothnessOptions&);                       \
  template Tensor<T> spatial_smoothness_backward(const Tensor<T>&, const SmoothnessOptions&);                \
  template class RoutedFeedForward<T>;                                                                       \
  template class OrbitalMoELayer<T>;                                                                         \
  template class StandardMoELayer<T>;                                                                        \
  template class DenseFFNLayer<T>;                                                                           \
  template std::unique_ptr<FeedForward<T>> make_feed_forward<T>(FfnKind, std::size_t, std::size_t, std::size_t, \
                                                                std::size_t, std::size_t);                   \
  template MoeOutput<T> moe_forward(OrbitalMoELayer<T>&, const Tensor<T>&, std::size_t);                     \
  template void init_orbital(OrbitalMoELayer<T>&, Rng&);                                                     \
  template Tensor<T> effective_expert_matrix(const OrbitalMoELayer<T>&, std::size_t);                        \
  template Tensor<double> expert_cosine_similarity(const OrbitalMoELayer<T>&);

BVIT_INSTANTIATE_MOE(float)
BVIT_INSTANTIATE_MOE(double)

}  // namespace bvit
