// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Tolerances and runtime budgets are pinned below; nothing is read from the
// environment, so a run is reproducible.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bvit/butterfly.hpp"
#include "bvit/cli.hpp"
#include "bvit/memory_model.hpp"
#include "bvit/moe.hpp"
#include "bvit/ternary.hpp"
#include "bvit/vit.hpp"

using namespace bvit;

namespace {

namespace tol {
constexpr double kOrthogonality = 1e-6;
constexpr double kNormPreservation = 1e-5;
constexpr double kButterflyGradRel = 1e-4;
constexpr double kMoeOracle = 1e-5;
constexpr double kAsymptote = 409.6;
constexpr double kAsymptoteRel = 1e-3;
constexpr double kEnergyCeilingMj = 0.2;
constexpr double kStandardEnergyMj = 48.1;
constexpr double kStandardEnergyTolMj = 0.1;
constexpr double kTrainAcc = 0.90;
constexpr double kValAcc = 0.75;
constexpr double kSimilarityInit = 0.9999;
constexpr double kFdStep = 1e-6;
}  // namespace tol

// Runtime budgets in seconds.
namespace budget {
constexpr double kAnalytic = 1;
constexpr double kButterfly = 30;
constexpr double kQuantizer = 10;
constexpr double kMoe = 30;
constexpr double kLosses = 10;
constexpr double kTraining = 600;
constexpr double kCensus = 10;
}  // namespace budget

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& what) {
    if (pass) detail += (detail.empty() ? "" : "; ") + what;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    rows.push_back(cols);
  }
  return rows;
}

// ---------------------------------------------------------------------------

Outcome table_reproduction() {
  Outcome o;
  std::ostringstream out, err;
  const int code = run_cli({"memory-report"}, out, err);
  o.require(code == 0, "memory-report exited " + std::to_string(code) + ": " + err.str());
  const auto rows = csv_rows(out.str());
  const std::vector<std::string> n_e{"2", "4", "8", "16", "32", "64"};
  const std::vector<std::string> standard{"29.36", "58.72", "117.44", "234.88", "469.76", "939.52"};
  const std::vector<std::string> butterfly{"0.434", "0.505", "0.649", "0.935", "1.509", "2.656"};
  const std::vector<long> ratio{68, 116, 181, 251, 311, 354};
  o.require(rows.size() == 7, "expected header + 6 rows, got " + std::to_string(rows.size()));
  if (!o.pass) return o;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& r = rows[i + 1];
    o.require(r.size() >= 4, "short row " + std::to_string(i));
    if (r.size() < 4) continue;
    o.require(r[0] == n_e[i], "N_E " + r[0]);
    o.require(r[1] == standard[i], "standard MB " + r[1] + " != " + standard[i]);
    o.require(r[2] == butterfly[i], "butterfly MB " + r[2] + " != " + butterfly[i]);
    o.require(std::lround(std::stod(r[3])) == ratio[i], "ratio " + r[3] + " !~ " + std::to_string(ratio[i]));
  }
  o.note("6 rows match (standard 2 dp, butterfly 3 dp, ratio nearest integer)");
  return o;
}

Outcome asymptotic_bound() {
  Outcome o;
  ArchSpec spec;
  const double a = asymptotic_ratio(spec);
  o.require(std::abs(a - tol::kAsymptote) < 1e-9, "asymptote " + fmt("%.6f", a));
  spec.n_experts = 1000000;
  const double r = compression_ratio(spec);
  o.require(std::abs(r / a - 1.0) < tol::kAsymptoteRel, "ratio(1e6) " + fmt("%.4f", r));
  o.note("asymptote " + fmt("%.1f", a) + ", ratio(1e6) " + fmt("%.3f", r));
  return o;
}

Outcome energy_figures() {
  Outcome o;
  ArchSpec spec;
  spec.n_experts = 64;
  const double butterfly_mj = dram_energy(butterfly_bytes(spec)) * 1e3;
  const double standard_mj = dram_energy(standard_moe_bytes(spec)) * 1e3;
  o.require(butterfly_mj < tol::kEnergyCeilingMj, "butterfly " + fmt("%.4f", butterfly_mj) + " mJ");
  o.require(std::abs(standard_mj - tol::kStandardEnergyMj) <= tol::kStandardEnergyTolMj,
            "standard " + fmt("%.4f", standard_mj) + " mJ");
  o.note("standard " + fmt("%.3f", standard_mj) + " mJ, butterfly " + fmt("%.3f", butterfly_mj) + " mJ");
  return o;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

Tensor<double> finite_diff(const std::function<double()>& f, Tensor<double>& t) {
  Tensor<double> g(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double saved = t[i];
    t[i] = saved + tol::kFdStep;
    const double up = f();
    t[i] = saved - tol::kFdStep;
    const double down = f();
    t[i] = saved;
    g[i] = (up - down) / (2 * tol::kFdStep);
  }
  return g;
}

Outcome butterfly_correctness() {
  Outcome o;
  Rng rng(4);
  double worst_orth = 0, worst_norm = 0, worst_grad = 0;
  for (std::size_t d : {2, 4, 8, 16, 64, 256}) {
    for (int trial = 0; trial < 100; ++trial) {
      ButterflyAngles<double> a(d, 2);
      a.angles = gaussian<double>(rng, a.angles.shape(), 0.0, M_PI);
      const auto b = materialize(a);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          double s = 0;
          for (std::size_t k = 0; k < d; ++k) s += b(i, k) * b(j, k);
          worst_orth = std::max(worst_orth, std::abs(s - (i == j ? 1.0 : 0.0)));
        }
      // Unit-norm rows through the float path as well as the double path.
      auto x = gaussian<double>(rng, {4, d}, 0.0, 1.0);
      for (std::size_t r = 0; r < 4; ++r) {
        double n = 0;
        for (double v : x.row(r)) n += v * v;
        for (double& v : x.row(r)) v /= std::sqrt(n);
      }
      ButterflyAngles<float> af(d, 2);
      af.angles = a.angles.cast<float>();
      const auto y = butterfly_forward(x, a);
      const auto yf = butterfly_forward(x.cast<float>(), af);
      for (std::size_t r = 0; r < 4; ++r) {
        double ny = 0, nf = 0;
        for (std::size_t c = 0; c < d; ++c) {
          ny += y(r, c) * y(r, c);
          nf += static_cast<double>(yf(r, c)) * yf(r, c);
        }
        worst_norm = std::max({worst_norm, std::abs(std::sqrt(ny) - 1.0), std::abs(std::sqrt(nf) - 1.0)});
      }
      if (trial < 3) {
        auto xin = gaussian<double>(rng, {3, d}, 0.0, 1.0);
        const auto w = gaussian<double>(rng, {3, d}, 0.0, 1.0);
        ButterflyCache<double> cache;
        butterfly_forward(xin, a, &cache);
        const auto g = butterfly_backward(w, a, cache);
        auto loss = [&] { return dot(butterfly_forward(xin, a), w); };
        worst_grad = std::max({worst_grad, rel_error(g.dx, finite_diff(loss, xin)),
                               rel_error(g.dangles, finite_diff(loss, a.angles))});
      }
    }
  }
  o.require(worst_orth < tol::kOrthogonality, "max |BB^T - I| " + fmt("%.3e", worst_orth));
  o.require(worst_norm < tol::kNormPreservation, "norm error " + fmt("%.3e", worst_norm));
  o.require(worst_grad < tol::kButterflyGradRel, "gradient rel error " + fmt("%.3e", worst_grad));
  o.note("max |BB^T - I| " + fmt("%.1e", worst_orth) + ", norm err " + fmt("%.1e", worst_norm) + ", grad rel err " +
         fmt("%.1e", worst_grad));
  return o;
}

Outcome quantizer_correctness() {
  Outcome o;
  const auto t = absmean_quantize(Tensor<double>::matrix(2, 2, {0.5, -0.5, 0.05, 0.0}));
  o.require(t.gamma == 0.2625 && t.trits == std::vector<std::int8_t>{1, -1, 0, 0}, "worked example");
  Rng rng(5);
  const auto g = gaussian<float>(rng, {64, 32}, 0.0, 10.0);
  o.require(ste_backward(g) == g, "STE is not a bit-identical passthrough");
  std::size_t roundtrips = 0;
  bool size_ok = true;
  for (int i = 0; i < 1000; ++i) {
    TernaryMatrix m;
    m.rows = 1 + rng.below(64);
    m.cols = 1 + rng.below(64);
    m.trits.resize(m.rows * m.cols);
    for (auto& v : m.trits) v = static_cast<std::int8_t>(static_cast<int>(rng.below(3)) - 1);
    m.gamma = rng.uniform(0.0, 3.0);
    const auto bytes = pack(m);
    roundtrips += unpack(bytes) == m;
    // 1.6 bits per trit, rounded up to the whole trailing byte.
    const double bound_bits = std::ceil(1.6 * static_cast<double>(m.trits.size()) / 8.0) * 8.0;
    size_ok = size_ok && 8.0 * static_cast<double>(bytes.size() - kSubstrateHeaderBytes) <= bound_bits;
  }
  o.require(roundtrips == 1000, std::to_string(roundtrips) + "/1000 round-trips");
  o.require(size_ok, "payload exceeds 1.6 bits/weight");
  const std::size_t full = pack(TernaryMatrix{1024, 256, std::vector<std::int8_t>(262144, 0), 1.0}).size();
  o.require(full == 52429 + kSubstrateHeaderBytes, "default substrate is " + std::to_string(full) + " bytes");
  o.note("1000/1000 round-trips; 1024x256 substrate = 52429 + 22 bytes");
  return o;
}

// Dense oracle: every expert materialized, softmax over the top-k raw logits.
Tensor<double> moe_oracle(const OrbitalMoELayer<double>& layer, const Tensor<double>& h) {
  const auto q = absmean_quantize(layer.substrate).dequantize<double>();
  const std::size_t ne = layer.n_experts(), dm = layer.d_model();
  std::vector<Tensor<double>> bt, bp;
  for (std::size_t e = 0; e < ne; ++e) {
    bt.push_back(materialize(layer.theta[e]));
    bp.push_back(materialize(layer.phi[e]));
  }
  auto mv = [](const Tensor<double>& m, const std::vector<double>& v) {
    std::vector<double> out(m.dim(0), 0.0);
    for (std::size_t i = 0; i < m.dim(0); ++i)
      for (std::size_t j = 0; j < m.dim(1); ++j) out[i] += m(i, j) * v[j];
    return out;
  };
  Tensor<double> out({h.rows(), dm});
  for (std::size_t t = 0; t < h.rows(); ++t) {
    const std::vector<double> x(h.row(t).begin(), h.row(t).end());
    const auto logits = mv(layer.gate_weights, x);
    std::vector<std::size_t> order(ne);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return logits[a] > logits[b]; });
    double z = 0;
    for (std::size_t s = 0; s < layer.top_k(); ++s) z += std::exp(logits[order[s]]);
    for (std::size_t s = 0; s < layer.top_k(); ++s) {
      const std::size_t e = order[s];
      auto pre = mv(q, mv(bt[e], x));
      for (auto& v : pre) v = 0.5 * v * std::erfc(-v / std::sqrt(2.0));
      const auto y = mv(layer.down_proj, mv(bp[e], pre));
      const double w = std::exp(logits[e]) / z;
      for (std::size_t c = 0; c < dm; ++c) out(t, c) += w * y[c];
    }
  }
  return out;
}

Outcome moe_equivalence() {
  Outcome o;
  double worst = 0;
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    OrbitalMoELayer<double> layer(8, 16, 4, 2);
    Rng init = rng.split(static_cast<std::uint64_t>(trial));
    layer.init(init);
    for (std::size_t e = 0; e < 4; ++e) {
      layer.theta[e].angles = gaussian<double>(init, layer.theta[e].angles.shape(), 0.0, 1.0);
      layer.phi[e].angles = gaussian<double>(init, layer.phi[e].angles.shape(), 0.0, 1.0);
    }
    const std::size_t batch = 1 + rng.below(4), tokens = 1 + rng.below(9);
    const auto h = gaussian<double>(rng, {batch * tokens, 8}, 0.0, 1.0);
    const auto got = moe_forward(layer, h, batch).out;
    const auto want = moe_oracle(layer, h);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  }
  o.require(worst < tol::kMoeOracle, "max abs diff " + fmt("%.3e", worst));
  o.note("100 batches, max abs diff " + fmt("%.1e", worst));
  return o;
}

Outcome loss_properties() {
  Outcome o;
  for (std::size_t ne : {1, 2, 4, 8, 16, 64}) {
    const double u = load_balance_loss(std::vector<double>(ne, 1.0 / static_cast<double>(ne)));
    std::vector<double> collapse(ne, 0.0);
    collapse[ne / 2] = 1.0;
    o.require(std::abs(u - 1.0) < 1e-12, "uniform L_bal " + fmt("%.15g", u));
    o.require(load_balance_loss(collapse) == static_cast<double>(ne), "collapsed L_bal");
  }
  Rng rng(7);
  std::size_t inside = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t ne = 2 + rng.below(31);
    std::vector<double> f(ne);
    double s = 0;
    for (auto& v : f) s += (v = -std::log(1.0 - rng.uniform()));
    for (auto& v : f) v /= s;
    const double l = load_balance_loss(f);
    inside += l >= 1.0 - 1e-12 && l <= static_cast<double>(ne) + 1e-12;
  }
  o.require(inside == 10000, std::to_string(inside) + "/10000 simplex points in [1, N_E]");
  o.require(spatial_smoothness_loss(Tensor<double>({3, 16, 4}, -0.25)) == 0.0, "constant logits");
  const double hand = spatial_smoothness_loss(Tensor<double>({1, 2, 2}, std::vector<double>{0, 0, 1, 1}));
  o.require(hand == 2.0, "hand example " + fmt("%.6f", hand));
  o.note("L_bal bounds hold on 10^4 points; L_sp hand example = 2.0");
  return o;
}

Outcome census_consistency_all() {
  Outcome o;
  ViTConfig micro;
  micro.image_size = 8;
  micro.patch_size = 4;
  micro.d_model = 8;
  micro.d_ff = 16;
  micro.n_heads = 2;
  micro.depth = 1;
  micro.n_experts = 2;
  micro.top_k = 1;
  micro.classes = 3;
  std::size_t checked = 0;
  for (ViTConfig base : {ViTConfig{}, micro})
    for (FfnKind kind : {FfnKind::orbital, FfnKind::standard_moe, FfnKind::dense}) {
      base.ffn_kind = kind;
      ViTModel<float> model(base);
      const auto r = census_consistency(model.parameter_census(), base);
      o.require(r.ok(), std::string(to_string(kind)) + ": " + r.describe());
      ++checked;
    }
  o.note(std::to_string(checked) + " configurations, zero deltas");
  return o;
}

// ---------------------------------------------------------------------------

struct TrainingRun {
  TrainingLog log;
  std::vector<double> init_mean, trained_mean;
  double init_max = 0;
  double seconds = 0;
};

ViTConfig desk_config() {
  ViTConfig c;
  c.d_model = 32;
  c.d_ff = 64;
  c.depth = 2;
  c.n_heads = 2;
  c.n_experts = 4;
  c.top_k = 2;
  c.n_butterfly_layers = 2;
  c.classes = 4;
  c.seed = 0;
  return c;
}

TrainingRun desk_training() {
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetSplit data = gen_synthetic(SyntheticSpec::parse("classes=4,train=512,val=128,seed=7"));
  ViTModel<float> model(desk_config());
  model.init();
  TrainingRun run;
  auto similarity = [&](std::vector<double>& means, double* max_out) {
    for (auto& b : model.blocks()) {
      const auto sim = expert_cosine_similarity(dynamic_cast<const OrbitalMoELayer<float>&>(*b->ffn));
      means.push_back(mean_off_diagonal(sim));
      if (max_out)
        for (std::size_t i = 0; i < sim.dim(0); ++i)
          for (std::size_t j = 0; j < sim.dim(0); ++j)
            if (i != j) *max_out = std::max(*max_out, sim(i, j));
    }
  };
  run.init_max = -1;
  similarity(run.init_mean, &run.init_max);
  TrainSchedule sched;
  sched.epochs = 30;
  sched.batch_size = 32;
  sched.peak_lr = 3e-4;
  sched.seed = 0;
  run.log = train(model, data.train, &data.val, sched);
  similarity(run.trained_mean, nullptr);
  run.seconds = seconds_since(t0);
  return run;
}

Outcome desk_scale_training(const TrainingRun& run) {
  Outcome o;
  const auto& epochs = run.log.epochs;
  o.require(epochs.size() == 30, std::to_string(epochs.size()) + " epochs logged");
  if (epochs.empty()) return o;
  const auto& last = epochs.back();
  o.require(last.train_acc >= tol::kTrainAcc, "train acc " + fmt("%.4f", last.train_acc));
  o.require(last.val_acc >= tol::kValAcc, "val acc " + fmt("%.4f", last.val_acc));
  const double bar = 1.0 / (4.0 * 4.0);
  double min_share = 1;
  for (const auto& block : last.expert_tokens) {
    const double total = std::accumulate(block.begin(), block.end(), 0.0);
    for (auto n : block) min_share = std::min(min_share, static_cast<double>(n) / total);
  }
  o.require(min_share >= bar, "min expert share " + fmt("%.4f", min_share));
  // Mean total loss over consecutive 5-epoch windows must not increase.
  std::vector<double> windows;
  for (std::size_t w = 0; w + 5 <= epochs.size(); w += 5) {
    double s = 0;
    for (std::size_t e = w; e < w + 5; ++e) s += epochs[e].train_loss;
    windows.push_back(s / 5);
  }
  for (std::size_t i = 1; i < windows.size(); ++i)
    o.require(windows[i] <= windows[i - 1], "window " + std::to_string(i) + " loss rose " +
                                                fmt("%.5f", windows[i - 1]) + " -> " + fmt("%.5f", windows[i]));
  o.require(run.seconds < budget::kTraining, "took " + fmt("%.1f", run.seconds) + " s");
  o.note("train acc " + fmt("%.3f", last.train_acc) + ", val acc " + fmt("%.3f", last.val_acc) +
         ", min expert share " + fmt("%.3f", min_share) + ", window losses " + fmt("%.3f", windows.front()) +
         " -> " + fmt("%.3f", windows.back()));
  return o;
}

Outcome symmetry_breaking(const TrainingRun& run) {
  Outcome o;
  o.require(run.init_max < tol::kSimilarityInit, "init max similarity " + fmt("%.6f", run.init_max));
  std::string per_block;
  for (std::size_t b = 0; b < run.init_mean.size(); ++b) {
    o.require(run.trained_mean[b] < run.init_mean[b], "block " + std::to_string(b) + " mean did not decrease");
    per_block += " b" + std::to_string(b) + " " + fmt("%.6f", run.init_mean[b]) + "->" + fmt("%.6f", run.trained_mean[b]);
  }
  o.note("init max " + fmt("%.5f", run.init_max) + ";" + per_block);
  return o;
}

Outcome determinism(const TrainingRun& a, const TrainingRun& b) {
  Outcome o;
  o.require(a.log.to_csv() == b.log.to_csv(), "training logs differ");
  o.require(a.log.routing_csv() == b.log.routing_csv(), "routing logs differ");
  o.note("two runs, byte-identical logs (" + std::to_string(a.log.to_csv().size()) + " bytes)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ButterflyViT acceptance suite"};
  std::vector<int> only;
  app.add_option("--only", only, "run just these criteria (training criteria 8, 9 and 11 share runs)");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  int failures = 0;
  auto report = [&](int id, const char* name, double limit, const std::function<Outcome()>& fn, double spent = 0) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o = fn();
    const double s = seconds_since(t0) + spent;
    if (limit > 0) o.require(s < limit, "runtime " + fmt("%.2f", s) + " s over " + fmt("%.0f", limit) + " s");
    failures += !o.pass;
    std::printf("%s  %2d %-22s %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), s);
    std::fflush(stdout);
  };

  report(1, "memory-table", budget::kAnalytic, table_reproduction);
  report(2, "asymptotic-bound", budget::kAnalytic, asymptotic_bound);
  report(3, "energy", budget::kAnalytic, energy_figures);
  report(4, "butterfly", budget::kButterfly, butterfly_correctness);
  report(5, "quantizer", budget::kQuantizer, quantizer_correctness);
  report(6, "moe-oracle", budget::kMoe, moe_equivalence);
  report(7, "loss-properties", budget::kLosses, loss_properties);

  if (wanted(8) || wanted(9) || wanted(11)) {
    const TrainingRun first = desk_training();
    report(8, "desk-training", 0, [&] { return desk_scale_training(first); }, first.seconds);
    report(9, "symmetry-breaking", 0, [&] { return symmetry_breaking(first); });
    if (wanted(11)) {
      const TrainingRun second = desk_training();
      report(11, "determinism", 0, [&] {
        Outcome o = determinism(first, second);
        o.require(second.seconds < budget::kTraining, "second run took " + fmt("%.1f", second.seconds) + " s");
        return o;
      }, second.seconds);
    }
  }
  report(10, "census", budget::kCensus, census_consistency_all);

  std::printf("%s: %d failed\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
