#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "bvit/vit.hpp"
#include "numeric_check.hpp"

using namespace bvit;
using bvit::testing::numeric_grad;
using bvit::testing::rel_error;

namespace {

ViTConfig micro(FfnKind kind = FfnKind::orbital) {
  ViTConfig c;
  c.image_size = 4;
  c.patch_size = 2;
  c.channels = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.n_heads = 2;
  c.depth = 1;
  c.n_experts = 2;
  c.top_k = 1;
  c.classes = 3;
  c.lambda_sp = 0.5;  // large enough that the smoothness gradient is visible
  c.ffn_kind = kind;
  c.seed = 3;
  return c;
}

Dataset tiny_dataset(std::size_t n, std::size_t classes, std::uint64_t seed, std::size_t size = 4, std::size_t ch = 2) {
  Dataset ds;
  ds.channels = ch;
  ds.height = ds.width = size;
  ds.classes = classes;
  Rng rng(seed);
  ds.pixels.resize(n * ds.image_floats());
  for (auto& p : ds.pixels) p = static_cast<float>(rng.normal());
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(i % classes));
  return ds;
}

void randomize_angles(ViTModel<double>& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& b : m.blocks())
    if (auto* orb = dynamic_cast<OrbitalMoELayer<double>*>(b->ffn.get()))
      for (std::size_t e = 0; e < orb->n_experts(); ++e) {
        orb->theta[e].angles = gaussian<double>(rng, orb->theta[e].angles.shape(), 0.0, 0.7);
        orb->phi[e].angles = gaussian<double>(rng, orb->phi[e].angles.shape(), 0.0, 0.7);
      }
}

}  // namespace

TEST(ViTConfig, DefaultsValidate) {
  ViTConfig c;
  c.validate();
  EXPECT_EQ(c.patches(), 64u);
  EXPECT_EQ(c.tokens(), 65u);
  EXPECT_EQ(c.patch_dim(), 48u);
  EXPECT_EQ(c.head_dim(), 64u);
}

TEST(ViTConfig, InvalidFieldsAreNamed) {
  auto expect_field = [](ViTConfig c, const std::string& field) {
    try {
      c.validate();
      ADD_FAILURE() << "expected ConfigError for " << field;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), field);
    }
  };
  ViTConfig c;
  c.top_k = 9;
  expect_field(c, "top_k");
  c = {};
  c.patch_size = 5;
  expect_field(c, "patch_size");
  c = {};
  c.n_heads = 3;
  expect_field(c, "n_heads");
  c = {};
  c.lambda_bal = -1;
  expect_field(c, "lambda_bal");
}

TEST(TotalLoss, WeightedSum) {
  ViTConfig c;
  LossTerms t;
  t.bal = 2.0;
  t.sp = 4.0;
  const auto l = total_loss(1.5, t, c);
  EXPECT_DOUBLE_EQ(l.total, 1.5 + 0.05 * 2.0 + 0.005 * 4.0);
  EXPECT_DOUBLE_EQ(l.ce, 1.5);
  c.lambda_bal = c.lambda_sp = 0;
  EXPECT_DOUBLE_EQ(total_loss(1.5, t, c).total, 1.5);
}

class ViTGradient : public ::testing::TestWithParam<FfnKind> {};

TEST_P(ViTGradient, EveryGroupMatchesFiniteDifferences) {
  const ViTConfig cfg = micro(GetParam());
  ViTModel<double> model(cfg);
  model.init();
  randomize_angles(model, 11);
  const Dataset ds = tiny_dataset(3, cfg.classes, 5);
  const std::vector<std::size_t> idx{0, 1, 2};
  auto images = ds.batch_images<double>(idx);
  const auto labels = ds.batch_labels(idx);

  auto loss = [&] {
    const auto fr = model.forward(images);
    return total_loss(softmax_cross_entropy(fr.logits, labels).loss, fr.terms, cfg).total;
  };
  model.zero_grad();
  const auto fr = model.forward(images);
  model.backward(softmax_cross_entropy(fr.logits, labels).dlogits);

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_group;
  for (const auto& p : model.params()) {
    if (p.group == std::string(group::kSubstrate)) continue;
    const auto fd = numeric_grad(loss, *p.value);
    auto& [a, n] = by_group[p.group];
    a.insert(a.end(), p.grad->storage().begin(), p.grad->storage().end());
    n.insert(n.end(), fd.storage().begin(), fd.storage().end());
  }
  for (const auto& [g, v] : by_group) {
    const Tensor<double> a({v.first.size()}, v.first), n({v.second.size()}, v.second);
    EXPECT_LT(rel_error(a, n), 1e-3) << g;
  }
}

INSTANTIATE_TEST_SUITE_P(AllFfnKinds, ViTGradient,
                         ::testing::Values(FfnKind::orbital, FfnKind::standard_moe, FfnKind::dense));

TEST(ViTGradient, SubstrateScaleDirection) {
  const ViTConfig cfg = micro();
  ViTModel<double> model(cfg);
  model.init();
  randomize_angles(model, 12);
  const Dataset ds = tiny_dataset(2, cfg.classes, 6);
  const std::vector<std::size_t> idx{0, 1};
  const auto images = ds.batch_images<double>(idx);
  const auto labels = ds.batch_labels(idx);
  auto loss = [&] {
    const auto fr = model.forward(images);
    return total_loss(softmax_cross_entropy(fr.logits, labels).loss, fr.terms, cfg).total;
  };
  model.zero_grad();
  const auto fr = model.forward(images);
  model.backward(softmax_cross_entropy(fr.logits, labels).dlogits);

  auto& orb = dynamic_cast<OrbitalMoELayer<double>&>(*model.blocks()[0]->ffn);
  const auto q = absmean_quantize(orb.substrate).dequantize<double>();
  const double predicted = bvit::testing::dot(orb.substrate_grad, q);
  const Tensor<double> base = orb.substrate.weights;
  auto at = [&](double s) {
    for (std::size_t i = 0; i < base.size(); ++i) orb.substrate.weights[i] = base[i] * s;
    return loss();
  };
  const double h = 1e-5;
  const double fd = (at(1 + h) - at(1 - h)) / (2 * h);
  EXPECT_NEAR(predicted, fd, 1e-3 * std::max(1.0, std::abs(fd)));
}

TEST(ViTModel, ZeroedResidualBranchesLeaveLogitsIndependentOfPatches) {
  ViTConfig cfg = micro();
  cfg.depth = 2;
  ViTModel<double> model(cfg);
  model.init();
  for (auto& b : model.blocks()) {
    b->attn.w_out.zero();
    b->attn.b_out.zero();
    dynamic_cast<OrbitalMoELayer<double>&>(*b->ffn).down_proj.zero();
  }
  const Dataset a = tiny_dataset(2, 3, 1), b = tiny_dataset(2, 3, 2);
  const std::vector<std::size_t> idx{0, 1};
  const auto la = model.forward(a.batch_images<double>(idx)).logits;
  const auto lb = model.forward(b.batch_images<double>(idx)).logits;
  EXPECT_LT(bvit::testing::max_abs_diff(la, lb), 1e-12);
}

TEST(ViTModel, BalanceTermsStayInRange) {
  ViTConfig cfg = micro();
  cfg.n_experts = 4;
  cfg.top_k = 2;
  cfg.depth = 2;
  ViTModel<float> model(cfg);
  model.init();
  const Dataset ds = tiny_dataset(4, 3, 9);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto fr = model.forward(ds.batch_images<float>(idx));
  ASSERT_EQ(fr.terms.bal_per_block.size(), 2u);
  for (double b : fr.terms.bal_per_block) {
    EXPECT_GE(b, 1.0 - 1e-12);
    EXPECT_LE(b, 4.0 + 1e-12);
  }
  EXPECT_GE(fr.terms.sp, 0.0);
  EXPECT_EQ(model.blocks()[0]->patch_logits.shape(), (Shape{4, cfg.patches(), 4}));
}

TEST(ViTModel, DenseModelHasNoAuxiliaryTerms) {
  ViTModel<float> model(micro(FfnKind::dense));
  model.init();
  const Dataset ds = tiny_dataset(2, 3, 9);
  const std::vector<std::size_t> idx{0, 1};
  const auto fr = model.forward(ds.batch_images<float>(idx));
  EXPECT_EQ(fr.terms.bal, 0.0);
  EXPECT_EQ(fr.terms.sp, 0.0);
}

TEST(ViTModel, SameSeedSameLogits) {
  const ViTConfig cfg = micro();
  ViTModel<float> a(cfg), b(cfg);
  a.init();
  b.init();
  const Dataset ds = tiny_dataset(3, 3, 4);
  const std::vector<std::size_t> idx{0, 1, 2};
  EXPECT_EQ(a.forward(ds.batch_images<float>(idx)).logits, b.forward(ds.batch_images<float>(idx)).logits);
}

TEST(ViTModel, WrongImageShapeThrows) {
  ViTModel<float> model(micro());
  model.init();
  EXPECT_THROW(model.forward(Tensor<float>({1, 3, 4, 4})), DimensionError);
}

TEST(ViTModel, CensusGroups) {
  ViTModel<float> model(micro());
  const auto census = model.parameter_census();
  EXPECT_EQ(census.at(group::kSubstrate), 16u * 8u);
  EXPECT_EQ(census.at(group::kAngles), 2u * 2u * (4u + 8u));
  EXPECT_EQ(census.count(group::kExpertUp), 0u);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  ViTConfig cfg = micro();
  cfg.classes = 100;
  ViTModel<float> model(cfg);
  model.init();
  const Dataset ds = tiny_dataset(2000, 100, 21);
  const auto r = evaluate(model, ds, 250);
  EXPECT_EQ(r.samples, 2000u);
  EXPECT_LT(r.accuracy, 0.03);
  EXPECT_NEAR(r.loss, std::log(100.0), 1.0);
}

TEST(Schedule, WarmupThenCosineToZero) {
  const auto s = WarmupCosine::with_fraction(3e-4, 1000, 0.05);
  EXPECT_EQ(s(0), 0.0);
  EXPECT_EQ(s.warmup_steps, 50u);
  EXPECT_NEAR(s(50), 3e-4, 1e-15);
  EXPECT_NEAR(s(25), 1.5e-4, 1e-15);
  EXPECT_LE(s(999), 1e-3 * 3e-4);
  for (std::size_t i = 51; i < 1000; ++i) EXPECT_LE(s(i), s(i - 1));
}

TEST(Train, LossDecreasesOnALearnableTask) {
  ViTConfig cfg = micro();
  cfg.classes = 2;
  ViTModel<float> model(cfg);
  model.init();
  // Class 1 images are brighter; the model only needs the mean.
  Dataset ds = tiny_dataset(64, 2, 30);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.image_floats(); ++j) ds.pixels[i * ds.image_floats() + j] += ds.labels[i] ? 1.5f : -1.5f;
  TrainSchedule sched;
  sched.epochs = 6;
  sched.batch_size = 16;
  sched.peak_lr = 3e-3;
  std::size_t callbacks = 0;
  const auto log = train(model, ds, &ds, sched, [&](const EpochRecord&) { ++callbacks; });
  ASSERT_EQ(log.epochs.size(), 6u);
  EXPECT_EQ(callbacks, 6u);
  EXPECT_LT(log.epochs.back().train_loss, log.epochs.front().train_loss);
  EXPECT_GT(log.epochs.back().val_acc, 0.9);
  std::size_t tokens = 0;
  for (auto n : log.epochs[0].expert_tokens[0]) tokens += n;
  // CLS is routed too: 64 samples x (4 patches + CLS) x k=1.
  EXPECT_EQ(tokens, 64u * 5u);
  EXPECT_EQ(log.to_csv().substr(0, 6), "epoch,");
}

TEST(Train, IsDeterministic) {
  const ViTConfig cfg = micro();
  const Dataset ds = tiny_dataset(32, 3, 31);
  TrainSchedule sched;
  sched.epochs = 2;
  sched.batch_size = 8;
  sched.augment = true;
  auto run = [&] {
    ViTModel<float> m(cfg);
    m.init();
    return train(m, ds, &ds, sched).to_csv();
  };
  EXPECT_EQ(run(), run());
}
