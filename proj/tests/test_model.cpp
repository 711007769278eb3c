#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "iteach/model.hpp"
#include "iteach/rng.hpp"

using namespace iteach;

namespace {

ModelConfig small_config(MixerMode mode, std::size_t max_len = 6) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.layers = 3;
  cfg.max_len = max_len;
  cfg.input_dims = {5, 4, 3};
  cfg.n_outputs = 4;
  cfg.mixer_mode = mode;
  cfg.ecce_window = 3;
  return cfg;
}

Conversation random_conversation(std::size_t L, const ModelConfig& cfg, Rng& rng) {
  Conversation conv;
  conv.id = "c";
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    conv.features[m] = FeatureMatrix(L, cfg.input_dims[m]);
    for (auto& v : conv.features[m].values) v = rng.normal();
  }
  conv.labels.assign(L, 0.0);
  return conv;
}

// Copies every parameter `dst` shares by name with `src`.
void copy_shared(const Model& src, Model& dst) {
  for (auto& p : dst.params().all())
    if (const auto* s = src.params().find(p.name)) p.value.values() = s->value.values();
}

}  // namespace

TEST(Model, DepthAndShapes) {
  for (auto mode : {MixerMode::Transformer, MixerMode::Nas}) {
    Rng rng(1);
    const auto cfg = small_config(mode);
    Model model(cfg, rng);
    const auto stack = model(random_conversation(4, cfg, rng));
    ASSERT_EQ(stack.depth(), 3u);
    for (const auto& h : stack.H) EXPECT_EQ(h.shape(), (Shape{6, 8}));
    EXPECT_EQ(stack.logits.shape(), (Shape{6, 4}));
    ASSERT_EQ(stack.router_weights.size(), 3u);
    const std::size_t width = mode == MixerMode::Nas ? cfg.candidates.size() : 1;
    EXPECT_EQ(stack.router_weights[0][kAudio].shape(), (Shape{6, width}));
  }
}

TEST(Model, FirstHiddenStateIsLastLayerAndFeedsClassifier) {
  Rng rng(2);
  const auto cfg = small_config(MixerMode::Transformer);
  Model model(cfg, rng);
  const auto stack = model(random_conversation(5, cfg, rng));
  const Tensor logits = model.classifier()(stack.H[0]);
  EXPECT_EQ(logits.values(), stack.logits.values());
  EXPECT_NE(stack.H[0].values(), stack.H[2].values());
}

TEST(Model, PaddingRowsAreZeroInEveryLayer) {
  Rng rng(3);
  const auto cfg = small_config(MixerMode::Nas);
  Model model(cfg, rng);
  const auto stack = model(random_conversation(4, cfg, rng));
  for (const auto& h : stack.H)
    for (std::size_t r = 4; r < 6; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(h(r, c), 0.0);
}

TEST(Model, GarbageInPaddedRowsDoesNotLeak) {
  for (auto mode : {MixerMode::Transformer, MixerMode::Nas}) {
    Rng rng(4);
    const auto cfg = small_config(mode);
    Model model(cfg, rng);
    const auto conv = random_conversation(4, cfg, rng);
    auto clean = pad_conversation(conv, cfg.max_len);
    auto dirty = pad_conversation(conv, cfg.max_len);
    for (std::size_t m = 0; m < kNumModalities; ++m)
      for (std::size_t r = 4; r < 6; ++r)
        for (std::size_t c = 0; c < cfg.input_dims[m]; ++c) dirty.x[m](r, c) = 1e3 * (1.0 + r + c);
    const auto a = model(clean), b = model(dirty);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(a.H[l].values(), b.H[l].values());
  }
}

TEST(Model, TransformerModeIgnoresMaxLen) {
  Rng rng_a(5), rng_b(5);
  const auto cfg_a = small_config(MixerMode::Transformer, 6);
  const auto cfg_b = small_config(MixerMode::Transformer, 9);
  Model a(cfg_a, rng_a), b(cfg_b, rng_b);
  Rng data_rng(6);
  const auto conv = random_conversation(5, cfg_a, data_rng);
  const auto sa = a(conv), sb = b(conv);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(sa.H[0](r, c), sb.H[0](r, c), 1e-12);
}

TEST(Model, SingleCandidateNasEqualsTransformerBitForBit) {
  Rng rng_t(7), rng_n(8);
  auto cfg_t = small_config(MixerMode::Transformer);
  auto cfg_n = cfg_t;
  cfg_n.mixer_mode = MixerMode::Nas;
  cfg_n.candidates = {MixerKind::Attention};
  Model tf(cfg_t, rng_t), nas(cfg_n, rng_n);
  copy_shared(tf, nas);
  Rng data_rng(9);
  const auto conv = random_conversation(5, cfg_t, data_rng);
  const auto a = tf(conv), b = nas(conv);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(a.H[l].values(), b.H[l].values());
  EXPECT_EQ(a.logits.values(), b.logits.values());
}

TEST(Model, RouterParamsAreInTheirOwnGroup) {
  Rng rng(10);
  Model model(small_config(MixerMode::Nas), rng);
  std::size_t routers = 0;
  for (const auto& p : model.params().all()) {
    const bool is_router = p.name.find(".router.") != std::string::npos;
    EXPECT_EQ(p.group == ParamGroup::Router, is_router) << p.name;
    routers += is_router;
  }
  EXPECT_EQ(routers, 3u * kNumModalities * 2u);
}

TEST(Model, TwoModelsShareNoStorage) {
  Rng rng(11);
  Model a(small_config(MixerMode::Transformer), rng), b(small_config(MixerMode::Nas), rng);
  std::set<const void*> seen;
  for (const auto& p : a.params().all()) seen.insert(p.value.impl().get());
  for (const auto& p : b.params().all()) EXPECT_EQ(seen.count(p.value.impl().get()), 0u);
}

TEST(Model, RejectsOverlongConversation) {
  Rng rng(12);
  const auto cfg = small_config(MixerMode::Transformer);
  Model model(cfg, rng);
  EXPECT_THROW(model(random_conversation(7, cfg, rng)), DimensionError);
}

TEST(Model, HeadsMustDivideWidth) {
  auto cfg = small_config(MixerMode::Transformer);
  cfg.heads = 3;
  Rng rng(13);
  EXPECT_THROW(Model(cfg, rng), ConfigError);
}

TEST(Model, ZeroCrossAttentionLeavesTextEncoderOutput) {
  Rng rng(14);
  const auto cfg = small_config(MixerMode::Transformer);
  Model model(cfg, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (auto* cross : {&model.layer(l).cross_audio(), &model.layer(l).cross_visual()})
      for (auto& v : cross->weights().o.weight().values()) v = 0.0;
  const auto conv = random_conversation(4, cfg, rng);
  const auto stack = model(conv);
  // Rebuild the first layer by hand: fused equals the text encoder output.
  const auto in = pad_conversation(conv, cfg.max_len);
  const auto rows = row_factors(in.valid);
  const Tensor text = mask_rows(model.projection(kText)(in.x[kText]), rows);
  const auto map = model.ecce(kText)(text, in.length);
  const Tensor enc = model.layer(0).encoder(kText)(text, &map, in.valid);
  EXPECT_EQ(stack.H[2].values(), enc.values());
}

TEST(Checkpoint, RoundTripRestoresOutputs) {
  Rng rng(15);
  const auto cfg = small_config(MixerMode::Nas);
  Model a(cfg, rng), b(cfg, rng);
  const auto path = std::filesystem::temp_directory_path() / "iteach_test_ckpt.bin";
  save_checkpoint(path, {{"model", &a.params()}});
  apply_checkpoint(read_checkpoint(path), "model", b.params());
  const auto conv = random_conversation(5, cfg, rng);
  EXPECT_EQ(a(conv).logits.values(), b(conv).logits.values());
  std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchIsALoadError) {
  Rng rng(16);
  auto cfg = small_config(MixerMode::Transformer);
  Model a(cfg, rng);
  cfg.d_model = 12;
  Model b(cfg, rng);
  const auto path = std::filesystem::temp_directory_path() / "iteach_test_ckpt2.bin";
  save_checkpoint(path, {{"model", &a.params()}});
  EXPECT_THROW(apply_checkpoint(read_checkpoint(path), "model", b.params()), LoadError);
  EXPECT_THROW(apply_checkpoint(read_checkpoint(path), "teacher", a.params()), LoadError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, GarbageFileIsALoadError) {
  const auto path = std::filesystem::temp_directory_path() / "iteach_test_garbage.bin";
  {
    std::ofstream os(path);
    os << "not a checkpoint";
  }
  EXPECT_THROW(read_checkpoint(path), LoadError);
  std::filesystem::remove(path);
}
