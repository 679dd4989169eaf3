#include <doctest.h>

#include <fstream>

#include "p2v/config.hpp"

using namespace p2v;

#ifndef P2V_SOURCE_DIR
#define P2V_SOURCE_DIR "."
#endif

namespace {

std::string config_path(const char* name) {
  return std::string(P2V_SOURCE_DIR) + "/configs/" + name;
}

}  // namespace

TEST_CASE("shipped point2vec pretraining defaults match the recipe") {
  const RunConfig cfg = RunConfig::load(config_path("pretrain_point2vec.json"));
  CHECK(cfg.pretrain.mode == PretrainMode::kPoint2Vec);
  CHECK(cfg.pretrain.epochs == 800);
  CHECK(cfg.pretrain.batch_size == 512);
  CHECK(cfg.pretrain.lr == 1e-3);
  CHECK(cfg.pretrain.weight_decay == 0.05);
  CHECK(cfg.pretrain.warmup_epochs == 80);
  CHECK(cfg.model.depth == 12);
  CHECK(cfg.model.dim == 384);
  CHECK(cfg.model.heads == 6);
  REQUIRE(cfg.pretrain.decoder_depth.has_value());
  CHECK(*cfg.pretrain.decoder_depth == 4);
  CHECK(cfg.pretrain.mask_strategy == MaskStrategy::kRandom);
  CHECK(cfg.pretrain.mask_ratio == 0.65);
  CHECK(cfg.pretrain.ema.tau0 == 0.9998);
  CHECK(cfg.pretrain.ema.tau_end == 0.99999);
  CHECK(cfg.pretrain.ema.warmup_epochs == 200);
  CHECK(cfg.pretrain.target_layers == 6);
  CHECK(cfg.pretrain.smooth_l1_beta == 2.0);
  CHECK(cfg.tokenizer.num_centers == 64);
  CHECK(cfg.tokenizer.group_size == 32);
  CHECK(cfg.data.sample_points == 1024);
  CHECK(cfg.model.pointnet_first == std::vector<int64_t>{128, 256});
  CHECK(cfg.model.pointnet_second_hidden == std::vector<int64_t>{512});
  CHECK(cfg.pretrain.augment.uniform_scale);
  CHECK(cfg.pretrain.augment.scale_lo == 0.8);
  CHECK(cfg.pretrain.augment.scale_hi == 1.2);
  CHECK(cfg.pretrain.augment.rotate_gravity);
}

TEST_CASE("shipped data2vec_pc defaults differ only as published") {
  const RunConfig cfg =
      RunConfig::load(config_path("pretrain_data2vec_pc.json"));
  CHECK(cfg.pretrain.mode == PretrainMode::kData2VecPc);
  CHECK(cfg.pretrain.batch_size == 2048);
  CHECK(cfg.pretrain.lr == 2e-3);
  CHECK_FALSE(cfg.pretrain.decoder_depth.has_value());
  CHECK(cfg.pretrain.epochs == 800);
  CHECK(cfg.pretrain.ema.tau0 == 0.9998);
}

TEST_CASE("shipped classification fine-tuning defaults match the recipe") {
  const RunConfig cfg =
      RunConfig::load(config_path("finetune_classification.json"));
  CHECK(cfg.finetune.epochs == 150);
  CHECK(cfg.finetune.batch_size == 32);
  CHECK(cfg.finetune.lr == 3e-4);
  CHECK(cfg.finetune.weight_decay == 0.05);
  CHECK(cfg.finetune.warmup_epochs == 10);
  CHECK(cfg.finetune.freeze_epochs == 100);
  CHECK(cfg.finetune.label_smoothing == 0.2);
  CHECK(cfg.finetune.head_hidden == std::vector<int64_t>{256, 256});
  CHECK(cfg.finetune.head_dropout == 0.5);
  CHECK(cfg.model.max_drop_path == 0.2);
  CHECK(cfg.data.sample_points == 1024);
  CHECK(cfg.tokenizer.num_centers == 64);
  CHECK(cfg.tokenizer.group_size == 32);
  CHECK(cfg.finetune.augment.anisotropic_scale);
  CHECK(cfg.finetune.augment.anisotropic_fraction == 0.4);
  CHECK(cfg.finetune.augment.center_unit_sphere);
}

TEST_CASE("shipped part-segmentation defaults match the recipe") {
  const RunConfig cfg = RunConfig::load(config_path("finetune_partseg.json"));
  CHECK(cfg.finetune.epochs == 300);
  CHECK(cfg.finetune.batch_size == 16);
  CHECK(cfg.finetune.lr == 2e-4);
  CHECK(cfg.finetune.seg_head_hidden == std::vector<int64_t>{512, 256});
  CHECK(cfg.finetune.head_dropout == 0.5);
  CHECK(cfg.data.sample_points == 2048);
  CHECK(cfg.tokenizer.num_centers == 128);
  CHECK(cfg.tokenizer.group_size == 32);
  CHECK(cfg.finetune.prop_k == 3);
  CHECK(cfg.finetune.prop_power == 2.0);
  CHECK(cfg.finetune.prop_eps == 1e-8);
}

TEST_CASE("desk configs parse and validate") {
  CHECK_NOTHROW(RunConfig::load(config_path("desk_pretrain.json")));
  CHECK_NOTHROW(RunConfig::load(config_path("desk_finetune.json")));
  const RunConfig seg = RunConfig::load(config_path("desk_partseg.json"));
  CHECK(seg.model.depth == 12);  // the part-seg head needs twelve blocks
}

TEST_CASE("unknown keys are rejected with their path") {
  nlohmann::json doc = {{"seed", 1}, {"bogus", 2}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  nlohmann::json nested = {{"model", {{"dim", 64}, {"depht", 4}}}};
  try {
    RunConfig::from_json(nested);
    FAIL("expected ConfigError");
  } catch (const ConfigError& err) {
    CHECK(std::string(err.what()).find("model.depht") != std::string::npos);
  }
}

TEST_CASE("data2vec_pc mode rejects decoder keys") {
  nlohmann::json doc = {
      {"pretrain",
       {{"mode", "data2vec_pc"}, {"decoder_depth", 4}, {"target_layers", 6}}}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  nlohmann::json ok = {
      {"pretrain", {{"mode", "data2vec_pc"}, {"target_layers", 6}}}};
  const RunConfig cfg = RunConfig::from_json(ok);
  CHECK_FALSE(cfg.pretrain.decoder_depth.has_value());
}

TEST_CASE("point2vec mode requires a decoder") {
  nlohmann::json doc = {{"pretrain", {{"mode", "point2vec"}}}};
  CHECK_NOTHROW(RunConfig::from_json(doc));  // default decoder_depth = 4

  nlohmann::json zero = {
      {"pretrain", {{"mode", "point2vec"}, {"decoder_depth", 0}}}};
  CHECK_THROWS_AS(RunConfig::from_json(zero), ConfigError);
}

TEST_CASE("config snapshot round-trips through json") {
  const RunConfig cfg = RunConfig::load(config_path("desk_pretrain.json"));
  const RunConfig again = RunConfig::from_json(cfg.to_json());
  CHECK(again.to_json() == cfg.to_json());
  CHECK(again.seed == cfg.seed);
  CHECK(again.pretrain.mask_ratio == cfg.pretrain.mask_ratio);
}

TEST_CASE("invalid cross-field combinations fail closed") {
  nlohmann::json doc = {{"model", {{"dim", 100}, {"heads", 7}}}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  nlohmann::json bad_k = {{"pretrain", {{"target_layers", 20}}}};
  CHECK_THROWS_AS(RunConfig::from_json(bad_k), ConfigError);

  nlohmann::json bad_ratio = {{"pretrain", {{"mask_ratio", 1.5}}}};
  CHECK_THROWS_AS(RunConfig::from_json(bad_ratio), ConfigError);
}
