#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2v/backbone.hpp"
#include "p2v/data.hpp"
#include "p2v/pretraining.hpp"

namespace p2v {

struct SyntheticDataConfig {
  std::string kind = "classification";  // "classification" | "partseg"
  int64_t train_per_class = 200;
  int64_t test_per_class = 50;
  int64_t points = 8192;
  double noise_sigma = 0.01;
  uint64_t seed = 7;
};

struct DataConfig {
  std::string manifest;  // path; empty when synthetic data is configured
  std::optional<SyntheticDataConfig> synthetic;
  int64_t sample_points = 1024;  // FPS resample target per sample
};

struct TokenizerConfig {
  int64_t num_centers = 64;
  int64_t group_size = 32;
};

struct ModelSection {
  int64_t dim = 384;
  int64_t depth = 12;
  int64_t heads = 6;
  double mlp_ratio = 4.0;
  double max_drop_path = 0.0;
  double attn_dropout = 0.0;
  double proj_dropout = 0.0;
  bool qkv_bias = true;
  std::vector<int64_t> pointnet_first = {128, 256};
  std::vector<int64_t> pointnet_second_hidden = {512};
  int64_t pos_hidden = 128;
};

struct EmaSection {
  double tau0 = 0.9998;
  double tau_end = 0.99999;
  int64_t warmup_epochs = 200;
};

struct PretrainSection {
  PretrainMode mode = PretrainMode::kPoint2Vec;
  int64_t epochs = 800;
  int64_t batch_size = 512;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double min_lr = 0.0;
  int64_t warmup_epochs = 80;
  MaskStrategy mask_strategy = MaskStrategy::kRandom;
  double mask_ratio = 0.65;
  int64_t target_layers = 6;
  double smooth_l1_beta = 2.0;
  std::optional<int64_t> decoder_depth = 4;  // absent in data2vec_pc mode
  EmaSection ema;
  int64_t save_every_epochs = 0;  // 0 = only at the end
  AugmentationSpec augment;
};

struct FinetuneSection {
  int64_t epochs = 150;
  int64_t batch_size = 32;
  double lr = 3e-4;
  double weight_decay = 0.05;
  double min_lr = 0.0;
  int64_t warmup_epochs = 10;
  int64_t freeze_epochs = 100;
  double label_smoothing = 0.2;
  std::vector<int64_t> head_hidden = {256, 256};
  double head_dropout = 0.5;
  std::vector<int64_t> seg_head_hidden = {512, 256};
  int64_t prop_dim = 384;
  int64_t prop_k = 3;
  double prop_power = 2.0;
  double prop_eps = 1e-8;
  AugmentationSpec augment;
};

struct RunConfig {
  uint64_t seed = 0;
  int threads = 0;  // 0 = automatic, 1 = strict sequential
  DataConfig data;
  TokenizerConfig tokenizer;
  ModelSection model;
  PretrainSection pretrain;
  FinetuneSection finetune;

  PointTrunk::Config trunk_config() const;
  void validate() const;

  // Fail-closed: unknown keys are rejected with their full path. The file
  // may carry // comments.
  static RunConfig load(const std::string& path);
  static RunConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

}  // namespace p2v
