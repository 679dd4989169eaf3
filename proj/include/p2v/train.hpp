#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2v/checkpoint.hpp"
#include "p2v/config.hpp"
#include "p2v/data.hpp"
#include "p2v/downstream.hpp"
#include "p2v/pretraining.hpp"

namespace p2v {

// Train/test splits resolved from the config (manifest or synthetic).
struct DataBundle {
  LoadedDataset train;
  LoadedDataset test;
};
DataBundle load_data(const RunConfig& cfg);

// ----- pretraining loop -------------------------------------------------------

struct PretrainResult {
  std::vector<float> losses;  // one entry per step
  int64_t steps = 0;
  std::string checkpoint_path;
};

// Runs the full pretraining schedule. When out_dir is non-empty, writes
// log.tsv plus periodic and final checkpoints. resume_from restores model,
// optimizer, and schedule position bit-exactly.
PretrainResult run_pretrain(const RunConfig& cfg, const LoadedDataset& train,
                            const std::string& out_dir,
                            const std::string& resume_from = "",
                            std::function<void(int64_t, float)> on_step = {});

Checkpoint make_pretrain_checkpoint(const RunConfig& cfg,
                                    PretrainModel& model, AdamW& optimizer,
                                    int64_t step, int64_t epoch);

struct TrunkLoadReport {
  int64_t loaded = 0;
  std::vector<std::string> missing;     // wanted but absent in the file
  bool decoder_present = false;
};

// Copies "student.*" tensors from a pretraining checkpoint into a trunk.
// Missing entries are reported, not fatal; shape mismatches throw.
TrunkLoadReport load_trunk_from_checkpoint(const Checkpoint& checkpoint,
                                           PointTrunk& trunk);

// ----- fine-tuning -------------------------------------------------------------

struct FinetuneOptions {
  std::string task = "cls";        // "cls" | "partseg"
  std::string checkpoint_path;     // empty = from scratch
  std::string out_dir;             // empty = no files
  int64_t eval_every = 1;          // epochs between test evaluations
};

struct EpochRecord {
  int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double test_metric = 0.0;  // accuracy (cls) or per-point accuracy (partseg)
};

struct FinetuneResult {
  std::vector<EpochRecord> history;
  double initial_metric = 0.0;  // before any training step
  double final_metric = 0.0;
  nlohmann::json metrics;       // flat report written to metrics.json
};

FinetuneResult run_finetune(const RunConfig& cfg, const LoadedDataset& train,
                            const LoadedDataset& test,
                            const FinetuneOptions& options);

// ----- few-shot ----------------------------------------------------------------

struct FewshotResult {
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;
};

FewshotResult run_fewshot(const RunConfig& cfg, const LoadedDataset& dataset,
                          const std::string& checkpoint_path, int64_t way,
                          int64_t shot, int64_t runs, uint64_t seed);

// ----- analysis ----------------------------------------------------------------

struct MaskCoverage {
  MaskStrategy strategy;
  double ratio = 0.0;
  double masked_only = 0.0;   // fraction of input points in masked patches only
  double visible_only = 0.0;
  double both = 0.0;
  double uncovered = 0.0;
};

// Tokenizes `cloud` and accounts for every input point: covered only by
// masked patches, only by visible ones, by both, or by none.
MaskCoverage mask_coverage(const PointCloud& cloud, int64_t num_centers,
                           int64_t group_size, MaskStrategy strategy,
                           double ratio, uint64_t tokenize_seed,
                           uint64_t mask_seed,
                           std::vector<int>* point_tags = nullptr);

}  // namespace p2v
