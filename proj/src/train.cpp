#include "p2v/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "p2v/common.hpp"
#include "p2v/ops.hpp"
#include "p2v/parallel.hpp"

namespace p2v {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

DataBundle load_data(const RunConfig& cfg) {
  DataBundle bundle;
  if (cfg.data.synthetic) {
    const auto& syn = *cfg.data.synthetic;
    if (syn.kind == "partseg") {
      bundle.train = make_synthetic_partseg(syn.train_per_class, syn.points,
                                            syn.noise_sigma, syn.seed);
      bundle.test = make_synthetic_partseg(syn.test_per_class, syn.points,
                                           syn.noise_sigma, syn.seed + 1);
    } else {
      bundle.train = make_synthetic_classification(
          syn.train_per_class, syn.points, syn.noise_sigma, syn.seed);
      bundle.test = make_synthetic_classification(
          syn.test_per_class, syn.points, syn.noise_sigma, syn.seed + 1);
    }
    return bundle;
  }
  check<ConfigError>(!cfg.data.manifest.empty(),
                     "config: either data.manifest or data.synthetic is "
                     "required");
  bundle.train = load_split(cfg.data.manifest, "train");
  bundle.test = load_split(cfg.data.manifest, "test");
  return bundle;
}

namespace {

int64_t steps_per_epoch(int64_t samples, int64_t batch) {
  return (samples + batch - 1) / batch;
}

// Epoch-scoped view of a training sample: FPS resample plus augmentations,
// all randomness derived from (seed, purpose, epoch, sample).
PointCloud train_view(const PointCloud& cloud, int64_t sample_points,
                      const AugmentationSpec& aug, uint64_t seed,
                      int64_t epoch, int64_t sample_index) {
  Rng rng = Rng::derive(seed, "sample-view", static_cast<uint64_t>(epoch),
                        static_cast<uint64_t>(sample_index));
  if (cloud.size() <= sample_points) {
    return augment(cloud, aug, rng);
  }
  return make_pretrain_sample(cloud, sample_points, aug, rng);
}

// Deterministic evaluation view: resample and the deterministic
// normalization stages only.
PointCloud eval_view(const PointCloud& cloud, int64_t sample_points,
                     const AugmentationSpec& aug, uint64_t seed,
                     int64_t sample_index) {
  AugmentationSpec det = aug;
  det.uniform_scale = false;
  det.anisotropic_scale = false;
  det.rotate_gravity = false;
  Rng rng = Rng::derive(seed, "eval-view", static_cast<uint64_t>(sample_index));
  if (cloud.size() <= sample_points) {
    return augment(cloud, det, rng);
  }
  PointCloud sampled = fps_resample(cloud, sample_points, rng.next_u64());
  return augment(sampled, det, rng);
}

std::vector<int64_t> epoch_order(int64_t count, uint64_t seed, int64_t epoch) {
  std::vector<int64_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, "shuffle", static_cast<uint64_t>(epoch));
  rng.shuffle(order.begin(), order.end());
  return order;
}

void write_metrics(const json& metrics, const std::string& out_dir) {
  if (out_dir.empty()) return;
  std::ofstream out(fs::path(out_dir) / "metrics.json");
  check<DataError>(out.good(), "cannot write metrics.json in '", out_dir, "'");
  out << metrics.dump(2) << "\n";
}

}  // namespace

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

Checkpoint make_pretrain_checkpoint(const RunConfig& cfg,
                                    PretrainModel& model, AdamW& optimizer,
                                    int64_t step, int64_t epoch) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "pretrain";
  ckpt.metadata["mode"] = to_string(model.mode);
  ckpt.metadata["step"] = step;
  ckpt.metadata["epoch"] = epoch;
  ckpt.metadata["optim_t"] = optimizer.step_count();
  ckpt.metadata["config"] = cfg.to_json();
  ckpt.metadata["rng"] = {{"master_seed", cfg.seed}, {"scheme", "derived"}};
  model.visit_trainable([&ckpt](const std::string& name, Tensor& t) {
    ckpt.add(name, t);
  });
  model.visit_teacher([&ckpt](const std::string& name, Tensor& t) {
    ckpt.add(name, t);
  });
  for (auto& slot : optimizer.slots()) {
    ckpt.add("optim.m." + slot.name, slot.m);
    ckpt.add("optim.v." + slot.name, slot.v);
  }
  return ckpt;
}

namespace {

void copy_tensor_values(const Tensor& src, Tensor& dst,
                        const std::string& name) {
  check<DataError>(src.shape() == dst.shape(), "checkpoint tensor '", name,
                   "' has shape ", shape_string(src.shape()), ", expected ",
                   shape_string(dst.shape()));
  auto d = dst.mutable_values();
  const auto s = src.values();
  std::copy(s.begin(), s.end(), d.begin());
}

void restore_pretrain_state(const Checkpoint& ckpt, PretrainModel& model,
                            AdamW& optimizer) {
  auto require = [&ckpt](const std::string& name, Tensor& t) {
    const Tensor* found = ckpt.find(name);
    check<DataError>(found != nullptr, "checkpoint is missing tensor '", name,
                     "'");
    copy_tensor_values(*found, t, name);
  };
  model.visit_trainable(require);
  model.visit_teacher(require);
  for (auto& slot : optimizer.slots()) {
    require("optim.m." + slot.name, slot.m);
    require("optim.v." + slot.name, slot.v);
  }
  optimizer.set_step_count(ckpt.metadata.at("optim_t").get<int64_t>());
}

}  // namespace

TrunkLoadReport load_trunk_from_checkpoint(const Checkpoint& checkpoint,
                                           PointTrunk& trunk) {
  TrunkLoadReport report;
  trunk.visit("student", [&](const std::string& name, Tensor& t) {
    const Tensor* found = checkpoint.find(name);
    if (found == nullptr) {
      report.missing.push_back(name);
      return;
    }
    copy_tensor_values(*found, t, name);
    ++report.loaded;
  });
  for (const auto& [name, tensor] : checkpoint.tensors) {
    (void)tensor;
    if (name.rfind("decoder.", 0) == 0) {
      report.decoder_present = true;
      break;
    }
  }
  return report;
}

PretrainResult run_pretrain(const RunConfig& cfg, const LoadedDataset& train,
                            const std::string& out_dir,
                            const std::string& resume_from,
                            std::function<void(int64_t, float)> on_step) {
  cfg.validate();
  check<DataError>(train.size() >= 1, "pretrain: empty training set");
  if (cfg.threads > 0) set_num_threads(cfg.threads);

  const int64_t spe = steps_per_epoch(train.size(), cfg.pretrain.batch_size);
  const int64_t total_steps = cfg.pretrain.epochs * spe;
  LrSchedule schedule{.max_lr = cfg.pretrain.lr,
                      .warmup_steps = cfg.pretrain.warmup_epochs * spe,
                      .total_steps = total_steps,
                      .min_lr = cfg.pretrain.min_lr};
  schedule.validate();
  const int64_t ema_warmup_steps = cfg.pretrain.ema.warmup_epochs * spe;

  Rng init_rng = Rng::derive(cfg.seed, "init");
  PretrainModel model = PretrainModel::init(
      cfg.pretrain.mode, cfg.trunk_config(),
      cfg.pretrain.decoder_depth.value_or(0), init_rng);
  AdamW optimizer({.beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8,
                   .weight_decay = cfg.pretrain.weight_decay});
  model.visit_trainable([&optimizer](const std::string& name, Tensor& t) {
    optimizer.add_param(name, t, t.rank() >= 2);
  });

  int64_t start_step = 0;
  if (!resume_from.empty()) {
    const Checkpoint ckpt = checkpoint_load(resume_from);
    check<DataError>(ckpt.metadata.value("kind", "") == "pretrain",
                     "resume: '", resume_from,
                     "' is not a pretraining checkpoint");
    restore_pretrain_state(ckpt, model, optimizer);
    start_step = ckpt.metadata.at("step").get<int64_t>();
  }

  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log.open(fs::path(out_dir) / "log.tsv", std::ios::app);
    check<DataError>(log.good(), "cannot open log.tsv in '", out_dir, "'");
  }

  PretrainResult result;
  std::vector<int64_t> order;
  int64_t order_epoch = -1;
  char line[160];
  for (int64_t step = start_step; step < total_steps; ++step) {
    const int64_t epoch = step / spe;
    const int64_t batch_index = step % spe;
    if (epoch != order_epoch) {
      order = epoch_order(train.size(), cfg.seed, epoch);
      order_epoch = epoch;
    }
    const int64_t lo = batch_index * cfg.pretrain.batch_size;
    const int64_t hi =
        std::min<int64_t>(lo + cfg.pretrain.batch_size, train.size());

    std::vector<PointCloud> views;
    views.reserve(hi - lo);
    std::vector<const PointCloud*> batch;
    batch.reserve(hi - lo);
    for (int64_t i = lo; i < hi; ++i) {
      views.push_back(train_view(train.clouds[order[i]],
                                 cfg.data.sample_points, cfg.pretrain.augment,
                                 cfg.seed, epoch, order[i]));
      batch.push_back(&views.back());
    }

    PretrainStepOptions options;
    options.strategy = cfg.pretrain.mask_strategy;
    options.mask_ratio = cfg.pretrain.mask_ratio;
    options.target_layers = cfg.pretrain.target_layers;
    options.smooth_l1_beta = cfg.pretrain.smooth_l1_beta;
    options.lr = lr_at(schedule, step);
    options.tau = ema_decay_at(step, cfg.pretrain.ema.tau0,
                               cfg.pretrain.ema.tau_end, ema_warmup_steps);
    options.num_centers = cfg.tokenizer.num_centers;
    options.group_size = cfg.tokenizer.group_size;
    options.run_seed = cfg.seed;
    options.step_index = step;

    const float loss = pretrain_step(model, optimizer, batch, options);
    result.losses.push_back(loss);
    if (log.is_open()) {
      std::snprintf(line, sizeof(line), "%lld\t%lld\t%.10g\t%.10g\t%.10g\n",
                    static_cast<long long>(step),
                    static_cast<long long>(epoch), options.lr, options.tau,
                    static_cast<double>(loss));
      log << line;
      log.flush();
    }
    if (on_step) on_step(step, loss);

    const bool epoch_done = (step + 1) % spe == 0;
    if (epoch_done && !out_dir.empty() && cfg.pretrain.save_every_epochs > 0 &&
        (epoch + 1) % cfg.pretrain.save_every_epochs == 0 &&
        step + 1 < total_steps) {
      Checkpoint ckpt =
          make_pretrain_checkpoint(cfg, model, optimizer, step + 1, epoch + 1);
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_epoch%04lld.p2vc",
                    static_cast<long long>(epoch + 1));
      checkpoint_save(ckpt, (fs::path(out_dir) / name).string());
    }
  }
  result.steps = total_steps;

  if (!out_dir.empty()) {
    Checkpoint ckpt = make_pretrain_checkpoint(cfg, model, optimizer,
                                               total_steps,
                                               cfg.pretrain.epochs);
    result.checkpoint_path = (fs::path(out_dir) / "checkpoint.p2vc").string();
    checkpoint_save(ckpt, result.checkpoint_path);
  }
  return result;
}

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

namespace {

struct TokenizedSample {
  PatchSet patches;
  std::vector<Point3> points;       // the resampled cloud (partseg)
  std::vector<int32_t> point_labels;
};

TokenizedSample tokenize_eval_sample(const LoadedDataset& data, int64_t index,
                                     const RunConfig& cfg,
                                     const AugmentationSpec& aug) {
  TokenizedSample out;
  const PointCloud view = eval_view(data.clouds[index], cfg.data.sample_points,
                                    aug, cfg.seed, index);
  Rng tok = Rng::derive(cfg.seed, "eval-tok", static_cast<uint64_t>(index));
  out.patches = tokenize(view, cfg.tokenizer.num_centers,
                         cfg.tokenizer.group_size, tok.next_u64());
  out.points = view.points;
  out.point_labels = view.labels;
  return out;
}

struct FinetuneModel {
  PointTrunk trunk;
  ClassificationHead cls_head;
  PartSegHead seg_head;
  bool is_partseg = false;
  int64_t num_parts = 0;
};

// Classification logits for a batch of tokenized samples.
Tensor classification_logits(const PointTrunk& trunk,
                             const ClassificationHead& head,
                             const std::vector<PatchSet>& batch, bool training,
                             Rng& rng) {
  auto [patch_emb, pos] = embed_patch_batch(trunk, batch);
  const auto layers = trunk.encoder.forward(patch_emb, pos, training, rng);
  Tensor tokens = trunk.final_norm.forward(layers.back());
  return head.forward(tokens, training, rng);
}

// Per-point part logits for one tokenized sample.
Tensor partseg_logits(const PointTrunk& trunk, const PartSegHead& head,
                      const TokenizedSample& sample, int object_class,
                      bool training, Rng& rng) {
  std::vector<PatchSet> one = {sample.patches};
  auto [patch_emb, pos] = embed_patch_batch(trunk, one);
  const auto layers = trunk.encoder.forward(patch_emb, pos, training, rng);
  return partseg_forward(layers, sample.patches.centers, sample.points,
                         object_class, head, training, rng);
}

double eval_classification(const PointTrunk& trunk,
                           const ClassificationHead& head,
                           const std::vector<TokenizedSample>& samples,
                           const std::vector<int>& labels, int64_t batch_size,
                           ConfusionMatrix* confusion, int64_t num_classes) {
  NoGradGuard no_grad;
  Rng rng(0);
  std::vector<int> predictions;
  predictions.reserve(samples.size());
  for (size_t lo = 0; lo < samples.size(); lo += batch_size) {
    const size_t hi = std::min(samples.size(), lo + batch_size);
    std::vector<PatchSet> batch;
    batch.reserve(hi - lo);
    for (size_t i = lo; i < hi; ++i) batch.push_back(samples[i].patches);
    Tensor logits = classification_logits(trunk, head, batch, false, rng);
    const auto v = logits.values();
    const int64_t classes = logits.dim(1);
    for (size_t i = 0; i < hi - lo; ++i) {
      int best = 0;
      for (int64_t c = 1; c < classes; ++c) {
        if (v[i * classes + c] > v[i * classes + best]) {
          best = static_cast<int>(c);
        }
      }
      predictions.push_back(best);
    }
  }
  ConfusionMatrix cm = confusion_matrix(predictions, labels, num_classes);
  if (confusion) *confusion = cm;
  return cm.accuracy();
}

struct PartsegEval {
  double per_point_accuracy = 0.0;
  double miou_i = 0.0;
  double miou_c = 0.0;
};

PartsegEval eval_partseg(const PointTrunk& trunk, const PartSegHead& head,
                         const std::vector<TokenizedSample>& samples,
                         const std::vector<int>& object_classes,
                         int64_t num_parts, int64_t num_object_classes) {
  NoGradGuard no_grad;
  Rng rng(0);
  int64_t correct = 0, total = 0;
  std::vector<double> mious;
  std::vector<std::vector<double>> by_category(num_object_classes);
  for (size_t s = 0; s < samples.size(); ++s) {
    Tensor logits = partseg_logits(trunk, head, samples[s], object_classes[s],
                                   false, rng);
    const auto v = logits.values();
    const int64_t m = logits.dim(0);
    std::vector<int> pred(m);
    for (int64_t i = 0; i < m; ++i) {
      int best = 0;
      for (int64_t c = 1; c < num_parts; ++c) {
        if (v[i * num_parts + c] > v[i * num_parts + best]) {
          best = static_cast<int>(c);
        }
      }
      pred[i] = best;
      correct += pred[i] == samples[s].point_labels[i];
    }
    total += m;
    const double miou =
        instance_miou(pred, samples[s].point_labels, num_parts);
    mious.push_back(miou);
    by_category[object_classes[s]].push_back(miou);
  }
  PartsegEval out;
  out.per_point_accuracy =
      total == 0 ? 0.0 : static_cast<double>(correct) / total;
  out.miou_i = mious.empty()
                   ? 0.0
                   : std::accumulate(mious.begin(), mious.end(), 0.0) /
                         mious.size();
  double cat_sum = 0.0;
  int64_t cat_count = 0;
  for (const auto& cat : by_category) {
    if (cat.empty()) continue;
    cat_sum += std::accumulate(cat.begin(), cat.end(), 0.0) / cat.size();
    ++cat_count;
  }
  out.miou_c = cat_count == 0 ? 0.0 : cat_sum / cat_count;
  return out;
}

}  // namespace

FinetuneResult run_finetune(const RunConfig& cfg, const LoadedDataset& train,
                            const LoadedDataset& test,
                            const FinetuneOptions& options) {
  cfg.validate();
  check<ConfigError>(options.task == "cls" || options.task == "partseg",
                     "finetune: task must be 'cls' or 'partseg'");
  check<DataError>(train.size() >= 1 && test.size() >= 1,
                   "finetune: empty split");
  if (cfg.threads > 0) set_num_threads(cfg.threads);
  const bool partseg = options.task == "partseg";
  if (partseg) {
    for (const auto& cloud : train.clouds) {
      check<DataError>(cloud.has_labels(),
                       "finetune: partseg requires per-point labels");
    }
  }

  const int64_t num_classes = static_cast<int64_t>(train.class_names.size());
  int64_t num_parts = 0;
  if (partseg) {
    for (const auto& cloud : train.clouds) {
      for (const int32_t l : cloud.labels) {
        num_parts = std::max<int64_t>(num_parts, l + 1);
      }
    }
    check<DataError>(num_parts >= 2, "finetune: need at least 2 part labels");
  }

  Rng init_rng = Rng::derive(cfg.seed, "finetune-init");
  FinetuneModel model;
  model.trunk = PointTrunk::init(cfg.trunk_config(), init_rng);
  model.is_partseg = partseg;
  model.num_parts = num_parts;
  if (partseg) {
    model.seg_head = PartSegHead::init(
        cfg.model.dim, cfg.finetune.prop_dim, cfg.finetune.seg_head_hidden,
        num_classes, num_parts, cfg.finetune.head_dropout, init_rng);
    model.seg_head.k_interp = cfg.finetune.prop_k;
    model.seg_head.prop_power = cfg.finetune.prop_power;
    model.seg_head.prop_eps = cfg.finetune.prop_eps;
  } else {
    check<DataError>(num_classes >= 2, "finetune: need at least 2 classes");
    model.cls_head = ClassificationHead::init(
        cfg.model.dim, cfg.finetune.head_hidden, num_classes,
        cfg.finetune.head_dropout, init_rng);
  }

  json load_report = json::object();
  if (!options.checkpoint_path.empty()) {
    const Checkpoint ckpt = checkpoint_load(options.checkpoint_path);
    const TrunkLoadReport report = load_trunk_from_checkpoint(ckpt, model.trunk);
    check<DataError>(report.loaded > 0, "checkpoint '",
                     options.checkpoint_path,
                     "' contains no student trunk tensors");
    load_report["loaded"] = report.loaded;
    load_report["missing"] = report.missing;
    load_report["decoder_present"] = report.decoder_present;
  }

  AdamW optimizer({.beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8,
                   .weight_decay = cfg.finetune.weight_decay});
  model.trunk.visit("trunk", [&optimizer](const std::string& name, Tensor& t) {
    optimizer.add_param(name, t, t.rank() >= 2);
  });
  auto head_visitor = [&optimizer](const std::string& name, Tensor& t) {
    optimizer.add_param(name, t, t.rank() >= 2);
  };
  if (partseg) {
    model.seg_head.visit("head", head_visitor);
  } else {
    model.cls_head.visit("head", head_visitor);
  }

  const int64_t spe = steps_per_epoch(train.size(), cfg.finetune.batch_size);
  const int64_t total_steps = cfg.finetune.epochs * spe;
  LrSchedule schedule{.max_lr = cfg.finetune.lr,
                      .warmup_steps = cfg.finetune.warmup_epochs * spe,
                      .total_steps = total_steps,
                      .min_lr = cfg.finetune.min_lr};
  schedule.validate();

  // Tokenize the test split once; evaluation views are deterministic.
  std::vector<TokenizedSample> test_samples;
  test_samples.reserve(test.size());
  for (int64_t i = 0; i < test.size(); ++i) {
    test_samples.push_back(
        tokenize_eval_sample(test, i, cfg, cfg.finetune.augment));
  }

  FinetuneResult result;
  ConfusionMatrix confusion;
  auto evaluate = [&](ConfusionMatrix* cm) {
    if (partseg) {
      return eval_partseg(model.trunk, model.seg_head, test_samples,
                          test.labels, num_parts, num_classes)
          .per_point_accuracy;
    }
    return eval_classification(model.trunk, model.cls_head, test_samples,
                               test.labels, cfg.finetune.batch_size, cm,
                               num_classes);
  };
  result.initial_metric = evaluate(nullptr);

  std::ofstream log;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    log.open(fs::path(options.out_dir) / "log.tsv", std::ios::app);
  }

  char line[160];
  for (int64_t epoch = 0; epoch < cfg.finetune.epochs; ++epoch) {
    // Encoder freeze window: the trunk is untouched while frozen.
    optimizer.set_active("trunk.", epoch >= cfg.finetune.freeze_epochs);
    const auto order = epoch_order(train.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    int64_t loss_count = 0;
    double lr_used = 0.0;
    for (int64_t b = 0; b < spe; ++b) {
      const int64_t step = epoch * spe + b;
      const int64_t lo = b * cfg.finetune.batch_size;
      const int64_t hi =
          std::min<int64_t>(lo + cfg.finetune.batch_size, train.size());
      const double lr = lr_at(schedule, step);
      lr_used = lr;
      Rng step_rng = Rng::derive(cfg.seed, "ft-step",
                                 static_cast<uint64_t>(step));
      Tensor loss;
      if (partseg) {
        Tensor total;
        std::vector<int> dummy;
        for (int64_t i = lo; i < hi; ++i) {
          const int64_t idx = order[i];
          TokenizedSample sample;
          const PointCloud view =
              train_view(train.clouds[idx], cfg.data.sample_points,
                         cfg.finetune.augment, cfg.seed, epoch, idx);
          Rng tok = Rng::derive(cfg.seed, "ft-tok",
                                static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(idx));
          sample.patches = tokenize(view, cfg.tokenizer.num_centers,
                                    cfg.tokenizer.group_size, tok.next_u64());
          sample.points = view.points;
          sample.point_labels = view.labels;
          Tensor logits = partseg_logits(model.trunk, model.seg_head, sample,
                                         train.labels[idx], true, step_rng);
          std::vector<int> point_labels(sample.point_labels.begin(),
                                        sample.point_labels.end());
          Tensor sample_loss =
              label_smoothing_loss(logits, point_labels, 0.0f);
          total = total.defined() ? add(total, sample_loss) : sample_loss;
        }
        loss = scale(total, 1.0f / static_cast<float>(hi - lo));
      } else {
        std::vector<PatchSet> batch;
        std::vector<int> labels;
        batch.reserve(hi - lo);
        labels.reserve(hi - lo);
        for (int64_t i = lo; i < hi; ++i) {
          const int64_t idx = order[i];
          const PointCloud view =
              train_view(train.clouds[idx], cfg.data.sample_points,
                         cfg.finetune.augment, cfg.seed, epoch, idx);
          Rng tok = Rng::derive(cfg.seed, "ft-tok",
                                static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(idx));
          batch.push_back(tokenize(view, cfg.tokenizer.num_centers,
                                   cfg.tokenizer.group_size, tok.next_u64()));
          labels.push_back(train.labels[idx]);
        }
        Tensor logits = classification_logits(model.trunk, model.cls_head,
                                              batch, true, step_rng);
        loss = label_smoothing_loss(
            logits, labels, static_cast<float>(cfg.finetune.label_smoothing));
      }
      const float loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError(concat("finetune step ", epoch * spe + b,
                                  ": non-finite loss"));
      }
      loss.backward();
      optimizer.step(lr);
      loss_sum += loss_value;
      ++loss_count;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr_used;
    record.train_loss = loss_sum / std::max<int64_t>(1, loss_count);
    if ((epoch + 1) % options.eval_every == 0 ||
        epoch + 1 == cfg.finetune.epochs) {
      record.test_metric = evaluate(nullptr);
    } else {
      record.test_metric =
          result.history.empty() ? result.initial_metric
                                 : result.history.back().test_metric;
    }
    result.history.push_back(record);
    if (log.is_open()) {
      std::snprintf(line, sizeof(line), "%lld\t%.10g\t%.10g\t%.10g\n",
                    static_cast<long long>(epoch), record.lr,
                    record.train_loss, record.test_metric);
      log << line;
      log.flush();
    }
  }

  // Final metrics report.
  json metrics;
  metrics["task"] = options.task;
  metrics["initial_metric"] = result.initial_metric;
  if (!load_report.empty()) metrics["checkpoint_load"] = load_report;
  if (partseg) {
    const PartsegEval eval = eval_partseg(model.trunk, model.seg_head,
                                          test_samples, test.labels,
                                          num_parts, num_classes);
    result.final_metric = eval.per_point_accuracy;
    metrics["per_point_accuracy"] = eval.per_point_accuracy;
    metrics["miou_i"] = eval.miou_i;
    metrics["miou_c"] = eval.miou_c;
  } else {
    result.final_metric = evaluate(&confusion);
    metrics["overall_accuracy"] = result.final_metric;
    json per_class = json::object();
    const auto recall = confusion.per_class_recall();
    const auto precision = confusion.per_class_precision();
    for (int64_t c = 0; c < confusion.num_classes; ++c) {
      per_class[train.class_names[c]] = {{"recall", recall[c]},
                                         {"precision", precision[c]}};
    }
    metrics["per_class"] = per_class;
  }
  result.metrics = metrics;
  write_metrics(metrics, options.out_dir);

  if (!options.out_dir.empty()) {
    Checkpoint ckpt;
    ckpt.metadata["kind"] = partseg ? "finetune_partseg" : "finetune_cls";
    ckpt.metadata["config"] = cfg.to_json();
    ckpt.metadata["num_classes"] = num_classes;
    ckpt.metadata["num_parts"] = num_parts;
    ckpt.metadata["rng"] = {{"master_seed", cfg.seed}, {"scheme", "derived"}};
    model.trunk.visit("trunk", [&ckpt](const std::string& name, Tensor& t) {
      ckpt.add(name, t);
    });
    if (partseg) {
      model.seg_head.visit("head", [&ckpt](const std::string& name, Tensor& t) {
        ckpt.add(name, t);
      });
    } else {
      model.cls_head.visit("head", [&ckpt](const std::string& name, Tensor& t) {
        ckpt.add(name, t);
      });
    }
    checkpoint_save(ckpt,
                    (fs::path(options.out_dir) / "checkpoint.p2vc").string());
  }
  return result;
}

// ---------------------------------------------------------------------------
// few-shot
// ---------------------------------------------------------------------------

FewshotResult run_fewshot(const RunConfig& cfg, const LoadedDataset& dataset,
                          const std::string& checkpoint_path, int64_t way,
                          int64_t shot, int64_t runs, uint64_t seed) {
  check<ConfigError>(runs >= 1, "fewshot: runs must be >= 1");
  FewshotResult result;
  const int64_t num_classes = static_cast<int64_t>(dataset.class_names.size());
  for (int64_t run = 0; run < runs; ++run) {
    Rng rng = Rng::derive(seed, "episode", static_cast<uint64_t>(run));
    const FewShotEpisode episode = sample_fewshot_episode(
        dataset.labels, num_classes, way, shot, rng);

    // Episode datasets with labels remapped to 0..way-1.
    std::vector<int> remap(num_classes, -1);
    LoadedDataset support, query;
    for (int64_t c = 0; c < way; ++c) {
      remap[episode.classes[c]] = static_cast<int>(c);
      support.class_names.push_back(dataset.class_names[episode.classes[c]]);
    }
    query.class_names = support.class_names;
    for (const int64_t idx : episode.support) {
      support.clouds.push_back(dataset.clouds[idx]);
      support.labels.push_back(remap[dataset.labels[idx]]);
    }
    for (const int64_t idx : episode.query) {
      query.clouds.push_back(dataset.clouds[idx]);
      query.labels.push_back(remap[dataset.labels[idx]]);
    }

    RunConfig episode_cfg = cfg;
    episode_cfg.seed = Rng::derive(seed, "episode-seed",
                                   static_cast<uint64_t>(run))
                           .next_u64();
    episode_cfg.finetune.batch_size =
        std::min<int64_t>(episode_cfg.finetune.batch_size, support.size());

    FinetuneOptions options;
    options.task = "cls";
    options.checkpoint_path = checkpoint_path;
    options.eval_every = episode_cfg.finetune.epochs;  // final eval only
    const FinetuneResult ft =
        run_finetune(episode_cfg, support, query, options);
    result.accuracies.push_back(ft.final_metric);
  }
  double mean = 0.0;
  for (const double a : result.accuracies) mean += a;
  mean /= static_cast<double>(result.accuracies.size());
  double var = 0.0;
  for (const double a : result.accuracies) var += (a - mean) * (a - mean);
  var /= static_cast<double>(result.accuracies.size());
  result.mean = mean;
  result.stddev = std::sqrt(var);
  return result;
}

// ---------------------------------------------------------------------------
// masking analysis
// ---------------------------------------------------------------------------

MaskCoverage mask_coverage(const PointCloud& cloud, int64_t num_centers,
                           int64_t group_size, MaskStrategy strategy,
                           double ratio, uint64_t tokenize_seed,
                           uint64_t mask_seed, std::vector<int>* point_tags) {
  const PatchSet set = tokenize(cloud, num_centers, group_size, tokenize_seed);
  Rng rng(mask_seed);
  const MaskLayout layout = generate_mask(set.centers, strategy, ratio, rng);

  std::vector<uint8_t> in_masked(cloud.size(), 0);
  std::vector<uint8_t> in_visible(cloud.size(), 0);
  for (int64_t patch = 0; patch < set.num_patches; ++patch) {
    for (int64_t j = 0; j < group_size; ++j) {
      const int32_t point = set.group_indices[patch * group_size + j];
      if (layout.mask[patch]) {
        in_masked[point] = 1;
      } else {
        in_visible[point] = 1;
      }
    }
  }
  int64_t masked_only = 0, visible_only = 0, both = 0, uncovered = 0;
  if (point_tags) point_tags->assign(cloud.size(), 0);
  for (int64_t i = 0; i < cloud.size(); ++i) {
    int tag;
    if (in_masked[i] && in_visible[i]) {
      ++both;
      tag = 3;
    } else if (in_masked[i]) {
      ++masked_only;
      tag = 2;
    } else if (in_visible[i]) {
      ++visible_only;
      tag = 1;
    } else {
      ++uncovered;
      tag = 0;
    }
    if (point_tags) (*point_tags)[i] = tag;
  }
  const double total = static_cast<double>(cloud.size());
  MaskCoverage coverage;
  coverage.strategy = strategy;
  coverage.ratio = ratio;
  coverage.masked_only = masked_only / total;
  coverage.visible_only = visible_only / total;
  coverage.both = both / total;
  coverage.uncovered = uncovered / total;
  return coverage;
}

}  // namespace p2v
