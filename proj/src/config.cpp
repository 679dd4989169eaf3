#include "p2v/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "p2v/common.hpp"

namespace p2v {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& path,
                const std::set<std::string>& allowed) {
  check<ConfigError>(obj.is_object(), "config: '", path,
                     "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError(concat("config: unknown key '",
                               path.empty() ? key : path + "." + key, "'"));
    }
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(concat("config: bad value for '", key, "'"));
  }
}

AugmentationSpec parse_augment(const json& obj, const std::string& path,
                               const AugmentationSpec& defaults) {
  check_keys(obj, path,
             {"uniform_scale", "scale_lo", "scale_hi", "anisotropic_scale",
              "anisotropic_fraction", "rotate_gravity", "gravity_axis",
              "center_unit_sphere"});
  AugmentationSpec spec = defaults;
  spec.uniform_scale = get_or(obj, "uniform_scale", spec.uniform_scale);
  spec.scale_lo = get_or(obj, "scale_lo", spec.scale_lo);
  spec.scale_hi = get_or(obj, "scale_hi", spec.scale_hi);
  spec.anisotropic_scale =
      get_or(obj, "anisotropic_scale", spec.anisotropic_scale);
  spec.anisotropic_fraction =
      get_or(obj, "anisotropic_fraction", spec.anisotropic_fraction);
  spec.rotate_gravity = get_or(obj, "rotate_gravity", spec.rotate_gravity);
  spec.gravity_axis = get_or(obj, "gravity_axis", spec.gravity_axis);
  spec.center_unit_sphere =
      get_or(obj, "center_unit_sphere", spec.center_unit_sphere);
  spec.validate();
  return spec;
}

json augment_to_json(const AugmentationSpec& spec) {
  return {{"uniform_scale", spec.uniform_scale},
          {"scale_lo", spec.scale_lo},
          {"scale_hi", spec.scale_hi},
          {"anisotropic_scale", spec.anisotropic_scale},
          {"anisotropic_fraction", spec.anisotropic_fraction},
          {"rotate_gravity", spec.rotate_gravity},
          {"gravity_axis", spec.gravity_axis},
          {"center_unit_sphere", spec.center_unit_sphere}};
}

}  // namespace

PointTrunk::Config RunConfig::trunk_config() const {
  PointTrunk::Config cfg;
  cfg.pointnet.first_mlp = model.pointnet_first;
  cfg.pointnet.second_hidden = model.pointnet_second_hidden;
  cfg.pointnet.out_dim = model.dim;
  cfg.pos_hidden = model.pos_hidden;
  cfg.encoder.depth = model.depth;
  cfg.encoder.dim = model.dim;
  cfg.encoder.heads = model.heads;
  cfg.encoder.mlp_ratio = model.mlp_ratio;
  cfg.encoder.max_drop_path = model.max_drop_path;
  cfg.encoder.attn_dropout = model.attn_dropout;
  cfg.encoder.proj_dropout = model.proj_dropout;
  cfg.encoder.qkv_bias = model.qkv_bias;
  return cfg;
}

void RunConfig::validate() const {
  trunk_config().validate();
  check<ConfigError>(tokenizer.num_centers >= 2 && tokenizer.group_size >= 1,
                     "config: tokenizer needs >= 2 centers and >= 1 neighbors");
  check<ConfigError>(data.sample_points >= tokenizer.num_centers,
                     "config: sample_points must cover the center count");
  check<ConfigError>(pretrain.epochs >= 1 && pretrain.batch_size >= 1,
                     "config: bad pretrain schedule");
  check<ConfigError>(pretrain.mask_ratio > 0.0 && pretrain.mask_ratio < 1.0,
                     "config: mask ratio must be in (0, 1)");
  check<ConfigError>(pretrain.target_layers >= 1 &&
                         pretrain.target_layers <= model.depth,
                     "config: target_layers must be in [1, depth]");
  check<ConfigError>(pretrain.smooth_l1_beta > 0.0,
                     "config: smooth_l1_beta must be positive");
  if (pretrain.mode == PretrainMode::kPoint2Vec) {
    check<ConfigError>(pretrain.decoder_depth.has_value() &&
                           *pretrain.decoder_depth >= 1,
                       "config: point2vec mode requires decoder_depth >= 1");
  } else {
    check<ConfigError>(!pretrain.decoder_depth.has_value(),
                       "config: mode data2vec_pc does not accept decoder keys");
  }
  check<ConfigError>(finetune.epochs >= 1 && finetune.batch_size >= 1,
                     "config: bad finetune schedule");
  check<ConfigError>(finetune.freeze_epochs >= 0,
                     "config: negative freeze_epochs");
  check<ConfigError>(
      finetune.label_smoothing >= 0.0 && finetune.label_smoothing < 1.0,
      "config: label smoothing must be in [0, 1)");
  pretrain.augment.validate();
  finetune.augment.validate();
  if (data.synthetic) {
    check<ConfigError>(data.synthetic->kind == "classification" ||
                           data.synthetic->kind == "partseg",
                       "config: synthetic kind must be 'classification' or "
                       "'partseg'");
  }
}

RunConfig RunConfig::from_json(const json& doc) {
  check_keys(doc, "",
             {"seed", "threads", "data", "tokenizer", "model", "pretrain",
              "finetune"});
  RunConfig cfg;
  cfg.seed = get_or<uint64_t>(doc, "seed", cfg.seed);
  cfg.threads = get_or<int>(doc, "threads", cfg.threads);

  if (doc.contains("data")) {
    const json& d = doc.at("data");
    check_keys(d, "data", {"manifest", "synthetic", "sample_points"});
    cfg.data.manifest = get_or<std::string>(d, "manifest", "");
    cfg.data.sample_points =
        get_or<int64_t>(d, "sample_points", cfg.data.sample_points);
    if (d.contains("synthetic")) {
      const json& s = d.at("synthetic");
      check_keys(s, "data.synthetic",
                 {"kind", "train_per_class", "test_per_class", "points",
                  "noise_sigma", "seed"});
      SyntheticDataConfig syn;
      syn.kind = get_or<std::string>(s, "kind", syn.kind);
      syn.train_per_class =
          get_or<int64_t>(s, "train_per_class", syn.train_per_class);
      syn.test_per_class =
          get_or<int64_t>(s, "test_per_class", syn.test_per_class);
      syn.points = get_or<int64_t>(s, "points", syn.points);
      syn.noise_sigma = get_or<double>(s, "noise_sigma", syn.noise_sigma);
      syn.seed = get_or<uint64_t>(s, "seed", syn.seed);
      cfg.data.synthetic = syn;
    }
  }

  if (doc.contains("tokenizer")) {
    const json& t = doc.at("tokenizer");
    check_keys(t, "tokenizer", {"num_centers", "group_size"});
    cfg.tokenizer.num_centers =
        get_or<int64_t>(t, "num_centers", cfg.tokenizer.num_centers);
    cfg.tokenizer.group_size =
        get_or<int64_t>(t, "group_size", cfg.tokenizer.group_size);
  }

  if (doc.contains("model")) {
    const json& m = doc.at("model");
    check_keys(m, "model",
               {"dim", "depth", "heads", "mlp_ratio", "max_drop_path",
                "attn_dropout", "proj_dropout", "qkv_bias", "pointnet_first",
                "pointnet_second_hidden", "pos_hidden"});
    ModelSection& ms = cfg.model;
    ms.dim = get_or<int64_t>(m, "dim", ms.dim);
    ms.depth = get_or<int64_t>(m, "depth", ms.depth);
    ms.heads = get_or<int64_t>(m, "heads", ms.heads);
    ms.mlp_ratio = get_or<double>(m, "mlp_ratio", ms.mlp_ratio);
    ms.max_drop_path = get_or<double>(m, "max_drop_path", ms.max_drop_path);
    ms.attn_dropout = get_or<double>(m, "attn_dropout", ms.attn_dropout);
    ms.proj_dropout = get_or<double>(m, "proj_dropout", ms.proj_dropout);
    ms.qkv_bias = get_or<bool>(m, "qkv_bias", ms.qkv_bias);
    ms.pointnet_first =
        get_or<std::vector<int64_t>>(m, "pointnet_first", ms.pointnet_first);
    ms.pointnet_second_hidden = get_or<std::vector<int64_t>>(
        m, "pointnet_second_hidden", ms.pointnet_second_hidden);
    ms.pos_hidden = get_or<int64_t>(m, "pos_hidden", ms.pos_hidden);
  }

  cfg.pretrain.target_layers =
      std::min<int64_t>(cfg.pretrain.target_layers, cfg.model.depth);
  if (doc.contains("pretrain")) {
    const json& p = doc.at("pretrain");
    check_keys(p, "pretrain",
               {"mode", "epochs", "batch_size", "lr", "weight_decay",
                "min_lr", "warmup_epochs", "mask_strategy", "mask_ratio",
                "target_layers", "smooth_l1_beta", "decoder_depth", "ema",
                "save_every_epochs", "augment"});
    PretrainSection& ps = cfg.pretrain;
    ps.mode = pretrain_mode_from_string(
        get_or<std::string>(p, "mode", to_string(ps.mode)));
    ps.epochs = get_or<int64_t>(p, "epochs", ps.epochs);
    ps.batch_size = get_or<int64_t>(p, "batch_size", ps.batch_size);
    ps.lr = get_or<double>(p, "lr", ps.lr);
    ps.weight_decay = get_or<double>(p, "weight_decay", ps.weight_decay);
    ps.min_lr = get_or<double>(p, "min_lr", ps.min_lr);
    ps.warmup_epochs = get_or<int64_t>(p, "warmup_epochs", ps.warmup_epochs);
    ps.mask_strategy = mask_strategy_from_string(
        get_or<std::string>(p, "mask_strategy", to_string(ps.mask_strategy)));
    ps.mask_ratio = get_or<double>(p, "mask_ratio", ps.mask_ratio);
    ps.target_layers = get_or<int64_t>(p, "target_layers", ps.target_layers);
    ps.smooth_l1_beta = get_or<double>(p, "smooth_l1_beta", ps.smooth_l1_beta);
    if (p.contains("decoder_depth")) {
      ps.decoder_depth = p.at("decoder_depth").get<int64_t>();
    } else if (ps.mode == PretrainMode::kData2VecPc) {
      ps.decoder_depth.reset();
    }
    if (ps.mode == PretrainMode::kData2VecPc && p.contains("decoder_depth")) {
      throw ConfigError(
          "config: mode data2vec_pc rejects the decoder_depth key");
    }
    if (p.contains("ema")) {
      const json& e = p.at("ema");
      check_keys(e, "pretrain.ema", {"tau0", "tau_end", "warmup_epochs"});
      ps.ema.tau0 = get_or<double>(e, "tau0", ps.ema.tau0);
      ps.ema.tau_end = get_or<double>(e, "tau_end", ps.ema.tau_end);
      ps.ema.warmup_epochs =
          get_or<int64_t>(e, "warmup_epochs", ps.ema.warmup_epochs);
    }
    ps.save_every_epochs =
        get_or<int64_t>(p, "save_every_epochs", ps.save_every_epochs);
    if (p.contains("augment")) {
      ps.augment = parse_augment(p.at("augment"), "pretrain.augment",
                                 ps.augment);
    }
  }

  if (doc.contains("finetune")) {
    const json& f = doc.at("finetune");
    check_keys(f, "finetune",
               {"epochs", "batch_size", "lr", "weight_decay", "min_lr",
                "warmup_epochs", "freeze_epochs", "label_smoothing",
                "head_hidden", "head_dropout", "seg_head_hidden", "prop_dim",
                "prop_k", "prop_power", "prop_eps", "augment"});
    FinetuneSection& fs = cfg.finetune;
    fs.epochs = get_or<int64_t>(f, "epochs", fs.epochs);
    fs.batch_size = get_or<int64_t>(f, "batch_size", fs.batch_size);
    fs.lr = get_or<double>(f, "lr", fs.lr);
    fs.weight_decay = get_or<double>(f, "weight_decay", fs.weight_decay);
    fs.min_lr = get_or<double>(f, "min_lr", fs.min_lr);
    fs.warmup_epochs = get_or<int64_t>(f, "warmup_epochs", fs.warmup_epochs);
    fs.freeze_epochs = get_or<int64_t>(f, "freeze_epochs", fs.freeze_epochs);
    fs.label_smoothing =
        get_or<double>(f, "label_smoothing", fs.label_smoothing);
    fs.head_hidden =
        get_or<std::vector<int64_t>>(f, "head_hidden", fs.head_hidden);
    fs.head_dropout = get_or<double>(f, "head_dropout", fs.head_dropout);
    fs.seg_head_hidden =
        get_or<std::vector<int64_t>>(f, "seg_head_hidden", fs.seg_head_hidden);
    fs.prop_dim = get_or<int64_t>(f, "prop_dim", fs.prop_dim);
    fs.prop_k = get_or<int64_t>(f, "prop_k", fs.prop_k);
    fs.prop_power = get_or<double>(f, "prop_power", fs.prop_power);
    fs.prop_eps = get_or<double>(f, "prop_eps", fs.prop_eps);
    if (f.contains("augment")) {
      fs.augment = parse_augment(f.at("augment"), "finetune.augment",
                                 fs.augment);
    }
  }

  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  check<ConfigError>(in.good(), "cannot open config '", path, "'");
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& err) {
    throw ConfigError(concat("config '", path, "': ", err.what()));
  }
  try {
    return from_json(doc);
  } catch (const ConfigError& err) {
    throw ConfigError(concat(path, ": ", err.what()));
  }
}

json RunConfig::to_json() const {
  json doc;
  doc["seed"] = seed;
  doc["threads"] = threads;
  doc["data"] = {{"manifest", data.manifest},
                 {"sample_points", data.sample_points}};
  if (data.synthetic) {
    doc["data"]["synthetic"] = {
        {"kind", data.synthetic->kind},
        {"train_per_class", data.synthetic->train_per_class},
        {"test_per_class", data.synthetic->test_per_class},
        {"points", data.synthetic->points},
        {"noise_sigma", data.synthetic->noise_sigma},
        {"seed", data.synthetic->seed}};
  }
  doc["tokenizer"] = {{"num_centers", tokenizer.num_centers},
                      {"group_size", tokenizer.group_size}};
  doc["model"] = {{"dim", model.dim},
                  {"depth", model.depth},
                  {"heads", model.heads},
                  {"mlp_ratio", model.mlp_ratio},
                  {"max_drop_path", model.max_drop_path},
                  {"attn_dropout", model.attn_dropout},
                  {"proj_dropout", model.proj_dropout},
                  {"qkv_bias", model.qkv_bias},
                  {"pointnet_first", model.pointnet_first},
                  {"pointnet_second_hidden", model.pointnet_second_hidden},
                  {"pos_hidden", model.pos_hidden}};
  doc["pretrain"] = {{"mode", to_string(pretrain.mode)},
                     {"epochs", pretrain.epochs},
                     {"batch_size", pretrain.batch_size},
                     {"lr", pretrain.lr},
                     {"weight_decay", pretrain.weight_decay},
                     {"min_lr", pretrain.min_lr},
                     {"warmup_epochs", pretrain.warmup_epochs},
                     {"mask_strategy", to_string(pretrain.mask_strategy)},
                     {"mask_ratio", pretrain.mask_ratio},
                     {"target_layers", pretrain.target_layers},
                     {"smooth_l1_beta", pretrain.smooth_l1_beta},
                     {"ema",
                      {{"tau0", pretrain.ema.tau0},
                       {"tau_end", pretrain.ema.tau_end},
                       {"warmup_epochs", pretrain.ema.warmup_epochs}}},
                     {"save_every_epochs", pretrain.save_every_epochs},
                     {"augment", augment_to_json(pretrain.augment)}};
  if (pretrain.decoder_depth) {
    doc["pretrain"]["decoder_depth"] = *pretrain.decoder_depth;
  }
  doc["finetune"] = {{"epochs", finetune.epochs},
                     {"batch_size", finetune.batch_size},
                     {"lr", finetune.lr},
                     {"weight_decay", finetune.weight_decay},
                     {"min_lr", finetune.min_lr},
                     {"warmup_epochs", finetune.warmup_epochs},
                     {"freeze_epochs", finetune.freeze_epochs},
                     {"label_smoothing", finetune.label_smoothing},
                     {"head_hidden", finetune.head_hidden},
                     {"head_dropout", finetune.head_dropout},
                     {"seg_head_hidden", finetune.seg_head_hidden},
                     {"prop_dim", finetune.prop_dim},
                     {"prop_k", finetune.prop_k},
                     {"prop_power", finetune.prop_power},
                     {"prop_eps", finetune.prop_eps},
                     {"augment", augment_to_json(finetune.augment)}};
  return doc;
}

}  // namespace p2v
