#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "p2v/checkpoint.hpp"
#include "p2v/config.hpp"
#include "p2v/ops.hpp"
#include "p2v/train.hpp"

using namespace p2v;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("p2v_ckpt_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Checkpoint sample_checkpoint() {
  Checkpoint ckpt;
  ckpt.metadata = {{"kind", "pretrain"}, {"step", 17}, {"mode", "point2vec"}};
  Rng rng(3);
  ckpt.add("alpha.weight", randn<float>({4, 3}, rng));
  ckpt.add("alpha.bias", randn<float>({3}, rng));
  ckpt.add("beta", randn<float>({2, 2, 2}, rng));
  return ckpt;
}

}  // namespace

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  TempDir dir;
  const Checkpoint original = sample_checkpoint();
  checkpoint_save(original, dir.file("a.p2vc"));
  const Checkpoint loaded = checkpoint_load(dir.file("a.p2vc"));
  checkpoint_save(loaded, dir.file("b.p2vc"));
  CHECK(read_bytes(dir.file("a.p2vc")) == read_bytes(dir.file("b.p2vc")));

  REQUIRE(loaded.tensors.size() == 3);
  CHECK(loaded.tensors[0].first == "alpha.weight");  // order preserved
  const Tensor* beta = loaded.find("beta");
  REQUIRE(beta != nullptr);
  const Tensor* orig_beta = original.find("beta");
  CHECK(std::vector<float>(beta->values().begin(), beta->values().end()) ==
        std::vector<float>(orig_beta->values().begin(),
                           orig_beta->values().end()));
  CHECK(loaded.metadata.at("step").get<int>() == 17);
}

TEST_CASE("checkpoint rejects duplicates, bad magic, and truncation") {
  TempDir dir;
  Checkpoint ckpt = sample_checkpoint();
  CHECK_THROWS_AS(ckpt.add("beta", Tensor::zeros({1})), ShapeError);

  checkpoint_save(ckpt, dir.file("good.p2vc"));

  // corrupt the magic
  {
    std::string bytes = read_bytes(dir.file("good.p2vc"));
    bytes[0] = 'X';
    std::ofstream out(dir.file("badmagic.p2vc"), std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(checkpoint_load(dir.file("badmagic.p2vc")), DataError);

  // truncate mid-tensor
  {
    std::string bytes = read_bytes(dir.file("good.p2vc"));
    bytes.resize(bytes.size() - 7);
    std::ofstream out(dir.file("trunc.p2vc"), std::ios::binary);
    out << bytes;
  }
  try {
    checkpoint_load(dir.file("trunc.p2vc"));
    FAIL("expected truncation error");
  } catch (const DataError& err) {
    CHECK(std::string(err.what()).find("truncated") != std::string::npos);
  }

  // unsupported version
  {
    std::string bytes = read_bytes(dir.file("good.p2vc"));
    bytes[4] = 9;
    std::ofstream out(dir.file("badver.p2vc"), std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(checkpoint_load(dir.file("badver.p2vc")), DataError);
}

TEST_CASE("cross-mode load: shared weights transfer, decoder absence reported") {
  // a data2vec_pc checkpoint has no decoder tensors; fine-tuning from it
  // still restores the whole student trunk
  RunConfig cfg;
  cfg.model = ModelSection{.dim = 16,
                           .depth = 2,
                           .heads = 2,
                           .mlp_ratio = 2.0,
                           .pointnet_first = {8, 12},
                           .pointnet_second_hidden = {16},
                           .pos_hidden = 8};
  cfg.pretrain.mode = PretrainMode::kData2VecPc;
  cfg.pretrain.decoder_depth.reset();
  cfg.pretrain.target_layers = 2;

  Rng rng(5);
  auto model = PretrainModel::init(PretrainMode::kData2VecPc,
                                   cfg.trunk_config(), 0, rng);
  AdamW opt;
  model.visit_trainable([&opt](const std::string& name, Tensor& t) {
    opt.add_param(name, t, t.rank() >= 2);
  });
  Checkpoint ckpt = make_pretrain_checkpoint(cfg, model, opt, 0, 0);

  PointTrunk trunk = PointTrunk::init(cfg.trunk_config(), rng);
  const TrunkLoadReport report = load_trunk_from_checkpoint(ckpt, trunk);
  CHECK(report.loaded > 0);
  CHECK(report.missing.empty());
  CHECK_FALSE(report.decoder_present);

  // every trunk tensor now matches the checkpointed student
  trunk.visit("student", [&ckpt](const std::string& name, Tensor& t) {
    const Tensor* saved = ckpt.find(name);
    REQUIRE(saved != nullptr);
    CHECK(std::vector<float>(t.values().begin(), t.values().end()) ==
          std::vector<float>(saved->values().begin(), saved->values().end()));
  });

  // a point2vec checkpoint reports its decoder
  RunConfig cfg2 = cfg;
  cfg2.pretrain.mode = PretrainMode::kPoint2Vec;
  cfg2.pretrain.decoder_depth = 1;
  Rng rng2(6);
  auto p2v = PretrainModel::init(PretrainMode::kPoint2Vec, cfg2.trunk_config(),
                                 1, rng2);
  AdamW opt2;
  p2v.visit_trainable([&opt2](const std::string& name, Tensor& t) {
    opt2.add_param(name, t, t.rank() >= 2);
  });
  Checkpoint ckpt2 = make_pretrain_checkpoint(cfg2, p2v, opt2, 0, 0);
  const TrunkLoadReport report2 = load_trunk_from_checkpoint(ckpt2, trunk);
  CHECK(report2.decoder_present);

  // shape mismatches are fatal
  RunConfig wide = cfg;
  wide.model.dim = 32;
  wide.model.pointnet_second_hidden = {16};
  PointTrunk wide_trunk = PointTrunk::init(wide.trunk_config(), rng);
  CHECK_THROWS_AS(load_trunk_from_checkpoint(ckpt, wide_trunk), DataError);
}
