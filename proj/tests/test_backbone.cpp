#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "p2v/backbone.hpp"
#include "p2v/ops.hpp"

using namespace p2v;
using namespace p2v::testing;

namespace {

EncoderConfig tiny_config(int64_t depth = 3) {
  EncoderConfig cfg;
  cfg.depth = depth;
  cfg.dim = 12;
  cfg.heads = 3;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

std::vector<float> to_vec(const Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

}  // namespace

TEST_CASE("encoder config validation") {
  EncoderConfig bad = tiny_config();
  bad.depth = 0;
  Rng rng(1);
  CHECK_THROWS_AS(Encoder::init(bad, rng), ConfigError);
  bad = tiny_config();
  bad.dim = 13;  // not divisible by heads
  CHECK_THROWS_AS(Encoder::init(bad, rng), ConfigError);
}

TEST_CASE("drop path rates are linearly spaced and nondecreasing") {
  EncoderConfig cfg = tiny_config(5);
  cfg.max_drop_path = 0.2;
  double prev = -1.0;
  for (int64_t b = 0; b < 5; ++b) {
    const double r = cfg.drop_path_rate(b);
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(cfg.drop_path_rate(0) == doctest::Approx(0.0));
  CHECK(cfg.drop_path_rate(4) == doctest::Approx(0.2));
}

TEST_CASE("encoder forward is deterministic at eval time") {
  Rng rng(2);
  auto enc = Encoder::init(tiny_config(), rng);
  Tensor tokens = randn<float>({2, 5, 12}, rng);
  Tensor pos = randn<float>({2, 5, 12}, rng);
  Rng r1(0), r2(0);
  const auto o1 = enc.forward(tokens, pos, false, r1);
  const auto o2 = enc.forward(tokens, pos, false, r2);
  REQUIRE(o1.size() == 3);
  for (size_t l = 0; l < o1.size(); ++l) {
    CHECK(to_vec(o1[l]) == to_vec(o2[l]));
  }
}

TEST_CASE("encoder rejects mismatched token and position shapes") {
  Rng rng(3);
  auto enc = Encoder::init(tiny_config(), rng);
  Tensor tokens = Tensor::zeros({1, 4, 12});
  Tensor pos = Tensor::zeros({1, 5, 12});
  Rng fwd(0);
  CHECK_THROWS_AS(enc.forward(tokens, pos, false, fwd), ShapeError);
}

TEST_CASE("attention on a single token reduces to the value projection") {
  Rng rng(4);
  EncoderConfig cfg = tiny_config(1);
  auto block = TransformerBlockT<float>::init(cfg, 0, rng);
  Tensor x = randn<float>({1, 1, 12}, rng);
  Rng fwd(0);
  Tensor out = multi_head_attention(x, block.qkv, block.proj, cfg.heads, 0.0,
                                    0.0, false, fwd);
  Tensor fused = block.qkv.forward(x);
  Tensor v = slice_last(fused, 24, 12);
  Tensor expect = block.proj.forward(v);
  const auto a = out.values();
  const auto b = expect.values();
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));
  }
}

TEST_CASE("gradcheck: bmm_stable and attention at f64") {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    DTensor a = randn<double>({2, 3, 4}, rng, 1.0, true);
    DTensor b = randn<double>({2, 4, 5}, rng, 1.0, true);
    CHECK(gradcheck([&] { return weighted_sum(bmm_stable(a, b), 44); },
                    {a, b}) < 1e-5);
  }

  Rng rng(11);
  EncoderConfig cfg = tiny_config(1);
  auto block = TransformerBlockT<double>::init(cfg, 0, rng);
  DTensor x = randn<double>({1, 3, 12}, rng, 1.0, true);
  std::vector<DTensor> inputs = {x, block.qkv.weight, block.qkv.bias,
                                 block.proj.weight, block.proj.bias};
  CHECK(gradcheck(
            [&] {
              Rng fwd(0);
              return weighted_sum(
                  multi_head_attention(x, block.qkv, block.proj, cfg.heads,
                                       0.0, 0.0, false, fwd),
                  45);
            },
            inputs) < 1e-4);
}

TEST_CASE("token permutation commutes with the encoder, bitwise") {
  Rng rng(5);
  auto enc = Encoder::init(tiny_config(), rng);
  const int64_t s = 7, e = 12;
  Tensor tokens = randn<float>({1, s, e}, rng);
  Tensor pos = randn<float>({1, s, e}, rng);
  Rng f1(0);
  const auto base = enc.forward(tokens, pos, false, f1);

  const std::vector<int> perm = {3, 0, 6, 1, 5, 2, 4};
  auto permute = [&](const Tensor& t) {
    std::vector<float> out(t.numel());
    const auto v = t.values();
    for (int64_t i = 0; i < s; ++i) {
      for (int64_t j = 0; j < e; ++j) out[i * e + j] = v[perm[i] * e + j];
    }
    return Tensor::from_values({1, s, e}, std::move(out));
  };
  Rng f2(0);
  const auto permuted = enc.forward(permute(tokens), permute(pos), false, f2);
  for (size_t layer = 0; layer < base.size(); ++layer) {
    const auto a = base[layer].values();
    const auto b = permuted[layer].values();
    for (int64_t i = 0; i < s; ++i) {
      for (int64_t j = 0; j < e; ++j) {
        REQUIRE(b[i * e + j] == a[perm[i] * e + j]);
      }
    }
  }
}

TEST_CASE("position embeddings are used, and re-injection matters") {
  Rng rng(6);
  auto enc = Encoder::init(tiny_config(), rng);
  Tensor tokens = randn<float>({1, 5, 12}, rng);
  Tensor pos = randn<float>({1, 5, 12}, rng);
  Tensor zero_pos = Tensor::zeros({1, 5, 12});
  Rng f1(0), f2(0), f3(0);
  const auto with_pos = enc.forward(tokens, pos, false, f1);
  const auto without_pos = enc.forward(tokens, zero_pos, false, f2);
  CHECK(to_vec(with_pos.back()) != to_vec(without_pos.back()));

  // first-block-only injection differs from re-injection before every block
  Tensor first_only = add(tokens, pos);
  const auto single_shot = enc.forward(first_only, zero_pos, false, f3);
  CHECK(to_vec(with_pos.back()) != to_vec(single_shot.back()));
}

TEST_CASE("block outputs stay bounded at init") {
  Rng rng(7);
  EncoderConfig cfg = tiny_config(4);
  auto enc = Encoder::init(cfg, rng);
  Tensor tokens = randn<float>({2, 6, 12}, rng);
  Tensor pos = randn<float>({2, 6, 12}, rng);
  auto norm = [](const Tensor& t) {
    double acc = 0.0;
    for (const float v : t.values()) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
  };
  Rng fwd(0);
  const auto outputs = enc.forward(tokens, pos, false, fwd);
  const double input_norm = norm(tokens);
  for (const auto& layer : outputs) {
    CHECK(norm(layer) < 10.0 * input_norm);
    for (const float v : layer.values()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("trunk wiring validates embedding width against encoder dim") {
  PointTrunk::Config cfg;
  cfg.pointnet.first_mlp = {8, 12};
  cfg.pointnet.second_hidden = {16};
  cfg.pointnet.out_dim = 10;  // != encoder dim
  cfg.encoder = tiny_config();
  Rng rng(8);
  CHECK_THROWS_AS(PointTrunk::init(cfg, rng), ConfigError);
}
