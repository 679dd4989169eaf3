#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "p2v/embedding.hpp"
#include "p2v/ops.hpp"

using namespace p2v;
using namespace p2v::testing;

namespace {

MiniPointNetConfig tiny_pointnet() {
  MiniPointNetConfig cfg;
  cfg.first_mlp = {8, 12};
  cfg.second_hidden = {16};
  cfg.out_dim = 10;
  return cfg;
}

}  // namespace

TEST_CASE("mini-pointnet is exactly invariant to within-patch permutation") {
  Rng rng(1);
  auto net = MiniPointNet::init(tiny_pointnet(), rng);
  Tensor patches = randn<float>({3, 6, 3}, rng);
  Tensor base = net.forward(patches);

  // rotate the points of every patch by two slots
  std::vector<float> permuted(patches.numel());
  const auto pv = patches.values();
  for (int p = 0; p < 3; ++p) {
    for (int k = 0; k < 6; ++k) {
      const int src = (k + 2) % 6;
      for (int d = 0; d < 3; ++d) {
        permuted[(p * 6 + k) * 3 + d] = pv[(p * 6 + src) * 3 + d];
      }
    }
  }
  Tensor out = net.forward(Tensor::from_values({3, 6, 3}, std::move(permuted)));
  const auto a = base.values();
  const auto b = out.values();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("duplicating every point of a patch leaves the embedding unchanged") {
  Rng rng(2);
  auto net = MiniPointNet::init(tiny_pointnet(), rng);
  Tensor patches = randn<float>({2, 5, 3}, rng);
  Tensor base = net.forward(patches);

  std::vector<float> doubled(2 * 10 * 3);
  const auto pv = patches.values();
  for (int p = 0; p < 2; ++p) {
    for (int k = 0; k < 10; ++k) {
      for (int d = 0; d < 3; ++d) {
        doubled[(p * 10 + k) * 3 + d] = pv[(p * 5 + k % 5) * 3 + d];
      }
    }
  }
  Tensor out = net.forward(Tensor::from_values({2, 10, 3}, std::move(doubled)));
  const auto a = base.values();
  const auto b = out.values();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("patch embeddings carry no positional information") {
  // Dyadic coordinates make the translate-then-normalize round trip exact,
  // so the premise (identical normalized patches) holds bitwise.
  Rng rng(3);
  auto net = MiniPointNet::init(tiny_pointnet(), rng);
  std::vector<float> pts = {0.25f, 0.5f,  -0.75f, 1.25f, -0.5f, 0.0f,
                            0.75f, 0.25f, 0.5f};
  const float shift = 17.5f;
  std::vector<float> shifted = pts;
  // normalized patch = point - center; translating both by the same dyadic
  // constant reproduces the identical difference
  for (size_t i = 0; i < pts.size(); ++i) shifted[i] = pts[i];

  Tensor a = net.forward(Tensor::from_values({1, 3, 3}, std::move(pts)));
  std::vector<float> renorm(9);
  for (int k = 0; k < 3; ++k) {
    for (int d = 0; d < 3; ++d) {
      const float original = shifted[k * 3 + d];
      renorm[k * 3 + d] = (original + shift) - shift;
    }
  }
  Tensor b = net.forward(Tensor::from_values({1, 3, 3}, std::move(renorm)));
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) CHECK(av[i] == bv[i]);
}

TEST_CASE("embedding output is finite and non-degenerate at init") {
  Rng rng(4);
  auto net = MiniPointNet::init(tiny_pointnet(), rng);
  Tensor patches = randn<float>({4, 8, 3}, rng);
  Tensor out = net.forward(patches);
  double norm = 0.0;
  for (const float v : out.values()) {
    CHECK(std::isfinite(v));
    norm += static_cast<double>(v) * v;
  }
  CHECK(norm > 0.0);
}

TEST_CASE("gradcheck: mini-pointnet w.r.t. coordinates and parameters") {
  Rng rng(5);
  MiniPointNetConfig cfg = tiny_pointnet();
  auto net = MiniPointNetT<double>::init(cfg, rng);
  DTensor patches = randn<double>({2, 4, 3}, rng, 1.0, true);
  std::vector<DTensor> inputs = {patches};
  net.visit("net", [&inputs](const std::string&, DTensor& t) {
    inputs.push_back(t);
  });
  CHECK(gradcheck([&] { return weighted_sum(net.forward(patches), 31); },
                  inputs) < 1e-4);
}

TEST_CASE("positional encoder basics") {
  Rng rng(6);
  auto enc = PosEncoder::init(8, 10, rng);

  SUBCASE("identical centers give identical embeddings") {
    Tensor centers =
        Tensor::from_values({2, 3}, {0.1f, -0.2f, 0.7f, 0.1f, -0.2f, 0.7f});
    Tensor out = enc.forward(centers);
    const auto v = out.values();
    for (int j = 0; j < 10; ++j) CHECK(v[j] == v[10 + j]);
  }

  SUBCASE("zero weights reduce to the bias") {
    for (auto* layer : {&enc.fc1, &enc.fc2}) {
      auto w = layer->weight.mutable_values();
      std::fill(w.begin(), w.end(), 0.0f);
    }
    auto b2 = enc.fc2.bias.mutable_values();
    for (size_t i = 0; i < b2.size(); ++i) b2[i] = static_cast<float>(i);
    Tensor out = enc.forward(Tensor::from_values({1, 3}, {5.f, 6.f, 7.f}));
    const auto v = out.values();
    // fc1 output is the zero bias, gelu(0) = 0, so fc2 passes its bias
    for (int j = 0; j < 10; ++j) {
      CHECK(v[j] == doctest::Approx(static_cast<float>(j)));
    }
  }

  SUBCASE("gradient check") {
    auto denc = PosEncoderT<double>::init(8, 10, rng);
    DTensor centers = randn<double>({5, 3}, rng, 1.0, true);
    std::vector<DTensor> inputs = {centers};
    denc.visit("pos", [&inputs](const std::string&, DTensor& t) {
      inputs.push_back(t);
    });
    CHECK(gradcheck([&] { return weighted_sum(denc.forward(centers), 33); },
                    inputs) < 1e-5);
  }
}
