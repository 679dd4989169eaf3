#include <doctest.h>

#include <cmath>

#include "p2v/ops.hpp"
#include "p2v/optim.hpp"

using namespace p2v;

TEST_CASE("lr schedule endpoints and continuity") {
  LrSchedule s{.max_lr = 1e-3, .warmup_steps = 100, .total_steps = 1000,
               .min_lr = 0.0};
  CHECK(lr_at(s, 0) == doctest::Approx(0.0));
  CHECK(lr_at(s, 100) == doctest::Approx(1e-3));
  CHECK(lr_at(s, 1000) == doctest::Approx(0.0));
  // continuity at the warm-up boundary
  CHECK(lr_at(s, 99) == doctest::Approx(lr_at(s, 100)).epsilon(0.02));
  // halfway through decay: midpoint of the cosine
  CHECK(lr_at(s, 550) == doctest::Approx(0.5e-3));
  CHECK_THROWS_AS(lr_at(s, 1001), ConfigError);
  CHECK_THROWS_AS(lr_at(s, -1), ConfigError);

  LrSchedule bad{.max_lr = 1e-3, .warmup_steps = 10, .total_steps = 5,
                 .min_lr = 0.0};
  CHECK_THROWS_AS(lr_at(bad, 0), ConfigError);
}

TEST_CASE("lr schedule respects a nonzero floor") {
  LrSchedule s{.max_lr = 1.0, .warmup_steps = 0, .total_steps = 10,
               .min_lr = 0.25};
  CHECK(lr_at(s, 0) == doctest::Approx(1.0));
  CHECK(lr_at(s, 10) == doctest::Approx(0.25));
}

TEST_CASE("adamw decay-only update on zero gradient") {
  Tensor w = Tensor::from_values({1}, {1.0f}, true);
  AdamW opt({.beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.05});
  opt.add_param("w", w);
  w.ensure_grad();  // zero gradient
  opt.step(0.1);
  CHECK(w.values()[0] == doctest::Approx(0.995f));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("adamw moves against the gradient") {
  Tensor w = Tensor::from_values({1}, {1.0f}, true);
  AdamW opt({.weight_decay = 0.0});
  opt.add_param("w", w);
  w.mutable_grad()[0] = 1.0f;
  opt.step(0.01);
  CHECK(w.values()[0] < 1.0f);
}

TEST_CASE("adamw converges on a quadratic") {
  Tensor w = Tensor::from_values({1}, {0.0f}, true);
  AdamW opt({.weight_decay = 0.0});
  opt.add_param("w", w);
  for (int i = 0; i < 200; ++i) {
    Tensor diff = sub(w, Tensor::from_values({1}, {3.0f}));
    Tensor loss = sum_all(mul(diff, diff));
    loss.backward();
    opt.step(0.1);
  }
  CHECK(std::abs(w.values()[0] - 3.0f) < 1e-2);
}

TEST_CASE("adamw names the parameter on a non-finite gradient") {
  Tensor w = Tensor::from_values({1}, {1.0f}, true);
  AdamW opt;
  opt.add_param("trunk.fc1.weight", w);
  w.mutable_grad()[0] = NAN;
  try {
    opt.step(0.01);
    FAIL("expected NumericError");
  } catch (const NumericError& err) {
    CHECK(std::string(err.what()).find("trunk.fc1.weight") !=
          std::string::npos);
  }
}

TEST_CASE("inactive parameters stay bit-identical") {
  Tensor w = Tensor::from_values({2}, {1.0f, -2.0f}, true);
  Tensor h = Tensor::from_values({1}, {0.5f}, true);
  AdamW opt;
  opt.add_param("encoder.w", w);
  opt.add_param("head.h", h);
  opt.set_active("encoder.", false);
  w.mutable_grad()[0] = 1.0f;
  w.mutable_grad()[1] = 1.0f;
  h.mutable_grad()[0] = 1.0f;
  opt.step(0.01);
  CHECK(w.values()[0] == 1.0f);
  CHECK(w.values()[1] == -2.0f);
  CHECK(h.values()[0] != 0.5f);
  opt.set_active("encoder.", true);
  opt.step(0.01);
  CHECK(w.values()[0] != 1.0f);
}

TEST_CASE("no-decay slots skip the decay term") {
  Tensor w = Tensor::from_values({1}, {1.0f}, true);
  AdamW opt({.weight_decay = 0.05});
  opt.add_param("norm.gamma", w, /*decay=*/false);
  w.ensure_grad();
  opt.step(0.1);
  CHECK(w.values()[0] == 1.0f);
}
