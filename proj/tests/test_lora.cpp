#include "stm/lora.hpp"

#include "helpers.hpp"

#include <doctest.h>

using namespace stm;
using stm::test::TempDir;
using stm::test::random_ckpt;

namespace {

Checkpoint toy_base(Rng& rng) {
  return random_ckpt(rng, {{"attn.wq", {4, 4}},
                           {"ffn.w1", {8, 4}},
                           {"ffn.b1", {8}},
                           {"embed", {16, 4}}});
}

}  // namespace

TEST_SUITE_BEGIN("lora");

TEST_CASE("init targets every rank-2 tensor and starts at zero delta") {
  Rng rng(1);
  Checkpoint base = toy_base(rng);
  LoraAdapter adapter = init_adapter(base, 2, 4.0, /*seed=*/9);

  CHECK(adapter.targets().size() == 3);
  CHECK(adapter.has_target("attn.wq"));
  CHECK(adapter.has_target("ffn.w1"));
  CHECK(adapter.has_target("embed"));
  CHECK(!adapter.has_target("ffn.b1"));

  TaskVector tau = materialize_delta(adapter, base);
  for (const auto& [name, t] : tau.delta) {
    (void)name;
    CHECK(t.flat().isZero(0.0f));
  }
}

TEST_CASE("init is deterministic in the seed") {
  Rng rng(2);
  Checkpoint base = toy_base(rng);
  LoraAdapter a1 = init_adapter(base, 2, 4.0, 123);
  LoraAdapter a2 = init_adapter(base, 2, 4.0, 123);
  LoraAdapter a3 = init_adapter(base, 2, 4.0, 124);
  bool same = true;
  bool differs = false;
  for (const auto& [name, f] : a1.targets()) {
    same = same && (f.a - a2.targets().at(name).a).isZero(0.0);
    differs = differs || !(f.a - a3.targets().at(name).a).isZero(0.0);
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("rank exceeding a target dimension is rejected") {
  Rng rng(3);
  Checkpoint base = toy_base(rng);
  CHECK_THROWS_WITH_AS(init_adapter(base, 5, 4.0, 1),
                       doctest::Contains("attn.wq"), std::invalid_argument);
  // An exclusion list can drop the offending target.
  Checkpoint narrow;
  narrow.insert("wide", Tensor::zeros({8, 8}));
  narrow.insert("tiny", Tensor::zeros({2, 8}));
  LoraAdapter ok = init_adapter(narrow, 4, 8.0, 1, {"tiny"});
  CHECK(ok.targets().size() == 1);
}

TEST_CASE("init requires at least one rank-2 tensor") {
  Checkpoint vectors_only;
  vectors_only.insert("b", Tensor::zeros({4}));
  CHECK_THROWS(init_adapter(vectors_only, 1, 1.0, 0));
}

TEST_CASE("rank-1 outer product delta is forced") {
  Checkpoint base;
  base.insert("w", Tensor::zeros({2, 2}));
  LoraAdapter adapter(1, 1.0);
  RowMatrixXd a(1, 2);
  a << 1, 2;
  RowMatrixXd b(2, 1);
  b << 3, 4;
  adapter.add_target("w", a, b);
  TaskVector tau = materialize_delta(adapter, base);
  auto m = tau.delta.at("w").matrix();
  CHECK(m(0, 0) == 3.0f);
  CHECK(m(0, 1) == 6.0f);
  CHECK(m(1, 0) == 4.0f);
  CHECK(m(1, 1) == 8.0f);
}

TEST_CASE("materialized delta matches a naive triple-loop oracle") {
  Rng rng(17);
  Checkpoint base = random_ckpt(rng, {{"w", {5, 7}}});
  LoraAdapter adapter(2, 3.0);
  RowMatrixXd a(2, 7);
  RowMatrixXd b(5, 2);
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal();
  for (Index i = 0; i < b.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j) b(i, j) = rng.normal();
  adapter.add_target("w", a, b);

  TaskVector tau = materialize_delta(adapter, base);
  const double scale = 3.0 / 2.0;
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 7; ++j) {
      double acc = 0.0;
      for (Index r = 0; r < 2; ++r) acc += b(i, r) * a(r, j);
      CHECK(std::fabs(tau.delta.at("w").matrix()(i, j) - scale * acc) < 1e-6);
    }
  }
}

TEST_CASE("apply_adapter") {
  Rng rng(23);
  Checkpoint base = toy_base(rng);

  SUBCASE("zero adapter returns base bit-exact") {
    LoraAdapter adapter = init_adapter(base, 2, 4.0, 5);
    Checkpoint out = apply_adapter(base, adapter);
    CHECK(out.bit_equal(base));
  }

  SUBCASE("apply then task_vector recovers the materialized delta") {
    LoraAdapter adapter = init_adapter(base, 2, 4.0, 5);
    for (auto& [name, f] : adapter.targets()) {
      (void)name;
      for (Index i = 0; i < f.b.rows(); ++i)
        for (Index j = 0; j < f.b.cols(); ++j) f.b(i, j) = rng.normal(0, 0.1);
    }
    Checkpoint tuned = apply_adapter(base, adapter);
    TaskVector recovered = task_vector(tuned, base);
    TaskVector direct = materialize_delta(adapter, base);
    for (const auto& [name, t] : direct.delta) {
      for (Index i = 0; i < t.size(); ++i) {
        float want = t.flat()[i];
        float got = recovered.delta.at(name).flat()[i];
        float mag = std::max(std::fabs(want),
                             std::fabs(base.at(name).flat()[i]));
        float ulp = std::nextafter(mag, HUGE_VALF) - mag;
        CHECK(std::fabs(got - want) <= ulp);
      }
    }
  }

  SUBCASE("sequential application adds deltas") {
    LoraAdapter a1 = init_adapter(base, 2, 4.0, 5);
    LoraAdapter a2 = init_adapter(base, 2, 4.0, 6);
    for (auto* adapter : {&a1, &a2}) {
      for (auto& [name, f] : adapter->targets()) {
        (void)name;
        for (Index i = 0; i < f.b.rows(); ++i)
          for (Index j = 0; j < f.b.cols(); ++j)
            f.b(i, j) = rng.normal(0, 0.1);
      }
    }
    Checkpoint seq = apply_adapter(apply_adapter(base, a1), a2);
    Checkpoint sum = axpy_scale(
        axpy_scale(base, materialize_delta(a1, base).delta, 1.0),
        materialize_delta(a2, base).delta, 1.0);
    for (const auto& [name, t] : seq) {
      for (Index i = 0; i < t.size(); ++i) {
        CHECK(std::fabs(t.flat()[i] - sum.at(name).flat()[i]) < 1e-6);
      }
    }
  }
}

TEST_CASE("adapter container round trip") {
  TempDir dir("lora_rt");
  Rng rng(31);
  Checkpoint base = toy_base(rng);
  LoraAdapter adapter = init_adapter(base, 2, 4.0, 77);
  for (auto& [name, f] : adapter.targets()) {
    (void)name;
    for (Index i = 0; i < f.b.rows(); ++i)
      for (Index j = 0; j < f.b.cols(); ++j) f.b(i, j) = rng.normal(0, 0.05);
  }
  save_adapter(adapter, dir.file("a.lora"));
  LoraAdapter back = load_adapter(dir.file("a.lora"));
  CHECK(back.rank() == 2);
  CHECK(back.alpha_lora() == 4.0);
  CHECK(back.targets().size() == adapter.targets().size());
  for (const auto& [name, f] : adapter.targets()) {
    // One f32 rounding on save; loaded values must match that rounding exactly.
    CHECK((back.targets().at(name).a.cast<float>() - f.a.cast<float>())
              .isZero(0.0f));
    CHECK((back.targets().at(name).b.cast<float>() - f.b.cast<float>())
              .isZero(0.0f));
  }
}

TEST_SUITE_END();
