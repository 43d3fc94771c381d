#include "stm/tensor_store.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <fstream>

using namespace stm;
using stm::test::TempDir;
using stm::test::make_ckpt;
using stm::test::random_ckpt;

TEST_SUITE_BEGIN("tensor_store");

TEST_CASE("tensor shape validation") {
  Eigen::VectorXf v(4);
  v << 1, 2, 3, 4;
  CHECK_THROWS(Tensor({2, 3}, v));
  CHECK_THROWS(Tensor({}, v));
  CHECK_THROWS(Tensor({2, 2, 1}, v));
  CHECK_THROWS(Tensor({-2, -2}, v));
  Tensor t({2, 2}, v);
  CHECK(t.rank() == 2);
  CHECK(t.matrix()(1, 0) == 3.0f);
}

TEST_CASE("duplicate and reserved names rejected at construction") {
  Checkpoint c;
  c.insert("w", Tensor::zeros({2}));
  CHECK_THROWS(c.insert("w", Tensor::zeros({2})));
  CHECK_THROWS(c.insert("", Tensor::zeros({2})));
  CHECK_THROWS(c.insert("__meta__", Tensor::zeros({2})));
}

TEST_CASE("empty checkpoint round-trips") {
  TempDir dir("ts_empty");
  Checkpoint empty;
  save_checkpoint(empty, dir.file("empty.ckpt"));
  Checkpoint back = load_checkpoint(dir.file("empty.ckpt"));
  CHECK(back.empty());
  CHECK(back.bit_equal(empty));

  // Header-length prefix is the first 8 bytes.
  std::ifstream in(dir.file("empty.ckpt"), std::ios::binary);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  CHECK(header_len > 0);
}

TEST_CASE("round-trip is bit-exact") {
  TempDir dir("ts_rt");
  Rng rng(42);
  Checkpoint c = random_ckpt(rng, {{"w", {2, 2}}, {"b", {3}}, {"z.q", {4, 1}}});
  c.meta()["model_id"] = "toy";
  c.meta()["seed"] = "42";
  save_checkpoint(c, dir.file("c.ckpt"));
  Checkpoint back = load_checkpoint(dir.file("c.ckpt"));
  CHECK(back.bit_equal(c));
  CHECK(back.meta() == c.meta());
}

TEST_CASE("serialization is deterministic byte for byte") {
  TempDir dir("ts_det");
  Rng rng(7);
  Checkpoint c = random_ckpt(rng, {{"alpha", {3, 2}}, {"beta", {5}}});
  save_checkpoint(c, dir.file("a.ckpt"));
  save_checkpoint(c, dir.file("b.ckpt"));
  std::ifstream a(dir.file("a.ckpt"), std::ios::binary);
  std::ifstream b(dir.file("b.ckpt"), std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(!sa.empty());
}

TEST_CASE("non-finite values rejected at save and load") {
  TempDir dir("ts_nan");
  Checkpoint c;
  Eigen::VectorXf v(2);
  v << 1.0f, std::numeric_limits<float>::quiet_NaN();
  c.insert("w", Tensor::from_vector(v));
  CHECK_THROWS_WITH_AS(save_checkpoint(c, dir.file("nan.ckpt")),
                       doctest::Contains("w"), std::runtime_error);

  // Write a valid file, then corrupt the payload with a NaN.
  Checkpoint ok = make_ckpt({{"w", {1.0f, 2.0f}}});
  save_checkpoint(ok, dir.file("ok.ckpt"));
  std::fstream f(dir.file("ok.ckpt"),
                 std::ios::binary | std::ios::in | std::ios::out);
  std::uint64_t header_len = 0;
  f.read(reinterpret_cast<char*>(&header_len), 8);
  f.seekp(static_cast<std::streamoff>(8 + header_len), std::ios::beg);
  const std::uint32_t nan_bits = 0x7fc00000u;
  f.write(reinterpret_cast<const char*>(&nan_bits), 4);
  f.close();
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("ok.ckpt")),
                       doctest::Contains("NaN"), std::runtime_error);
}

TEST_CASE("truncated payload errors name the offending tensor") {
  TempDir dir("ts_trunc");
  Checkpoint c = make_ckpt({{"weights.first", {1, 2, 3, 4}}});
  save_checkpoint(c, dir.file("t.ckpt"));
  auto full = std::filesystem::file_size(dir.file("t.ckpt"));
  std::filesystem::resize_file(dir.file("t.ckpt"), full - 6);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("t.ckpt")),
                       doctest::Contains("weights.first"), std::runtime_error);
}

TEST_CASE("length mismatch between declared shape and payload bytes") {
  TempDir dir("ts_len");
  // Hand-built file: header says shape [2,3] (24 bytes) but only 20 bytes of
  // payload are declared via offsets.
  std::string header =
      R"({"__meta__":{},"w":{"dtype":"f32","shape":[2,3],"offset_begin":0,"offset_end":20}})";
  std::uint64_t header_len = header.size();
  std::ofstream out(dir.file("bad.ckpt"), std::ios::binary);
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<char> payload(20, 0);
  out.write(payload.data(), 20);
  out.close();
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("bad.ckpt")),
                       doctest::Contains("mismatch"), std::runtime_error);
}

TEST_CASE("malformed header is rejected") {
  TempDir dir("ts_hdr");
  std::ofstream out(dir.file("junk.ckpt"), std::ios::binary);
  std::uint64_t header_len = 1u << 20;  // longer than the file
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write("xx", 2);
  out.close();
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("junk.ckpt")),
                       doctest::Contains("header"), std::runtime_error);
  CHECK_THROWS(load_checkpoint(dir.file("missing.ckpt")));
}

TEST_CASE("assert_compatible verdicts") {
  Checkpoint a = make_ckpt({{"w", {1, 2}}});
  Checkpoint b = make_ckpt({{"w", {5, 6}}});
  CHECK_NOTHROW(assert_compatible({&a, &a}));
  CHECK_NOTHROW(assert_compatible(a, b));

  Checkpoint wrong_shape = make_ckpt({{"w", {1, 2, 3}}});
  CHECK_THROWS_WITH_AS(assert_compatible(a, wrong_shape),
                       doctest::Contains("w"), std::runtime_error);

  Checkpoint wrong_name = make_ckpt({{"v", {1, 2}}});
  CHECK_THROWS_WITH_AS(assert_compatible(a, wrong_name),
                       doctest::Contains("name set"), std::runtime_error);

  CHECK_THROWS_AS(assert_compatible(std::vector<const Checkpoint*>{}),
                  std::invalid_argument);
}

TEST_CASE("assert_compatible is reflexive and symmetric") {
  Rng rng(11);
  for (int round = 0; round < 20; ++round) {
    Checkpoint a = random_ckpt(rng, {{"w", {2, 2}}, {"b", {3}}});
    Checkpoint b = (round % 2 == 0)
                       ? random_ckpt(rng, {{"w", {2, 2}}, {"b", {3}}})
                       : random_ckpt(rng, {{"w", {2, 2}}, {"b", {4}}});
    CHECK_NOTHROW(assert_compatible(a, a));
    bool ab_ok = true;
    bool ba_ok = true;
    try {
      assert_compatible(a, b);
    } catch (...) {
      ab_ok = false;
    }
    try {
      assert_compatible(b, a);
    } catch (...) {
      ba_ok = false;
    }
    CHECK(ab_ok == ba_ok);
  }
}

TEST_CASE("axpy_scale arithmetic") {
  Checkpoint dst = make_ckpt({{"w", {1, 2}}});
  Checkpoint src = make_ckpt({{"w", {3, 4}}});

  Checkpoint zero_scale = axpy_scale(dst, src, 0.0);
  CHECK(zero_scale.at("w").flat()[0] == 1.0f);
  CHECK(zero_scale.at("w").flat()[1] == 2.0f);

  Checkpoint from_zero = axpy_scale(make_ckpt({{"w", {0, 0}}}), src, 1.0);
  CHECK(from_zero.at("w").flat()[0] == 3.0f);
  CHECK(from_zero.at("w").flat()[1] == 4.0f);

  Checkpoint half = axpy_scale(dst, make_ckpt({{"w", {2, 2}}}), 0.5);
  CHECK(half.at("w").flat()[0] == 2.0f);
  CHECK(half.at("w").flat()[1] == 3.0f);

  // Inputs unmodified.
  CHECK(dst.at("w").flat()[0] == 1.0f);
  CHECK(src.at("w").flat()[0] == 3.0f);

  CHECK_THROWS(axpy_scale(dst, make_ckpt({{"v", {1, 1}}}), 1.0));
}

TEST_CASE("axpy_scale with a zero checkpoint is the identity for any a") {
  Rng rng(3);
  Checkpoint c = random_ckpt(rng, {{"w", {4, 3}}, {"b", {5}}});
  Checkpoint z;
  z.insert("w", Tensor::zeros({4, 3}));
  z.insert("b", Tensor::zeros({5}));
  for (double a : {0.0, 0.25, 1.0, -3.5, 1e6}) {
    Checkpoint out = axpy_scale(c, z, a);
    CHECK(out.at("w").bit_equal(c.at("w")));
    CHECK(out.at("b").bit_equal(c.at("b")));
  }
}

TEST_SUITE_END();
