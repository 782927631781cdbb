#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "stagechain/ad/checkpoint.hpp"
#include "stagechain/ad/gradcheck.hpp"
#include "stagechain/ad/ops.hpp"
#include "stagechain/ad/optim.hpp"
#include "stagechain/errors.hpp"

using namespace stagechain;
using namespace stagechain::ad;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.normal() * scale;
  return Tensor::matrix(r, c, std::move(v));
}

Tensor random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal() * scale;
  return Tensor::vector(std::move(v));
}

// Weighted sum with fixed random weights so every output coordinate matters.
Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(x.numel());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return sum(mul(x, Tensor(x.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("matmul hand cases") {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor p = matmul(eye, eye);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, 0, 0, 1});

  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor ones = Tensor::matrix(2, 1, {1, 1});
  Tensor r = matmul(a, ones);
  CHECK(r.at(0, 0) == 3.0);
  CHECK(r.at(1, 0) == 7.0);

  Tensor z = matmul(Tensor::zeros({3, 2}), a);
  for (double v : z.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("l2_normalize closed forms") {
  Tensor zero = l2_normalize(Tensor::zeros({4}), 1e-6);
  for (double v : zero.data()) CHECK(v == 0.0);

  Tensor u = l2_normalize(Tensor::vector({0.6, 0.8}), 1e-6);
  CHECK(u.at(0) == doctest::Approx(0.6).epsilon(1e-5));
  CHECK(u.at(1) == doctest::Approx(0.8).epsilon(1e-5));

  Tensor v = l2_normalize(Tensor::vector({3, 4}), 1e-6);
  CHECK(std::abs(v.at(0) - 0.6) < 1e-5);
  CHECK(std::abs(v.at(1) - 0.8) < 1e-5);
  // unit input: scaled by exactly 1/(1+eps)
  Tensor e = l2_normalize(Tensor::vector({1, 0, 0}), 1e-6);
  CHECK(e.at(0) == doctest::Approx(1.0 / (1.0 + 1e-6)).epsilon(1e-15));
}

TEST_CASE("non-finite values are rejected") {
  Tensor a = Tensor::vector({1.0, std::nan("")});
  CHECK_THROWS_AS(add(a, a), NumericError);
  Tensor big = Tensor::vector({1e308, 1e308});
  CHECK_THROWS_AS(scale(big, 10.0), NumericError);
}

TEST_CASE("gradients of every op match central differences over random seeds") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Rng rng(seed);
    const std::size_t m = 1 + rng.below(3), k = 1 + rng.below(4), n = 1 + rng.below(3);
    Tensor a = random_matrix(rng, m, k);
    Tensor b = random_matrix(rng, k, n);
    Tensor bt = random_matrix(rng, n, k);
    Tensor v = random_vector(rng, k);
    Tensor gain = random_vector(rng, k);
    Tensor bias = random_vector(rng, k);
    Tensor s = Tensor::scalar(rng.normal());

    auto f = [&] {
      Tensor x = matmul(a, b);
      Tensor y = matmul_nt(a, bt);
      Tensor z = matvec(a, v);
      Tensor ln = layer_norm(a, gain, bias);
      Tensor sm = causal_softmax(matmul_nt(a, a));
      Tensor g = gelu(ln);
      Tensor nv = scalar_mul(sigmoid(s), l2_normalize(v));
      Tensor inj = add_to_row(a, m - 1, nv);
      Tensor cat = concat_cols(std::vector<Tensor>{slice_cols(inj, 0, 1), g});
      return add(add(add(weighted_sum(x, seed), weighted_sum(y, seed + 1)),
                     add(weighted_sum(z, seed + 2), weighted_sum(sm, seed + 3))),
                 add(weighted_sum(cat, seed + 4), weighted_sum(row(inj, 0), seed + 5)));
    };
    GradCheckResult r = grad_check(f, {a, b, bt, v, gain, bias, s});
    INFO("seed " << seed << " worst param " << r.worst_param);
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("cross entropy gradient and ignore index") {
  Rng rng(3);
  Tensor logits = random_matrix(rng, 4, 5);
  std::vector<int> targets = {1, -100, 4, 0};
  auto f = [&] { return softmax_cross_entropy(logits, targets); };
  CHECK(grad_check(f, {logits}).max_rel_error < 1e-6);

  // uniform logits: loss is log V
  Tensor flat = Tensor::zeros({2, 5});
  std::vector<int> t2 = {2, 3};
  CHECK(softmax_cross_entropy(flat, t2).item() == doctest::Approx(std::log(5.0)));
  std::vector<int> none = {-100, -100};
  CHECK_THROWS_AS(softmax_cross_entropy(flat, none), Error);
}

TEST_CASE("AdamW first step matches hand computation") {
  Tensor p = Tensor::vector({1.0, -2.0}, true);
  AdamW opt({{"p", {p}, 2.0, 0.1}});
  p.mutable_grad()[0] = 0.5;
  p.mutable_grad()[1] = -3.0;
  opt.step(0.01, 1.0);
  // lr_eff = 0.02; decay: p *= 1 - 0.02*0.1; Adam first step moves by lr*g/(|g|+eps')
  const double lr = 0.02;
  auto expect = [&](double p0, double g) {
    double m = 0.1 * g / (1 - 0.9), vv = 0.001 * g * g / (1 - 0.999);
    return p0 * (1 - lr * 0.1) - lr * m / (std::sqrt(vv) + 1e-8);
  };
  CHECK(p.at(0) == doctest::Approx(expect(1.0, 0.5)).epsilon(1e-14));
  CHECK(p.at(1) == doctest::Approx(expect(-2.0, -3.0)).epsilon(1e-14));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("AdamW with zero learning rate leaves parameters bit-identical") {
  Tensor p = Tensor::vector({0.3, 0.7}, true);
  AdamW opt({{"p", {p}, 1.0, 0.05}});
  p.mutable_grad()[0] = 1.0;
  p.mutable_grad()[1] = 1.0;
  opt.step(0.0, 1.0);
  CHECK(p.at(0) == 0.3);
  CHECK(p.at(1) == 0.7);
}

TEST_CASE("AdamW rejects duplicated and frozen parameters") {
  Tensor p = Tensor::vector({1.0}, true);
  CHECK_THROWS(AdamW({{"a", {p}}, {"b", {p}}}));
  Tensor f = Tensor::vector({1.0}, false);
  CHECK_THROWS(AdamW({{"a", {f}}}));
}

TEST_CASE("cosine warmup schedule") {
  CHECK(cosine_warmup_scale(0, 100, 0.1) == 0.0);
  CHECK(cosine_warmup_scale(5, 100, 0.1) == doctest::Approx(0.5));
  CHECK(cosine_warmup_scale(10, 100, 0.1) == doctest::Approx(1.0));
  CHECK(cosine_warmup_scale(100, 100, 0.1) == doctest::Approx(0.0));
  const double mid = cosine_warmup_scale(55, 100, 0.1);
  CHECK(mid == doctest::Approx(0.5 * (1 + std::cos(M_PI * 45.0 / 90.0))));
  CHECK(mid == doctest::Approx(0.5));
  CHECK_THROWS(cosine_warmup_scale(0, 0, 0.1));
}

TEST_CASE("checkpoint round trip and corruption detection") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "stagechain_ckpt_test";
  fs::remove_all(dir);
  Rng rng(9);
  Tensor w = random_matrix(rng, 3, 4);
  Tensor g = Tensor::scalar(-3.5);
  save_checkpoint(dir, {{"W", w}, {"g", g}}, {{"kind", "test"}});
  Checkpoint c = load_checkpoint(dir);
  CHECK(c.provenance["kind"] == "test");
  CHECK(tensor_checksum(c.get("W")) == tensor_checksum(w));
  CHECK(c.get("g").item() == -3.5);
  CHECK_THROWS_AS(c.get("missing"), MissingArtifactError);

  const std::string h1 = checkpoint_hash(dir);
  save_checkpoint(dir, {{"W", w}, {"g", g}}, {{"kind", "test"}});
  CHECK(checkpoint_hash(dir) == h1);

  {
    std::fstream f(dir / "t0000.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "nope"), MissingArtifactError);
  fs::remove_all(dir);
}

TEST_CASE("sha256 known answer") {
  CHECK(sha256_hex(std::string("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("rng streams are reproducible and below() stays in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) {
    std::size_t x = c.below(7);
    REQUIRE(x < 7);
    ++counts[x];
  }
  for (int n : counts) CHECK(n > 800);
  double mean = 0, sq = 0;
  for (int i = 0; i < 20000; ++i) {
    double x = c.normal();
    mean += x;
    sq += x * x;
  }
  mean /= 20000;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(sq / 20000 - 1.0) < 0.05);
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
}
