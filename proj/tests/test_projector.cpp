#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "stagechain/ad/gradcheck.hpp"
#include "stagechain/ad/ops.hpp"
#include "stagechain/ctx/projector.hpp"
#include "stagechain/ctx/telemetry.hpp"
#include "stagechain/errors.hpp"

using namespace stagechain;
using namespace stagechain::ctx;
using ad::Tensor;

namespace {

model::TokenSequence seq_with_tau(std::size_t prefix, std::size_t prompt) {
  model::TokenSequence s;
  s.ids.assign(prefix + prompt, 3);
  s.visual_prefix_len = prefix;
  s.prompt_len = prompt;
  return s;
}

void set_identity(GatedProjector& p) {
  auto w = p.mutable_weight().mutable_data();
  const std::size_t d = p.dim();
  for (std::size_t i = 0; i < d * d; ++i) w[i] = (i % (d + 1) == 0) ? 1.0 : 0.0;
}

// Largest singular value of W by power iteration on WᵀW.
double spectral_norm(const Tensor& w) {
  const std::size_t d = w.rows();
  std::vector<double> v(d, 1.0), u(d);
  double sigma = 0.0;
  for (int it = 0; it < 500; ++it) {
    for (std::size_t i = 0; i < d; ++i) {
      u[i] = 0;
      for (std::size_t j = 0; j < d; ++j) u[i] += w.at(i, j) * v[j];
    }
    std::vector<double> z(d, 0.0);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < d; ++i) z[j] += w.at(i, j) * u[i];
    double n = 0;
    for (double x : z) n += x * x;
    n = std::sqrt(n);
    for (std::size_t j = 0; j < d; ++j) v[j] = z[j] / n;
    sigma = std::sqrt(n);
  }
  return sigma;
}

}  // namespace

TEST_CASE("init constants") {
  GatedProjector p(64, Transition::perc_to_pred, 1);
  CHECK(p.gate().item() == -3.5);
  CHECK(std::abs(p.gate_opening() - 0.0293) <= 0.0005);
  double sq = 0;
  for (double x : p.weight().data()) sq += x * x;
  CHECK(std::sqrt(sq / (64.0 * 64.0)) == doctest::Approx(0.01).epsilon(0.05));
  auto groups = p.param_groups(0.05);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].lr_multiplier == 3.0);
  CHECK(groups[1].lr_multiplier == 25.0);
  CHECK(groups[1].weight_decay == 0.0);
}

TEST_CASE("project closed forms") {
  GatedProjector p(4, Transition::perc_to_pred, 2);
  Tensor zero = p.project(Tensor::zeros({4}));
  for (double v : zero.data()) CHECK(v == 0.0);

  set_identity(p);
  p.mutable_gate().mutable_data()[0] = 0.0;
  Tensor h = Tensor::vector({1.0, 2.0, -2.0, 4.0});
  Tensor out = p.project(h);
  double n = 0;
  for (double v : out.data()) n += v * v;
  CHECK(std::sqrt(n) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(out.at(3) == doctest::Approx(0.5 * 4.0 / 5.0).epsilon(1e-6));

  // at init, h̃ is tiny next to an O(1) embedding row
  GatedProjector init(64, Transition::perc_to_pred, 3);
  ad::Rng rng(1);
  std::vector<double> hv(64);
  for (double& x : hv) x = rng.normal() * 10;
  Tensor ht = init.project(Tensor::vector(hv));
  double hn = 0;
  for (double v : ht.data()) hn += v * v;
  CHECK(std::sqrt(hn) < 0.01);

  p.set_hard_zero(true);
  Tensor closed = p.project(h);
  for (double v : closed.data()) CHECK(v == 0.0);
}

TEST_CASE("norm bound by gate and largest singular value") {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    GatedProjector p(6, Transition::pred_to_plan, seed);
    ad::Rng rng(seed + 100);
    for (double& x : p.mutable_weight().mutable_data()) x = rng.normal();
    p.mutable_gate().mutable_data()[0] = rng.uniform(-4, 4);
    std::vector<double> hv(6);
    for (double& x : hv) x = rng.normal() * 50;
    Tensor out = p.project(Tensor::vector(hv));
    double n = 0;
    for (double v : out.data()) n += v * v;
    CHECK(std::sqrt(n) <= p.gate_opening() * spectral_norm(p.weight()) * (1 + 1e-9));
  }
}

TEST_CASE("extract and inject") {
  Tensor hidden = Tensor::matrix(5, 2, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto s = seq_with_tau(1, 3);  // tau = 3
  Tensor h = extract_context(hidden, s);
  CHECK(h.at(0) == 6.0);
  CHECK(h.at(1) == 7.0);
  CHECK_FALSE(h.requires_grad());
  CHECK_THROWS_AS(extract_context(hidden, seq_with_tau(2, 0)), LengthError);
  CHECK_THROWS_AS(extract_context(Tensor::zeros({3, 2}), s), LengthError);

  Tensor emb = Tensor::matrix(5, 2, {1, 1, 2, 2, 3, 3, 4, 4, 5, 5});
  Tensor same = inject(emb, s, Tensor::zeros({2}));
  CHECK(differing_rows(same, emb) == 0);
  Tensor one = inject(emb, s, Tensor::vector({0.5, -0.5}));
  CHECK(differing_rows(one, emb) == 1);
  CHECK(one.at(3, 0) == 4.5);
  // main + skip at one site: sum of both vectors
  Tensor two = inject(inject(emb, s, Tensor::vector({0.5, 0})), s, Tensor::vector({0.25, 1}));
  Tensor summed = inject(emb, s, Tensor::vector({0.75, 1}));
  CHECK(differing_rows(two, summed) == 0);
  CHECK(differing_rows(two, emb) == 1);
}

TEST_CASE("injection ratio hand values") {
  auto s = seq_with_tau(0, 2);  // tau = 1
  Tensor emb = Tensor::matrix(2, 2, {1, 1, 0, 5});
  CHECK(injection_ratio(Tensor::vector({3, 4}), emb, s) == 1.0);
  CHECK(injection_ratio(Tensor::zeros({2}), emb, s) == 0.0);
  CHECK(injection_ratio(Tensor::vector({0, 5}), emb, s) == 1.0);
  Tensor zero_row = Tensor::matrix(2, 2, {1, 1, 0, 0});
  CHECK_THROWS(injection_ratio(Tensor::vector({3, 4}), zero_row, s));
}

TEST_CASE("transfer_init copies bit-exactly and leaves the source independent") {
  GatedProjector src(8, Transition::perc_to_pred, 1);
  src.mutable_gate().mutable_data()[0] = 0.7;
  GatedProjector dst(8, Transition::pred_to_plan, 2);
  transfer_init(dst, src);
  Tensor h = Tensor::vector({1, 2, 3, 4, 5, 6, 7, 8});
  Tensor a = src.project(h), b = dst.project(h);
  CHECK(std::memcmp(a.data().data(), b.data().data(), 8 * sizeof(double)) == 0);
  const std::string before = src.checksum();
  dst.mutable_weight().mutable_data()[0] += 1.0;
  dst.mutable_gate().mutable_data()[0] = 3.0;
  CHECK(src.checksum() == before);
  GatedProjector wrong(4, Transition::pred_to_plan, 2);
  CHECK_THROWS_AS(transfer_init(wrong, src), DimensionError);
}

TEST_CASE("gradients through normalize, project, gate and inject") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ad::Rng rng(seed);
    const std::size_t d = 2 + rng.below(4);
    GatedProjector p(d, Transition::perc_to_pred, seed);
    p.mutable_gate().mutable_data()[0] = rng.uniform(-3, 1);
    std::vector<double> hv(d), ev(3 * d);
    for (double& x : hv) x = rng.normal() * 3;
    for (double& x : ev) x = rng.normal();
    Tensor h = Tensor::vector(hv), emb = Tensor::matrix(3, d, ev);
    auto s = seq_with_tau(1, 2);
    std::vector<double> wv(3 * d);
    for (double& x : wv) x = rng.uniform(-1, 1);
    Tensor weights = Tensor::matrix(3, d, wv);
    auto f = [&] { return ad::sum(ad::mul(ad::gelu(inject(emb, s, p.project(h))), weights)); };
    auto r = ad::grad_check(f, {p.mutable_weight(), p.mutable_gate(), h, emb});
    CHECK(r.max_rel_error < 1e-5);
    CHECK(p.gate().has_grad());
  }
}

TEST_CASE("projector checkpoints round trip") {
  namespace fs = std::filesystem;
  GatedProjector p(8, Transition::perc_to_plan_skip, 9);
  const fs::path dir = fs::temp_directory_path() / "stagechain_proj_test";
  fs::remove_all(dir);
  p.save(dir);
  GatedProjector q = GatedProjector::load(dir);
  CHECK(q.checksum() == p.checksum());
  CHECK(q.transition() == Transition::perc_to_plan_skip);
  fs::remove_all(dir);
}

TEST_CASE("telemetry: 3-step hand-computed series and CSV") {
  GatedProjector p(2, Transition::perc_to_pred, 1);
  set_identity(p);
  TelemetryRecorder rec;
  const double gates[3] = {-3.5, 0.0, std::log(3.0)};  // σ = 0.0293.., 0.5, 0.75
  auto s = seq_with_tau(0, 2);
  Tensor emb = Tensor::matrix(2, 2, {1, 1, 0, 5});
  for (std::size_t step = 0; step < 3; ++step) {
    p.mutable_gate().mutable_data()[0] = gates[step];
    for (double scale : {1.0, 3.0}) {
      Tensor h = Tensor::vector({3 * scale, 4 * scale});
      rec.observe(Transition::perc_to_pred, injection_ratio(p.project(h), emb, s));
    }
    rec.close_step(step, {&p});
  }
  REQUIRE(rec.records().size() == 3);
  for (std::size_t step = 0; step < 3; ++step) {
    const double sig = 1.0 / (1.0 + std::exp(-gates[step]));
    // ‖ĥ‖ = r/(r+ε) for r = 5 and 15; ratio = σ‖ĥ‖/5
    const double r1 = sig * (5.0 / (5.0 + 1e-6)) / 5.0;
    const double r2 = sig * (15.0 / (15.0 + 1e-6)) / 5.0;
    CHECK(rec.records()[step].gate_opening == doctest::Approx(sig).epsilon(1e-15));
    CHECK(rec.records()[step].injection_ratio == doctest::Approx((r1 + r2) / 2).epsilon(1e-14));
  }
  CHECK(rec.records()[1].gate_opening == 0.5);

  std::ostringstream jsonl;
  write_telemetry_jsonl(jsonl, rec.records());
  std::istringstream in(jsonl.str());
  auto parsed = read_telemetry_jsonl(in);
  REQUIRE(parsed.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(parsed.records[i].gate_opening == rec.records()[i].gate_opening);
    CHECK(parsed.records[i].injection_ratio == rec.records()[i].injection_ratio);
  }
}

TEST_CASE("telemetry fixture renders to the exact CSV") {
  std::ifstream in(std::string(STAGECHAIN_FIXTURES) + "/telemetry_3step.jsonl");
  auto parsed = read_telemetry_jsonl(in);
  CHECK(parsed.malformed == 1);
  std::ostringstream csv;
  write_telemetry_csv(csv, parsed.records);
  CHECK(csv.str() ==
        "step,transition,gate,ratio\n"
        "0,perc->pred,0.029312230751356319,0.25\n"
        "1,perc->pred,0.5,0.0625\n"
        "2,pred->plan,0.75,1.5\n");
  std::ostringstream empty;
  write_telemetry_csv(empty, {});
  CHECK(empty.str() == "step,transition,gate,ratio\n");
}
