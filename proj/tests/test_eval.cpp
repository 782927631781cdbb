#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "oracles.hpp"
#include "stagechain/ad/rng.hpp"
#include "stagechain/errors.hpp"
#include "stagechain/eval/attributes.hpp"
#include "stagechain/eval/metrics.hpp"
#include "stagechain/eval/nli.hpp"
#include "stagechain/eval/report.hpp"
#include "stagechain/eval/stats.hpp"
#include "stagechain/eval/text.hpp"

using namespace stagechain;
using namespace stagechain::eval;

namespace {

nlohmann::json fixture_cases() {
  std::ifstream in(std::string(STAGECHAIN_FIXTURES) + "/metric_cases.json");
  return nlohmann::json::parse(in);
}

std::set<std::string> stop_set() {
  std::set<std::string> s;
  for (const auto& w : stop_words()) s.insert(w);
  return s;
}

pipeline::ChainTranscript transcript(const std::string& id, const std::string& a1,
                                     const std::string& a2, const std::string& a3) {
  pipeline::ChainTranscript t;
  t.scene_id = id;
  t.mode = "test";
  for (Stage s : kStages) t.at(s).stage = s;
  t.at(Stage::perception).answer = a1;
  t.at(Stage::prediction).answer = a2;
  t.at(Stage::planning).answer = a3;
  return t;
}

}  // namespace

TEST_CASE("term extraction hand traces") {
  CHECK(extract_terms("").empty());
  CHECK(extract_terms("The car and the red van").empty());
  CHECK(extract_terms("pedestrian crossing the road ahead") ==
        TermSet{"pedestrian", "crossing", "road", "ahead"});
  CHECK(extract_terms("Road, road; ROAD!") == TermSet{"road"});
  CHECK(stop_words().size() == 127);
}

TEST_CASE("lexical overlap hand values") {
  CHECK(lexical_overlap("pedestrian crossing road", "pedestrian crossing road") == 1.0);
  CHECK(lexical_overlap("pedestrian crossing", "green light") == 0.0);
  CHECK(lexical_overlap("pedestrian crossing the road ahead", "slow down for pedestrian") == 0.25);
  CHECK_FALSE(lexical_overlap("the car", "anything").has_value());
}

TEST_CASE("attribute lexicon examples") {
  auto f = extract_attributes("The action is to keep going at the same speed");
  CHECK(f.ego_actions == std::set<ActionFact>{ActionFact::maintain});
  auto e = extract_attributes("");
  CHECK(e.light == LightFact::unknown);
  CHECK(e.pedestrian == PedestrianFact::unknown);
  CHECK(e.ego_actions.empty());
  CHECK(extract_attributes("a pedestrian is crossing the road").pedestrian ==
        PedestrianFact::crossing);
  CHECK(extract_attributes("the pedestrian is not crossing").pedestrian == PedestrianFact::unknown);
  CHECK(extract_attributes("do not stop here").ego_actions.empty());
  CHECK(extract_attributes("no pedestrians around").pedestrian == PedestrianFact::none);
}

TEST_CASE("structural consistency rule traces") {
  AttributeFacts crossing;
  crossing.pedestrian = PedestrianFact::crossing;
  AttributeFacts maintain, slow;
  maintain.ego_actions = {ActionFact::maintain};
  slow.ego_actions = {ActionFact::slow};
  CHECK(structural_consistency(crossing, maintain) == 0.0);
  CHECK(structural_consistency(crossing, slow) == 1.0);
  CHECK_FALSE(structural_consistency(AttributeFacts{}, AttributeFacts{}).has_value());
  AttributeFacts red = crossing;
  red.light = LightFact::red;
  auto rc = check_rules(red, maintain);
  CHECK(rc.checks == 2);
  CHECK(rc.contradictions == 2);
}

TEST_CASE("CIDEr oracle hand-checked on a 3-sentence corpus") {
  // Three items, one reference each. Item 0 matches its reference exactly.
  std::vector<std::string> cands = {"a red light", "a green light", "stop now"};
  std::vector<std::vector<std::string>> refs = {{"a red light"}, {"a red light"}, {"go now"}};
  // Hand trace for item 0: unigram df: a=2, red=2, light=2 -> idf log3-log2 for all,
  // identical vectors so cosine 1 for n=1,2,3; n=4 has no n-grams (0).
  // bigrams "a red","red light" df 2 -> cosine 1. trigram "a red light" df 2 -> 1.
  // item 0 = 100 * (1+1+1+0)/4 = 75.
  const double item0 = 75.0;
  // item 2: unigram "now" df 1 -> idf log3; "stop" df 0 -> idf log3; ref "go" df1 log3.
  // cand vec (stop:l, now:l), ref (go:l, now:l): cosine 1/2; no shared higher n-grams.
  const double item2 = 100.0 * 0.5 / 4.0;
  // item 1: unigrams a,light shared (idf log3-log2), green (log3): cand (g:L, a:s, light:s),
  // ref (a:s, red:s, light:s) with s = log 1.5, L = log 3.
  const double s = std::log(1.5), L = std::log(3.0);
  const double cos1 = 2 * s * s / (std::sqrt(L * L + 2 * s * s) * std::sqrt(3 * s * s));
  const double item1 = 100.0 * cos1 / 4.0;
  const double expect = (item0 + item1 + item2) / 3.0;
  CHECK(oracle::cider(cands, refs) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(cider(cands, refs) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("metrics agree with the brute-force oracles on the 25-case fixture corpus") {
  const auto cases = fixture_cases();
  REQUIRE(cases.size() == 25);
  std::vector<std::string> cands;
  std::vector<std::vector<std::string>> refs;
  const auto stop = stop_set();
  for (const auto& c : cases) {
    const auto cand = c["candidate"].get<std::string>();
    const auto r = c["references"].get<std::vector<std::string>>();
    cands.push_back(cand);
    refs.push_back(r);
    INFO("case " << c["id"]);
    CHECK(std::abs(bleu1(cand, r).value - oracle::bleu1(cand, r)) < 1e-6);
    CHECK(std::abs(rouge_l(cand, r).value - oracle::rouge_l(cand, r)) < 1e-6);

    const auto perc = c["perc"].get<std::string>(), pred = c["pred"].get<std::string>(),
               plan = c["plan"].get<std::string>();
    const auto lex = lexical_overlap(perc, pred);
    const double lo = oracle::lexical_overlap(perc, pred, stop);
    CHECK(lex.has_value() == (lo >= 0));
    if (lex) CHECK(std::abs(*lex - lo) < 1e-6);

    auto st = structural_consistency(
        merge_facts(extract_attributes(perc), extract_attributes(pred)), extract_attributes(plan));
    if (c["structural"].is_null()) {
      CHECK_FALSE(st.has_value());
    } else {
      REQUIRE(st.has_value());
      CHECK(std::abs(*st - c["structural"].get<double>()) < 1e-6);
    }
  }
  CHECK(std::abs(cider(cands, refs) - oracle::cider(cands, refs)) < 1e-6);
  const auto per_item = cider_per_item(cands, refs);
  CHECK(per_item.size() == 25);
}

TEST_CASE("metric edge cases") {
  CHECK(bleu1("the cat sat", {"the cat sat"}).value == doctest::Approx(100.0));
  CHECK(bleu1("alpha beta", {"gamma delta"}).value == 0.0);
  CHECK(rouge_l("alpha beta", {"gamma delta"}).value == 0.0);
  CHECK(cider({"alpha beta", "x"}, {{"gamma delta"}, {"y"}}) == 0.0);
  auto e = bleu1("", {"a b"});
  CHECK(e.value == 0.0);
  CHECK(e.empty_candidate);
  CHECK(rouge_l("...", {"a"}).empty_candidate);
  CHECK_THROWS(bleu1("a", {}));
}

TEST_CASE("NLI normalization and heuristic examples") {
  auto v = normalized(2, 1, 1);
  CHECK(v.p_entail == 0.5);
  CHECK(v.p_entail + v.p_neutral + v.p_contra == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(normalized(0, 0, 0), DataError);
  CHECK_THROWS_AS(normalized(-1, 1, 1), DataError);

  const std::string same = "There is a pedestrian crossing the road";
  CHECK(HeuristicNli::verdict(same, same).p_entail >= 0.9);
  auto c = HeuristicNli::verdict("There is a pedestrian crossing the road",
                                 "The action is to keep going at the same speed");
  CHECK(c.p_contra >= 0.9);
  ad::Rng rng(4);
  const std::vector<std::string> pool = {"red light", "slow down", "accelerate", "crossing the road",
                                         "pedestrian", "green light", "stop", "", "maintain speed"};
  for (int i = 0; i < 200; ++i) {
    std::string p = pool[rng.below(pool.size())] + " " + pool[rng.below(pool.size())];
    std::string h = pool[rng.below(pool.size())];
    auto x = HeuristicNli::verdict(p, h);
    CHECK(x.p_entail + x.p_neutral + x.p_contra == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(x.p_entail >= 0.0);
    CHECK(x.p_contra <= 1.0);
  }
}

TEST_CASE("HTTP NLI client against the heuristic server") {
  HeuristicNliServer server;
  const int port = server.bind("127.0.0.1", 0);
  std::thread th([&] { server.listen(); });
  std::vector<NLIPair> pairs;
  for (int i = 0; i < 20; ++i) {
    pairs.push_back({"There is a pedestrian crossing the road " + std::to_string(i),
                     i % 2 ? "The action is to accelerate" : "slow down for the pedestrian"});
  }
  HttpNli client("http://127.0.0.1:" + std::to_string(port), 4);
  auto remote = client.score(pairs);
  HeuristicNli local;
  auto expect = local.score(pairs);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    REQUIRE(remote[i].has_value());
    CHECK(remote[i]->p_contra == expect[i]->p_contra);
    CHECK(remote[i]->p_entail == expect[i]->p_entail);
  }
  server.stop();
  th.join();

  HttpNli dead("http://127.0.0.1:" + std::to_string(port), 2, std::chrono::milliseconds(300));
  auto none = dead.score({pairs[0], pairs[1]});
  CHECK_FALSE(none[0].has_value());
  CHECK_FALSE(none[1].has_value());
}

TEST_CASE("bootstrap intervals") {
  std::vector<double> c(50, 0.25);
  auto ci = bootstrap_ci(c, 2000, 0.95, 1);
  CHECK(ci.lo == 0.25);
  CHECK(ci.hi == 0.25);
  CHECK_THROWS_AS(bootstrap_ci(std::vector<double>{}, 10, 0.95, 1), DataError);

  ad::Rng rng(12);
  std::vector<double> x(500);
  for (double& v : x) v = rng.normal();
  auto n = bootstrap_ci(x, 10000, 0.95, 3);
  const double width = n.hi - n.lo;
  const double analytic = 2 * 1.96 / std::sqrt(500.0);
  CHECK(width > 0.8 * analytic);
  CHECK(width < 1.2 * analytic);
  CHECK(n.lo <= n.point);
  CHECK(n.point <= n.hi);
  auto again = bootstrap_ci(x, 10000, 0.95, 3);
  CHECK(again.lo == n.lo);
  CHECK(again.hi == n.hi);

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ad::Rng g(seed);
    std::vector<double> v(1 + g.below(8));
    for (double& y : v) y = g.uniform();
    auto b = bootstrap_ci(v, 200, 0.9, seed);
    CHECK(b.lo <= b.point);
    CHECK(b.point <= b.hi);
  }
}

TEST_CASE("relative reduction and interval comparator") {
  CHECK(relative_reduction(0.461, 0.264) == doctest::Approx(0.42733).epsilon(1e-4));
  CHECK(significant(0.315, 0.365, 0.203, 0.243));
  CHECK_FALSE(significant(0.2, 0.3, 0.25, 0.35));
  CHECK_FALSE(significant(0.2, 0.3, 0.2, 0.3));
}

TEST_CASE("report aggregation: single, pair, averaged column, absent handling") {
  HeuristicNli nli;
  ReportOptions opt{500, 0.95, 1};
  auto t1 = transcript("s1", "There is a pedestrian crossing the road",
                       "The pedestrian will keep crossing the road",
                       "The action is to keep going at the same speed");
  auto t2 = transcript("s2", "I see a red light ahead", "The light will stay red",
                       "The ego vehicle should stop since the light is red");
  auto single = aggregate_report("c", "all", {t1}, nli, opt);
  auto s = score_transitions(t1);
  CHECK(single.per_transition[1][1].mean == s[1].structural);
  CHECK(single.per_transition[0][0].mean == s[0].lexical);

  auto both = aggregate_report("c", "all", {t1, t2}, nli, opt);
  CHECK(*both.per_transition[1][1].mean == doctest::Approx(0.5));
  for (std::size_t c : {2u, 3u}) {
    const double avg = (*both.per_transition[0][c].mean + *both.per_transition[1][c].mean) / 2.0;
    CHECK(std::abs(*both.table[c] - avg) < 1e-12);
  }
  CHECK(both.mean_answer_length[0] == doctest::Approx((7.0 + 6.0) / 2.0));

  // A transcript whose planning answer has no action contributes no
  // structural value; the mean over the rest is unchanged.
  auto t3 = transcript("s3", "I see a red light ahead", "The light will stay red", "ok");
  auto with_absent = aggregate_report("c", "all", {t1, t2, t3}, nli, opt);
  CHECK(with_absent.per_transition[1][1].n == 2);
  CHECK(*with_absent.per_transition[1][1].mean == *both.per_transition[1][1].mean);

  CHECK_THROWS_AS(aggregate_report("c", "all", {}, nli, opt), DataError);

  std::ostringstream csv, md;
  write_table_csv(csv, {both});
  CHECK(csv.str().rfind("condition,slice,n,lex_overlap,struct_consist,nli_contra,nli_entail\n", 0) == 0);
  auto flags = pairwise_significance({both, both});
  for (const auto& f : flags) CHECK_FALSE(f.significant);
  write_markdown(md, {both}, flags);
  CHECK(md.str().find("| c | all | 2 |") != std::string::npos);
}

TEST_CASE("absent NLI records are excluded, never zero-filled") {
  struct HalfBackend : NliBackend {
    std::string name() const override { return "half"; }
    std::vector<std::optional<NLIVerdict>> score(const std::vector<NLIPair>& p) override {
      std::vector<std::optional<NLIVerdict>> out(p.size());
      for (std::size_t i = 0; i < p.size(); i += 2) out[i] = NLIVerdict{0.0, 0.2, 0.8};
      return out;
    }
  } half;
  auto t = transcript("s", "a red light", "the light will stay red", "slow down");
  auto r = aggregate_report("c", "all", {t, t}, half, {100, 0.95, 0});
  CHECK(r.n_nli_absent == 2);
  CHECK(*r.per_transition[0][2].mean == 0.8);
  CHECK_FALSE(r.per_transition[1][2].mean.has_value());
  CHECK(*r.table[2] == 0.8);
}
