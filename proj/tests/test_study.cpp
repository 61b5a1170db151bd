#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace gem;

namespace {

ComparisonRecord rec(const std::string& model, const std::string& concept_name, double delta,
                     double handoff_retained = 10.0) {
  ComparisonRecord c;
  c.model_id = model;
  c.concept_name = concept_name;
  c.handoff_record.retained_pct = handoff_retained;
  c.peak_record.retained_pct = handoff_retained + delta;
  c.delta_pp = delta;
  c.outcome = outcome_from_delta(delta);
  return c;
}

Registry toy_registry() {
  return Registry({{"small", "F", 100'000'000, 12, 768, Cohort::MHA, ""},
                   {"mid", "F", 1'000'000'000, 24, 2048, Cohort::GQA, ""},
                   {"big", "F", 7'000'000'000, 32, 4096, Cohort::MHA, ""},
                   {"alt", "F", 2'000'000'000, 26, 2304, Cohort::Alternating, ""}});
}

}  // namespace

TEST_CASE("bundled registry", "[study]") {
  const Registry reg = Registry::load(fs::path(GEM_DATA_DIR) / "model_registry.json");
  CHECK(reg.size() == 23);
  std::map<ScaleBucket, int> buckets;
  std::map<Cohort, int> cohorts;
  for (const auto& [id, m] : reg.models()) {
    ++buckets[scale_bucket(m.params)];
    ++cohorts[m.cohort];
    CHECK(m.params > 0);
  }
  CHECK(buckets[ScaleBucket::Small] == 4);
  CHECK(buckets[ScaleBucket::Medium] == 11);
  CHECK(buckets[ScaleBucket::Large] == 8);
  CHECK(cohorts[Cohort::MHA] == 13);
  CHECK(cohorts[Cohort::GQA] == 7);
  CHECK(cohorts[Cohort::Alternating] == 2);
  CHECK(cohorts[Cohort::Other] == 1);
  CHECK_THROWS_AS(reg.at("not-a-model"), Error);
}

TEST_CASE("scale bucket boundaries", "[study]") {
  CHECK(scale_bucket(499'999'999) == ScaleBucket::Small);
  CHECK(scale_bucket(500'000'000) == ScaleBucket::Medium);
  CHECK(scale_bucket(3'000'000'000) == ScaleBucket::Medium);
  CHECK(scale_bucket(3'000'000'001) == ScaleBucket::Large);
}

TEST_CASE("registry validation", "[study]") {
  CHECK_THROWS_AS(Registry({{"a", "F", 1, 1, 1, Cohort::MHA, ""}, {"a", "F", 1, 1, 1, Cohort::GQA, ""}}), Error);
  CHECK_THROWS_AS(model_meta_from_json(json{{"model_id", "x"}, {"family", "F"}, {"params", 0}, {"n_layers", 1},
                                            {"hidden_dim", 1}, {"cohort", "MHA"}}),
                  Error);
  CHECK_THROWS_AS(cohort_from_string("MQA"), Error);
}

TEST_CASE("aggregation partitions and is order independent", "[study][property]") {
  const Registry reg = toy_registry();
  std::vector<ComparisonRecord> rs;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(-3, 3);
  const char* models[] = {"small", "mid", "big", "alt"};
  for (int k = 0; k < 40; ++k) rs.push_back(rec(models[k % 4], "c" + std::to_string(k), d(rng)));
  const auto a = aggregate_study(rs, reg);
  std::size_t bucket_sum = 0;
  for (const auto& b : a.buckets) bucket_sum += b.counts.n;
  CHECK(bucket_sum == a.overall.n);
  CHECK(a.overall.n == 40);
  CHECK(a.overall.handoff_better + a.overall.peak_better + a.overall.ties == 40);

  for (int k = 0; k < 5; ++k) {
    std::shuffle(rs.begin(), rs.end(), rng);
    CHECK(to_json(aggregate_study(rs, reg)).dump() == to_json(a).dump());
  }
}

TEST_CASE("all ties", "[study]") {
  const Registry reg = toy_registry();
  const auto s = aggregate_study({rec("small", "a", 0), rec("mid", "b", 0)}, reg);
  CHECK(s.cohort_table.mha_prefer == 0);
  CHECK(s.cohort_table.gqa_prefer == 0);
  CHECK(s.cohort_table.fisher_p == 1.0);
  CHECK_FALSE(s.model_wilcoxon);
  CHECK(s.overall.ties == 2);
}

TEST_CASE("single-model corpus fills one bucket", "[study]") {
  std::vector<ComparisonRecord> rs;
  for (int k = 0; k < 17; ++k) rs.push_back(rec("mid", "c" + std::to_string(k), k % 3 - 1.0));
  const auto s = aggregate_study(rs, toy_registry());
  CHECK(s.buckets[1].counts.n == 17);
  CHECK(s.buckets[0].counts.n == 0);
  CHECK(s.buckets[2].counts.n == 0);
}

TEST_CASE("degenerate comparisons stay out of the primary aggregate", "[study]") {
  const Registry reg = toy_registry();
  const auto s = aggregate_study({rec("small", "a", 5.0), rec("small", "b", -5.0, 120.0), rec("mid", "c", 1.0)}, reg);
  CHECK(s.degenerate_pairs == 1);
  CHECK(s.overall.n == 2);
  CHECK(s.overall_including_degenerate.n == 3);
  std::size_t bucket_sum = 0;
  for (const auto& b : s.buckets) bucket_sum += b.counts.n;
  CHECK(bucket_sum == 2);
  CHECK(s.per_model[1].model_id == "small");
  CHECK(s.per_model[1].degenerate == 1);
  CHECK(s.per_model[1].prefers_handoff);
}

TEST_CASE("cohort table", "[study]") {
  std::vector<ModelMeta> metas;
  std::vector<ComparisonRecord> rs;
  auto add = [&](const std::string& id, Cohort c, bool prefers) {
    metas.push_back({id, "F", 1'000'000'000, 24, 1024, c, ""});
    rs.push_back(rec(id, "x", prefers ? 3.0 : -3.0));
    rs.push_back(rec(id, "y", prefers ? 2.0 : -2.0));
    rs.push_back(rec(id, "z", prefers ? -1.0 : 1.0));
  };
  for (int i = 0; i < 13; ++i) add("mha" + std::to_string(i), Cohort::MHA, i < 11);
  for (int i = 0; i < 7; ++i) add("gqa" + std::to_string(i), Cohort::GQA, i < 2);
  add("alt", Cohort::Alternating, true);
  add("other", Cohort::Other, false);
  const auto s = aggregate_study(rs, Registry(metas));
  const auto& t = s.cohort_table;
  CHECK(t.mha_prefer == 11);
  CHECK(t.mha_other == 2);
  CHECK(t.gqa_prefer == 2);
  CHECK(t.gqa_other == 5);
  CHECK(t.excluded_models == 2);
  CHECK(t.mha_prefer + t.mha_other == 13);
  CHECK(t.fisher_p == Catch::Approx(0.0223).margin(0.0005));
  REQUIRE(s.model_wilcoxon);
  CHECK(s.model_wilcoxon->n_used == 22);
  CHECK(s.model_wilcoxon->exact);
}

TEST_CASE("strict majority of non-tie outcomes", "[study]") {
  const Registry reg = toy_registry();
  const auto s = aggregate_study({rec("small", "a", 1), rec("small", "b", -1), rec("small", "c", 0)}, reg);
  CHECK_FALSE(s.per_model[0].prefers_handoff);
  CHECK(s.per_model[0].preference == Catch::Approx(0.5));
  const auto t = aggregate_study({rec("small", "a", 1), rec("small", "b", 0), rec("small", "c", 0)}, reg);
  CHECK(t.per_model[0].prefers_handoff);
}

TEST_CASE("magnitude summary", "[study]") {
  const Registry reg = toy_registry();
  const auto s = aggregate_study({rec("small", "a", 30), rec("small", "b", 10), rec("small", "c", -6)}, reg);
  const auto& g = s.magnitude;
  CHECK(g.improvement_pp == 20.0);
  CHECK(g.degradation_pp == 6.0);
  CHECK(g.improvement_rate == Catch::Approx(2.0 / 3.0));
  CHECK(g.net_expected_pp == Catch::Approx(20.0 * 2.0 / 3.0 - 6.0 / 3.0));
  CHECK(g.observed_mean_delta_pp == Catch::Approx(34.0 / 3.0));
}

TEST_CASE("unknown model", "[study]") {
  try {
    aggregate_study({rec("nope", "a", 1)}, toy_registry());
    FAIL("expected UnknownModel");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UnknownModel);
  }
}
