#pragma once

// Model registry and corpus-level aggregation of handoff-vs-peak outcomes.

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "gem/ablation.hpp"
#include "gem/activation_store.hpp"
#include "gem/stats.hpp"

namespace gem {

enum class Cohort { MHA, GQA, Alternating, Other };

inline std::string to_string(Cohort c) {
  switch (c) {
    case Cohort::MHA: return "MHA";
    case Cohort::GQA: return "GQA";
    case Cohort::Alternating: return "Alternating";
    case Cohort::Other: return "Other";
  }
  return "Other";
}

inline Cohort cohort_from_string(const std::string& s) {
  if (s == "MHA") return Cohort::MHA;
  if (s == "GQA") return Cohort::GQA;
  if (s == "Alternating") return Cohort::Alternating;
  if (s == "Other") return Cohort::Other;
  throw Error(ErrorKind::BadField, "unknown cohort '" + s + "'");
}

struct ModelMeta {
  std::string model_id;
  std::string family;
  std::uint64_t params = 0;
  std::size_t n_layers = 0;
  std::size_t hidden_dim = 0;
  Cohort cohort = Cohort::Other;
  std::string source;
};

inline ModelMeta model_meta_from_json(const json& j) {
  ModelMeta m;
  try {
    m.model_id = j.at("model_id").get<std::string>();
    m.family = j.at("family").get<std::string>();
    m.params = j.at("params").get<std::uint64_t>();
    m.n_layers = j.at("n_layers").get<std::size_t>();
    m.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    m.cohort = cohort_from_string(j.at("cohort").get<std::string>());
    m.source = j.value("source", "");
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadField, std::string("registry entry: ") + e.what());
  }
  if (m.model_id.empty()) throw Error(ErrorKind::BadField, "registry entry without model_id");
  if (m.params == 0) throw Error(ErrorKind::BadField, "registry params must be > 0 for " + m.model_id);
  return m;
}

inline json model_meta_to_json(const ModelMeta& m) {
  return {{"model_id", m.model_id}, {"family", m.family},         {"params", m.params},
          {"n_layers", m.n_layers}, {"hidden_dim", m.hidden_dim}, {"cohort", to_string(m.cohort)},
          {"source", m.source}};
}

class Registry {
 public:
  Registry() = default;
  explicit Registry(std::vector<ModelMeta> models) {
    for (auto& m : models) {
      const std::string id = m.model_id;
      if (!models_.emplace(id, std::move(m)).second) throw Error(ErrorKind::BadField, "duplicate registry id " + id);
    }
  }

  static Registry load(const fs::path& path) {
    json j;
    try {
      j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::BadField, "registry is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_array()) throw Error(ErrorKind::BadField, "registry must be a JSON array");
    std::vector<ModelMeta> models;
    for (const auto& e : j) models.push_back(model_meta_from_json(e));
    return Registry(std::move(models));
  }

  const ModelMeta& at(const std::string& model_id) const {
    auto it = models_.find(model_id);
    if (it == models_.end()) throw Error(ErrorKind::UnknownModel, "model '" + model_id + "' not in registry");
    return it->second;
  }
  bool contains(const std::string& model_id) const { return models_.count(model_id) > 0; }
  std::size_t size() const { return models_.size(); }
  const std::map<std::string, ModelMeta>& models() const { return models_; }

 private:
  std::map<std::string, ModelMeta> models_;
};

enum class ScaleBucket { Small, Medium, Large };

inline constexpr std::uint64_t kSmallModelLimit = 500'000'000ULL;
inline constexpr std::uint64_t kLargeModelLimit = 3'000'000'000ULL;

/// <500M, 500M..3B (both ends inclusive), >3B.
inline ScaleBucket scale_bucket(std::uint64_t params) {
  if (params < kSmallModelLimit) return ScaleBucket::Small;
  if (params <= kLargeModelLimit) return ScaleBucket::Medium;
  return ScaleBucket::Large;
}

inline std::string to_string(ScaleBucket b) {
  switch (b) {
    case ScaleBucket::Small: return "<500M";
    case ScaleBucket::Medium: return "500M-3B";
    case ScaleBucket::Large: return ">3B";
  }
  return "";
}

/// Either probe amplifying separation marks the comparison degenerate.
inline bool comparison_degenerate(const ComparisonRecord& r) {
  return r.handoff_record.degenerate() || r.peak_record.degenerate();
}

struct OutcomeCounts {
  std::size_t n = 0;
  std::size_t handoff_better = 0;
  std::size_t peak_better = 0;
  std::size_t ties = 0;

  void add(Outcome o) {
    ++n;
    if (o == Outcome::HandoffBetter) ++handoff_better;
    else if (o == Outcome::PeakBetter) ++peak_better;
    else ++ties;
  }
  double improvement_rate() const { return n ? static_cast<double>(handoff_better) / static_cast<double>(n) : 0.0; }
  double at_least_as_good_rate() const {
    return n ? static_cast<double>(handoff_better + ties) / static_cast<double>(n) : 0.0;
  }
};

struct BucketSummary {
  ScaleBucket bucket = ScaleBucket::Small;
  std::vector<std::string> models;
  OutcomeCounts counts;
};

struct ModelSummary {
  std::string model_id;
  Cohort cohort = Cohort::Other;
  OutcomeCounts counts;
  std::size_t degenerate = 0;
  /// handoff_better / (handoff_better + peak_better); absent when every outcome is a tie
  std::optional<double> preference;
  bool prefers_handoff = false;  // strict majority of non-tie outcomes
};

struct CohortTable {
  std::size_t mha_prefer = 0, mha_other = 0;
  std::size_t gqa_prefer = 0, gqa_other = 0;
  std::size_t excluded_models = 0;
  double fisher_p = 1.0;
};

struct MagnitudeSummary {
  double improvement_pp = 0.0;  // mean delta over handoff-better pairs
  double degradation_pp = 0.0;  // mean |delta| over peak-better pairs
  double improved_handoff_retained = 0.0, improved_peak_retained = 0.0;
  double degraded_handoff_retained = 0.0, degraded_peak_retained = 0.0;
  double improvement_rate = 0.0;
  double non_improvement_rate = 0.0;
  double net_expected_pp = 0.0;
  double observed_mean_delta_pp = 0.0;
};

struct StudySummary {
  OutcomeCounts overall;
  std::size_t degenerate_pairs = 0;  // counted here only, never in the primary aggregates
  OutcomeCounts overall_including_degenerate;
  std::array<BucketSummary, 3> buckets;
  std::vector<ModelSummary> per_model;  // sorted by model_id
  CohortTable cohort_table;
  std::optional<stats::WilcoxonResult> model_wilcoxon;  // on preference - 0.5, one-sided
  std::optional<stats::WilcoxonResult> trial_wilcoxon;  // on delta_pp, one-sided
  MagnitudeSummary magnitude;
};

/// Deterministic corpus summary; input order does not matter.
inline StudySummary aggregate_study(std::vector<ComparisonRecord> records, const Registry& registry) {
  std::sort(records.begin(), records.end(), [](const ComparisonRecord& a, const ComparisonRecord& b) {
    return std::tie(a.model_id, a.concept_name) < std::tie(b.model_id, b.concept_name);
  });
  StudySummary s;
  s.buckets = {BucketSummary{ScaleBucket::Small, {}, {}}, BucketSummary{ScaleBucket::Medium, {}, {}},
               BucketSummary{ScaleBucket::Large, {}, {}}};
  std::map<std::string, ModelSummary> models;
  std::vector<double> deltas, improved, degraded, ih, ip, dh, dp;

  for (const auto& r : records) {
    const ModelMeta& meta = registry.at(r.model_id);
    ModelSummary& m = models[r.model_id];
    m.model_id = r.model_id;
    m.cohort = meta.cohort;
    s.overall_including_degenerate.add(r.outcome);
    if (comparison_degenerate(r)) {
      ++s.degenerate_pairs;
      ++m.degenerate;
      continue;
    }
    s.overall.add(r.outcome);

    BucketSummary& b = s.buckets[static_cast<std::size_t>(scale_bucket(meta.params))];
    b.counts.add(r.outcome);
    if (std::find(b.models.begin(), b.models.end(), r.model_id) == b.models.end()) b.models.push_back(r.model_id);

    m.counts.add(r.outcome);

    deltas.push_back(r.delta_pp);
    if (r.outcome == Outcome::HandoffBetter) {
      improved.push_back(r.delta_pp);
      ih.push_back(r.handoff_record.retained_pct);
      ip.push_back(r.peak_record.retained_pct);
    } else if (r.outcome == Outcome::PeakBetter) {
      degraded.push_back(-r.delta_pp);
      dh.push_back(r.handoff_record.retained_pct);
      dp.push_back(r.peak_record.retained_pct);
    }
  }

  std::vector<double> prefs;
  for (auto& [id, m] : models) {
    const std::size_t decided = m.counts.handoff_better + m.counts.peak_better;
    if (decided > 0) {
      m.preference = static_cast<double>(m.counts.handoff_better) / static_cast<double>(decided);
      prefs.push_back(*m.preference - 0.5);
    }
    m.prefers_handoff = 2 * m.counts.handoff_better > decided;
    auto& t = s.cohort_table;
    if (m.cohort == Cohort::MHA) (m.prefers_handoff ? t.mha_prefer : t.mha_other)++;
    else if (m.cohort == Cohort::GQA) (m.prefers_handoff ? t.gqa_prefer : t.gqa_other)++;
    else ++t.excluded_models;
    s.per_model.push_back(m);
  }
  auto& t = s.cohort_table;
  t.fisher_p = stats::fisher_exact_one_sided(t.mha_prefer, t.mha_other, t.gqa_prefer, t.gqa_other);

  try {
    s.model_wilcoxon = stats::wilcoxon_signed_rank(prefs, true);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::AllZero) throw;
  }
  try {
    s.trial_wilcoxon = stats::wilcoxon_signed_rank(deltas, true);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::AllZero) throw;
  }

  auto& g = s.magnitude;
  g.improvement_pp = stats::mean(improved);
  g.degradation_pp = stats::mean(degraded);
  g.improved_handoff_retained = stats::mean(ih);
  g.improved_peak_retained = stats::mean(ip);
  g.degraded_handoff_retained = stats::mean(dh);
  g.degraded_peak_retained = stats::mean(dp);
  g.improvement_rate = s.overall.improvement_rate();
  g.non_improvement_rate = s.overall.n ? 1.0 - g.improvement_rate : 0.0;
  g.net_expected_pp =
      stats::net_expected_improvement(g.improvement_pp, g.improvement_rate, g.degradation_pp, g.non_improvement_rate);
  g.observed_mean_delta_pp = stats::mean(deltas);
  return s;
}

}  // namespace gem
