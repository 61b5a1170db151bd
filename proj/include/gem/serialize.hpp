#pragma once

// JSON views of the analysis records. Keys are sorted by the json type itself;
// doubles serialize as shortest round-trip text and non-finite values as null.

#include <cmath>
#include <optional>
#include <vector>

#include "gem/ablation.hpp"
#include "gem/controls.hpp"
#include "gem/detector.hpp"
#include "gem/geometry.hpp"
#include "gem/relay.hpp"
#include "gem/study.hpp"

namespace gem {

inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json opt_num(const std::optional<double>& v) { return v ? num(*v) : json(nullptr); }

inline json opt_vec(const std::vector<std::optional<double>>& v) {
  json a = json::array();
  for (const auto& x : v) a.push_back(opt_num(x));
  return a;
}

inline json vec(std::span<const double> v) {
  json a = json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

/// Signed cosine of every defined direction with the final-layer direction.
inline std::vector<std::optional<double>> cosines_to_final(const Trajectory& t) {
  std::vector<std::optional<double>> out(t.n_layers);
  const std::size_t last = t.n_layers - 1;
  if (!t.direction_defined(last)) return out;
  for (std::size_t l = 0; l < t.n_layers; ++l)
    if (t.direction_defined(l)) out[l] = t.directions[l]->dot(*t.directions[last]);
  return out;
}

inline std::optional<double> max_angular_velocity(const Trajectory& t) {
  std::optional<double> best;
  for (const auto& w : t.angular_velocity)
    if (w) best = best ? std::max(*best, *w) : *w;
  return best;
}

inline json to_json(const Trajectory& t, bool with_directions = false) {
  json j;
  j["n_layers"] = t.n_layers;
  j["separation"] = opt_vec(t.separation);
  j["angular_velocity"] = opt_vec(t.angular_velocity);
  j["stability"] = opt_vec(t.stability);
  j["cos_to_final"] = opt_vec(cosines_to_final(t));
  j["max_angular_velocity"] = opt_num(max_angular_velocity(t));
  if (with_directions) {
    json d = json::array();
    for (const auto& u : t.directions) d.push_back(u ? vec(u->components()) : json(nullptr));
    j["directions"] = d;
  }
  return j;
}

inline json to_json(const Gem& g, bool with_direction = true) {
  json j;
  j["n_layers"] = g.n_layers;
  j["caz_start"] = g.caz_start;
  j["caz_end"] = g.caz_end;
  j["handoff_layer"] = g.handoff_layer;
  j["handoff_cos"] = num(g.handoff_cos);
  j["eec"] = num(g.eec);
  j["abs_eec"] = num(std::abs(g.eec));
  j["relative_depth"] = num(g.relative_depth);
  j["rotation_detected"] = g.rotation_detected;
  if (with_direction) j["settled_direction"] = vec(g.settled_direction.components());
  return j;
}

inline json to_json(const GemNode& n) {
  return {{"peak_layer", n.peak_layer},
          {"node_handoff", n.node_handoff},
          {"peak_separation", num(n.peak_separation)},
          {"node_direction", vec(n.node_direction.components())}};
}

inline json to_json(const AblationRecord& r) {
  json j;
  j["probe_layer"] = r.probe_layer;
  j["width"] = r.width;
  j["direction_source"] = to_string(r.direction_source);
  if (r.direction_source == DirectionSource::RandomSeed) j["random_seed_index"] = r.random_seed_index;
  j["baseline_separation"] = num(r.baseline_separation);
  j["ablated_separation"] = num(r.ablated_separation);
  j["retained_pct"] = num(r.retained_pct);
  j["measured_at"] = to_string(r.measured_at);
  j["measured_layers"] = r.measured_layers;
  j["baseline_per_layer"] = vec(r.baseline_per_layer);
  j["ablated_per_layer"] = vec(r.ablated_per_layer);
  j["degenerate"] = r.degenerate();
  return j;
}

inline json to_json(const ComparisonRecord& c) {
  return {{"model_id", c.model_id},
          {"concept", c.concept_name},
          {"handoff", to_json(c.handoff_record)},
          {"peak", to_json(c.peak_record)},
          {"outcome", to_string(c.outcome)},
          {"delta_pp", num(c.delta_pp)},
          {"degenerate", comparison_degenerate(c)}};
}

inline json to_json(const WidthExperimentRecord& w) {
  return {{"triggered", w.triggered},
          {"adaptive_width", w.adaptive_width},
          {"fixed_width", w.fixed_width},
          {"adaptive_retained_pct", num(w.adaptive_retained_pct)},
          {"fixed_retained_pct", num(w.fixed_retained_pct)},
          {"delta_pp", num(w.delta_pp)}};
}

inline json to_json(const RandomControlRecord& r, bool with_records = false) {
  json j;
  j["concept_reduction"] = num(r.concept_reduction);
  j["random_reductions"] = vec(r.random_reductions);
  j["mean_random_reduction"] = num(r.mean_random_reduction);
  j["specificity_ratio"] = opt_num(r.specificity_ratio);
  j["z_score"] = opt_num(r.z_score);
  j["beats_all"] = r.beats_all;
  j["empirical_p"] = num(r.empirical_p);
  j["concept_record"] = to_json(r.concept_record);
  if (with_records) {
    json a = json::array();
    for (const auto& x : r.random_records) a.push_back(to_json(x));
    j["random_records"] = a;
  }
  return j;
}

inline json to_json(const DepthMatchedRecord& d) {
  json j;
  j["status"] = d.skipped ? "skipped" : "ok";
  if (d.skipped) {
    j["reason"] = d.skip_reason;
    return j;
  }
  j["control_layer"] = d.control_layer;
  j["gem"] = to_json(d.gem_record);
  j["control"] = to_json(d.control_record);
  j["advantage_pp"] = num(d.advantage_pp);
  j["gem_better"] = d.gem_better;
  j["degenerate"] = d.degenerate;
  j["measured_at"] = to_string(d.measured_at);
  return j;
}

inline json to_json(const RelayReport& r) {
  json j;
  j["concept"] = r.concept_name;
  json nodes = json::array();
  for (const auto& n : r.nodes) nodes.push_back(to_json(n));
  j["nodes"] = nodes;
  j["measure_layers"] = r.measure_layers;
  json subsets = json::array();
  for (const auto& s : r.per_subset)
    subsets.push_back({{"mask", s.mask}, {"members", s.members}, {"reductions", vec(s.reductions)}});
  j["per_subset"] = subsets;
  j["n_subsets"] = r.per_subset.size();
  j["solo_final_reductions"] = vec(r.solo_final_reductions);
  j["dominant_node"] = r.dominant_node;
  j["synergy"] = num(r.synergy);
  j["cross_disruption"] = opt_num(r.cross_disruption);
  return j;
}

inline json to_json(const OutcomeCounts& c) {
  return {{"n", c.n},
          {"handoff_better", c.handoff_better},
          {"peak_better", c.peak_better},
          {"ties", c.ties},
          {"at_least_as_good", c.handoff_better + c.ties},
          {"improvement_rate", num(c.improvement_rate())},
          {"at_least_as_good_rate", num(c.at_least_as_good_rate())}};
}

inline json to_json(const stats::WilcoxonResult& w) {
  return {{"w", num(w.w)}, {"p", num(w.p)}, {"n_used", w.n_used}, {"exact", w.exact}, {"one_sided", true}};
}

inline json to_json(const StudySummary& s) {
  json j;
  j["overall"] = to_json(s.overall);
  j["degenerate_pairs"] = s.degenerate_pairs;
  j["overall_including_degenerate"] = to_json(s.overall_including_degenerate);
  json buckets = json::array();
  for (const auto& b : s.buckets) {
    json e = to_json(b.counts);
    e["bucket"] = to_string(b.bucket);
    e["models"] = b.models;
    buckets.push_back(e);
  }
  j["scale_buckets"] = buckets;
  json models = json::array();
  for (const auto& m : s.per_model) {
    json e = to_json(m.counts);
    e["model_id"] = m.model_id;
    e["cohort"] = to_string(m.cohort);
    e["degenerate"] = m.degenerate;
    e["preference"] = opt_num(m.preference);
    e["prefers_handoff"] = m.prefers_handoff;
    models.push_back(e);
  }
  j["per_model"] = models;
  const auto& t = s.cohort_table;
  j["cohort_table"] = {{"mha_prefer", t.mha_prefer}, {"mha_other", t.mha_other},
                       {"gqa_prefer", t.gqa_prefer}, {"gqa_other", t.gqa_other},
                       {"excluded_models", t.excluded_models}, {"fisher_p_one_sided", num(t.fisher_p)}};
  j["model_wilcoxon"] = s.model_wilcoxon ? to_json(*s.model_wilcoxon) : json(nullptr);
  j["trial_wilcoxon"] = s.trial_wilcoxon ? to_json(*s.trial_wilcoxon) : json(nullptr);
  const auto& g = s.magnitude;
  j["magnitude"] = {{"improvement_pp", num(g.improvement_pp)},
                    {"degradation_pp", num(g.degradation_pp)},
                    {"improved_handoff_retained_pct", num(g.improved_handoff_retained)},
                    {"improved_peak_retained_pct", num(g.improved_peak_retained)},
                    {"degraded_handoff_retained_pct", num(g.degraded_handoff_retained)},
                    {"degraded_peak_retained_pct", num(g.degraded_peak_retained)},
                    {"improvement_rate", num(g.improvement_rate)},
                    {"non_improvement_rate", num(g.non_improvement_rate)},
                    {"net_expected_pp", num(g.net_expected_pp)},
                    {"observed_mean_delta_pp", num(g.observed_mean_delta_pp)}};
  return j;
}

// Readers used by aggregation over stored per-pair files.

inline double json_double(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

inline Outcome outcome_from_string(const std::string& s) {
  if (s == "handoff_better") return Outcome::HandoffBetter;
  if (s == "peak_better") return Outcome::PeakBetter;
  if (s == "tie") return Outcome::Tie;
  throw Error(ErrorKind::BadField, "unknown outcome '" + s + "'");
}

/// Rebuilds the fields of a comparison that aggregation consumes.
inline ComparisonRecord comparison_from_json(const json& j) {
  ComparisonRecord c;
  c.model_id = j.at("model_id").get<std::string>();
  c.concept_name = j.at("concept").get<std::string>();
  c.handoff_record.retained_pct = json_double(j.at("handoff").at("retained_pct"));
  c.handoff_record.probe_layer = j.at("handoff").at("probe_layer").get<std::size_t>();
  c.peak_record.retained_pct = json_double(j.at("peak").at("retained_pct"));
  c.peak_record.probe_layer = j.at("peak").at("probe_layer").get<std::size_t>();
  c.delta_pp = json_double(j.at("delta_pp"));
  c.outcome = outcome_from_string(j.at("outcome").get<std::string>());
  return c;
}

}  // namespace gem
