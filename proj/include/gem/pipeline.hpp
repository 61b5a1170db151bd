#pragma once

// Corpus discovery and the per-pair analysis pipeline. Each (model, concept)
// entry is processed end-to-end by one worker and written to its own JSON file;
// the summary is a sequential fold over those files in sorted order, so the
// output bytes do not depend on the worker count or on which entries were reused.

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "gem/controls.hpp"
#include "gem/parallel.hpp"
#include "gem/serialize.hpp"
#include "gem/study.hpp"

namespace gem {

struct CorpusEntry {
  std::string model_id;
  std::string concept_name;
  fs::path path;
};

struct CorpusDiagnostic {
  fs::path path;
  std::string kind;
  std::string message;
};

struct CorpusIndex {
  std::vector<CorpusEntry> entries;  // sorted by (model_id, concept)
  std::vector<CorpusDiagnostic> diagnostics;
  std::size_t patched_dirs = 0;  // directories carrying a patch list, left to the propagator
  Registry registry;
};

/// Every directory below `root` holding a manifest becomes an entry; invalid,
/// duplicate, or unregistered ones are reported as diagnostics instead.
inline CorpusIndex discover_corpus(const fs::path& root, Registry registry) {
  if (!fs::is_directory(root)) throw Error(ErrorKind::MissingFile, "corpus root not found: " + root.string());
  CorpusIndex idx;
  idx.registry = std::move(registry);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == kManifestName) dirs.push_back(e.path().parent_path());
  std::sort(dirs.begin(), dirs.end());

  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& dir : dirs) {
    Manifest m;
    try {
      m = validate_directory(dir);
    } catch (const Error& e) {
      idx.diagnostics.push_back({dir, std::string(to_string(ErrorKind::InvalidManifest)), e.what()});
      continue;
    }
    if (m.annotations.contains("patches")) {
      ++idx.patched_dirs;
      continue;
    }
    if (!idx.registry.contains(m.model_id)) {
      idx.diagnostics.push_back(
          {dir, std::string(to_string(ErrorKind::UnknownModel)), "model '" + m.model_id + "' not in registry"});
      continue;
    }
    if (!seen.insert({m.model_id, m.concept_name}).second) {
      idx.diagnostics.push_back({dir, "Duplicate", "(" + m.model_id + ", " + m.concept_name + ") already indexed"});
      continue;
    }
    idx.entries.push_back({m.model_id, m.concept_name, dir});
  }
  std::sort(idx.entries.begin(), idx.entries.end(), [](const CorpusEntry& a, const CorpusEntry& b) {
    return std::tie(a.model_id, a.concept_name) < std::tie(b.model_id, b.concept_name);
  });
  return idx;
}

struct ControlSet {
  bool width_experiment = true;
  bool random = true;
  bool depth_matched = true;
};

struct RunConfig {
  double epsilon = kDefaultEpsilon;
  WidthRule width_rule;
  std::optional<std::size_t> width_override;
  std::size_t n_random_seeds = kDefaultRandomSeeds;
  std::uint64_t rng_seed = 0;
  ControlSet controls;
  fs::path output_dir = "gem_out";
  std::optional<fs::path> patched_root;  // <root>/<model_id>/<concept>/... patched dumps
  std::size_t workers = 1;
  bool force = false;
};

/// Settings that change results. Paths, worker count, and force are excluded.
inline json config_to_json(const RunConfig& c) {
  return {{"epsilon", num(c.epsilon)},
          {"near_final_threshold", num(c.width_rule.threshold)},
          {"depth_corrected", c.width_rule.depth_corrected},
          {"depth_corrected_min_layers", c.width_rule.min_layers},
          {"width", c.width_override ? json(*c.width_override) : json("adaptive")},
          {"n_random_seeds", c.n_random_seeds},
          {"rng_seed", c.rng_seed},
          {"controls",
           {{"width_experiment", c.controls.width_experiment},
            {"random", c.controls.random},
            {"depth_matched", c.controls.depth_matched}}},
          {"patched_propagation", c.patched_root.has_value()}};
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_fingerprint(const RunConfig& c) { return hex64(io::fnv1a(config_to_json(c).dump())); }

inline std::uint64_t pair_seed(std::uint64_t rng_seed, const std::string& model_id, const std::string& concept_name) {
  return io::fnv1a(model_id + '\x1f' + concept_name, io::splitmix64(rng_seed));
}

/// File-system-safe name for a pair's output file.
inline std::string pair_file_name(const std::string& model_id, const std::string& concept_name) {
  auto clean = [](std::string s) {
    for (char& ch : s)
      if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
    return s;
  };
  return clean(model_id) + "__" + clean(concept_name) + ".json";
}

namespace detail {

inline json failure(const std::string& stage, const Error& e) {
  const char* state = is_degenerate_result(e.kind()) ? "degenerate" : (is_input_error(e.kind()) ? "invalid_input" : "error");
  return {{"state", state}, {"stage", stage}, {"error", std::string(to_string(e.kind()))}, {"message", e.what()}};
}

inline json excluded(const Error& e) {
  return {{"status", is_degenerate_result(e.kind()) ? "excluded" : "error"},
          {"reason", std::string(to_string(e.kind()))},
          {"message", e.what()}};
}

}  // namespace detail

inline json to_json_width(const Gem& gem, std::size_t n_layers, const RunConfig& cfg) {
  const WidthDecision d = ablation_width(gem, n_layers, cfg.width_rule);
  return {{"rule_width", d.width},
          {"triggered", d.triggered},
          {"effective_width", effective_width(gem.handoff_layer, n_layers, cfg.width_rule, cfg.width_override)}};
}

/// trajectory -> gem -> comparison -> controls for one loaded set. Failures are
/// recorded in `status` (core stages) or inside `controls` (control stages).
inline json process_pair(const ActivationSet& set, const RunConfig& cfg, std::uint64_t seed,
                         const Propagator* propagator = nullptr) {
  json doc;
  doc["trajectory"] = nullptr;
  doc["gem"] = nullptr;
  doc["comparison"] = nullptr;
  doc["controls"] = json::object();
  doc["status"] = {{"state", "ok"}};

  std::string stage = "trajectory";
  try {
    const Trajectory traj = compute_trajectory(set);
    doc["trajectory"] = to_json(traj);
    stage = "detect";
    const Gem gem = detect_handoff(traj, cfg.epsilon);
    doc["gem"] = to_json(gem);
    doc["gem"]["width"] = to_json_width(gem, set.n_layers(), cfg);
    stage = "comparison";
    const ComparisonRecord cmp = compare_handoff_vs_peak(set, traj, gem, cfg.width_rule, cfg.width_override);
    doc["comparison"] = to_json(cmp);

    json& controls = doc["controls"];
    if (cfg.controls.width_experiment) {
      try {
        controls["width_experiment"] = to_json(adaptive_width_experiment(set, traj, gem, cfg.width_rule));
      } catch (const Error& e) {
        controls["width_experiment"] = detail::excluded(e);
      }
    }
    if (cfg.controls.random) {
      try {
        json r = to_json(random_direction_control(set, traj, gem, cfg.width_rule, cfg.n_random_seeds, seed,
                                                  cfg.width_override));
        r["status"] = "ok";
        controls["random"] = r;
      } catch (const Error& e) {
        controls["random"] = detail::excluded(e);
      }
    }
    if (cfg.controls.depth_matched) {
      try {
        controls["depth_matched"] =
            to_json(depth_matched_control(set, traj, gem, cfg.width_rule, propagator, cfg.width_override));
      } catch (const Error& e) {
        controls["depth_matched"] = detail::excluded(e);
      }
    }
  } catch (const Error& e) {
    doc["status"] = detail::failure(stage, e);
  }
  return doc;
}

inline std::string input_fingerprint(const fs::path& dir) {
  const Manifest m = read_manifest(dir);
  std::string key = manifest_to_json(m).dump();
  for (const auto& [name, size] : blob_sizes(dir, m)) key += "|" + name + ":" + std::to_string(size);
  return hex64(io::fnv1a(key));
}

inline json pair_meta(const CorpusEntry& e, const ModelMeta& meta, const Manifest& m, const RunConfig& cfg,
                      const std::string& input_fp) {
  return {{"model_id", e.model_id},
          {"concept", e.concept_name},
          {"n_layers", m.n_layers},
          {"hidden_dim", m.hidden_dim},
          {"n_pairs", m.n_pairs},
          {"cohort", to_string(meta.cohort)},
          {"params", meta.params},
          {"pair_seed", pair_seed(cfg.rng_seed, e.model_id, e.concept_name)},
          {"config_fingerprint", config_fingerprint(cfg)},
          {"input_fingerprint", input_fp}};
}

/// Loads, analyzes, and assembles the per-pair document for a corpus entry.
inline json run_entry(const CorpusEntry& e, const ModelMeta& meta, const RunConfig& cfg) {
  json doc;
  try {
    const ActivationSet set = load_activation_set(e.path);
    const std::string fp = input_fingerprint(e.path);
    std::optional<PatchedDirectoryPropagator> prop;
    if (cfg.patched_root) {
      const fs::path dir = *cfg.patched_root / e.model_id / e.concept_name;
      if (fs::is_directory(dir)) prop.emplace(set, dir);
    }
    doc = process_pair(set, cfg, pair_seed(cfg.rng_seed, e.model_id, e.concept_name), prop ? &*prop : nullptr);
    doc["meta"] = pair_meta(e, meta, set.manifest, cfg, fp);
  } catch (const Error& err) {
    doc = {{"trajectory", nullptr}, {"gem", nullptr}, {"comparison", nullptr}, {"controls", json::object()}};
    doc["status"] = detail::failure("load", err);
    doc["meta"] = {{"model_id", e.model_id},
                   {"concept", e.concept_name},
                   {"cohort", to_string(meta.cohort)},
                   {"params", meta.params},
                   {"config_fingerprint", config_fingerprint(cfg)}};
  }
  return doc;
}

inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

namespace detail {

inline std::optional<double> get_num(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

inline json describe(const std::vector<double>& v) {
  if (v.empty()) return {{"n", 0}, {"mean", nullptr}, {"median", nullptr}};
  return {{"n", v.size()}, {"mean", num(stats::mean(v))}, {"median", num(stats::median(v))}};
}

inline double fraction(std::size_t k, std::size_t n) { return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0; }

}  // namespace detail

/// Entry-exit cosine distribution over detected pairs.
inline json eec_table(const std::vector<json>& docs) {
  std::vector<double> eec, max_rot;
  for (const auto& d : docs) {
    if (d.at("gem").is_null()) continue;
    eec.push_back(d["gem"]["eec"].get<double>());
    if (auto m = detail::get_num(d["trajectory"], "max_angular_velocity")) max_rot.push_back(*m);
  }
  std::vector<double> abs_eec;
  for (double v : eec) abs_eec.push_back(std::abs(v));
  std::size_t below_half = 0, below_tenth = 0;
  for (double v : eec) {
    below_half += v < 0.5;
    below_tenth += v < 0.1;
  }
  return {{"n", eec.size()},
          {"mean_eec", eec.empty() ? json(nullptr) : num(stats::mean(eec))},
          {"median_eec", eec.empty() ? json(nullptr) : num(stats::median(eec))},
          {"mean_abs_eec", eec.empty() ? json(nullptr) : num(stats::mean(abs_eec))},
          {"fraction_eec_below_0_5", num(detail::fraction(below_half, eec.size()))},
          {"fraction_eec_below_0_1", num(detail::fraction(below_tenth, eec.size()))},
          {"mean_max_rotation_per_layer", max_rot.empty() ? json(nullptr) : num(stats::mean(max_rot))}};
}

/// Mean EEC per model, most-rotating first.
inline json per_model_eec(const std::vector<json>& docs) {
  std::map<std::string, std::pair<std::uint64_t, std::vector<double>>> by_model;
  for (const auto& d : docs) {
    if (d.at("gem").is_null()) continue;
    auto& slot = by_model[d["meta"]["model_id"].get<std::string>()];
    slot.first = d["meta"]["params"].get<std::uint64_t>();
    slot.second.push_back(d["gem"]["eec"].get<double>());
  }
  std::vector<std::tuple<double, std::string, std::uint64_t, std::size_t>> rows;
  for (const auto& [id, v] : by_model) rows.emplace_back(stats::mean(v.second), id, v.first, v.second.size());
  std::sort(rows.begin(), rows.end());
  json out = json::array();
  for (const auto& [m, id, params, n] : rows)
    out.push_back({{"model_id", id}, {"params", params}, {"mean_eec", num(m)}, {"n", n}});
  return out;
}

/// Handoff relative depth per concept, shallowest first.
inline json handoff_depth_by_concept(const std::vector<json>& docs) {
  std::map<std::string, std::vector<double>> by_concept;
  for (const auto& d : docs) {
    if (d.at("gem").is_null()) continue;
    by_concept[d["meta"]["concept"].get<std::string>()].push_back(d["gem"]["relative_depth"].get<double>());
  }
  std::vector<std::tuple<double, std::string, double, std::size_t>> rows;
  for (const auto& [c, v] : by_concept) rows.emplace_back(stats::mean(v), c, stats::median(v), v.size());
  std::sort(rows.begin(), rows.end());
  json out = json::array();
  for (const auto& [m, c, med, n] : rows)
    out.push_back({{"concept", c}, {"mean_relative_depth", num(m)}, {"median_relative_depth", num(med)}, {"n", n}});
  return out;
}

/// Near-final rule against fixed width 3.
inline json adaptive_width_table(const std::vector<json>& docs) {
  std::vector<double> triggered, improved, untriggered, all;
  for (const auto& d : docs) {
    const json& c = d.at("controls");
    if (!c.contains("width_experiment") || !c["width_experiment"].contains("triggered")) continue;
    const json& w = c["width_experiment"];
    const double delta = w["delta_pp"].get<double>();
    all.push_back(delta);
    if (w["triggered"].get<bool>()) {
      triggered.push_back(delta);
      if (delta > 0.0) improved.push_back(delta);
    } else {
      untriggered.push_back(delta);
    }
  }
  return {{"n", all.size()},
          {"triggered", triggered.size()},
          {"triggered_improved", improved.size()},
          {"mean_delta_pp_improved", improved.empty() ? json(nullptr) : num(stats::mean(improved))},
          {"mean_delta_pp_triggered", triggered.empty() ? json(nullptr) : num(stats::mean(triggered))},
          {"default_n", untriggered.size()},
          {"mean_delta_pp_default", untriggered.empty() ? json(nullptr) : num(stats::mean(untriggered))},
          {"mean_delta_pp_overall", all.empty() ? json(nullptr) : num(stats::mean(all))}};
}

namespace detail {

struct RandomGroup {
  std::vector<double> concept_pct, random_pct, ratio, z;
  std::size_t beats_all = 0;

  json to_json() const {
    const std::size_t n = concept_pct.size();
    return {{"n", n},
            {"mean_concept_reduction_pct", n ? num(stats::mean(concept_pct)) : json(nullptr)},
            {"mean_random_reduction_pct", n ? num(stats::mean(random_pct)) : json(nullptr)},
            {"median_specificity_ratio", ratio.empty() ? json(nullptr) : num(stats::median(ratio))},
            {"median_z", z.empty() ? json(nullptr) : num(stats::median(z))},
            {"beats_all", beats_all},
            {"beats_all_rate", num(fraction(beats_all, n))}};
  }
};

}  // namespace detail

inline json random_control_table(const std::vector<json>& docs) {
  detail::RandomGroup all;
  std::map<std::string, detail::RandomGroup> by_cohort;
  std::size_t excluded = 0, errors = 0;
  for (const auto& d : docs) {
    const json& c = d.at("controls");
    if (!c.contains("random")) continue;
    const json& r = c["random"];
    if (r["status"] != "ok") {
      (r["status"] == "excluded" ? excluded : errors)++;
      continue;
    }
    for (auto* g : {&all, &by_cohort[d["meta"]["cohort"].get<std::string>()]}) {
      g->concept_pct.push_back(100.0 * r["concept_reduction"].get<double>());
      g->random_pct.push_back(100.0 * r["mean_random_reduction"].get<double>());
      if (auto v = detail::get_num(r, "specificity_ratio")) g->ratio.push_back(*v);
      if (auto v = detail::get_num(r, "z_score")) g->z.push_back(*v);
      g->beats_all += r["beats_all"].get<bool>();
    }
  }
  json out = all.to_json();
  out["excluded_zero_reduction"] = excluded;
  out["errors"] = errors;
  json cohorts = json::object();
  for (const auto& [name, g] : by_cohort) cohorts[name] = g.to_json();
  out["by_cohort"] = cohorts;
  return out;
}

inline json depth_matched_table(const std::vector<json>& docs) {
  std::vector<double> clean, with_degenerate;
  std::size_t clean_wins = 0, all_wins = 0, skipped = 0, errors = 0, degenerate = 0;
  std::map<std::string, std::size_t> measured_at;
  for (const auto& d : docs) {
    const json& c = d.at("controls");
    if (!c.contains("depth_matched")) continue;
    const json& r = c["depth_matched"];
    if (r["status"] == "skipped") {
      ++skipped;
      continue;
    }
    if (r["status"] != "ok") {
      ++errors;
      continue;
    }
    ++measured_at[r["measured_at"].get<std::string>()];
    const double adv = r["advantage_pp"].get<double>();
    const bool win = r["gem_better"].get<bool>();
    with_degenerate.push_back(adv);
    all_wins += win;
    if (r["degenerate"].get<bool>()) {
      ++degenerate;
      continue;
    }
    clean.push_back(adv);
    clean_wins += win;
  }
  auto block = [](const std::vector<double>& v, std::size_t wins) {
    return json{{"n", v.size()},
                {"gem_better", wins},
                {"gem_better_rate", num(detail::fraction(wins, v.size()))},
                {"mean_advantage_pp", v.empty() ? json(nullptr) : num(stats::mean(v))},
                {"median_advantage_pp", v.empty() ? json(nullptr) : num(stats::median(v))}};
  };
  return {{"clean", block(clean, clean_wins)},
          {"including_degenerate", block(with_degenerate, all_wins)},
          {"degenerate", degenerate},
          {"skipped", skipped},
          {"errors", errors},
          {"measured_at", measured_at}};
}

/// Comparisons whose handoff layer sits above the separation peak.
inline json handoff_peak_order(const std::vector<json>& docs) {
  std::size_t n = 0, violations = 0;
  for (const auto& d : docs) {
    if (d.at("comparison").is_null()) continue;
    ++n;
    const auto lh = d["comparison"]["handoff"]["probe_layer"].get<std::size_t>();
    const auto lp = d["comparison"]["peak"]["probe_layer"].get<std::size_t>();
    violations += lh < lp;
  }
  return {{"n", n}, {"handoff_before_peak", violations}};
}

/// Fold over per-pair documents (any order) into the study summary document.
inline json build_summary(std::vector<json> docs, const Registry& registry, const RunConfig& cfg,
                          const std::vector<CorpusDiagnostic>& diagnostics = {}) {
  std::sort(docs.begin(), docs.end(), [](const json& a, const json& b) {
    return std::tie(a["meta"]["model_id"].get_ref<const std::string&>(), a["meta"]["concept"].get_ref<const std::string&>()) <
           std::tie(b["meta"]["model_id"].get_ref<const std::string&>(), b["meta"]["concept"].get_ref<const std::string&>());
  });
  std::vector<ComparisonRecord> comparisons;
  json failures = json::array();
  std::map<std::string, std::size_t> states;
  for (const auto& d : docs) {
    ++states[d["status"]["state"].get<std::string>()];
    if (d["status"]["state"] != "ok") {
      failures.push_back({{"model_id", d["meta"]["model_id"]},
                          {"concept", d["meta"]["concept"]},
                          {"state", d["status"]["state"]},
                          {"stage", d["status"]["stage"]},
                          {"error", d["status"]["error"]}});
      continue;
    }
    comparisons.push_back(comparison_from_json(d["comparison"]));
  }
  json diag = json::array();
  for (const auto& x : diagnostics) diag.push_back({{"path", x.path.generic_string()}, {"kind", x.kind}, {"message", x.message}});

  json s;
  s["config"] = config_to_json(cfg);
  s["n_entries"] = docs.size();
  s["status_counts"] = states;
  s["failures"] = failures;
  s["diagnostics"] = diag;
  s["comparison"] = to_json(aggregate_study(comparisons, registry));
  s["eec_table"] = eec_table(docs);
  s["per_model_eec"] = per_model_eec(docs);
  s["handoff_depth_by_concept"] = handoff_depth_by_concept(docs);
  s["adaptive_width"] = adaptive_width_table(docs);
  s["random_control"] = random_control_table(docs);
  s["depth_matched"] = depth_matched_table(docs);
  s["handoff_peak_order"] = handoff_peak_order(docs);
  return s;
}

inline std::string csv_field(const json& v) {
  if (v.is_null()) return "";
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) return io::format_double(v.get<double>());
  if (v.is_number()) return v.dump();
  std::string s = v.get<std::string>();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

inline const char* const kPairCsvColumns[] = {
    "model_id",           "concept",          "cohort",          "status",          "error",
    "n_layers",           "caz_start",        "caz_end",         "handoff_layer",   "relative_depth",
    "eec",                "handoff_cos",      "peak_layer",      "handoff_width",   "handoff_retained_pct",
    "peak_retained_pct",  "delta_pp",         "outcome",         "degenerate",      "width_triggered",
    "width_delta_pp",     "concept_reduction", "mean_random_reduction", "specificity_ratio", "z_score",
    "empirical_p",        "depth_control_layer", "depth_advantage_pp", "depth_measured_at"};

/// One flat row per pair.
inline std::string pairs_csv(std::vector<json> docs) {
  std::sort(docs.begin(), docs.end(), [](const json& a, const json& b) {
    return std::tie(a["meta"]["model_id"].get_ref<const std::string&>(), a["meta"]["concept"].get_ref<const std::string&>()) <
           std::tie(b["meta"]["model_id"].get_ref<const std::string&>(), b["meta"]["concept"].get_ref<const std::string&>());
  });
  std::ostringstream out;
  bool first = true;
  for (const char* c : kPairCsvColumns) {
    out << (first ? "" : ",") << c;
    first = false;
  }
  out << "\n";
  auto pick = [](const json& j, std::initializer_list<const char*> path) -> json {
    const json* cur = &j;
    for (const char* k : path) {
      if (!cur->is_object() || !cur->contains(k)) return nullptr;
      cur = &(*cur)[k];
    }
    return *cur;
  };
  for (const auto& d : docs) {
    const json row[] = {
        pick(d, {"meta", "model_id"}),
        pick(d, {"meta", "concept"}),
        pick(d, {"meta", "cohort"}),
        pick(d, {"status", "state"}),
        pick(d, {"status", "error"}),
        pick(d, {"meta", "n_layers"}),
        pick(d, {"gem", "caz_start"}),
        pick(d, {"gem", "caz_end"}),
        pick(d, {"gem", "handoff_layer"}),
        pick(d, {"gem", "relative_depth"}),
        pick(d, {"gem", "eec"}),
        pick(d, {"gem", "handoff_cos"}),
        pick(d, {"comparison", "peak", "probe_layer"}),
        pick(d, {"comparison", "handoff", "width"}),
        pick(d, {"comparison", "handoff", "retained_pct"}),
        pick(d, {"comparison", "peak", "retained_pct"}),
        pick(d, {"comparison", "delta_pp"}),
        pick(d, {"comparison", "outcome"}),
        pick(d, {"comparison", "degenerate"}),
        pick(d, {"controls", "width_experiment", "triggered"}),
        pick(d, {"controls", "width_experiment", "delta_pp"}),
        pick(d, {"controls", "random", "concept_reduction"}),
        pick(d, {"controls", "random", "mean_random_reduction"}),
        pick(d, {"controls", "random", "specificity_ratio"}),
        pick(d, {"controls", "random", "z_score"}),
        pick(d, {"controls", "random", "empirical_p"}),
        pick(d, {"controls", "depth_matched", "control_layer"}),
        pick(d, {"controls", "depth_matched", "advantage_pp"}),
        pick(d, {"controls", "depth_matched", "measured_at"}),
    };
    first = true;
    for (const auto& v : row) {
      out << (first ? "" : ",") << csv_field(v);
      first = false;
    }
    out << "\n";
  }
  return out.str();
}

struct StudyRun {
  json summary;
  std::vector<json> pair_docs;
  std::size_t computed = 0;
  std::size_t reused = 0;
};

namespace detail {

// A stored pair document is reusable when it parses and was produced from the
// same inputs under the same settings.
inline std::optional<json> reusable(const fs::path& file, const std::string& config_fp, const fs::path& input_dir) {
  if (!fs::exists(file)) return std::nullopt;
  try {
    json j = json::parse(io::read_file(file));
    const json& meta = j.at("meta");
    if (meta.at("config_fingerprint") != config_fp) return std::nullopt;
    if (!meta.contains("input_fingerprint") || meta["input_fingerprint"] != input_fingerprint(input_dir))
      return std::nullopt;
    for (const char* k : {"trajectory", "gem", "comparison", "controls", "status"})
      if (!j.contains(k)) return std::nullopt;
    return j;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

/// Runs every entry (in parallel), writes pairs/<model>__<concept>.json, then
/// summary.json and summary.csv from the stored documents.
inline StudyRun run_study(const CorpusIndex& index, const RunConfig& cfg) {
  if (index.entries.empty()) throw Error(ErrorKind::MissingFile, "corpus index is empty");
  const fs::path pairs_dir = cfg.output_dir / "pairs";
  fs::create_directories(pairs_dir);
  const std::string fp = config_fingerprint(cfg);

  StudyRun run;
  run.pair_docs.resize(index.entries.size());
  std::vector<char> was_reused(index.entries.size(), 0);
  parallel_for(index.entries.size(), cfg.workers, [&](std::size_t i) {
    const CorpusEntry& e = index.entries[i];
    const fs::path file = pairs_dir / pair_file_name(e.model_id, e.concept_name);
    if (!cfg.force) {
      if (auto doc = detail::reusable(file, fp, e.path)) {
        run.pair_docs[i] = std::move(*doc);
        was_reused[i] = 1;
        return;
      }
    }
    const std::string text = dump_json(run_entry(e, index.registry.at(e.model_id), cfg));
    io::write_file_atomic(file, text);
    // summarize the stored form so fresh and reused documents are indistinguishable
    run.pair_docs[i] = json::parse(text);
  });
  for (char r : was_reused) (r ? run.reused : run.computed)++;

  run.summary = build_summary(run.pair_docs, index.registry, cfg, index.diagnostics);
  io::write_file_atomic(cfg.output_dir / "summary.json", dump_json(run.summary));
  io::write_file_atomic(cfg.output_dir / "summary.csv", pairs_csv(run.pair_docs));
  return run;
}

}  // namespace gem
