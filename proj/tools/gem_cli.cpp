// gem: command-line front end. Every number printed here comes from the library;
// this file only parses flags, loads inputs, and formats output.
//
// Exit codes: 0 ok, 2 input error, 3 degenerate result, 4 internal error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gem/gem.hpp"

namespace {

using gem::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitDegenerate = 3;
constexpr int kExitInternal = 4;

struct Globals {
  double epsilon = gem::kDefaultEpsilon;
  double near_final_threshold = 0.85;
  bool depth_corrected = false;
  std::optional<std::size_t> width;
  std::size_t seeds = gem::kDefaultRandomSeeds;
  std::uint64_t rng_seed = 0;
  std::string out;
  std::string format = "json";
  std::string registry = GEM_DATA_DIR "/model_registry.json";
  std::size_t workers = 1;

  gem::WidthRule rule() const {
    gem::WidthRule r;
    r.threshold = near_final_threshold;
    r.depth_corrected = depth_corrected;
    return r;
  }
};

void emit(const Globals& g, const std::string& text) {
  if (g.out.empty()) {
    std::cout << text;
  } else {
    gem::io::write_file_atomic(g.out, text);
  }
}

std::string csv_rows(const std::vector<std::string>& header, const std::vector<std::vector<json>>& rows) {
  std::ostringstream out;
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << gem::csv_field(row[i]);
    out << "\n";
  }
  return out.str();
}

std::vector<std::vector<json>> record_rows(const std::vector<std::pair<std::string, gem::AblationRecord>>& recs) {
  std::vector<std::vector<json>> rows;
  for (const auto& [label, r] : recs)
    rows.push_back({label, r.probe_layer, r.width, gem::to_string(r.direction_source), gem::num(r.baseline_separation),
                    gem::num(r.ablated_separation), gem::num(r.retained_pct), gem::to_string(r.measured_at),
                    r.degenerate()});
  return rows;
}

const std::vector<std::string> kRecordHeader = {"record",      "probe_layer",  "width",       "direction_source", "baseline_separation",
                                                "ablated_separation", "retained_pct", "measured_at", "degenerate"};

// synth ----------------------------------------------------------------------

struct SynthArgs {
  gem::SyntheticSpec spec;
  bool demo = false;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  if (g.out.empty()) throw gem::Error(gem::ErrorKind::BadField, "synth needs --out <directory>");
  if (a.demo) {
    const fs::path reg = gem::write_demo_corpus(g.out, g.rng_seed);
    std::cout << json{{"corpus", (fs::path(g.out) / "corpus").generic_string()}, {"registry", reg.generic_string()}}.dump(2)
              << "\n";
    return kExitOk;
  }
  gem::SyntheticSpec spec = a.spec;
  spec.rng_seed = g.rng_seed;
  const auto res = gem::generate_synthetic(spec);
  gem::write_activation_set(res.set, g.out);
  json truth = {{"caz_start", res.truth.caz_start},
                {"caz_end", res.truth.caz_end},
                {"handoff_layer", res.truth.handoff_layer},
                {"angle_degrees", res.truth.angle_degrees}};
  gem::io::write_file_atomic(fs::path(g.out) / "ground_truth.json", truth.dump(2) + "\n");
  std::cout << truth.dump(2) << "\n";
  return kExitOk;
}

// validate -------------------------------------------------------------------

int cmd_validate(const Globals& g, const std::string& dir) {
  const gem::Manifest m = gem::validate_directory(dir);
  gem::load_activation_set(dir);  // rejects non-finite values
  emit(g, json{{"valid", true},
               {"model_id", m.model_id},
               {"concept", m.concept_name},
               {"n_layers", m.n_layers},
               {"n_pairs", m.n_pairs},
               {"hidden_dim", m.hidden_dim}}
                  .dump(2) +
              "\n");
  return kExitOk;
}

// analyze --------------------------------------------------------------------

int cmd_analyze(const Globals& g, const std::string& dir, const std::vector<double>& sweep, bool directions) {
  const gem::ActivationSet set = gem::load_activation_set(dir);
  const gem::Trajectory traj = gem::compute_trajectory(set);
  const gem::Gem gem_ = gem::detect_handoff(traj, g.epsilon);

  if (g.format == "csv") {
    const auto cos = gem::cosines_to_final(traj);
    std::vector<std::vector<json>> rows;
    for (std::size_t l = 0; l < traj.n_layers; ++l)
      rows.push_back({l, gem::opt_num(traj.separation[l]), gem::opt_num(traj.angular_velocity[l]),
                      gem::opt_num(traj.stability[l]), gem::opt_num(cos[l])});
    emit(g, csv_rows({"layer", "separation", "angular_velocity", "stability", "cos_to_final"}, rows));
    return kExitOk;
  }

  json doc;
  doc["model_id"] = set.manifest.model_id;
  doc["concept"] = set.manifest.concept_name;
  doc["n_pairs"] = set.n_pairs();
  doc["epsilon"] = g.epsilon;
  doc["trajectory"] = gem::to_json(traj, directions);
  doc["gem"] = gem::to_json(gem_);
  const auto wd = gem::ablation_width(gem_, set.n_layers(), g.rule());
  doc["gem"]["width"] = {{"rule_width", wd.width},
                         {"triggered", wd.triggered},
                         {"effective_width", gem::effective_width(gem_.handoff_layer, set.n_layers(), g.rule(), g.width)}};
  try {
    doc["peak_layer"] = gem::peak_layer(traj);
  } catch (const gem::Error&) {
    doc["peak_layer"] = nullptr;
  }
  json nodes = json::array();
  for (const auto& n : gem::detect_nodes(traj, g.epsilon)) nodes.push_back(gem::to_json(n));
  doc["nodes"] = nodes;
  if (!sweep.empty()) {
    json s = json::array();
    for (double eps : sweep) {
      json row = {{"epsilon", eps}};
      try {
        const gem::Gem x = gem::detect_handoff(traj, eps);
        row["caz_end"] = x.caz_end;
        row["handoff_layer"] = x.handoff_layer;
        row["relative_depth"] = x.relative_depth;
        row["eec"] = gem::num(x.eec);
      } catch (const gem::Error& e) {
        row["error"] = std::string(gem::to_string(e.kind()));
      }
      s.push_back(row);
    }
    doc["epsilon_sweep"] = s;
  }
  emit(g, doc.dump(2) + "\n");
  return kExitOk;
}

// ablate ---------------------------------------------------------------------

int cmd_ablate(const Globals& g, const std::string& dir, std::optional<std::size_t> layer) {
  const gem::ActivationSet set = gem::load_activation_set(dir);
  const gem::Trajectory traj = gem::compute_trajectory(set);
  const gem::Gem gem_ = gem::detect_handoff(traj, g.epsilon);

  if (layer) {
    if (*layer >= set.n_layers()) throw gem::Error(gem::ErrorKind::BadField, "--layer out of range");
    const std::size_t w = gem::effective_width(*layer, set.n_layers(), g.rule(), g.width);
    const auto rec = gem::probe_at(set, traj, *layer, w, *layer == gem_.handoff_layer ? gem::DirectionSource::Handoff
                                                                                      : gem::DirectionSource::Peak);
    if (g.format == "csv") emit(g, csv_rows(kRecordHeader, record_rows({{"probe", rec}})));
    else emit(g, json{{"record", gem::to_json(rec)}}.dump(2) + "\n");
    return kExitOk;
  }

  const auto cmp = gem::compare_handoff_vs_peak(set, traj, gem_, g.rule(), g.width);
  const auto wexp = gem::adaptive_width_experiment(set, traj, gem_, g.rule());
  if (g.format == "csv") {
    emit(g, csv_rows(kRecordHeader, record_rows({{"handoff", cmp.handoff_record}, {"peak", cmp.peak_record}})));
  } else {
    emit(g, json{{"comparison", gem::to_json(cmp)}, {"width_experiment", gem::to_json(wexp)}}.dump(2) + "\n");
  }
  return cmp.handoff_record.degenerate() ? kExitDegenerate : kExitOk;
}

// control --------------------------------------------------------------------

int cmd_control(const Globals& g, const std::string& dir, const std::string& patched_root) {
  const gem::ActivationSet set = gem::load_activation_set(dir);
  const gem::Trajectory traj = gem::compute_trajectory(set);
  const gem::Gem gem_ = gem::detect_handoff(traj, g.epsilon);
  std::optional<gem::PatchedDirectoryPropagator> prop;
  if (!patched_root.empty()) prop.emplace(set, patched_root);

  json doc;
  std::optional<gem::RandomControlRecord> rc;
  try {
    rc = gem::random_direction_control(set, traj, gem_, g.rule(), g.seeds, g.rng_seed, g.width);
    doc["random"] = gem::to_json(*rc, true);
  } catch (const gem::Error& e) {
    if (e.kind() != gem::ErrorKind::ExcludedZeroReduction) throw;
    doc["random"] = {{"status", "excluded"}, {"reason", std::string(gem::to_string(e.kind()))}};
  }
  const auto dm = gem::depth_matched_control(set, traj, gem_, g.rule(), prop ? &*prop : nullptr, g.width);
  doc["depth_matched"] = gem::to_json(dm);

  if (g.format == "csv") {
    std::vector<std::pair<std::string, gem::AblationRecord>> recs;
    if (rc) {
      recs.push_back({"concept", rc->concept_record});
      for (const auto& r : rc->random_records) recs.push_back({"random_" + std::to_string(r.random_seed_index), r});
    }
    if (!dm.skipped) {
      recs.push_back({"depth_gem", dm.gem_record});
      recs.push_back({"depth_control", dm.control_record});
    }
    emit(g, csv_rows(kRecordHeader, record_rows(recs)));
  } else {
    emit(g, doc.dump(2) + "\n");
  }
  return rc ? kExitOk : kExitDegenerate;
}

// relay ----------------------------------------------------------------------

struct RelayArgs {
  std::string dir;
  std::string patched_root;
  bool synthetic = false;
  bool detect = false;
  std::string nodes = "3:2:0,7:3:0.7";
  std::size_t layers = 12, dim = 16, pairs = 32;
  double noise = 0.1;
};

std::vector<gem::RelayNodeSpec> parse_nodes(const std::string& text) {
  std::vector<gem::RelayNodeSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    gem::RelayNodeSpec n;
    char c1 = 0, c2 = 0;
    std::istringstream is(item);
    if (!(is >> n.layer >> c1 >> n.gain >> c2 >> n.feed) || c1 != ':' || c2 != ':')
      throw gem::Error(gem::ErrorKind::BadSpec, "node spec '" + item + "' is not layer:gain:feed");
    out.push_back(n);
  }
  return out;
}

int cmd_relay(const Globals& g, const RelayArgs& a) {
  gem::RelayReport rep;
  if (a.synthetic) {
    gem::RelaySpec spec;
    spec.n_layers = a.layers;
    spec.hidden_dim = a.dim;
    spec.n_pairs = a.pairs;
    spec.noise_scale = a.noise;
    spec.rng_seed = g.rng_seed;
    spec.nodes = parse_nodes(a.nodes);
    const gem::SyntheticPropagator prop(spec);
    std::vector<gem::GemNode> nodes =
        a.detect ? gem::detect_nodes(gem::compute_trajectory(prop.base()), g.epsilon) : prop.planted_nodes();
    if (nodes.empty()) throw gem::Error(gem::ErrorKind::NoCandidate, "no nodes detected");
    rep = gem::subset_permutation(nodes, prop, {}, g.workers);
  } else {
    if (a.dir.empty() || a.patched_root.empty())
      throw gem::Error(gem::ErrorKind::BadField, "relay needs <dir> and --patched-root, or --synthetic");
    const gem::ActivationSet set = gem::load_activation_set(a.dir);
    const gem::PatchedDirectoryPropagator prop(set, a.patched_root);
    const auto nodes = gem::detect_nodes(gem::compute_trajectory(set), g.epsilon);
    if (nodes.empty()) throw gem::Error(gem::ErrorKind::NoCandidate, "no nodes detected");
    rep = gem::subset_permutation(nodes, prop, {}, g.workers);
  }
  if (g.format == "csv") {
    std::vector<std::string> header = {"mask", "members"};
    for (std::size_t l : rep.measure_layers) header.push_back("reduction_at_" + std::to_string(l));
    std::vector<std::vector<json>> rows;
    for (const auto& s : rep.per_subset) {
      std::string members;
      for (std::size_t k : s.members) members += (members.empty() ? "" : "+") + std::to_string(k);
      std::vector<json> row = {s.mask, members};
      for (double r : s.reductions) row.push_back(gem::num(r));
      rows.push_back(row);
    }
    emit(g, csv_rows(header, rows));
  } else {
    emit(g, gem::to_json(rep).dump(2) + "\n");
  }
  return kExitOk;
}

// study / report -------------------------------------------------------------

struct StudyArgs {
  std::string root;
  std::string patched_root;
  bool force = false;
  bool no_random = false, no_depth = false, no_width = false;
};

int cmd_study(const Globals& g, const StudyArgs& a) {
  gem::RunConfig cfg;
  cfg.epsilon = g.epsilon;
  cfg.width_rule = g.rule();
  cfg.width_override = g.width;
  cfg.n_random_seeds = g.seeds;
  cfg.rng_seed = g.rng_seed;
  cfg.output_dir = g.out.empty() ? fs::path("gem_out") : fs::path(g.out);
  cfg.workers = g.workers;
  cfg.force = a.force;
  cfg.controls.random = !a.no_random;
  cfg.controls.depth_matched = !a.no_depth;
  cfg.controls.width_experiment = !a.no_width;
  if (!a.patched_root.empty()) cfg.patched_root = a.patched_root;

  const auto index = gem::discover_corpus(a.root, gem::Registry::load(g.registry));
  for (const auto& d : index.diagnostics) std::cerr << "skipped " << d.path.string() << ": " << d.message << "\n";
  const auto run = gem::run_study(index, cfg);
  std::cerr << "pairs: " << run.computed << " computed, " << run.reused << " reused\n";
  if (g.format == "csv") std::cout << gem::io::read_file(cfg.output_dir / "summary.csv");
  else std::cout << gem::io::read_file(cfg.output_dir / "summary.json");
  const auto& states = run.summary["status_counts"];
  return states.contains("ok") ? kExitOk : kExitDegenerate;
}

int cmd_report(const std::string& study_dir) {
  const auto rep = gem::report_figures(study_dir);
  json doc = {{"written", json::array()}, {"notices", rep.notices}};
  for (const auto& p : rep.written) doc["written"].push_back(p.generic_string());
  for (const auto& n : rep.notices) std::cerr << n << "\n";
  std::cout << doc.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometric evolution maps: trajectories, handoff detection, ablation and controls"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::size_t width_flag = 0;
  app.add_option("--epsilon", g.epsilon, "angular-velocity threshold for the CAZ run")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--near-final-threshold", g.near_final_threshold, "L_H/N above which width 1 is used")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  app.add_flag("--depth-corrected", g.depth_corrected, "width 1 only when the model has >= 20 layers");
  app.add_option("--width", width_flag, "fixed ablation width instead of the near-final rule")
      ->check(CLI::IsMember({1, 3}));
  app.add_option("--seeds", g.seeds, "random directions per pair")->capture_default_str()->check(CLI::Range(1, 100000));
  app.add_option("--rng-seed", g.rng_seed, "base seed")->capture_default_str();
  app.add_option("--out", g.out, "output file (directory for synth/study)");
  app.add_option("--format", g.format, "output format")->capture_default_str()->check(CLI::IsMember({"json", "csv"}));
  app.add_option("--registry", g.registry, "model registry JSON")->capture_default_str();
  app.add_option("--workers", g.workers, "worker threads")->capture_default_str()->check(CLI::Range(1, 1024));

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "write a planted synthetic activation directory");
  c_synth->add_option("--layers", synth.spec.n_layers)->capture_default_str();
  c_synth->add_option("--pairs", synth.spec.n_pairs)->capture_default_str();
  c_synth->add_option("--dim", synth.spec.hidden_dim)->capture_default_str();
  c_synth->add_option("--caz-start", synth.spec.caz_start)->capture_default_str();
  c_synth->add_option("--caz-end", synth.spec.caz_end)->capture_default_str();
  c_synth->add_option("--rotation", synth.spec.rotation_degrees_per_layer, "degrees per layer")->capture_default_str();
  c_synth->add_option("--noise", synth.spec.noise_scale)->capture_default_str();
  c_synth->add_option("--model-id", synth.spec.model_id)->capture_default_str();
  c_synth->add_option("--concept", synth.spec.concept_name)->capture_default_str();
  c_synth->add_flag("--demo-corpus", synth.demo, "write the bundled 2-model demo corpus and registry instead");

  std::string dir;
  auto* c_validate = app.add_subcommand("validate", "check a manifest and its blobs");
  c_validate->add_option("dir", dir)->required();

  std::vector<double> sweep;
  bool with_directions = false;
  auto* c_analyze = app.add_subcommand("analyze", "trajectory, handoff detection, node inventory");
  c_analyze->add_option("dir", dir)->required();
  c_analyze->add_option("--sweep", sweep, "extra epsilon values to report detection for")->delimiter(',');
  c_analyze->add_flag("--directions", with_directions, "include per-layer unit directions");

  std::optional<std::size_t> layer;
  auto* c_ablate = app.add_subcommand("ablate", "handoff-vs-peak ablation or a probe at one layer");
  c_ablate->add_option("dir", dir)->required();
  c_ablate->add_option("--layer", layer, "probe this layer instead of the handoff/peak comparison");

  std::string patched_root;
  auto* c_control = app.add_subcommand("control", "random-direction and depth-matched controls");
  c_control->add_option("dir", dir)->required();
  c_control->add_option("--patched-root", patched_root, "directory of patched activation dumps");

  RelayArgs relay;
  auto* c_relay = app.add_subcommand("relay", "subset-permutation relay analysis");
  c_relay->add_option("dir", relay.dir);
  c_relay->add_option("--patched-root", relay.patched_root, "directory of patched activation dumps");
  c_relay->add_flag("--synthetic", relay.synthetic, "use the built-in linear relay propagator");
  c_relay->add_flag("--detect", relay.detect, "detect nodes instead of using the planted inventory");
  c_relay->add_option("--nodes", relay.nodes, "layer:gain:feed,... for --synthetic")->capture_default_str();
  c_relay->add_option("--layers", relay.layers)->capture_default_str();
  c_relay->add_option("--dim", relay.dim)->capture_default_str();
  c_relay->add_option("--pairs", relay.pairs)->capture_default_str();
  c_relay->add_option("--noise", relay.noise)->capture_default_str();

  StudyArgs study;
  auto* c_study = app.add_subcommand("study", "run the full battery over a corpus");
  c_study->add_option("root", study.root)->required();
  c_study->add_option("--patched-root", study.patched_root, "<root>/<model>/<concept>/ patched dumps");
  c_study->add_flag("--force", study.force, "recompute pairs that already have outputs");
  c_study->add_flag("--no-random", study.no_random);
  c_study->add_flag("--no-depth-matched", study.no_depth);
  c_study->add_flag("--no-width-experiment", study.no_width);

  std::string study_dir;
  auto* c_report = app.add_subcommand("report", "figure data from a finished study");
  c_report->add_option("study_dir", study_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }
  if (width_flag) g.width = width_flag;

  try {
    if (c_synth->parsed()) return cmd_synth(g, synth);
    if (c_validate->parsed()) return cmd_validate(g, dir);
    if (c_analyze->parsed()) return cmd_analyze(g, dir, sweep, with_directions);
    if (c_ablate->parsed()) return cmd_ablate(g, dir, layer);
    if (c_control->parsed()) return cmd_control(g, dir, patched_root);
    if (c_relay->parsed()) return cmd_relay(g, relay);
    if (c_study->parsed()) return cmd_study(g, study);
    if (c_report->parsed()) return cmd_report(study_dir);
  } catch (const gem::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (gem::is_input_error(e.kind())) return kExitInput;
    if (gem::is_degenerate_result(e.kind())) return kExitDegenerate;
    return kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
