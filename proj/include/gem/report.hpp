#pragma once

// Plot-ready figure data from a finished study directory, and the bundled
// synthetic demo corpus.

#include <array>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gem/pipeline.hpp"

namespace gem {

inline std::vector<json> load_pair_docs(const fs::path& study_dir) {
  const fs::path pairs = study_dir / "pairs";
  if (!fs::exists(study_dir / "summary.json") || !fs::is_directory(pairs))
    throw Error(ErrorKind::MissingStudy, "no completed study in " + study_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(pairs))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<json> docs;
  for (const auto& f : files) {
    try {
      docs.push_back(json::parse(io::read_file(f)));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MissingStudy, "unreadable pair file " + f.string() + ": " + e.what());
    }
  }
  return docs;
}

inline constexpr std::size_t kEecBins = 20;

/// Counts over [-1, 1] in equal-width bins; the top bin includes 1.
inline std::array<std::size_t, kEecBins> eec_histogram(const std::vector<double>& eec) {
  std::array<std::size_t, kEecBins> counts{};
  for (double v : eec) {
    const double clamped = std::clamp(v, -1.0, 1.0);
    auto bin = static_cast<std::size_t>((clamped + 1.0) / 2.0 * static_cast<double>(kEecBins));
    counts[std::min(bin, kEecBins - 1)]++;
  }
  return counts;
}

struct ConceptEec {
  std::string concept_name;
  std::size_t n = 0;
  double mean = 0.0;
  double sem = 0.0;
};

inline std::vector<ConceptEec> concept_eec(const std::vector<json>& docs) {
  std::map<std::string, std::vector<double>> by;
  for (const auto& d : docs)
    if (!d.at("gem").is_null()) by[d["meta"]["concept"].get<std::string>()].push_back(d["gem"]["eec"].get<double>());
  std::vector<ConceptEec> out;
  for (const auto& [c, v] : by) out.push_back({c, v.size(), stats::mean(v), stats::sem(v)});
  return out;
}

struct FigureReport {
  std::vector<fs::path> written;
  std::vector<std::string> notices;
};

/// fig1_eec_histogram.csv, fig1_concept_eec.csv, and (when random controls ran)
/// fig2_random_reductions.csv, all under <study_dir>/figures.
inline FigureReport report_figures(const fs::path& study_dir) {
  const std::vector<json> docs = load_pair_docs(study_dir);
  const fs::path out_dir = study_dir / "figures";
  fs::create_directories(out_dir);
  FigureReport rep;

  std::vector<double> eec;
  for (const auto& d : docs)
    if (!d.at("gem").is_null()) eec.push_back(d["gem"]["eec"].get<double>());
  const auto counts = eec_histogram(eec);
  std::ostringstream h;
  h << "bin_low,bin_high,count\n";
  for (std::size_t b = 0; b < kEecBins; ++b) {
    const double lo = -1.0 + 2.0 * static_cast<double>(b) / kEecBins;
    const double hi = -1.0 + 2.0 * static_cast<double>(b + 1) / kEecBins;
    h << io::format_double(lo) << "," << io::format_double(hi) << "," << counts[b] << "\n";
  }
  io::write_file_atomic(out_dir / "fig1_eec_histogram.csv", h.str());
  rep.written.push_back(out_dir / "fig1_eec_histogram.csv");

  std::ostringstream c;
  c << "concept,n,mean_eec,sem\n";
  for (const auto& e : concept_eec(docs))
    c << csv_field(e.concept_name) << "," << e.n << "," << io::format_double(e.mean) << ","
      << io::format_double(e.sem) << "\n";
  io::write_file_atomic(out_dir / "fig1_concept_eec.csv", c.str());
  rep.written.push_back(out_dir / "fig1_concept_eec.csv");

  std::ostringstream r;
  r << "cohort,model_id,concept,kind,seed,reduction_pct\n";
  std::size_t rows = 0;
  for (const auto& d : docs) {
    const json& ctl = d.at("controls");
    if (!ctl.contains("random") || ctl["random"]["status"] != "ok") continue;
    const json& rc = ctl["random"];
    const std::string prefix = csv_field(d["meta"]["cohort"]) + "," + csv_field(d["meta"]["model_id"]) + "," +
                               csv_field(d["meta"]["concept"]) + ",";
    r << prefix << "concept,," << io::format_double(100.0 * rc["concept_reduction"].get<double>()) << "\n";
    std::size_t k = 0;
    for (const auto& x : rc["random_reductions"]) r << prefix << "random," << k++ << "," << io::format_double(100.0 * x.get<double>()) << "\n";
    ++rows;
  }
  const fs::path fig2 = out_dir / "fig2_random_reductions.csv";
  if (rows == 0) {
    std::error_code ec;
    fs::remove(fig2, ec);
    rep.notices.push_back("no random-direction control results; fig2_random_reductions.csv not written");
  } else {
    io::write_file_atomic(fig2, r.str());
    rep.written.push_back(fig2);
  }
  return rep;
}

// Demo corpus
// ---------------------------------------------------------------------------

/// Planted fixture whose handoff sits past the near-final threshold and whose
/// last layer is tilted by `tilt_degrees` (below the rotation threshold), so a
/// width-3 window average is contaminated while width 1 is exact.
inline ActivationSet late_handoff_fixture(std::size_t n_layers, std::size_t hidden_dim, std::size_t n_pairs,
                                          double tilt_degrees, double noise, std::uint64_t seed,
                                          const std::string& model_id = "synthetic",
                                          const std::string& concept_name = "late") {
  if (n_layers < 8) throw Error(ErrorKind::BadSpec, "late-handoff fixture needs >= 8 layers");
  std::mt19937_64 rng(seed);
  auto [e1, e2] = orthonormal_pair(hidden_dim, rng);
  PlantedPlan plan;
  plan.model_id = model_id;
  plan.concept_name = concept_name;
  plan.n_pairs = n_pairs;
  plan.noise_scale = noise;
  plan.rng_seed = io::splitmix64(seed);
  const std::size_t caz_end = n_layers - 3;
  const std::size_t caz_start = caz_end - 4;
  for (std::size_t l = 0; l < n_layers; ++l) {
    double deg = l < caz_start ? 0.0 : 30.0 * static_cast<double>(std::min(l, caz_end) - caz_start);
    if (l == n_layers - 1) deg += tilt_degrees;
    const double rad = deg * std::numbers::pi / 180.0;
    std::vector<double> u(hidden_dim);
    for (std::size_t j = 0; j < hidden_dim; ++j) u[j] = std::cos(rad) * e1[j] + std::sin(rad) * e2[j];
    plan.directions.push_back(std::move(u));
    plan.separation.push_back(4.0);
  }
  return plant_activation_set(plan);
}

struct DemoModel {
  std::string model_id;
  Cohort cohort;
  std::uint64_t params;
  std::size_t n_layers;
};

inline std::vector<DemoModel> demo_models() {
  return {{"synth-mha-small", Cohort::MHA, 120'000'000ULL, 12},
          {"synth-gqa-medium", Cohort::GQA, 1'200'000'000ULL, 20}};
}

/// Writes a small deterministic corpus (2 models x 3 concepts) plus its registry
/// to <root>/corpus and <root>/registry.json. Returns the registry path.
inline fs::path write_demo_corpus(const fs::path& root, std::uint64_t seed = 7, std::size_t hidden_dim = 24,
                                  std::size_t n_pairs = 24) {
  const fs::path corpus = root / "corpus";
  json registry = json::array();
  std::uint64_t s = seed;
  for (const auto& m : demo_models()) {
    ModelMeta meta{m.model_id, "Synthetic", m.params, m.n_layers, hidden_dim, m.cohort, "generated"};
    registry.push_back(model_meta_to_json(meta));
    const std::size_t n = m.n_layers;

    // gradual rotation through the middle, separation peaking inside the zone
    SyntheticSpec a;
    a.n_layers = n;
    a.n_pairs = n_pairs;
    a.hidden_dim = hidden_dim;
    a.caz_start = n / 4;
    a.caz_end = n / 2 + 1;
    a.rotation_degrees_per_layer = 25.0;
    for (std::size_t l = 0; l < n; ++l) {
      const double x = static_cast<double>(l) / static_cast<double>(n - 1);
      a.separation_profile.push_back(2.0 + 4.0 * std::exp(-std::pow((x - 0.45) / 0.2, 2.0)));
    }
    a.noise_scale = 0.15;
    a.rng_seed = s = io::splitmix64(s);
    a.model_id = m.model_id;
    a.concept_name = "assembly";
    write_activation_set(generate_synthetic(a).set, corpus / m.model_id / a.concept_name);

    // shallow zone, flat separation
    SyntheticSpec b = a;
    b.caz_start = 1;
    b.caz_end = n / 3;
    b.rotation_degrees_per_layer = 35.0;
    b.separation_profile.assign(n, 3.0);
    b.noise_scale = 0.2;
    b.rng_seed = s = io::splitmix64(s);
    b.concept_name = "shallow";
    write_activation_set(generate_synthetic(b).set, corpus / m.model_id / b.concept_name);

    write_activation_set(late_handoff_fixture(n, hidden_dim, n_pairs, 10.0, 0.15, s = io::splitmix64(s), m.model_id, "late"),
                         corpus / m.model_id / "late");
  }
  const fs::path reg = root / "registry.json";
  io::write_file_atomic(reg, registry.dump(2) + "\n");
  return reg;
}

}  // namespace gem
