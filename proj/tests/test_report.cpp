#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "support.hpp"

using namespace gem;
using testutil::TempDir;

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(io::read_file(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("EEC histogram bins", "[report]") {
  const auto h = eec_histogram({-1.0, -0.95, 0.0, 0.999, 1.0});
  CHECK(h[0] == 2);
  CHECK(h[10] == 1);
  CHECK(h[19] == 2);
}

TEST_CASE("figure data from a study", "[report]") {
  TempDir tmp("report");
  const fs::path reg = write_demo_corpus(tmp.path());
  RunConfig cfg;
  cfg.output_dir = tmp / "out";
  run_study(discover_corpus(tmp / "corpus", Registry::load(reg)), cfg);
  const auto rep = report_figures(tmp / "out");
  CHECK(rep.written.size() == 3);
  CHECK(rep.notices.empty());

  // per-concept mean and SEM against a recomputation from the pair files
  std::map<std::string, std::vector<double>> by;
  for (const auto& e : fs::directory_iterator(tmp / "out" / "pairs")) {
    const json d = json::parse(io::read_file(e.path()));
    by[d["meta"]["concept"]].push_back(d["gem"]["eec"].get<double>());
  }
  const auto rows = read_csv(tmp / "out" / "figures" / "fig1_concept_eec.csv");
  REQUIRE(rows.size() == by.size() + 1);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& v = by.at(rows[r][0]);
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sem = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    CHECK(std::stod(rows[r][2]) == Catch::Approx(m).margin(1e-12));
    CHECK(std::stod(rows[r][3]) == Catch::Approx(sem).margin(1e-12));
  }

  const auto fig2 = read_csv(tmp / "out" / "figures" / "fig2_random_reductions.csv");
  CHECK(fig2[0] == std::vector<std::string>{"cohort", "model_id", "concept", "kind", "seed", "reduction_pct"});
  CHECK(fig2.size() > 1);
}

TEST_CASE("one pair, no random control", "[report]") {
  TempDir tmp("report1");
  SyntheticSpec s;
  s.model_id = "alpha";
  s.noise_scale = 0.1;
  write_activation_set(generate_synthetic(s).set, tmp / "corpus" / "alpha" / "planted");
  RunConfig cfg;
  cfg.output_dir = tmp / "out";
  cfg.controls.random = false;
  run_study(discover_corpus(tmp / "corpus", Registry({{"alpha", "F", 1, 12, 16, Cohort::MHA, ""}})), cfg);
  io::write_file_atomic(tmp / "out" / "figures" / "fig2_random_reductions.csv", "stale");
  const auto rep = report_figures(tmp / "out");
  CHECK_FALSE(fs::exists(tmp / "out" / "figures" / "fig2_random_reductions.csv"));
  REQUIRE(rep.notices.size() == 1);

  const auto hist = read_csv(tmp / "out" / "figures" / "fig1_eec_histogram.csv");
  int populated = 0;
  for (std::size_t r = 1; r < hist.size(); ++r) populated += hist[r][2] != "0";
  CHECK(populated == 1);
}

TEST_CASE("report without a study", "[report]") {
  TempDir tmp("nostudy");
  try {
    report_figures(tmp.path());
    FAIL("expected MissingStudy");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingStudy);
  }
}
