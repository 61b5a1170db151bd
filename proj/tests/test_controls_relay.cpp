#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "support.hpp"

using namespace gem;
using testutil::TempDir;

namespace {

bool same_bits(const ActivationSet& a, const ActivationSet& b) {
  return a.pos.data().size() == b.pos.data().size() &&
         std::memcmp(a.pos.data().data(), b.pos.data().data(), a.pos.data().size() * 4) == 0 &&
         std::memcmp(a.neg.data().data(), b.neg.data().data(), a.neg.data().size() * 4) == 0;
}

// Residual stream that carries every direction unchanged: a patch removes its
// direction from its layer and everything above it.
class CarryPropagator final : public Propagator {
 public:
  explicit CarryPropagator(ActivationSet base) : base_(std::move(base)) {}
  const ActivationSet& base() const override { return base_; }
  ActivationSet propagate(std::span<const Patch> patches) const override {
    ActivationSet out = base_;
    for (const auto& p : patches)
      for (auto* t : {&out.pos, &out.neg})
        for (std::size_t l = p.layer; l < base_.n_layers(); ++l)
          for (std::size_t i = 0; i < base_.n_pairs(); ++i) {
            auto row = t->row(l, i);
            std::vector<double> h(row.begin(), row.end());
            h = project_out(h, p.direction);
            for (std::size_t j = 0; j < h.size(); ++j) row[j] = static_cast<float>(h[j]);
          }
    return out;
  }

 private:
  ActivationSet base_;
};

RelaySpec two_node_relay(double feed, double g0 = 2.0, double g1 = 2.0) {
  RelaySpec s;
  s.n_layers = 12;
  s.hidden_dim = 16;
  s.n_pairs = 32;
  s.noise_scale = 0.1;
  s.rng_seed = 9;
  s.nodes = {{3, g0, 0.0}, {7, g1, feed}};
  return s;
}

}  // namespace

TEST_CASE("empirical p", "[controls]") {
  CHECK(empirical_p_value(0.9, std::vector<double>(10, 0.01)) == Catch::Approx(1.0 / 11.0).margin(1e-12));
  CHECK(empirical_p_value(0.5, {0.6, 0.1, 0.5}) == Catch::Approx(3.0 / 4.0));
}

TEST_CASE("random unit vectors", "[controls]") {
  std::mt19937_64 a(5), b(5);
  const auto u = random_unit_vector(64, a);
  CHECK(l2_norm(u.components()) == Catch::Approx(1.0).margin(1e-12));
  CHECK(u == random_unit_vector(64, b));
}

TEST_CASE("random-direction control on an isotropic high-dimensional fixture", "[controls]") {
  SyntheticSpec spec;
  spec.hidden_dim = 512;
  spec.n_pairs = 64;
  spec.noise_scale = 1.0;
  spec.separation_profile.assign(spec.n_layers, 8.0);
  spec.rng_seed = 31;
  const auto set = generate_synthetic(spec).set;
  const auto t = compute_trajectory(set);
  const Gem g = detect_handoff(t);
  const auto rc = random_direction_control(set, t, g, WidthRule{}, 10, 77);
  CHECK(rc.random_reductions.size() == 10);
  CHECK(std::abs(rc.mean_random_reduction) < 0.01);
  CHECK(rc.beats_all);
  CHECK(rc.empirical_p == Catch::Approx(1.0 / 11.0).margin(1e-12));
  REQUIRE(rc.z_score);
  CHECK(*rc.z_score > 10.0);

  const auto again = random_direction_control(set, t, g, WidthRule{}, 10, 77);
  CHECK(again.random_reductions == rc.random_reductions);
}

TEST_CASE("zero concept reduction is excluded", "[controls]") {
  std::mt19937_64 rng(1);
  auto set = testutil::random_set(rng, 4, 10, 4, 2.0);
  auto t = compute_trajectory(set);
  Gem g = detect_handoff(t);
  // point the settled window at a dimension that carries nothing
  for (auto* x : {&set.pos, &set.neg})
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t i = 0; i < 10; ++i) x->at(l, i, 3) = 0.0f;
  for (std::size_t l = 0; l < 4; ++l) t.directions[l] = UnitVector::normalize({0, 0, 0, 1});
  try {
    random_direction_control(set, t, g, WidthRule{}, 10, 1);
    FAIL("expected ExcludedZeroReduction");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ExcludedZeroReduction);
  }
}

TEST_CASE("depth-matched layer choice", "[controls]") {
  Gem g;
  g.caz_end = 10;
  g.handoff_layer = 11;
  CHECK_FALSE(depth_matched_layer(g, 12));
  g.caz_end = 6;
  g.handoff_layer = 7;
  CHECK(depth_matched_layer(g, 12) == 8u);
  g.caz_end = 2;
  g.handoff_layer = 5;  // 4 and 6 are equally close
  CHECK(depth_matched_layer(g, 12) == 4u);
}

TEST_CASE("depth-matched control", "[controls]") {
  // big rotation over 3..7, then a sub-threshold wobble at layer 9 only
  PlantedPlan plan;
  plan.noise_scale = 0.1;
  plan.rng_seed = 4;
  for (std::size_t l = 0; l < 12; ++l) {
    double deg = 30.0 * static_cast<double>(std::clamp<std::size_t>(l, 3, 7) - 3);
    if (l == 9) deg += 12.0;
    const double r = deg * std::numbers::pi / 180.0;
    std::vector<double> u(8, 0.0);
    u[0] = std::cos(r);
    u[1] = std::sin(r);
    plan.directions.push_back(u);
    plan.separation.push_back(4.0);
  }
  const auto set = plant_activation_set(plan);
  const auto t = compute_trajectory(set);
  const Gem g = detect_handoff(t);
  REQUIRE(g.handoff_layer == 8);

  SECTION("without a propagator it scores at the probe layers") {
    const auto dm = depth_matched_control(set, t, g, WidthRule{});
    CHECK_FALSE(dm.skipped);
    CHECK(dm.control_layer == 9);
    CHECK(dm.measured_at == MeasuredAt::ProbeLayer);
    CHECK(dm.control_record.direction_source == DirectionSource::ControlLayer);
  }
  SECTION("through a propagator the settled direction wins at the final layer") {
    const CarryPropagator prop(set);
    const auto dm = depth_matched_control(set, t, g, WidthRule{}, &prop, 1);
    CHECK(dm.measured_at == MeasuredAt::FinalLayer);
    CHECK(dm.gem_record.measured_layers == std::vector<std::size_t>{11});
    CHECK(dm.advantage_pp > 0.0);
    CHECK(dm.gem_better);
    CHECK_FALSE(dm.degenerate);
  }
  SECTION("no candidate") {
    Gem late = g;
    late.caz_end = 10;
    late.handoff_layer = 11;
    const auto dm = depth_matched_control(set, t, late, WidthRule{});
    CHECK(dm.skipped);
    CHECK(dm.skip_reason == "NoCandidate");
  }
}

TEST_CASE("synthetic propagator contract", "[relay][propagator]") {
  const SyntheticPropagator prop(two_node_relay(0.7));
  SECTION("empty patch set reproduces the base activations") {
    CHECK(same_bits(prop.propagate({}), prop.base()));
  }
  SECTION("a final-layer patch leaves lower layers alone") {
    const std::vector<Patch> p = {{11, prop.node_directions()[1]}};
    const auto out = prop.propagate(p);
    const auto& base = prop.base();
    const std::size_t per_layer = base.n_pairs() * base.hidden_dim();
    CHECK(std::memcmp(out.pos.data().data(), base.pos.data().data(), 11 * per_layer * 4) == 0);
    CHECK(std::memcmp(out.neg.data().data(), base.neg.data().data(), 11 * per_layer * 4) == 0);
    CHECK_FALSE(same_bits(out, base));
  }
  SECTION("shallow patch reduces deep separation by the feed fraction") {
    for (double feed : {0.3, 0.7, 1.0}) {
      for (auto [g0, g1] : {std::pair{2.0, 2.0}, std::pair{3.0, 1.0}}) {
        const SyntheticPropagator p(two_node_relay(feed, g0, g1));
        const std::vector<Patch> shallow = {{4, p.node_directions()[0]}};
        const double before = separation_score(p.base(), 8);
        const double after = separation_score(p.propagate(shallow), 8);
        const double analytic = feed * g0 / (feed * g0 + (1 - feed) * g1);
        CHECK(1.0 - after / before == Catch::Approx(analytic).margin(1e-6));
      }
    }
  }
  SECTION("ground-truth nodes") {
    const auto nodes = prop.planted_nodes();
    REQUIRE(nodes.size() == 2);
    CHECK(nodes[0].peak_layer == 3);
    CHECK(nodes[0].node_handoff == 4);
    CHECK(nodes[1].node_handoff == 8);
  }
}

TEST_CASE("synthetic propagator rejects bad specs", "[relay][propagator]") {
  auto bad = [](RelaySpec s) {
    try {
      SyntheticPropagator p(std::move(s));
      FAIL("expected BadSpec");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::BadSpec);
    }
  };
  RelaySpec s = two_node_relay(0.7);
  s.nodes[0].feed = 0.5;
  bad(s);
  s = two_node_relay(0.7);
  s.nodes[1].layer = 4;
  bad(s);
  s = two_node_relay(1.5);
  bad(s);
  s = two_node_relay(0.7);
  s.noise_scale = 0.0;
  bad(s);
  s = two_node_relay(0.7);
  s.hidden_dim = 2;
  bad(s);
}

TEST_CASE("subset permutation", "[relay]") {
  SECTION("two nodes with feed 0.7") {
    const SyntheticPropagator prop(two_node_relay(0.7));
    const auto rep = subset_permutation(prop.planted_nodes(), prop);
    CHECK(rep.per_subset.size() == 3);
    CHECK(rep.dominant_node == 1);
    REQUIRE(rep.cross_disruption);
    CHECK(*rep.cross_disruption == Catch::Approx(0.7).margin(1e-6));
    CHECK(*rep.cross_disruption > 0.05);
    CHECK(rep.measure_layers == std::vector<std::size_t>{4, 8, 11});
    CHECK(rep.synergy == Catch::Approx(0.0).margin(1e-6));
  }
  SECTION("three nodes give seven subsets") {
    RelaySpec s = two_node_relay(0.5);
    s.nodes.push_back({10, 2.0, 0.5});
    const SyntheticPropagator prop(s);
    const auto rep = subset_permutation(prop.planted_nodes(), prop);
    CHECK(rep.per_subset.size() == 7);
    for (std::size_t k = 0; k < 7; ++k) CHECK(rep.per_subset[k].mask == k + 1);
    CHECK(rep.dominant_node == 2);
  }
  SECTION("one node") {
    RelaySpec s = two_node_relay(0.0);
    s.nodes.pop_back();
    const SyntheticPropagator prop(s);
    const auto rep = subset_permutation(prop.planted_nodes(), prop);
    CHECK(rep.per_subset.size() == 1);
    CHECK(rep.dominant_node == 0);
    CHECK(rep.synergy == 0.0);
    CHECK_FALSE(rep.cross_disruption);
  }
  SECTION("worker count does not change the report") {
    RelaySpec s = two_node_relay(0.6);
    s.nodes.push_back({10, 1.5, 0.4});
    const SyntheticPropagator prop(s);
    const auto a = subset_permutation(prop.planted_nodes(), prop, {}, 1);
    const auto b = subset_permutation(prop.planted_nodes(), prop, {}, 4);
    CHECK(to_json(a).dump() == to_json(b).dump());
  }
  SECTION("too many nodes") {
    const SyntheticPropagator prop(two_node_relay(0.7));
    std::vector<GemNode> nodes(13, prop.planted_nodes()[0]);
    try {
      subset_permutation(nodes, prop);
      FAIL("expected TooManyNodes");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::TooManyNodes);
    }
  }
}

TEST_CASE("patched-directory propagator replays dumped activations", "[relay][propagator]") {
  TempDir tmp("patched");
  const SyntheticPropagator synth(two_node_relay(0.7));
  const auto nodes = synth.planted_nodes();
  // dump every subset the relay protocol will ask for, as an extractor would
  std::size_t k = 0;
  for (std::uint32_t mask = 1; mask < 4; ++mask) {
    std::vector<Patch> patches;
    json listed = json::array();
    for (std::size_t n = 0; n < 2; ++n) {
      if (!(mask & (1u << n))) continue;
      patches.push_back({nodes[n].node_handoff, nodes[n].node_direction});
      // matching is sign-blind, so store one of them flipped
      const UnitVector stored = n == 1 ? nodes[n].node_direction.negated() : nodes[n].node_direction;
      const std::vector<double> v(stored.components().begin(), stored.components().end());
      listed.push_back({{"layer", nodes[n].node_handoff}, {"direction", v}});
    }
    ActivationSet dumped = synth.propagate(patches);
    dumped.manifest.annotations["patches"] = listed;
    write_activation_set(dumped, tmp / ("p" + std::to_string(k++)));
  }
  const PatchedDirectoryPropagator replay(synth.base(), tmp.path());
  CHECK(replay.available() == 3);
  CHECK(same_bits(replay.propagate({}), synth.base()));

  const auto a = subset_permutation(nodes, synth);
  const auto b = subset_permutation(nodes, replay);
  CHECK(to_json(a).dump() == to_json(b).dump());

  const std::vector<Patch> unknown = {{5, nodes[0].node_direction}};
  try {
    replay.propagate(unknown);
    FAIL("expected PropagatorFailure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::PropagatorFailure);
  }
}
