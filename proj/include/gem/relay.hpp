#pragma once

// Subset-permutation analysis of multi-node handoff chains.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "gem/detector.hpp"
#include "gem/parallel.hpp"
#include "gem/propagator.hpp"

namespace gem {

inline constexpr std::size_t kMaxRelayNodes = 12;

struct SubsetResult {
  std::uint32_t mask = 0;            // bit k set = node k patched
  std::vector<std::size_t> members;  // node indices, ascending
  std::vector<double> reductions;    // one per measure layer: 1 - S_after / S_before
};

struct RelayReport {
  std::string concept_name;
  std::vector<GemNode> nodes;
  std::vector<std::size_t> measure_layers;
  std::vector<SubsetResult> per_subset;  // ordered by mask
  std::vector<double> solo_final_reductions;
  std::size_t dominant_node = 0;
  double synergy = 0.0;
  std::optional<double> cross_disruption;  // only with >= 2 nodes
};

/// Each node handoff layer plus the final layer, ascending and unique.
inline std::vector<std::size_t> default_measure_layers(const std::vector<GemNode>& nodes, std::size_t n_layers) {
  std::vector<std::size_t> out;
  for (const auto& nd : nodes) out.push_back(nd.node_handoff);
  out.push_back(n_layers - 1);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Patches every non-empty subset of nodes at their handoff layers and measures the
/// separation reduction at each measure layer. An empty `measure_layers` uses the defaults.
inline RelayReport subset_permutation(std::vector<GemNode> nodes, const Propagator& prop,
                                      std::vector<std::size_t> measure_layers = {}, std::size_t workers = 1) {
  if (nodes.empty()) throw Error(ErrorKind::BadField, "subset permutation needs at least one node");
  if (nodes.size() > kMaxRelayNodes)
    throw Error(ErrorKind::TooManyNodes, std::to_string(nodes.size()) + " nodes exceeds the cap of 12");
  const ActivationSet& base = prop.base();
  const std::size_t n = base.n_layers();
  std::stable_sort(nodes.begin(), nodes.end(),
                   [](const GemNode& a, const GemNode& b) { return a.node_handoff < b.node_handoff; });
  for (const auto& nd : nodes)
    if (nd.node_handoff >= n) throw Error(ErrorKind::BadField, "node handoff layer out of range");

  RelayReport rep;
  rep.concept_name = base.manifest.concept_name;
  rep.nodes = nodes;
  rep.measure_layers = measure_layers.empty() ? default_measure_layers(nodes, n) : std::move(measure_layers);
  const std::size_t deepest_handoff = nodes.back().node_handoff;
  if (std::find(rep.measure_layers.begin(), rep.measure_layers.end(), n - 1) == rep.measure_layers.end())
    rep.measure_layers.push_back(n - 1);
  if (std::find(rep.measure_layers.begin(), rep.measure_layers.end(), deepest_handoff) == rep.measure_layers.end())
    rep.measure_layers.push_back(deepest_handoff);
  std::sort(rep.measure_layers.begin(), rep.measure_layers.end());

  std::vector<double> before;
  for (std::size_t l : rep.measure_layers) before.push_back(baseline_separation(base, l));

  const std::uint32_t count = (1u << nodes.size()) - 1;
  rep.per_subset.resize(count);
  parallel_for(count, workers, [&](std::size_t idx) {
    SubsetResult& sr = rep.per_subset[idx];
    sr.mask = static_cast<std::uint32_t>(idx + 1);
    std::vector<Patch> patches;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!(sr.mask & (1u << k))) continue;
      sr.members.push_back(k);
      patches.push_back({nodes[k].node_handoff, nodes[k].node_direction});
    }
    const ActivationSet after = prop.propagate(patches);
    for (std::size_t m = 0; m < rep.measure_layers.size(); ++m)
      sr.reductions.push_back(1.0 - separation_or_zero_baseline(after, rep.measure_layers[m]) / before[m]);
  });

  const auto col = [&](std::size_t layer) {
    return static_cast<std::size_t>(
        std::find(rep.measure_layers.begin(), rep.measure_layers.end(), layer) - rep.measure_layers.begin());
  };
  const std::size_t final_col = col(n - 1);
  for (std::size_t k = 0; k < nodes.size(); ++k)
    rep.solo_final_reductions.push_back(rep.per_subset[(1u << k) - 1].reductions[final_col]);
  rep.dominant_node = static_cast<std::size_t>(
      std::max_element(rep.solo_final_reductions.begin(), rep.solo_final_reductions.end()) -
      rep.solo_final_reductions.begin());
  if (nodes.size() > 1) {
    const double best_solo = rep.solo_final_reductions[rep.dominant_node];
    rep.synergy = rep.per_subset[count - 1].reductions[final_col] - best_solo;

    const std::uint32_t deep_bit = 1u << (nodes.size() - 1);
    const std::size_t deep_col = col(deepest_handoff);
    for (const auto& sr : rep.per_subset) {
      if (sr.mask & deep_bit) continue;
      const double r = sr.reductions[deep_col];
      rep.cross_disruption = rep.cross_disruption ? std::max(*rep.cross_disruption, r) : r;
    }
  }
  return rep;
}

}  // namespace gem
