#pragma once

// CAZ-end / handoff detection, the near-final width rule, multi-node inventory.

#include <algorithm>
#include <optional>
#include <vector>

#include "gem/geometry.hpp"

namespace gem {

inline constexpr double kDefaultEpsilon = 0.05;

struct Gem {
  std::size_t n_layers = 0;
  std::size_t caz_start = 0;  // entry layer of the final above-threshold run (informational)
  std::size_t caz_end = 0;
  std::size_t handoff_layer = 0;
  UnitVector settled_direction;
  double handoff_cos = 0.0;
  double eec = 0.0;
  double relative_depth = 0.0;
  bool rotation_detected = false;  // false when the no-rotation fallback fired
};

struct GemNode {
  std::size_t peak_layer = 0;
  std::size_t node_handoff = 0;
  UnitVector node_direction;
  double peak_separation = 0.0;
};

struct WidthRule {
  double threshold = 0.85;
  bool depth_corrected = false;
  std::size_t min_layers = 20;
};

struct WidthDecision {
  std::size_t width = 3;
  bool triggered = false;
};

struct CazRun {
  std::size_t entry = 0;  // layer preceding the first above-threshold transition
  std::size_t end = 0;
  bool found = false;
};

/// Locates the final maximal run of layers with omega > epsilon. Undefined omega breaks a run.
inline CazRun find_caz_run(const Trajectory& traj, double epsilon = kDefaultEpsilon) {
  bool any_defined = false;
  for (std::size_t l = 1; l < traj.n_layers; ++l) any_defined = any_defined || traj.angular_velocity[l].has_value();
  if (!any_defined) throw Error(ErrorKind::NoDefinedDirections, "no two consecutive defined directions");

  CazRun run;
  for (std::size_t l = traj.n_layers; l-- > 1;) {
    const auto& w = traj.angular_velocity[l];
    if (w && *w > epsilon) {
      run.found = true;
      run.end = l;
      std::size_t first = l;
      while (first > 1 && traj.angular_velocity[first - 1] && *traj.angular_velocity[first - 1] > epsilon) --first;
      run.entry = first - 1;
      return run;
    }
  }
  return run;  // no rotation: entry = end = 0
}

/// Last layer of the final consecutive run with omega(l) > epsilon; 0 when the concept never rotates.
inline std::size_t detect_caz_end(const Trajectory& traj, double epsilon = kDefaultEpsilon) {
  return find_caz_run(traj, epsilon).end;
}

inline Gem detect_handoff(const Trajectory& traj, double epsilon = kDefaultEpsilon) {
  const CazRun run = find_caz_run(traj, epsilon);
  Gem g;
  g.n_layers = traj.n_layers;
  g.caz_start = run.entry;
  g.caz_end = run.end;
  g.rotation_detected = run.found;
  g.handoff_layer = std::min(run.end + 1, traj.n_layers - 1);
  if (!traj.direction_defined(g.handoff_layer))
    throw Error(ErrorKind::UndefinedSettledDirection, "direction undefined at handoff layer " +
                                                          std::to_string(g.handoff_layer));
  g.settled_direction = *traj.directions[g.handoff_layer];
  g.handoff_cos = handoff_cosine(traj, g.handoff_layer);
  g.eec = entry_exit_cosine(traj, g.caz_start, g.caz_end);
  g.relative_depth = static_cast<double>(g.handoff_layer) / static_cast<double>(traj.n_layers);
  return g;
}

/// Near-final rule: width 1 when the probe sits deep enough, else 3.
inline WidthDecision ablation_width(double relative_depth, std::size_t n_layers, const WidthRule& rule) {
  const bool deep = relative_depth > rule.threshold;
  const bool allowed = !rule.depth_corrected || n_layers >= rule.min_layers;
  if (deep && allowed) return {1, true};
  return {3, false};
}

inline WidthDecision ablation_width(const Gem& gem, std::size_t n_layers, const WidthRule& rule) {
  return ablation_width(gem.relative_depth, n_layers, rule);
}

/// Argmax of S(l); ties go to the lower layer.
inline std::size_t peak_layer(const Trajectory& traj) {
  std::optional<std::size_t> best;
  for (std::size_t l = 0; l < traj.n_layers; ++l) {
    if (!traj.separation[l]) continue;
    if (!best || *traj.separation[l] > *traj.separation[*best]) best = l;
  }
  if (!best) throw Error(ErrorKind::NoDefinedSeparation, "separation undefined at every layer");
  return *best;
}

namespace detail {

// Topographic prominence over defined S values; a missing side (array edge) is ignored.
inline double prominence(const std::vector<std::optional<double>>& s, std::size_t peak) {
  const double h = *s[peak];
  std::optional<double> left_min, right_min;
  for (std::size_t l = peak; l-- > 0;) {
    if (!s[l]) continue;
    if (*s[l] > h) break;
    left_min = left_min ? std::min(*left_min, *s[l]) : *s[l];
  }
  for (std::size_t l = peak + 1; l < s.size(); ++l) {
    if (!s[l]) continue;
    if (*s[l] > h) break;
    right_min = right_min ? std::min(*right_min, *s[l]) : *s[l];
  }
  if (left_min && right_min) return h - std::max(*left_min, *right_min);
  if (left_min) return h - *left_min;
  if (right_min) return h - *right_min;
  return 0.0;
}

}  // namespace detail

/// Multi-node inventory: prominent strict local maxima of S, each paired with its first settled layer.
inline std::vector<GemNode> detect_nodes(const Trajectory& traj, double epsilon = kDefaultEpsilon,
                                         double prominence_fraction = 0.25) {
  const auto& s = traj.separation;
  const std::size_t n = traj.n_layers;
  double max_s = 0.0;
  for (const auto& v : s)
    if (v) max_s = std::max(max_s, *v);

  std::vector<GemNode> nodes;
  for (std::size_t l = 0; l < n; ++l) {
    if (!s[l]) continue;
    const bool has_left = l > 0 && s[l - 1];
    const bool has_right = l + 1 < n && s[l + 1];
    if (!has_left && !has_right) continue;
    if (has_left && !(*s[l] > *s[l - 1])) continue;
    if (has_right && !(*s[l] > *s[l + 1])) continue;
    if (detail::prominence(s, l) < prominence_fraction * max_s) continue;
    // a peak on the final layer has no later layer to settle into
    if (l + 1 >= n) continue;

    std::size_t handoff = n - 1;
    for (std::size_t k = l + 1; k < n; ++k) {
      if (traj.angular_velocity[k] && *traj.angular_velocity[k] <= epsilon) {
        handoff = k;
        break;
      }
    }
    if (!traj.direction_defined(handoff)) continue;
    GemNode node{l, handoff, *traj.directions[handoff], *s[l]};
    auto same = std::find_if(nodes.begin(), nodes.end(), [&](const GemNode& o) { return o.node_handoff == handoff; });
    if (same == nodes.end()) {
      nodes.push_back(std::move(node));
    } else if (node.peak_separation > same->peak_separation) {
      *same = std::move(node);
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const GemNode& a, const GemNode& b) { return a.node_handoff < b.node_handoff; });
  return nodes;
}

}  // namespace gem
