#pragma once

// Directional projection ablation and retained-percentage scoring.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gem/detector.hpp"
#include "gem/geometry.hpp"
#include "gem/stats.hpp"

namespace gem {

enum class DirectionSource { Handoff, Peak, ControlLayer, RandomSeed };
enum class MeasuredAt { ProbeLayer, FinalLayer };

inline std::string to_string(DirectionSource s) {
  switch (s) {
    case DirectionSource::Handoff: return "handoff";
    case DirectionSource::Peak: return "peak";
    case DirectionSource::ControlLayer: return "control_layer";
    case DirectionSource::RandomSeed: return "random_seed";
  }
  return "unknown";
}

inline std::string to_string(MeasuredAt m) { return m == MeasuredAt::ProbeLayer ? "probe_layer" : "final_layer"; }

struct AblationRecord {
  std::size_t probe_layer = 0;
  std::size_t width = 1;
  DirectionSource direction_source = DirectionSource::Handoff;
  std::size_t random_seed_index = 0;  // meaningful for RandomSeed only
  double baseline_separation = 0.0;   // mean over measured layers
  double ablated_separation = 0.0;
  double retained_pct = 0.0;
  MeasuredAt measured_at = MeasuredAt::ProbeLayer;
  std::vector<std::size_t> measured_layers;
  std::vector<double> baseline_per_layer;
  std::vector<double> ablated_per_layer;

  bool degenerate() const { return retained_pct > 100.0; }
  double reduction() const { return 1.0 - retained_pct / 100.0; }
};

/// h - (h.u) u
inline std::vector<double> project_out(std::span<const double> h, const UnitVector& u) {
  if (h.size() != u.size()) throw Error(ErrorKind::DimensionMismatch, "project_out: length mismatch");
  const double c = dot(h, u.components());
  std::vector<double> out(h.begin(), h.end());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] -= c * u[j];
  return out;
}

/// Sign-aligned mean of the directions in [start, start + width), renormalized.
inline UnitVector window_direction(const Trajectory& traj, std::size_t start, std::size_t width) {
  if (width == 0 || start + width > traj.n_layers)
    throw Error(ErrorKind::UndefinedDirectionInWindow, "window exceeds the layer range");
  for (std::size_t l = start; l < start + width; ++l)
    if (!traj.direction_defined(l))
      throw Error(ErrorKind::UndefinedDirectionInWindow, "direction undefined at layer " + std::to_string(l));
  const UnitVector& anchor = *traj.directions[start];
  if (width == 1) return anchor;
  std::vector<double> sum(anchor.size(), 0.0);
  for (std::size_t l = start; l < start + width; ++l) {
    const UnitVector& u = *traj.directions[l];
    const double sign = u.dot(anchor) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += sign * u[j];
  }
  try {
    return UnitVector::normalize(std::move(sum), 1e-9 * static_cast<double>(width));
  } catch (const Error&) {
    throw Error(ErrorKind::DegenerateAverage, "window directions cancel");
  }
}

/// Separation at `layer` after projecting `u` off every activation.
inline double ablated_separation(const ActivationSet& set, std::size_t layer, const UnitVector& u) {
  const LayerMoments m = layer_moments(set, layer, &u);
  const double num = l2_norm(m.centroid_difference());
  const double pooled = 0.5 * (m.trace_pos + m.trace_neg);
  if (pooled > 0.0) return num / std::sqrt(pooled);
  if (num <= degeneracy_threshold(set.hidden_dim())) return 0.0;
  throw Error(ErrorKind::ZeroVariance, "ablation removed all within-class variance but not the separation");
}

inline double baseline_separation(const ActivationSet& set, std::size_t layer) {
  double s = 0.0;
  try {
    s = separation_score(set, layer);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ZeroVariance) throw Error(ErrorKind::ZeroBaseline, "baseline separation undefined");
    throw;
  }
  if (!(s > 0.0)) throw Error(ErrorKind::ZeroBaseline, "baseline separation is zero at layer " + std::to_string(layer));
  return s;
}

/// Projects `u` out at each window layer and scores 100 x mean(S_ablated / S_baseline).
inline AblationRecord ablate_and_score(const ActivationSet& set, std::size_t probe_layer, std::size_t width,
                                       const UnitVector& u, DirectionSource source = DirectionSource::Handoff) {
  if (width == 0 || probe_layer + width > set.n_layers())
    throw Error(ErrorKind::BadField, "ablation window exceeds the layer range");
  if (u.size() != set.hidden_dim()) throw Error(ErrorKind::DimensionMismatch, "probe length differs from hidden_dim");
  AblationRecord r;
  r.probe_layer = probe_layer;
  r.width = width;
  r.direction_source = source;
  r.measured_at = MeasuredAt::ProbeLayer;
  double ratio_sum = 0.0;
  for (std::size_t l = probe_layer; l < probe_layer + width; ++l) {
    const double base = baseline_separation(set, l);
    const double abl = ablated_separation(set, l, u);
    r.measured_layers.push_back(l);
    r.baseline_per_layer.push_back(base);
    r.ablated_per_layer.push_back(abl);
    ratio_sum += abl / base;
  }
  const double w = static_cast<double>(width);
  r.baseline_separation = stats::mean(r.baseline_per_layer);
  r.ablated_separation = stats::mean(r.ablated_per_layer);
  r.retained_pct = 100.0 * ratio_sum / w;
  return r;
}

enum class Outcome { HandoffBetter, PeakBetter, Tie };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::HandoffBetter: return "handoff_better";
    case Outcome::PeakBetter: return "peak_better";
    case Outcome::Tie: return "tie";
  }
  return "unknown";
}

struct ComparisonRecord {
  std::string model_id;
  std::string concept_name;
  AblationRecord handoff_record;
  AblationRecord peak_record;
  Outcome outcome = Outcome::Tie;
  double delta_pp = 0.0;  // peak retained - handoff retained
};

inline Outcome outcome_from_delta(double delta_pp) {
  if (delta_pp > 0.0) return Outcome::HandoffBetter;
  if (delta_pp < 0.0) return Outcome::PeakBetter;
  return Outcome::Tie;
}

/// Width for a probe starting at `layer`: the rule's choice (or an override), clamped to the layers left.
inline std::size_t effective_width(std::size_t layer, std::size_t n_layers, const WidthRule& rule,
                                   std::optional<std::size_t> width_override = std::nullopt) {
  const std::size_t w = width_override
                            ? *width_override
                            : ablation_width(static_cast<double>(layer) / static_cast<double>(n_layers), n_layers, rule)
                                  .width;
  return std::max<std::size_t>(1, std::min(w, n_layers - layer));
}

inline AblationRecord probe_at(const ActivationSet& set, const Trajectory& traj, std::size_t layer, std::size_t width,
                               DirectionSource source) {
  return ablate_and_score(set, layer, width, window_direction(traj, layer, width), source);
}

/// Settled-direction probe at L_H against the direction at the separation peak.
inline ComparisonRecord compare_handoff_vs_peak(const ActivationSet& set, const Trajectory& traj, const Gem& gem,
                                                const WidthRule& rule,
                                                std::optional<std::size_t> width_override = std::nullopt) {
  const std::size_t n = set.n_layers();
  const std::size_t peak = peak_layer(traj);
  ComparisonRecord c;
  c.model_id = set.manifest.model_id;
  c.concept_name = set.manifest.concept_name;
  c.handoff_record = probe_at(set, traj, gem.handoff_layer, effective_width(gem.handoff_layer, n, rule, width_override),
                              DirectionSource::Handoff);
  c.peak_record = probe_at(set, traj, peak, effective_width(peak, n, rule, width_override), DirectionSource::Peak);
  c.delta_pp = c.peak_record.retained_pct - c.handoff_record.retained_pct;
  c.outcome = outcome_from_delta(c.delta_pp);
  return c;
}

/// Near-final rule against a fixed width of 3 at the handoff layer.
struct WidthExperimentRecord {
  bool triggered = false;
  std::size_t adaptive_width = 3;
  std::size_t fixed_width = 3;
  double adaptive_retained_pct = 0.0;
  double fixed_retained_pct = 0.0;
  double delta_pp = 0.0;  // fixed - adaptive; positive means the rule helped
};

inline WidthExperimentRecord adaptive_width_experiment(const ActivationSet& set, const Trajectory& traj, const Gem& gem,
                                                       const WidthRule& rule) {
  const std::size_t n = set.n_layers();
  WidthExperimentRecord r;
  r.triggered = ablation_width(gem, n, rule).triggered;
  r.adaptive_width = effective_width(gem.handoff_layer, n, rule);
  r.fixed_width = effective_width(gem.handoff_layer, n, rule, 3);
  const AblationRecord fixed = probe_at(set, traj, gem.handoff_layer, r.fixed_width, DirectionSource::Handoff);
  r.fixed_retained_pct = fixed.retained_pct;
  if (r.adaptive_width == r.fixed_width) {
    r.adaptive_retained_pct = fixed.retained_pct;
    r.delta_pp = 0.0;
  } else {
    r.adaptive_retained_pct =
        probe_at(set, traj, gem.handoff_layer, r.adaptive_width, DirectionSource::Handoff).retained_pct;
    r.delta_pp = r.fixed_retained_pct - r.adaptive_retained_pct;
  }
  return r;
}

}  // namespace gem
