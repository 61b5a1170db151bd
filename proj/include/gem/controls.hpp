#pragma once

// Random-direction and depth-matched controls for the settled-direction probe.

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gem/ablation.hpp"
#include "gem/propagator.hpp"
#include "gem/stats.hpp"

namespace gem {

inline constexpr std::size_t kDefaultRandomSeeds = 10;

struct RandomControlRecord {
  AblationRecord concept_record;
  std::vector<AblationRecord> random_records;
  double concept_reduction = 0.0;
  std::vector<double> random_reductions;
  double mean_random_reduction = 0.0;
  std::optional<double> specificity_ratio;  // absent when the mean random reduction is not positive
  std::optional<double> z_score;            // absent when the random sample has no spread
  bool beats_all = false;
  double empirical_p = 1.0;
};

/// Uniform direction on the unit sphere in R^dim.
inline UnitVector random_unit_vector(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (;;) {
    std::vector<double> v(dim);
    for (double& x : v) x = gauss(rng);
    if (l2_norm(v) > 1e-12) return UnitVector::normalize(std::move(v));
  }
}

/// (r + 1) / (n + 1), r = number of random draws at least as strong as the concept.
inline double empirical_p_value(double concept_reduction, const std::vector<double>& random_reductions) {
  std::size_t r = 0;
  for (double x : random_reductions)
    if (x >= concept_reduction) ++r;
  return static_cast<double>(r + 1) / static_cast<double>(random_reductions.size() + 1);
}

inline RandomControlRecord random_direction_control(const ActivationSet& set, const Trajectory& traj, const Gem& gem,
                                                    const WidthRule& rule, std::size_t n_seeds,
                                                    std::uint64_t rng_seed,
                                                    std::optional<std::size_t> width_override = std::nullopt) {
  if (n_seeds == 0) throw Error(ErrorKind::BadField, "need at least one random seed");
  const std::size_t n = set.n_layers();
  const std::size_t width = effective_width(gem.handoff_layer, n, rule, width_override);

  RandomControlRecord rc;
  rc.concept_record = probe_at(set, traj, gem.handoff_layer, width, DirectionSource::Handoff);
  rc.concept_reduction = rc.concept_record.reduction();
  if (!(rc.concept_reduction > 0.0))
    throw Error(ErrorKind::ExcludedZeroReduction, "concept direction does not reduce separation");

  std::mt19937_64 rng(rng_seed);
  for (std::size_t k = 0; k < n_seeds; ++k) {
    AblationRecord r = ablate_and_score(set, gem.handoff_layer, width, random_unit_vector(set.hidden_dim(), rng),
                                        DirectionSource::RandomSeed);
    r.random_seed_index = k;
    rc.random_reductions.push_back(r.reduction());
    rc.random_records.push_back(std::move(r));
  }
  rc.mean_random_reduction = stats::mean(rc.random_reductions);
  if (rc.mean_random_reduction > 0.0) rc.specificity_ratio = rc.concept_reduction / rc.mean_random_reduction;
  try {
    rc.z_score = stats::empirical_z(rc.concept_reduction, rc.random_reductions);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::ZeroVariance) throw;
  }
  rc.beats_all = true;
  for (double x : rc.random_reductions) rc.beats_all = rc.beats_all && rc.concept_reduction > x;
  rc.empirical_p = empirical_p_value(rc.concept_reduction, rc.random_reductions);
  return rc;
}

struct DepthMatchedRecord {
  bool skipped = false;
  std::string skip_reason;
  std::size_t control_layer = 0;
  AblationRecord gem_record;
  AblationRecord control_record;
  double advantage_pp = 0.0;  // control retained - GEM retained
  bool gem_better = false;
  bool degenerate = false;    // GEM retained > 100: kept out of the primary aggregate
  MeasuredAt measured_at = MeasuredAt::ProbeLayer;
};

/// Post-CAZ layer closest in relative depth to L_H (excluding L_H); ties go to the lower layer.
inline std::optional<std::size_t> depth_matched_layer(const Gem& gem, std::size_t n_layers) {
  std::optional<std::size_t> best;
  for (std::size_t l = gem.caz_end + 1; l < n_layers; ++l) {
    if (l == gem.handoff_layer) continue;
    // same denominator, so comparing layer distances is comparing relative-depth distances
    const auto dist = [&](std::size_t x) { return x > gem.handoff_layer ? x - gem.handoff_layer : gem.handoff_layer - x; };
    if (!best || dist(l) < dist(*best)) best = l;
  }
  return best;
}

inline std::vector<Patch> window_patches(std::size_t start, std::size_t width, const UnitVector& u) {
  std::vector<Patch> out;
  for (std::size_t l = start; l < start + width; ++l) out.push_back({l, u});
  return out;
}

/// Scores the settled direction against the centroid direction at a depth-matched
/// post-CAZ layer. With a propagator both are measured at the final layer.
inline DepthMatchedRecord depth_matched_control(const ActivationSet& set, const Trajectory& traj, const Gem& gem,
                                                const WidthRule& rule, const Propagator* propagator = nullptr,
                                                std::optional<std::size_t> width_override = std::nullopt) {
  const std::size_t n = set.n_layers();
  DepthMatchedRecord dm;
  const auto layer = depth_matched_layer(gem, n);
  if (!layer) {
    dm.skipped = true;
    dm.skip_reason = to_string(ErrorKind::NoCandidate);
    return dm;
  }
  dm.control_layer = *layer;
  if (!traj.direction_defined(*layer))
    throw Error(ErrorKind::UndefinedDirectionInWindow, "control-layer direction undefined");

  const std::size_t gem_width = effective_width(gem.handoff_layer, n, rule, width_override);
  const std::size_t ctl_width = effective_width(*layer, n, rule, width_override);
  const UnitVector gem_dir = window_direction(traj, gem.handoff_layer, gem_width);
  const UnitVector& ctl_dir = *traj.directions[*layer];

  if (propagator) {
    dm.measured_at = MeasuredAt::FinalLayer;
    const auto gp = window_patches(gem.handoff_layer, gem_width, gem_dir);
    const auto cp = window_patches(*layer, ctl_width, ctl_dir);
    dm.gem_record = score_through_propagator(*propagator, gp, gem.handoff_layer, gem_width, DirectionSource::Handoff);
    dm.control_record = score_through_propagator(*propagator, cp, *layer, ctl_width, DirectionSource::ControlLayer);
  } else {
    dm.measured_at = MeasuredAt::ProbeLayer;
    dm.gem_record = ablate_and_score(set, gem.handoff_layer, gem_width, gem_dir, DirectionSource::Handoff);
    dm.control_record = ablate_and_score(set, *layer, ctl_width, ctl_dir, DirectionSource::ControlLayer);
  }
  dm.advantage_pp = dm.control_record.retained_pct - dm.gem_record.retained_pct;
  dm.gem_better = dm.advantage_pp > 0.0;
  dm.degenerate = dm.gem_record.degenerate();
  return dm;
}

}  // namespace gem
