#pragma once

// Per-layer concept geometry: centroid-difference directions, Fisher-normalized
// separation, angular velocity / stability, entry-exit and handoff cosines.
//
// Covariance traces use Bessel-corrected (K-1) per-dimension variances and are
// accumulated dimension-wise; the d x d covariance is never formed.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "gem/activation_store.hpp"
#include "gem/error.hpp"

namespace gem {

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::DimensionMismatch, "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Unit-norm direction in activation space.
class UnitVector {
 public:
  UnitVector() = default;

  /// Normalizes `v`; throws DegenerateDirection when its norm is <= `min_norm`.
  static UnitVector normalize(std::vector<double> v, double min_norm = 0.0) {
    const double n = l2_norm(v);
    if (!(n > min_norm) || !std::isfinite(n))
      throw Error(ErrorKind::DegenerateDirection, "vector norm " + io::format_double(n) + " too small to normalize");
    for (double& x : v) x /= n;
    UnitVector u;
    u.c_ = std::move(v);
    return u;
  }

  std::span<const double> components() const { return c_; }
  std::size_t size() const { return c_.size(); }
  double operator[](std::size_t i) const { return c_[i]; }
  double dot(const UnitVector& o) const { return gem::dot(c_, o.c_); }
  UnitVector negated() const {
    UnitVector u = *this;
    for (double& x : u.c_) x = -x;
    return u;
  }
  bool operator==(const UnitVector&) const = default;

 private:
  std::vector<double> c_;
};

/// Threshold below which a centroid difference is treated as zero.
inline double degeneracy_threshold(std::size_t hidden_dim) {
  return 1e-12 * std::sqrt(static_cast<double>(hidden_dim));
}

/// Class centroids and Bessel-corrected covariance traces at one layer.
struct LayerMoments {
  std::vector<double> mean_pos;
  std::vector<double> mean_neg;
  double trace_pos = 0.0;
  double trace_neg = 0.0;

  std::vector<double> centroid_difference() const {
    std::vector<double> d(mean_pos.size());
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = mean_pos[j] - mean_neg[j];
    return d;
  }
};

namespace detail {

// Copies a float row into `out`, optionally removing the component along `ablate`.
inline void load_row(std::span<const float> row, const UnitVector* ablate, std::vector<double>& out) {
  out.resize(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j];
  if (ablate) {
    const double c = gem::dot(out, ablate->components());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] -= c * (*ablate)[j];
  }
}

inline void class_moments(const ActivationTensor& t, std::size_t layer, const UnitVector* ablate,
                          std::vector<double>& mean, double& trace) {
  const auto& s = t.shape();
  mean.assign(s.hidden_dim, 0.0);
  std::vector<double> row;
  for (std::size_t i = 0; i < s.n_pairs; ++i) {
    load_row(t.row(layer, i), ablate, row);
    for (std::size_t j = 0; j < s.hidden_dim; ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(s.n_pairs);
  double ss = 0.0;
  for (std::size_t i = 0; i < s.n_pairs; ++i) {
    load_row(t.row(layer, i), ablate, row);
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
      const double d = row[j] - mean[j];
      ss += d * d;
    }
  }
  trace = ss / static_cast<double>(s.n_pairs - 1);
}

}  // namespace detail

/// Two-pass moments at `layer`; with `ablate`, every activation is first projected off that direction.
inline LayerMoments layer_moments(const ActivationSet& set, std::size_t layer, const UnitVector* ablate = nullptr) {
  if (layer >= set.n_layers()) throw Error(ErrorKind::BadField, "layer index out of range");
  if (ablate && ablate->size() != set.hidden_dim())
    throw Error(ErrorKind::DimensionMismatch, "ablation direction length differs from hidden_dim");
  LayerMoments m;
  detail::class_moments(set.pos, layer, ablate, m.mean_pos, m.trace_pos);
  detail::class_moments(set.neg, layer, ablate, m.mean_neg, m.trace_neg);
  return m;
}

inline UnitVector direction_from_moments(const LayerMoments& m) {
  const std::size_t d = m.mean_pos.size();
  try {
    return UnitVector::normalize(m.centroid_difference(), degeneracy_threshold(d));
  } catch (const Error&) {
    throw Error(ErrorKind::DegenerateDirection, "centroid difference is degenerate");
  }
}

inline double separation_from_moments(const LayerMoments& m) {
  const double num = l2_norm(m.centroid_difference());
  const double pooled = 0.5 * (m.trace_pos + m.trace_neg);
  if (!(pooled > 0.0)) throw Error(ErrorKind::ZeroVariance, "both class covariance traces are zero");
  return num / std::sqrt(pooled);
}

/// Normalized difference of class centroids, oriented negative -> positive.
inline UnitVector compute_direction(const ActivationSet& set, std::size_t layer) {
  return direction_from_moments(layer_moments(set, layer));
}

/// Centroid distance over sqrt(mean of the two class covariance traces).
inline double separation_score(const ActivationSet& set, std::size_t layer) {
  return separation_from_moments(layer_moments(set, layer));
}

struct Trajectory {
  std::size_t n_layers = 0;
  std::vector<std::optional<UnitVector>> directions;
  std::vector<std::optional<double>> separation;
  // Index 0 is always empty; index l compares layers l and l-1.
  std::vector<std::optional<double>> angular_velocity;
  std::vector<std::optional<double>> stability;

  bool direction_defined(std::size_t l) const { return l < n_layers && directions[l].has_value(); }
};

inline double angular_velocity(const UnitVector& cur, const UnitVector& prev) {
  double w = 1.0 - std::abs(cur.dot(prev));
  // |dot| can exceed 1 by rounding
  return w < 0.0 ? 0.0 : (w > 1.0 ? 1.0 : w);
}

inline Trajectory compute_trajectory(const ActivationSet& set) {
  Trajectory t;
  t.n_layers = set.n_layers();
  t.directions.resize(t.n_layers);
  t.separation.resize(t.n_layers);
  t.angular_velocity.resize(t.n_layers);
  t.stability.resize(t.n_layers);
  for (std::size_t l = 0; l < t.n_layers; ++l) {
    const LayerMoments m = layer_moments(set, l);
    try {
      t.directions[l] = direction_from_moments(m);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateDirection) throw;
    }
    try {
      t.separation[l] = separation_from_moments(m);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ZeroVariance) throw;
    }
  }
  for (std::size_t l = 1; l < t.n_layers; ++l) {
    if (t.directions[l] && t.directions[l - 1]) {
      const double w = angular_velocity(*t.directions[l], *t.directions[l - 1]);
      t.angular_velocity[l] = w;
      t.stability[l] = 1.0 - w;
    }
  }
  return t;
}

/// Signed cosine between the CAZ entry and exit directions.
inline double entry_exit_cosine(const Trajectory& traj, std::size_t caz_start, std::size_t caz_end) {
  if (!traj.direction_defined(caz_start) || !traj.direction_defined(caz_end))
    throw Error(ErrorKind::UndefinedBoundary, "CAZ boundary direction undefined");
  return traj.directions[caz_start]->dot(*traj.directions[caz_end]);
}

/// Cosine between the settled direction and the final-layer direction.
inline double handoff_cosine(const Trajectory& traj, std::size_t handoff_layer) {
  const std::size_t last = traj.n_layers - 1;
  if (!traj.direction_defined(handoff_layer) || !traj.direction_defined(last))
    throw Error(ErrorKind::UndefinedBoundary, "handoff or final direction undefined");
  return traj.directions[handoff_layer]->dot(*traj.directions[last]);
}

}  // namespace gem
