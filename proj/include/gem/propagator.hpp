#pragma once

// Propagators produce post-patch activations for every layer at or after the
// shallowest patch. Two implementations ship: a closed-form linear relay used
// for protocol testing, and a directory-backed one that serves activations
// dumped from a real model with the same patches applied.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "gem/ablation.hpp"
#include "gem/activation_store.hpp"

namespace gem {

struct Patch {
  std::size_t layer = 0;
  UnitVector direction;
};

class Propagator {
 public:
  virtual ~Propagator() = default;
  /// Unpatched activations.
  virtual const ActivationSet& base() const = 0;
  /// Activations with every patch projected out at its layer and carried downstream.
  /// An empty patch list returns `base()` exactly.
  virtual ActivationSet propagate(std::span<const Patch> patches) const = 0;
};

struct RelayNodeSpec {
  std::size_t layer = 0;  // layer whose residual update writes this node's direction
  double gain = 2.0;      // class-centroid distance injected along the node direction
  double feed = 0.0;      // fraction of this node's signal relayed from the previous node
};

/// Linear residual relay. Node k writes along its own direction u_k at its layer:
///   h <- h - (u_{k-1}.h) u_{k-1} + feed_k (u_{k-1}.h) u_k + y (1 - feed_k) gain_k / 2 u_k
/// (the first node only injects y gain_0 / 2 u_0). Every layer also adds fresh,
/// class-centered Gaussian noise orthogonal to all node directions.
struct RelaySpec {
  std::size_t n_layers = 12;
  std::size_t hidden_dim = 16;
  std::size_t n_pairs = 32;
  double noise_scale = 0.1;
  std::uint64_t rng_seed = 0;
  std::vector<RelayNodeSpec> nodes;
  std::string model_id = "synthetic-relay";
  std::string concept_name = "relay";
};

class SyntheticPropagator final : public Propagator {
 public:
  explicit SyntheticPropagator(RelaySpec spec) : spec_(std::move(spec)) {
    validate();
    build();
  }

  const RelaySpec& spec() const { return spec_; }
  const ActivationSet& base() const override { return base_; }
  const std::vector<UnitVector>& node_directions() const { return dirs_; }

  /// Ground-truth node inventory: each node settles one layer after it writes.
  std::vector<GemNode> planted_nodes() const {
    std::vector<GemNode> out;
    for (std::size_t k = 0; k < spec_.nodes.size(); ++k)
      out.push_back(GemNode{spec_.nodes[k].layer, spec_.nodes[k].layer + 1, dirs_[k], spec_.nodes[k].gain});
    return out;
  }

  ActivationSet propagate(std::span<const Patch> patches) const override {
    if (patches.empty()) return base_;
    const std::size_t d = spec_.hidden_dim;
    std::map<std::size_t, std::vector<const UnitVector*>> by_layer;
    for (const auto& p : patches) {
      if (p.layer >= spec_.n_layers) throw Error(ErrorKind::PropagatorFailure, "patch layer out of range");
      if (p.direction.size() != d) throw Error(ErrorKind::DimensionMismatch, "patch direction length mismatch");
      by_layer[p.layer].push_back(&p.direction);
    }
    const std::size_t first = by_layer.begin()->first;

    ActivationSet out = base_;
    for (int cls = 0; cls < 2; ++cls) {
      ActivationTensor& t = cls == 0 ? out.pos : out.neg;
      for (std::size_t i = 0; i < spec_.n_pairs; ++i) {
        std::vector<double> h = state(first, cls, i);
        for (std::size_t l = first; l < spec_.n_layers; ++l) {
          if (l > first) step(l, cls, i, h);
          if (auto it = by_layer.find(l); it != by_layer.end())
            for (const UnitVector* u : it->second) h = project_out(h, *u);
          auto row = t.row(l, i);
          for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(h[j]);
        }
      }
    }
    return out;
  }

 private:
  void validate() const {
    const auto& s = spec_;
    if (s.n_layers < 2 || s.n_pairs < 2) throw Error(ErrorKind::BadSpec, "relay needs >= 2 layers and pairs");
    if (s.nodes.empty() || s.nodes.size() > 12) throw Error(ErrorKind::BadSpec, "relay needs 1..12 nodes");
    if (s.hidden_dim < s.nodes.size() + 1) throw Error(ErrorKind::BadSpec, "hidden_dim must exceed the node count");
    if (!(s.noise_scale > 0.0)) throw Error(ErrorKind::BadSpec, "noise_scale must be > 0 (separation needs variance)");
    for (std::size_t k = 0; k < s.nodes.size(); ++k) {
      const auto& n = s.nodes[k];
      if (n.layer < 1) throw Error(ErrorKind::BadSpec, "node layers start at 1");
      if (n.layer + 1 >= s.n_layers) throw Error(ErrorKind::BadSpec, "each node needs a later layer to settle into");
      if (k > 0 && n.layer < s.nodes[k - 1].layer + 2)
        throw Error(ErrorKind::BadSpec, "node layers must be increasing with a settle layer between them");
      if (!(n.feed >= 0.0 && n.feed <= 1.0)) throw Error(ErrorKind::BadSpec, "feed must be in [0, 1]");
      if (!(n.gain > 0.0)) throw Error(ErrorKind::BadSpec, "gain must be > 0");
      if (k == 0 && n.feed != 0.0) throw Error(ErrorKind::BadSpec, "the first node has nothing to be fed by");
    }
  }

  // Applies layer l's linear update (l >= 1) to h in place.
  void step(std::size_t l, int cls, std::size_t i, std::vector<double>& h) const {
    const std::size_t d = spec_.hidden_dim;
    if (auto k = node_at(l)) {
      if (*k > 0) {
        const UnitVector& prev = dirs_[*k - 1];
        const UnitVector& cur = dirs_[*k];
        const double c = dot(h, prev.components());
        const double f = spec_.nodes[*k].feed;
        for (std::size_t j = 0; j < d; ++j) h[j] += -c * prev[j] + f * c * cur[j];
      }
    }
    const double* b = &additive_[index(l, cls, i)];
    for (std::size_t j = 0; j < d; ++j) h[j] += b[j];
  }

  std::optional<std::size_t> node_at(std::size_t l) const {
    for (std::size_t k = 0; k < spec_.nodes.size(); ++k)
      if (spec_.nodes[k].layer == l) return k;
    return std::nullopt;
  }

  std::size_t index(std::size_t l, int cls, std::size_t i) const {
    return ((l * 2 + static_cast<std::size_t>(cls)) * spec_.n_pairs + i) * spec_.hidden_dim;
  }

  std::vector<double> state(std::size_t l, int cls, std::size_t i) const {
    const double* p = &states_[index(l, cls, i)];
    return std::vector<double>(p, p + spec_.hidden_dim);
  }

  void build() {
    const auto& s = spec_;
    const std::size_t d = s.hidden_dim;
    std::mt19937_64 rng(s.rng_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // orthonormal node directions by Gram-Schmidt
    for (std::size_t k = 0; k < s.nodes.size(); ++k) {
      for (;;) {
        std::vector<double> v(d);
        for (double& x : v) x = gauss(rng);
        for (const auto& u : dirs_) {
          const double c = dot(v, u.components());
          for (std::size_t j = 0; j < d; ++j) v[j] -= c * u[j];
        }
        if (l2_norm(v) > 1e-6) {
          dirs_.push_back(UnitVector::normalize(std::move(v)));
          break;
        }
      }
    }

    additive_.assign(s.n_layers * 2 * s.n_pairs * d, 0.0);
    states_.assign(additive_.size(), 0.0);
    for (std::size_t l = 0; l < s.n_layers; ++l) {
      for (int cls = 0; cls < 2; ++cls) {
        // class-centered noise with no component along any node direction
        std::vector<std::vector<double>> noise(s.n_pairs, std::vector<double>(d));
        std::vector<double> mean(d, 0.0);
        for (auto& v : noise) {
          for (double& x : v) x = s.noise_scale * gauss(rng);
          for (const auto& u : dirs_) v = project_out(v, u);
          for (std::size_t j = 0; j < d; ++j) mean[j] += v[j];
        }
        for (double& m : mean) m /= static_cast<double>(s.n_pairs);
        const double y = cls == 0 ? 1.0 : -1.0;
        const auto k = node_at(l);
        for (std::size_t i = 0; i < s.n_pairs; ++i) {
          double* b = &additive_[index(l, cls, i)];
          for (std::size_t j = 0; j < d; ++j) b[j] = noise[i][j] - mean[j];
          if (k) {
            const double amp = y * (1.0 - s.nodes[*k].feed) * s.nodes[*k].gain / 2.0;
            for (std::size_t j = 0; j < d; ++j) b[j] += amp * dirs_[*k][j];
          }
        }
      }
    }

    Manifest m;
    m.model_id = s.model_id;
    m.concept_name = s.concept_name;
    m.n_layers = s.n_layers;
    m.hidden_dim = d;
    m.n_pairs = s.n_pairs;
    ActivationTensor pos(m.shape()), neg(m.shape());
    for (int cls = 0; cls < 2; ++cls) {
      ActivationTensor& t = cls == 0 ? pos : neg;
      for (std::size_t i = 0; i < s.n_pairs; ++i) {
        std::vector<double> h(d, 0.0);
        for (std::size_t l = 0; l < s.n_layers; ++l) {
          if (l == 0) {
            const double* b = &additive_[index(0, cls, i)];
            h.assign(b, b + d);
          } else {
            step(l, cls, i, h);
          }
          std::copy(h.begin(), h.end(), states_.begin() + static_cast<std::ptrdiff_t>(index(l, cls, i)));
          auto row = t.row(l, i);
          for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(h[j]);
        }
      }
    }
    base_ = make_activation_set(std::move(m), std::move(pos), std::move(neg));
  }

  RelaySpec spec_;
  std::vector<UnitVector> dirs_;
  std::vector<double> additive_;  // per (layer, class, pair) additive term of the update
  std::vector<double> states_;    // unpatched double-precision residual stream
  ActivationSet base_;
};

/// Serves patched activations dumped by an external extractor. Each patched
/// dataset lives in its own directory below `root` and lists its patches in
/// `annotations.patches` as [{"layer": L, "direction": [..]}] or
/// [{"layer": L, "direction_file": "rel/path.bin"}] (raw f32le, hidden_dim values).
class PatchedDirectoryPropagator final : public Propagator {
 public:
  PatchedDirectoryPropagator(ActivationSet base, const fs::path& root) : base_(std::move(base)) {
    if (!fs::is_directory(root)) throw Error(ErrorKind::MissingFile, "patched root not found: " + root.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().filename() == kManifestName) dirs.push_back(e.path().parent_path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
      Manifest m = read_manifest(dir);
      if (!m.annotations.contains("patches")) continue;
      if (!(m.shape() == base_.manifest.shape())) continue;
      entries_.push_back({dir, parse_patches(m, dir)});
    }
  }

  const ActivationSet& base() const override { return base_; }

  std::size_t available() const { return entries_.size(); }

  ActivationSet propagate(std::span<const Patch> patches) const override {
    if (patches.empty()) return base_;
    for (const auto& e : entries_)
      if (matches(e.patches, patches)) return load_activation_set(e.dir);
    throw Error(ErrorKind::PropagatorFailure, "no dumped activations for the requested patch set");
  }

 private:
  struct Entry {
    fs::path dir;
    std::vector<Patch> patches;
  };

  std::vector<Patch> parse_patches(const Manifest& m, const fs::path& dir) const {
    std::vector<Patch> out;
    const auto& arr = m.annotations.at("patches");
    if (!arr.is_array()) throw Error(ErrorKind::BadField, "annotations.patches must be an array");
    for (const auto& p : arr) {
      Patch patch;
      patch.layer = p.at("layer").get<std::size_t>();
      std::vector<double> v;
      if (p.contains("direction")) {
        v = p.at("direction").get<std::vector<double>>();
      } else {
        auto floats = detail::decode_f32le(io::read_file(dir / p.at("direction_file").get<std::string>()));
        v.assign(floats.begin(), floats.end());
      }
      if (v.size() != m.hidden_dim) throw Error(ErrorKind::DimensionMismatch, "patch direction length mismatch");
      patch.direction = UnitVector::normalize(std::move(v));
      out.push_back(std::move(patch));
    }
    return out;
  }

  // Same layers, directions equal up to sign (projection is sign-invariant).
  static bool matches(const std::vector<Patch>& have, std::span<const Patch> want) {
    if (have.size() != want.size()) return false;
    std::vector<bool> used(have.size(), false);
    for (const auto& w : want) {
      bool found = false;
      for (std::size_t k = 0; k < have.size() && !found; ++k) {
        if (used[k] || have[k].layer != w.layer || have[k].direction.size() != w.direction.size()) continue;
        if (std::abs(have[k].direction.dot(w.direction)) >= 1.0 - 1e-6) used[k] = found = true;
      }
      if (!found) return false;
    }
    return true;
  }

  ActivationSet base_;
  std::vector<Entry> entries_;
};

/// Separation at `layer` of an arbitrary (possibly patched) set, ZeroBaseline when undefined.
inline double separation_or_zero_baseline(const ActivationSet& set, std::size_t layer) {
  try {
    return separation_score(set, layer);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ZeroVariance) throw Error(ErrorKind::ZeroBaseline, "separation undefined");
    throw;
  }
}

/// Scores patches by final-layer retained percentage through a propagator.
inline AblationRecord score_through_propagator(const Propagator& prop, std::span<const Patch> patches,
                                               std::size_t probe_layer, std::size_t width, DirectionSource source) {
  const ActivationSet& base = prop.base();
  const std::size_t last = base.n_layers() - 1;
  const ActivationSet patched = prop.propagate(patches);
  AblationRecord r;
  r.probe_layer = probe_layer;
  r.width = width;
  r.direction_source = source;
  r.measured_at = MeasuredAt::FinalLayer;
  r.measured_layers = {last};
  r.baseline_separation = baseline_separation(base, last);
  r.ablated_separation = separation_or_zero_baseline(patched, last);
  r.baseline_per_layer = {r.baseline_separation};
  r.ablated_per_layer = {r.ablated_separation};
  r.retained_pct = 100.0 * r.ablated_separation / r.baseline_separation;
  return r;
}

}  // namespace gem
