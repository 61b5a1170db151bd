#pragma once

// On-disk contrastive activation format.
//
// A dataset directory holds `manifest.json` plus two raw blobs (`pos.bin`,
// `neg.bin`) of little-endian float32 in layer-major order: element
// (layer, pair, dim) lives at byte ((layer * n_pairs + pair) * hidden_dim + dim) * 4.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gem/error.hpp"
#include "gem/io_util.hpp"
#include "json.hpp"

namespace gem {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kFormatVersion = "1";

struct Shape {
  std::size_t n_layers = 0;
  std::size_t n_pairs = 0;
  std::size_t hidden_dim = 0;

  std::size_t elements() const { return n_layers * n_pairs * hidden_dim; }
  std::uint64_t bytes() const { return static_cast<std::uint64_t>(elements()) * 4; }
  bool operator==(const Shape&) const = default;
};

struct Manifest {
  std::string format_version = kFormatVersion;
  std::string model_id;
  std::string concept_name;
  std::size_t n_layers = 0;
  std::size_t hidden_dim = 0;
  std::size_t n_pairs = 0;
  std::string dtype = "f32le";
  std::string layout = "layer_major";
  std::string pos_file = "pos.bin";
  std::string neg_file = "neg.bin";
  // Free-form metadata (extraction settings, patch lists); never interpreted by validation.
  json annotations = json::object();

  Shape shape() const { return {n_layers, n_pairs, hidden_dim}; }
};

/// Byte offset of element (layer, pair, dim) inside a blob.
inline std::uint64_t element_offset(const Shape& s, std::size_t layer, std::size_t pair, std::size_t dim) {
  return ((static_cast<std::uint64_t>(layer) * s.n_pairs + pair) * s.hidden_dim + dim) * 4;
}

/// Dense [layer][pair][dim] float tensor.
class ActivationTensor {
 public:
  ActivationTensor() = default;
  explicit ActivationTensor(Shape shape) : shape_(shape), data_(shape.elements(), 0.0f) {}
  ActivationTensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.elements())
      throw Error(ErrorKind::ShapeMismatch, "tensor data length does not match its shape");
  }

  const Shape& shape() const { return shape_; }
  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::span<const float> row(std::size_t layer, std::size_t pair) const {
    return {data_.data() + (layer * shape_.n_pairs + pair) * shape_.hidden_dim, shape_.hidden_dim};
  }
  std::span<float> row(std::size_t layer, std::size_t pair) {
    return {data_.data() + (layer * shape_.n_pairs + pair) * shape_.hidden_dim, shape_.hidden_dim};
  }
  float at(std::size_t layer, std::size_t pair, std::size_t dim) const { return row(layer, pair)[dim]; }
  float& at(std::size_t layer, std::size_t pair, std::size_t dim) { return row(layer, pair)[dim]; }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Shape shape_{};
  std::vector<float> data_;
};

struct ActivationSet {
  Manifest manifest;
  ActivationTensor pos;
  ActivationTensor neg;

  std::size_t n_layers() const { return manifest.n_layers; }
  std::size_t n_pairs() const { return manifest.n_pairs; }
  std::size_t hidden_dim() const { return manifest.hidden_dim; }
};

namespace detail {

inline bool has_path_separator(const std::string& s) {
  return s.find('/') != std::string::npos || s.find('\\') != std::string::npos;
}

inline bool is_safe_relative(const std::string& p) {
  if (p.empty()) return false;
  fs::path path(p);
  if (path.is_absolute()) return false;
  for (const auto& part : path)
    if (part == "..") return false;
  return true;
}

inline std::size_t positive_field(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw Error(ErrorKind::BadField, std::string(key) + " must be an integer");
  if (v.is_number_unsigned()) {
    auto u = v.get<std::uint64_t>();
    if (u == 0) throw Error(ErrorKind::BadField, std::string(key) + " must be positive");
    return static_cast<std::size_t>(u);
  }
  auto s = v.get<std::int64_t>();
  if (s <= 0) throw Error(ErrorKind::BadField, std::string(key) + " must be positive");
  return static_cast<std::size_t>(s);
}

inline std::string string_field(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_string()) throw Error(ErrorKind::BadField, std::string(key) + " must be a string");
  return v.get<std::string>();
}

}  // namespace detail

/// Strict parse: every field required (except `annotations`), unknown fields rejected.
inline Manifest parse_manifest(const json& j) {
  static const char* const kKnown[] = {"format_version", "model_id", "concept", "n_layers", "hidden_dim",
                                       "n_pairs",        "dtype",    "layout",  "files",    "annotations"};
  if (!j.is_object()) throw Error(ErrorKind::BadField, "manifest must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : kKnown) known = known || key == k;
    if (!known) throw Error(ErrorKind::BadField, "unknown manifest field '" + key + "'");
  }
  for (const char* k : kKnown) {
    if (std::string_view(k) == "annotations") continue;
    if (!j.contains(k)) throw Error(ErrorKind::BadField, std::string("missing manifest field '") + k + "'");
  }
  Manifest m;
  m.format_version = detail::string_field(j, "format_version");
  m.model_id = detail::string_field(j, "model_id");
  m.concept_name = detail::string_field(j, "concept");
  m.n_layers = detail::positive_field(j, "n_layers");
  m.hidden_dim = detail::positive_field(j, "hidden_dim");
  m.n_pairs = detail::positive_field(j, "n_pairs");
  m.dtype = detail::string_field(j, "dtype");
  m.layout = detail::string_field(j, "layout");
  const auto& files = j.at("files");
  if (!files.is_object() || files.size() != 2 || !files.contains("pos") || !files.contains("neg"))
    throw Error(ErrorKind::BadField, "files must be exactly {pos, neg}");
  m.pos_file = detail::string_field(files, "pos");
  m.neg_file = detail::string_field(files, "neg");
  if (j.contains("annotations")) {
    if (!j["annotations"].is_object()) throw Error(ErrorKind::BadField, "annotations must be an object");
    m.annotations = j["annotations"];
  }
  return m;
}

inline json manifest_to_json(const Manifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["model_id"] = m.model_id;
  j["concept"] = m.concept_name;
  j["n_layers"] = m.n_layers;
  j["hidden_dim"] = m.hidden_dim;
  j["n_pairs"] = m.n_pairs;
  j["dtype"] = m.dtype;
  j["layout"] = m.layout;
  j["files"] = {{"pos", m.pos_file}, {"neg", m.neg_file}};
  if (!m.annotations.empty()) j["annotations"] = m.annotations;
  return j;
}

/// Field-level checks that do not need the filesystem.
inline void check_manifest_fields(const Manifest& m) {
  if (m.format_version != kFormatVersion)
    throw Error(ErrorKind::BadField, "unsupported format_version '" + m.format_version + "'");
  if (m.model_id.empty() || detail::has_path_separator(m.model_id))
    throw Error(ErrorKind::BadField, "model_id must be non-empty without path separators");
  if (m.concept_name.empty() || detail::has_path_separator(m.concept_name))
    throw Error(ErrorKind::BadField, "concept must be non-empty without path separators");
  if (m.n_layers < 2) throw Error(ErrorKind::BadField, "n_layers must be >= 2");
  if (m.hidden_dim < 1) throw Error(ErrorKind::BadField, "hidden_dim must be >= 1");
  if (m.n_pairs < 2) throw Error(ErrorKind::BadField, "n_pairs must be >= 2 (within-class covariance)");
  if (m.dtype != "f32le") throw Error(ErrorKind::BadField, "unknown dtype '" + m.dtype + "'");
  if (m.layout != "layer_major") throw Error(ErrorKind::BadField, "unknown layout '" + m.layout + "'");
  if (!detail::is_safe_relative(m.pos_file) || !detail::is_safe_relative(m.neg_file))
    throw Error(ErrorKind::BadField, "files must be relative paths inside the dataset directory");
}

/// Checks a manifest against the observed byte length of each referenced file.
inline void validate_manifest(const Manifest& m, const std::map<std::string, std::uint64_t>& file_sizes) {
  check_manifest_fields(m);
  const std::uint64_t expected = m.shape().bytes();
  for (const std::string& f : {m.pos_file, m.neg_file}) {
    auto it = file_sizes.find(f);
    if (it == file_sizes.end()) throw Error(ErrorKind::MissingFile, "missing blob '" + f + "'");
    if (it->second != expected)
      throw Error(ErrorKind::SizeMismatch, "blob '" + f + "' is " + std::to_string(it->second) +
                                               " bytes, expected " + std::to_string(expected));
  }
}

inline Manifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  if (!fs::exists(path)) throw Error(ErrorKind::MissingFile, "no manifest at " + path.string());
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadField, "manifest is not valid JSON: " + std::string(e.what()));
  }
  return parse_manifest(j);
}

inline std::map<std::string, std::uint64_t> blob_sizes(const fs::path& dir, const Manifest& m) {
  std::map<std::string, std::uint64_t> sizes;
  for (const std::string& f : {m.pos_file, m.neg_file}) {
    std::error_code ec;
    auto sz = fs::file_size(dir / f, ec);
    if (!ec) sizes[f] = sz;
  }
  return sizes;
}

/// Reads and validates the manifest of a dataset directory without loading blobs.
inline Manifest validate_directory(const fs::path& dir) {
  Manifest m = read_manifest(dir);
  validate_manifest(m, blob_sizes(dir, m));
  return m;
}

namespace detail {

inline std::vector<float> decode_f32le(const std::string& bytes) {
  std::vector<float> out(bytes.size() / 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), bytes.data(), out.size() * 4);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 3; b >= 0; --b) u = (u << 8) | static_cast<unsigned char>(bytes[i * 4 + b]);
      out[i] = std::bit_cast<float>(u);
    }
  }
  return out;
}

inline std::string encode_f32le(std::span<const float> values) {
  std::string out(values.size() * 4, '\0');
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), values.data(), out.size());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto u = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
    }
  }
  return out;
}

}  // namespace detail

/// Bundles tensors with a manifest, enforcing shape agreement and finiteness.
inline ActivationSet make_activation_set(Manifest manifest, ActivationTensor pos, ActivationTensor neg) {
  check_manifest_fields(manifest);
  if (!(pos.shape() == manifest.shape()) || !(neg.shape() == manifest.shape()))
    throw Error(ErrorKind::ShapeMismatch, "pos/neg tensor shapes must match the manifest");
  if (!pos.all_finite() || !neg.all_finite()) throw Error(ErrorKind::NonFinite, "tensor contains NaN or infinity");
  return ActivationSet{std::move(manifest), std::move(pos), std::move(neg)};
}

inline ActivationSet load_activation_set(const fs::path& dir) {
  Manifest m = validate_directory(dir);
  auto pos = detail::decode_f32le(io::read_file(dir / m.pos_file));
  auto neg = detail::decode_f32le(io::read_file(dir / m.neg_file));
  const Shape shape = m.shape();
  ActivationTensor pt(shape, std::move(pos));
  ActivationTensor nt(shape, std::move(neg));
  if (!pt.all_finite() || !nt.all_finite())
    throw Error(ErrorKind::NonFinite, "non-finite activation in " + dir.string());
  return ActivationSet{std::move(m), std::move(pt), std::move(nt)};
}

/// Emits manifest + blobs. Each file goes through temp-then-rename.
inline void write_activation_set(const ActivationSet& set, const fs::path& dir) {
  check_manifest_fields(set.manifest);
  if (!(set.pos.shape() == set.manifest.shape()) || !(set.neg.shape() == set.manifest.shape()))
    throw Error(ErrorKind::ShapeMismatch, "refusing to write: pos/neg shapes disagree with the manifest");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string());
  io::write_file_atomic(dir / set.manifest.pos_file, detail::encode_f32le(set.pos.data()));
  io::write_file_atomic(dir / set.manifest.neg_file, detail::encode_f32le(set.neg.data()));
  io::write_file_atomic(dir / kManifestName, manifest_to_json(set.manifest).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Synthetic fixtures
// ---------------------------------------------------------------------------

/// Explicit per-layer plan: class centroids at +-separation[l]/2 along directions[l].
struct PlantedPlan {
  std::string model_id = "synthetic";
  std::string concept_name = "planted";
  std::size_t n_pairs = 32;
  std::vector<std::vector<double>> directions;  // unit vectors, one per layer
  std::vector<double> separation;               // centroid distance per layer
  double noise_scale = 0.0;
  std::uint64_t rng_seed = 0;
};

inline ActivationSet plant_activation_set(const PlantedPlan& plan) {
  const std::size_t n_layers = plan.directions.size();
  if (n_layers < 2 || plan.separation.size() != n_layers)
    throw Error(ErrorKind::BadSpec, "plan needs >= 2 layers and one separation per layer");
  const std::size_t dim = plan.directions.front().size();
  if (dim == 0) throw Error(ErrorKind::BadSpec, "hidden_dim must be >= 1");
  if (plan.n_pairs < 2) throw Error(ErrorKind::BadSpec, "n_pairs must be >= 2");
  if (!(plan.noise_scale >= 0.0)) throw Error(ErrorKind::BadSpec, "noise_scale must be >= 0");

  Manifest m;
  m.model_id = plan.model_id;
  m.concept_name = plan.concept_name;
  m.n_layers = n_layers;
  m.hidden_dim = dim;
  m.n_pairs = plan.n_pairs;
  ActivationTensor pos(m.shape()), neg(m.shape());

  std::mt19937_64 rng(plan.rng_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (plan.directions[l].size() != dim) throw Error(ErrorKind::BadSpec, "direction length mismatch");
    if (!(plan.separation[l] >= 0.0)) throw Error(ErrorKind::BadSpec, "separation must be >= 0");
    const double half = plan.separation[l] / 2.0;
    for (std::size_t i = 0; i < plan.n_pairs; ++i) {
      auto p = pos.row(l, i);
      auto n = neg.row(l, i);
      for (std::size_t j = 0; j < dim; ++j) {
        const double c = half * plan.directions[l][j];
        double np = 0.0, nn = 0.0;
        if (plan.noise_scale > 0.0) {
          np = plan.noise_scale * gauss(rng);
          nn = plan.noise_scale * gauss(rng);
        }
        p[j] = static_cast<float>(c + np);
        n[j] = static_cast<float>(-c + nn);
      }
    }
  }
  return make_activation_set(std::move(m), std::move(pos), std::move(neg));
}

struct SyntheticSpec {
  std::size_t n_layers = 12;
  std::size_t n_pairs = 32;
  std::size_t hidden_dim = 16;
  std::size_t caz_start = 3;
  std::size_t caz_end = 7;
  double rotation_degrees_per_layer = 30.0;
  std::vector<double> separation_profile;  // empty means 4.0 at every layer
  double noise_scale = 0.0;
  std::uint64_t rng_seed = 0;
  std::string model_id = "synthetic";
  std::string concept_name = "planted";
};

struct GroundTruth {
  std::vector<std::vector<double>> directions;
  std::vector<double> angle_degrees;  // planted angle from e1, per layer
  std::size_t caz_start = 0;
  std::size_t caz_end = 0;
  std::size_t handoff_layer = 0;
};

struct SyntheticResult {
  ActivationSet set;
  GroundTruth truth;
};

/// Draws an orthonormal pair (e1, e2) from a seeded Gaussian.
inline std::pair<std::vector<double>, std::vector<double>> orthonormal_pair(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto draw = [&] {
    std::vector<double> v(dim);
    for (auto& x : v) x = gauss(rng);
    return v;
  };
  auto normalize = [](std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
  };
  std::vector<double> e1 = draw();
  normalize(e1);
  std::vector<double> e2(dim, 0.0);
  if (dim >= 2) {
    for (int attempt = 0; attempt < 16; ++attempt) {
      e2 = draw();
      double d = 0.0;
      for (std::size_t j = 0; j < dim; ++j) d += e1[j] * e2[j];
      double n = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        e2[j] -= d * e1[j];
        n += e2[j] * e2[j];
      }
      if (n > 1e-12) break;
    }
    normalize(e2);
  }
  return {e1, e2};
}

/// Planted five-phase fixture: fixed before the CAZ, rotating inside it, frozen after.
inline SyntheticResult generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_layers < 2) throw Error(ErrorKind::BadSpec, "n_layers must be >= 2");
  if (spec.n_pairs < 2) throw Error(ErrorKind::BadSpec, "n_pairs must be >= 2");
  if (spec.hidden_dim < 1) throw Error(ErrorKind::BadSpec, "hidden_dim must be >= 1");
  if (!(spec.caz_start <= spec.caz_end && spec.caz_end < spec.n_layers))
    throw Error(ErrorKind::BadSpec, "need 0 <= caz_start <= caz_end < n_layers");
  if (!spec.separation_profile.empty() && spec.separation_profile.size() != spec.n_layers)
    throw Error(ErrorKind::BadSpec, "separation_profile must have n_layers entries");
  if (spec.hidden_dim < 2 && spec.rotation_degrees_per_layer != 0.0 && spec.caz_end > spec.caz_start)
    throw Error(ErrorKind::BadSpec, "rotation needs hidden_dim >= 2");
  if (!std::isfinite(spec.rotation_degrees_per_layer)) throw Error(ErrorKind::BadSpec, "rotation must be finite");

  std::mt19937_64 rng(spec.rng_seed);
  auto [e1, e2] = orthonormal_pair(spec.hidden_dim, rng);

  GroundTruth truth;
  truth.caz_start = spec.caz_start;
  truth.caz_end = spec.caz_end;
  truth.handoff_layer = std::min(spec.caz_end + 1, spec.n_layers - 1);

  PlantedPlan plan;
  plan.model_id = spec.model_id;
  plan.concept_name = spec.concept_name;
  plan.n_pairs = spec.n_pairs;
  plan.noise_scale = spec.noise_scale;
  plan.rng_seed = io::splitmix64(spec.rng_seed);
  plan.separation = spec.separation_profile.empty() ? std::vector<double>(spec.n_layers, 4.0) : spec.separation_profile;
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    const std::size_t steps = l < spec.caz_start ? 0 : std::min(l, spec.caz_end) - spec.caz_start;
    const double deg = static_cast<double>(steps) * spec.rotation_degrees_per_layer;
    const double rad = deg * std::numbers::pi / 180.0;
    std::vector<double> u(spec.hidden_dim);
    for (std::size_t j = 0; j < spec.hidden_dim; ++j) u[j] = std::cos(rad) * e1[j] + std::sin(rad) * e2[j];
    truth.angle_degrees.push_back(deg);
    truth.directions.push_back(u);
  }
  plan.directions = truth.directions;
  return {plant_activation_set(plan), std::move(truth)};
}

}  // namespace gem
