#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "gem/gem.hpp"

namespace testutil {

namespace fs = std::filesystem;

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("gem_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

using Rows = std::vector<std::vector<std::vector<double>>>;  // [layer][pair][dim]

inline gem::ActivationSet set_from_rows(const Rows& pos, const Rows& neg, const std::string& model = "m",
                                        const std::string& concept_name = "c") {
  gem::Manifest m;
  m.model_id = model;
  m.concept_name = concept_name;
  m.n_layers = pos.size();
  m.n_pairs = pos[0].size();
  m.hidden_dim = pos[0][0].size();
  gem::ActivationTensor p(m.shape()), n(m.shape());
  for (std::size_t l = 0; l < m.n_layers; ++l)
    for (std::size_t i = 0; i < m.n_pairs; ++i)
      for (std::size_t j = 0; j < m.hidden_dim; ++j) {
        p.at(l, i, j) = static_cast<float>(pos[l][i][j]);
        n.at(l, i, j) = static_cast<float>(neg[l][i][j]);
      }
  return gem::make_activation_set(std::move(m), std::move(p), std::move(n));
}

inline gem::ActivationSet random_set(std::mt19937_64& rng, std::size_t layers, std::size_t pairs, std::size_t dim,
                                     double shift = 1.0) {
  std::normal_distribution<double> g(0.0, 1.0);
  Rows pos(layers, std::vector<std::vector<double>>(pairs, std::vector<double>(dim)));
  Rows neg = pos;
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t i = 0; i < pairs; ++i)
      for (std::size_t j = 0; j < dim; ++j) {
        pos[l][i][j] = g(rng) + (j == 0 ? shift : 0.0);
        neg[l][i][j] = g(rng);
      }
  return set_from_rows(pos, neg);
}

// Independent reference implementations, written directly from the definitions.
namespace oracle {

inline std::vector<double> centroid(const gem::ActivationTensor& t, std::size_t l) {
  const auto& s = t.shape();
  std::vector<double> c(s.hidden_dim, 0.0);
  for (std::size_t i = 0; i < s.n_pairs; ++i)
    for (std::size_t j = 0; j < s.hidden_dim; ++j) c[j] += t.at(l, i, j);
  for (auto& v : c) v /= static_cast<double>(s.n_pairs);
  return c;
}

inline double trace_cov(const gem::ActivationTensor& t, std::size_t l) {
  const auto c = centroid(t, l);
  const auto& s = t.shape();
  double tr = 0.0;
  for (std::size_t i = 0; i < s.n_pairs; ++i)
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
      const double d = t.at(l, i, j) - c[j];
      tr += d * d;
    }
  return tr / static_cast<double>(s.n_pairs - 1);
}

inline std::vector<double> direction(const gem::ActivationSet& set, std::size_t l) {
  auto p = centroid(set.pos, l), n = centroid(set.neg, l);
  double norm = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    p[j] -= n[j];
    norm += p[j] * p[j];
  }
  norm = std::sqrt(norm);
  for (auto& v : p) v /= norm;
  return p;
}

inline double separation(const gem::ActivationSet& set, std::size_t l) {
  const auto p = centroid(set.pos, l), n = centroid(set.neg, l);
  double d2 = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) d2 += (p[j] - n[j]) * (p[j] - n[j]);
  return std::sqrt(d2) / std::sqrt(0.5 * (trace_cov(set.pos, l) + trace_cov(set.neg, l)));
}

// Copy of `set` with u projected out of every row at layer l (in float storage).
inline gem::ActivationSet ablated_copy(const gem::ActivationSet& set, std::size_t l, std::span<const double> u) {
  gem::ActivationSet out = set;
  for (auto* t : {&out.pos, &out.neg})
    for (std::size_t i = 0; i < set.n_pairs(); ++i) {
      auto row = t->row(l, i);
      double c = 0.0;
      for (std::size_t j = 0; j < row.size(); ++j) c += row[j] * u[j];
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<float>(row[j] - c * u[j]);
    }
  return out;
}

}  // namespace oracle
}  // namespace testutil
