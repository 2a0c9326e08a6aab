#pragma once

// Brute-force retrieval oracles, written independently of the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <vector>

namespace cfirn::testing {

struct RetrievalInstance {
  std::vector<std::vector<float>> gallery;
  std::vector<int> gallery_labels;
  std::vector<std::vector<float>> queries;
  std::vector<int> query_labels;
};

inline double oracle_dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// Selection sort: repeatedly take the best remaining item, earliest on ties.
inline std::vector<std::size_t> oracle_rank(const std::vector<std::vector<float>>& gallery, const std::vector<float>& q) {
  std::vector<double> score(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) score[i] = oracle_dot(gallery[i], q);
  std::vector<bool> used(gallery.size(), false);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < gallery.size(); ++r) {
    std::size_t best = gallery.size();
    for (std::size_t i = 0; i < gallery.size(); ++i) {
      if (!used[i] && (best == gallery.size() || score[i] > score[best])) best = i;
    }
    used[best] = true;
    out.push_back(best);
  }
  return out;
}

inline double oracle_recall(const std::vector<std::vector<std::size_t>>& ranks, const std::vector<int>& ql,
                            const std::vector<int>& gl, std::size_t k) {
  int hits = 0;
  for (std::size_t q = 0; q < ranks.size(); ++q) {
    bool hit = false;
    for (std::size_t r = 0; r < std::min(k, ranks[q].size()); ++r) hit = hit || gl[ranks[q][r]] == ql[q];
    hits += hit;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline std::size_t oracle_percent_k(std::size_t gallery, double percent) {
  // Smallest K with K >= percent% of the gallery, found by counting.
  std::size_t k = 1;
  while (static_cast<double>(k) * 100.0 < percent * static_cast<double>(gallery) - 1e-9) ++k;
  return k;
}

struct OracleAp {
  double mean = 0.0;
  std::size_t excluded = 0;
};

inline OracleAp oracle_ap(const std::vector<std::vector<std::size_t>>& ranks, const std::vector<int>& ql,
                          const std::vector<int>& gl) {
  double sum = 0.0;
  std::size_t n = 0, excluded = 0;
  for (std::size_t q = 0; q < ranks.size(); ++q) {
    const auto relevant = static_cast<std::size_t>(std::count(gl.begin(), gl.end(), ql[q]));
    if (relevant == 0) {
      ++excluded;
      continue;
    }
    double ap = 0.0;
    std::size_t found = 0;
    for (std::size_t r = 0; r < ranks[q].size(); ++r) {
      if (gl[ranks[q][r]] != ql[q]) continue;
      ++found;
      ap += static_cast<double>(found) / static_cast<double>(r + 1);
    }
    sum += ap / static_cast<double>(relevant);
    ++n;
  }
  return {n ? sum / static_cast<double>(n) : 0.0, excluded};
}

inline std::vector<float> unit_vector(std::mt19937_64& rng, int dim, bool coarse) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<float> v(dim);
  double n = 0.0;
  for (float& x : v) {
    // Coarse instances use a few lattice values so exact score ties occur.
    x = coarse ? static_cast<float>(std::round(g(rng))) : static_cast<float>(g(rng));
    n += static_cast<double>(x) * x;
  }
  if (n == 0.0) v[0] = 1.0f, n = 1.0;
  for (float& x : v) x = static_cast<float>(x / std::sqrt(n));
  return v;
}

inline RetrievalInstance random_instance(std::mt19937_64& rng) {
  RetrievalInstance in;
  const int dim = 2 + static_cast<int>(rng() % 31);
  const int classes = 1 + static_cast<int>(rng() % 40);
  const std::size_t gallery = 1 + rng() % 1000;
  const std::size_t queries = 1 + rng() % 25;
  const bool coarse = rng() % 3 == 0;
  for (std::size_t i = 0; i < gallery; ++i) {
    in.gallery.push_back(unit_vector(rng, dim, coarse));
    in.gallery_labels.push_back(static_cast<int>(rng() % classes));
  }
  for (std::size_t i = 0; i < queries; ++i) {
    in.queries.push_back(unit_vector(rng, dim, coarse));
    // Occasionally a query class absent from the gallery.
    in.query_labels.push_back(static_cast<int>(rng() % (classes + 1)));
  }
  return in;
}

}  // namespace cfirn::testing
