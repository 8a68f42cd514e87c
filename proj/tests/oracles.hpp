#pragma once

// Slow reference implementations used to check the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gwvlm/embedding.hpp"
#include "gwvlm/geometry.hpp"

namespace oracle {

// Integer-cornered boxes on a small grid: count unit cells.
inline double grid_iou(const gwvlm::BBox& a, const gwvlm::BBox& b) {
  const int lo_x = static_cast<int>(std::min(a.x1(), b.x1()));
  const int hi_x = static_cast<int>(std::max(a.x2(), b.x2()));
  const int lo_y = static_cast<int>(std::min(a.y1(), b.y1()));
  const int hi_y = static_cast<int>(std::max(a.y2(), b.y2()));
  long inter = 0, uni = 0;
  for (int y = lo_y; y < hi_y; ++y) {
    for (int x = lo_x; x < hi_x; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const bool in_a = cx > a.x1() && cx < a.x2() && cy > a.y1() && cy < a.y2();
      const bool in_b = cx > b.x1() && cx < b.x2() && cy > b.y1() && cy < b.y2();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Repeatedly take the best remaining box and drop everything it overlaps.
inline std::vector<gwvlm::BBox> nms(std::vector<gwvlm::BBox> pool, double thr) {
  std::vector<gwvlm::BBox> kept;
  while (!pool.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      const auto& p = pool[i];
      const auto& q = pool[best];
      bool better = false;
      if (p.score() != q.score()) {
        better = p.score() > q.score();
      } else if (p.source() != q.source()) {
        better = p.source() < q.source();
      } else {
        better = std::vector{p.x1(), p.y1(), p.x2(), p.y2()} < std::vector{q.x1(), q.y1(), q.x2(), q.y2()};
      }
      if (better) best = i;
    }
    const gwvlm::BBox winner = pool[best];
    kept.push_back(winner);
    std::vector<gwvlm::BBox> rest;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (i != best && grid_iou(pool[i], winner) <= thr) rest.push_back(pool[i]);
    }
    pool = std::move(rest);
  }
  return kept;
}

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  long double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<long double>(u[i]) * v[i];
    nu += static_cast<long double>(u[i]) * u[i];
    nv += static_cast<long double>(v[i]) * v[i];
  }
  return static_cast<double>(dot / std::sqrt(nu * nv));
}

// Score everything with the library cosine, fully sort, truncate.
inline std::vector<gwvlm::SnippetMatch> topk(const gwvlm::EmbeddingVector& q,
                                             const std::vector<gwvlm::KeyedVector>& book,
                                             std::size_t k) {
  std::vector<gwvlm::SnippetMatch> all;
  for (const auto& e : book) all.push_back({e.id, gwvlm::cosine(q, e.vector)});
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.snippet_id < b.snippet_id);
  });
  if (all.size() > k) all.resize(k);
  return all;
}

inline gwvlm::BBox random_grid_box(std::mt19937_64& rng, int grid, double score = 1.0,
                                   std::string source = {}) {
  std::uniform_int_distribution<int> coord(0, grid);
  int x1, x2, y1, y2;
  do {
    x1 = coord(rng);
    x2 = coord(rng);
  } while (x1 == x2);
  do {
    y1 = coord(rng);
    y2 = coord(rng);
  } while (y1 == y2);
  return gwvlm::BBox(std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2), score,
                     std::move(source));
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  for (auto& x : v) x = n(rng);
  return v;
}

}  // namespace oracle
