#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cvig/cluster.hpp"
#include "cvig/parallel.hpp"
#include "cvig/tensor.hpp"

namespace cvig {

/// How pairwise distances are evaluated and counted. `naive` scans every
/// (node, candidate) pair including the node itself: n^2 per candidate set.
/// `symmetric` evaluates each unordered pair once: n(n-1)/2.
enum class DistanceMode { naive, symmetric };

inline const char* mode_name(DistanceMode m) { return m == DistanceMode::naive ? "naive" : "symmetric"; }

/// Neighbor lists in CSR form. Node v's list starts with (v, 0) and continues
/// with its nearest candidates by ascending squared distance, ties by id, so
/// the self-loop occupies one of the K slots.
template <class T>
struct EdgeList {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> ids;
  std::vector<T> dist;

  std::size_t num_nodes() const { return offsets.size() - 1; }
  std::size_t num_edges() const { return ids.size(); }
  std::size_t k_effective(std::size_t v) const { return offsets[v + 1] - offsets[v]; }
  std::span<const std::size_t> neighbors(std::size_t v) const {
    return {ids.data() + offsets[v], k_effective(v)};
  }
  std::span<const T> distances(std::size_t v) const { return {dist.data() + offsets[v], k_effective(v)}; }

  friend bool operator==(const EdgeList&, const EdgeList&) = default;
};

struct WorkCounter {
  DistanceMode mode = DistanceMode::naive;
  std::uint64_t distance_ops = 0;
  std::vector<std::uint64_t> per_partition_ops;
  std::uint64_t span_ops = 0;
};

template <class T>
struct KnnResult {
  EdgeList<T> edges;
  WorkCounter work;
};

class GraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <class T>
T sqdist(const T* a, const T* b, std::size_t c) {
  T acc{0};
  for (std::size_t j = 0; j < c; ++j) {
    const T d = a[j] - b[j];
    acc += d * d;
  }
  return acc;
}

template <class T>
struct Candidate {
  T dist;
  std::size_t id;
  bool operator<(const Candidate& o) const { return dist < o.dist || (dist == o.dist && id < o.id); }
};

/// Writes the sorted neighbor list of `self` given distances to every member
/// of its candidate set (`dists[k]` belongs to `group[k]`).
template <class T>
void select_neighbors(std::size_t self, std::span<const std::size_t> group, std::span<const T> dists, std::size_t k_eff,
                      std::size_t* out_ids, T* out_dist, std::vector<Candidate<T>>& scratch) {
  out_ids[0] = self;
  out_dist[0] = T(0);
  if (k_eff == 1) return;
  scratch.clear();
  for (std::size_t k = 0; k < group.size(); ++k)
    if (group[k] != self) scratch.push_back({dists[k], group[k]});
  const std::size_t take = k_eff - 1;
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(take - 1), scratch.end());
  std::sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(take));
  for (std::size_t k = 0; k < take; ++k) {
    out_ids[k + 1] = scratch[k].id;
    out_dist[k + 1] = scratch[k].dist;
  }
}

/// Exact k-NN restricted to candidate groups. Every node must appear in
/// exactly one group; its neighbors come only from that group.
template <class T>
KnnResult<T> knn_groups(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& groups, std::size_t K,
                        DistanceMode mode) {
  if (K < 1) throw GraphError("knn: K must be at least 1");
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<std::size_t> group_of(n, groups.size()), slot_of(n, 0);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t s = 0; s < groups[g].size(); ++s) {
      const std::size_t v = groups[g][s];
      if (v >= n || group_of[v] != groups.size()) throw GraphError("knn: inconsistent partition at node " + std::to_string(v));
      group_of[v] = g;
      slot_of[v] = s;
    }
  for (std::size_t v = 0; v < n; ++v)
    if (group_of[v] == groups.size()) throw GraphError("knn: node " + std::to_string(v) + " is in no partition");

  KnnResult<T> res;
  res.work.mode = mode;
  EdgeList<T>& e = res.edges;
  e.offsets.assign(n + 1, 0);
  for (std::size_t v = 0; v < n; ++v) e.offsets[v + 1] = e.offsets[v] + std::min(K, groups[group_of[v]].size());
  e.ids.resize(e.offsets[n]);
  e.dist.resize(e.offsets[n]);

  for (const auto& g : groups) {
    const std::uint64_t m = g.size();
    const std::uint64_t ops = mode == DistanceMode::naive ? m * m : m * (m - 1) / 2;
    res.work.per_partition_ops.push_back(ops);
    res.work.distance_ops += ops;
    res.work.span_ops = std::max(res.work.span_ops, ops);
  }

  for (const auto& g : groups) {
    const std::size_t m = g.size();
    std::vector<T> pair;  // symmetric mode: full m x m matrix filled from the upper triangle
    if (mode == DistanceMode::symmetric) {
      pair.assign(m * m, T(0));
      parallel::for_each_index(0, m, [&](std::size_t a) {
        for (std::size_t b = a + 1; b < m; ++b) pair[a * m + b] = sqdist(x.ptr() + g[a] * c, x.ptr() + g[b] * c, c);
      }, 16);
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < a; ++b) pair[a * m + b] = pair[b * m + a];
    }
    parallel::for_each_index(0, m, [&](std::size_t a) {
      thread_local std::vector<Candidate<T>> scratch;
      thread_local std::vector<T> dists;
      const std::size_t v = g[a];
      std::span<const T> row;
      if (mode == DistanceMode::naive) {
        dists.resize(m);
        const T* xv = x.ptr() + v * c;
        for (std::size_t b = 0; b < m; ++b) dists[b] = sqdist(xv, x.ptr() + g[b] * c, c);
        row = dists;
      } else {
        row = {pair.data() + a * m, m};
      }
      select_neighbors<T>(v, g, row, e.k_effective(v), e.ids.data() + e.offsets[v], e.dist.data() + e.offsets[v], scratch);
    }, 16);
  }
  return res;
}

}  // namespace detail

/// Exact k-NN over the whole node set.
template <class T>
KnnResult<T> knn_full(const Tensor<T>& x, std::size_t K, DistanceMode mode = DistanceMode::naive) {
  if (x.rank() != 2) throw DimensionError("knn_full expects [N x C]");
  std::vector<std::vector<std::size_t>> all(1, std::vector<std::size_t>(x.rows()));
  std::iota(all[0].begin(), all[0].end(), 0);
  return detail::knn_groups(x, all, K, mode);
}

/// Exact k-NN with each node's candidates restricted to its own partition.
template <class T>
KnnResult<T> knn_partitioned(const Tensor<T>& x, const PartitionSet<T>& parts, std::size_t K,
                             DistanceMode mode = DistanceMode::naive) {
  if (x.rank() != 2) throw DimensionError("knn_partitioned expects [N x C]");
  if (parts.labels.size() != x.rows()) throw GraphError("knn_partitioned: partition does not cover the node set");
  for (std::size_t g = 0; g < parts.members.size(); ++g)
    for (std::size_t v : parts.members[g])
      if (v >= x.rows() || parts.labels[v] != static_cast<std::int32_t>(g))
        throw GraphError("knn_partitioned: labels and member lists disagree");
  return detail::knn_groups(x, parts.members, K, mode);
}

/// Mean over nodes of the fraction of a node's true (whole-image) neighbors
/// that survive when search is restricted to its partition. Self-loops are
/// removed from both lists first; a node with no non-self true neighbors
/// (K == 1) counts as fully recalled.
template <class T>
double neighbor_recall(const EdgeList<T>& full, const EdgeList<T>& partitioned) {
  if (full.num_nodes() != partitioned.num_nodes()) throw GraphError("neighbor_recall: node counts differ");
  const std::size_t n = full.num_nodes();
  double total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const auto f = full.neighbors(v).subspan(1);
    const auto p = partitioned.neighbors(v).subspan(1);
    if (f.empty()) {
      total += 1.0;
      continue;
    }
    std::size_t hit = 0;
    for (std::size_t u : p) hit += std::find(f.begin(), f.end(), u) != f.end();
    total += static_cast<double>(hit) / static_cast<double>(f.size());
  }
  return total / static_cast<double>(n);
}

template <class T>
double neighbor_recall(const Tensor<T>& x, const PartitionSet<T>& parts, std::size_t K) {
  return neighbor_recall(knn_full(x, K).edges, knn_partitioned(x, parts, K).edges);
}

}  // namespace cvig
