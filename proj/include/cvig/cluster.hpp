#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvig/parallel.hpp"
#include "cvig/rng.hpp"
#include "cvig/tensor.hpp"

namespace cvig {

class ClusterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Initial centroid choice. `stride` takes row floor(j*N/kappa) for centroid j;
/// `seeded` draws kappa distinct rows with a splitmix64 partial shuffle.
struct KMeansInit {
  enum class Kind { stride, seeded } kind = Kind::stride;
  std::uint64_t seed = 0;

  static KMeansInit stride() { return {}; }
  static KMeansInit seeded(std::uint64_t s) { return {Kind::seeded, s}; }
};

struct KMeansOptions {
  std::size_t max_iters = 20;
  KMeansInit init{};
};

/// Partition of N nodes into kappa non-empty clusters.
template <class T>
struct PartitionSet {
  std::size_t kappa = 0;
  std::vector<std::int32_t> labels;              // per node, in [0, kappa)
  std::vector<std::vector<std::size_t>> members;  // ascending node ids
  Tensor<T> centroids;                            // [kappa x C], exact member means
  std::vector<std::size_t> sizes;
  std::size_t iterations = 0;                     // Lloyd rounds that changed labels
  std::vector<double> sse_history;                // SSE after each centroid update

  std::size_t num_nodes() const { return labels.size(); }
};

template <class T>
double squared_distance(const T* a, const T* b, std::size_t c) {
  T acc{0};
  for (std::size_t j = 0; j < c; ++j) {
    const T d = a[j] - b[j];
    acc += d * d;
  }
  return static_cast<double>(acc);
}

namespace detail {

template <class T>
void require_finite(const Tensor<T>& x) {
  if (!x.all_finite()) throw ClusterError("kmeans: input contains non-finite values");
}

/// Exact per-cluster means of the labelled rows, summed in ascending row order.
template <class T>
Tensor<T> cluster_means(const Tensor<T>& x, const std::vector<std::int32_t>& labels, std::size_t kappa) {
  const std::size_t n = x.rows(), c = x.cols();
  Tensor<T> sums({kappa, c});
  std::vector<std::size_t> counts(kappa, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = static_cast<std::size_t>(labels[i]);
    ++counts[l];
    for (std::size_t j = 0; j < c; ++j) sums(l, j) += x(i, j);
  }
  for (std::size_t l = 0; l < kappa; ++l) {
    if (counts[l] == 0) throw ClusterError("empty cluster " + std::to_string(l));
    for (std::size_t j = 0; j < c; ++j) sums(l, j) /= static_cast<T>(counts[l]);
  }
  return sums;
}

template <class T>
double total_sse(const Tensor<T>& x, const Tensor<T>& centroids, const std::vector<std::int32_t>& labels) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    acc += squared_distance(x.ptr() + i * x.cols(), centroids.ptr() + labels[i] * x.cols(), x.cols());
  return acc;
}

}  // namespace detail

/// Lloyd's k-means with squared Euclidean distance.
///
/// Assignment ties go to the lower centroid index. After each assignment any
/// empty cluster takes the point farthest from its current centroid (lowest
/// index on ties, never the last member of another cluster). Returned
/// centroids are the exact means of the returned labels.
template <class T>
PartitionSet<T> kmeans(const Tensor<T>& x, std::size_t kappa, const KMeansOptions& opt = {}) {
  if (x.rank() != 2) throw DimensionError("kmeans expects [N x C]");
  const std::size_t n = x.rows(), c = x.cols();
  if (kappa < 1) throw ClusterError("kmeans: kappa must be at least 1");
  if (kappa > n) throw ClusterError("kmeans: kappa " + std::to_string(kappa) + " exceeds node count " + std::to_string(n));
  if (opt.max_iters < 1) throw ClusterError("kmeans: max_iters must be at least 1");
  detail::require_finite(x);

  std::vector<std::size_t> seeds(kappa);
  if (opt.init.kind == KMeansInit::Kind::stride) {
    for (std::size_t j = 0; j < kappa; ++j) seeds[j] = j * n / kappa;
  } else {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    SplitMix64 rng(opt.init.seed);
    for (std::size_t j = 0; j < kappa; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng.below(n - j));
      std::swap(pool[j], pool[pick]);
      seeds[j] = pool[j];
    }
  }
  Tensor<T> centroids({kappa, c});
  for (std::size_t j = 0; j < kappa; ++j) std::copy_n(x.ptr() + seeds[j] * c, c, centroids.ptr() + j * c);

  PartitionSet<T> out;
  out.kappa = kappa;
  std::vector<std::int32_t> labels(n, -1), next(n);
  std::vector<double> dist_to_own(n);

  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    parallel::for_each_index(0, n, [&](std::size_t i) {
      const T* xi = x.ptr() + i * c;
      double best = std::numeric_limits<double>::infinity();
      std::int32_t arg = 0;
      for (std::size_t j = 0; j < kappa; ++j) {
        const double d = squared_distance(xi, centroids.ptr() + j * c, c);
        if (d < best) best = d, arg = static_cast<std::int32_t>(j);
      }
      next[i] = arg;
      dist_to_own[i] = best;
    }, 64);
    if (next == labels) break;
    labels = next;
    ++out.iterations;

    std::vector<std::size_t> counts(kappa, 0);
    for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
    for (std::size_t j = 0; j < kappa; ++j) {
      if (counts[j] != 0) continue;
      std::size_t pick = n;
      double far = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(labels[i])] < 2) continue;
        if (dist_to_own[i] > far) far = dist_to_own[i], pick = i;
      }
      --counts[static_cast<std::size_t>(labels[pick])];
      labels[pick] = static_cast<std::int32_t>(j);
      counts[j] = 1;
      dist_to_own[pick] = 0.0;
    }

    centroids = detail::cluster_means(x, labels, kappa);
    out.sse_history.push_back(detail::total_sse(x, centroids, labels));
  }

  out.labels = std::move(labels);
  out.centroids = std::move(centroids);
  out.members.assign(kappa, {});
  for (std::size_t i = 0; i < n; ++i) out.members[static_cast<std::size_t>(out.labels[i])].push_back(i);
  out.sizes.resize(kappa);
  for (std::size_t j = 0; j < kappa; ++j) out.sizes[j] = out.members[j].size();
  return out;
}

/// Builds a PartitionSet from externally chosen labels (e.g. balanced
/// round-robin labels for work measurements). Centroids are member means.
template <class T>
PartitionSet<T> partition_from_labels(const Tensor<T>& x, std::vector<std::int32_t> labels, std::size_t kappa) {
  if (labels.size() != x.rows()) throw ClusterError("partition_from_labels: one label per row required");
  PartitionSet<T> out;
  out.kappa = kappa;
  out.members.assign(kappa, {});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= kappa)
      throw ClusterError("partition_from_labels: label out of range at node " + std::to_string(i));
    out.members[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  out.centroids = detail::cluster_means(x, labels, kappa);
  out.labels = std::move(labels);
  for (const auto& m : out.members) out.sizes.push_back(m.size());
  return out;
}

/// Node i goes to partition i mod kappa.
inline std::vector<std::int32_t> round_robin_labels(std::size_t n, std::size_t kappa) {
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int32_t>(i % kappa);
  return labels;
}

/// Per-image label grid [B x N].
struct LabelGrid {
  std::size_t batch = 0, nodes = 0;
  std::vector<std::int32_t> values;

  std::int32_t at(std::size_t b, std::size_t i) const { return values[b * nodes + i]; }
};

template <class T>
struct BatchedPartitions {
  std::vector<PartitionSet<T>> images;
  LabelGrid labels;
};

/// Row block b of a [B x N x C] tensor as an [N x C] matrix.
template <class T>
Tensor<T> image_slice(const Tensor<T>& x, std::size_t b) {
  const std::size_t n = x.dim(1), c = x.dim(2);
  std::vector<T> data(x.ptr() + b * n * c, x.ptr() + (b + 1) * n * c);
  return Tensor<T>({n, c}, std::move(data));
}

/// Independent k-means per image of x[B x N x C]; images run in parallel.
template <class T>
BatchedPartitions<T> kmeans_batched(const Tensor<T>& x, std::size_t kappa, const KMeansOptions& opt = {}) {
  if (x.rank() != 3) throw DimensionError("kmeans_batched expects [B x N x C]");
  const std::size_t B = x.dim(0), n = x.dim(1);
  BatchedPartitions<T> out;
  out.images.resize(B);
  parallel::for_each_index(0, B, [&](std::size_t b) { out.images[b] = kmeans(image_slice(x, b), kappa, opt); });
  out.labels = {B, n, {}};
  out.labels.values.reserve(B * n);
  for (const auto& p : out.images) out.labels.values.insert(out.labels.values.end(), p.labels.begin(), p.labels.end());
  return out;
}

}  // namespace cvig
