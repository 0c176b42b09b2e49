// Partition a random 14x14 feature grid, build per-partition k-NN graphs and
// run one DEGC module over it.

#include <cstdio>

#include "cvig/cvig.hpp"

int main() {
  using namespace cvig;
  constexpr std::size_t N = 196, C = 32, kappa = 4, K = 9;

  const auto x = gaussian_points<float>(N, C, 7);
  const auto parts = kmeans(x, kappa);
  std::printf("k-means: %zu rounds, sizes", parts.iterations);
  for (auto s : parts.sizes) std::printf(" %zu", s);
  std::printf("\n");

  const auto full = knn_full(x, K);
  const auto local = knn_partitioned(x, parts, K);
  std::printf("distance evaluations: full %llu, partitioned %llu (largest partition %llu)\n",
              static_cast<unsigned long long>(full.work.distance_ops),
              static_cast<unsigned long long>(local.work.distance_ops),
              static_cast<unsigned long long>(local.work.span_ops));
  std::printf("neighbour recall: %.3f\n", neighbor_recall(full.edges, local.edges));

  const auto params = make_degc_params<float>(C, GcnVariant::g_mrgcn, 1);
  DegcConfig cfg;
  cfg.kappa = kappa;
  cfg.K = K;
  const auto y = degc_forward(x.reshaped({1, N, C}), cfg, params);
  std::printf("degc output %s\n", to_string(y.shape()).c_str());
  return 0;
}
