#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "cvig/degc.hpp"
#include "cvig/gradcheck.hpp"
#include "oracles.hpp"

using namespace cvig;
using oracle::random_tensor;

namespace {

const std::vector<GcnVariant> kAllVariants = {GcnVariant::edge_conv,   GcnVariant::mrgcn,   GcnVariant::graphsage,
                                              GcnVariant::gin,         GcnVariant::g_edge_conv, GcnVariant::g_mrgcn,
                                              GcnVariant::g_graphsage, GcnVariant::g_gin};

DegcConfig config(std::size_t kappa, std::size_t K) {
  DegcConfig c;
  c.kappa = kappa;
  c.K = K;
  return c;
}

// Structure from given labels instead of k-means.
template <class T>
DegcStructure<T> structure_from_labels(const Tensor<T>& x, LabelGrid labels, std::size_t kappa, std::size_t K) {
  const std::size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  DegcStructure<T> s;
  s.labels = std::move(labels);
  s.plan = build_scatter_plan(s.labels, kappa);
  const auto x_ua = scatter(x.reshaped({B * N, C}), s.plan);
  std::vector<std::vector<std::size_t>> groups(s.plan.num_partitions());
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t r = s.plan.offsets[g]; r < s.plan.offsets[g + 1]; ++r) groups[g].push_back(r);
  auto knn = detail::knn_groups(x_ua, groups, K, DistanceMode::naive);
  s.edges = std::move(knn.edges);
  return s;
}

template <class T>
Tensor<T> forward_frozen(const Tensor<T>& x, const DegcConfig& cfg, const DegcParams<T>& p,
                         std::optional<DegcStructure<T>>& s) {
  ad::Tape<T> t(false);
  return ad::degc_forward(t, t.constant(x), cfg, p, &s)->value;
}

// Copy of p without the z' input: drops the trailing C rows of the MLP weight.
template <class T>
DegcParams<T> base_copy(const DegcParams<T>& p, std::size_t c) {
  DegcParams<T> b;
  b.ggcn.variant = base_of(p.ggcn.variant);
  const auto& w = p.ggcn.mlp.weight->value;
  const std::size_t rows = base_of(p.ggcn.variant) == GcnVariant::gin ? c : w.rows() - c;
  Tensor<T> wb({rows, w.cols()});
  std::copy(w.data().begin(), w.data().begin() + static_cast<std::ptrdiff_t>(rows * w.cols()), wb.data().begin());
  b.ggcn.mlp = {ad::leaf(wb), ad::leaf(p.ggcn.mlp.bias->value)};
  if (p.ggcn.phi.weight) b.ggcn.phi = {ad::leaf(p.ggcn.phi.weight->value), ad::leaf(p.ggcn.phi.bias->value)};
  if (p.ggcn.epsilon) b.ggcn.epsilon = ad::leaf(p.ggcn.epsilon->value);
  return b;
}

EdgeList<double> edges_from(const std::vector<std::vector<std::size_t>>& lists) {
  EdgeList<double> e;
  for (const auto& l : lists) {
    for (auto u : l) e.ids.push_back(u), e.dist.push_back(0.0);
    e.offsets.push_back(e.ids.size());
  }
  return e;
}

}  // namespace

TEST(CentroidFeatures, HandExample) {
  const auto x = Tensor<double>::matrix({{0, 0}, {2, 2}, {4, 8}});
  const auto p = partition_from_labels(x, {0, 0, 1}, 2);
  EXPECT_EQ(centroid_features(x, p), Tensor<double>::matrix({{1, 1}, {4, 8}}));
}

TEST(GlobalUpdate, SinglePartitionIsLinL) {
  const auto p = make_degc_params<double>(4, GcnVariant::g_mrgcn, 3).attention;
  const auto z = random_tensor<double>({1, 4}, 1);
  EXPECT_EQ(attention_weights(z, p)[0], 1.0);
  const auto want = oracle::affine_row(oracle::to_vec(z), oracle::to_mat(p.lin_l.weight->value),
                                       oracle::to_vec(p.lin_l.bias->value));
  EXPECT_LT(oracle::max_rel_diff(global_update(z, p).data(), want), 1e-15);
}

TEST(GlobalUpdate, IdenticalCentroidsGiveUniformWeights) {
  const auto p = make_degc_params<double>(5, GcnVariant::g_gin, 4).attention;
  const auto row = random_tensor<double>({1, 5}, 2);
  for (std::size_t kappa : {2u, 3u, 6u}) {
    Tensor<double> z({kappa, 5});
    for (std::size_t i = 0; i < kappa; ++i)
      for (std::size_t j = 0; j < 5; ++j) z(i, j) = row[j];
    const auto alpha = attention_weights(z, p);
    for (auto a : alpha.data()) EXPECT_NEAR(a, 1.0 / static_cast<double>(kappa), 1e-15);
    const auto want = oracle::affine_row(oracle::to_vec(row), oracle::to_mat(p.lin_l.weight->value),
                                         oracle::to_vec(p.lin_l.bias->value));
    const auto zp = global_update(z, p);
    for (std::size_t i = 0; i < kappa; ++i)
      for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(zp(i, j), static_cast<double>(want[j]), 1e-14);
  }
}

TEST(GlobalUpdate, MatchesDenseAttention) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto params = make_degc_params<double>(4, GcnVariant::g_mrgcn, seed);
    const auto z = random_tensor<double>({3, 4}, seed + 100);
    const auto [zp, alpha] = oracle::attention(oracle::to_mat(z), oracle::ref_params(params));
    const auto got = global_update(z, params.attention);
    const auto got_alpha = attention_weights(z, params.attention);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_LT(oracle::max_rel_diff(&got(i, 0), zp[i]), 1e-12);
      EXPECT_LT(oracle::max_rel_diff(&got_alpha(i, 0), alpha[i]), 1e-12);
    }
    const auto pf = make_degc_params<float>(4, GcnVariant::g_mrgcn, seed);
    const auto zf = z.cast<float>();
    const auto [zpf, alphaf] = oracle::attention(oracle::to_mat(zf), oracle::ref_params(pf));
    const auto gotf = global_update(zf, pf.attention);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(oracle::max_rel_diff(&gotf(i, 0), zpf[i]), 1e-5);
  }
}

TEST(GlobalUpdate, AttentionRowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto p = make_degc_params<double>(6, GcnVariant::g_edge_conv, seed).attention;
    const std::size_t kappa = 1 + seed % 6;
    const auto alpha = attention_weights(random_tensor<double>({kappa, 6}, seed, 3.0), p);
    for (std::size_t i = 0; i < kappa; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < kappa; ++j) {
        EXPECT_GE(alpha(i, j), 0.0);
        s += alpha(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(GlobalUpdate, RowsNotMultipleOfKappaRejected) {
  const auto p = make_degc_params<double>(2, GcnVariant::g_mrgcn, 1);
  ad::Tape<double> t(false);
  EXPECT_THROW(ad::global_update(t, t.constant(random_tensor<double>({5, 2}, 1)), 2, p.attention), DimensionError);
}

TEST(GgcnUpdate, MrgcnWithEqualFeaturesSeesZeroDifferences) {
  const auto p = make_degc_params<double>(3, GcnVariant::g_mrgcn, 5);
  const std::vector<double> row{0.5, -1.25, 2.0};
  Tensor<double> x({4, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) x(i, j) = row[j];
  const auto edges = knn_full(x, 3).edges;
  const auto zp = Tensor<double>::vector({1.0, 2.0, 3.0});
  const auto y = ggcn_update(x, edges, zp, p.ggcn);
  const auto want = oracle::affine_row({0.5, -1.25, 2.0, 0, 0, 0, 1, 2, 3}, oracle::to_mat(p.ggcn.mlp.weight->value),
                                       oracle::to_vec(p.ggcn.mlp.bias->value));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(oracle::max_rel_diff(&y(i, 0), want), 1e-15);
}

TEST(GgcnUpdate, GinSingleNode) {
  auto p = make_degc_params<double>(2, GcnVariant::g_gin, 6);
  p.ggcn.epsilon->value[0] = 0.5;
  p.ggcn.delta->value[0] = -0.25;
  const auto x = Tensor<double>::matrix({{1.0, -2.0}});
  const auto zp = Tensor<double>::vector({4.0, 8.0});
  const auto y = ggcn_update(x, edges_from({{0}}), zp, p.ggcn);
  // (1.5 + 1) x + 0.75 z'
  const auto want = oracle::affine_row({2.5 + 3.0, -5.0 + 6.0}, oracle::to_mat(p.ggcn.mlp.weight->value),
                                       oracle::to_vec(p.ggcn.mlp.bias->value));
  EXPECT_LT(oracle::max_rel_diff(y.data(), want), 1e-15);
}

TEST(GgcnUpdate, EdgeConvOnPathByHand) {
  GgcnParams<double> p;
  p.variant = GcnVariant::g_edge_conv;
  p.mlp = {ad::leaf(Tensor<double>::matrix({{1, 0}, {0, 1}, {1, 1}})), ad::leaf(Tensor<double>::vector({0, 0}))};
  const auto x = Tensor<double>::matrix({{0}, {1}, {3}});
  const auto y = ggcn_update(x, edges_from({{0, 1}, {1, 0}, {2, 1}}), Tensor<double>::vector({2}), p);
  // per-edge (x_v + z', x_u - x_v + z'), max over the neighbourhood
  EXPECT_EQ(y, Tensor<double>::matrix({{2, 3}, {3, 2}, {5, 2}}));
}

TEST(GgcnUpdate, Errors) {
  const auto p = make_degc_params<double>(3, GcnVariant::g_mrgcn, 1);
  const auto x = random_tensor<double>({4, 3}, 1);
  const auto e = knn_full(x, 2).edges;
  EXPECT_THROW(ggcn_update(x, e, Tensor<double>::vector({1, 2}), p.ggcn), DimensionError);
  EXPECT_THROW(ggcn_update(random_tensor<double>({4, 2}, 1), knn_full(random_tensor<double>({4, 2}, 1), 2).edges,
                           Tensor<double>::vector({1, 2}), p.ggcn),
               DimensionError);
  EXPECT_THROW(ggcn_update(random_tensor<double>({5, 3}, 1), e, Tensor<double>::vector({1, 2, 3}), p.ggcn),
               DimensionError);
}

TEST(ScatterPlan, HandExample) {
  const auto p = build_scatter_plan({1, 4, {1, 0, 1, 0}}, 2);
  EXPECT_EQ(p.order, (std::vector<std::size_t>{1, 3, 0, 2}));
  EXPECT_EQ(p.batch, (std::vector<std::size_t>{0, 0, 1, 1}));
  EXPECT_EQ(p.offsets, (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(p.inverse, (std::vector<std::size_t>{2, 0, 3, 1}));
}

TEST(ScatterPlan, TwoImages) {
  const auto p = build_scatter_plan({2, 3, {1, 0, 1, 0, 0, 1}}, 2);
  EXPECT_EQ(p.order, (std::vector<std::size_t>{1, 0, 2, 3, 4, 5}));
  EXPECT_EQ(p.batch, (std::vector<std::size_t>{0, 1, 1, 2, 2, 3}));
  EXPECT_EQ(p.offsets, (std::vector<std::size_t>{0, 1, 3, 5, 6}));
}

TEST(ScatterPlan, AllZeroLabelsLeaveEmptySegments) {
  const auto p = build_scatter_plan({1, 3, {0, 0, 0}}, 3);
  EXPECT_EQ(p.order, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(p.offsets, (std::vector<std::size_t>{0, 3, 3, 3}));
}

TEST(ScatterPlan, OutOfRangeLabelThrows) {
  EXPECT_THROW(build_scatter_plan({1, 3, {0, 2, 1}}, 2), std::out_of_range);
  EXPECT_THROW(build_scatter_plan({1, 3, {0, -1, 1}}, 2), std::out_of_range);
  EXPECT_THROW(build_scatter_plan({1, 3, {0, 1}}, 2), DimensionError);
}

TEST(ScatterPlan, RoundTripAndSortedness) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SplitMix64 rng(seed);
    const std::size_t B = 1 + rng.below(4), N = 1 + rng.below(30), kappa = 1 + rng.below(6), C = 1 + rng.below(5);
    LabelGrid g{B, N, {}};
    for (std::size_t i = 0; i < B * N; ++i) g.values.push_back(static_cast<std::int32_t>(rng.below(kappa)));
    const auto p = build_scatter_plan(g, kappa);
    const auto x = random_tensor<double>({B * N, C}, seed);
    EXPECT_TRUE(bitwise_equal(gather(scatter(x, p), p), x));
    for (std::size_t r = 1; r < p.order.size(); ++r) {
      const auto key = [&](std::size_t q) {
        const std::size_t f = p.order[q];
        return std::tuple{f / N, g.values[f], f};
      };
      EXPECT_LT(key(r - 1), key(r));
    }
  }
}

TEST(Degc, MatchesStraightLineReference) {
  for (auto variant : kAllVariants)
    for (std::uint64_t seed = 0; seed < 4; ++seed)
      for (std::size_t kappa : {1u, 3u}) {
        const std::size_t B = 2, N = 24, C = 5, K = 4;
        const auto x = random_tensor<double>({B, N, C}, seed);
        auto p = make_degc_params<double>(C, variant, seed + 10);
        if (p.ggcn.epsilon) p.ggcn.epsilon->value[0] = 0.3;
        if (p.ggcn.delta) p.ggcn.delta->value[0] = -0.6;
        const auto y = degc_forward(x, config(kappa, K), p);
        ASSERT_EQ(y.shape(), (Shape{B, N, 2 * C}));
        const auto yf = degc_forward(x.cast<float>(), config(kappa, K), make_degc_params<float>(C, variant, seed + 10));
        for (std::size_t b = 0; b < B; ++b) {
          const auto img = image_slice(x, b);
          const auto labels = oracle::kmeans_labels(img, kappa);
          const auto want = oracle::degc_image(img, labels, kappa, K, oracle::ref_params(p));
          for (std::size_t i = 0; i < N; ++i)
            EXPECT_LT(oracle::max_rel_diff(&y.data()[(b * N + i) * 2 * C], want[i]), 1e-12) << variant_name(variant);

          const auto imgf = image_slice(x.cast<float>(), b);
          const auto pf = make_degc_params<float>(C, variant, seed + 10);
          const auto wantf =
              oracle::degc_image(imgf, oracle::kmeans_labels(imgf, kappa), kappa, K, oracle::ref_params(pf));
          for (std::size_t i = 0; i < N; ++i)
            EXPECT_LT(oracle::max_rel_diff(&yf.data()[(b * N + i) * 2 * C], wantf[i]), 1e-5) << variant_name(variant);
        }
      }
}

TEST(Degc, StructureFollowsPerImageKMeans) {
  const auto x = random_tensor<double>({3, 40, 4}, 9);
  const auto s = build_structure(x, config(4, 9));
  for (std::size_t b = 0; b < 3; ++b) {
    const auto labels = oracle::kmeans_labels(image_slice(x, b), 4);
    for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(s.labels.at(b, i), labels[i]);
  }
  // every edge stays inside one image and one partition
  for (std::size_t r = 0; r < s.edges.num_nodes(); ++r)
    for (auto u : s.edges.neighbors(r)) EXPECT_EQ(s.plan.batch[u], s.plan.batch[r]);
}

TEST(Degc, PaperSizedShape) {
  const auto x = random_tensor<float>({1, 196, 192}, 1);
  for (auto variant : kAllVariants) {
    const auto y = degc_forward(x, config(4, 9), make_degc_params<float>(192, variant, 2));
    EXPECT_EQ(y.shape(), (Shape{1, 196, 384})) << variant_name(variant);
    EXPECT_TRUE(y.all_finite());
  }
}

TEST(Degc, DeterministicAndWorkerInvariant) {
  const auto x = random_tensor<float>({4, 64, 16}, 3);
  const auto p = make_degc_params<float>(16, GcnVariant::g_graphsage, 4);
  Tensor<float> one, many;
  {
    parallel::WorkerScope s(1);
    one = degc_forward(x, config(4, 9), p);
    EXPECT_TRUE(bitwise_equal(one, degc_forward(x, config(4, 9), p)));
  }
  {
    parallel::WorkerScope s(4);
    many = degc_forward(x, config(4, 9), p);
  }
  EXPECT_TRUE(bitwise_equal(one, many));
}

TEST(Degc, GlobalReducesToBaseBitwise) {
  for (auto variant : {GcnVariant::g_edge_conv, GcnVariant::g_mrgcn, GcnVariant::g_graphsage, GcnVariant::g_gin})
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const std::size_t C = 6;
      const auto x = random_tensor<float>({2, 50, C}, seed);
      auto g = make_degc_params<float>(C, variant, seed);
      if (variant == GcnVariant::g_gin) {
        g.ggcn.epsilon->value[0] = 0.25f;
        g.ggcn.delta->value[0] = -1.0f;
      } else {
        auto& w = g.ggcn.mlp.weight->value;
        for (std::size_t i = w.rows() - C; i < w.rows(); ++i)
          for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) = 0.0f;
      }
      const auto base = base_copy(g, C);
      EXPECT_TRUE(bitwise_equal(degc_forward(x, config(3, 5), g), degc_forward(x, config(3, 5), base)))
          << variant_name(variant) << " seed " << seed;
    }
}

TEST(Degc, PermutationEquivariantAtFixedStructure) {
  for (auto variant : kAllVariants) {
    const std::size_t N = 30, C = 4;
    const auto x = random_tensor<double>({1, N, C}, 11);
    const auto p = make_degc_params<double>(C, variant, 12);
    std::optional<DegcStructure<double>> s;
    const auto y = forward_frozen(x, config(3, 5), p, s);

    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    SplitMix64 rng(13);
    for (std::size_t i = N - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Tensor<double> px({1, N, C});
    LabelGrid pl{1, N, std::vector<std::int32_t>(N)};
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = 0; j < C; ++j) px[i * C + j] = x[perm[i] * C + j];
      pl.values[i] = s->labels.values[perm[i]];
    }
    std::optional<DegcStructure<double>> ps = structure_from_labels(px, pl, 3, 5);
    const auto py = forward_frozen(px, config(3, 5), p, ps);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < 2 * C; ++j)
        EXPECT_NEAR(py[i * 2 * C + j], y[perm[i] * 2 * C + j], 1e-12) << variant_name(variant);
  }
}

TEST(Degc, PartitionsIndependentWithoutAttentionInput) {
  for (auto variant : kAllVariants) {
    const std::size_t N = 30, C = 3;
    auto x = random_tensor<double>({1, N, C}, 21);
    auto p = make_degc_params<double>(C, variant, 22);
    if (is_global(variant))
      for (auto& v : p.attention.lin_l.weight->value.data()) v = 0.0;
    std::optional<DegcStructure<double>> s;
    const auto y = forward_frozen(x, config(3, 4), p, s);
    for (std::size_t i = 0; i < N; ++i)
      if (s->labels.values[i] == 0)
        for (std::size_t j = 0; j < C; ++j) x[i * C + j] += 0.5;
    const auto y2 = forward_frozen(x, config(3, 4), p, s);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < N; ++i)
      if (s->labels.values[i] != 0) {
        ++checked;
        for (std::size_t j = 0; j < 2 * C; ++j) EXPECT_EQ(y2[i * 2 * C + j], y[i * 2 * C + j]) << variant_name(variant);
      }
    EXPECT_GT(checked, 0u);
  }
}

TEST(Degc, GradientsMatchFiniteDifferences) {
  for (auto variant : kAllVariants)
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto r = gradcheck_degc(seed, {}, variant);
      EXPECT_LT(r.max_rel, 1e-4) << variant_name(variant) << " seed " << seed << " worst " << r.worst;
    }
}

TEST(Degc, LargerGradcheck) {
  for (auto variant : {GcnVariant::g_mrgcn, GcnVariant::g_gin}) {
    const auto r = gradcheck_degc(7, {}, variant, 20, 4, 3, 4);
    EXPECT_LT(r.max_rel, 1e-4) << variant_name(variant) << " worst " << r.worst;
  }
}

TEST(Degc, ZeroUpstreamGivesZeroGradients) {
  const auto x = random_tensor<double>({2, 20, 4}, 1);
  const auto p = make_degc_params<double>(4, GcnVariant::g_graphsage, 2);
  ad::Tape<double> t;
  watch(t, p);
  const auto input = ad::leaf(x);
  t.watch("input", input);
  const auto y = ad::degc_forward(t, input, config(2, 3), p);
  const auto grads = ad::degc_backward(t, y, Tensor<double>(y->value.shape(), 0.0));
  EXPECT_EQ(grads.size(), p.named().size() + 1);
  for (const auto& [name, g] : grads)
    for (auto v : g.data()) EXPECT_EQ(v, 0.0) << name;
}

TEST(Degc, DeltaGradientOnOneNode) {
  auto p = make_degc_params<double>(3, GcnVariant::g_gin, 5);
  p.ggcn.delta->value[0] = 0.4;
  const auto x = random_tensor<double>({1, 1, 3}, 6);
  ad::Tape<double> t;
  watch(t, p);
  const auto grads = t.backward(ad::sum(t, ad::degc_forward(t, t.constant(x), config(1, 1), p)));
  // d/d delta of sum(y) is z' . (W 1) with z' = lin_l(x)
  const auto zp = oracle::affine_row(oracle::to_vec(x), oracle::to_mat(p.attention.lin_l.weight->value),
                                     oracle::to_vec(p.attention.lin_l.bias->value));
  const auto w = oracle::to_mat(p.ggcn.mlp.weight->value);
  long double want = 0;
  for (std::size_t i = 0; i < 3; ++i)
    for (double v : std::vector<long double>(w[i].begin(), w[i].end())) want += zp[i] * v;
  EXPECT_NEAR(grads.at("delta")[0], static_cast<double>(want), 1e-12);
  const auto fd = oracle::fd_gradient(
      [&] { return static_cast<double>(ad::sum(t, ad::degc_forward(t, t.constant(x), config(1, 1), p))->value[0]); },
      p.ggcn.delta->value, 1e-5);
  EXPECT_NEAR(fd[0], static_cast<double>(want), 1e-8);
}

TEST(Degc, Errors) {
  const auto p = make_degc_params<double>(4, GcnVariant::g_mrgcn, 1);
  EXPECT_THROW(degc_forward(random_tensor<double>({1, 10, 3}, 1), config(2, 3), p), DimensionError);
  EXPECT_THROW(degc_forward(random_tensor<double>({10, 4}, 1), config(2, 3), p), DimensionError);
  EXPECT_THROW(degc_forward(random_tensor<double>({1, 3, 4}, 1), config(4, 3), p), ClusterError);
  EXPECT_THROW(degc_forward(random_tensor<double>({1, 10, 4}, 1), config(2, 0), p), GraphError);
  std::optional<DegcStructure<double>> s;
  forward_frozen(random_tensor<double>({1, 10, 4}, 1), config(2, 3), p, s);
  EXPECT_THROW(forward_frozen(random_tensor<double>({2, 10, 4}, 1), config(2, 3), p, s), DimensionError);
}

TEST(Variants, NamesRoundTrip) {
  for (auto v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("gat"), std::invalid_argument);
  EXPECT_EQ(mlp_arity(GcnVariant::edge_conv), 2u);
  EXPECT_EQ(mlp_arity(GcnVariant::g_edge_conv), 3u);
  EXPECT_EQ(mlp_arity(GcnVariant::gin), 1u);
  EXPECT_EQ(mlp_arity(GcnVariant::g_gin), 1u);
}

TEST(GradCheck, RejectsBadStepAndReportsNonFinite) {
  GradCheckOptions bad;
  bad.eps = 0.0;
  EXPECT_THROW(gradcheck_degc(1, bad), std::invalid_argument);
  auto w = ad::leaf(Tensor<double>::vector({1.0, -1.0}));
  const LossFn<double> loss = [&](ad::Tape<double>& t) {
    return ad::sum(t, ad::scale1p(t, w, ad::leaf(Tensor<double>::vector({std::nan("")}))));
  };
  EXPECT_THROW(check_gradients<double>({{"w", w}}, loss), NumericError);
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-4), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9, 1e-4), 1e-5);
}
