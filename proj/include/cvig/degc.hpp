#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cvig/cluster.hpp"
#include "cvig/graph.hpp"
#include "cvig/params.hpp"
#include "cvig/tape.hpp"
#include "cvig/tensor.hpp"

namespace cvig {

// Local update rules. The g_ variants also read the node's updated centroid.
enum class GcnVariant { edge_conv, mrgcn, graphsage, gin, g_edge_conv, g_mrgcn, g_graphsage, g_gin };

inline bool is_global(GcnVariant v) {
  return v == GcnVariant::g_edge_conv || v == GcnVariant::g_mrgcn || v == GcnVariant::g_graphsage ||
         v == GcnVariant::g_gin;
}

inline GcnVariant base_of(GcnVariant v) {
  switch (v) {
    case GcnVariant::g_edge_conv: return GcnVariant::edge_conv;
    case GcnVariant::g_mrgcn: return GcnVariant::mrgcn;
    case GcnVariant::g_graphsage: return GcnVariant::graphsage;
    case GcnVariant::g_gin: return GcnVariant::gin;
    default: return v;
  }
}

inline const char* variant_name(GcnVariant v) {
  switch (v) {
    case GcnVariant::edge_conv: return "edgeconv";
    case GcnVariant::mrgcn: return "mrgcn";
    case GcnVariant::graphsage: return "graphsage";
    case GcnVariant::gin: return "gin";
    case GcnVariant::g_edge_conv: return "g-edgeconv";
    case GcnVariant::g_mrgcn: return "g-mrgcn";
    case GcnVariant::g_graphsage: return "g-graphsage";
    case GcnVariant::g_gin: return "g-gin";
  }
  return "?";
}

inline GcnVariant parse_variant(const std::string& s) {
  for (auto v : {GcnVariant::edge_conv, GcnVariant::mrgcn, GcnVariant::graphsage, GcnVariant::gin,
                 GcnVariant::g_edge_conv, GcnVariant::g_mrgcn, GcnVariant::g_graphsage, GcnVariant::g_gin})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown gcn variant '" + s + "'");
}

/// Width of the MLP input in multiples of C.
inline std::size_t mlp_arity(GcnVariant v) {
  switch (v) {
    case GcnVariant::gin:
    case GcnVariant::g_gin: return 1;
    case GcnVariant::edge_conv:
    case GcnVariant::mrgcn:
    case GcnVariant::graphsage: return 2;
    default: return 3;
  }
}

template <class T>
struct Affine {
  ad::Var<T> weight;  // [in x out]
  ad::Var<T> bias;    // [out]
};

template <class T>
struct GlobalAttentionParams {
  Affine<T> lin_l, lin_r;
  ad::Var<T> a;  // [C~]

  std::size_t in_dim() const { return lin_l.weight->value.dim(0); }
  std::size_t out_dim() const { return lin_l.weight->value.dim(1); }
};

template <class T>
struct GgcnParams {
  GcnVariant variant = GcnVariant::g_mrgcn;
  Affine<T> mlp;
  Affine<T> phi;         // graphsage only, [C x C]
  ad::Var<T> epsilon;    // gin only
  ad::Var<T> delta;      // g-gin only

  std::size_t out_dim() const { return mlp.weight->value.dim(1); }
};

template <class T>
struct DegcParams {
  GlobalAttentionParams<T> attention;  // unset for base variants
  GgcnParams<T> ggcn;

  std::size_t channels() const { return ggcn.mlp.weight->value.dim(0) / mlp_arity(ggcn.variant); }

  /// (suffix, leaf) pairs in declaration order.
  std::vector<std::pair<std::string, ad::Var<T>>> named() const {
    std::vector<std::pair<std::string, ad::Var<T>>> out;
    if (is_global(ggcn.variant)) {
      out.emplace_back("attn.lin_l.weight", attention.lin_l.weight);
      out.emplace_back("attn.lin_l.bias", attention.lin_l.bias);
      out.emplace_back("attn.lin_r.weight", attention.lin_r.weight);
      out.emplace_back("attn.lin_r.bias", attention.lin_r.bias);
      out.emplace_back("attn.a", attention.a);
    }
    if (ggcn.phi.weight) {
      out.emplace_back("phi.weight", ggcn.phi.weight);
      out.emplace_back("phi.bias", ggcn.phi.bias);
    }
    out.emplace_back("mlp.weight", ggcn.mlp.weight);
    out.emplace_back("mlp.bias", ggcn.mlp.bias);
    if (ggcn.epsilon) out.emplace_back("epsilon", ggcn.epsilon);
    if (ggcn.delta) out.emplace_back("delta", ggcn.delta);
    return out;
  }
};

/// Appends the parameters of one DEGC module with c channels to `layout`,
/// names prefixed by `prefix`. Centroids keep width c after attention.
inline void declare_degc(ParamLayout& layout, const std::string& prefix, std::size_t c, GcnVariant variant) {
  const std::size_t ct = c;
  if (is_global(variant)) {
    declare_affine(layout, prefix + "attn.lin_l", c, ct);
    declare_affine(layout, prefix + "attn.lin_r", c, ct);
    layout.push_back({prefix + "attn.a", {ct}, InitKind::xavier, ct, 1});
  }
  if (base_of(variant) == GcnVariant::graphsage) declare_affine(layout, prefix + "phi", c, c);
  declare_affine(layout, prefix + "mlp", mlp_arity(variant) * c, 2 * c);
  if (base_of(variant) == GcnVariant::gin) layout.push_back({prefix + "epsilon", {1}, InitKind::zeros});
  if (variant == GcnVariant::g_gin) layout.push_back({prefix + "delta", {1}, InitKind::zeros});
}

template <class T>
DegcParams<T> bind_degc(const ParamStore<T>& store, const std::string& prefix, GcnVariant variant) {
  DegcParams<T> p;
  p.ggcn.variant = variant;
  auto get = [&](const std::string& n) { return store.var(prefix + n); };
  if (is_global(variant)) {
    p.attention.lin_l = {get("attn.lin_l.weight"), get("attn.lin_l.bias")};
    p.attention.lin_r = {get("attn.lin_r.weight"), get("attn.lin_r.bias")};
    p.attention.a = get("attn.a");
  }
  if (base_of(variant) == GcnVariant::graphsage) p.ggcn.phi = {get("phi.weight"), get("phi.bias")};
  p.ggcn.mlp = {get("mlp.weight"), get("mlp.bias")};
  if (base_of(variant) == GcnVariant::gin) p.ggcn.epsilon = get("epsilon");
  if (variant == GcnVariant::g_gin) p.ggcn.delta = get("delta");
  return p;
}

/// Freshly initialized standalone module.
template <class T>
DegcParams<T> make_degc_params(std::size_t c, GcnVariant variant, std::uint64_t seed) {
  ParamLayout layout;
  declare_degc(layout, "", c, variant);
  return bind_degc(initialize<T>(layout, seed), "", variant);
}

template <class T>
void watch(ad::Tape<T>& tape, const DegcParams<T>& p, const std::string& prefix = "") {
  for (const auto& [name, var] : p.named()) tape.watch(prefix + name, var);
}

struct DegcConfig {
  std::size_t kappa = 4;
  std::size_t K = 9;
  KMeansOptions kmeans{};
  DistanceMode distance = DistanceMode::naive;
};

// ---- scatter plan ----------------------------------------------------------

/// Row r of the arranged tensor X_ua holds flat node order[r] (b*N + i).
struct ScatterPlan {
  std::size_t batch_size = 0, nodes = 0, kappa = 0;
  std::vector<std::size_t> order;
  std::vector<std::size_t> inverse;
  std::vector<std::size_t> batch;    // global partition id b*kappa + label per X_ua row
  std::vector<std::size_t> offsets;  // B*kappa + 1 segment starts in X_ua

  std::size_t num_partitions() const { return offsets.size() - 1; }
};

inline ScatterPlan build_scatter_plan(const LabelGrid& labels, std::size_t kappa) {
  if (kappa < 1) throw std::invalid_argument("scatter plan: kappa must be at least 1");
  if (labels.values.size() != labels.batch * labels.nodes) throw DimensionError("scatter plan: label grid size mismatch");
  ScatterPlan p;
  p.batch_size = labels.batch;
  p.nodes = labels.nodes;
  p.kappa = kappa;
  const std::size_t parts = labels.batch * kappa;
  std::vector<std::size_t> counts(parts, 0);
  for (std::size_t b = 0; b < labels.batch; ++b)
    for (std::size_t i = 0; i < labels.nodes; ++i) {
      const auto l = labels.at(b, i);
      if (l < 0 || static_cast<std::size_t>(l) >= kappa)
        throw std::out_of_range("scatter plan: label " + std::to_string(l) + " out of range at image " +
                                std::to_string(b) + ", node " + std::to_string(i));
      ++counts[b * kappa + static_cast<std::size_t>(l)];
    }
  p.offsets.assign(parts + 1, 0);
  for (std::size_t g = 0; g < parts; ++g) p.offsets[g + 1] = p.offsets[g] + counts[g];
  const std::size_t total = p.offsets.back();
  p.order.resize(total);
  p.batch.resize(total);
  p.inverse.resize(total);
  std::vector<std::size_t> cursor(p.offsets.begin(), p.offsets.end() - 1);
  for (std::size_t b = 0; b < labels.batch; ++b)
    for (std::size_t i = 0; i < labels.nodes; ++i) {
      const std::size_t g = b * kappa + static_cast<std::size_t>(labels.at(b, i));
      const std::size_t r = cursor[g]++;
      p.order[r] = b * labels.nodes + i;
      p.batch[r] = g;
      p.inverse[b * labels.nodes + i] = r;
    }
  return p;
}

/// X[(B*N) x C] -> X_ua.
template <class T>
Tensor<T> scatter(const Tensor<T>& x, const ScatterPlan& p) {
  return gather_rows(x, std::span<const std::size_t>(p.order));
}

/// X_ua -> X.
template <class T>
Tensor<T> gather(const Tensor<T>& x_ua, const ScatterPlan& p) {
  return gather_rows(x_ua, std::span<const std::size_t>(p.inverse));
}

// ---- global update ---------------------------------------------------------

template <class T>
Tensor<T> centroid_features(const Tensor<T>& x, const PartitionSet<T>& parts) {
  for (std::size_t g = 0; g < parts.members.size(); ++g)
    if (parts.members[g].empty()) throw ClusterError("centroid_features: partition " + std::to_string(g) + " is empty");
  return detail::cluster_means(x, parts.labels, parts.kappa);
}

namespace ad {

template <class T>
Var<T> affine(Tape<T>& t, const Var<T>& x, const Affine<T>& p) {
  return affine(t, x, p.weight, p.bias);
}

template <class T>
struct AttentionResult {
  Var<T> z_prime;  // [G*kappa x C~]
  Var<T> alpha;    // [G*kappa x kappa], row (g, i) holds the weights of sources j
};

/// Centroid attention over G independent groups of kappa consecutive rows of z.
template <class T>
AttentionResult<T> global_update(Tape<T>& t, const Var<T>& z, std::size_t kappa, const GlobalAttentionParams<T>& p) {
  const std::size_t rows = z->value.rows();
  if (kappa < 1 || rows % kappa != 0) throw DimensionError("global_update: rows must be a multiple of kappa");
  if (z->value.cols() != p.in_dim())
    throw DimensionError("global_update: centroid width " + std::to_string(z->value.cols()) + " but LIN expects " +
                         std::to_string(p.in_dim()));
  const std::size_t ct = p.out_dim();
  auto left = affine(t, z, p.lin_l);
  auto right = affine(t, z, p.lin_r);
  std::vector<std::size_t> tgt, src;
  tgt.reserve(rows * kappa);
  src.reserve(rows * kappa);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t g0 = r / kappa * kappa;
    for (std::size_t j = 0; j < kappa; ++j) {
      tgt.push_back(r);
      src.push_back(g0 + j);
    }
  }
  auto left_src = gather_rows(t, left, src);
  auto pre = add(t, gather_rows(t, right, tgt), left_src);
  auto score = matmul(t, leaky_relu(t, pre), reshape(t, p.a, {ct, 1}));
  for (T s : score->value.data())
    if (!std::isfinite(static_cast<double>(s))) throw NumericError("global_update: non-finite attention score");
  auto alpha = softmax(t, reshape(t, score, {rows, kappa}), 1);
  auto weighted = mul_rows(t, left_src, reshape(t, alpha, {rows * kappa}));
  std::vector<std::size_t> offsets(rows + 1);
  for (std::size_t r = 0; r <= rows; ++r) offsets[r] = r * kappa;
  return {segment_reduce(t, ReduceKind::sum, weighted, std::move(offsets)), alpha};
}

/// Local update over the rows of x. `edges` index rows of x; `z_rows` holds
/// each row's updated centroid (ignored by base variants).
template <class T>
Var<T> local_update(Tape<T>& t, const Var<T>& x, const EdgeList<T>& edges, const Var<T>& z_rows,
                    const GgcnParams<T>& p) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (edges.num_nodes() != n) throw DimensionError("local_update: edge list covers a different node count");
  if (p.mlp.weight->value.dim(0) != mlp_arity(p.variant) * c)
    throw DimensionError("local_update: mlp input width " + std::to_string(p.mlp.weight->value.dim(0)) +
                         " does not match variant " + variant_name(p.variant) + " at C=" + std::to_string(c));
  const bool global = is_global(p.variant);
  if (global && (!z_rows || z_rows->value.rows() != n || z_rows->value.cols() != c))
    throw DimensionError("local_update: z' rows must be [n x C]");

  std::vector<std::size_t> center(edges.num_edges());
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t e = edges.offsets[v]; e < edges.offsets[v + 1]; ++e) center[e] = v;
  const std::vector<std::size_t>& nbr = edges.ids;
  const std::vector<std::size_t>& off = edges.offsets;

  switch (base_of(p.variant)) {
    case GcnVariant::edge_conv: {
      auto xv = gather_rows(t, x, center);
      std::vector<Var<T>> parts{xv, sub(t, gather_rows(t, x, nbr), xv)};
      if (global) parts.push_back(gather_rows(t, z_rows, center));
      auto msg = affine(t, concat(t, parts), p.mlp);
      return segment_reduce(t, ReduceKind::max, msg, off);
    }
    case GcnVariant::mrgcn: {
      auto diff = sub(t, gather_rows(t, x, nbr), gather_rows(t, x, center));
      std::vector<Var<T>> parts{x, segment_reduce(t, ReduceKind::max, diff, off)};
      if (global) parts.push_back(z_rows);
      return affine(t, concat(t, parts), p.mlp);
    }
    case GcnVariant::graphsage: {
      auto phi = affine(t, x, p.phi);
      std::vector<Var<T>> parts{x, segment_reduce(t, ReduceKind::max, gather_rows(t, phi, nbr), off)};
      if (global) parts.push_back(z_rows);
      return affine(t, concat(t, parts), p.mlp);
    }
    default: {
      auto agg = add(t, scale1p(t, x, p.epsilon), segment_reduce(t, ReduceKind::sum, gather_rows(t, x, nbr), off));
      if (global) agg = add(t, agg, scale1p(t, z_rows, p.delta));
      return affine(t, agg, p.mlp);
    }
  }
}

}  // namespace ad

template <class T>
Tensor<T> attention_weights(const Tensor<T>& z, const GlobalAttentionParams<T>& p) {
  ad::Tape<T> t(false);
  return ad::global_update(t, t.constant(z), z.rows(), p).alpha->value;
}

template <class T>
Tensor<T> global_update(const Tensor<T>& z, const GlobalAttentionParams<T>& p) {
  ad::Tape<T> t(false);
  return ad::global_update(t, t.constant(z), z.rows(), p).z_prime->value;
}

/// Local update of a single partition whose nodes share one updated centroid.
template <class T>
Tensor<T> ggcn_update(const Tensor<T>& x_part, const EdgeList<T>& edges, const Tensor<T>& z_prime,
                      const GgcnParams<T>& p) {
  ad::Tape<T> t(false);
  ad::Var<T> z_rows;
  if (is_global(p.variant)) {
    const std::size_t n = x_part.rows(), c = x_part.cols();
    if (z_prime.size() != c)
      throw DimensionError("ggcn_update: z' has " + std::to_string(z_prime.size()) + " entries, expected " +
                           std::to_string(c));
    Tensor<T> rows({n, c});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) rows(i, j) = z_prime[j];
    z_rows = t.constant(std::move(rows));
  }
  return ad::local_update(t, t.constant(x_part), edges, z_rows, p)->value;
}

// ---- full module -----------------------------------------------------------

/// Everything data-dependent but non-differentiable about one DEGC call.
template <class T>
struct DegcStructure {
  LabelGrid labels;
  ScatterPlan plan;
  EdgeList<T> edges;  // over X_ua rows
  WorkCounter work;
};

template <class T>
DegcStructure<T> build_structure(const Tensor<T>& x, const DegcConfig& cfg) {
  if (x.rank() != 3) throw DimensionError("degc expects [B x N x C], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  if (cfg.kappa > N) throw ClusterError("degc: kappa " + std::to_string(cfg.kappa) + " exceeds node count " + std::to_string(N));
  DegcStructure<T> s;
  s.labels = kmeans_batched(x, cfg.kappa, cfg.kmeans).labels;
  s.plan = build_scatter_plan(s.labels, cfg.kappa);
  const Tensor<T> x_ua = scatter(x.reshaped({B * N, C}), s.plan);
  std::vector<std::vector<std::size_t>> groups(s.plan.num_partitions());
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t r = s.plan.offsets[g]; r < s.plan.offsets[g + 1]; ++r) groups[g].push_back(r);
  auto knn = detail::knn_groups(x_ua, groups, cfg.K, cfg.distance);
  s.edges = std::move(knn.edges);
  s.work = std::move(knn.work);
  return s;
}

namespace ad {

/// Records one DEGC call. With `frozen` set, structure is taken from it if
/// present, otherwise computed and stored there.
template <class T>
Var<T> degc_forward(Tape<T>& t, const Var<T>& x, const DegcConfig& cfg, const DegcParams<T>& p,
                    std::optional<DegcStructure<T>>* frozen = nullptr) {
  if (x->value.rank() != 3) throw DimensionError("degc expects [B x N x C], got " + to_string(x->shape()));
  const std::size_t B = x->value.dim(0), N = x->value.dim(1), C = x->value.dim(2);
  if (p.channels() != C)
    throw DimensionError("degc: parameters expect C=" + std::to_string(p.channels()) + ", input has " + std::to_string(C));

  std::optional<DegcStructure<T>> local;
  std::optional<DegcStructure<T>>& slot = frozen ? *frozen : local;
  if (!slot) slot = build_structure(x->value, cfg);
  const DegcStructure<T>& s = *slot;
  if (s.plan.batch_size != B || s.plan.nodes != N) throw DimensionError("degc: frozen structure has a different shape");

  auto x_ua = gather_rows(t, reshape(t, x, {B * N, C}), s.plan.order);
  Var<T> z_rows;
  if (is_global(p.ggcn.variant)) {
    auto z = segment_reduce(t, ReduceKind::mean, x_ua, s.plan.offsets);
    auto z_prime = global_update(t, z, s.plan.kappa, p.attention).z_prime;
    z_rows = gather_rows(t, z_prime, s.plan.batch);
  }
  auto y_ua = local_update(t, x_ua, s.edges, z_rows, p.ggcn);
  const std::size_t out = y_ua->value.cols();
  return reshape(t, gather_rows(t, y_ua, s.plan.inverse), {B, N, out});
}

/// Parameter gradients for a recorded call given d(loss)/d(output).
template <class T>
GradMap<T> degc_backward(Tape<T>& t, const Var<T>& output, const Tensor<T>& upstream) {
  return t.backward(output, upstream);
}

}  // namespace ad

template <class T>
Tensor<T> degc_forward(const Tensor<T>& x, const DegcConfig& cfg, const DegcParams<T>& p) {
  ad::Tape<T> t(false);
  return ad::degc_forward(t, t.constant(x), cfg, p)->value;
}

}  // namespace cvig
