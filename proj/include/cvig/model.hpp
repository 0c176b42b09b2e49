#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvig/config.hpp"
#include "cvig/degc.hpp"
#include "cvig/params.hpp"
#include "cvig/tape.hpp"

namespace cvig {

inline std::string block_prefix(std::size_t l) { return "blocks." + std::to_string(l) + "."; }

inline void declare_conv(ParamLayout& layout, const std::string& prefix, std::size_t cin, std::size_t cout) {
  layout.push_back({prefix + ".weight", {9 * cin, cout}, InitKind::xavier, 9 * cin, 9 * cout});
  layout.push_back({prefix + ".bias", {cout}, InitKind::zeros});
}

inline void declare_batchnorm(ParamLayout& layout, const std::string& prefix, std::size_t c) {
  layout.push_back({prefix + ".gamma", {c}, InitKind::ones});
  layout.push_back({prefix + ".beta", {c}, InitKind::zeros});
  layout.push_back({prefix + ".running_mean", {c}, InitKind::zeros, 0, 0, false});
  layout.push_back({prefix + ".running_var", {c}, InitKind::ones, 0, 0, false});
}

inline std::size_t stem_conv_count(const StemConfig& s) { return s.k_h + s.k_s + 1; }

inline void declare_stem(ParamLayout& layout, const ModelConfig& m) {
  std::size_t cin = 3, i = 0;
  for (std::size_t c : m.stem.channels) {
    declare_conv(layout, "stem.conv" + std::to_string(i), cin, c);
    declare_batchnorm(layout, "stem.bn" + std::to_string(i), c);
    cin = c;
    ++i;
  }
  for (std::size_t s = 0; s < m.stem.k_s; ++s, ++i) {
    declare_conv(layout, "stem.conv" + std::to_string(i), m.c_iso, m.c_iso);
    declare_batchnorm(layout, "stem.bn" + std::to_string(i), m.c_iso);
  }
  declare_conv(layout, "stem.conv" + std::to_string(i), m.c_iso, m.c_iso);
}

inline void declare_grapher(ParamLayout& layout, const std::string& prefix, std::size_t c, GcnVariant variant) {
  layout.push_back({prefix + "cpe.weight", {9 * c}, InitKind::xavier, 9, 9});
  layout.push_back({prefix + "cpe.bias", {c}, InitKind::zeros});
  declare_affine(layout, prefix + "fc1", c, c);
  declare_degc(layout, prefix + "degc.", c, variant);
  declare_affine(layout, prefix + "fc2", 2 * c, c);
}

inline void declare_ffn(ParamLayout& layout, const std::string& prefix, std::size_t c) {
  declare_affine(layout, prefix + "fc1", c, 4 * c);
  declare_affine(layout, prefix + "fc2", 4 * c, c);
}

inline ParamLayout model_layout(const ModelConfig& m) {
  ParamLayout layout;
  declare_stem(layout, m);
  for (std::size_t l = 0; l < m.n_b; ++l) {
    declare_grapher(layout, block_prefix(l) + "grapher.", m.c_iso, m.variant);
    declare_ffn(layout, block_prefix(l) + "ffn.", m.c_iso);
  }
  declare_affine(layout, "head.fc", m.c_iso, m.num_classes);
  return layout;
}

/// Trainable parameter count; depends on the config only.
inline std::size_t parameter_count(const ModelConfig& m) {
  std::size_t n = 0;
  for (const auto& spec : model_layout(m))
    if (spec.trainable) n += numel(spec.shape);
  return n;
}

template <class T>
struct GrapherParams {
  ad::Var<T> cpe_kernel, cpe_bias;
  Affine<T> fc1;
  DegcParams<T> degc;
  Affine<T> fc2;
};

template <class T>
struct FfnParams {
  Affine<T> fc1, fc2;
};

template <class T>
GrapherParams<T> bind_grapher(const ParamStore<T>& s, const std::string& prefix, GcnVariant variant) {
  return {s.var(prefix + "cpe.weight"), s.var(prefix + "cpe.bias"),
          {s.var(prefix + "fc1.weight"), s.var(prefix + "fc1.bias")}, bind_degc(s, prefix + "degc.", variant),
          {s.var(prefix + "fc2.weight"), s.var(prefix + "fc2.bias")}};
}

template <class T>
FfnParams<T> bind_ffn(const ParamStore<T>& s, const std::string& prefix) {
  return {{s.var(prefix + "fc1.weight"), s.var(prefix + "fc1.bias")},
          {s.var(prefix + "fc2.weight"), s.var(prefix + "fc2.bias")}};
}

template <class T>
GrapherParams<T> make_grapher_params(std::size_t c, GcnVariant variant, std::uint64_t seed) {
  ParamLayout layout;
  declare_grapher(layout, "", c, variant);
  return bind_grapher(initialize<T>(layout, seed), "", variant);
}

template <class T>
FfnParams<T> make_ffn_params(std::size_t c, std::uint64_t seed) {
  ParamLayout layout;
  declare_ffn(layout, "", c);
  return bind_ffn(initialize<T>(layout, seed), "");
}

template <class T>
struct Model {
  ModelConfig config;
  ParamStore<T> params;
};

template <class T>
Model<T> init_model(const ModelConfig& m, std::uint64_t seed) {
  validate(m, true);
  return {m, initialize<T>(model_layout(m), seed)};
}

/// Per-block DEGC structure, kept across calls to freeze partitions and edges.
template <class T>
using StructureCache = std::vector<std::optional<DegcStructure<T>>>;

template <class T>
struct ForwardOptions {
  Mode mode = Mode::infer;
  StructureCache<T>* cache = nullptr;
};

namespace ad {

template <class T>
Var<T> stem_forward(Tape<T>& t, const ParamStore<T>& s, const ModelConfig& m, const Var<T>& image, Mode mode) {
  const Shape& in = image->shape();
  if (in.size() != 4 || in[3] != 3) throw DimensionError("stem expects [B x H x W x 3], got " + to_string(in));
  const std::size_t div = std::size_t{1} << m.stem.k_h;
  if (in[1] % div != 0 || in[2] % div != 0)
    throw DimensionError("stem: resolution " + std::to_string(in[1]) + "x" + std::to_string(in[2]) +
                         " is not divisible by " + std::to_string(div));
  Var<T> x = image;
  const std::size_t convs = stem_conv_count(m.stem);
  for (std::size_t i = 0; i < convs; ++i) {
    const std::string conv = "stem.conv" + std::to_string(i);
    x = conv3x3(t, x, s.var(conv + ".weight"), s.var(conv + ".bias"), i < m.stem.k_h ? 2 : 1);
    if (i + 1 == convs) break;
    const Shape shape = x->shape();
    const std::string bn = "stem.bn" + std::to_string(i);
    RunningStats<T> stats{s.var(bn + ".running_mean")->value, s.var(bn + ".running_var")->value};
    auto flat = reshape(t, x, {shape[0] * shape[1] * shape[2], shape[3]});
    auto y = batchnorm(t, flat, s.var(bn + ".gamma"), s.var(bn + ".beta"), stats, mode);
    if (mode == Mode::train) {
      s.var(bn + ".running_mean")->value = std::move(stats.mean);
      s.var(bn + ".running_var")->value = std::move(stats.var);
    }
    x = reshape(t, gelu(t, y), shape);
  }
  return x;
}

/// Y = GeLU(DEGC((CPE(X) + X) W1)) W2 + X over x[B x N x C] on a square grid.
template <class T>
Var<T> grapher_forward(Tape<T>& t, const Var<T>& x, const GrapherParams<T>& p, const DegcConfig& cfg,
                       std::optional<DegcStructure<T>>* frozen = nullptr) {
  if (x->value.rank() != 3) throw DimensionError("grapher expects [B x N x C], got " + to_string(x->shape()));
  const std::size_t B = x->value.dim(0), N = x->value.dim(1), C = x->value.dim(2);
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(N))));
  if (side * side != N) throw DimensionError("grapher: token count " + std::to_string(N) + " is not a square grid");
  auto flat = reshape(t, x, {B * N, C});
  auto cpe = reshape(t, depthwise3x3(t, reshape(t, x, {B, side, side, C}), p.cpe_kernel, p.cpe_bias), {B * N, C});
  auto inner = affine(t, add(t, cpe, flat), p.fc1);
  auto g = degc_forward(t, reshape(t, inner, {B, N, C}), cfg, p.degc, frozen);
  auto act = gelu(t, reshape(t, g, {B * N, g->value.dim(2)}));
  return reshape(t, add(t, affine(t, act, p.fc2), flat), {B, N, C});
}

/// Z = GeLU(Y W1') W2' + Y
template <class T>
Var<T> ffn_forward(Tape<T>& t, const Var<T>& y, const FfnParams<T>& p) {
  if (y->value.rank() != 3) throw DimensionError("ffn expects [B x N x C], got " + to_string(y->shape()));
  const Shape shape = y->shape();
  auto flat = reshape(t, y, {shape[0] * shape[1], shape[2]});
  auto h = gelu(t, affine(t, flat, p.fc1));
  return reshape(t, add(t, affine(t, h, p.fc2), flat), shape);
}

template <class T>
Var<T> head_forward(Tape<T>& t, const Var<T>& x, const Affine<T>& fc) {
  if (x->value.rank() != 3) throw DimensionError("head expects [B x N x C], got " + to_string(x->shape()));
  return affine(t, reduce(t, ReduceKind::mean, x, 1), fc);
}

template <class T>
Var<T> model_forward(Tape<T>& t, const Model<T>& model, const Var<T>& image, const ForwardOptions<T>& opt = {}) {
  const ModelConfig& m = model.config;
  const ParamStore<T>& s = model.params;
  const Shape& in = image->shape();
  if (in.size() != 4 || in[1] != m.image_size || in[2] != m.image_size || in[3] != 3)
    throw DimensionError("model '" + m.name + "' expects input [B x " + std::to_string(m.image_size) + " x " +
                         std::to_string(m.image_size) + " x 3], got " + to_string(in));
  if (opt.cache && opt.cache->size() != m.n_b) opt.cache->assign(m.n_b, std::nullopt);
  auto grid = stem_forward(t, s, m, image, opt.mode);
  const std::size_t B = in[0];
  Var<T> x = reshape(t, grid, {B, m.n_iso, m.c_iso});
  for (std::size_t l = 0; l < m.n_b; ++l) {
    const std::string pre = block_prefix(l);
    x = grapher_forward(t, x, bind_grapher(s, pre + "grapher.", m.variant), m.degc(l),
                        opt.cache ? &(*opt.cache)[l] : nullptr);
    x = ffn_forward(t, x, bind_ffn(s, pre + "ffn."));
  }
  return head_forward(t, x, Affine<T>{s.var("head.fc.weight"), s.var("head.fc.bias")});
}

}  // namespace ad

template <class T>
Tensor<T> model_forward(const Model<T>& model, const Tensor<T>& image, Mode mode = Mode::infer) {
  ad::Tape<T> t(false);
  return ad::model_forward(t, model, t.constant(image), {mode, nullptr})->value;
}

}  // namespace cvig
