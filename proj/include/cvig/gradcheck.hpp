#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cvig/degc.hpp"
#include "cvig/model.hpp"
#include "cvig/rng.hpp"

namespace cvig {

struct GradCheckOptions {
  double eps = 1e-5;
  double floor = 1e-4;         // denominator floor of the relative error
  std::size_t max_coords = 0;  // per tensor; 0 checks every coordinate
  std::uint64_t seed = 42;
};

struct GroupError {
  std::string name;
  std::size_t coords = 0;
  double max_rel = 0.0;
  double max_abs = 0.0;
};

struct GradCheckReport {
  std::vector<GroupError> groups;
  double max_rel = 0.0;
  std::string worst;
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

template <class T>
using LossFn = std::function<ad::Var<T>(ad::Tape<T>&)>;

namespace detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

inline std::vector<std::size_t> pick_coords(std::size_t size, std::size_t max_coords, std::uint64_t seed) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_coords == 0 || max_coords >= size) return idx;
  SplitMix64 rng(seed);
  for (std::size_t j = 0; j < max_coords; ++j) std::swap(idx[j], idx[j + rng.below(size - j)]);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

/// Compares tape gradients of the scalar `loss` against central differences
/// for every listed tensor. `loss` must be deterministic given the values.
template <class T>
GradCheckReport check_gradients(const std::vector<std::pair<std::string, ad::Var<T>>>& params, const LossFn<T>& loss,
                                const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0.0) || !std::isfinite(opt.eps)) throw std::invalid_argument("gradcheck: eps must be positive");
  ad::Tape<T> tape;
  for (const auto& [name, var] : params) tape.watch(name, var);
  const auto analytic = tape.backward(loss(tape));

  auto evaluate = [&] {
    ad::Tape<T> t(false);
    return static_cast<double>(loss(t)->value[0]);
  };

  GradCheckReport report;
  for (const auto& [name, var] : params) {
    GroupError g{name};
    const Tensor<T>& a = analytic.at(name);
    for (std::size_t i : detail::pick_coords(var->value.size(), opt.max_coords, opt.seed ^ detail::name_hash(name))) {
      const T saved = var->value[i];
      var->value[i] = static_cast<T>(saved + opt.eps);
      const double up = evaluate();
      var->value[i] = static_cast<T>(saved - opt.eps);
      const double down = evaluate();
      var->value[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double an = static_cast<double>(a[i]);
      if (!std::isfinite(an) || !std::isfinite(numeric))
        throw NumericError("gradcheck: non-finite gradient for '" + name + "' at coordinate " + std::to_string(i));
      g.max_abs = std::max(g.max_abs, std::abs(an - numeric));
      g.max_rel = std::max(g.max_rel, relative_error(an, numeric, opt.floor));
      ++g.coords;
    }
    if (g.max_rel >= report.max_rel) {
      report.max_rel = g.max_rel;
      report.worst = name;
    }
    report.groups.push_back(std::move(g));
  }
  return report;
}

/// Isolated DEGC module on one image, loss = sum of outputs, structure frozen
/// after the first forward.
inline GradCheckReport gradcheck_degc(std::uint64_t seed, const GradCheckOptions& opt = {},
                                      GcnVariant variant = GcnVariant::g_mrgcn, std::size_t n = 6, std::size_t c = 3,
                                      std::size_t kappa = 2, std::size_t K = 2) {
  SplitMix64 rng(seed);
  Tensor<double> x({1, n, c});
  for (auto& v : x.data()) v = rng.normal();
  auto input = ad::leaf(std::move(x));
  const auto params = make_degc_params<double>(c, variant, seed + 1);
  DegcConfig cfg;
  cfg.kappa = kappa;
  cfg.K = K;
  auto frozen = std::make_shared<std::optional<DegcStructure<double>>>();
  auto named = params.named();
  named.emplace_back("input", input);
  return check_gradients<double>(
      named, [=](ad::Tape<double>& t) { return ad::sum(t, ad::degc_forward(t, input, cfg, params, frozen.get())); },
      opt);
}

/// Whole model in train mode on a seeded batch with fixed labels; partitions
/// and edges of every block are frozen after the first forward.
inline GradCheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& opt = {},
                                       std::size_t batch = 2) {
  auto model = std::make_shared<Model<double>>(init_model<double>(cfg, seed));
  SplitMix64 rng(seed + 1);
  Tensor<double> image({batch, cfg.image_size, cfg.image_size, 3});
  for (auto& v : image.data()) v = rng.normal();
  std::vector<std::size_t> labels(batch);
  for (auto& l : labels) l = rng.below(cfg.num_classes);
  auto input = ad::leaf(std::move(image));
  auto cache = std::make_shared<StructureCache<double>>();
  std::vector<std::pair<std::string, ad::Var<double>>> named;
  for (const auto& e : model->params.entries())
    if (e.spec.trainable) named.emplace_back(e.spec.name, e.var);
  return check_gradients<double>(
      named,
      [=](ad::Tape<double>& t) {
        auto logits = ad::model_forward(t, *model, input, {Mode::train, cache.get()});
        return ad::cross_entropy(t, logits, labels);
      },
      opt);
}

}  // namespace cvig
