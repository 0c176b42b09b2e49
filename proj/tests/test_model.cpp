#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cvig/gradcheck.hpp"
#include "cvig/model.hpp"
#include "oracles.hpp"

using namespace cvig;
using oracle::random_tensor;

namespace {

const std::vector<std::string> kNamed = {"cvig-ti", "cvig-s", "cvig-b", "cvig-b-hr"};

template <class T>
Tensor<T> run_grapher(const Tensor<T>& x, const GrapherParams<T>& p, const DegcConfig& cfg) {
  ad::Tape<T> t(false);
  return ad::grapher_forward(t, t.constant(x), p, cfg)->value;
}

template <class T>
Tensor<T> run_ffn(const Tensor<T>& x, const FfnParams<T>& p) {
  ad::Tape<T> t(false);
  return ad::ffn_forward(t, t.constant(x), p)->value;
}

template <class T>
Tensor<T> run_stem(const ParamStore<T>& s, const ModelConfig& m, const Tensor<T>& image) {
  ad::Tape<T> t(false);
  return ad::stem_forward(t, s, m, t.constant(image), Mode::infer)->value;
}

template <class T>
void zero(const ad::Var<T>& v) {
  for (auto& x : v->value.data()) x = T(0);
}

}  // namespace

TEST(Config, KScheduleRisesFromNineToEighteen) {
  for (std::size_t n_b : {2u, 12u, 16u}) {
    const auto ks = k_schedule_for(n_b);
    ASSERT_EQ(ks.size(), n_b);
    EXPECT_EQ(ks.front(), 9u);
    EXPECT_EQ(ks.back(), 18u);
    for (std::size_t l = 0; l < n_b; ++l)
      EXPECT_EQ(ks[l], static_cast<std::size_t>(std::round(9.0 + 9.0 * static_cast<double>(l) / static_cast<double>(n_b - 1))));
  }
  EXPECT_EQ(k_schedule_for(12), (std::vector<std::size_t>{9, 10, 11, 11, 12, 13, 14, 15, 16, 16, 17, 18}));
}

TEST(Config, NamedVariants) {
  struct Row {
    std::string name;
    std::size_t n_b, c, n, kappa, k_h;
  };
  for (const auto& r : std::vector<Row>{{"cvig-ti", 12, 192, 196, 4, 4},
                                        {"cvig-s", 16, 320, 196, 4, 4},
                                        {"cvig-b", 16, 640, 196, 4, 4},
                                        {"cvig-b-hr", 16, 640, 784, 6, 3}}) {
    const auto m = preset(r.name);
    EXPECT_EQ(m.n_b, r.n_b);
    EXPECT_EQ(m.c_iso, r.c);
    EXPECT_EQ(m.n_iso, r.n);
    EXPECT_EQ(m.kappa, r.kappa);
    EXPECT_EQ(m.stem.k_h, r.k_h);
    EXPECT_EQ(m.stem.k_s, 1u);
    EXPECT_EQ(m.num_classes, 1000u);
    EXPECT_EQ(m.stem.channels.back(), r.c);
    EXPECT_EQ(m.stem.channels.front(), r.c >> (r.k_h - 1));
    EXPECT_NO_THROW(validate(m));
  }
  EXPECT_THROW(preset("cvig-xl"), ConfigError);
}

TEST(Config, ValidateRejectsBadShapes) {
  auto m = preset("tiny");
  m.kappa = 7;
  m.n_iso = 64;
  EXPECT_THROW(validate(m), ConfigError);
  EXPECT_NO_THROW(validate(m, true));
  m = preset("tiny");
  m.n_iso = 60;
  EXPECT_THROW(validate(m), ConfigError);
  m = preset("tiny");
  m.k_schedule.pop_back();
  EXPECT_THROW(validate(m), ConfigError);
  m = preset("tiny");
  m.image_size = 48;
  EXPECT_THROW(validate(m), ConfigError);
  m = preset("tiny");
  m.stem.channels.back() = 8;
  EXPECT_THROW(validate(m), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  for (const auto& name : preset_names()) {
    auto m = preset(name);
    m.variant = GcnVariant::g_gin;
    m.train.lr = 0.125;
    const auto back = config_from_json(to_json(m));
    EXPECT_EQ(to_json(back), to_json(m)) << name;
  }
  EXPECT_THROW(config_from_json(nlohmann::json{{"n_b", "three"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"variant", "gat"}}), std::invalid_argument);
}

TEST(Stem, OutputResolution) {
  for (std::size_t k_h : {3u, 4u}) {
    const std::size_t side = 224 >> k_h;
    const auto m = make_config("s", 1, 16, side * side, 4, 224, k_h);
    ParamLayout layout;
    declare_stem(layout, m);
    const auto store = initialize<float>(layout, 1);
    const auto y = run_stem(store, m, random_tensor<float>({1, 224, 224, 3}, 2));
    EXPECT_EQ(y.shape(), (Shape{1, side, side, 16}));
  }
}

TEST(Stem, ZeroWeightsGiveZeroOutput) {
  const auto m = preset("tiny");
  ParamLayout layout;
  declare_stem(layout, m);
  auto store = initialize<double>(layout, 3);
  for (auto& e : store.entries())
    if (e.spec.name.find(".weight") != std::string::npos || e.spec.name.find(".bias") != std::string::npos ||
        e.spec.name.find(".beta") != std::string::npos)
      zero(e.var);
  const auto y = run_stem(store, m, random_tensor<double>({2, 32, 32, 3}, 4));
  EXPECT_EQ(y.shape(), (Shape{2, 8, 8, 16}));
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Stem, ResolutionNotDivisibleRejected) {
  const auto m = preset("tiny");
  ParamLayout layout;
  declare_stem(layout, m);
  const auto store = initialize<double>(layout, 3);
  EXPECT_THROW(run_stem(store, m, random_tensor<double>({1, 30, 30, 3}, 1)), DimensionError);
  EXPECT_THROW(run_stem(store, m, random_tensor<double>({1, 32, 32, 1}, 1)), DimensionError);
}

TEST(Grapher, ZeroProjectionIsIdentity) {
  auto p = make_grapher_params<double>(4, GcnVariant::g_mrgcn, 1);
  zero(p.fc2.weight);
  const auto x = random_tensor<double>({2, 9, 4}, 2);
  DegcConfig cfg;
  cfg.kappa = 2;
  cfg.K = 2;
  EXPECT_TRUE(bitwise_equal(run_grapher(x, p, cfg), x));
}

TEST(Grapher, IdentityInnerPathFeedsXToDegc) {
  auto p = make_grapher_params<double>(4, GcnVariant::g_edge_conv, 5);
  zero(p.cpe_kernel);
  auto& w = p.fc1.weight->value;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) w(i, j) = i == j ? 1.0 : 0.0;
  const auto x = random_tensor<double>({1, 16, 4}, 6);
  DegcConfig cfg;
  cfg.kappa = 2;
  cfg.K = 3;
  const auto y = run_grapher(x, p, cfg);
  const auto d = degc_forward(x, cfg, p.degc);
  for (std::size_t i = 0; i < 16; ++i) {
    std::vector<long double> act;
    for (std::size_t j = 0; j < 8; ++j) act.push_back(oracle::gelu(d[i * 8 + j]));
    auto want = oracle::affine_row(act, oracle::to_mat(p.fc2.weight->value), oracle::to_vec(p.fc2.bias->value));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y[i * 4 + j], static_cast<double>(want[j] + x[i * 4 + j]), 1e-13);
  }
}

TEST(Grapher, MatchesStepByStepComposition) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t B = 2, N = 9, C = 4;
    auto p = make_grapher_params<double>(C, GcnVariant::g_mrgcn, seed);
    for (auto& v : p.cpe_bias->value.data()) v = 0.1;
    const auto x = random_tensor<double>({B, N, C}, seed + 50);
    DegcConfig cfg;
    cfg.kappa = 2;
    cfg.K = 2;
    const auto y = run_grapher(x, p, cfg);

    const auto flat = x.reshaped({B * N, C});
    const auto cpe = depthwise3x3(x.reshaped({B, 3, 3, C}), p.cpe_kernel->value, p.cpe_bias->value).reshaped({B * N, C});
    const auto inner = add_bias(matmul(add(cpe, flat), p.fc1.weight->value), p.fc1.bias->value);
    const auto d = degc_forward(inner.reshaped({B, N, C}), cfg, p.degc).reshaped({B * N, 2 * C});
    const auto out = add(add_bias(matmul(gelu(d), p.fc2.weight->value), p.fc2.bias->value), flat);
    EXPECT_LT(oracle::max_rel_diff(y.data(), out.data()), 1e-14);
  }
}

TEST(Ffn, ScalarHandExample) {
  FfnParams<double> p{{ad::leaf(Tensor<double>::matrix({{1, 0, 0, 0}})), ad::leaf(Tensor<double>({4}, 0.0))},
                      {ad::leaf(Tensor<double>::matrix({{1}, {0}, {0}, {0}})), ad::leaf(Tensor<double>({1}, 0.0))}};
  const auto z = run_ffn(Tensor<double>({1, 1, 1}, std::vector<double>{2.0}), p);
  EXPECT_NEAR(z[0], 3.9544997361036416, 1e-15);
}

TEST(Ffn, ZeroProjectionIsIdentityAndShapePreserved) {
  auto p = make_ffn_params<float>(8, 1);
  const auto y = random_tensor<float>({3, 4, 8}, 2);
  EXPECT_EQ(run_ffn(y, p).shape(), y.shape());
  EXPECT_EQ(p.fc1.weight->value.shape(), (Shape{8, 32}));
  zero(p.fc2.weight);
  EXPECT_TRUE(bitwise_equal(run_ffn(y, p), y));
}

TEST(Ffn, MatchesDenseOracle) {
  const auto p = make_ffn_params<double>(3, 7);
  const auto y = random_tensor<double>({1, 5, 3}, 8);
  const auto z = run_ffn(y, p);
  const auto w1 = oracle::to_mat(p.fc1.weight->value), w2 = oracle::to_mat(p.fc2.weight->value);
  for (std::size_t i = 0; i < 5; ++i) {
    auto h = oracle::affine_row({y[i * 3], y[i * 3 + 1], y[i * 3 + 2]}, w1, oracle::to_vec(p.fc1.bias->value));
    for (auto& v : h) v = oracle::gelu(v);
    const auto o = oracle::affine_row(h, w2, oracle::to_vec(p.fc2.bias->value));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(z[i * 3 + j], static_cast<double>(o[j] + y[i * 3 + j]), 1e-13);
  }
}

TEST(Head, Examples) {
  ad::Tape<double> t(false);
  const auto v = Tensor<double>::vector({1.5, -2.0, 0.25});
  Tensor<double> x({2, 4, 3});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 3; ++j) x[i * 3 + j] = v[j];
  Tensor<double> eye({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  auto pooled = ad::head_forward(t, t.constant(x), Affine<double>{ad::leaf(eye), ad::leaf(Tensor<double>({3}, 0.0))});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(pooled->value(b, j), v[j]);

  const auto bias = Tensor<double>::vector({0.5, 1.0, -1.0, 2.0});
  auto logits = ad::head_forward(t, t.constant(random_tensor<double>({3, 5, 3}, 1)),
                                 Affine<double>{ad::leaf(Tensor<double>({3, 4}, 0.0)), ad::leaf(bias)});
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(logits->value(b, j), bias[j]);

  const auto xr = random_tensor<double>({2, 6, 3}, 2);
  const auto w = random_tensor<double>({3, 4}, 3);
  auto got = ad::head_forward(t, t.constant(xr), Affine<double>{ad::leaf(w), ad::leaf(bias)});
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<long double> mean(3, 0.0L);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 3; ++j) mean[j] += xr[(b * 6 + i) * 3 + j] / 6.0L;
    const auto want = oracle::affine_row(mean, oracle::to_mat(w), oracle::to_vec(bias));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(got->value(b, j), static_cast<double>(want[j]), 1e-14);
  }
}

TEST(Init, DeterministicBoundedAndSeedDependent) {
  const auto m = preset("tiny");
  const auto a = init_model<double>(m, 1), b = init_model<double>(m, 1), c = init_model<double>(m, 2);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    const auto& e = a.params.entries()[i];
    EXPECT_TRUE(bitwise_equal(e.var->value, b.params.entries()[i].var->value)) << e.spec.name;
    any_diff |= !bitwise_equal(e.var->value, c.params.entries()[i].var->value);
    switch (e.spec.init) {
      case InitKind::xavier: {
        const double bound = std::sqrt(6.0 / static_cast<double>(e.spec.fan_in + e.spec.fan_out));
        for (auto v : e.var->value.data()) EXPECT_LE(std::abs(v), bound) << e.spec.name;
        break;
      }
      case InitKind::zeros:
        for (auto v : e.var->value.data()) EXPECT_EQ(v, 0.0) << e.spec.name;
        break;
      case InitKind::ones:
        for (auto v : e.var->value.data()) EXPECT_EQ(v, 1.0) << e.spec.name;
        break;
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(Init, GinScalarsStartAtZero) {
  auto m = preset("tiny");
  m.variant = GcnVariant::g_gin;
  const auto model = init_model<double>(m, 3);
  EXPECT_EQ(model.params.value("blocks.0.grapher.degc.epsilon")[0], 0.0);
  EXPECT_EQ(model.params.value("blocks.1.grapher.degc.delta")[0], 0.0);
}

TEST(Init, ParameterCountDependsOnConfigOnly) {
  for (const auto& name : kNamed) {
    const auto m = preset(name);
    const auto layout = model_layout(m);
    std::size_t n = 0;
    for (const auto& s : layout)
      if (s.trainable) n += numel(s.shape);
    EXPECT_EQ(parameter_count(m), n);
  }
  const auto m = preset("tiny");
  EXPECT_EQ(init_model<float>(m, 1).params.trainable_count(), parameter_count(m));
  EXPECT_EQ(init_model<float>(m, 99).params.trainable_count(), parameter_count(m));
}

TEST(Model, TinyForwardShapeAndDeterminism) {
  const auto model = init_model<float>(preset("tiny"), 4);
  const auto image = random_tensor<float>({3, 32, 32, 3}, 5);
  const auto a = model_forward(model, image);
  EXPECT_EQ(a.shape(), (Shape{3, 3}));
  EXPECT_TRUE(a.all_finite());
  EXPECT_TRUE(bitwise_equal(a, model_forward(model, image)));
  EXPECT_TRUE(bitwise_equal(a, model_forward(init_model<float>(preset("tiny"), 4), image)));
  EXPECT_THROW(model_forward(model, random_tensor<float>({1, 64, 64, 3}, 1)), DimensionError);
}

TEST(Model, TinyForwardIndependentOfBatchCompanions) {
  const auto model = init_model<double>(preset("tiny"), 6);
  const auto image = random_tensor<double>({2, 32, 32, 3}, 7);
  const auto both = model_forward(model, image);
  Tensor<double> first({1, 32, 32, 3});
  std::copy(image.data().begin(), image.data().begin() + 32 * 32 * 3, first.data().begin());
  const auto one = model_forward(model, first);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(both(0, j), one(0, j), 1e-12);
}

TEST(Model, TiBatchOfTwoGivesThousandLogits) {
  const auto model = init_model<float>(preset("cvig-ti"), 1);
  const auto y = model_forward(model, random_tensor<float>({2, 224, 224, 3}, 2));
  EXPECT_EQ(y.shape(), (Shape{2, 1000}));
  EXPECT_TRUE(y.all_finite());
}

TEST(Model, BlocksConserveShapeAndZeroProjectionIsIdentity) {
  for (const auto& name : kNamed) {
    const auto m = preset(name);
    const auto x = random_tensor<float>({1, m.n_iso, m.c_iso}, 3);
    for (std::size_t l : {std::size_t{0}, m.n_b - 1}) {
      auto g = make_grapher_params<float>(m.c_iso, m.variant, l);
      auto f = make_ffn_params<float>(m.c_iso, l + 100);
      const auto y = run_grapher(x, g, m.degc(l));
      EXPECT_EQ(y.shape(), x.shape()) << name;
      EXPECT_EQ(run_ffn(y, f).shape(), x.shape()) << name;
      zero(g.fc2.weight);
      zero(f.fc2.weight);
      EXPECT_TRUE(bitwise_equal(run_grapher(x, g, m.degc(l)), x)) << name << " block " << l;
      EXPECT_TRUE(bitwise_equal(run_ffn(x, f), x)) << name << " block " << l;
    }
  }
}

TEST(Model, TinyGradcheck) {
  GradCheckOptions opt;
  opt.max_coords = 6;
  const auto r = gradcheck_model(preset("tiny"), 1, opt);
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
  EXPECT_GT(r.groups.size(), 20u);
}
