#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cvig/degc.hpp"

namespace cvig {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kMaxKappa = 6;

struct StemConfig {
  std::size_t k_h = 4;                  // stride-2 convs
  std::size_t k_s = 1;                  // stride-1 convs with BN + GeLU
  std::vector<std::size_t> channels;    // output width of each stride-2 conv
};

/// AdamW settings for the toy trainer.
struct TrainConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  double eps = 1e-8;
  std::size_t steps = 200;
  std::size_t per_class = 8;  // blob images per class
  double noise = 0.5;
};

struct ModelConfig {
  std::string name = "custom";
  std::size_t n_b = 12;
  std::size_t c_iso = 192;
  std::size_t n_iso = 196;
  std::size_t kappa = 4;
  std::vector<std::size_t> k_schedule;
  StemConfig stem;
  std::size_t num_classes = 1000;
  std::size_t image_size = 224;
  GcnVariant variant = GcnVariant::g_mrgcn;
  std::size_t kmeans_iters = 20;
  TrainConfig train;

  std::size_t grid() const { return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_iso)))); }

  DegcConfig degc(std::size_t block) const {
    DegcConfig d;
    d.kappa = kappa;
    d.K = k_schedule.at(block);
    d.kmeans.max_iters = kmeans_iters;
    return d;
  }
};

/// K rises linearly from 9 to 18 over the blocks.
inline std::vector<std::size_t> k_schedule_for(std::size_t n_b) {
  std::vector<std::size_t> ks(n_b, 9);
  if (n_b < 2) return ks;
  for (std::size_t l = 0; l < n_b; ++l)
    ks[l] = static_cast<std::size_t>(std::llround(9.0 + 9.0 * static_cast<double>(l) / static_cast<double>(n_b - 1)));
  return ks;
}

/// Doubling channel ramp ending at c: c/2^(k_h-1), ..., c/2, c.
inline StemConfig stem_for(std::size_t c, std::size_t k_h) {
  StemConfig s;
  s.k_h = k_h;
  for (std::size_t i = 0; i < k_h; ++i) s.channels.push_back(c >> (k_h - 1 - i));
  return s;
}

inline ModelConfig make_config(std::string name, std::size_t n_b, std::size_t c, std::size_t n_iso, std::size_t kappa,
                               std::size_t image_size, std::size_t k_h) {
  ModelConfig m;
  m.name = std::move(name);
  m.n_b = n_b;
  m.c_iso = c;
  m.n_iso = n_iso;
  m.kappa = kappa;
  m.image_size = image_size;
  m.k_schedule = k_schedule_for(n_b);
  m.stem = stem_for(c, k_h);
  return m;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"cvig-ti", "cvig-s", "cvig-b", "cvig-b-hr", "tiny"};
  return names;
}

inline ModelConfig preset(const std::string& name) {
  if (name == "cvig-ti") return make_config(name, 12, 192, 196, 4, 224, 4);
  if (name == "cvig-s") return make_config(name, 16, 320, 196, 4, 224, 4);
  if (name == "cvig-b") return make_config(name, 16, 640, 196, 4, 224, 4);
  if (name == "cvig-b-hr") return make_config(name, 16, 640, 784, 6, 224, 3);
  if (name == "tiny") {
    ModelConfig m = make_config(name, 2, 16, 64, 2, 32, 2);
    m.num_classes = 3;
    return m;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

inline void validate(const ModelConfig& m, bool allow_large_kappa = false) {
  auto fail = [&](const std::string& why) { throw ConfigError("config '" + m.name + "': " + why); };
  if (m.n_b < 1) fail("n_b must be at least 1");
  if (m.c_iso < 1) fail("c_iso must be at least 1");
  const std::size_t g = m.grid();
  if (g * g != m.n_iso) fail("n_iso must be a perfect square");
  if (m.kappa < 1 || m.kappa > m.n_iso) fail("kappa must lie in [1, n_iso]");
  if (m.kappa > kMaxKappa && !allow_large_kappa) fail("kappa above " + std::to_string(kMaxKappa));
  if (m.k_schedule.size() != m.n_b) fail("k_schedule needs one entry per block");
  for (auto k : m.k_schedule)
    if (k < 1) fail("every K must be at least 1");
  if (m.stem.channels.size() != m.stem.k_h) fail("stem needs one channel count per stride-2 conv");
  if (m.stem.k_h < 1) fail("stem needs at least one stride-2 conv");
  for (auto c : m.stem.channels)
    if (c < 1) fail("stem channel counts must be positive");
  if (m.stem.channels.back() != m.c_iso) fail("stem must end at c_iso");
  if (m.image_size != (g << m.stem.k_h)) fail("image_size must equal sqrt(n_iso) * 2^k_h");
  if (m.num_classes < 1) fail("num_classes must be at least 1");
  if (m.kmeans_iters < 1) fail("kmeans_iters must be at least 1");
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {
      {"name", m.name},
      {"n_b", m.n_b},
      {"c_iso", m.c_iso},
      {"n_iso", m.n_iso},
      {"kappa", m.kappa},
      {"k_schedule", m.k_schedule},
      {"stem", {{"k_h", m.stem.k_h}, {"k_s", m.stem.k_s}, {"channels", m.stem.channels}}},
      {"num_classes", m.num_classes},
      {"image_size", m.image_size},
      {"variant", variant_name(m.variant)},
      {"kmeans_iters", m.kmeans_iters},
      {"train",
       {{"lr", m.train.lr},
        {"beta1", m.train.beta1},
        {"beta2", m.train.beta2},
        {"weight_decay", m.train.weight_decay},
        {"eps", m.train.eps},
        {"steps", m.train.steps},
        {"per_class", m.train.per_class},
        {"noise", m.train.noise}}},
  };
}

/// Missing fields fall back to the preset named by "name" when it is one,
/// otherwise to defaults.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig m;
    const std::string name = j.value("name", std::string("custom"));
    for (const auto& p : preset_names())
      if (p == name) m = preset(name);
    m.name = name;
    m.n_b = j.value("n_b", m.n_b);
    m.c_iso = j.value("c_iso", m.c_iso);
    m.n_iso = j.value("n_iso", m.n_iso);
    m.kappa = j.value("kappa", m.kappa);
    m.num_classes = j.value("num_classes", m.num_classes);
    m.image_size = j.value("image_size", m.image_size);
    m.kmeans_iters = j.value("kmeans_iters", m.kmeans_iters);
    if (j.contains("variant")) m.variant = parse_variant(j.at("variant").get<std::string>());
    m.k_schedule = j.contains("k_schedule") ? j.at("k_schedule").get<std::vector<std::size_t>>() : k_schedule_for(m.n_b);
    if (j.contains("stem")) {
      const auto& s = j.at("stem");
      m.stem.k_h = s.value("k_h", m.stem.k_h);
      m.stem.k_s = s.value("k_s", m.stem.k_s);
      m.stem.channels = s.contains("channels") ? s.at("channels").get<std::vector<std::size_t>>()
                                               : stem_for(m.c_iso, m.stem.k_h).channels;
    } else if (m.stem.channels.empty() || m.stem.channels.back() != m.c_iso) {
      m.stem = stem_for(m.c_iso, m.stem.k_h);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      m.train.lr = t.value("lr", m.train.lr);
      m.train.beta1 = t.value("beta1", m.train.beta1);
      m.train.beta2 = t.value("beta2", m.train.beta2);
      m.train.weight_decay = t.value("weight_decay", m.train.weight_decay);
      m.train.eps = t.value("eps", m.train.eps);
      m.train.steps = t.value("steps", m.train.steps);
      m.train.per_class = t.value("per_class", m.train.per_class);
      m.train.noise = t.value("noise", m.train.noise);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// A preset name or a path to a JSON config file.
inline ModelConfig resolve_config(const std::string& name_or_path) {
  for (const auto& p : preset_names())
    if (p == name_or_path) return preset(p);
  return load_config(name_or_path);
}

}  // namespace cvig
