#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvig/model.hpp"
#include "cvig/rng.hpp"

namespace cvig {

template <class T>
struct BlobDataset {
  Tensor<T> images;                 // [M x S x S x 3]
  std::vector<std::size_t> labels;  // class per image
};

/// Class colour of blob images: a +-1 pattern over the three channels for the
/// first three classes, seeded uniform colours beyond that.
inline std::vector<double> blob_color(std::size_t k, std::uint64_t seed) {
  if (k < 3) {
    std::vector<double> c(3, -1.0);
    c[k] = 1.0;
    return c;
  }
  SplitMix64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (k + 1)));
  return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
}

/// Each image is gaussian noise plus one gaussian bump of its class colour at
/// a random position. Images are interleaved by class.
template <class T>
BlobDataset<T> make_blobs(std::size_t classes, std::size_t per_class, std::size_t size, double noise,
                          std::uint64_t seed) {
  SplitMix64 rng(seed);
  const std::size_t M = classes * per_class;
  BlobDataset<T> d{Tensor<T>({M, size, size, 3}), {}};
  const double radius = static_cast<double>(size) / 4.0;
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t k = i % classes;
    d.labels.push_back(k);
    const auto color = blob_color(k, seed);
    const double cy = rng.uniform(radius, static_cast<double>(size) - radius);
    const double cx = rng.uniform(radius, static_cast<double>(size) - radius);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double bump = std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
        for (std::size_t c = 0; c < 3; ++c)
          d.images[((i * size + y) * size + x) * 3 + c] = static_cast<T>(color[c] * bump + noise * rng.normal());
      }
  }
  return d;
}

/// Decoupled weight decay Adam applied to every trainable tensor.
template <class T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& hp) : hp_(hp) {}

  void step(ParamStore<T>& params, const ad::GradMap<T>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
    for (auto& e : params.entries()) {
      if (!e.spec.trainable) continue;
      auto it = grads.find(e.spec.name);
      if (it == grads.end()) continue;
      const Tensor<T>& g = it->second;
      Tensor<T>& w = e.var->value;
      auto& m = m_[e.spec.name];
      auto& v = v_[e.spec.name];
      if (m.empty()) {
        m.assign(w.size(), 0.0);
        v.assign(w.size(), 0.0);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = hp_.beta1 * m[i] + (1.0 - hp_.beta1) * gi;
        v[i] = hp_.beta2 * v[i] + (1.0 - hp_.beta2) * gi * gi;
        const double wi = static_cast<double>(w[i]);
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + hp_.eps) + hp_.weight_decay * wi;
        w[i] = static_cast<T>(wi - lr * upd);
      }
    }
  }

  std::size_t steps_taken() const noexcept { return t_; }

 private:
  TrainConfig hp_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

template <class T>
double accuracy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  std::size_t hit = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = logits.row(b);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[arg]) arg = k;
    hit += arg == labels[b];
  }
  return labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct TrainResult {
  std::vector<double> losses;  // losses[s] = full-batch loss after s updates
  double accuracy = 0.0;       // on the final forward pass
};

/// Full-batch AdamW on the given images. Partitions and edges are rebuilt on
/// every forward; each step's loss is measured in train mode before its update.
template <class T>
TrainResult train_toy(Model<T>& model, const BlobDataset<T>& data, std::size_t steps, double lr) {
  AdamW<T> opt(model.config.train);
  TrainResult r;
  for (std::size_t s = 0;; ++s) {
    ad::Tape<T> tape;
    model.params.watch_all(tape);
    auto logits = ad::model_forward(tape, model, tape.constant(data.images), {Mode::train, nullptr});
    auto loss = ad::cross_entropy(tape, logits, data.labels);
    r.losses.push_back(static_cast<double>(loss->value[0]));
    if (!std::isfinite(r.losses.back()))
      throw NumericError("training diverged: loss is " + std::to_string(r.losses.back()) + " at step " + std::to_string(s));
    if (s == steps) {
      r.accuracy = accuracy(logits->value, data.labels);
      break;
    }
    opt.step(model.params, tape.backward(loss), lr);
  }
  return r;
}

}  // namespace cvig
