#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cvig/bench.hpp"
#include "cvig/checkpoint.hpp"
#include "cvig/config.hpp"
#include "cvig/gradcheck.hpp"
#include "cvig/graph.hpp"
#include "cvig/model.hpp"
#include "cvig/parallel.hpp"
#include "cvig/train.hpp"

namespace cvig::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// Invalid flag values detected after parsing.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::uint64_t seed = 42;
  std::size_t workers = parallel::hardware_workers();
  std::string dtype = "f32";
};

struct InferOpts {
  std::string checkpoint, input, output, variant = "cvig-ti";
};

struct GradcheckOpts {
  std::string variant = "tiny";
  double eps = 1e-5;
  std::size_t coords = 8;
};

struct RecallOpts {
  std::size_t n = 196, c = 32, kappa = 4, k = 9, trials = 10;
  std::string data = "gaussian", output;
};

struct BenchGraphOpts {
  GraphBenchGrid grid;
  std::string mode = "naive", output, format = "csv";

  // One row per kappa unless more scenarios are asked for; kappa 1 is the
  // whole-image baseline.
  BenchGraphOpts() { grid.scenarios = {"knn_partitioned_balanced"}; }
};

struct BenchForwardOpts {
  std::string variant = "tiny", checkpoint, output, format = "csv";
  ForwardBenchOptions opt;
};

struct TrainOpts {
  std::string variant = "tiny", output, checkpoint_out;
  std::size_t steps = 0, per_class = 0;
  double lr = -1.0;
};

struct InitOpts {
  std::string variant = "tiny", output;
  bool zero = false;
};

struct RandomInputOpts {
  std::size_t batch = 1, size = 224;
  std::string output;
};

namespace detail {

inline void require_tiny(const ModelConfig& m, const std::string& what) {
  if (m.n_b > 2 || m.c_iso > 32 || m.n_iso > 64)
    throw UsageError(what + " is limited to tiny configs (n_b <= 2, C <= 32, N <= 64); '" + m.name + "' is larger");
}

inline ModelConfig config_arg(const std::string& name_or_path) {
  try {
    ModelConfig m = resolve_config(name_or_path);
    validate(m);
    return m;
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << text;
}

template <class T>
int infer(const InferOpts& o, std::ostream& out) {
  const ModelConfig m = config_arg(o.variant);
  const Model<T> model = model_from_checkpoint<T>(load_checkpoint(o.checkpoint), m);
  const Checkpoint in = load_checkpoint(o.input);
  const AnyTensor* x = in.find("input");
  if (!x) throw ShapeMismatchError("input file has no tensor named 'input'");
  const Shape& s = shape_of(*x);
  if (s.size() != 4 || s[1] != m.image_size || s[2] != m.image_size || s[3] != 3)
    throw ShapeMismatchError("tensor 'input' has shape " + to_string(s) + ", expected [B x " +
                             std::to_string(m.image_size) + " x " + std::to_string(m.image_size) + " x 3]");
  const Tensor<T> image = std::visit([](const auto& t) { return t.template cast<T>(); }, *x);
  const Tensor<T> logits = model_forward(model, image);
  Checkpoint res;
  res.add("logits", logits);
  save_checkpoint(o.output, res);
  const std::size_t top = std::min<std::size_t>(5, logits.cols());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    std::vector<std::size_t> idx(logits.cols());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return logits(b, i) > logits(b, j); });
    out << b << ':';
    for (std::size_t i = 0; i < top; ++i) out << ' ' << idx[i];
    out << '\n';
  }
  return kOk;
}

inline nlohmann::ordered_json report_json(const GradCheckReport& r, double threshold) {
  nlohmann::ordered_json groups = nlohmann::ordered_json::array();
  for (const auto& g : r.groups)
    groups.push_back({{"name", g.name}, {"coords", g.coords}, {"max_rel", g.max_rel}, {"max_abs", g.max_abs}});
  return {{"max_rel", r.max_rel}, {"worst", r.worst}, {"threshold", threshold}, {"pass", r.max_rel < threshold},
          {"groups", groups}};
}

inline int gradcheck(const Common& c, const GradcheckOpts& o, std::ostream& out) {
  const ModelConfig m = config_arg(o.variant);
  require_tiny(m, "gradcheck");
  if (!(o.eps > 0.0) || !std::isfinite(o.eps)) throw UsageError("--eps must be a positive finite number");
  GradCheckOptions opt;
  opt.eps = o.eps;
  opt.seed = c.seed;
  nlohmann::ordered_json j;
  try {
    const auto degc = gradcheck_degc(c.seed, opt);
    opt.max_coords = o.coords;
    const auto full = gradcheck_model(m, c.seed, opt);
    j["degc"] = report_json(degc, 1e-4);
    j["model"] = report_json(full, 1e-3);
    const bool pass = j["degc"]["pass"].get<bool>() && j["model"]["pass"].get<bool>();
    j["status"] = pass ? "pass" : "fail";
    out << j.dump(2) << '\n';
    return pass ? kOk : kFailure;
  } catch (const NumericError& e) {
    j["status"] = "non_finite";
    j["error"] = e.what();
    out << j.dump(2) << '\n';
    return kFailure;
  }
}

inline int knn_recall(const Common& c, const RecallOpts& o, std::ostream& out) {
  if (o.trials < 1) throw UsageError("--trials must be at least 1");
  if (o.kappa < 1 || o.kappa > o.n) throw UsageError("--kappa must lie in [1, n]");
  std::size_t blobs = 0;
  if (o.data == "blobs") {
    blobs = o.kappa;
  } else if (o.data.rfind("blobs(", 0) == 0 && o.data.back() == ')') {
    try {
      blobs = std::stoul(o.data.substr(6, o.data.size() - 7));
    } catch (const std::exception&) {
      throw UsageError("--data blobs(m) needs an integer m");
    }
    if (blobs < 1 || blobs > o.n) throw UsageError("--data blobs(m) needs 1 <= m <= n");
  } else if (o.data != "gaussian") {
    throw UsageError("--data must be gaussian, blobs or blobs(m)");
  }
  std::ostringstream csv;
  csv << "trial,n,c,kappa,k,data,recall\n";
  double sum = 0.0, lo = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < o.trials; ++t) {
    const std::uint64_t seed = c.seed + t;
    const Tensor<float> x = blobs ? blob_points<float>(o.n, o.c, blobs, seed) : gaussian_points<float>(o.n, o.c, seed);
    const double r = neighbor_recall(x, kmeans(x, o.kappa), o.k);
    sum += r;
    lo = std::min(lo, r);
    csv << t << ',' << o.n << ',' << o.c << ',' << o.kappa << ',' << o.k << ',' << o.data << ','
        << cvig::detail::format_double(r) << '\n';
  }
  const std::string tail = std::string(",") + std::to_string(o.n) + ',' + std::to_string(o.c) + ',' +
                           std::to_string(o.kappa) + ',' + std::to_string(o.k) + ',' + o.data + ',';
  csv << "mean" << tail << cvig::detail::format_double(sum / static_cast<double>(o.trials)) << '\n';
  csv << "min" << tail << cvig::detail::format_double(lo) << '\n';
  emit(o.output, csv.str(), out);
  return kOk;
}

inline int bench_graph(const Common& c, BenchGraphOpts o, std::ostream& out) {
  if (o.grid.repeats < kMinRepeats) throw UsageError("--repeats must be at least 5");
  if (o.mode != "naive" && o.mode != "symmetric") throw UsageError("--mode must be naive or symmetric");
  o.grid.mode = o.mode == "naive" ? DistanceMode::naive : DistanceMode::symmetric;
  o.grid.seed = c.seed;
  o.grid.workers = c.workers;
  emit(o.output, render_report(bench_graph_construction(o.grid), parse_report_format(o.format)), out);
  return kOk;
}

template <class T>
int bench_forward_cmd(const Common& c, BenchForwardOpts o, std::ostream& out) {
  if (o.opt.repeats < kMinRepeats) throw UsageError("--repeats must be at least 5");
  const ModelConfig m = config_arg(o.variant);
  const Model<T> model =
      o.checkpoint.empty() ? init_model<T>(m, c.seed) : model_from_checkpoint<T>(load_checkpoint(o.checkpoint), m);
  o.opt.seed = c.seed;
  o.opt.workers = c.workers;
  emit(o.output, render_report(bench_forward(model, o.opt), parse_report_format(o.format)), out);
  return kOk;
}

/// `m` already carries the step count, learning rate and dataset size.
template <class T>
int train_toy_cmd(const Common& c, const ModelConfig& m, const TrainOpts& o, std::ostream& out, std::ostream& err) {
  require_tiny(m, "train-toy");
  Model<T> model = init_model<T>(m, c.seed);
  const auto data = make_blobs<T>(m.num_classes, m.train.per_class, m.image_size, m.train.noise, c.seed + 1);
  const TrainResult r = train_toy(model, data, m.train.steps, m.train.lr);
  std::ostringstream csv;
  csv << "step,loss\n";
  for (std::size_t s = 0; s < r.losses.size(); ++s) csv << s << ',' << cvig::detail::format_double(r.losses[s]) << '\n';
  emit(o.output, csv.str(), out);
  if (!o.checkpoint_out.empty()) save_checkpoint(o.checkpoint_out, to_checkpoint(model));
  nlohmann::ordered_json summary{{"initial_loss", r.losses.front()},
                                 {"final_loss", r.losses.back()},
                                 {"accuracy", r.accuracy},
                                 {"steps", m.train.steps}};
  (o.output.empty() ? err : out) << summary.dump() << '\n';
  return kOk;
}

template <class T>
int init_cmd(const Common& c, const InitOpts& o) {
  const ModelConfig m = config_arg(o.variant);
  Model<T> model = init_model<T>(m, c.seed);
  if (o.zero)
    for (auto& e : model.params.entries())
      if (e.spec.trainable) e.var->value = Tensor<T>(e.spec.shape);
  save_checkpoint(o.output, to_checkpoint(model));
  return kOk;
}

template <class T>
int random_input_cmd(const Common& c, const RandomInputOpts& o) {
  if (o.batch < 1 || o.size < 1) throw UsageError("--batch and --size must be positive");
  SplitMix64 rng(c.seed);
  Tensor<T> x({o.batch, o.size, o.size, 3});
  for (auto& v : x.data()) v = static_cast<T>(rng.normal());
  Checkpoint ck;
  ck.add("input", std::move(x));
  save_checkpoint(o.output, ck);
  return kOk;
}

template <class Fn>
int with_dtype(const std::string& dtype, Fn&& fn) {
  return dtype == "f64" ? fn(double{}) : fn(float{});
}

}  // namespace detail

/// Runs one command line (without the program name). Exit codes: 0 success,
/// 1 computation failure, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DEGC / ClusterViG toolkit", "cvig"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--seed", common.seed, "seed for every random draw")->capture_default_str();
  app.add_option("--workers", common.workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--dtype", common.dtype, "floating point type")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();

  nlohmann::ordered_json resolved;
  auto list = [](const std::vector<std::size_t>& v) { return nlohmann::json(v); };

  InferOpts infer;
  auto* c_infer = app.add_subcommand("infer", "classify images stored in a tensor container");
  c_infer->add_option("--checkpoint", infer.checkpoint, "weights container")->required();
  c_infer->add_option("--input", infer.input, "container with tensor 'input' [B x S x S x 3]")->required();
  c_infer->add_option("--output", infer.output, "container to receive tensor 'logits'")->required();
  c_infer->add_option("--variant", infer.variant, "preset name or config file")->capture_default_str();

  GradcheckOpts grad;
  auto* c_grad = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  c_grad->add_option("--variant", grad.variant, "tiny preset or config file")->capture_default_str();
  c_grad->add_option("--eps", grad.eps, "finite difference step")->capture_default_str();
  c_grad->add_option("--coords", grad.coords, "coordinates checked per model tensor (0 = all)")->capture_default_str();

  RecallOpts recall;
  auto* c_recall = app.add_subcommand("knn-recall", "neighbour recall of partition-restricted k-NN");
  c_recall->add_option("--n", recall.n, "points per trial")->check(CLI::PositiveNumber)->capture_default_str();
  c_recall->add_option("--c", recall.c, "feature width")->check(CLI::PositiveNumber)->capture_default_str();
  c_recall->add_option("--kappa", recall.kappa, "partitions")->capture_default_str();
  c_recall->add_option("--k", recall.k, "neighbours per node")->check(CLI::PositiveNumber)->capture_default_str();
  c_recall->add_option("--trials", recall.trials, "independent trials")->capture_default_str();
  c_recall->add_option("--data", recall.data, "gaussian, blobs or blobs(m)")->capture_default_str();
  c_recall->add_option("--output", recall.output, "CSV path (default stdout)");

  auto* c_bench = app.add_subcommand("bench", "latency and work measurements");
  c_bench->require_subcommand(1);
  BenchGraphOpts bg;
  auto* c_bg = c_bench->add_subcommand("graph", "k-NN construction: full vs partitioned");
  c_bg->add_option("--n", bg.grid.n, "node counts")->delimiter(',')->check(CLI::PositiveNumber);
  c_bg->add_option("--c", bg.grid.c, "feature widths")->delimiter(',')->check(CLI::PositiveNumber);
  c_bg->add_option("--kappa", bg.grid.kappa, "partition counts")->delimiter(',')->check(CLI::PositiveNumber);
  c_bg->add_option("--k", bg.grid.k, "neighbour counts")->delimiter(',')->check(CLI::PositiveNumber);
  c_bg->add_option("--scenario", bg.grid.scenarios, "scenarios to run")
      ->delimiter(',')
      ->check(CLI::IsMember({"knn_full", "knn_partitioned_kmeans", "knn_partitioned_balanced"}));
  c_bg->add_option("--repeats", bg.grid.repeats, "measured runs per cell")->capture_default_str();
  c_bg->add_option("--warmup", bg.grid.warmup, "discarded runs per cell")->capture_default_str();
  c_bg->add_option("--mode", bg.mode, "naive or symmetric distance evaluation")->capture_default_str();
  c_bg->add_option("--format", bg.format, "csv or json")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
  c_bg->add_option("--output", bg.output, "report path (default stdout)");

  BenchForwardOpts bf;
  auto* c_bf = c_bench->add_subcommand("forward", "model inference latency and throughput");
  c_bf->add_option("--variant", bf.variant, "preset name or config file")->capture_default_str();
  c_bf->add_option("--checkpoint", bf.checkpoint, "weights container (default: seeded init)");
  c_bf->add_option("--batch", bf.opt.batches, "batch sizes")->delimiter(',')->check(CLI::PositiveNumber);
  c_bf->add_option("--repeats", bf.opt.repeats, "measured runs per batch size")->capture_default_str();
  c_bf->add_option("--warmup", bf.opt.warmup, "discarded runs per batch size")->capture_default_str();
  c_bf->add_option("--format", bf.format, "csv or json")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
  c_bf->add_option("--output", bf.output, "report path (default stdout)");

  TrainOpts train;
  auto* c_train = app.add_subcommand("train-toy", "AdamW on synthetic blob images");
  c_train->add_option("--variant", train.variant, "tiny preset or config file")->capture_default_str();
  auto* steps_opt = c_train->add_option("--steps", train.steps, "optimizer steps (default from config)");
  c_train->add_option("--lr", train.lr, "learning rate (default from config)");
  c_train->add_option("--per-class", train.per_class, "images per class (default from config)");
  c_train->add_option("--output", train.output, "loss trace CSV (default stdout)");
  c_train->add_option("--checkpoint-out", train.checkpoint_out, "save trained weights here");

  InitOpts init;
  auto* c_init = app.add_subcommand("init", "write seeded initial weights to a container");
  c_init->add_option("--variant", init.variant, "preset name or config file")->capture_default_str();
  c_init->add_option("--output", init.output, "container path")->required();
  c_init->add_flag("--zero", init.zero, "zero every trainable tensor");

  RandomInputOpts rin;
  auto* c_rin = app.add_subcommand("random-input", "write a seeded gaussian input container");
  c_rin->add_option("--batch", rin.batch, "images")->capture_default_str();
  c_rin->add_option("--size", rin.size, "image side")->capture_default_str();
  c_rin->add_option("--output", rin.output, "container path")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  resolved["seed"] = common.seed;
  resolved["workers"] = common.workers;
  resolved["dtype"] = common.dtype;
  parallel::WorkerScope scope(common.workers);
  using detail::with_dtype;
  try {
    if (*c_infer) {
      resolved["subcommand"] = "infer";
      resolved["checkpoint"] = infer.checkpoint;
      resolved["input"] = infer.input;
      resolved["output"] = infer.output;
      resolved["model"] = to_json(detail::config_arg(infer.variant));
      err << resolved.dump() << '\n';
      return with_dtype(common.dtype, [&](auto tag) { return detail::infer<decltype(tag)>(infer, out); });
    }
    if (*c_grad) {
      resolved["subcommand"] = "gradcheck";
      resolved["eps"] = grad.eps;
      resolved["coords"] = grad.coords;
      resolved["dtype"] = "f64";
      resolved["model"] = to_json(detail::config_arg(grad.variant));
      err << resolved.dump() << '\n';
      return detail::gradcheck(common, grad, out);
    }
    if (*c_recall) {
      resolved["subcommand"] = "knn-recall";
      resolved["n"] = recall.n;
      resolved["c"] = recall.c;
      resolved["kappa"] = recall.kappa;
      resolved["k"] = recall.k;
      resolved["trials"] = recall.trials;
      resolved["data"] = recall.data;
      err << resolved.dump() << '\n';
      return detail::knn_recall(common, recall, out);
    }
    if (*c_bg) {
      resolved["subcommand"] = "bench graph";
      resolved["n"] = list(bg.grid.n);
      resolved["c"] = list(bg.grid.c);
      resolved["kappa"] = list(bg.grid.kappa);
      resolved["k"] = list(bg.grid.k);
      resolved["scenarios"] = bg.grid.scenarios;
      resolved["repeats"] = bg.grid.repeats;
      resolved["warmup"] = bg.grid.warmup;
      resolved["mode"] = bg.mode;
      resolved["format"] = bg.format;
      err << resolved.dump() << '\n';
      return detail::bench_graph(common, bg, out);
    }
    if (*c_bf) {
      resolved["subcommand"] = "bench forward";
      resolved["batches"] = list(bf.opt.batches);
      resolved["repeats"] = bf.opt.repeats;
      resolved["warmup"] = bf.opt.warmup;
      resolved["checkpoint"] = bf.checkpoint;
      resolved["format"] = bf.format;
      resolved["model"] = to_json(detail::config_arg(bf.variant));
      err << resolved.dump() << '\n';
      return with_dtype(common.dtype,
                        [&](auto tag) { return detail::bench_forward_cmd<decltype(tag)>(common, bf, out); });
    }
    if (*c_train) {
      resolved["subcommand"] = "train-toy";
      ModelConfig m = detail::config_arg(train.variant);
      if (train.per_class) m.train.per_class = train.per_class;
      if (steps_opt->count()) m.train.steps = train.steps;
      if (train.lr >= 0.0) m.train.lr = train.lr;
      resolved["model"] = to_json(m);
      err << resolved.dump() << '\n';
      return with_dtype(common.dtype,
                        [&](auto tag) { return detail::train_toy_cmd<decltype(tag)>(common, m, train, out, err); });
    }
    if (*c_init) {
      resolved["subcommand"] = "init";
      resolved["zero"] = init.zero;
      resolved["output"] = init.output;
      resolved["model"] = to_json(detail::config_arg(init.variant));
      err << resolved.dump() << '\n';
      return with_dtype(common.dtype, [&](auto tag) { return detail::init_cmd<decltype(tag)>(common, init); });
    }
    if (*c_rin) {
      resolved["subcommand"] = "random-input";
      resolved["batch"] = rin.batch;
      resolved["size"] = rin.size;
      resolved["output"] = rin.output;
      err << resolved.dump() << '\n';
      return with_dtype(common.dtype, [&](auto tag) { return detail::random_input_cmd<decltype(tag)>(common, rin); });
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace cvig::cli
