#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <new>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "cvig/cluster.hpp"
#include "cvig/graph.hpp"
#include "cvig/model.hpp"
#include "cvig/parallel.hpp"
#include "cvig/rng.hpp"

namespace cvig {

/// One measured cell. Timing fields and throughput vary run to run; all
/// other fields are deterministic.
struct BenchRecord {
  std::string scenario;
  std::size_t N = 0, C = 0, kappa = 0, K = 0, B = 1;
  std::string variant = "-";
  double wall_ns_med = 0.0, wall_ns_min = 0.0, wall_ns_max = 0.0;
  std::uint64_t distance_ops = 0, span_ops = 0;
  double throughput = 0.0;  // items per second at the median
  std::size_t workers = 1;
  std::string status = "ok";

  friend bool operator==(const BenchRecord&, const BenchRecord&) = default;
};

inline const std::vector<std::string>& bench_columns() {
  static const std::vector<std::string> cols{
      "scenario", "N", "C", "kappa", "K", "B", "variant", "wall_ns_med", "wall_ns_min", "wall_ns_max",
      "distance_ops", "span_ops", "throughput", "workers", "status"};
  return cols;
}

struct TimingStats {
  double median = 0.0, min = 0.0, max = 0.0;
};

inline TimingStats summarize(std::vector<double> samples) {
  if (samples.empty()) throw std::invalid_argument("summarize: no samples");
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  const double med = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  return {med, samples.front(), samples.back()};
}

/// Runs fn `warmup` times unmeasured, then `repeats` times on a monotonic clock.
template <class Fn>
TimingStats time_repeats(Fn&& fn, std::size_t warmup, std::size_t repeats) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> ns;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ns.push_back(static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  return summarize(std::move(ns));
}

inline constexpr std::size_t kMinRepeats = 5;

struct GraphBenchGrid {
  std::vector<std::size_t> n{1024}, c{64}, kappa{1, 2, 4}, k{9};
  std::vector<std::string> scenarios{"knn_full", "knn_partitioned_kmeans", "knn_partitioned_balanced"};
  std::size_t repeats = kMinRepeats, warmup = 2;
  std::size_t workers = 1;
  std::uint64_t seed = 42;
  DistanceMode mode = DistanceMode::naive;
};

template <class T>
Tensor<T> gaussian_points(std::size_t n, std::size_t c, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor<T> x({n, c});
  for (auto& v : x.data()) v = static_cast<T>(rng.normal());
  return x;
}

/// m well separated gaussian clusters of unit spread; point i belongs to
/// cluster i*m/n, so clusters occupy contiguous index ranges.
template <class T>
Tensor<T> blob_points(std::size_t n, std::size_t c, std::size_t m, std::uint64_t seed) {
  if (m < 1 || m > n) throw std::invalid_argument("blob_points: need 1 <= m <= n");
  SplitMix64 rng(seed);
  Tensor<T> centers({m, c});
  for (auto& v : centers.data()) v = static_cast<T>(rng.uniform(-50.0, 50.0));
  Tensor<T> x({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i * m / n;
    for (std::size_t d = 0; d < c; ++d) x(i, d) = centers(j, d) + static_cast<T>(rng.normal());
  }
  return x;
}

namespace detail {

template <class Fn>
void run_cell(BenchRecord& r, Fn&& fn) {
  try {
    fn();
  } catch (const std::bad_alloc&) {
    r.status = "oom";
  } catch (const std::exception&) {
    r.status = "error";
  }
}

inline void fill_timing(BenchRecord& r, const TimingStats& s, double items) {
  r.wall_ns_med = s.median;
  r.wall_ns_min = s.min;
  r.wall_ns_max = s.max;
  r.throughput = s.median > 0.0 ? items / (s.median * 1e-9) : 0.0;
}

}  // namespace detail

/// Times full and partition-restricted k-NN construction over the grid.
/// knn_full runs once per (N, C, K) and is reported with kappa 1; the
/// k-means scenario includes the clustering time.
inline std::vector<BenchRecord> bench_graph_construction(const GraphBenchGrid& g) {
  if (g.n.empty() || g.c.empty() || g.kappa.empty() || g.k.empty()) throw std::invalid_argument("bench: empty grid");
  if (g.repeats < kMinRepeats) throw std::invalid_argument("bench: repeats must be at least 5");
  auto wants = [&](const char* s) { return std::find(g.scenarios.begin(), g.scenarios.end(), s) != g.scenarios.end(); };
  parallel::WorkerScope scope(g.workers);
  std::vector<BenchRecord> out;
  for (std::size_t n : g.n)
    for (std::size_t c : g.c)
      for (std::size_t K : g.k) {
        const auto x = gaussian_points<float>(n, c, g.seed);
        auto base = [&](const char* scenario, std::size_t kappa) {
          BenchRecord r;
          r.scenario = scenario;
          r.N = n;
          r.C = c;
          r.kappa = kappa;
          r.K = K;
          r.workers = g.workers;
          return r;
        };
        if (wants("knn_full")) {
          BenchRecord r = base("knn_full", 1);
          detail::run_cell(r, [&] {
            const auto work = knn_full(x, K, g.mode).work;
            r.distance_ops = work.distance_ops;
            r.span_ops = work.span_ops;
            detail::fill_timing(r, time_repeats([&] { knn_full(x, K, g.mode); }, g.warmup, g.repeats), double(n));
          });
          out.push_back(r);
        }
        for (std::size_t kappa : g.kappa) {
          if (wants("knn_partitioned_kmeans")) {
            BenchRecord r = base("knn_partitioned_kmeans", kappa);
            detail::run_cell(r, [&] {
              const auto work = knn_partitioned(x, kmeans(x, kappa), K, g.mode).work;
              r.distance_ops = work.distance_ops;
              r.span_ops = work.span_ops;
              detail::fill_timing(r, time_repeats([&] { knn_partitioned(x, kmeans(x, kappa), K, g.mode); }, g.warmup,
                                                  g.repeats),
                                  double(n));
            });
            out.push_back(r);
          }
          if (wants("knn_partitioned_balanced")) {
            BenchRecord r = base("knn_partitioned_balanced", kappa);
            detail::run_cell(r, [&] {
              const auto parts = partition_from_labels(x, round_robin_labels(n, kappa), kappa);
              const auto work = knn_partitioned(x, parts, K, g.mode).work;
              r.distance_ops = work.distance_ops;
              r.span_ops = work.span_ops;
              detail::fill_timing(r, time_repeats([&] { knn_partitioned(x, parts, K, g.mode); }, g.warmup, g.repeats),
                                  double(n));
            });
            out.push_back(r);
          }
        }
      }
  return out;
}

struct ForwardBenchOptions {
  std::vector<std::size_t> batches{1, 8};
  std::size_t repeats = 10, warmup = 2;
  std::size_t workers = 1;
  std::uint64_t seed = 42;
};

/// Inference latency and throughput (images per second) per batch size.
/// distance_ops sums the k-NN work over all blocks; span_ops is the largest
/// single-partition cost among them.
template <class T>
std::vector<BenchRecord> bench_forward(const Model<T>& model, const ForwardBenchOptions& opt) {
  if (opt.batches.empty()) throw std::invalid_argument("bench: no batch sizes");
  if (opt.repeats < kMinRepeats) throw std::invalid_argument("bench: repeats must be at least 5");
  const ModelConfig& m = model.config;
  parallel::WorkerScope scope(opt.workers);
  std::vector<BenchRecord> out;
  for (std::size_t b : opt.batches) {
    BenchRecord r;
    r.scenario = "forward";
    r.N = m.n_iso;
    r.C = m.c_iso;
    r.kappa = m.kappa;
    r.K = m.k_schedule.front();
    r.B = b;
    r.variant = m.name;
    r.workers = opt.workers;
    detail::run_cell(r, [&] {
      SplitMix64 rng(opt.seed);
      Tensor<T> image({b, m.image_size, m.image_size, 3});
      for (auto& v : image.data()) v = static_cast<T>(rng.normal());
      StructureCache<T> cache;
      ad::Tape<T> probe(false);
      ad::model_forward(probe, model, probe.constant(image), {Mode::infer, &cache});
      for (const auto& s : cache) {
        r.distance_ops += s->work.distance_ops;
        r.span_ops = std::max(r.span_ops, s->work.span_ops);
      }
      detail::fill_timing(r, time_repeats([&] { model_forward(model, image); }, opt.warmup, opt.repeats), double(b));
    });
    out.push_back(r);
  }
  return out;
}

// ---- reports ---------------------------------------------------------------

enum class ReportFormat { csv, json };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw std::invalid_argument("unknown report format '" + s + "'");
}

namespace detail {

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

template <class U>
U parse_number(const std::string& s, const char* column) {
  U v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument(std::string("bad value '") + s + "' in column " + column);
  return v;
}

}  // namespace detail

inline std::string to_csv(const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  const auto& cols = bench_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  using detail::format_double;
  for (const auto& r : records) {
    os << detail::csv_field(r.scenario) << ',' << r.N << ',' << r.C << ',' << r.kappa << ',' << r.K << ',' << r.B << ','
       << detail::csv_field(r.variant) << ',' << format_double(r.wall_ns_med) << ',' << format_double(r.wall_ns_min)
       << ',' << format_double(r.wall_ns_max) << ',' << r.distance_ops << ',' << r.span_ops << ','
       << format_double(r.throughput) << ',' << r.workers << ',' << detail::csv_field(r.status) << '\n';
  }
  return os.str();
}

inline std::vector<BenchRecord> parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("bench csv: missing header");
  if (detail::split_csv_line(line) != bench_columns()) throw std::invalid_argument("bench csv: unexpected header");
  std::vector<BenchRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != bench_columns().size()) throw std::invalid_argument("bench csv: wrong field count");
    using detail::parse_number;
    BenchRecord r;
    r.scenario = f[0];
    r.N = parse_number<std::size_t>(f[1], "N");
    r.C = parse_number<std::size_t>(f[2], "C");
    r.kappa = parse_number<std::size_t>(f[3], "kappa");
    r.K = parse_number<std::size_t>(f[4], "K");
    r.B = parse_number<std::size_t>(f[5], "B");
    r.variant = f[6];
    r.wall_ns_med = parse_number<double>(f[7], "wall_ns_med");
    r.wall_ns_min = parse_number<double>(f[8], "wall_ns_min");
    r.wall_ns_max = parse_number<double>(f[9], "wall_ns_max");
    r.distance_ops = parse_number<std::uint64_t>(f[10], "distance_ops");
    r.span_ops = parse_number<std::uint64_t>(f[11], "span_ops");
    r.throughput = parse_number<double>(f[12], "throughput");
    r.workers = parse_number<std::size_t>(f[13], "workers");
    r.status = f[14];
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json to_json(const BenchRecord& r) {
  return {{"scenario", r.scenario},
          {"N", r.N},
          {"C", r.C},
          {"kappa", r.kappa},
          {"K", r.K},
          {"B", r.B},
          {"variant", r.variant},
          {"wall_ns_med", r.wall_ns_med},
          {"wall_ns_min", r.wall_ns_min},
          {"wall_ns_max", r.wall_ns_max},
          {"distance_ops", r.distance_ops},
          {"span_ops", r.span_ops},
          {"throughput", r.throughput},
          {"workers", r.workers},
          {"status", r.status}};
}

inline std::string to_json_text(const std::vector<BenchRecord>& records) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json o;
    const nlohmann::json j = to_json(r);
    for (const auto& col : bench_columns()) o[col] = j.at(col);
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

inline std::string render_report(const std::vector<BenchRecord>& records, ReportFormat fmt) {
  return fmt == ReportFormat::csv ? to_csv(records) : to_json_text(records);
}

inline void write_report(const std::string& path, const std::vector<BenchRecord>& records, ReportFormat fmt) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report to '" + path + "'");
  out << render_report(records, fmt);
  if (!out) throw std::runtime_error("failed writing report to '" + path + "'");
}

}  // namespace cvig
