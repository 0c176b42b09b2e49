#pragma once

#include <cstddef>
#include <memory>
#include <thread>

#include <tbb/blocked_range.h>
#include <tbb/global_control.h>
#include <tbb/parallel_for.h>

namespace cvig::parallel {

inline std::size_t hardware_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

inline std::size_t active_workers() {
  return tbb::global_control::active_value(tbb::global_control::max_allowed_parallelism);
}

/// Caps the worker pool for the lifetime of the object.
class WorkerScope {
 public:
  explicit WorkerScope(std::size_t workers)
      : control_(std::make_unique<tbb::global_control>(tbb::global_control::max_allowed_parallelism,
                                                       workers == 0 ? 1 : workers)) {}

 private:
  std::unique_ptr<tbb::global_control> control_;
};

/// Calls fn(i) for every i in [begin, end). Each index writes disjoint output,
/// so results do not depend on how indices are spread over workers.
template <class Fn>
void for_each_index(std::size_t begin, std::size_t end, Fn&& fn, std::size_t grain = 1) {
  if (end <= begin) return;
  if (end - begin <= grain || active_workers() <= 1) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  tbb::parallel_for(tbb::blocked_range<std::size_t>(begin, end, grain),
                    [&](const tbb::blocked_range<std::size_t>& r) {
                      for (std::size_t i = r.begin(); i != r.end(); ++i) fn(i);
                    });
}

}  // namespace cvig::parallel
