#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "covmerge/merge.hpp"

namespace covmerge {

// Cost of merging T linear layers of size N x N; L is the sample count of
// the data-dependent preprocessing (regmean only).
struct FlopModel {
  MergeMethod method = MergeMethod::average;
  std::int64_t t = 1;
  std::int64_t n = 1;
  std::int64_t l = 1;
};

struct FlopCount {
  std::int64_t merge_flops = 0;
  std::int64_t preprocess_flops = 0;
};

// Exact integer evaluation of the per-method cost polynomials.
FlopCount flops(const FlopModel& model);

// Count of inherently sequential SVD / inverse operations per merge.
std::int64_t expensive_ops(MergeMethod method, std::int64_t t);

struct BenchRow {
  std::string method;
  bool ok = false;
  std::string error;
  double median_ms = 0.0;
  double iqr_ms = 0.0;
  std::int64_t expensive = 0;
  int repeats = 0;
};

// Wall-clock of merge() per method over `repeats` runs (monotonic clock,
// merge computation only, no I/O). Failures are recorded per row without
// aborting the remaining methods.
std::vector<BenchRow> bench(const TaskSet& ts, const std::vector<std::string>& methods,
                            int repeats, const MergeConfig& base = {});

// Fixed header: method,t,n,repeats,median_ms,iqr_ms,expensive_ops,status
std::string bench_csv(const std::vector<BenchRow>& rows, std::int64_t t, std::int64_t n);

// Synthetic square-layer task set for benchmarking.
TaskSet synthetic_task_set(std::int64_t n, std::int64_t t, std::uint64_t seed);

}  // namespace covmerge
