#include "covmerge/costmodel.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "covmerge/rng.hpp"

namespace covmerge {

FlopCount flops(const FlopModel& model) {
  if (model.t < 1 || model.n < 1 || model.l < 1) {
    throw std::invalid_argument("flops: T, N and L must all be >= 1");
  }
  const std::int64_t t = model.t;
  const std::int64_t n = model.n;
  const std::int64_t l = model.l;
  const std::int64_t n2 = n * n;
  const std::int64_t n3 = n2 * n;
  FlopCount out;
  switch (model.method) {
    case MergeMethod::average:
      out.merge_flops = t * n2;
      break;
    case MergeMethod::task_arithmetic:
      out.merge_flops = (2 * t + 1) * n2;
      break;
    case MergeMethod::regmean:
      out.merge_flops = (t + 3) * n3 + (2 * t - 2) * n2;
      out.preprocess_flops = (2 * l - 1) * t * n2;
      break;
    case MergeMethod::actmat:
      out.merge_flops = (2 * t + 3) * n3 + (3 * t - 2) * n2;
      break;
    case MergeMethod::iso_c:
      out.merge_flops = 23 * n3 + (2 * t + 2) * n2 + n;
      break;
    case MergeMethod::tsv:
      out.merge_flops = (22 * t + 45) * n3 + (t + 3) * n2;
      break;
  }
  return out;
}

std::int64_t expensive_ops(MergeMethod method, std::int64_t t) {
  switch (method) {
    case MergeMethod::average:
    case MergeMethod::task_arithmetic:
      return 0;
    case MergeMethod::regmean:
    case MergeMethod::actmat:
    case MergeMethod::iso_c:
      return 1;
    case MergeMethod::tsv:
      return t + 2;
  }
  return 0;
}

TaskSet synthetic_task_set(std::int64_t n, std::int64_t t, std::uint64_t seed) {
  if (n < 1 || t < 1) throw std::invalid_argument("synthetic_task_set: N and T must be >= 1");
  Rng rng(seed);
  TaskSet ts;
  ts.pretrained.name = "pretrained";
  const std::string layer = "layers.0.weight";
  ts.pretrained.tensors.emplace(layer, Tensor::from_matrix(rng.matrix_normal(n, n)));
  for (std::int64_t i = 0; i < t; ++i) {
    Checkpoint e;
    e.name = "expert-" + std::to_string(i);
    e.tensors.emplace(layer, Tensor::from_matrix(rng.matrix_normal(n, n)));
    ts.experts.push_back(std::move(e));
  }
  return ts;
}

std::vector<BenchRow> bench(const TaskSet& ts, const std::vector<std::string>& methods,
                            int repeats, const MergeConfig& base) {
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  for (const std::string& name : methods) {
    BenchRow row;
    row.method = name;
    row.repeats = repeats;
    try {
      MergeConfig cfg = base;
      cfg.method = merge_method_from_string(name);
      row.expensive = expensive_ops(cfg.method, static_cast<std::int64_t>(ts.experts.size()));
      std::vector<double> samples;
      for (int r = 0; r < repeats; ++r) {
        const auto begin = clock::now();
        (void)merge(ts, cfg);
        const auto end = clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(end - begin).count());
      }
      std::sort(samples.begin(), samples.end());
      auto at = [&](double q) {
        const double pos = q * static_cast<double>(samples.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const auto hi = std::min(lo + 1, samples.size() - 1);
        return samples[lo] + (pos - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
      };
      row.median_ms = at(0.5);
      row.iqr_ms = at(0.75) - at(0.25);
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows, std::int64_t t, std::int64_t n) {
  std::ostringstream oss;
  oss << "method,t,n,repeats,median_ms,iqr_ms,expensive_ops,status\n";
  for (const BenchRow& row : rows) {
    oss << row.method << ',' << t << ',' << n << ',' << row.repeats << ',';
    if (row.ok) {
      oss << row.median_ms << ',' << row.iqr_ms << ',' << row.expensive << ",ok\n";
    } else {
      oss << ",," << row.expensive << ",failed\n";
    }
  }
  return oss.str();
}

}  // namespace covmerge
