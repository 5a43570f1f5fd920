#pragma once

#include <optional>
#include <string>
#include <vector>

#include "covmerge/cov.hpp"
#include "covmerge/linalg.hpp"
#include "covmerge/tensor_store.hpp"

namespace covmerge {

enum class MergeMethod : std::uint8_t {
  average,
  task_arithmetic,
  regmean,
  actmat,
  iso_c,
  tsv,
};

MergeMethod merge_method_from_string(const std::string& name);
std::string merge_method_name(MergeMethod method);

// Data-free defaults: 0.4 for task arithmetic, 1.0 for iso_c and tsv;
// the coefficient is unused by the remaining rules.
double default_alpha(MergeMethod method);

struct MergeConfig {
  MergeMethod method = MergeMethod::average;
  std::optional<double> alpha;      // falls back to default_alpha(method)
  double pinv_rtol = 0.0;           // <= 0 selects the default threshold
  double tsv_rank_fraction = 1.0;   // k = max(1, floor(fraction * N / T))

  // Name patterns (ECMAScript regex, partial match) classifying tensors.
  // 2D tensors matching always_average_patterns are averaged; the rest are
  // merged unless merge_2d_patterns is non-empty, in which case unmatched
  // 2D tensors follow the unmatched_2d policy.
  std::vector<std::string> always_average_patterns = {"embed"};
  std::vector<std::string> merge_2d_patterns;
  enum class Unmatched2d : std::uint8_t { merge, average, error };
  Unmatched2d unmatched_2d = Unmatched2d::merge;

  double effective_alpha() const { return alpha ? *alpha : default_alpha(method); }
};

struct TaskSet {
  Checkpoint pretrained;
  std::vector<Checkpoint> experts;               // length T >= 1
  std::vector<CovarianceBundle> covariances;     // aligned with experts; regmean only
};

struct MergeOutcome {
  Checkpoint merged;
  std::vector<std::string> warnings;
};

// Layer-wise merge of a task set: 2D weight matrices go through the
// configured rule, everything else is the arithmetic mean of the experts.
MergeOutcome merge(const TaskSet& ts, const MergeConfig& cfg);

// Elementwise mean (1/T) sum_t W_t.
Matrix merge_average(const std::vector<Matrix>& ws);

// W0 + alpha * sum_t Delta_t.
Matrix merge_task_arithmetic(const Matrix& w0, const std::vector<Matrix>& deltas, double alpha);

// Minimum-Frobenius-norm minimizer of the layer interference objective:
// (sum_t W_t C_t) (sum_t C_t)^+. Each C_t must be symmetric PSD (within
// tolerance), D_i x D_i; violations name the offending task index.
Matrix merge_interference(const std::vector<Matrix>& ws, const std::vector<Matrix>& cs,
                          double rtol = 0.0);

// merge_interference with the data-free estimates C_t = Delta_t^T Delta_t.
Matrix merge_actmat(const std::vector<Matrix>& ws, const std::vector<Matrix>& deltas,
                    double rtol = 0.0);

// Sum the deltas, flatten the spectrum to the mean singular value, and add
// the rescaled reconstruction back onto W0.
Matrix merge_iso_c(const Matrix& w0, const std::vector<Matrix>& deltas, double alpha);

// Truncate each delta's SVD to k = max(1, floor(rank_fraction * N / T))
// components, pool the factors, replace each pooled factor by its nearest
// orthonormal-column matrix (polar factor), and reconstruct onto W0.
// A pooled rank T*k above the layer dimension appends a warning record.
Matrix merge_tsv(const Matrix& w0, const std::vector<Matrix>& deltas, double alpha,
                 double rank_fraction, std::vector<std::string>* warnings = nullptr);

struct TsvFactors {
  Matrix u_orth;  // D_o x T*k, orthonormal columns when T*k <= D_o
  Vector sigma;   // length T*k
  Matrix v_orth;  // D_i x T*k
  Eigen::Index k = 0;
};

TsvFactors tsv_pool_factors(const std::vector<Matrix>& deltas, double rank_fraction,
                            std::vector<std::string>* warnings = nullptr);

}  // namespace covmerge
