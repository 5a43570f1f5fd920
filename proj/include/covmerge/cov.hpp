#pragma once

#include <map>
#include <string>
#include <vector>

#include "covmerge/linalg.hpp"
#include "covmerge/tensor_store.hpp"

namespace covmerge {

enum class CovSource : std::uint8_t { empirical, actmat };

// Per-layer input second moments for one task, either accumulated from
// activations (empirical) or estimated data-free from the task vector.
struct CovarianceBundle {
  std::string task_id;
  std::map<std::string, Matrix> layer_covs;  // square D_i x D_i, symmetric PSD
  CovSource source = CovSource::empirical;
  std::size_t sample_count = 0;  // empirical only
};

// Mean of the sample outer products, (1/L) sum_l z_l z_l^T. Rows of
// `samples` are the vectors. Summed in a fixed pairwise-tree order so the
// result is stable (within ~1e-12) under sample reordering.
Matrix empirical_covariance(const Matrix& samples);

// Delta^T Delta, symmetrized as (M + M^T)/2 so the result is exactly
// symmetric. This is the data-free covariance estimate.
Matrix actmat_gram(const Matrix& delta);

// actmat_gram applied to a named 2D layer of a task vector.
Matrix actmat_estimate(const TaskVector& tv, const std::string& layer);

CovarianceBundle actmat_bundle(const TaskVector& tv);
CovarianceBundle empirical_bundle(const std::string& task_id,
                                  const std::map<std::string, Matrix>& layer_samples);

// Scale factor relating a covariance to its estimate: |C|_F / |C_hat|_F.
double kappa(const Matrix& c, const Matrix& c_hat);

struct KappaRatioEntry {
  std::string layer;
  std::string task_i, task_j;
  double kappa_i, kappa_j, ratio;  // ratio = kappa_i / kappa_j
};

struct KappaLayerSummary {
  std::string layer;
  double min, q25, median, q75, max;
};

struct KappaReport {
  std::vector<KappaRatioEntry> entries;          // all ordered pairs i != j
  std::vector<KappaLayerSummary> layer_summaries;
};

// Ratios kappa_i / kappa_j per layer over all ordered task pairs, with
// per-layer quantile summaries. The two bundle lists must be aligned by
// task id and share identical layer keys.
KappaReport kappa_ratio_table(const std::vector<CovarianceBundle>& bundles_emp,
                              const std::vector<CovarianceBundle>& bundles_act);

// Bundles serialize through the tensor container with tensors named
// "cov/<task_id>/<layer>" and source/sample_count in the metadata.
Checkpoint bundle_to_container(const CovarianceBundle& bundle);
CovarianceBundle bundle_from_container(const Checkpoint& ckpt);

}  // namespace covmerge
