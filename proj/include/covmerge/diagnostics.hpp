#pragma once

#include <string>
#include <vector>

#include "covmerge/cov.hpp"
#include "covmerge/linalg.hpp"
#include "covmerge/merge.hpp"
#include "covmerge/toy.hpp"

namespace covmerge {

// Statistics accumulated over a gradient-descent trace of one layer:
// the summed batch means of g z^T, of zz^T |g|^2, of the decoupled
// zz^T * mean|g|^2, plus the per-iteration input second moments.
struct TraceAccumulators {
  Matrix g_bar;                    // sum_k E[g z^T]
  Matrix s_bar;                    // sum_k E[zz^T |g|^2]
  Matrix s_tilde;                  // sum_k E[zz^T] E[|g|^2]
  Matrix c_final;                  // E[zz^T] at the last iteration
  std::vector<Matrix> c_trajectory;
};

TraceAccumulators accumulate_trace(const TrainTrace& trace);

// The three angular error terms bounding the angle between the task
// vector's gram and the final input second moment, plus that angle itself.
struct ErrorReport {
  double eps_cross = 0.0;  // angle(G_bar^T G_bar, S_bar)
  double eps_corr = 0.0;   // angle(S_bar, S_tilde)
  double eps_drift = 0.0;  // angle(S_tilde, C_final)
  double lhs_angle = 0.0;  // angle(Delta^T Delta, C_final)
  bool bound_satisfied = false;
  bool degenerate = false;  // some matrix had zero norm; angles are NaN
  std::vector<double> drift_trajectory;  // angle(C^(k), C_final) per iteration
};

ErrorReport trace_error_report(const TraceAccumulators& acc, const Matrix& delta);

// Distribution of |pearson(z_i z_j, |g|^2)| over the entries of zz^T at the
// final iteration; constant series are skipped and counted.
struct PearsonSummary {
  std::size_t total_entries = 0;
  std::size_t skipped = 0;
  double min = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0, max = 0.0;
  std::vector<double> abs_values;
};

PearsonSummary pearson_activation_gradnorm(const TrainTrace& trace);

// Everything entering the negative-transfer bound for one evaluation task.
struct TransferBoundReport {
  std::vector<double> per_sample;   // |loss(merged) - loss(expert)| per input
  double expected = 0.0;            // mean of per_sample (the bound's left side)
  double bound = 0.0;
  bool holds = false;

  double beta = 1.0;
  bool beta_is_estimate = false;
  std::vector<double> gamma;          // per composed layer
  std::vector<double> gamma_tilde;    // per composed layer
  std::vector<std::string> linear_layers;
  std::vector<double> local_error;    // E[|W* z - W_t z|] per linear layer
  std::vector<double> zeta_tilde;     // per linear layer
  std::vector<double> kappa_w;        // max_t |W_t|_F per linear layer
  std::vector<double> kappa_s_dagger; // |S^+|_F per linear layer
  std::vector<std::vector<double>> cov_error_norms;  // [linear layer][task]
  double interference_term = 0.0;
  double covariance_term = 0.0;
};

// Evaluates both sides of the negative-transfer bound for `task`, with the
// merged checkpoint built from the approximate covariances and the reference
// minimizer rebuilt internally from the true ones. The loss is applied to
// the network output; the Euclidean norm gives an exact Lipschitz constant
// of 1, while MSE against `targets` only estimates one.
TransferBoundReport negative_transfer_bound(const Architecture& arch, const Checkpoint& merged,
                                            const TaskSet& ts,
                                            const std::vector<CovarianceBundle>& covs_true,
                                            const std::vector<CovarianceBundle>& covs_hat,
                                            std::size_t task, const Matrix& inputs,
                                            LossKind loss, const Matrix* targets = nullptr,
                                            double pinv_rtol = 0.0);

// Plain Frobenius cosine between two nonzero matrices.
double frobenius_cosine(const Matrix& a, const Matrix& b);

struct CosineRow {
  std::string layer;
  double cos_estimate;  // cos(C_hat, C)
  double cos_identity;  // cos(I, C), the baseline
};

std::vector<CosineRow> covariance_cosine_report(const CovarianceBundle& estimate,
                                                const CovarianceBundle& empirical);

}  // namespace covmerge
