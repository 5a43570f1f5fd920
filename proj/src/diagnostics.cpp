#include "covmerge/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace covmerge {

namespace {

constexpr double kBoundSlack = 1e-9;

double safe_angle(const Matrix& a, const Matrix& b, bool* degenerate) {
  if (a.norm() == 0.0 || b.norm() == 0.0) {
    *degenerate = true;
    return std::numeric_limits<double>::quiet_NaN();
  }
  return angular_distance(a, b);
}

double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (sorted.size() == 1) return sorted[0];
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

TraceAccumulators accumulate_trace(const TrainTrace& trace) {
  if (trace.iterations.empty()) throw std::invalid_argument("empty trace");
  const Eigen::Index d_i = trace.iterations.front().z.cols();
  const Eigen::Index d_o = trace.iterations.front().g.cols();

  TraceAccumulators acc;
  acc.g_bar = Matrix::Zero(d_o, d_i);
  acc.s_bar = Matrix::Zero(d_i, d_i);
  acc.s_tilde = Matrix::Zero(d_i, d_i);

  for (const IterationRecord& rec : trace.iterations) {
    if (rec.z.rows() != rec.g.rows() || rec.z.rows() == 0) {
      throw std::invalid_argument("trace record has mismatched or empty batches");
    }
    if (rec.z.cols() != d_i || rec.g.cols() != d_o) {
      throw std::invalid_argument("trace record dimensions change between iterations");
    }
    const Eigen::Index batch = rec.z.rows();
    const double inv_batch = 1.0 / static_cast<double>(batch);

    acc.g_bar += inv_batch * (rec.g.transpose() * rec.z);

    Matrix s_bar_k = Matrix::Zero(d_i, d_i);
    double gn2_mean = 0.0;
    for (Eigen::Index b = 0; b < batch; ++b) {
      const double gn2 = rec.g.row(b).squaredNorm();
      s_bar_k += gn2 * (rec.z.row(b).transpose() * rec.z.row(b));
      gn2_mean += gn2;
    }
    s_bar_k *= inv_batch;
    gn2_mean *= inv_batch;

    const Matrix c_k = empirical_covariance(rec.z);
    acc.s_bar += s_bar_k;
    acc.s_tilde += gn2_mean * c_k;
    acc.c_trajectory.push_back(c_k);
  }
  acc.c_final = acc.c_trajectory.back();
  return acc;
}

ErrorReport trace_error_report(const TraceAccumulators& acc, const Matrix& delta) {
  ErrorReport report;
  const Matrix dtd = actmat_gram(delta);
  const Matrix gram = acc.g_bar.transpose() * acc.g_bar;

  report.eps_cross = safe_angle(gram, acc.s_bar, &report.degenerate);
  report.eps_corr = safe_angle(acc.s_bar, acc.s_tilde, &report.degenerate);
  report.eps_drift = safe_angle(acc.s_tilde, acc.c_final, &report.degenerate);
  report.lhs_angle = safe_angle(dtd, acc.c_final, &report.degenerate);
  report.bound_satisfied =
      report.lhs_angle <= report.eps_cross + report.eps_corr + report.eps_drift + kBoundSlack;

  for (const Matrix& c_k : acc.c_trajectory) {
    if (c_k.norm() == 0.0 || acc.c_final.norm() == 0.0) {
      report.drift_trajectory.push_back(std::numeric_limits<double>::quiet_NaN());
    } else {
      report.drift_trajectory.push_back(angular_distance(c_k, acc.c_final));
    }
  }
  return report;
}

PearsonSummary pearson_activation_gradnorm(const TrainTrace& trace) {
  if (trace.iterations.empty()) throw std::invalid_argument("empty trace");
  const IterationRecord& rec = trace.iterations.back();
  const Eigen::Index batch = rec.z.rows();
  if (batch < 2) {
    throw std::invalid_argument("need at least two samples at the final iteration");
  }

  std::vector<double> gn2(static_cast<std::size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) gn2[static_cast<std::size_t>(b)] = rec.g.row(b).squaredNorm();

  PearsonSummary summary;
  const Eigen::Index d = rec.z.cols();
  summary.total_entries = static_cast<std::size_t>(d) * static_cast<std::size_t>(d);
  std::vector<double> series(static_cast<std::size_t>(batch));
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      for (Eigen::Index b = 0; b < batch; ++b) {
        series[static_cast<std::size_t>(b)] = rec.z(b, i) * rec.z(b, j);
      }
      try {
        summary.abs_values.push_back(std::abs(pearson(series, gn2)));
      } catch (const std::invalid_argument&) {
        ++summary.skipped;  // constant series
      }
    }
  }
  std::vector<double> sorted = summary.abs_values;
  std::sort(sorted.begin(), sorted.end());
  if (!sorted.empty()) {
    summary.min = sorted.front();
    summary.q25 = quantile(sorted, 0.25);
    summary.median = quantile(sorted, 0.5);
    summary.q75 = quantile(sorted, 0.75);
    summary.max = sorted.back();
  }
  return summary;
}

TransferBoundReport negative_transfer_bound(const Architecture& arch, const Checkpoint& merged,
                                            const TaskSet& ts,
                                            const std::vector<CovarianceBundle>& covs_true,
                                            const std::vector<CovarianceBundle>& covs_hat,
                                            std::size_t task, const Matrix& inputs,
                                            LossKind loss, const Matrix* targets,
                                            double pinv_rtol) {
  const std::size_t t_count = ts.experts.size();
  if (task >= t_count) throw std::invalid_argument("task index out of range");
  if (covs_true.size() != t_count || covs_hat.size() != t_count) {
    throw std::invalid_argument("need one covariance bundle per expert");
  }
  if (loss == LossKind::mse && targets == nullptr) {
    throw std::invalid_argument("mse loss needs targets");
  }
  const Checkpoint& expert = ts.experts[task];
  const std::size_t n_lin = arch.linear_count();

  const ForwardCapture cap_expert = forward_collect(arch, expert, inputs);
  const ForwardCapture cap_merged = forward_collect(arch, merged, inputs);

  TransferBoundReport report;

  // Left side: exact batch mean of the per-sample loss gap.
  auto sample_loss = [&](const Matrix& out, Eigen::Index b) {
    if (loss == LossKind::output_norm) return out.row(b).norm();
    return (out.row(b) - targets->row(b)).squaredNorm();
  };
  for (Eigen::Index b = 0; b < inputs.rows(); ++b) {
    report.per_sample.push_back(
        std::abs(sample_loss(cap_merged.output, b) - sample_loss(cap_expert.output, b)));
  }
  for (double v : report.per_sample) report.expected += v;
  report.expected /= static_cast<double>(report.per_sample.size());

  if (loss == LossKind::output_norm) {
    report.beta = 1.0;
  } else {
    double worst = 0.0;
    for (Eigen::Index b = 0; b < inputs.rows(); ++b) {
      worst = std::max({worst, (cap_merged.output.row(b) - targets->row(b)).norm(),
                        (cap_expert.output.row(b) - targets->row(b)).norm()});
    }
    report.beta = 2.0 * worst;
    report.beta_is_estimate = true;
  }

  // Composed layer list: linear, activation, linear, ..., linear.
  const std::size_t total_layers = 2 * n_lin - 1;
  report.gamma.resize(total_layers, 1.0);
  for (std::size_t i = 0; i < n_lin; ++i) {
    report.gamma[2 * i] = spectral_norm(merged.tensors.at(arch.weight_name(i)).to_matrix());
  }
  report.gamma_tilde.resize(total_layers);
  double running = report.beta;
  for (std::size_t l = total_layers; l-- > 0;) {
    report.gamma_tilde[l] = running;       // beta * prod_{m > l} gamma_m
    running *= report.gamma[l];
  }

  // Reference minimizer from the true covariances, per linear layer.
  double interference_term = 0.0;
  double covariance_term = 0.0;
  for (std::size_t i = 0; i < n_lin; ++i) {
    const std::string name = arch.weight_name(i);
    report.linear_layers.push_back(name);
    std::vector<Matrix> ws, cs_true, cs_hat;
    for (std::size_t t = 0; t < t_count; ++t) {
      auto w_it = ts.experts[t].tensors.find(name);
      if (w_it == ts.experts[t].tensors.end()) {
        throw std::invalid_argument("expert \"" + ts.experts[t].name + "\" has no tensor \"" +
                                    name + "\"");
      }
      ws.push_back(w_it->second.to_matrix());
      for (const auto* covs : {&covs_true, &covs_hat}) {
        if (!(*covs)[t].layer_covs.contains(name)) {
          throw std::invalid_argument("covariance bundle for task \"" + (*covs)[t].task_id +
                                      "\" has no layer \"" + name + "\"");
        }
      }
      cs_true.push_back(covs_true[t].layer_covs.at(name));
      cs_hat.push_back(covs_hat[t].layer_covs.at(name));
    }
    const Matrix w_star = merge_interference(ws, cs_true, pinv_rtol);
    const Matrix& z = cap_expert.linear_inputs[i];
    const Matrix w_expert = expert.tensors.at(name).to_matrix();

    double local = 0.0;
    double z_norm_mean = 0.0;
    for (Eigen::Index b = 0; b < z.rows(); ++b) {
      local += ((w_star - w_expert) * z.row(b).transpose()).norm();
      z_norm_mean += z.row(b).norm();
    }
    local /= static_cast<double>(z.rows());
    z_norm_mean /= static_cast<double>(z.rows());

    const double gamma_tilde = report.gamma_tilde[2 * i];
    const double zeta_tilde = gamma_tilde * z_norm_mean;
    report.local_error.push_back(local);
    report.zeta_tilde.push_back(zeta_tilde);
    interference_term += gamma_tilde * local;

    double kappa_w = 0.0;
    for (const Matrix& w : ws) kappa_w = std::max(kappa_w, w.norm());
    Matrix s_true = Matrix::Zero(cs_true[0].rows(), cs_true[0].cols());
    Matrix s_hat = s_true;
    double sum_hat_norms = 0.0;
    for (std::size_t t = 0; t < t_count; ++t) {
      s_true += cs_true[t];
      s_hat += cs_hat[t];
      sum_hat_norms += cs_hat[t].norm();
    }
    const double s_dagger_norm = pinv(s_true, pinv_rtol).norm();
    const double s_hat_dagger_norm = pinv(s_hat, pinv_rtol).norm();
    report.kappa_w.push_back(kappa_w);
    report.kappa_s_dagger.push_back(s_dagger_norm);

    std::vector<double> gaps;
    double gap_sum = 0.0;
    for (std::size_t t = 0; t < t_count; ++t) {
      gaps.push_back((cs_true[t] - cs_hat[t]).norm());
      gap_sum += gaps.back();
    }
    report.cov_error_norms.push_back(gaps);
    covariance_term +=
        zeta_tilde * gap_sum *
        (kappa_w * s_dagger_norm +
         kappa_w * std::max(s_dagger_norm * s_dagger_norm, s_hat_dagger_norm * s_hat_dagger_norm) *
             sum_hat_norms);
  }

  report.interference_term = interference_term;
  report.covariance_term = covariance_term;
  report.bound = interference_term + covariance_term;
  report.holds = report.expected <= report.bound + kBoundSlack;
  return report;
}

double frobenius_cosine(const Matrix& a, const Matrix& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    throw std::invalid_argument("frobenius_cosine: zero-norm argument");
  }
  return std::clamp(frobenius_inner(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<CosineRow> covariance_cosine_report(const CovarianceBundle& estimate,
                                                const CovarianceBundle& empirical) {
  std::vector<CosineRow> rows;
  for (const auto& [layer, c_emp] : empirical.layer_covs) {
    auto it = estimate.layer_covs.find(layer);
    if (it == estimate.layer_covs.end()) {
      throw std::invalid_argument("cosine report: estimate bundle has no layer \"" + layer + "\"");
    }
    const Matrix eye = Matrix::Identity(c_emp.rows(), c_emp.cols());
    rows.push_back({layer, frobenius_cosine(it->second, c_emp), frobenius_cosine(eye, c_emp)});
  }
  return rows;
}

}  // namespace covmerge
