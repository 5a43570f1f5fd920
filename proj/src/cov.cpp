#include "covmerge/cov.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace covmerge {

namespace {

Matrix sum_outer_tree(const Matrix& samples, Eigen::Index lo, Eigen::Index hi) {
  if (hi - lo == 1) {
    const auto row = samples.row(lo);
    return row.transpose() * row;
  }
  const Eigen::Index mid = lo + (hi - lo) / 2;
  return sum_outer_tree(samples, lo, mid) + sum_outer_tree(samples, mid, hi);
}

double quantile(std::vector<double> sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (sorted.size() == 1) return sorted[0];
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

Matrix empirical_covariance(const Matrix& samples) {
  if (samples.rows() == 0) {
    throw std::invalid_argument("empirical_covariance: empty sample set");
  }
  if (!samples.allFinite()) {
    throw NumericalError("empirical_covariance: non-finite samples");
  }
  return sum_outer_tree(samples, 0, samples.rows()) /
         static_cast<double>(samples.rows());
}

Matrix actmat_gram(const Matrix& delta) {
  const Matrix m = delta.transpose() * delta;
  return 0.5 * (m + m.transpose());
}

Matrix actmat_estimate(const TaskVector& tv, const std::string& layer) {
  auto it = tv.deltas.find(layer);
  if (it == tv.deltas.end()) {
    throw std::invalid_argument("actmat_estimate: layer \"" + layer + "\" not in task vector");
  }
  if (!it->second.is_2d()) {
    throw std::invalid_argument("actmat_estimate: layer \"" + layer + "\" is not 2D");
  }
  return actmat_gram(it->second.to_matrix());
}

CovarianceBundle actmat_bundle(const TaskVector& tv) {
  CovarianceBundle b;
  b.task_id = tv.task_id;
  b.source = CovSource::actmat;
  for (const auto& [name, t] : tv.deltas) {
    if (t.is_2d()) b.layer_covs.emplace(name, actmat_gram(t.to_matrix()));
  }
  return b;
}

CovarianceBundle empirical_bundle(const std::string& task_id,
                                  const std::map<std::string, Matrix>& layer_samples) {
  CovarianceBundle b;
  b.task_id = task_id;
  b.source = CovSource::empirical;
  for (const auto& [name, samples] : layer_samples) {
    b.layer_covs.emplace(name, empirical_covariance(samples));
    b.sample_count = static_cast<std::size_t>(samples.rows());
  }
  return b;
}

double kappa(const Matrix& c, const Matrix& c_hat) {
  if (c.rows() != c_hat.rows() || c.cols() != c_hat.cols() || c.rows() != c.cols()) {
    throw std::invalid_argument("kappa: expected equal square shapes");
  }
  const double nh = c_hat.norm();
  if (nh == 0.0) throw std::invalid_argument("kappa: zero-norm estimate");
  return c.norm() / nh;
}

KappaReport kappa_ratio_table(const std::vector<CovarianceBundle>& bundles_emp,
                              const std::vector<CovarianceBundle>& bundles_act) {
  if (bundles_emp.size() != bundles_act.size() || bundles_emp.empty()) {
    throw std::invalid_argument("kappa_ratio_table: bundle lists must be non-empty and aligned");
  }
  const std::size_t t_count = bundles_emp.size();
  std::set<std::string> layers;
  for (const auto& [name, cov] : bundles_emp.front().layer_covs) layers.insert(name);
  for (std::size_t t = 0; t < t_count; ++t) {
    if (bundles_emp[t].task_id != bundles_act[t].task_id) {
      throw std::invalid_argument("kappa_ratio_table: task id mismatch at index " +
                                  std::to_string(t));
    }
    for (const auto* b : {&bundles_emp[t], &bundles_act[t]}) {
      std::set<std::string> keys;
      for (const auto& [name, cov] : b->layer_covs) keys.insert(name);
      if (keys != layers) {
        throw std::invalid_argument("kappa_ratio_table: layer key mismatch for task \"" +
                                    b->task_id + "\"");
      }
    }
  }

  KappaReport report;
  for (const auto& layer : layers) {
    std::vector<double> kappas(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
      kappas[t] = kappa(bundles_emp[t].layer_covs.at(layer), bundles_act[t].layer_covs.at(layer));
    }
    std::vector<double> ratios;
    for (std::size_t i = 0; i < t_count; ++i) {
      for (std::size_t j = 0; j < t_count; ++j) {
        if (i == j) continue;
        report.entries.push_back({layer, bundles_emp[i].task_id, bundles_emp[j].task_id,
                                  kappas[i], kappas[j], kappas[i] / kappas[j]});
        ratios.push_back(kappas[i] / kappas[j]);
      }
    }
    if (ratios.empty()) ratios.push_back(1.0);  // single task: ratio of a kappa with itself
    std::sort(ratios.begin(), ratios.end());
    report.layer_summaries.push_back({layer, ratios.front(), quantile(ratios, 0.25),
                                      quantile(ratios, 0.5), quantile(ratios, 0.75),
                                      ratios.back()});
  }
  return report;
}

Checkpoint bundle_to_container(const CovarianceBundle& bundle) {
  Checkpoint c;
  c.name = "cov:" + bundle.task_id;
  c.metadata["task_id"] = bundle.task_id;
  c.metadata["source"] = bundle.source == CovSource::actmat ? "actmat" : "empirical";
  c.metadata["sample_count"] = std::to_string(bundle.sample_count);
  for (const auto& [layer, cov] : bundle.layer_covs) {
    c.tensors.emplace("cov/" + bundle.task_id + "/" + layer, Tensor::from_matrix(cov));
  }
  return c;
}

CovarianceBundle bundle_from_container(const Checkpoint& ckpt) {
  CovarianceBundle b;
  auto it = ckpt.metadata.find("task_id");
  if (it == ckpt.metadata.end()) {
    throw FormatError("covariance container is missing task_id metadata");
  }
  b.task_id = it->second;
  if (auto s = ckpt.metadata.find("source"); s != ckpt.metadata.end()) {
    b.source = s->second == "actmat" ? CovSource::actmat : CovSource::empirical;
  }
  if (auto s = ckpt.metadata.find("sample_count"); s != ckpt.metadata.end()) {
    b.sample_count = static_cast<std::size_t>(std::stoull(s->second));
  }
  const std::string prefix = "cov/" + b.task_id + "/";
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.rfind(prefix, 0) != 0) {
      throw FormatError("unexpected tensor \"" + name + "\" in covariance container");
    }
    b.layer_covs.emplace(name.substr(prefix.size()), tensor.to_matrix());
  }
  return b;
}

}  // namespace covmerge
