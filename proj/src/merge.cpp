#include "covmerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <sstream>

namespace covmerge {

MergeMethod merge_method_from_string(const std::string& name) {
  if (name == "average") return MergeMethod::average;
  if (name == "task_arithmetic") return MergeMethod::task_arithmetic;
  if (name == "regmean") return MergeMethod::regmean;
  if (name == "actmat") return MergeMethod::actmat;
  if (name == "iso_c") return MergeMethod::iso_c;
  if (name == "tsv") return MergeMethod::tsv;
  throw std::invalid_argument("unknown merge method \"" + name + "\"");
}

std::string merge_method_name(MergeMethod method) {
  switch (method) {
    case MergeMethod::average: return "average";
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::regmean: return "regmean";
    case MergeMethod::actmat: return "actmat";
    case MergeMethod::iso_c: return "iso_c";
    case MergeMethod::tsv: return "tsv";
  }
  throw std::invalid_argument("unknown merge method");
}

double default_alpha(MergeMethod method) {
  // 0.4 for data-free task arithmetic; 1.0 for iso_c and tsv. The remaining
  // rules ignore the coefficient.
  return method == MergeMethod::task_arithmetic ? 0.4 : 1.0;
}

namespace {

void require_same_shape(const std::vector<Matrix>& ms, const char* what) {
  if (ms.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
  for (const Matrix& m : ms) {
    if (m.rows() != ms[0].rows() || m.cols() != ms[0].cols()) {
      throw std::invalid_argument(std::string(what) + ": shape mismatch in list");
    }
  }
}

void validate_covariance(const Matrix& c, Eigen::Index d_i, std::size_t task_index) {
  const std::string tag = "task " + std::to_string(task_index);
  if (c.rows() != c.cols() || c.rows() != d_i) {
    throw std::invalid_argument("covariance for " + tag + " must be " + std::to_string(d_i) +
                                "x" + std::to_string(d_i));
  }
  if (c.rows() == 0) return;
  if (!c.allFinite()) throw std::invalid_argument("covariance for " + tag + " is not finite");
  const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
  const double asym = (c - c.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-10 * scale) {
    throw std::invalid_argument("asymmetric covariance for " + tag);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (c + c.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double lmax = es.eigenvalues().cwiseAbs().maxCoeff();
  if (es.eigenvalues().minCoeff() < -1e-8 * std::max(lmax, 1e-300)) {
    throw std::invalid_argument("non-PSD covariance for " + tag + " (min eigenvalue " +
                                std::to_string(es.eigenvalues().minCoeff()) + ")");
  }
}

}  // namespace

Matrix merge_average(const std::vector<Matrix>& ws) {
  require_same_shape(ws, "merge_average");
  Matrix sum = Matrix::Zero(ws[0].rows(), ws[0].cols());
  for (const Matrix& w : ws) sum += w;
  return sum / static_cast<double>(ws.size());
}

Matrix merge_task_arithmetic(const Matrix& w0, const std::vector<Matrix>& deltas, double alpha) {
  require_same_shape(deltas, "merge_task_arithmetic");
  if (deltas[0].rows() != w0.rows() || deltas[0].cols() != w0.cols()) {
    throw std::invalid_argument("merge_task_arithmetic: delta shape differs from W0");
  }
  Matrix sum = Matrix::Zero(w0.rows(), w0.cols());
  for (const Matrix& d : deltas) sum += d;
  return w0 + alpha * sum;
}

Matrix merge_interference(const std::vector<Matrix>& ws, const std::vector<Matrix>& cs,
                          double rtol) {
  require_same_shape(ws, "merge_interference");
  if (cs.size() != ws.size()) {
    throw std::invalid_argument("merge_interference: need one covariance per task");
  }
  const Eigen::Index d_i = ws[0].cols();
  for (std::size_t t = 0; t < cs.size(); ++t) validate_covariance(cs[t], d_i, t);
  Matrix weighted = Matrix::Zero(ws[0].rows(), d_i);
  Matrix total = Matrix::Zero(d_i, d_i);
  for (std::size_t t = 0; t < ws.size(); ++t) {
    weighted += ws[t] * cs[t];
    total += cs[t];
  }
  return weighted * pinv(total, rtol);
}

Matrix merge_actmat(const std::vector<Matrix>& ws, const std::vector<Matrix>& deltas,
                    double rtol) {
  require_same_shape(ws, "merge_actmat");
  require_same_shape(deltas, "merge_actmat");
  if (deltas[0].rows() != ws[0].rows() || deltas[0].cols() != ws[0].cols()) {
    throw std::invalid_argument("merge_actmat: delta shape differs from weights");
  }
  std::vector<Matrix> cs;
  cs.reserve(deltas.size());
  for (const Matrix& d : deltas) cs.push_back(actmat_gram(d));
  return merge_interference(ws, cs, rtol);
}

Matrix merge_iso_c(const Matrix& w0, const std::vector<Matrix>& deltas, double alpha) {
  require_same_shape(deltas, "merge_iso_c");
  if (deltas[0].rows() != w0.rows() || deltas[0].cols() != w0.cols()) {
    throw std::invalid_argument("merge_iso_c: delta shape differs from W0");
  }
  Matrix dsum = Matrix::Zero(w0.rows(), w0.cols());
  for (const Matrix& d : deltas) dsum += d;
  if (dsum.size() == 0) return w0;
  const SvdFactors f = svd(dsum);
  if (f.singular_values.size() == 0) return w0;
  const double sbar = f.singular_values.mean();
  return w0 + alpha * sbar * (f.u * f.vt);
}

TsvFactors tsv_pool_factors(const std::vector<Matrix>& deltas, double rank_fraction,
                            std::vector<std::string>* warnings) {
  require_same_shape(deltas, "merge_tsv");
  if (!(rank_fraction > 0.0 && rank_fraction <= 1.0)) {
    throw std::invalid_argument("merge_tsv: rank_fraction must be in (0, 1]");
  }
  const auto t_count = static_cast<Eigen::Index>(deltas.size());
  const Eigen::Index m = deltas[0].rows();
  const Eigen::Index n = deltas[0].cols();
  const Eigen::Index r = std::min(m, n);
  TsvFactors out;
  if (r == 0) {
    out.u_orth = Matrix::Zero(m, 0);
    out.v_orth = Matrix::Zero(n, 0);
    out.sigma = Vector::Zero(0);
    return out;
  }
  Eigen::Index k = static_cast<Eigen::Index>(
      std::floor(rank_fraction * static_cast<double>(r) / static_cast<double>(t_count)));
  k = std::clamp<Eigen::Index>(k, 1, r);
  out.k = k;
  const Eigen::Index pooled = t_count * k;
  if (pooled > r && warnings != nullptr) {
    warnings->push_back("tsv: pooled rank " + std::to_string(pooled) +
                        " exceeds layer dimension " + std::to_string(r) +
                        "; pooled factors cannot be exactly orthonormal");
  }

  Matrix u_cat(m, pooled);
  Matrix v_cat(n, pooled);
  Vector sigma_cat(pooled);
  for (Eigen::Index t = 0; t < t_count; ++t) {
    const SvdFactors f = svd(deltas[static_cast<std::size_t>(t)]);
    u_cat.middleCols(t * k, k) = f.u.leftCols(k);
    v_cat.middleCols(t * k, k) = f.vt.topRows(k).transpose();
    sigma_cat.segment(t * k, k) = f.singular_values.head(k);
  }

  const SvdFactors fu = svd(u_cat);
  const SvdFactors fv = svd(v_cat);
  out.u_orth = fu.u * fu.vt;  // polar factor: nearest orthonormal columns
  out.v_orth = fv.u * fv.vt;
  out.sigma = sigma_cat;
  return out;
}

Matrix merge_tsv(const Matrix& w0, const std::vector<Matrix>& deltas, double alpha,
                 double rank_fraction, std::vector<std::string>* warnings) {
  if (!deltas.empty() && (deltas[0].rows() != w0.rows() || deltas[0].cols() != w0.cols())) {
    throw std::invalid_argument("merge_tsv: delta shape differs from W0");
  }
  const TsvFactors f = tsv_pool_factors(deltas, rank_fraction, warnings);
  if (f.sigma.size() == 0) return w0;
  return w0 + alpha * (f.u_orth * f.sigma.asDiagonal() * f.v_orth.transpose());
}

namespace {

enum class TensorClass : std::uint8_t { merge2d, average, unhandled };

struct Classifier {
  std::vector<std::regex> always_average;
  std::vector<std::regex> merge2d;
  MergeConfig::Unmatched2d unmatched;

  explicit Classifier(const MergeConfig& cfg) : unmatched(cfg.unmatched_2d) {
    for (const auto& p : cfg.always_average_patterns) always_average.emplace_back(p);
    for (const auto& p : cfg.merge_2d_patterns) merge2d.emplace_back(p);
  }

  TensorClass classify(const std::string& name, const Tensor& t) const {
    if (!t.is_2d()) return TensorClass::average;
    for (const auto& re : always_average) {
      if (std::regex_search(name, re)) return TensorClass::average;
    }
    for (const auto& re : merge2d) {
      if (std::regex_search(name, re)) return TensorClass::merge2d;
    }
    switch (unmatched) {
      case MergeConfig::Unmatched2d::average: return TensorClass::average;
      case MergeConfig::Unmatched2d::error: return TensorClass::unhandled;
      case MergeConfig::Unmatched2d::merge: break;
    }
    return TensorClass::merge2d;
  }
};

Tensor average_tensor(const std::vector<const Tensor*>& experts, const Tensor& like) {
  std::vector<double> sum(like.element_count(), 0.0);
  for (const Tensor* t : experts) {
    const auto v = t->to_f64();
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
  }
  for (double& x : sum) x = x / static_cast<double>(experts.size());
  return Tensor::from_values(like.shape, sum, like.dtype);
}

}  // namespace

MergeOutcome merge(const TaskSet& ts, const MergeConfig& cfg) {
  if (ts.experts.empty()) throw std::invalid_argument("merge: need at least one expert");
  for (const Checkpoint& e : ts.experts) {
    const auto issues = architecture_mismatches(ts.pretrained, e);
    if (!issues.empty()) {
      std::ostringstream oss;
      oss << "merge: expert \"" << e.name << "\" is not architecture-compatible:";
      for (const auto& msg : issues) oss << " " << msg << ";";
      throw std::invalid_argument(oss.str());
    }
  }
  if (cfg.method == MergeMethod::regmean && ts.covariances.size() != ts.experts.size()) {
    throw std::invalid_argument("merge: regmean requires one covariance bundle per expert");
  }

  const Classifier classifier(cfg);
  const double alpha = cfg.effective_alpha();
  if (!std::isfinite(alpha)) throw std::invalid_argument("merge: alpha must be finite");
  const std::size_t t_count = ts.experts.size();

  MergeOutcome out;
  out.merged.name = "merged";
  std::vector<std::string> unhandled;

  for (const auto& [name, pre] : ts.pretrained.tensors) {
    std::vector<const Tensor*> expert_tensors;
    expert_tensors.reserve(t_count);
    for (const Checkpoint& e : ts.experts) expert_tensors.push_back(&e.tensors.at(name));

    const TensorClass cls = classifier.classify(name, pre);
    if (cls == TensorClass::unhandled) {
      unhandled.push_back(name);
      continue;
    }
    if (cls == TensorClass::average || pre.element_count() == 0) {
      out.merged.tensors.emplace(name, average_tensor(expert_tensors, pre));
      continue;
    }

    const Matrix w0 = pre.to_matrix();
    std::vector<Matrix> ws;
    ws.reserve(t_count);
    for (const Tensor* t : expert_tensors) ws.push_back(t->to_matrix());

    auto deltas = [&]() {
      std::vector<Matrix> d;
      d.reserve(t_count);
      for (const Matrix& w : ws) d.push_back(w - w0);
      return d;
    };

    Matrix result;
    switch (cfg.method) {
      case MergeMethod::average:
        result = merge_average(ws);
        break;
      case MergeMethod::task_arithmetic:
        result = merge_task_arithmetic(w0, deltas(), alpha);
        break;
      case MergeMethod::regmean: {
        std::vector<Matrix> cs;
        cs.reserve(t_count);
        for (std::size_t t = 0; t < t_count; ++t) {
          const auto& bundle = ts.covariances[t];
          auto it = bundle.layer_covs.find(name);
          if (it == bundle.layer_covs.end()) {
            throw std::invalid_argument("merge: covariance bundle for task \"" + bundle.task_id +
                                        "\" has no entry for tensor \"" + name + "\"");
          }
          if (it->second.rows() != w0.cols()) {
            throw std::invalid_argument("merge: covariance for tensor \"" + name +
                                        "\" does not match its input dimension");
          }
          cs.push_back(it->second);
        }
        result = merge_interference(ws, cs, cfg.pinv_rtol);
        break;
      }
      case MergeMethod::actmat: {
        const auto ds = deltas();
        bool all_zero = true;
        for (const Matrix& d : ds) {
          if (d.norm() != 0.0) {
            all_zero = false;
            break;
          }
        }
        if (all_zero) {
          out.warnings.push_back("actmat: all task deltas are zero for tensor \"" + name +
                                 "\"; averaged instead");
          result = merge_average(ws);
        } else {
          result = merge_actmat(ws, ds, cfg.pinv_rtol);
        }
        break;
      }
      case MergeMethod::iso_c:
        result = merge_iso_c(w0, deltas(), alpha);
        break;
      case MergeMethod::tsv:
        result = merge_tsv(w0, deltas(), alpha, cfg.tsv_rank_fraction, &out.warnings);
        break;
    }
    out.merged.tensors.emplace(name, Tensor::from_matrix(result, pre.dtype));
  }

  if (!unhandled.empty()) {
    std::ostringstream oss;
    oss << "merge: no classification rule matched 2D tensors:";
    for (const auto& n : unhandled) oss << " \"" << n << "\"";
    throw std::invalid_argument(oss.str());
  }
  return out;
}

}  // namespace covmerge
