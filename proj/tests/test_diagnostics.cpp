#include <cmath>

#include "covmerge/diagnostics.hpp"
#include "covmerge/rng.hpp"
#include "doctest.h"

using namespace covmerge;

namespace {

TrainTrace make_trace(double eta, std::vector<IterationRecord> records) {
  TrainTrace trace;
  trace.layer = "layers.0.weight";
  trace.eta = eta;
  trace.iterations = std::move(records);
  return trace;
}

}  // namespace

TEST_CASE("single-sample accumulators collapse to outer products") {
  Matrix z(1, 3), g(1, 2);
  z << 1.0, -2.0, 0.5;
  g << 0.25, -1.5;
  const TraceAccumulators acc = accumulate_trace(make_trace(0.1, {{z, g}}));
  const Matrix expected_gbar = g.transpose() * z;
  CHECK((acc.g_bar - expected_gbar).norm() == 0.0);
  const double gn2 = g.row(0).squaredNorm();
  const Matrix outer = z.row(0).transpose() * z.row(0);
  CHECK((acc.s_bar - gn2 * outer).norm() == 0.0);
  CHECK(acc.s_bar == acc.s_tilde);  // one sample: the decoupling is exact
  CHECK(acc.c_final == outer);
}

TEST_CASE("zero gradients zero out every accumulator") {
  Rng rng(70);
  const Matrix z = rng.matrix_normal(4, 3);
  const Matrix g = Matrix::Zero(4, 2);
  const TraceAccumulators acc = accumulate_trace(make_trace(0.1, {{z, g}, {z, g}}));
  CHECK(acc.g_bar.norm() == 0.0);
  CHECK(acc.s_bar.norm() == 0.0);
  CHECK(acc.s_tilde.norm() == 0.0);
  CHECK(acc.c_final.norm() > 0.0);
}

TEST_CASE("accumulators match a naive re-summation oracle") {
  Rng rng(71);
  std::vector<IterationRecord> records;
  for (int k = 0; k < 5; ++k) records.push_back({rng.matrix_normal(6, 4), rng.matrix_normal(6, 3)});
  const TraceAccumulators acc = accumulate_trace(make_trace(0.1, records));

  Matrix g_bar = Matrix::Zero(3, 4), s_bar = Matrix::Zero(4, 4), s_tilde = Matrix::Zero(4, 4);
  for (const auto& rec : records) {
    Matrix gk = Matrix::Zero(3, 4), sk = Matrix::Zero(4, 4), ck = Matrix::Zero(4, 4);
    double gn2_mean = 0.0;
    for (Eigen::Index b = 0; b < 6; ++b) {
      gk += rec.g.row(b).transpose() * rec.z.row(b) / 6.0;
      const double gn2 = rec.g.row(b).squaredNorm();
      sk += gn2 * (rec.z.row(b).transpose() * rec.z.row(b)) / 6.0;
      ck += rec.z.row(b).transpose() * rec.z.row(b) / 6.0;
      gn2_mean += gn2 / 6.0;
    }
    g_bar += gk;
    s_bar += sk;
    s_tilde += gn2_mean * ck;
  }
  CHECK((acc.g_bar - g_bar).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((acc.s_bar - s_bar).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((acc.s_tilde - s_tilde).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(accumulate_trace(make_trace(0.1, {})), std::invalid_argument);
}

TEST_CASE("a delta collinear with the accumulated gradient has zero gram angle") {
  Rng rng(72);
  std::vector<IterationRecord> records;
  for (int k = 0; k < 4; ++k) records.push_back({rng.matrix_normal(5, 3), rng.matrix_normal(5, 2)});
  const TraceAccumulators acc = accumulate_trace(make_trace(0.2, records));
  const Matrix delta = -0.2 * acc.g_bar;
  CHECK(angular_distance(actmat_gram(delta), Matrix(acc.g_bar.transpose() * acc.g_bar)) <= 1e-10);
}

TEST_CASE("the triangle bound holds on a toy training trace") {
  ScenarioOptions opts;
  opts.eta = 0.05;
  opts.last_iter = 30;
  const ToyScenario sc = generate_scenario(73, 1, {4, 6, 3}, opts);
  const std::string layer = sc.arch.weight_name(1);
  const TrainResult tr = train_full_batch(sc, 0, {layer});
  const TrainTrace& trace = tr.traces.at(layer);
  const Matrix delta = trace.weight_snapshots.back() - trace.weight_snapshots.front();
  const ErrorReport rep = trace_error_report(accumulate_trace(trace), delta);
  CHECK(!rep.degenerate);
  CHECK(rep.bound_satisfied);
  CHECK(rep.lhs_angle <= rep.eps_cross + rep.eps_corr + rep.eps_drift + 1e-9);
  REQUIRE(rep.drift_trajectory.size() == trace.iterations.size());
  CHECK(rep.drift_trajectory.back() == 0.0);  // angle of the final moment with itself
}

TEST_CASE("zero-norm statistics produce a degenerate report, not a crash") {
  Matrix z = Matrix::Zero(2, 3);
  Matrix g = Matrix::Zero(2, 2);
  const TraceAccumulators acc = accumulate_trace(make_trace(0.1, {{z, g}}));
  const ErrorReport rep = trace_error_report(acc, Matrix::Zero(2, 3));
  CHECK(rep.degenerate);
  CHECK(!rep.bound_satisfied);
}

TEST_CASE("report angles are invariant to a joint gradient and delta rescaling") {
  Rng rng(74);
  std::vector<IterationRecord> records, scaled;
  for (int k = 0; k < 3; ++k) {
    const Matrix z = rng.matrix_normal(5, 4);
    const Matrix g = rng.matrix_normal(5, 3);
    records.push_back({z, g});
    scaled.push_back({z, Matrix(2.5 * g)});
  }
  const TraceAccumulators acc = accumulate_trace(make_trace(0.1, records));
  const TraceAccumulators acc2 = accumulate_trace(make_trace(0.1, scaled));
  const Matrix delta = -0.1 * acc.g_bar;
  const Matrix delta2 = 2.5 * delta;
  const ErrorReport a = trace_error_report(acc, delta);
  const ErrorReport b = trace_error_report(acc2, delta2);
  CHECK(a.eps_cross == doctest::Approx(b.eps_cross).epsilon(1e-9));
  CHECK(a.eps_corr == doctest::Approx(b.eps_corr).epsilon(1e-9));
  CHECK(a.eps_drift == doctest::Approx(b.eps_drift).epsilon(1e-9));
  CHECK(a.lhs_angle == doctest::Approx(b.lhs_angle).epsilon(1e-9));
}

TEST_CASE("constant gradient norms skip every correlation entry") {
  Matrix z(3, 2), g(3, 2);
  z << 1, 2, 3, 4, 5, 6;
  g << 1, 0, 1, 0, 1, 0;  // identical norm for every sample
  const PearsonSummary s = pearson_activation_gradnorm(make_trace(0.1, {{z, g}}));
  CHECK(s.total_entries == 4);
  CHECK(s.skipped == 4);
  CHECK(s.abs_values.empty());
}

TEST_CASE("an engineered perfect correlation is reported as one") {
  Rng rng(75);
  Matrix z(8, 2), g(8, 1);
  for (int b = 0; b < 8; ++b) {
    z(b, 0) = rng.uniform(0.5, 2.0);
    z(b, 1) = rng.uniform(-1.0, 1.0);
    g(b, 0) = z(b, 0);  // |g|^2 == z_0^2 exactly
  }
  const PearsonSummary s = pearson_activation_gradnorm(make_trace(0.1, {{z, g}}));
  CHECK(s.max == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(pearson_activation_gradnorm(make_trace(0.1, {{z.topRows(1), g.topRows(1)}})),
                  std::invalid_argument);
}

TEST_CASE("correlation summary matches direct recomputation") {
  Rng rng(76);
  const Matrix z = rng.matrix_normal(12, 3);
  const Matrix g = rng.matrix_normal(12, 2);
  const PearsonSummary s = pearson_activation_gradnorm(make_trace(0.1, {{z, g}}));
  REQUIRE(s.abs_values.size() == 9);
  std::vector<double> gn2;
  for (int b = 0; b < 12; ++b) gn2.push_back(g.row(b).squaredNorm());
  std::size_t idx = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      std::vector<double> series;
      for (int b = 0; b < 12; ++b) series.push_back(z(b, i) * z(b, j));
      CHECK(s.abs_values[idx++] ==
            doctest::Approx(std::abs(pearson(series, gn2))).epsilon(1e-12));
    }
  }
}

namespace {

struct TransferFixture {
  ToyScenario sc;
  TaskSet ts;
  std::vector<CovarianceBundle> covs_true, covs_hat;

  explicit TransferFixture(std::uint64_t seed) {
    ScenarioOptions opts;
    opts.batch = 16;
    opts.eta = 0.05;
    opts.last_iter = 20;
    opts.activation = Activation::tanh;
    sc = generate_scenario(seed, 2, {3, 5, 2}, opts);
    ts.pretrained = pretrained_checkpoint(sc);
    for (int t = 0; t < 2; ++t) ts.experts.push_back(train_full_batch(sc, t, {}).checkpoint);
    for (int t = 0; t < 2; ++t) {
      const auto cap = forward_collect(sc.arch, ts.experts[t], sc.tasks[t].inputs);
      std::map<std::string, Matrix> samples;
      for (std::size_t l = 0; l < sc.arch.linear_count(); ++l) {
        samples.emplace(sc.arch.weight_name(l), cap.linear_inputs[l]);
      }
      covs_true.push_back(empirical_bundle("t" + std::to_string(t), samples));
      covs_hat.push_back(
          actmat_bundle(compute_task_vector(ts.pretrained, ts.experts[t], "t" + std::to_string(t))));
    }
  }

  Checkpoint merged_with(const std::vector<CovarianceBundle>& covs) const {
    MergeConfig cfg;
    cfg.method = MergeMethod::regmean;
    TaskSet with = ts;
    with.covariances = covs;
    return merge(with, cfg).merged;
  }
};

}  // namespace

TEST_CASE("exact covariance estimates zero the covariance term") {
  const TransferFixture fx(80);
  const Checkpoint merged = fx.merged_with(fx.covs_true);
  const TransferBoundReport rep = negative_transfer_bound(
      fx.sc.arch, merged, fx.ts, fx.covs_true, fx.covs_true, 0, fx.sc.tasks[0].inputs,
      LossKind::output_norm);
  CHECK(rep.covariance_term == 0.0);
  CHECK(rep.holds);
}

TEST_CASE("evaluating an expert against itself gives zero negative transfer") {
  const TransferFixture fx(81);
  const TransferBoundReport rep = negative_transfer_bound(
      fx.sc.arch, fx.ts.experts[1], fx.ts, fx.covs_true, fx.covs_hat, 1, fx.sc.tasks[1].inputs,
      LossKind::output_norm);
  CHECK(rep.expected == 0.0);
  CHECK(rep.holds);
}

TEST_CASE("the transfer bound holds for a data-free merge of a toy network") {
  for (std::uint64_t seed : {82, 83, 84}) {
    const TransferFixture fx(seed);
    const Checkpoint merged = fx.merged_with(fx.covs_hat);
    for (std::size_t task = 0; task < 2; ++task) {
      const TransferBoundReport rep = negative_transfer_bound(
          fx.sc.arch, merged, fx.ts, fx.covs_true, fx.covs_hat, task,
          fx.sc.tasks[task].inputs, LossKind::output_norm);
      CHECK(rep.holds);
      CHECK(rep.beta == 1.0);
      CHECK(!rep.beta_is_estimate);
      CHECK(rep.gamma.size() == 3);  // linear, activation, linear
      CHECK(rep.gamma[1] == 1.0);
    }
  }
}

TEST_CASE("mse losses mark the Lipschitz constant as an estimate") {
  const TransferFixture fx(85);
  const Checkpoint merged = fx.merged_with(fx.covs_hat);
  const TransferBoundReport rep = negative_transfer_bound(
      fx.sc.arch, merged, fx.ts, fx.covs_true, fx.covs_hat, 0, fx.sc.tasks[0].inputs,
      LossKind::mse, &fx.sc.tasks[0].targets);
  CHECK(rep.beta_is_estimate);
  CHECK(rep.beta > 0.0);
  CHECK_THROWS_AS(negative_transfer_bound(fx.sc.arch, merged, fx.ts, fx.covs_true, fx.covs_hat, 0,
                                          fx.sc.tasks[0].inputs, LossKind::mse, nullptr),
                  std::invalid_argument);
}

TEST_CASE("cosine diagnostics compare the estimate against the identity baseline") {
  Rng rng(86);
  CovarianceBundle emp, est;
  emp.task_id = est.task_id = "t";
  const Matrix c = actmat_gram(rng.matrix_normal(6, 4)) + 0.05 * Matrix::Identity(4, 4);
  emp.layer_covs.emplace("w", c);
  est.layer_covs.emplace("w", Matrix(1.7 * c));  // perfectly aligned estimate
  const auto rows = covariance_cosine_report(est, emp);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].cos_estimate == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rows[0].cos_identity < rows[0].cos_estimate);
  CHECK_THROWS_AS(frobenius_cosine(Matrix::Zero(2, 2), c), std::invalid_argument);
}
