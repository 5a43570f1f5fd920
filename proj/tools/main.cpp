#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "covmerge/config.hpp"
#include "covmerge/costmodel.hpp"
#include "covmerge/cov.hpp"
#include "covmerge/diagnostics.hpp"
#include "covmerge/merge.hpp"
#include "covmerge/tensor_store.hpp"
#include "covmerge/toy.hpp"
#include "covmerge/verify.hpp"

namespace fs = std::filesystem;
using namespace covmerge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitInputFormat = 3;
constexpr int kExitNumerical = 4;
constexpr int kExitVerification = 5;

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string token;
  std::istringstream in(csv);
  while (std::getline(in, token, ',')) {
    const auto begin = token.find_first_not_of(" \t");
    if (begin == std::string::npos) continue;
    const auto end = token.find_last_not_of(" \t");
    out.push_back(token.substr(begin, end - begin + 1));
  }
  return out;
}

std::vector<int> parse_widths(const std::string& csv) {
  std::vector<int> widths;
  for (const auto& tok : split_list(csv)) widths.push_back(std::stoi(tok));
  return widths;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file: " + path.string());
  out << text;
  if (!out.good()) throw std::runtime_error("write failure: " + path.string());
}

// ---------------------------------------------------------------- flops --

struct FlopsArgs {
  std::string method;
  std::int64_t t = 1, n = 1, l = 1;
  bool preprocess = false;
};

int run_flops(const FlopsArgs& args) {
  FlopModel model;
  model.method = merge_method_from_string(args.method);
  model.t = args.t;
  model.n = args.n;
  model.l = args.l;
  const FlopCount count = flops(model);
  std::printf("%lld\n",
              static_cast<long long>(args.preprocess ? count.preprocess_flops : count.merge_flops));
  return kExitOk;
}

// ---------------------------------------------------------------- merge --

struct MergeArgs {
  std::string config_path;
  std::string method;
  double alpha = std::numeric_limits<double>::quiet_NaN();
  std::string pretrained;
  std::string experts_csv;
  std::string covariances_csv;
  std::string out;
  double pinv_rtol = 0.0;
  double tsv_rank_fraction = 0.0;
  std::string always_average_csv;
  std::string merge_2d_csv;
  std::string unmatched_2d;
};

int run_merge(const MergeArgs& args, CLI::App* sub) {
  RunConfig file;
  if (!args.config_path.empty()) file = RunConfig::load(args.config_path);

  const std::string pretrained =
      args.pretrained.empty() ? file.get_or("merge.pretrained", "") : args.pretrained;
  const std::string out_path = args.out.empty() ? file.get_or("merge.out", "") : args.out;
  const std::vector<std::string> experts = args.experts_csv.empty()
                                               ? file.get_list("merge.experts")
                                               : split_list(args.experts_csv);
  if (pretrained.empty() || out_path.empty() || experts.empty()) {
    std::cerr << "error: merge needs a pretrained checkpoint, at least one expert and an output path\n"
              << sub->help() << std::flush;
    return kExitUsage;
  }

  MergeConfig cfg;
  cfg.method = merge_method_from_string(
      !args.method.empty() ? args.method : file.get_or("merge.method", "average"));
  if (!std::isnan(args.alpha)) {
    cfg.alpha = args.alpha;
  } else if (file.has("merge.alpha")) {
    cfg.alpha = file.get_double("merge.alpha", 0.0);
  }
  cfg.pinv_rtol = args.pinv_rtol > 0.0 ? args.pinv_rtol : file.get_double("merge.pinv_rtol", 0.0);
  cfg.tsv_rank_fraction = args.tsv_rank_fraction > 0.0
                              ? args.tsv_rank_fraction
                              : file.get_double("merge.tsv_rank_fraction", 1.0);
  if (!args.always_average_csv.empty()) {
    cfg.always_average_patterns = split_list(args.always_average_csv);
  } else if (file.has("merge.always_average")) {
    cfg.always_average_patterns = file.get_list("merge.always_average");
  }
  if (!args.merge_2d_csv.empty()) {
    cfg.merge_2d_patterns = split_list(args.merge_2d_csv);
  } else if (file.has("merge.merge_2d")) {
    cfg.merge_2d_patterns = file.get_list("merge.merge_2d");
  }
  const std::string unmatched =
      !args.unmatched_2d.empty() ? args.unmatched_2d : file.get_or("merge.unmatched_2d", "merge");
  if (unmatched == "merge") {
    cfg.unmatched_2d = MergeConfig::Unmatched2d::merge;
  } else if (unmatched == "average") {
    cfg.unmatched_2d = MergeConfig::Unmatched2d::average;
  } else if (unmatched == "error") {
    cfg.unmatched_2d = MergeConfig::Unmatched2d::error;
  } else {
    throw std::invalid_argument("unmatched-2d must be merge, average or error");
  }

  TaskSet ts;
  ts.pretrained = load_checkpoint(pretrained);
  for (const auto& path : experts) ts.experts.push_back(load_checkpoint(path));
  const std::vector<std::string> cov_paths = args.covariances_csv.empty()
                                                 ? file.get_list("merge.covariances")
                                                 : split_list(args.covariances_csv);
  for (const auto& path : cov_paths) {
    ts.covariances.push_back(bundle_from_container(load_checkpoint(path)));
  }

  const MergeOutcome outcome = merge(ts, cfg);
  for (const auto& w : outcome.warnings) std::cerr << "warning: " << w << "\n";
  save_checkpoint(outcome.merged, out_path);
  std::cerr << "merged " << outcome.merged.tensors.size() << " tensors with "
            << merge_method_name(cfg.method) << " -> " << out_path << "\n";
  return kExitOk;
}

// ------------------------------------------------------------- train-toy --

struct TrainToyArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  int tasks = 3;
  std::string widths_csv = "6,12";
  int batch = 32;
  double eta = 0.05;
  int steps = 40;
  std::string activation = "tanh";
  std::string loss = "mse";
  double noise = 0.01;
  std::string capture = "all";
  int cov_samples = 300;
  std::string out_dir;
};

int run_train_toy(const TrainToyArgs& args, CLI::App* sub) {
  if (args.out_dir.empty()) {
    std::cerr << "error: train-toy needs --out-dir\n" << sub->help() << std::flush;
    return kExitUsage;
  }
  ToyScenario sc;
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw FormatError("cannot open config file: " + args.config_path);
    std::ostringstream oss;
    oss << in.rdbuf();
    sc = scenario_from_config(oss.str());
  } else {
    ScenarioOptions opts;
    opts.batch = args.batch;
    opts.eta = args.eta;
    opts.last_iter = args.steps - 1;
    opts.activation = activation_from_string(args.activation);
    opts.loss = loss_from_string(args.loss);
    opts.noise_sigma = args.noise;
    sc = generate_scenario(args.seed, args.tasks, parse_widths(args.widths_csv), opts);
  }

  fs::create_directories(args.out_dir);
  const fs::path dir(args.out_dir);
  write_text(dir / "scenario.cfg", scenario_to_config(sc));
  const Checkpoint pre = pretrained_checkpoint(sc);
  save_checkpoint(pre, dir / "pretrained.ckpt.st");

  std::set<std::string> capture_layers;
  if (args.capture == "all") {
    for (const auto& name : sc.arch.weight_names()) capture_layers.insert(name);
  } else {
    for (const auto& name : split_list(args.capture)) capture_layers.insert(name);
  }

  std::printf("task,final_loss\n");
  for (int t = 0; t < sc.num_tasks; ++t) {
    const TrainResult tr = train_full_batch(sc, t, capture_layers);
    const std::string tag = std::to_string(t);
    save_checkpoint(tr.checkpoint, dir / ("expert-" + tag + ".ckpt.st"));
    if (!tr.traces.empty()) {
      save_checkpoint(traces_to_container(tr.traces), dir / ("traces-" + tag + ".ckpt.st"));
    }
    const TaskVector tv = compute_task_vector(pre, tr.checkpoint, "task-" + tag);
    save_checkpoint(bundle_to_container(actmat_bundle(tv)),
                    dir / ("cov-actmat-" + tag + ".ckpt.st"));
    // Estimator-quality bundles come from fresh draws of the task's input
    // distribution (300 by default), not the training batch.
    const Matrix fresh = sample_task_inputs(sc, t, args.cov_samples);
    const auto cap = forward_collect(sc.arch, tr.checkpoint, fresh);
    std::map<std::string, Matrix> samples;
    for (std::size_t l = 0; l < sc.arch.linear_count(); ++l) {
      samples.emplace(sc.arch.weight_name(l), cap.linear_inputs[l]);
    }
    save_checkpoint(bundle_to_container(empirical_bundle("task-" + tag, samples)),
                    dir / ("cov-empirical-" + tag + ".ckpt.st"));
    std::printf("%d,%.17g\n", t,
                mean_loss(sc.arch, tr.checkpoint, sc.tasks[static_cast<std::size_t>(t)], sc.loss));
  }
  std::cerr << "wrote scenario, checkpoints, traces and covariance bundles to " << args.out_dir
            << "\n";
  return kExitOk;
}

// -------------------------------------------------------------- diagnose --

struct DiagnoseArgs {
  std::string report;
  std::string traces;
  std::string layer;
  std::string pretrained;
  std::string expert;
  std::string empirical_csv;
  std::string actmat_csv;
  std::string scenario;
  std::string merged;
  int task = 0;
  std::string loss = "output_norm";
  std::string csv_path;
};

int run_diagnose_angles(const DiagnoseArgs& args) {
  const auto traces = traces_from_container(load_checkpoint(args.traces));
  const Checkpoint pre = load_checkpoint(args.pretrained);
  const Checkpoint expert = load_checkpoint(args.expert);
  std::ostringstream csv;
  csv << "layer,k,drift_angle,eps_cross,eps_corr,eps_drift,lhs_angle,bound_satisfied,degenerate\n";
  for (const auto& [layer, trace] : traces) {
    if (!args.layer.empty() && layer != args.layer) continue;
    if (!expert.tensors.contains(layer) || !pre.tensors.contains(layer) ||
        expert.tensors.at(layer).shape != pre.tensors.at(layer).shape) {
      throw std::invalid_argument("checkpoints have no matching tensor \"" + layer +
                                  "\" for the trace");
    }
    const Matrix delta = expert.tensors.at(layer).to_matrix() - pre.tensors.at(layer).to_matrix();
    const ErrorReport rep = trace_error_report(accumulate_trace(trace), delta);
    std::printf(
        "angles layer=%s eps_cross=%.12g eps_corr=%.12g eps_drift=%.12g lhs_angle=%.12g "
        "bound_satisfied=%d degenerate=%d\n",
        layer.c_str(), rep.eps_cross, rep.eps_corr, rep.eps_drift, rep.lhs_angle,
        rep.bound_satisfied ? 1 : 0, rep.degenerate ? 1 : 0);
    for (std::size_t k = 0; k < rep.drift_trajectory.size(); ++k) {
      std::printf("angles-drift layer=%s k=%zu angle=%.12g\n", layer.c_str(), k,
                  rep.drift_trajectory[k]);
      csv << layer << ',' << k << ',' << rep.drift_trajectory[k] << ',' << rep.eps_cross << ','
          << rep.eps_corr << ',' << rep.eps_drift << ',' << rep.lhs_angle << ','
          << (rep.bound_satisfied ? 1 : 0) << ',' << (rep.degenerate ? 1 : 0) << '\n';
    }
  }
  if (!args.csv_path.empty()) write_text(args.csv_path, csv.str());
  return kExitOk;
}

int run_diagnose_kappa(const DiagnoseArgs& args) {
  std::vector<CovarianceBundle> emp, act;
  for (const auto& p : split_list(args.empirical_csv)) {
    emp.push_back(bundle_from_container(load_checkpoint(p)));
  }
  for (const auto& p : split_list(args.actmat_csv)) {
    act.push_back(bundle_from_container(load_checkpoint(p)));
  }
  const KappaReport report = kappa_ratio_table(emp, act);
  std::ostringstream csv;
  csv << "layer,task_i,task_j,kappa_i,kappa_j,ratio\n";
  for (const auto& e : report.entries) {
    std::printf("kappa layer=%s task_i=%s task_j=%s kappa_i=%.12g kappa_j=%.12g ratio=%.12g\n",
                e.layer.c_str(), e.task_i.c_str(), e.task_j.c_str(), e.kappa_i, e.kappa_j, e.ratio);
    csv << e.layer << ',' << e.task_i << ',' << e.task_j << ',' << e.kappa_i << ',' << e.kappa_j
        << ',' << e.ratio << '\n';
  }
  for (const auto& s : report.layer_summaries) {
    std::printf("kappa-summary layer=%s min=%.12g q25=%.12g median=%.12g q75=%.12g max=%.12g\n",
                s.layer.c_str(), s.min, s.q25, s.median, s.q75, s.max);
  }
  if (!args.csv_path.empty()) write_text(args.csv_path, csv.str());
  return kExitOk;
}

int run_diagnose_pearson(const DiagnoseArgs& args) {
  const auto traces = traces_from_container(load_checkpoint(args.traces));
  std::ostringstream csv;
  csv << "layer,index,abs_pearson\n";
  for (const auto& [layer, trace] : traces) {
    if (!args.layer.empty() && layer != args.layer) continue;
    const PearsonSummary s = pearson_activation_gradnorm(trace);
    std::printf(
        "pearson layer=%s entries=%zu skipped=%zu min=%.12g q25=%.12g median=%.12g q75=%.12g "
        "max=%.12g\n",
        layer.c_str(), s.total_entries, s.skipped, s.min, s.q25, s.median, s.q75, s.max);
    for (std::size_t i = 0; i < s.abs_values.size(); ++i) {
      csv << layer << ',' << i << ',' << s.abs_values[i] << '\n';
    }
  }
  if (!args.csv_path.empty()) write_text(args.csv_path, csv.str());
  return kExitOk;
}

int run_diagnose_cosine(const DiagnoseArgs& args) {
  const auto emp_paths = split_list(args.empirical_csv);
  const auto act_paths = split_list(args.actmat_csv);
  if (emp_paths.size() != act_paths.size()) {
    throw std::invalid_argument("cosine report needs aligned --empirical and --actmat lists");
  }
  std::ostringstream csv;
  csv << "task,layer,cos_estimate,cos_identity\n";
  for (std::size_t i = 0; i < emp_paths.size(); ++i) {
    const CovarianceBundle emp = bundle_from_container(load_checkpoint(emp_paths[i]));
    const CovarianceBundle act = bundle_from_container(load_checkpoint(act_paths[i]));
    for (const auto& row : covariance_cosine_report(act, emp)) {
      std::printf("cosine task=%s layer=%s cos_estimate=%.12g cos_identity=%.12g\n",
                  emp.task_id.c_str(), row.layer.c_str(), row.cos_estimate, row.cos_identity);
      csv << emp.task_id << ',' << row.layer << ',' << row.cos_estimate << ',' << row.cos_identity
          << '\n';
    }
  }
  if (!args.csv_path.empty()) write_text(args.csv_path, csv.str());
  return kExitOk;
}

int run_diagnose_transfer(const DiagnoseArgs& args) {
  std::ifstream in(args.scenario);
  if (!in) throw FormatError("cannot open scenario config: " + args.scenario);
  std::ostringstream buf;
  buf << in.rdbuf();
  const ToyScenario sc = scenario_from_config(buf.str());
  if (args.task < 0 || args.task >= sc.num_tasks) {
    throw std::invalid_argument("task index out of range");
  }
  const auto task = static_cast<std::size_t>(args.task);

  TaskSet ts;
  ts.pretrained = pretrained_checkpoint(sc);
  std::vector<CovarianceBundle> covs_true, covs_hat;
  for (int t = 0; t < sc.num_tasks; ++t) {
    ts.experts.push_back(train_full_batch(sc, t, {}).checkpoint);
  }
  for (int t = 0; t < sc.num_tasks; ++t) {
    const auto& expert = ts.experts[static_cast<std::size_t>(t)];
    const auto cap = forward_collect(sc.arch, expert, sc.tasks[static_cast<std::size_t>(t)].inputs);
    std::map<std::string, Matrix> samples;
    for (std::size_t l = 0; l < sc.arch.linear_count(); ++l) {
      samples.emplace(sc.arch.weight_name(l), cap.linear_inputs[l]);
    }
    covs_true.push_back(empirical_bundle("task-" + std::to_string(t), samples));
    covs_hat.push_back(
        actmat_bundle(compute_task_vector(ts.pretrained, expert, "task-" + std::to_string(t))));
  }

  Checkpoint merged;
  if (!args.merged.empty()) {
    merged = load_checkpoint(args.merged);
  } else {
    MergeConfig cfg;
    cfg.method = MergeMethod::regmean;  // interference rule on the data-free estimates
    TaskSet with_covs = ts;
    with_covs.covariances = covs_hat;
    merged = merge(with_covs, cfg).merged;
  }

  const LossKind loss = loss_from_string(args.loss);
  const Matrix* targets = loss == LossKind::mse ? &sc.tasks[task].targets : nullptr;
  const TransferBoundReport rep = negative_transfer_bound(
      sc.arch, merged, ts, covs_true, covs_hat, task, sc.tasks[task].inputs, loss, targets);
  std::printf(
      "transfer task=%d expected=%.12g bound=%.12g holds=%d beta=%.12g beta_estimate=%d "
      "interference_term=%.12g covariance_term=%.12g\n",
      args.task, rep.expected, rep.bound, rep.holds ? 1 : 0, rep.beta,
      rep.beta_is_estimate ? 1 : 0, rep.interference_term, rep.covariance_term);
  std::ostringstream csv;
  csv << "task,layer,local_error,zeta_tilde,kappa_w,kappa_s_dagger,expected,bound,holds\n";
  for (std::size_t l = 0; l < rep.linear_layers.size(); ++l) {
    std::printf(
        "transfer-layer task=%d layer=%s local_error=%.12g zeta_tilde=%.12g kappa_w=%.12g "
        "kappa_s_dagger=%.12g\n",
        args.task, rep.linear_layers[l].c_str(), rep.local_error[l], rep.zeta_tilde[l],
        rep.kappa_w[l], rep.kappa_s_dagger[l]);
    csv << args.task << ',' << rep.linear_layers[l] << ',' << rep.local_error[l] << ','
        << rep.zeta_tilde[l] << ',' << rep.kappa_w[l] << ',' << rep.kappa_s_dagger[l] << ','
        << rep.expected << ',' << rep.bound << ',' << (rep.holds ? 1 : 0) << '\n';
  }
  if (!args.csv_path.empty()) write_text(args.csv_path, csv.str());
  return kExitOk;
}

int run_diagnose(const DiagnoseArgs& args) {
  if (args.report == "angles") return run_diagnose_angles(args);
  if (args.report == "kappa") return run_diagnose_kappa(args);
  if (args.report == "pearson") return run_diagnose_pearson(args);
  if (args.report == "cosine") return run_diagnose_cosine(args);
  if (args.report == "transfer") return run_diagnose_transfer(args);
  throw std::invalid_argument("unknown report \"" + args.report +
                              "\" (expected angles, kappa, pearson, cosine or transfer)");
}

// ---------------------------------------------------------------- verify --

int run_verify(std::uint64_t seed) {
  bool all_pass = true;
  for (const auto& r : verify::run_verification(seed)) {
    std::printf("%s %s - %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all_pass = all_pass && r.passed;
  }
  return all_pass ? kExitOk : kExitVerification;
}

// ----------------------------------------------------------------- bench --

struct BenchArgs {
  std::int64_t n = 64;
  std::int64_t t = 4;
  std::string methods_csv = "average,task_arithmetic,actmat,iso_c,tsv";
  int repeats = 5;
  std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& args) {
  const TaskSet ts = synthetic_task_set(args.n, args.t, args.seed);
  const auto rows = bench(ts, split_list(args.methods_csv), args.repeats);
  std::fputs(bench_csv(rows, args.t, args.n).c_str(), stdout);
  std::cerr << "note: at matched asymptotics actmat is expected cheaper than tsv/regmean; it "
               "needs 1 sequential SVD/inverse per layer where tsv needs T+2\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"covmerge - data-free model merging, diagnostics and cost modeling"};
  app.require_subcommand(1);

  FlopsArgs flops_args;
  CLI::App* flops_cmd = app.add_subcommand("flops", "Evaluate the per-layer merge cost model");
  flops_cmd
      ->add_option("--method", flops_args.method,
                   "average|task_arithmetic|regmean|actmat|iso_c|tsv")
      ->required();
  flops_cmd->add_option("--t", flops_args.t, "number of tasks")->required();
  flops_cmd->add_option("--n", flops_args.n, "layer dimension")->required();
  flops_cmd->add_option("--l", flops_args.l, "covariance sample count (regmean preprocessing)");
  flops_cmd->add_flag("--preprocess", flops_args.preprocess, "print preprocessing flops instead");

  MergeArgs merge_args;
  CLI::App* merge_cmd = app.add_subcommand("merge", "Merge expert checkpoints");
  merge_cmd->add_option("--config", merge_args.config_path, "key-value config file");
  merge_cmd->add_option("--method", merge_args.method, "merge rule");
  merge_cmd->add_option("--alpha", merge_args.alpha, "scaling coefficient");
  merge_cmd->add_option("--pretrained", merge_args.pretrained, "pretrained checkpoint path");
  merge_cmd->add_option("--experts", merge_args.experts_csv, "comma-separated expert checkpoints");
  merge_cmd->add_option("--covariances", merge_args.covariances_csv,
                        "comma-separated covariance bundle files (regmean)");
  merge_cmd->add_option("--out", merge_args.out, "output checkpoint path");
  merge_cmd->add_option("--pinv-rtol", merge_args.pinv_rtol, "pseudoinverse rank threshold");
  merge_cmd->add_option("--tsv-rank-fraction", merge_args.tsv_rank_fraction, "tsv rank fraction");
  merge_cmd->add_option("--always-average", merge_args.always_average_csv,
                        "name patterns always averaged");
  merge_cmd->add_option("--merge-2d", merge_args.merge_2d_csv, "name patterns merged as matrices");
  merge_cmd->add_option("--unmatched-2d", merge_args.unmatched_2d,
                        "policy for unmatched 2D tensors: merge|average|error");

  TrainToyArgs toy_args;
  CLI::App* toy_cmd = app.add_subcommand("train-toy", "Train toy experts and capture traces");
  toy_cmd->add_option("--config", toy_args.config_path, "scenario config file");
  toy_cmd->add_option("--seed", toy_args.seed, "scenario seed");
  toy_cmd->add_option("--tasks", toy_args.tasks, "number of tasks");
  toy_cmd->add_option("--widths", toy_args.widths_csv, "layer widths, e.g. 6,12");
  toy_cmd->add_option("--batch", toy_args.batch, "samples per task");
  toy_cmd->add_option("--eta", toy_args.eta, "learning rate");
  toy_cmd->add_option("--steps", toy_args.steps, "gradient steps");
  toy_cmd->add_option("--activation", toy_args.activation, "identity|relu|tanh");
  toy_cmd->add_option("--loss", toy_args.loss, "mse|output_norm");
  toy_cmd->add_option("--noise", toy_args.noise, "label noise sigma");
  toy_cmd->add_option("--capture", toy_args.capture, "layers to trace (all or csv of names)");
  toy_cmd->add_option("--cov-samples", toy_args.cov_samples,
                      "samples for the empirical covariance bundles");
  toy_cmd->add_option("--out-dir", toy_args.out_dir, "output directory");

  DiagnoseArgs diag_args;
  CLI::App* diag_cmd = app.add_subcommand("diagnose", "Estimator and bound diagnostics");
  diag_cmd->add_option("--report", diag_args.report, "angles|kappa|pearson|cosine|transfer")
      ->required();
  diag_cmd->add_option("--traces", diag_args.traces, "trace container file");
  diag_cmd->add_option("--layer", diag_args.layer, "restrict to one layer");
  diag_cmd->add_option("--pretrained", diag_args.pretrained, "pretrained checkpoint");
  diag_cmd->add_option("--expert", diag_args.expert, "fine-tuned checkpoint");
  diag_cmd->add_option("--empirical", diag_args.empirical_csv, "empirical covariance bundles");
  diag_cmd->add_option("--actmat", diag_args.actmat_csv, "data-free covariance bundles");
  diag_cmd->add_option("--scenario", diag_args.scenario, "scenario config (transfer)");
  diag_cmd->add_option("--merged", diag_args.merged, "merged checkpoint (transfer)");
  diag_cmd->add_option("--task", diag_args.task, "evaluation task index (transfer)");
  diag_cmd->add_option("--loss", diag_args.loss, "output_norm|mse (transfer)");
  diag_cmd->add_option("--csv", diag_args.csv_path, "CSV export path");

  std::uint64_t verify_seed = 0;
  CLI::App* verify_cmd = app.add_subcommand("verify", "Run the full invariant suite");
  verify_cmd->add_option("--seed", verify_seed, "suite seed");

  BenchArgs bench_args;
  CLI::App* bench_cmd = app.add_subcommand("bench", "Wall-clock merge benchmark");
  bench_cmd->add_option("--n", bench_args.n, "layer dimension");
  bench_cmd->add_option("--t", bench_args.t, "number of tasks");
  bench_cmd->add_option("--methods", bench_args.methods_csv, "comma-separated methods");
  bench_cmd->add_option("--repeats", bench_args.repeats, "repeats per method");
  bench_cmd->add_option("--seed", bench_args.seed, "synthetic data seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << "usage: covmerge {merge|diagnose|train-toy|verify|bench|flops} [options]\n";
    return kExitUsage;
  }

  try {
    if (flops_cmd->parsed()) return run_flops(flops_args);
    if (merge_cmd->parsed()) return run_merge(merge_args, merge_cmd);
    if (toy_cmd->parsed()) return run_train_toy(toy_args, toy_cmd);
    if (diag_cmd->parsed()) return run_diagnose(diag_args);
    if (verify_cmd->parsed()) return run_verify(verify_seed);
    if (bench_cmd->parsed()) return run_bench(bench_args);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputFormat;
  } catch (...) {
    std::cerr << "error: unknown failure\n";
    return kExitNumerical;
  }
  return kExitUsage;
}
