#include "covmerge/toy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "covmerge/config.hpp"
#include "covmerge/rng.hpp"

namespace covmerge {

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation \"" + s + "\"");
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  throw std::invalid_argument("unknown activation");
}

LossKind loss_from_string(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "output_norm") return LossKind::output_norm;
  throw std::invalid_argument("unknown loss \"" + s + "\"");
}

std::string loss_name(LossKind l) {
  return l == LossKind::mse ? "mse" : "output_norm";
}

std::string Architecture::weight_name(std::size_t i) const {
  return "layers." + std::to_string(i) + ".weight";
}

std::vector<std::string> Architecture::weight_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < linear_count(); ++i) names.push_back(weight_name(i));
  return names;
}

namespace {

void validate_widths(const std::vector<int>& widths) {
  if (widths.size() < 2) {
    throw std::invalid_argument("architecture needs at least an input and an output width");
  }
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("layer widths must be positive");
  }
}

Matrix apply_activation(const Matrix& y, Activation a) {
  switch (a) {
    case Activation::identity: return y;
    case Activation::relu: return y.cwiseMax(0.0);
    case Activation::tanh: return y.array().tanh().matrix();
  }
  throw std::invalid_argument("unknown activation");
}

Matrix activation_derivative(const Matrix& y, Activation a) {
  switch (a) {
    case Activation::identity: return Matrix::Ones(y.rows(), y.cols());
    case Activation::relu:
      return (y.array() > 0.0).cast<double>().matrix();
    case Activation::tanh: {
      const Matrix t = y.array().tanh().matrix();
      return (1.0 - t.array().square()).matrix();
    }
  }
  throw std::invalid_argument("unknown activation");
}

std::vector<Matrix> random_mlp_weights(const std::vector<int>& widths, Rng& rng) {
  std::vector<Matrix> ws;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    ws.push_back(rng.matrix_normal(widths[i + 1], widths[i],
                                   1.0 / std::sqrt(static_cast<double>(widths[i]))));
  }
  return ws;
}

Matrix mlp_forward(const std::vector<Matrix>& ws, Activation act, const Matrix& x) {
  Matrix z = x;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    Matrix y = z * ws[i].transpose();
    z = (i + 1 < ws.size()) ? apply_activation(y, act) : std::move(y);
  }
  return z;
}

// Per-sample gradients of the per-sample loss with respect to the network
// output (rows = samples).
Matrix output_gradients(const Matrix& out, const Matrix& targets, LossKind loss) {
  if (loss == LossKind::mse) return 2.0 * (out - targets);
  Matrix g = out;
  for (Eigen::Index b = 0; b < out.rows(); ++b) {
    const double n = out.row(b).norm();
    if (n > 0.0) {
      g.row(b) /= n;
    } else {
      g.row(b).setZero();
    }
  }
  return g;
}

double batch_loss(const Matrix& out, const Matrix& targets, LossKind loss) {
  if (loss == LossKind::mse) {
    return (out - targets).rowwise().squaredNorm().mean();
  }
  return out.rowwise().norm().mean();
}

}  // namespace

ToyScenario generate_scenario(std::uint64_t seed, int num_tasks, std::vector<int> widths,
                              const ScenarioOptions& opts) {
  if (num_tasks < 1) throw std::invalid_argument("need at least one task");
  validate_widths(widths);
  if (opts.batch < 1 || opts.last_iter < 0) {
    throw std::invalid_argument("batch must be >= 1 and the last iteration index >= 0");
  }

  ToyScenario sc;
  sc.seed = seed;
  sc.arch.widths = std::move(widths);
  sc.arch.activation = opts.activation;
  sc.num_tasks = num_tasks;
  sc.batch = opts.batch;
  sc.eta = opts.eta;
  sc.last_iter = opts.last_iter;
  sc.loss = opts.loss;
  sc.noise_sigma = opts.noise_sigma;

  const int d_in = sc.arch.widths.front();
  Rng rng(seed);
  // Draw order: pretrained weights first, then per task the teacher, the
  // input map, the inputs, and the label noise.
  (void)random_mlp_weights(sc.arch.widths, rng);
  for (int t = 0; t < num_tasks; ++t) {
    const auto teacher = random_mlp_weights(sc.arch.widths, rng);
    // Task-specific anisotropic input distribution: x = A_t u with column
    // scales decaying as 1/sqrt(1+j).
    Matrix a = rng.matrix_normal(d_in, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      a.col(j) *= 1.0 / std::sqrt(1.0 + static_cast<double>(j));
    }
    const Matrix u = rng.matrix_normal(sc.batch, d_in);
    TaskData data;
    data.input_map = a;
    data.inputs = u * a.transpose();
    data.targets = mlp_forward(teacher, sc.arch.activation, data.inputs) +
                   rng.matrix_normal(sc.batch, sc.arch.widths.back(), sc.noise_sigma);
    sc.tasks.push_back(std::move(data));
  }
  return sc;
}

Checkpoint pretrained_checkpoint(const ToyScenario& scenario) {
  Rng rng(scenario.seed);
  const auto ws = random_mlp_weights(scenario.arch.widths, rng);
  Checkpoint c;
  c.name = "pretrained";
  for (std::size_t i = 0; i < ws.size(); ++i) {
    c.tensors.emplace(scenario.arch.weight_name(i), Tensor::from_matrix(ws[i]));
  }
  return c;
}

ForwardCapture forward_collect(const Architecture& arch, const Checkpoint& weights,
                               const Matrix& inputs) {
  if (inputs.cols() != arch.widths.front()) {
    throw std::invalid_argument("forward: inputs have " + std::to_string(inputs.cols()) +
                                " columns, architecture expects " +
                                std::to_string(arch.widths.front()));
  }
  ForwardCapture cap;
  Matrix z = inputs;
  const std::size_t n_lin = arch.linear_count();
  for (std::size_t i = 0; i < n_lin; ++i) {
    const std::string name = arch.weight_name(i);
    auto it = weights.tensors.find(name);
    if (it == weights.tensors.end()) {
      throw std::invalid_argument("forward: checkpoint has no tensor \"" + name + "\"");
    }
    const Matrix w = it->second.to_matrix();
    if (w.rows() != arch.widths[i + 1] || w.cols() != arch.widths[i]) {
      throw std::invalid_argument("forward: tensor \"" + name +
                                  "\" does not match the architecture widths");
    }
    cap.layer_inputs.push_back(z);
    cap.linear_inputs.push_back(z);
    Matrix y = z * w.transpose();
    if (i + 1 < n_lin) {
      cap.layer_inputs.push_back(y);  // input to the activation layer
      z = apply_activation(y, arch.activation);
    } else {
      z = std::move(y);
    }
  }
  cap.output = z;
  return cap;
}

double mean_loss(const Architecture& arch, const Checkpoint& weights, const TaskData& data,
                 LossKind loss) {
  const auto cap = forward_collect(arch, weights, data.inputs);
  return batch_loss(cap.output, data.targets, loss);
}

Matrix sample_task_inputs(const ToyScenario& scenario, int task, int count, std::uint64_t salt) {
  if (task < 0 || task >= scenario.num_tasks) {
    throw std::invalid_argument("task index out of range");
  }
  if (count < 1) throw std::invalid_argument("need at least one sample");
  const Matrix& map = scenario.tasks[static_cast<std::size_t>(task)].input_map;
  Rng rng(scenario.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(task + 1)) ^ salt);
  const Matrix u = rng.matrix_normal(count, map.rows());
  return u * map.transpose();
}

TrainResult train_full_batch(const ToyScenario& scenario, int task,
                             const std::set<std::string>& capture_layers) {
  if (task < 0 || task >= scenario.num_tasks) {
    throw std::invalid_argument("task index out of range");
  }
  const Architecture& arch = scenario.arch;
  const TaskData& data = scenario.tasks[static_cast<std::size_t>(task)];
  const std::size_t n_lin = arch.linear_count();
  const double inv_batch = 1.0 / static_cast<double>(data.inputs.rows());

  Rng rng(scenario.seed);
  std::vector<Matrix> ws = random_mlp_weights(arch.widths, rng);  // shared init

  TrainResult result;
  for (std::size_t i = 0; i < n_lin; ++i) {
    const std::string name = arch.weight_name(i);
    if (capture_layers.contains(name)) {
      TrainTrace trace;
      trace.layer = name;
      trace.eta = scenario.eta;
      result.traces.emplace(name, std::move(trace));
    }
  }

  for (int k = 0; k <= scenario.last_iter; ++k) {
    // Forward, keeping each linear layer's input and pre-activation.
    std::vector<Matrix> lin_in(n_lin), pre_act(n_lin);
    Matrix z = data.inputs;
    for (std::size_t i = 0; i < n_lin; ++i) {
      lin_in[i] = z;
      pre_act[i] = z * ws[i].transpose();
      z = (i + 1 < n_lin) ? apply_activation(pre_act[i], arch.activation) : pre_act[i];
    }
    const double loss = batch_loss(z, data.targets, scenario.loss);
    if (!std::isfinite(loss)) {
      throw NumericalError("training diverged at iteration " + std::to_string(k));
    }

    // Per-sample gradients with respect to each linear layer's output.
    std::vector<Matrix> lin_grad(n_lin);
    Matrix g = output_gradients(z, data.targets, scenario.loss);
    for (std::size_t i = n_lin; i-- > 0;) {
      lin_grad[i] = g;
      if (i > 0) {
        g = (g * ws[i]).cwiseProduct(activation_derivative(pre_act[i - 1], arch.activation));
      }
    }

    for (std::size_t i = 0; i < n_lin; ++i) {
      auto it = result.traces.find(arch.weight_name(i));
      if (it != result.traces.end()) {
        it->second.iterations.push_back({lin_in[i], lin_grad[i]});
        it->second.weight_snapshots.push_back(ws[i]);
      }
    }
    for (std::size_t i = 0; i < n_lin; ++i) {
      ws[i] -= scenario.eta * inv_batch * (lin_grad[i].transpose() * lin_in[i]);
    }
  }

  for (std::size_t i = 0; i < n_lin; ++i) {
    auto it = result.traces.find(arch.weight_name(i));
    if (it != result.traces.end()) it->second.weight_snapshots.push_back(ws[i]);
  }

  result.checkpoint.name = "expert-" + std::to_string(task);
  for (std::size_t i = 0; i < n_lin; ++i) {
    result.checkpoint.tensors.emplace(arch.weight_name(i), Tensor::from_matrix(ws[i]));
  }
  return result;
}

namespace {

double power_iteration_lambda_max(const Matrix& a, int iters = 300) {
  const Eigen::Index n = a.rows();
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = 1.0 + 1e-3 * static_cast<double>(i);
  v /= v.norm();
  for (int it = 0; it < iters; ++it) {
    Vector w = a * v;
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    v = w / nw;
  }
  return v.dot(a * v);
}

}  // namespace

Matrix brute_force_minimizer(const std::vector<Matrix>& ws, const std::vector<Matrix>& cs,
                             int max_steps, double lr, double tol) {
  if (ws.empty() || ws.size() != cs.size()) {
    throw std::invalid_argument("brute_force_minimizer: need one covariance per task");
  }
  const Eigen::Index d_o = ws[0].rows();
  const Eigen::Index d_i = ws[0].cols();
  Matrix a = Matrix::Zero(d_i, d_i);
  Matrix b = Matrix::Zero(d_o, d_i);
  for (std::size_t t = 0; t < ws.size(); ++t) {
    if (cs[t].rows() != d_i || cs[t].cols() != d_i) {
      throw std::invalid_argument("brute_force_minimizer: covariance shape mismatch at task " +
                                  std::to_string(t));
    }
    a += cs[t];
    b += ws[t] * cs[t];
  }
  if (a.norm() == 0.0) return Matrix::Zero(d_o, d_i);
  if (lr <= 0.0) {
    const double lmax = power_iteration_lambda_max(a);
    if (lmax <= 0.0) return Matrix::Zero(d_o, d_i);
    lr = 0.9 / lmax;
  }

  Matrix w = Matrix::Zero(d_o, d_i);
  Matrix grad(d_o, d_i);
  for (int step = 0; step < max_steps; ++step) {
    grad.noalias() = 2.0 * (w * a);
    grad -= 2.0 * b;
    if (grad.norm() <= tol) return w;
    w -= lr * grad;
  }
  grad.noalias() = 2.0 * (w * a);
  grad -= 2.0 * b;
  if (grad.norm() <= tol) return w;
  throw NumericalError("brute_force_minimizer: gradient norm " + std::to_string(grad.norm()) +
                       " above tolerance after " + std::to_string(max_steps) + " steps");
}

std::string scenario_to_config(const ToyScenario& scenario) {
  std::ostringstream oss;
  oss << "# toy fine-tuning scenario\n[scenario]\n";
  oss << "seed = " << scenario.seed << "\n";
  oss << "tasks = " << scenario.num_tasks << "\n";
  oss << "widths = ";
  for (std::size_t i = 0; i < scenario.arch.widths.size(); ++i) {
    oss << (i ? "," : "") << scenario.arch.widths[i];
  }
  oss << "\n";
  oss << "activation = " << activation_name(scenario.arch.activation) << "\n";
  oss << "loss = " << loss_name(scenario.loss) << "\n";
  oss << "batch = " << scenario.batch << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", scenario.eta);
  oss << "eta = " << buf << "\n";
  oss << "steps = " << scenario.last_iter + 1 << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", scenario.noise_sigma);
  oss << "noise_sigma = " << buf << "\n";
  return oss.str();
}

ToyScenario scenario_from_config(const std::string& text) {
  const RunConfig cfg = RunConfig::parse(text);
  ScenarioOptions opts;
  opts.batch = static_cast<int>(cfg.get_int("scenario.batch", opts.batch));
  opts.eta = cfg.get_double("scenario.eta", opts.eta);
  opts.last_iter = static_cast<int>(cfg.get_int("scenario.steps", opts.last_iter + 1)) - 1;
  opts.activation = activation_from_string(cfg.get_or("scenario.activation", "tanh"));
  opts.loss = loss_from_string(cfg.get_or("scenario.loss", "mse"));
  opts.noise_sigma = cfg.get_double("scenario.noise_sigma", opts.noise_sigma);
  std::vector<int> widths;
  for (const auto& tok : cfg.get_list("scenario.widths")) {
    widths.push_back(static_cast<int>(std::stol(tok)));
  }
  return generate_scenario(static_cast<std::uint64_t>(cfg.get_int("scenario.seed", 0)),
                           static_cast<int>(cfg.get_int("scenario.tasks", 1)), std::move(widths),
                           opts);
}

namespace {

std::string iter_key(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", k);
  return buf;
}

}  // namespace

Checkpoint traces_to_container(const std::map<std::string, TrainTrace>& traces) {
  Checkpoint c;
  c.name = "traces";
  for (const auto& [layer, trace] : traces) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", trace.eta);
    c.metadata["eta/" + layer] = buf;
    c.metadata["iterations/" + layer] = std::to_string(trace.iterations.size());
    const std::string prefix = "trace/" + layer + "/";
    for (std::size_t k = 0; k < trace.iterations.size(); ++k) {
      c.tensors.emplace(prefix + "z/" + iter_key(k),
                        Tensor::from_matrix(trace.iterations[k].z));
      c.tensors.emplace(prefix + "g/" + iter_key(k),
                        Tensor::from_matrix(trace.iterations[k].g));
    }
    for (std::size_t k = 0; k < trace.weight_snapshots.size(); ++k) {
      c.tensors.emplace(prefix + "w/" + iter_key(k),
                        Tensor::from_matrix(trace.weight_snapshots[k]));
    }
  }
  return c;
}

std::map<std::string, TrainTrace> traces_from_container(const Checkpoint& ckpt) {
  auto tensor_at = [&](const std::string& name) -> const Tensor& {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw FormatError("trace container is missing tensor \"" + name + "\"");
    }
    return it->second;
  };
  std::map<std::string, TrainTrace> traces;
  for (const auto& [key, value] : ckpt.metadata) {
    if (key.rfind("eta/", 0) != 0) continue;
    const std::string layer = key.substr(4);
    TrainTrace trace;
    trace.layer = layer;
    auto iters_it = ckpt.metadata.find("iterations/" + layer);
    if (iters_it == ckpt.metadata.end()) {
      throw FormatError("trace container is missing the iteration count for \"" + layer + "\"");
    }
    try {
      trace.eta = std::stod(value);
    } catch (const std::exception&) {
      throw FormatError("trace container has a malformed eta for \"" + layer + "\"");
    }
    std::size_t iters = 0;
    try {
      iters = static_cast<std::size_t>(std::stoull(iters_it->second));
    } catch (const std::exception&) {
      throw FormatError("trace container has a malformed iteration count for \"" + layer + "\"");
    }
    const std::string prefix = "trace/" + layer + "/";
    for (std::size_t k = 0; k < iters; ++k) {
      IterationRecord rec;
      rec.z = tensor_at(prefix + "z/" + iter_key(k)).to_matrix();
      rec.g = tensor_at(prefix + "g/" + iter_key(k)).to_matrix();
      trace.iterations.push_back(std::move(rec));
    }
    for (std::size_t k = 0;; ++k) {
      auto it = ckpt.tensors.find(prefix + "w/" + iter_key(k));
      if (it == ckpt.tensors.end()) break;
      trace.weight_snapshots.push_back(it->second.to_matrix());
    }
    traces.emplace(layer, std::move(trace));
  }
  return traces;
}

}  // namespace covmerge
