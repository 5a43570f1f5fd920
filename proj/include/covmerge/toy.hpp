#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "covmerge/linalg.hpp"
#include "covmerge/tensor_store.hpp"

namespace covmerge {

enum class Activation : std::uint8_t { identity, relu, tanh };
enum class LossKind : std::uint8_t { mse, output_norm };

Activation activation_from_string(const std::string& s);
std::string activation_name(Activation a);
LossKind loss_from_string(const std::string& s);
std::string loss_name(LossKind l);

// Bias-free MLP: widths[0] inputs, widths.back() outputs, the activation
// between consecutive linear layers. Linear weights are named
// "layers.<i>.weight" with shape widths[i+1] x widths[i].
struct Architecture {
  std::vector<int> widths;
  Activation activation = Activation::tanh;

  std::size_t linear_count() const { return widths.size() - 1; }
  std::string weight_name(std::size_t i) const;
  std::vector<std::string> weight_names() const;
};

struct TaskData {
  Matrix inputs;     // batch x widths[0]
  Matrix targets;    // batch x widths.back()
  Matrix input_map;  // widths[0] x widths[0]; inputs are rows of U * input_map^T
};

// Desk-scale fine-tuning setup: a shared pretrained initialization plus T
// task datasets, each drawn from an independent random teacher network (with
// Gaussian label noise) over a task-specific anisotropic input distribution.
// Everything regenerates deterministically from the seed.
struct ToyScenario {
  std::uint64_t seed = 0;
  Architecture arch;
  int num_tasks = 1;
  int batch = 32;
  double eta = 0.05;
  int last_iter = 60;  // gradient steps run for k = 0..last_iter
  LossKind loss = LossKind::mse;
  double noise_sigma = 0.01;
  std::vector<TaskData> tasks;
};

struct ScenarioOptions {
  int batch = 32;
  double eta = 0.05;
  int last_iter = 60;
  Activation activation = Activation::tanh;
  LossKind loss = LossKind::mse;
  double noise_sigma = 0.01;
};

ToyScenario generate_scenario(std::uint64_t seed, int num_tasks, std::vector<int> widths,
                              const ScenarioOptions& opts = {});

// The shared initialization all tasks fine-tune from.
Checkpoint pretrained_checkpoint(const ToyScenario& scenario);

// One gradient step: a batch of layer inputs z (rows) and per-sample output
// gradients g (rows) captured before the weights moved.
struct IterationRecord {
  Matrix z;  // batch x D_i
  Matrix g;  // batch x D_o
};

struct TrainTrace {
  std::string layer;
  double eta = 0.0;
  std::vector<IterationRecord> iterations;  // k = 0..K, one per applied step
  std::vector<Matrix> weight_snapshots;     // W^(0)..W^(K+1)
};

struct TrainResult {
  Checkpoint checkpoint;
  std::map<std::string, TrainTrace> traces;
};

// Full-batch gradient descent from the shared initialization, applying
// W <- W - eta * mean_b(g z^T) at every step k = 0..last_iter and capturing
// the requested layers' (z, g) batches and weight snapshots.
TrainResult train_full_batch(const ToyScenario& scenario, int task,
                             const std::set<std::string>& capture_layers);

// Per-composition-layer inputs of a forward pass; used by the diagnostics.
struct ForwardCapture {
  std::vector<Matrix> layer_inputs;  // input to every composed layer, then the output
  Matrix output;
  std::vector<Matrix> linear_inputs;  // input to each linear layer only
};

ForwardCapture forward_collect(const Architecture& arch, const Checkpoint& weights,
                               const Matrix& inputs);

// Fresh draws from a task's input distribution (deterministic in the
// scenario seed, the task and the salt); feeds the estimator-quality
// diagnostics, which default to 300 samples.
Matrix sample_task_inputs(const ToyScenario& scenario, int task, int count,
                          std::uint64_t salt = 0);

double mean_loss(const Architecture& arch, const Checkpoint& weights, const TaskData& data,
                 LossKind loss);

// Gradient descent on the interference objective from W = 0, stopping when
// the gradient norm falls below tol. Starting at zero keeps the iterates in
// the row space of sum C_t, so the limit is the minimum-norm minimizer.
// lr <= 0 selects 0.9 / lambda_max(sum C_t) via power iteration.
Matrix brute_force_minimizer(const std::vector<Matrix>& ws, const std::vector<Matrix>& cs,
                             int max_steps = 2000000, double lr = 0.0, double tol = 1e-10);

// Scenario round-trip through the flat key-value config format.
std::string scenario_to_config(const ToyScenario& scenario);
ToyScenario scenario_from_config(const std::string& text);

// Traces serialize through the tensor container under the "trace/" prefix.
Checkpoint traces_to_container(const std::map<std::string, TrainTrace>& traces);
std::map<std::string, TrainTrace> traces_from_container(const Checkpoint& ckpt);

}  // namespace covmerge
