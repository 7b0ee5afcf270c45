#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flim/decay_synth.hpp"
#include "flim/flan.hpp"

namespace flim {

struct TrainConfig {
  double initial_lr = 1e-3;
  double rmsprop_smoothing = 0.995;
  double rmsprop_epsilon = 1e-8;
  std::size_t batch_size = 128;
  int patience = 20;
  int max_epochs = 500;
  std::uint64_t seed = 1;
  std::size_t train_size = 50000;
  std::size_t val_size = 5000;
  double bn_momentum = 0.1;
  // Test hook: run epochs without touching any parameter or statistic.
  bool frozen = false;
  // Sets each head's output affine from the first batch and the label spread.
  bool init_output_affine = true;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int stopping_epoch = 0;
  int best_epoch = 0;
  double val_mse_tau_a = 0.0;
  double val_mse_tau_i = 0.0;

  std::string table() const;
  std::string loss_csv() const;
};

// (1/B) * sum over the batch of both squared output errors.
double mse_loss(std::span<const LifetimePair> pred, std::span<const LifetimePair> gt);

enum class AdderGradient { Surrogate, Exact };

struct AdderGrads {
  std::vector<double> weights;
  FeatureMap input;
};

// Gradients of y = -sum |x - w| given dL/dy. The surrogate uses (x - w) for the
// weights and clamp(w - x, -1, 1) for the input; Exact uses the subgradient signs.
AdderGrads adder_backward(const AdderLayer& layer, const FeatureMap& input,
                          const FeatureMap& upstream, AdderGradient mode = AdderGradient::Surrogate);

// Parameter-shaped gradient / optimizer state for one layer. For batch-norm
// layers `a`/`b` hold gamma/beta, otherwise scale/shift.
struct LayerTensors {
  std::vector<double> weights;
  std::vector<double> a;
  std::vector<double> b;
};
using ModelTensors = std::vector<LayerTensors>;

ModelTensors zeros_like(const NetworkModel& model);

struct OptimizerState {
  ModelTensors mean_square;
  std::uint64_t steps = 0;
};

OptimizerState make_optimizer_state(const NetworkModel& model);

// RMSProp; adder weight gradients are first rescaled to norm sqrt(k).
void optimizer_step(NetworkModel& model, ModelTensors grads, OptimizerState& state,
                    const TrainConfig& cfg);

// Rescales g to L2 norm sqrt(g.size()); leaves a zero vector untouched.
void adaptive_rescale(std::vector<double>& g);

// Batched forward/backward with batch-norm statistics, used for training and
// gradient checks.
class BatchTrainer {
 public:
  BatchTrainer(NetworkModel& model, AdderGradient mode = AdderGradient::Surrogate);

  // Inputs are normalized histograms; returns one prediction per sample.
  std::vector<LifetimePair> forward(const std::vector<std::vector<double>>& inputs, bool training);
  // Accumulates dL/dparams for the loss of the last forward pass.
  ModelTensors backward(std::span<const LifetimePair> targets);
  // dL/dinput of the last backward pass.
  const std::vector<std::vector<double>>& input_gradients() const { return input_grads_; }

  void update_running_stats(double momentum);

 private:
  struct Tensor {
    int batch = 0;
    int channels = 0;
    int width = 0;
    std::vector<double> data;
    double* sample(int b) { return data.data() + static_cast<std::size_t>(b) * channels * width; }
    const double* sample(int b) const {
      return data.data() + static_cast<std::size_t>(b) * channels * width;
    }
  };
  struct Cache {
    Tensor input;
    Tensor pre;      // -sum |x - w|
    Tensor normed;   // batch-normalized pre (bn layers)
    Tensor out;      // after affine / ReLU
    std::vector<double> mean;
    std::vector<double> var;
  };

  Tensor layer_forward(std::size_t index, const Tensor& input, bool training);
  Tensor layer_backward(std::size_t index, Tensor grad_out, LayerTensors& grads, bool need_input);

  NetworkModel& model_;
  AdderGradient mode_;
  std::vector<Cache> caches_;
  Tensor skip_;
  Tensor residual_sum_;
  std::vector<LifetimePair> last_pred_;
  std::vector<std::vector<double>> input_grads_;
  bool training_ = true;
};

struct TrainResult {
  NetworkModel model;
  TrainReport report;
};

// Returns the best-validation snapshot with batch-norm folded and parameters
// rounded to binary32.
TrainResult train(NetworkModel model, const std::vector<LabeledDecay>& train_set,
                  const std::vector<LabeledDecay>& val_set, const TrainConfig& cfg);

struct MseSplit {
  double total = 0.0;
  double tau_a = 0.0;
  double tau_i = 0.0;
};

// Float-path evaluation of a folded model.
MseSplit evaluate_mse(const NetworkModel& model, const std::vector<LabeledDecay>& data);

}  // namespace flim
