#include "flim/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "flim/error.hpp"

namespace flim {

void TrainConfig::validate() const {
  if (!(initial_lr > 0.0)) throw InvalidArgument("learning rate must be > 0");
  if (!(rmsprop_smoothing > 0.0 && rmsprop_smoothing < 1.0))
    throw InvalidArgument("RMSProp smoothing must lie in (0, 1)");
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (patience < 1) throw InvalidArgument("patience must be >= 1");
  if (max_epochs < 1) throw InvalidArgument("max epochs must be >= 1");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0))
    throw InvalidArgument("batch-norm momentum must lie in (0, 1]");
}

std::string TrainReport::table() const {
  std::ostringstream out;
  char line[96];
  out << "epoch  train_loss    val_loss\n";
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%5d  %10.6f  %10.6f%s\n", e.epoch, e.train_loss, e.val_loss,
                  e.epoch == best_epoch ? "  *" : "");
    out << line;
  }
  std::snprintf(line, sizeof line, "stopped after epoch %d, best epoch %d\n", stopping_epoch, best_epoch);
  out << line;
  std::snprintf(line, sizeof line, "validation MSE tau_a %.6f ns^2, tau_i %.6f ns^2\n", val_mse_tau_a,
                val_mse_tau_i);
  out << line;
  return out.str();
}

std::string TrainReport::loss_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,train_loss,val_loss\n";
  for (const auto& e : epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n';
  return out.str();
}

double mse_loss(std::span<const LifetimePair> pred, std::span<const LifetimePair> gt) {
  if (pred.empty()) throw InvalidArgument("empty batch");
  if (pred.size() != gt.size()) throw InvalidArgument("prediction and label batches differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double da = pred[i].tau_a - gt[i].tau_a;
    const double di = pred[i].tau_i - gt[i].tau_i;
    sum += da * da + di * di;
  }
  return sum / static_cast<double>(pred.size());
}

namespace {

// Weights reordered to [co][ci][k] so the k-innermost loop is contiguous.
std::vector<double> transpose_weights(const AdderLayer& l) {
  std::vector<double> t(l.weights.size());
  for (int co = 0; co < l.out_channels; ++co)
    for (int ci = 0; ci < l.in_channels; ++ci)
      for (int k = 0; k < l.kernel; ++k)
        t[(static_cast<std::size_t>(co) * l.in_channels + ci) * l.kernel + k] = l.weights[l.weight_index(k, ci, co)];
  return t;
}

void accumulate_sample(const AdderLayer& l, const std::vector<double>& wt, const double* x, int wi,
                       double* out, int wo_count) {
  for (int co = 0; co < l.out_channels; ++co) {
    const double* wrow = &wt[static_cast<std::size_t>(co) * l.in_channels * l.kernel];
    for (int wo = 0; wo < wo_count; ++wo) {
      double acc = 0.0;
      for (int ci = 0; ci < l.in_channels; ++ci) {
        const double* xs = x + static_cast<std::size_t>(ci) * wi + static_cast<std::size_t>(wo) * l.stride;
        const double* ws = wrow + static_cast<std::size_t>(ci) * l.kernel;
        for (int k = 0; k < l.kernel; ++k) acc += std::abs(xs[k] - ws[k]);
      }
      out[static_cast<std::size_t>(co) * wo_count + wo] = -acc;
    }
  }
}

// dpre: [co][wo] for one sample. Accumulates into dwt ([co][ci][k]) and dx.
void backward_sample(const AdderLayer& l, const std::vector<double>& wt, const double* x, int wi,
                     const double* dpre, int wo_count, double* dwt, double* dx, AdderGradient mode) {
  for (int co = 0; co < l.out_channels; ++co) {
    const std::size_t wbase = static_cast<std::size_t>(co) * l.in_channels * l.kernel;
    for (int wo = 0; wo < wo_count; ++wo) {
      const double g = dpre[static_cast<std::size_t>(co) * wo_count + wo];
      if (g == 0.0) continue;
      for (int ci = 0; ci < l.in_channels; ++ci) {
        const std::size_t xoff = static_cast<std::size_t>(ci) * wi + static_cast<std::size_t>(wo) * l.stride;
        const std::size_t woff = wbase + static_cast<std::size_t>(ci) * l.kernel;
        for (int k = 0; k < l.kernel; ++k) {
          const double diff = x[xoff + k] - wt[woff + k];
          double gw;
          double gx;
          if (mode == AdderGradient::Surrogate) {
            gw = diff;
            gx = std::clamp(-diff, -1.0, 1.0);
          } else {
            gw = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            gx = -gw;
          }
          dwt[woff + k] += g * gw;
          if (dx) dx[xoff + k] += g * gx;
        }
      }
    }
  }
}

void untranspose_add(const AdderLayer& l, const std::vector<double>& dwt, std::vector<double>& dw) {
  for (int co = 0; co < l.out_channels; ++co)
    for (int ci = 0; ci < l.in_channels; ++ci)
      for (int k = 0; k < l.kernel; ++k)
        dw[l.weight_index(k, ci, co)] += dwt[(static_cast<std::size_t>(co) * l.in_channels + ci) * l.kernel + k];
}

}  // namespace

AdderGrads adder_backward(const AdderLayer& layer, const FeatureMap& input, const FeatureMap& upstream,
                          AdderGradient mode) {
  const int wo_count = layer.output_length(input.width);
  if (input.channels != layer.in_channels || upstream.channels != layer.out_channels ||
      upstream.width != wo_count)
    throw InvalidArgument("adder backward: shape mismatch");
  const auto wt = transpose_weights(layer);
  std::vector<double> dwt(wt.size(), 0.0);
  AdderGrads out;
  out.input = FeatureMap(input.channels, input.width);
  out.weights.assign(layer.weights.size(), 0.0);
  backward_sample(layer, wt, input.data.data(), input.width, upstream.data.data(), wo_count, dwt.data(),
                  out.input.data.data(), mode);
  untranspose_add(layer, dwt, out.weights);
  return out;
}

ModelTensors zeros_like(const NetworkModel& model) {
  ModelTensors t(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    t[i].weights.assign(l.weights.size(), 0.0);
    t[i].a.assign(static_cast<std::size_t>(l.out_channels), 0.0);
    t[i].b.assign(static_cast<std::size_t>(l.out_channels), 0.0);
  }
  return t;
}

OptimizerState make_optimizer_state(const NetworkModel& model) { return {zeros_like(model), 0}; }

void adaptive_rescale(std::vector<double>& g) {
  double sq = 0.0;
  for (double v : g) sq += v * v;
  if (!(sq > 0.0)) return;
  const double factor = std::sqrt(static_cast<double>(g.size())) / std::sqrt(sq);
  for (auto& v : g) v *= factor;
}

namespace {

void rmsprop(std::vector<double>& param, const std::vector<double>& grad, std::vector<double>& ms,
             const TrainConfig& cfg) {
  const double rho = cfg.rmsprop_smoothing;
  for (std::size_t i = 0; i < param.size(); ++i) {
    ms[i] = rho * ms[i] + (1.0 - rho) * grad[i] * grad[i];
    param[i] -= cfg.initial_lr * grad[i] / (std::sqrt(ms[i]) + cfg.rmsprop_epsilon);
  }
}

bool all_finite(const ModelTensors& t) {
  for (const auto& l : t) {
    for (const auto* v : {&l.weights, &l.a, &l.b})
      for (double x : *v)
        if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

void optimizer_step(NetworkModel& model, ModelTensors grads, OptimizerState& state,
                    const TrainConfig& cfg) {
  if (grads.size() != model.layers.size() || state.mean_square.size() != model.layers.size())
    throw InvalidArgument("gradient/state layout does not match the model");
  if (!all_finite(grads)) throw NumericError("non-finite gradient");
  ++state.steps;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& layer = model.layers[i];
    auto& g = grads[i];
    auto& s = state.mean_square[i];
    adaptive_rescale(g.weights);
    rmsprop(layer.weights, g.weights, s.weights, cfg);
    if (layer.bn) {
      rmsprop(layer.bn->gamma, g.a, s.a, cfg);
      rmsprop(layer.bn->beta, g.b, s.b, cfg);
    } else {
      rmsprop(layer.scale, g.a, s.a, cfg);
      rmsprop(layer.shift, g.b, s.b, cfg);
    }
  }
}

BatchTrainer::BatchTrainer(NetworkModel& model, AdderGradient mode) : model_(model), mode_(mode) {
  model_.validate();
  caches_.resize(model_.layers.size());
}

BatchTrainer::Tensor BatchTrainer::layer_forward(std::size_t index, const Tensor& input, bool training) {
  const auto& l = model_.layers[index];
  auto& c = caches_[index];
  c.input = input;
  if (l.kind == LayerKind::AdderDense && c.input.width != 1) {
    c.input.channels *= c.input.width;
    c.input.width = 1;
  }
  const int batch = c.input.batch;
  const int wi = c.input.width;
  const int wo = l.output_length(wi);
  if (c.input.channels != l.in_channels || wo < 1) throw InvalidArgument("trainer: shape mismatch");
  const auto wt = transpose_weights(l);
  c.pre = Tensor{batch, l.out_channels, wo, std::vector<double>(static_cast<std::size_t>(batch) * l.out_channels * wo)};
  for (int b = 0; b < batch; ++b) accumulate_sample(l, wt, c.input.sample(b), wi, c.pre.sample(b), wo);

  c.out = c.pre;
  const auto n = static_cast<double>(batch) * wo;
  if (l.bn) {
    const auto& bn = *l.bn;
    c.normed = c.pre;
    c.mean.assign(static_cast<std::size_t>(l.out_channels), 0.0);
    c.var.assign(static_cast<std::size_t>(l.out_channels), 0.0);
    for (int co = 0; co < l.out_channels; ++co) {
      const auto ch = static_cast<std::size_t>(co);
      double mean;
      double var;
      if (training) {
        double sum = 0.0;
        for (int b = 0; b < batch; ++b)
          for (int w = 0; w < wo; ++w) sum += c.pre.sample(b)[ch * wo + w];
        mean = sum / n;
        double sq = 0.0;
        for (int b = 0; b < batch; ++b)
          for (int w = 0; w < wo; ++w) {
            const double d = c.pre.sample(b)[ch * wo + w] - mean;
            sq += d * d;
          }
        var = sq / n;
      } else {
        mean = bn.running_mean[ch];
        var = bn.running_var[ch];
      }
      c.mean[ch] = mean;
      c.var[ch] = var;
      const double inv = 1.0 / std::sqrt(var + bn.epsilon);
      for (int b = 0; b < batch; ++b)
        for (int w = 0; w < wo; ++w) {
          const std::size_t idx = ch * wo + w;
          const double xh = (c.pre.sample(b)[idx] - mean) * inv;
          c.normed.sample(b)[idx] = xh;
          c.out.sample(b)[idx] = bn.gamma[ch] * xh + bn.beta[ch];
        }
    }
  } else {
    for (int b = 0; b < batch; ++b)
      for (int co = 0; co < l.out_channels; ++co)
        for (int w = 0; w < wo; ++w) {
          auto& v = c.out.sample(b)[static_cast<std::size_t>(co) * wo + w];
          v = l.scale[static_cast<std::size_t>(co)] * v + l.shift[static_cast<std::size_t>(co)];
        }
  }
  if (l.relu)
    for (auto& v : c.out.data) v = std::max(v, 0.0);
  return c.out;
}

BatchTrainer::Tensor BatchTrainer::layer_backward(std::size_t index, Tensor g, LayerTensors& grads,
                                                  bool need_input) {
  const auto& l = model_.layers[index];
  auto& c = caches_[index];
  const int batch = c.pre.batch;
  const int wo = c.pre.width;
  if (l.relu)
    for (std::size_t i = 0; i < g.data.size(); ++i)
      if (!(c.out.data[i] > 0.0)) g.data[i] = 0.0;

  Tensor dpre = g;
  if (l.bn) {
    const auto& bn = *l.bn;
    const double n = static_cast<double>(batch) * wo;
    for (int co = 0; co < l.out_channels; ++co) {
      const auto ch = static_cast<std::size_t>(co);
      const double inv = 1.0 / std::sqrt(c.var[ch] + bn.epsilon);
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (int b = 0; b < batch; ++b)
        for (int w = 0; w < wo; ++w) {
          const std::size_t idx = ch * wo + w;
          sum_g += g.sample(b)[idx];
          sum_gx += g.sample(b)[idx] * c.normed.sample(b)[idx];
        }
      grads.a[ch] += sum_gx;
      grads.b[ch] += sum_g;
      const double gamma = bn.gamma[ch];
      for (int b = 0; b < batch; ++b)
        for (int w = 0; w < wo; ++w) {
          const std::size_t idx = ch * wo + w;
          double v;
          if (training_) {
            v = gamma * inv / n * (n * g.sample(b)[idx] - sum_g - c.normed.sample(b)[idx] * sum_gx);
          } else {
            v = gamma * inv * g.sample(b)[idx];
          }
          dpre.sample(b)[idx] = v;
        }
    }
  } else {
    for (int co = 0; co < l.out_channels; ++co) {
      const auto ch = static_cast<std::size_t>(co);
      double sum_g = 0.0;
      double sum_gp = 0.0;
      for (int b = 0; b < batch; ++b)
        for (int w = 0; w < wo; ++w) {
          const std::size_t idx = ch * wo + w;
          sum_g += g.sample(b)[idx];
          sum_gp += g.sample(b)[idx] * c.pre.sample(b)[idx];
          dpre.sample(b)[idx] = g.sample(b)[idx] * l.scale[ch];
        }
      grads.a[ch] += sum_gp;
      grads.b[ch] += sum_g;
    }
  }

  const auto wt = transpose_weights(l);
  std::vector<double> dwt(wt.size(), 0.0);
  Tensor dx{batch, c.input.channels, c.input.width,
            std::vector<double>(need_input ? c.input.data.size() : 0, 0.0)};
  for (int b = 0; b < batch; ++b)
    backward_sample(l, wt, c.input.sample(b), c.input.width, dpre.sample(b), wo, dwt.data(),
                    need_input ? dx.sample(b) : nullptr, mode_);
  untranspose_add(l, dwt, grads.weights);
  return dx;
}

std::vector<LifetimePair> BatchTrainer::forward(const std::vector<std::vector<double>>& inputs,
                                                bool training) {
  training_ = training;
  const int batch = static_cast<int>(inputs.size());
  if (batch < 1) throw InvalidArgument("empty batch");
  Tensor x{batch, 1, model_.input_length, {}};
  x.data.reserve(static_cast<std::size_t>(batch) * model_.input_length);
  for (const auto& in : inputs) {
    if (in.size() != static_cast<std::size_t>(model_.input_length))
      throw FormatError("trainer: input length does not match the model");
    x.data.insert(x.data.end(), in.begin(), in.end());
  }
  for (int i = 0; i < model_.pre_count; ++i) x = layer_forward(static_cast<std::size_t>(i), x, training);
  skip_ = x;
  auto branch = layer_forward(model_.residual_b(), layer_forward(model_.residual_a(), x, training), training);
  const int offset = skip_crop(skip_.width, branch.width).first;
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < branch.channels; ++ch)
      for (int w = 0; w < branch.width; ++w)
        branch.sample(b)[static_cast<std::size_t>(ch) * branch.width + w] +=
            skip_.sample(b)[static_cast<std::size_t>(ch) * skip_.width + w + offset];
  residual_sum_ = branch;
  for (auto& v : branch.data) v = std::max(v, 0.0);
  x = std::move(branch);
  for (int i = 0; i < model_.post_count; ++i)
    x = layer_forward(model_.post_begin() + static_cast<std::size_t>(i), x, training);

  last_pred_.assign(static_cast<std::size_t>(batch), {});
  for (int h = 0; h < 2; ++h) {
    Tensor y = x;
    for (int i = 0; i < model_.head_depth; ++i)
      y = layer_forward(model_.head_begin(h) + static_cast<std::size_t>(i), y, training);
    for (int b = 0; b < batch; ++b) {
      auto& p = last_pred_[static_cast<std::size_t>(b)];
      (h == 0 ? p.tau_a : p.tau_i) = y.data[static_cast<std::size_t>(b)];
    }
  }
  return last_pred_;
}

ModelTensors BatchTrainer::backward(std::span<const LifetimePair> targets) {
  const int batch = static_cast<int>(last_pred_.size());
  if (targets.size() != last_pred_.size()) throw InvalidArgument("target batch size mismatch");
  auto grads = zeros_like(model_);

  const auto& trunk_cache = caches_[model_.head_begin(0)].input;
  Tensor trunk_grad{batch, trunk_cache.channels, trunk_cache.width,
                    std::vector<double>(trunk_cache.data.size(), 0.0)};
  for (int h = 0; h < 2; ++h) {
    Tensor g{batch, 1, 1, std::vector<double>(static_cast<std::size_t>(batch))};
    for (int b = 0; b < batch; ++b) {
      const auto& p = last_pred_[static_cast<std::size_t>(b)];
      const auto& t = targets[static_cast<std::size_t>(b)];
      const double err = h == 0 ? p.tau_a - t.tau_a : p.tau_i - t.tau_i;
      g.data[static_cast<std::size_t>(b)] = 2.0 * err / batch;
    }
    for (int i = model_.head_depth - 1; i >= 0; --i) {
      const auto idx = model_.head_begin(h) + static_cast<std::size_t>(i);
      g = layer_backward(idx, std::move(g), grads[idx], true);
    }
    for (std::size_t i = 0; i < g.data.size(); ++i) trunk_grad.data[i] += g.data[i];
  }

  // Back to the trunk's conv shape (same memory layout).
  Tensor g = std::move(trunk_grad);
  const auto& post_out = model_.post_count > 0
                             ? caches_[model_.post_begin() + static_cast<std::size_t>(model_.post_count - 1)].out
                             : residual_sum_;
  g.channels = post_out.channels;
  g.width = post_out.width;
  for (int i = model_.post_count - 1; i >= 0; --i) {
    const auto idx = model_.post_begin() + static_cast<std::size_t>(i);
    g = layer_backward(idx, std::move(g), grads[idx], true);
  }

  for (std::size_t i = 0; i < g.data.size(); ++i)
    if (!(residual_sum_.data[i] > 0.0)) g.data[i] = 0.0;
  Tensor skip_grad{batch, skip_.channels, skip_.width, std::vector<double>(skip_.data.size(), 0.0)};
  const int offset = skip_crop(skip_.width, g.width).first;
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < g.channels; ++ch)
      for (int w = 0; w < g.width; ++w)
        skip_grad.sample(b)[static_cast<std::size_t>(ch) * skip_.width + w + offset] +=
            g.sample(b)[static_cast<std::size_t>(ch) * g.width + w];
  auto ga = layer_backward(model_.residual_b(), std::move(g), grads[model_.residual_b()], true);
  auto gx = layer_backward(model_.residual_a(), std::move(ga), grads[model_.residual_a()], true);
  for (std::size_t i = 0; i < gx.data.size(); ++i) skip_grad.data[i] += gx.data[i];

  g = std::move(skip_grad);
  for (int i = model_.pre_count - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    g = layer_backward(idx, std::move(g), grads[idx], true);
  }
  input_grads_.assign(static_cast<std::size_t>(batch), {});
  for (int b = 0; b < batch; ++b)
    input_grads_[static_cast<std::size_t>(b)].assign(g.sample(b), g.sample(b) + static_cast<std::size_t>(g.channels) * g.width);
  return grads;
}

void BatchTrainer::update_running_stats(double momentum) {
  for (std::size_t i = 0; i < model_.layers.size(); ++i) {
    auto& l = model_.layers[i];
    if (!l.bn) continue;
    const auto& c = caches_[i];
    const double n = static_cast<double>(c.pre.batch) * c.pre.width;
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t ch = 0; ch < c.mean.size(); ++ch) {
      l.bn->running_mean[ch] = (1.0 - momentum) * l.bn->running_mean[ch] + momentum * c.mean[ch];
      l.bn->running_var[ch] = (1.0 - momentum) * l.bn->running_var[ch] + momentum * c.var[ch] * unbias;
    }
  }
}

MseSplit evaluate_mse(const NetworkModel& model, const std::vector<LabeledDecay>& data) {
  if (data.empty()) throw InvalidArgument("empty evaluation set");
  MseSplit m;
  for (const auto& r : data) {
    const auto p = forward(model, r.histogram, false);
    const double da = p.tau_a - r.label.tau_a;
    const double di = p.tau_i - r.label.tau_i;
    m.tau_a += da * da;
    m.tau_i += di * di;
  }
  const auto n = static_cast<double>(data.size());
  m.tau_a /= n;
  m.tau_i /= n;
  m.total = m.tau_a + m.tau_i;
  return m;
}

namespace {

NetworkModel folded_copy(const NetworkModel& m) {
  NetworkModel copy = m;
  fold_model_bn(copy);
  return copy;
}

void init_output_affine(NetworkModel& model, BatchTrainer& trainer,
                        const std::vector<std::vector<double>>& inputs,
                        const std::vector<LabeledDecay>& data, std::size_t batch) {
  const std::size_t n = std::min(batch, inputs.size());
  std::vector<std::vector<double>> first(inputs.begin(), inputs.begin() + static_cast<std::ptrdiff_t>(n));
  // Heads start from unit scale so the observed outputs are the raw accumulations.
  for (int h = 0; h < 2; ++h) {
    auto& out = model.layers[model.head_begin(h) + static_cast<std::size_t>(model.head_depth - 1)];
    out.scale.assign(out.scale.size(), 1.0);
    out.shift.assign(out.shift.size(), 0.0);
  }
  const auto pred = trainer.forward(first, true);
  for (int h = 0; h < 2; ++h) {
    double pm = 0.0;
    double pv = 0.0;
    for (const auto& p : pred) pm += h == 0 ? p.tau_a : p.tau_i;
    pm /= static_cast<double>(n);
    for (const auto& p : pred) {
      const double d = (h == 0 ? p.tau_a : p.tau_i) - pm;
      pv += d * d;
    }
    const double ps = std::sqrt(pv / static_cast<double>(n));
    double lm = 0.0;
    double lv = 0.0;
    for (const auto& r : data) lm += h == 0 ? r.label.tau_a : r.label.tau_i;
    lm /= static_cast<double>(data.size());
    for (const auto& r : data) {
      const double d = (h == 0 ? r.label.tau_a : r.label.tau_i) - lm;
      lv += d * d;
    }
    const double ls = std::max(std::sqrt(lv / static_cast<double>(data.size())), 0.1);
    const double scale = ps > 1e-12 ? ls / ps : 1e-3;
    auto& out = model.layers[model.head_begin(h) + static_cast<std::size_t>(model.head_depth - 1)];
    out.scale.assign(1, scale);
    out.shift.assign(1, lm - scale * pm);
  }
}

}  // namespace

TrainResult train(NetworkModel model, const std::vector<LabeledDecay>& train_set,
                  const std::vector<LabeledDecay>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw InvalidArgument("training and validation sets must be non-empty");
  model.validate();
  auto normalize_all = [&](const std::vector<LabeledDecay>& data) {
    std::vector<std::vector<double>> out;
    out.reserve(data.size());
    for (const auto& r : data) {
      if (r.histogram.counts.size() != static_cast<std::size_t>(model.input_length))
        throw FormatError("dataset has " + std::to_string(r.histogram.counts.size()) +
                          " bins but the model expects " + std::to_string(model.input_length));
      out.push_back(normalize_input(r.histogram));
    }
    return out;
  };
  const auto inputs = normalize_all(train_set);
  normalize_all(val_set);

  BatchTrainer trainer(model);
  if (cfg.init_output_affine && !cfg.frozen) init_output_affine(model, trainer, inputs, train_set, cfg.batch_size);
  auto state = make_optimizer_state(model);

  TrainReport report;
  double best = std::numeric_limits<double>::infinity();
  NetworkModel best_model = model;
  int since_best = 0;
  std::vector<std::size_t> order(train_set.size());
  std::vector<std::vector<double>> batch_in;
  std::vector<LifetimePair> batch_gt;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch_in.clear();
      batch_gt.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch_in.push_back(inputs[order[i]]);
        batch_gt.push_back(train_set[order[i]].label);
      }
      const auto pred = trainer.forward(batch_in, true);
      const double loss = mse_loss(pred, batch_gt);
      if (!std::isfinite(loss))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ":\n" + report.table());
      loss_sum += loss * static_cast<double>(end - start);
      if (cfg.frozen) continue;
      auto grads = trainer.backward(batch_gt);
      trainer.update_running_stats(cfg.bn_momentum);
      try {
        optimizer_step(model, std::move(grads), state, cfg);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ":\n" + report.table());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = evaluate_mse(folded_copy(model), val_set).total;
    if (!std::isfinite(rec.val_loss))
      throw NumericError("validation loss is not finite at epoch " + std::to_string(epoch));
    report.epochs.push_back(rec);
    report.stopping_epoch = epoch;
    if (rec.val_loss < best) {
      best = rec.val_loss;
      best_model = model;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  fold_model_bn(best_model);
  snap_to_binary32(best_model);
  const auto final_mse = evaluate_mse(best_model, val_set);
  report.val_mse_tau_a = final_mse.tau_a;
  report.val_mse_tau_i = final_mse.tau_i;
  return {std::move(best_model), std::move(report)};
}

}  // namespace flim
