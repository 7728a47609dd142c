#include "vrwkv/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "vrwkv/checkpoint.hpp"

namespace vrwkv {

Dataset make_dataset(const SyntheticTask& task, std::size_t n) {
  if (task.num_classes == 0 || task.image_size == 0 || task.channels == 0)
    throw Error("synthetic task: num_classes, image_size and channels must be >= 1");
  if (n < task.num_classes) throw Error("synthetic task: need at least one sample per class");
  if (!(task.stripe_period > 0) || !(task.blob_sigma > 0) || !(task.noise >= 0))
    throw Error("synthetic task: invalid generator parameters");

  const std::size_t S = task.image_size, ch = task.channels;
  const std::size_t orientations = (task.num_classes + 1) / 2;
  Dataset d;
  d.image_size = S;
  d.channels = ch;
  d.images.resize(n * S * S * ch);
  d.labels.resize(n);

  std::mt19937_64 rng(task.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, task.noise);
  const double two_pi = 2.0 * std::numbers::pi;

  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % task.num_classes);
    d.labels[i] = label;
    const double theta =
        static_cast<double>(label / 2) * std::numbers::pi / static_cast<double>(orientations);
    const double phase = two_pi * unit(rng);
    const double bx = unit(rng) * static_cast<double>(S);
    const double by = unit(rng) * static_cast<double>(S);
    const double polarity = label % 2 == 0 ? 1.0 : -1.0;
    float* img = d.images.data() + i * S * S * ch;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        const double proj = fx * std::cos(theta) + fy * std::sin(theta);
        const double stripe = 0.5 + 0.5 * std::sin(two_pi * proj / task.stripe_period + phase);
        const double r2 = (fx - bx) * (fx - bx) + (fy - by) * (fy - by);
        const double blob =
            polarity * task.blob_amplitude * std::exp(-r2 / (2.0 * task.blob_sigma * task.blob_sigma));
        for (std::size_t c = 0; c < ch; ++c) {
          double value = task.stripe_amplitude * stripe + (c == 0 ? blob : 0.0) + noise(rng);
          img[(y * S + x) * ch + c] = static_cast<float>(std::clamp(value, 0.0, 1.0));
        }
      }
  }
  return d;
}

template <typename Real>
ImageBatch<Real> gather_batch(const Dataset& data, std::span<const std::size_t> indices) {
  ImageBatch<Real> batch(indices.size(), data.image_size, data.image_size, data.channels);
  const std::size_t stride = data.image_floats();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const float* src = data.images.data() + indices[b] * stride;
    std::copy(src, src + stride, batch.data.begin() + static_cast<std::ptrdiff_t>(b * stride));
  }
  return batch;
}

template <typename Real>
double softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels,
                             Tensor<Real>* g_logits, std::size_t* correct) {
  const std::size_t B = logits.rows(), K = logits.cols();
  if (labels.size() != B) throw ShapeError("cross entropy: label count != batch size");
  if (g_logits) *g_logits = Tensor<Real>({B, K});
  if (correct) *correct = 0;
  double loss = 0;
  std::vector<double> prob(K);
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = logits.row(b);
    const auto label = static_cast<std::size_t>(labels[b]);
    if (label >= K) throw ShapeError("cross entropy: label out of range");
    const auto top = static_cast<double>(*std::max_element(row.begin(), row.end()));
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += prob[k] = std::exp(static_cast<double>(row[k]) - top);
    loss += std::log(z) - (static_cast<double>(row[label]) - top);
    if (correct && static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == label)
      ++*correct;
    if (g_logits)
      for (std::size_t k = 0; k < K; ++k)
        g_logits->at(b, k) = static_cast<Real>((prob[k] / z - (k == label ? 1.0 : 0.0)) /
                                               static_cast<double>(B));
  }
  return loss / static_cast<double>(B);
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr,
                 std::size_t warmup_steps) {
  step = std::min(step, total_steps);
  if (step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Real>
void optimizer_step(ModelParams<Real>& params, const ModelParams<Real>& grads,
                    OptimState<Real>& state) {
  bool finite = true;
  visit_params(grads, [&](const std::string&, const Tensor<Real>& g, bool) {
    finite = finite && all_finite(g.values());
  });
  if (!finite) throw NumericalError("optimizer_step: non-finite gradient, step rejected");

  const AdamWConfig& cfg = state.config;
  const double lr = cosine_lr(state.step, cfg.total_steps, cfg.lr, cfg.warmup_steps);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  std::vector<Tensor<Real>*> ps, ms, vs;
  std::vector<const Tensor<Real>*> gs;
  std::vector<bool> decays;
  visit_params(params, [&](const std::string&, Tensor<Real>& p, bool decay) {
    ps.push_back(&p);
    decays.push_back(decay);
  });
  visit_params(grads, [&](const std::string&, const Tensor<Real>& g, bool) { gs.push_back(&g); });
  visit_params(state.m, [&](const std::string&, Tensor<Real>& m, bool) { ms.push_back(&m); });
  visit_params(state.v, [&](const std::string&, Tensor<Real>& v, bool) { vs.push_back(&v); });
  if (gs.size() != ps.size() || ms.size() != ps.size() || vs.size() != ps.size())
    throw ShapeError("optimizer_step: parameter / gradient structure mismatch");

  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = *ps[i];
    const auto& g = *gs[i];
    auto& m = *ms[i];
    auto& v = *vs[i];
    if (g.size() != p.size()) throw ShapeError("optimizer_step: gradient shape mismatch");
    const double shrink = decays[i] ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      p[j] = static_cast<Real>(static_cast<double>(p[j]) * shrink - lr * update);
    }
  }
}

std::string log_entry_json(const TrainLogEntry& e) {
  nlohmann::json j = {{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}, {"accuracy", e.accuracy}};
  return j.dump();
}

template <typename Real>
double evaluate_accuracy(const ModelParams<Real>& params, const ModelConfig& model,
                         const Dataset& data, std::size_t batch_size) {
  std::size_t hits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto logits = model_forward(gather_batch<Real>(data, idx), params, model);
    std::size_t correct = 0;
    softmax_cross_entropy(logits, std::span<const int>(data.labels).subspan(start, end - start),
                          static_cast<Tensor<Real>*>(nullptr), &correct);
    hits += correct;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

template <typename Real>
TrainResult<Real> train(const TrainConfig& config) {
  config.model.validate();
  if (config.model.num_classes != config.task.num_classes)
    throw Error("train: model num_classes must match the task");
  if (config.batch_size == 0 || config.batch_size > config.train_samples)
    throw Error("train: batch_size must be in [1, train_samples]");

  const Dataset data = make_dataset(config.task, config.train_samples);
  TrainResult<Real> result;
  result.params = init_params<Real>(config.model, config.seed);
  AdamWConfig optim = config.optim;
  optim.total_steps = config.steps;
  OptimState<Real> state(result.params, optim);

  const std::size_t per_epoch = config.train_samples / config.batch_size;
  const std::size_t log_every = config.log_every ? config.log_every : per_epoch;

  std::ofstream log_file;
  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    log_file.open(config.out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log_file) throw Error("train: cannot write to " + config.out_dir.string());
  }

  std::vector<std::size_t> order(config.train_samples);
  double window_loss = 0, window_hits = 0;
  std::size_t window_steps = 0, window_samples = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 shuffle_rng(config.seed * 0x9E3779B97F4A7C15ull + step / per_epoch + 1);
      if (config.shuffle) std::shuffle(order.begin(), order.end(), shuffle_rng);
    }
    const std::span<const std::size_t> idx(order.data() + slot * config.batch_size,
                                           config.batch_size);
    std::vector<int> labels(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = data.labels[idx[b]];

    ModelCache<Real> cache;
    Tensor<Real> logits;
    try {
      logits = model_forward(gather_batch<Real>(data, idx), result.params, config.model, &cache);
    } catch (const NumericalError& e) {
      bool params_finite = true;
      visit_params(result.params, [&](const std::string&, const Tensor<Real>& t, bool) {
        params_finite = params_finite && all_finite(t.values());
      });
      throw TrainingDiverged(std::string(params_finite ? "kernel overflow" : "optimizer blow-up") +
                                 " at step " + std::to_string(step) + ": " + e.what(),
                             params_finite);
    }
    Tensor<Real> g_logits;
    std::size_t correct = 0;
    const double loss = softmax_cross_entropy(logits, labels, &g_logits, &correct);
    if (!std::isfinite(loss))
      throw TrainingDiverged("optimizer blow-up: non-finite loss at step " + std::to_string(step),
                             false);
    const auto grads = model_backward(cache, g_logits, result.params, config.model);
    const double lr = cosine_lr(state.step, optim.total_steps, optim.lr, optim.warmup_steps);
    try {
      optimizer_step(result.params, grads, state);
    } catch (const NumericalError& e) {
      throw TrainingDiverged(std::string("optimizer blow-up: ") + e.what(), false);
    }

    result.step_losses.push_back(loss);
    window_loss += loss;
    window_hits += static_cast<double>(correct);
    window_samples += idx.size();
    ++window_steps;
    if ((step + 1) % log_every == 0 || step + 1 == config.steps) {
      TrainLogEntry e{step + 1, lr, window_loss / static_cast<double>(window_steps),
                      window_hits / static_cast<double>(window_samples)};
      result.log.push_back(e);
      if (log_file) log_file << log_entry_json(e) << '\n';
      window_loss = window_hits = 0;
      window_steps = window_samples = 0;
    }
  }
  result.final_accuracy = evaluate_accuracy(result.params, config.model, data);
  if (!config.out_dir.empty())
    write_checkpoint(config.out_dir / "checkpoint.vrwk", config.model, result.params);
  return result;
}

#define VRWKV_INSTANTIATE(Real)                                                               \
  template ImageBatch<Real> gather_batch(const Dataset&, std::span<const std::size_t>);       \
  template double softmax_cross_entropy(const Tensor<Real>&, std::span<const int>,            \
                                        Tensor<Real>*, std::size_t*);                         \
  template void optimizer_step(ModelParams<Real>&, const ModelParams<Real>&, OptimState<Real>&); \
  template double evaluate_accuracy(const ModelParams<Real>&, const ModelConfig&,             \
                                    const Dataset&, std::size_t);                             \
  template TrainResult<Real> train(const TrainConfig&);

VRWKV_INSTANTIATE(float)
VRWKV_INSTANTIATE(double)
#undef VRWKV_INSTANTIATE

}  // namespace vrwkv
