#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vrwkv/model.hpp"

namespace vrwkv {

/// Synthetic image classification task. Class c draws stripes at orientation
/// (c / 2) * pi / ceil(K / 2) with period `stripe_period` pixels and a random
/// phase, plus a Gaussian blob (sigma `blob_sigma`) at a uniformly random
/// location, bright (+blob_amplitude) for even c and dark (-blob_amplitude)
/// for odd c. Additive N(0, noise^2) pixel noise; values clamped to [0, 1];
/// all channels equal except the blob, which is drawn in channel 0 only.
struct SyntheticTask {
  std::uint64_t seed = 0;
  std::size_t num_classes = 10;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  double stripe_period = 8.0;
  double stripe_amplitude = 0.35;
  double blob_amplitude = 0.6;
  double blob_sigma = 3.0;
  double noise = 0.1;
};

struct Dataset {
  std::size_t image_size = 0;
  std::size_t channels = 0;
  std::vector<float> images;  // n x H x W x channels
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_floats() const { return image_size * image_size * channels; }
};

/// Deterministic per (task, n). Labels cycle through the classes, so the
/// classes are balanced to within one sample.
Dataset make_dataset(const SyntheticTask& task, std::size_t n);

template <typename Real>
ImageBatch<Real> gather_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Mean softmax cross-entropy over the batch; writes d(loss)/d(logits) when
/// `g_logits` is non-null. Also reports the number of correct argmax hits.
template <typename Real>
double softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels,
                             Tensor<Real>* g_logits, std::size_t* correct = nullptr);

/// Linear warmup from 0 to base_lr over `warmup_steps`, then cosine decay to 0
/// at `total_steps`.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr,
                 std::size_t warmup_steps);

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

template <typename Real>
struct OptimState {
  ModelParams<Real> m;
  ModelParams<Real> v;
  std::size_t step = 0;
  AdamWConfig config;

  OptimState(const ModelParams<Real>& params, AdamWConfig cfg)
      : m(zeros_like(params)), v(zeros_like(params)), config(cfg) {}
};

/// One AdamW step with decoupled weight decay at the scheduled learning rate.
/// Norm, bias, layer-scale, decay, bonus and shift parameters are not decayed.
/// Non-finite gradients throw NumericalError and leave params and state untouched.
template <typename Real>
void optimizer_step(ModelParams<Real>& params, const ModelParams<Real>& grads,
                    OptimState<Real>& state);

struct TrainConfig {
  ModelConfig model = preset_config("tiny");
  SyntheticTask task;
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  std::size_t train_samples = 2000;
  AdamWConfig optim{2e-3, 0.9, 0.999, 1e-8, 0.05, 100, 2000};
  std::uint64_t seed = 0;
  std::size_t log_every = 0;  // 0: once per epoch
  bool shuffle = true;        // false: identical batch order every epoch
  std::filesystem::path out_dir;  // empty: no files written
};

struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double accuracy = 0;
};

template <typename Real>
struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::vector<double> step_losses;
  double final_accuracy = 0;  // over the whole training set after the last step
  ModelParams<Real> params;
};

/// Raised when the loss goes non-finite. `kernel_overflow()` tells a WKV
/// overflow apart from an optimiser blow-up.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, bool kernel)
      : NumericalError(what), kernel_(kernel) {}
  bool kernel_overflow() const { return kernel_; }

 private:
  bool kernel_;
};

/// Fully deterministic per config. With `out_dir` set, writes
/// train_log.jsonl and checkpoint.vrwk there.
template <typename Real>
TrainResult<Real> train(const TrainConfig& config);

template <typename Real>
double evaluate_accuracy(const ModelParams<Real>& params, const ModelConfig& model,
                         const Dataset& data, std::size_t batch_size = 64);

std::string log_entry_json(const TrainLogEntry& e);

}  // namespace vrwkv
