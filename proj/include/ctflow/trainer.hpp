#pragma once

// Losses, Adam, the M1/M2/M3 training loop, resumable training checkpoints and
// whole-volume inference.

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ctflow/checkpoint.hpp"
#include "ctflow/model.hpp"
#include "ctflow/volume.hpp"
#include "json.hpp"

namespace ctflow {

struct TrainConfig {
  Arch arch = Arch::kM3;
  ModelConfig model;
  std::size_t batch_size = 16;
  double lr0 = 1e-4;
  std::size_t lr_halve_every = 6000;
  std::size_t lr_warmup = 0;  // linear ramp over the first iterations; 0 = none
  std::size_t total_iters = 5000;
  std::size_t patch_size = 120;
  std::size_t patches_per_slice = 10;
  std::array<double, 2> adam_betas{0.9, 0.999};
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double w_f = 1.0;
  double w_r = 1.0;
  std::size_t log_every = 100;
  Window window;  // HU -> [0,1] for volumes read from disk

  void validate() const;

  /// JSON keys mirror the field names; model fields are flattened
  /// (channels, blocks, r, s_max, growth, dense_layers, leaky_slope).
  nlohmann::json to_json() const;
  /// Starts from the defaults; an unknown key is a ConfigError naming it.
  /// Warnings (e.g. w_r given for M1) are appended when `warnings` is set.
  static TrainConfig from_json(const nlohmann::json& j, std::vector<std::string>* warnings = nullptr);
};

/// lr0 * 2^-floor(iter / lr_halve_every), times min(1, (iter + 1) / lr_warmup)
/// when a warmup is configured.
double lr_schedule(std::size_t iter, const TrainConfig& cfg);

/// (1/k) * sum over the batch of per-sample squared L2 norms.
template <typename T>
Var<T> loss_forward(const Var<T>& denoised, const Var<T>& target);
template <typename T>
Var<T> loss_reverse(const Var<T>& reconstructed, const Var<T>& noisy);

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, Tensor<float>> m, v;
};

class Adam {
 public:
  Adam(ParameterList<float> params, std::array<double, 2> betas, double eps);

  /// One bias-corrected update from the gradients currently held by the
  /// parameters. A non-finite gradient throws NumericError naming the
  /// iteration, the parameter and its gradient norm.
  void step(double lr, std::size_t iteration);

  const AdamState& state() const { return state_; }
  void set_state(AdamState s);

 private:
  ParameterList<float> params_;
  double beta1_, beta2_, eps_;
  AdamState state_;
};

struct TrainLogRecord {
  std::size_t iter = 0;
  double lr = 0.0;
  double loss_f = 0.0;
  std::optional<double> loss_r;  // absent for M1
  double secs = 0.0;

  nlohmann::json to_json() const;
};

/// Training on normalised noisy volumes. Each iteration draws
/// ceil(batch / patches_per_slice) random interior slices, crops
/// patches_per_slice patches from each and keeps the first batch_size.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<Volume> volumes);

  /// Restores model, optimiser, RNG and loss accumulators from a training
  /// checkpoint; `total_iters` may be raised to continue further.
  static Trainer resume(const CheckpointData& data, std::vector<Volume> volumes,
                        std::optional<std::size_t> total_iters = std::nullopt);

  /// Runs until cfg.total_iters; `on_log` sees every log record.
  void run(const std::function<void(const TrainLogRecord&)>& on_log = {});
  /// Single iteration; returns (L_f, L_r) of the batch (L_r = 0 for M1).
  std::pair<double, double> step();

  CheckpointData checkpoint() const;

  const TrainConfig& config() const { return cfg_; }
  const ModelBundle<float>& model() const { return model_; }
  std::size_t iteration() const { return iteration_; }
  const std::vector<TrainLogRecord>& log() const { return log_; }
  /// Mean losses over the last completed log window.
  const TrainLogRecord* last_record() const { return log_.empty() ? nullptr : &log_.back(); }

 private:
  void sample_batch(Tensor<float>& input, Tensor<float>& target);

  TrainConfig cfg_;
  std::vector<Volume> volumes_;
  ModelBundle<float> model_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::size_t iteration_ = 0;
  double window_f_ = 0.0, window_r_ = 0.0;
  std::size_t window_count_ = 0;
  double elapsed_ = 0.0;
  std::vector<TrainLogRecord> log_;
};

/// Mean of Y^2 per pixel over every interior slice, the scale L_r is judged against.
double mean_square(const std::vector<Volume>& volumes);

/// Denoises every slice of a normalised volume (boundary slices included).
/// Slices are reflect-padded to a multiple of the unshuffle factor and cropped back.
Volume denoise_normalized(const ModelBundle<float>& model, const Volume& v, std::size_t slices_per_batch = 4);

/// Reverse mapping X^ -> Y^ on every slice, padded the same way. Needs M2 or M3.
Volume reconstruct_normalized(const ModelBundle<float>& model, const Volume& v, std::size_t slices_per_batch = 4);

/// HU in, HU out: normalise with `window`, denoise, denormalise.
Volume denoise_volume(const ModelBundle<float>& model, const Volume& v, Window window = {});

}  // namespace ctflow
