#pragma once

// Scaled train/evaluate experiments on synthetic phantoms: the M1/M2/M3
// comparison, a fixed box-filter reference and the cycle residual.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctflow/grad_check.hpp"
#include "ctflow/metrics.hpp"
#include "ctflow/trainer.hpp"
#include "ctflow/volume.hpp"

namespace ctflow {

struct ExperimentConfig {
  TrainConfig train;  // arch is overridden per arm
  Dims3 dims{32, 64, 64};
  PhantomKind phantom = PhantomKind::kEllipses;
  double sigma = 0.08;  // Gaussian noise in normalised units
  std::uint64_t train_seed = 100;  // phantom seed; its noise uses seed + 1
  std::uint64_t test_seed = 200;
  std::vector<Arch> arms{Arch::kM1, Arch::kM2, Arch::kM3};

  void validate() const;
  /// {"train": {...}, "dims", "phantom", "sigma", "train_seed", "test_seed", "arms"}
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j, std::vector<std::string>* warnings = nullptr);
};

/// Desk-scale defaults: M3 at C=32 with 12 blocks, 48-pixel patches, batch 8.
ExperimentConfig desk_experiment();

struct ExperimentData {
  Phantom train_phantom, test_phantom;  // HU
  Volume train_clean, train_noisy;      // normalised
  Volume test_clean, test_noisy;
};

ExperimentData make_experiment_data(const ExperimentConfig& cfg);

/// 3x3 mean per slice; border pixels average the neighbours that exist.
Volume box_filter(const Volume& v);

struct ArmResult {
  Arch arch = Arch::kM3;
  CheckpointData checkpoint;
  std::vector<TrainLogRecord> log;
  MetricEntry all_slices;  // held-out volume, every slice
  MetricEntry end_organ;   // held-out volume, declared organ-end slices
  /// Per-pixel mean of (reconstruct(denoise(Y)) - Y)^2 over the interior training
  /// slices; absent for M1.
  std::optional<double> cycle_residual;
};

using ArmLogger = std::function<void(Arch, const TrainLogRecord&)>;

ArmResult run_arm(const ExperimentConfig& cfg, const ExperimentData& data, Arch arch, const ArmLogger& on_log = {});

/// Mean per-pixel (reconstruct(denoise(Y)) - Y)^2 over interior slices.
double cycle_residual(const ModelBundle<float>& model, const Volume& noisy);

struct ExperimentResult {
  MetricEntry noisy, box;  // references on the held-out volume
  MetricEntry noisy_end_organ, box_end_organ;
  std::vector<ArmResult> arms;
  double mean_square_y = 0.0;  // per pixel, interior training slices

  const ArmResult* arm(Arch arch) const;
  /// Rows: noisy, box3x3, then one per arm; end-organ rows carry an "@end" suffix.
  MetricReport report(const ExperimentConfig& cfg) const;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ArmLogger& on_log = {});

// -- property checks ------------------------------------------------------------

/// Max |core_inverse(core_forward(x)) - x| over `trials` standard-normal inputs
/// of shape {1, C, H, W}, evaluated in batches.
template <typename T>
double core_roundtrip_error(const DenoiserModel<T>& model, std::size_t trials, std::array<std::size_t, 3> chw,
                            std::uint64_t seed, std::size_t batch = 25);

/// Same, over the given inputs [N, C, H, W].
template <typename T>
double core_roundtrip_error(const DenoiserModel<T>& model, const Tensor<T>& inputs, std::size_t batch = 25);

/// Central-difference check of the f64 gradient of L_f + L_r on an M3 model
/// with projections redrawn at `gain`, for one size x size input and target.
/// The differences are evaluated on a long double copy of the model.
GradCheckReport composite_grad_check(const ModelConfig& cfg, std::size_t size, std::uint64_t seed, double gain = 0.5,
                                     double eps = 1e-6, std::size_t coords_per_tensor = 6);

}  // namespace ctflow
