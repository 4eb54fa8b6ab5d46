#pragma once

// Image quality metrics on 2-D slices ({H, W} tensors) and report emission.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctflow/tensor.hpp"
#include "ctflow/volume.hpp"
#include "json.hpp"

namespace ctflow {

/// 10 log10(peak^2 / MSE); +infinity when the images are identical.
double psnr(const Tensor<float>& x, const Tensor<float>& ref, double peak = 1.0);

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 0.01,
/// K2 0.03, L = peak). Both sides must be at least 11 pixels.
double ssim(const Tensor<float>& x, const Tensor<float>& ref, double peak = 1.0);

struct Roi {
  std::size_t y = 0, x = 0, height = 0, width = 0;
};

struct RegionStats {
  double mean = 0.0;
  double std = 0.0;  // population
};

/// Statistics of noisy - denoised, over the whole slice or one ROI.
RegionStats residual_stats(const Tensor<float>& noisy, const Tensor<float>& denoised,
                           const std::optional<Roi>& roi = std::nullopt);
std::vector<RegionStats> residual_stats(const Tensor<float>& noisy, const Tensor<float>& denoised,
                                        const std::vector<Roi>& rois);

struct SliceMetrics {
  std::size_t index = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double residual_std = 0.0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
};

/// Mean and population std; an all-infinite series summarises to (inf, 0).
Summary summarize(const std::vector<double>& values);

struct MetricEntry {
  std::string name;
  std::vector<SliceMetrics> slices;

  Summary psnr() const;
  Summary ssim() const;
  Summary residual_std() const;
};

struct MetricReport {
  std::vector<MetricEntry> entries;
  nlohmann::json metadata = nlohmann::json::object();  // checkpoint, dataset, window, seeds ...
};

/// Per-slice metrics of `estimate` against `clean` on normalised volumes,
/// restricted to `slices` when given.
MetricEntry evaluate_volume(const std::string& name, const Volume& clean, const Volume& noisy,
                            const Volume& estimate, const std::vector<std::size_t>& slices = {});

/// One row per entry: name,psnr_mean,psnr_std,ssim_mean,ssim_std (4 decimals).
std::string report_csv(const MetricReport& report);
/// Aggregates plus every per-slice value at full precision.
nlohmann::json report_json(const MetricReport& report);

/// Writes report.csv and report.json into `dir`. Rejects empty reports and
/// entries without slices.
void emit_report(const MetricReport& report, const std::filesystem::path& dir);

struct CsvRow {
  std::string name;
  double psnr_mean = 0.0, psnr_std = 0.0, ssim_mean = 0.0, ssim_std = 0.0;
};

std::vector<CsvRow> parse_report_csv(const std::string& text);

}  // namespace ctflow
