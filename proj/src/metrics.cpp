#include "ctflow/metrics.hpp"

#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "ctflow/binary_io.hpp"
#include "ctflow/errors.hpp"

namespace ctflow {

namespace {

void require_same_slice(const char* what, const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
  if (a.rank() != 2) throw ShapeError(std::string(what) + ": expected a 2-D slice, got " + shape_str(a.shape()));
}

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double total = 0.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(kWindow / 2);
    w[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Valid-mode separable filtering: out is (H-10) x (W-10).
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t H, std::size_t W,
                                 const std::array<double, kWindow>& g) {
  const std::size_t OH = H - kWindow + 1, OW = W - kWindow + 1;
  std::vector<double> rows(H * OW, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < OW; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * img[y * W + x + k];
      rows[y * OW + x] = acc;
    }
  std::vector<double> out(OH * OW, 0.0);
  for (std::size_t y = 0; y < OH; ++y)
    for (std::size_t x = 0; x < OW; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * rows[(y + k) * OW + x];
      out[y * OW + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(const Tensor<float>& x, const Tensor<float>& ref, double peak) {
  require_same_slice("psnr", x, ref);
  if (!(peak > 0.0)) throw ConfigError("psnr: peak must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(ref[i]);
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / (sse / static_cast<double>(x.numel())));
}

double ssim(const Tensor<float>& x, const Tensor<float>& ref, double peak) {
  require_same_slice("ssim", x, ref);
  const std::size_t H = x.dim(0), W = x.dim(1);
  if (H < kWindow || W < kWindow) {
    throw ShapeError("ssim: image " + shape_str(x.shape()) + " is smaller than the 11x11 window");
  }
  const auto g = gaussian_window();
  std::vector<double> a(x.numel()), b(x.numel()), aa(x.numel()), bb(x.numel()), ab(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    a[i] = x[i];
    b[i] = ref[i];
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, H, W, g), mu_b = filter_valid(b, H, W, g);
  const auto e_aa = filter_valid(aa, H, W, g), e_bb = filter_valid(bb, H, W, g), e_ab = filter_valid(ab, H, W, g);
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
    const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    total += ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

RegionStats residual_stats(const Tensor<float>& noisy, const Tensor<float>& denoised, const std::optional<Roi>& roi) {
  require_same_slice("residual_stats", noisy, denoised);
  const std::size_t H = noisy.dim(0), W = noisy.dim(1);
  const Roi r = roi.value_or(Roi{0, 0, H, W});
  if (r.height == 0 || r.width == 0 || r.y + r.height > H || r.x + r.width > W) {
    throw ShapeError("ROI (" + std::to_string(r.y) + "," + std::to_string(r.x) + ") " + std::to_string(r.height) +
                     "x" + std::to_string(r.width) + " is outside a " + std::to_string(H) + "x" + std::to_string(W) +
                     " slice");
  }
  double sum = 0.0, sq = 0.0;
  for (std::size_t y = r.y; y < r.y + r.height; ++y)
    for (std::size_t x = r.x; x < r.x + r.width; ++x) {
      const double d = static_cast<double>(noisy[y * W + x]) - static_cast<double>(denoised[y * W + x]);
      sum += d;
      sq += d * d;
    }
  const double n = static_cast<double>(r.height * r.width);
  RegionStats s;
  s.mean = sum / n;
  s.std = std::sqrt(std::max(0.0, sq / n - s.mean * s.mean));
  return s;
}

std::vector<RegionStats> residual_stats(const Tensor<float>& noisy, const Tensor<float>& denoised,
                                        const std::vector<Roi>& rois) {
  std::vector<RegionStats> out;
  out.reserve(rois.size());
  for (const auto& r : rois) out.push_back(residual_stats(noisy, denoised, r));
  return out;
}

Summary summarize(const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("cannot summarise an empty series");
  const bool all_inf = std::all_of(values.begin(), values.end(), [](double v) { return std::isinf(v) && v > 0; });
  if (all_inf) return {std::numeric_limits<double>::infinity(), 0.0};
  Summary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(values.size()));
  return s;
}

namespace {

template <typename F>
Summary summarize_field(const std::vector<SliceMetrics>& slices, F field) {
  std::vector<double> v;
  v.reserve(slices.size());
  for (const auto& s : slices) v.push_back(field(s));
  return summarize(v);
}

}  // namespace

Summary MetricEntry::psnr() const {
  return summarize_field(slices, [](const SliceMetrics& s) { return s.psnr_db; });
}
Summary MetricEntry::ssim() const {
  return summarize_field(slices, [](const SliceMetrics& s) { return s.ssim; });
}
Summary MetricEntry::residual_std() const {
  return summarize_field(slices, [](const SliceMetrics& s) { return s.residual_std; });
}

MetricEntry evaluate_volume(const std::string& name, const Volume& clean, const Volume& noisy, const Volume& estimate,
                            const std::vector<std::size_t>& slices) {
  if (clean.dims != noisy.dims || clean.dims != estimate.dims) throw ShapeError("evaluate_volume: volume dims differ");
  std::vector<std::size_t> zs = slices;
  if (zs.empty()) {
    zs.resize(clean.depth());
    for (std::size_t z = 0; z < zs.size(); ++z) zs[z] = z;
  }
  MetricEntry e{name, {}};
  for (std::size_t z : zs) {
    const auto c = clean.slice(z), n = noisy.slice(z), x = estimate.slice(z);
    e.slices.push_back({z, ctflow::psnr(x, c), ctflow::ssim(x, c), residual_stats(n, x).std});
  }
  return e;
}

// -- report files -------------------------------------------------------------

namespace {

std::string fixed4(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

nlohmann::json number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

void check_report(const MetricReport& report) {
  if (report.entries.empty()) throw ConfigError("report has no entries");
  for (const auto& e : report.entries) {
    if (e.slices.empty()) throw ConfigError("report entry '" + e.name + "' has no per-slice values");
    if (e.name.find_first_of(",\n\"") != std::string::npos) {
      throw ConfigError("report entry name '" + e.name + "' contains a CSV delimiter");
    }
  }
}

}  // namespace

std::string report_csv(const MetricReport& report) {
  check_report(report);
  std::string out = "name,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
  for (const auto& e : report.entries) {
    const auto p = e.psnr(), s = e.ssim();
    out += e.name + "," + fixed4(p.mean) + "," + fixed4(p.std) + "," + fixed4(s.mean) + "," + fixed4(s.std) + "\n";
  }
  return out;
}

nlohmann::json report_json(const MetricReport& report) {
  check_report(report);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : report.entries) {
    nlohmann::json slices = nlohmann::json::array();
    for (const auto& s : e.slices) {
      slices.push_back({{"index", s.index},
                        {"psnr_db", number(s.psnr_db)},
                        {"ssim", number(s.ssim)},
                        {"residual_std", number(s.residual_std)}});
    }
    const auto p = e.psnr(), s = e.ssim(), r = e.residual_std();
    entries.push_back({{"name", e.name},
                       {"psnr_mean", number(p.mean)},
                       {"psnr_std", number(p.std)},
                       {"ssim_mean", number(s.mean)},
                       {"ssim_std", number(s.std)},
                       {"residual_std_mean", number(r.mean)},
                       {"residual_std_std", number(r.std)},
                       {"slices", std::move(slices)}});
  }
  return {{"metadata", report.metadata}, {"entries", std::move(entries)}};
}

void emit_report(const MetricReport& report, const std::filesystem::path& dir) {
  const std::string csv = report_csv(report);
  const std::string json = report_json(report).dump(2) + "\n";
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError(FormatErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  binary::write_file(dir / "report.csv", csv);
  binary::write_file(dir / "report.json", json);
}

std::vector<CsvRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "name,psnr_mean,psnr_std,ssim_mean,ssim_std") {
    throw FormatError(FormatErrorKind::kMalformedHeader, "unexpected report.csv header");
  }
  auto to_double = [](const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  };
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw FormatError(FormatErrorKind::kMalformedHeader, "report.csv row '" + line + "'");
    try {
      rows.push_back({cells[0], to_double(cells[1]), to_double(cells[2]), to_double(cells[3]), to_double(cells[4])});
    } catch (const std::invalid_argument&) {
      throw FormatError(FormatErrorKind::kMalformedHeader, "report.csv row '" + line + "' has a non-numeric cell");
    }
  }
  return rows;
}

}  // namespace ctflow
