// Acceptance run: one PASS/FAIL line per criterion, artefacts under --out.
//
//   acceptance [--out DIR] [--iters N] [--only 1,2,...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "ctflow/binary_io.hpp"
#include "ctflow/checkpoint.hpp"
#include "ctflow/errors.hpp"
#include "ctflow/experiment.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace ctflow;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
std::vector<std::string> summary;

void report(int id, const std::string& title, const Outcome& o) {
  if (!o.pass) ++failures;
  summary.push_back(std::string(o.pass ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + " (" + title +
                    "): " + o.detail);
  std::cout << summary.back() << std::endl;
}

void run_guarded(int id, const std::string& title, const std::function<Outcome()>& body) {
  try {
    report(id, title, body());
  } catch (const std::exception& e) {
    report(id, title, {false, std::string("exception: ") + e.what()});
  }
}

// -- 1 ------------------------------------------------------------------------

struct RoundTrip {
  double f32 = 0.0, f64 = 0.0, f32_secs = 0.0, f64_secs = 0.0;
};

RoundTrip roundtrip(const ModelBundle<float>& model, const Tensor<float>& inputs) {
  RoundTrip r;
  auto t0 = Clock::now();
  r.f32 = core_roundtrip_error(*model.invertible, inputs);
  r.f32_secs = seconds_since(t0);
  const auto wide = cast_bundle<double>(model);
  const auto wide_inputs = inputs.cast<double>();
  t0 = Clock::now();
  r.f64 = core_roundtrip_error(*wide.invertible, wide_inputs);
  r.f64_secs = seconds_since(t0);
  return r;
}

Outcome judge_roundtrip(const RoundTrip& r, const std::string& label) {
  Outcome o;
  o.pass = r.f32 <= 1e-4 && r.f64 <= 1e-10 && r.f32_secs < 10.0;
  std::ostringstream s;
  s << label << ", f32 max err " << r.f32 << " in " << fmt("%.2f", r.f32_secs) << " s, f64 max err " << r.f64
    << " in " << fmt("%.2f", r.f64_secs) << " s";
  o.detail = s.str();
  return o;
}

Outcome criterion1_untrained() {
  const ModelConfig cfg;  // default core
  auto model = build_model<float>(Arch::kM3, cfg, 1);
  randomize_projections(model.parameters(), 2, 0.1);
  const auto inputs = testing::random_tensor<float>({100, cfg.channels, 8, 8}, 11);
  return judge_roundtrip(roundtrip(model, inputs), "default core C=" + std::to_string(cfg.channels) +
                                                      " with random projections, N(0,1) inputs");
}

// Inputs: encodings of i.i.d. uniform images.
Outcome criterion1_trained(const ModelBundle<float>& model) {
  const auto& core = *model.invertible;
  Tensor<float> encoded;
  {
    NoGradGuard no_grad;
    encoded = core.encode(Var<float>(testing::uniform_tensor<float>({100, 1, 8, 8}, 12))).value();
  }
  Outcome o = judge_roundtrip(roundtrip(model, encoded), "trained desk core C=" +
                                                             std::to_string(core.config().channels) +
                                                             ", encoded uniform images");
  const auto normal = testing::random_tensor<float>({100, core.config().channels, 8, 8}, 13);
  o.detail += " (off-domain N(0,1) inputs, not asserted: f32 max err " +
              fmt("%.3g", core_roundtrip_error(core, normal)) + ")";
  return o;
}

// -- 2 ------------------------------------------------------------------------

Outcome criterion2() {
  const ModelConfig cfg;
  const auto model = build_model<float>(Arch::kM3, cfg, 3);
  const auto& core = *model.invertible;
  NoGradGuard no_grad;
  const Var<float> x(testing::random_tensor<float>({2, cfg.channels, 16, 16}, 4));
  const Var<float> m(testing::random_tensor<float>({2, cfg.core_channels(), 8, 8}, 5));
  std::size_t exact_blocks = 0;
  for (const auto& b : core.blocks()) {
    if (b.forward(m).value() == m.value() && b.inverse(m).value() == m.value()) ++exact_blocks;
  }
  const bool core_fwd = core.core_forward(x).value() == x.value();
  const bool core_inv = core.core_inverse(x).value() == x.value();
  Outcome o;
  o.pass = exact_blocks == core.blocks().size() && core_fwd && core_inv;
  o.detail = std::to_string(exact_blocks) + "/" + std::to_string(core.blocks().size()) +
             " blocks bit-exact identity; core forward " + (core_fwd ? "exact" : "inexact") + ", core inverse " +
             (core_inv ? "exact" : "inexact");
  return o;
}

// -- 3 ------------------------------------------------------------------------

constexpr double kGradGain = 0.5;
constexpr double kGradEps = 1e-6;

Outcome criterion3() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.blocks = 2;
  cfg.growth = 4;
  cfg.dense_layers = 2;
  const auto t0 = Clock::now();
  const auto r = composite_grad_check(cfg, 8, 5, kGradGain, kGradEps, std::numeric_limits<std::size_t>::max());
  Outcome o;
  o.pass = r.max_rel_error <= 1e-5 && r.coordinates == denoiser_parameter_count(cfg);
  std::ostringstream s;
  s << r.coordinates << " of " << denoiser_parameter_count(cfg) << " parameters, max rel err " << r.max_rel_error
    << " at " << r.worst_parameter << "[" << r.worst_index << "] (analytic " << r.worst_analytic << ", numeric "
    << r.worst_numeric << "), eps " << kGradEps << ", " << fmt("%.1f", seconds_since(t0)) << " s";
  o.detail = s.str();
  return o;
}

// -- 4 ------------------------------------------------------------------------

Outcome criterion4() {
  constexpr double sigma = 0.08;
  const Phantom ph = make_phantom(PhantomKind::kEllipses, {40, 64, 64}, 21);
  const Volume clean = normalize(ph.volume);
  const Volume noisy = add_noise(clean, NoiseSpec::gaussian(sigma, 22));
  const std::set<std::size_t> ends(ph.organ_end_slices.begin(), ph.organ_end_slices.end());

  double sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (std::size_t z = 1; z + 1 < noisy.depth(); ++z) {
    if (ends.count(z)) continue;
    const auto pair = make_n2n_pair(slice_triple(noisy, z));
    const auto mid = clean.slice(z);
    for (std::size_t i = 0; i < mid.numel(); ++i) {
      const double d = static_cast<double>(pair.target.data()[i]) - mid.data()[i];
      sum += d;
      sum2 += d * d;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sum2 / static_cast<double>(n) - mean * mean;
  const double expected = sigma * sigma / 2.0;
  const double rel = std::abs(var - expected) / expected;

  // Noiseless volume linear in z: the neighbour average reproduces the middle slice.
  Volume lin({6, 16, 16}, {1, 1, 1});
  for (std::size_t z = 0; z < 6; ++z)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) lin.at(z, y, x) = static_cast<float>((y * 16 + x) % 7) / 16.0f + 0.25f * z;
  bool exact = true;
  for (std::size_t z = 1; z + 1 < lin.depth(); ++z) {
    const auto pair = make_n2n_pair(slice_triple(lin, z));
    exact = exact && pair.target == pair.input;
  }

  Outcome o;
  o.pass = n >= 100000 && rel <= 0.05 && exact;
  std::ostringstream s;
  s << "Var(target - clean) " << var << " vs sigma^2/2 " << expected << " (" << fmt("%.2f", 100 * rel) << "% off) over "
    << n << " voxels, " << ends.size() << " organ-end slices skipped; z-linear target "
    << (exact ? "== input" : "!= input");
  o.detail = s.str();
  return o;
}

// -- 8 ------------------------------------------------------------------------

Outcome criterion8() {
  double worst_psnr = 0.0, worst_ssim = 0.0;
  for (std::uint64_t k = 0; k < 5; ++k) {
    const auto ref = testing::uniform_tensor<float>({40 + 4 * k, 48 - 2 * k}, 100 + k);
    auto x = ref;
    const auto noise = testing::random_tensor<float>(ref.shape(), 200 + k, 0.02 + 0.03 * k);
    for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = std::clamp(x.data()[i] + noise.data()[i], 0.0f, 1.0f);
    worst_psnr = std::max(worst_psnr, std::abs(psnr(x, ref) - testing::psnr_oracle(x, ref)));
    worst_ssim = std::max(worst_ssim, std::abs(ssim(x, ref) - testing::ssim_oracle(x, ref)));
  }
  const auto img = testing::uniform_tensor<float>({32, 32}, 300);
  const double self = ssim(img, img);
  Outcome o;
  o.pass = worst_psnr <= 1e-6 && worst_ssim <= 1e-6 && self == 1.0;
  std::ostringstream s;
  s << "5 pairs: max |psnr - oracle| " << worst_psnr << " dB, max |ssim - oracle| " << worst_ssim << "; ssim(x,x) = "
    << fmt("%.17g", self);
  o.detail = s.str();
  return o;
}

// -- 9 ------------------------------------------------------------------------

template <typename F>
std::optional<FormatErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.kind();
  }
  return std::nullopt;
}

Outcome criterion9(const fs::path& dir) {
  const Phantom ph = make_phantom(PhantomKind::kEllipses, {8, 24, 20}, 31);
  const fs::path vpath = dir / "roundtrip.rvol";
  write_volume(ph.volume, vpath);
  const std::string vbytes = binary::read_file(vpath);
  const Volume back = read_volume(vpath);
  const bool vol_ok = back == ph.volume && encode_volume(back) == vbytes;

  ModelConfig cfg;
  cfg.channels = 4;
  cfg.blocks = 2;
  cfg.growth = 8;
  cfg.dense_layers = 2;
  auto model = build_model<float>(Arch::kM3, cfg, 32);
  randomize_projections(model.parameters(), 33, 0.5);
  const fs::path cpath = dir / "roundtrip.innc";
  write_checkpoint(cpath, model_to_checkpoint(model));
  const std::string cbytes = binary::read_file(cpath);
  const auto loaded = model_from_checkpoint(read_checkpoint(cpath));
  const bool ckpt_ok = encode_checkpoint(model_to_checkpoint(loaded)) == cbytes;

  // magic, version, length corruptions on both formats
  std::vector<std::string> lines;
  bool distinct = true;
  for (const auto& [name, bytes] : {std::pair{std::string("RVOL"), vbytes}, std::pair{std::string("INNC"), cbytes}}) {
    const auto decode = [&](const std::string& b) {
      if (name == "RVOL")
        (void)decode_volume(b);
      else
        (void)decode_checkpoint(b);
    };
    std::string magic = bytes, version = bytes, length = bytes;
    magic[0] ^= 0x20;
    version[4] = static_cast<char>(version[4] + 1);
    length.resize(length.size() - 5);
    const auto km = error_kind([&] { decode(magic); });
    const auto kv = error_kind([&] { decode(version); });
    const auto kl = error_kind([&] { decode(length); });
    const bool ok = km == FormatErrorKind::kBadMagic && kv == FormatErrorKind::kUnsupportedVersion && kl.has_value() &&
                    *kl != *km && *kl != *kv;
    distinct = distinct && ok;
    lines.push_back(name + " magic->" + (km ? to_string(*km) : "accepted") + ", version->" +
                    (kv ? to_string(*kv) : "accepted") + ", length->" + (kl ? to_string(*kl) : "accepted"));
  }
  Outcome o;
  o.pass = vol_ok && ckpt_ok && distinct;
  o.detail = std::string("RVOL roundtrip ") + (vol_ok ? "bit-exact" : "differs") + ", INNC roundtrip " +
             (ckpt_ok ? "bit-exact" : "differs") + "; " + lines[0] + "; " + lines[1];
  return o;
}

// -- 5, 6, 7, 10 ---------------------------------------------------------------

ExperimentConfig only(ExperimentConfig cfg, std::vector<Arch> arms) {
  cfg.arms = std::move(arms);
  return cfg;
}

ArmLogger progress(const std::string& tag) {
  return [tag](Arch a, const TrainLogRecord& r) {
    std::cout << "  [" << tag << " " << to_string(a) << "] " << r.to_json().dump() << std::endl;
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string out = "acceptance_out";
  std::size_t iters = 0;
  std::vector<int> selected;
  app.add_option("--out", out, "artefact directory");
  app.add_option("--iters", iters, "override the training iteration count (diagnostics only)");
  app.add_option("--only", selected, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::set<int> want(selected.begin(), selected.end());
  const auto on = [&](int id) { return want.empty() || want.count(id) > 0; };
  const fs::path dir(out);
  fs::create_directories(dir);

  Outcome untrained{false, "not run"};
  if (on(1)) {
    try {
      untrained = criterion1_untrained();
    } catch (const std::exception& e) {
      untrained.detail = std::string("exception: ") + e.what();
    }
  }
  if (on(2)) run_guarded(2, "zero-init identity", criterion2);
  if (on(3)) run_guarded(3, "composite gradient", criterion3);
  if (on(4)) run_guarded(4, "Noise2Noise target statistics", criterion4);
  if (on(8)) run_guarded(8, "metric oracles", criterion8);
  if (on(9)) run_guarded(9, "format stability", [&] { return criterion9(dir); });

  if (on(1) || on(5) || on(6) || on(7) || on(10)) {
    ExperimentConfig cfg = desk_experiment();
    if (iters > 0) cfg.train.total_iters = iters;
    std::cout << "desk experiment: " << cfg.to_json().dump() << std::endl;

    const auto t0 = Clock::now();
    const ExperimentResult first = run_experiment(only(cfg, {Arch::kM3}), progress("run 1"));
    const double secs = seconds_since(t0);
    const ArmResult& m3 = *first.arm(Arch::kM3);
    const auto m3_model = model_from_checkpoint(m3.checkpoint);
    write_checkpoint(dir / "M3.innc", m3.checkpoint);

    if (on(1)) {
      run_guarded(1, "exact invertibility, 100 inputs of 8x8", [&] {
        const Outcome trained = criterion1_trained(m3_model);
        return Outcome{untrained.pass && trained.pass, untrained.detail + "; " + trained.detail};
      });
    }
    if (on(5)) {
      run_guarded(5, "desk-scale denoising gain", [&] {
        const double noisy = first.noisy.psnr().mean, box = first.box.psnr().mean;
        const double den = m3.all_slices.psnr().mean;
        const double ssim_noisy = first.noisy.ssim().mean, ssim_den = m3.all_slices.ssim().mean;
        Outcome o;
        o.pass = den >= noisy + 3.0 && ssim_den > ssim_noisy && den - noisy > box - noisy;
        std::ostringstream s;
        s << "PSNR noisy " << fmt("%.2f", noisy) << " -> M3 " << fmt("%.2f", den) << " dB (gain "
          << fmt("%+.2f", den - noisy) << ", box 3x3 gain " << fmt("%+.2f", box - noisy) << "); SSIM "
          << fmt("%.4f", ssim_noisy) << " -> " << fmt("%.4f", ssim_den) << "; " << cfg.train.total_iters
          << " iterations in " << fmt("%.0f", secs) << " s (target 1800 s)";
        o.detail = s.str();
        return o;
      });
    }
    if (on(6)) {
      run_guarded(6, "cycle residual", [&] {
        const double lr = m3.cycle_residual.value();
        Outcome o;
        o.pass = lr <= 0.01 * first.mean_square_y;
        std::ostringstream s;
        s << "per-pixel L_r " << lr << " vs 0.01 * mean(Y^2) = " << 0.01 * first.mean_square_y << " (ratio "
          << lr / first.mean_square_y << ")";
        o.detail = s.str();
        return o;
      });
    }
    if (on(10)) {
      run_guarded(10, "determinism", [&] {
        const ExperimentResult second = run_experiment(only(cfg, {Arch::kM3}), progress("run 2"));
        const std::string a = encode_checkpoint(m3.checkpoint);
        const std::string b = encode_checkpoint(second.arm(Arch::kM3)->checkpoint);
        const auto ja = report_json(first.report(only(cfg, {Arch::kM3}))).dump();
        const auto jb = report_json(second.report(only(cfg, {Arch::kM3}))).dump();
        const auto ca = report_csv(first.report(only(cfg, {Arch::kM3})));
        const auto cb = report_csv(second.report(only(cfg, {Arch::kM3})));
        Outcome o;
        o.pass = a == b && ja == jb && ca == cb;
        o.detail = std::string("checkpoint ") + (a == b ? "byte-identical" : "differs") + " (" +
                   std::to_string(a.size()) + " bytes), report " + (ja == jb && ca == cb ? "byte-identical" : "differs");
        return o;
      });
    }
    if (on(7)) {
      run_guarded(7, "ablation direction", [&] {
        const ExperimentData data = make_experiment_data(cfg);
        ExperimentResult full = first;
        full.arms.clear();
        for (Arch a : {Arch::kM1, Arch::kM2}) {
          full.arms.push_back(run_arm(cfg, data, a, progress("ablation")));
          write_checkpoint(dir / (to_string(a) + ".innc"), full.arms.back().checkpoint);
        }
        full.arms.push_back(m3);
        const MetricReport rep = full.report(cfg);
        emit_report(rep, dir / "ablation");
        std::cout << report_csv(rep);
        const double m1 = full.arm(Arch::kM1)->end_organ.psnr().mean;
        const double m3_end = m3.end_organ.psnr().mean;
        Outcome o;
        o.pass = m3_end >= m1;
        std::ostringstream s;
        s << "end-organ PSNR M1 " << fmt("%.3f", m1) << ", M2 " << fmt("%.3f", full.arm(Arch::kM2)->end_organ.psnr().mean)
          << ", M3 " << fmt("%.3f", m3_end) << " dB; all slices M1 " << fmt("%.3f", full.arm(Arch::kM1)->all_slices.psnr().mean)
          << ", M2 " << fmt("%.3f", full.arm(Arch::kM2)->all_slices.psnr().mean) << ", M3 "
          << fmt("%.3f", m3.all_slices.psnr().mean) << " dB; report in " << (dir / "ablation").string();
        o.detail = s.str();
        return o;
      });
    }
  }

  std::ofstream file(dir / "summary.txt");
  for (const auto& line : summary) file << line << "\n";
  std::cout << (failures == 0 ? "all selected criteria passed" : std::to_string(failures) + " criterion line(s) failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
