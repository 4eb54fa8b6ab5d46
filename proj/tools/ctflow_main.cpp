// ctflow: batch command-line front end.
//
// Exit codes: 0 success, 1 threshold or numeric failure, 2 usage or config
// error, 3 I/O or file-format error.

#include <glob.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "ctflow/binary_io.hpp"
#include "ctflow/checkpoint.hpp"
#include "ctflow/errors.hpp"
#include "ctflow/experiment.hpp"
#include "ctflow/grad_check.hpp"
#include "ctflow/metrics.hpp"
#include "ctflow/trainer.hpp"
#include "ctflow/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitThreshold = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

// Raised when a command ran but its check did not hold.
struct ThresholdFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(binary::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path + " must hold a JSON object");
  return j;
}

void print_resolved(const std::string& command, const json& resolved) {
  std::cout << command << " resolved config: " << resolved.dump() << "\n";
}

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <std::size_t N>
std::array<std::size_t, N> parse_list(const std::string& text, const char* what) {
  std::array<std::size_t, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) break;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size()) throw ConfigError(std::string(what) + " expects " + std::to_string(N) + " comma-separated integers, got '" + text + "'");
    out[i++] = static_cast<std::size_t>(v);
  }
  if (i != N || std::getline(ss, item, ',')) {
    throw ConfigError(std::string(what) + " expects " + std::to_string(N) + " comma-separated integers, got '" + text + "'");
  }
  return out;
}

Window parse_window(const std::string& text) {
  std::stringstream ss(text);
  std::string lo, hi;
  if (!std::getline(ss, lo, ',') || !std::getline(ss, hi, ',')) throw ConfigError("--window expects lo,hi");
  try {
    return {std::stod(lo), std::stod(hi)};
  } catch (const std::exception&) {
    throw ConfigError("--window expects lo,hi, got '" + text + "'");
  }
}

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  if (out.empty()) throw FormatError(FormatErrorKind::kIo, "no files match '" + pattern + "'");
  return out;
}

void write_json(const fs::path& path, const json& j) { binary::write_file(path, j.dump(2) + "\n"); }

// Simple commands take a flat JSON config whose keys are the long flag names
// with '-' replaced by '_'. Flags given on the command line win.
class FlatOptions {
 public:
  explicit FlatOptions(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON config; flags override it");
  }

  template <typename V>
  CLI::Option* add(const std::string& flag, V& var, const std::string& help) {
    CLI::Option* opt = app_->add_option(flag, var, help);
    std::string key = flag.substr(2);
    std::replace(key.begin(), key.end(), '-', '_');
    entries_.push_back({key, opt, [&var](const json& j) { var = j.get<V>(); }, [&var] { return json(var); }});
    return opt;
  }

  CLI::Option* add_flag(const std::string& flag, bool& var, const std::string& help) {
    CLI::Option* opt = app_->add_flag(flag, var, help);
    std::string key = flag.substr(2);
    std::replace(key.begin(), key.end(), '-', '_');
    entries_.push_back({key, opt, [&var](const json& j) { var = j.get<bool>(); }, [&var] { return json(var); }});
    return opt;
  }

  /// Applies the config file underneath the flags and returns the resolved values.
  json resolve() {
    const json cfg = load_config(config_path_);
    for (const auto& [key, value] : cfg.items()) {
      bool known = false;
      for (const auto& e : entries_) known = known || e.key == key;
      if (!known) throw ConfigError("unknown config key '" + key + "'");
    }
    json resolved = json::object();
    for (const auto& e : entries_) {
      if (e.opt->count() == 0 && cfg.contains(e.key)) {
        try {
          e.set(cfg.at(e.key));
        } catch (const json::exception& ex) {
          throw ConfigError("bad value for config key '" + e.key + "': " + ex.what());
        }
      }
      resolved[e.key] = e.get();
    }
    return resolved;
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<void(const json&)> set;
    std::function<json()> get;
  };
  CLI::App* app_;
  std::string config_path_;
  std::vector<Entry> entries_;
};

// -- gen-phantom --------------------------------------------------------------

struct GenPhantom {
  std::string dims = "32,64,64", kind = "ellipses", out;
  std::uint64_t seed = 0;

  int run(const json& resolved) {
    print_resolved("gen-phantom", resolved);
    const Dims3 d = parse_list<3>(dims, "--dims");
    if (out.empty()) throw ConfigError("--out is required");
    const PhantomKind k = parse_phantom_kind(kind);
    const fs::path dir = fs::absolute(out).parent_path();
    if (!fs::is_directory(dir) || ::access(dir.c_str(), W_OK) != 0) {
      throw ConfigError("cannot write --out " + out + ": directory " + dir.string() + " is not writable");
    }
    if (d[0] < 3) warn("need ≥3 slices for training use");
    if (d[1] < 8 || d[2] < 8) throw ConfigError("phantom slices need at least 8x8 pixels");
    // Thin stacks are cut from an 8-slice phantom.
    Phantom p = make_phantom(k, {std::max<std::size_t>(d[0], 8), d[1], d[2]}, seed);
    if (d[0] < 8) {
      Volume cut(d, p.volume.spacing);
      std::copy_n(p.volume.values.begin(), cut.values.size(), cut.values.begin());
      p.volume = std::move(cut);
      std::erase_if(p.organ_end_slices, [&](std::size_t z) { return z >= d[0]; });
    }
    write_volume(p.volume, out);
    json side = p.sidecar(k, seed);
    side["resolved_config"] = resolved;
    write_json(sidecar_path(out), side);
    std::cout << "wrote " << out << " dims " << d[0] << "x" << d[1] << "x" << d[2] << ", HU range [" << p.hu_min
              << ", " << p.hu_max << "], " << p.organ_end_slices.size() << " organ-end slices\n";
    return kExitOk;
  }
};

// -- add-noise ----------------------------------------------------------------

struct AddNoise {
  std::string in, out, window = "-1024,3071";
  double sigma = 0.0, a = 0.0, b = 0.0;
  bool signal_dependent = false;
  std::uint64_t seed = 0;

  int run(const json& resolved) {
    print_resolved("add-noise", resolved);
    if (in.empty() || out.empty()) throw ConfigError("--in and --out are required");
    const Window w = parse_window(window);
    const NoiseSpec spec = signal_dependent ? NoiseSpec::signal_dependent(a, b, seed) : NoiseSpec::gaussian(sigma, seed);
    spec.validate();
    const Volume v = read_volume(in);
    const Volume noisy = denormalize(add_noise(normalize(v, w), spec), w);
    write_volume(noisy, out);
    write_json(sidecar_path(out), {{"source", in}, {"resolved_config", resolved}});
    std::cout << "wrote " << out << "\n";
    return kExitOk;
  }
};

// -- train --------------------------------------------------------------------

struct Train {
  std::string config_path, data, arch, out, resume, log_path;
  std::size_t iters = 0;
  std::uint64_t seed = 0;
  double lr0 = 0.0, w_r = 0.0;
  CLI::Option *arch_opt = nullptr, *iters_opt = nullptr, *seed_opt = nullptr, *lr_opt = nullptr, *wr_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "training config JSON; flags override it");
    app->add_option("--data", data, "glob of noisy RVOL volumes (HU)")->required();
    arch_opt = app->add_option("--arch", arch, "M1, M2 or M3");
    app->add_option("--out", out, "checkpoint path")->required();
    app->add_option("--resume", resume, "continue from a training checkpoint");
    app->add_option("--log", log_path, "JSON-lines training log (default: <out>.log.jsonl)");
    iters_opt = app->add_option("--iters", iters, "total iterations");
    seed_opt = app->add_option("--seed", seed, "training seed");
    lr_opt = app->add_option("--lr0", lr0, "initial learning rate");
    wr_opt = app->add_option("--w-r", w_r, "reverse-loss weight");
  }

  int run() {
    json j = load_config(config_path);
    if (arch_opt->count()) j["arch"] = arch;
    if (iters_opt->count()) j["total_iters"] = iters;
    if (seed_opt->count()) j["seed"] = seed;
    if (lr_opt->count()) j["lr0"] = lr0;
    if (wr_opt->count()) j["w_r"] = w_r;
    std::vector<std::string> warnings;
    TrainConfig cfg = TrainConfig::from_json(j, &warnings);
    for (const auto& w : warnings) warn(w);

    std::vector<Volume> volumes;
    const auto files = expand_glob(data);
    for (const auto& f : files) volumes.push_back(normalize(read_volume(f), cfg.window));

    std::optional<Trainer> trainer;
    if (!resume.empty()) {
      const auto saved = read_checkpoint(resume);
      std::optional<std::size_t> total;
      if (iters_opt->count()) total = iters;
      trainer.emplace(Trainer::resume(saved, std::move(volumes), total));
      std::cout << "resuming at iteration " << trainer->iteration() << "\n";
    } else {
      trainer.emplace(cfg, std::move(volumes));
    }
    json resolved = trainer->config().to_json();
    resolved["data"] = files;
    print_resolved("train", resolved);

    const fs::path log_file = log_path.empty() ? fs::path(out + ".log.jsonl") : fs::path(log_path);
    std::ofstream log(log_file, resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw FormatError(FormatErrorKind::kIo, "cannot open " + log_file.string());
    trainer->run([&](const TrainLogRecord& r) {
      log << r.to_json().dump() << "\n" << std::flush;
      std::cout << "iter " << r.iter << " lr " << r.lr << " L_f " << r.loss_f;
      if (r.loss_r) std::cout << " L_r " << *r.loss_r;
      std::cout << " (" << r.secs << " s)\n";
    });
    CheckpointData ckpt = trainer->checkpoint();
    ckpt.meta["data"] = files;
    write_checkpoint(out, ckpt);
    std::cout << "wrote " << out << " after " << trainer->iteration() << " iterations\n";
    return kExitOk;
  }
};

// -- denoise ------------------------------------------------------------------

struct Denoise {
  std::string ckpt, in, out, window = "-1024,3071";
  std::size_t slices_per_batch = 4;

  int run(const json& resolved) {
    print_resolved("denoise", resolved);
    if (ckpt.empty() || in.empty() || out.empty()) throw ConfigError("--ckpt, --in and --out are required");
    const std::string bytes = binary::read_file(ckpt);
    const auto model = model_from_checkpoint(decode_checkpoint(bytes));
    const Window w = parse_window(window);
    const Volume v = read_volume(in);
    const Volume den = denormalize(denoise_normalized(model, normalize(v, w), slices_per_batch), w);
    write_volume(den, out);
    write_json(sidecar_path(out), {{"source", in}, {"checkpoint", ckpt}, {"checkpoint_fnv1a64", hex64(fnv1a64(bytes))},
                                   {"resolved_config", resolved}});
    std::cout << "wrote " << out << "\n";
    return kExitOk;
  }
};

// -- eval ---------------------------------------------------------------------

struct Eval {
  std::string clean, noisy, denoised, ckpt, out, name = "model", window = "-1024,3071", slices;

  int run(const json& resolved) {
    print_resolved("eval", resolved);
    if (clean.empty() || noisy.empty() || out.empty()) throw ConfigError("--clean, --noisy and --out are required");
    if (denoised.empty() == ckpt.empty()) throw ConfigError("give exactly one of --denoised and --ckpt");
    const Window w = parse_window(window);
    const Volume c = normalize(read_volume(clean), w), n = normalize(read_volume(noisy), w);
    Volume est;
    json meta = {{"clean", clean}, {"noisy", noisy}, {"window", {w.lo, w.hi}}, {"resolved_config", resolved}};
    if (!ckpt.empty()) {
      const std::string bytes = binary::read_file(ckpt);
      est = denoise_normalized(model_from_checkpoint(decode_checkpoint(bytes)), n);
      meta["checkpoint"] = ckpt;
      meta["checkpoint_fnv1a64"] = hex64(fnv1a64(bytes));
    } else {
      est = normalize(read_volume(denoised), w);
      meta["denoised"] = denoised;
    }
    std::vector<std::size_t> zs;
    if (!slices.empty()) {
      std::stringstream ss(slices);
      std::string item;
      while (std::getline(ss, item, ',')) zs.push_back(std::stoul(item));
      for (std::size_t z : zs) {
        if (z >= c.depth()) throw ConfigError("slice " + std::to_string(z) + " out of range");
      }
    }
    MetricReport report;
    report.entries = {evaluate_volume("noisy", c, n, n, zs), evaluate_volume(name, c, n, est, zs)};
    report.metadata = meta;
    emit_report(report, out);
    std::cout << report_csv(report);
    return kExitOk;
  }
};

// -- check-invert -------------------------------------------------------------

struct CheckInvert {
  std::string ckpt, shape = "64,8,8";
  std::size_t trials = 100, channels = 64, blocks = 12;
  std::uint64_t seed = 0;
  double gain = 0.1, tolerance = 1e-4;

  int run(const json& resolved) {
    print_resolved("check-invert", resolved);
    ModelBundle<float> model;
    if (!ckpt.empty()) {
      model = model_from_checkpoint(read_checkpoint(ckpt));
      if (!model.invertible) throw ConfigError(to_string(model.arch) + " checkpoint has no invertible core");
    } else {
      ModelConfig mc;
      mc.channels = channels;
      mc.blocks = blocks;
      model = build_model<float>(Arch::kM3, mc, seed);
      if (gain > 0.0) randomize_projections(model.parameters(), seed + 1, gain);
    }
    const auto chw = parse_list<3>(shape, "--shape");
    double err = 0.0;
    if (ckpt.empty()) {
      err = core_roundtrip_error(*model.invertible, trials, chw, seed + 2);
    } else {
      // trained cores are checked on encoded uniform images
      if (chw[0] != model.config.channels) {
        throw ShapeError("core input needs " + std::to_string(model.config.channels) + " channels, got " +
                         std::to_string(chw[0]));
      }
      std::mt19937_64 rng(seed + 2);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      Tensor<float> images({trials, 1, chw[1], chw[2]});
      for (float& v : images.data()) v = static_cast<float>(unit(rng));
      Tensor<float> encoded;
      {
        NoGradGuard no_grad;
        encoded = model.invertible->encode(Var<float>(images)).value();
      }
      err = core_roundtrip_error(*model.invertible, encoded);
    }
    const bool pass = err <= tolerance;
    std::cout << "max roundtrip error " << err << " over " << trials << " inputs: " << (pass ? "PASS" : "FAIL") << "\n";
    if (!pass) throw ThresholdFailure("roundtrip error above " + std::to_string(tolerance));
    return kExitOk;
  }
};

// -- grad-check ---------------------------------------------------------------

struct GradCheck {
  std::size_t channels = 8, blocks = 2, size = 8, coords = 6;
  std::uint64_t seed = 5;
  double gain = 0.5, eps = 1e-6, tolerance = 1e-5;

  int run(const json& resolved) {
    print_resolved("grad-check", resolved);
    ModelConfig mc;
    mc.channels = channels;
    mc.blocks = blocks;
    mc.growth = 4;
    mc.dense_layers = 2;
    const auto r = composite_grad_check(mc, size, seed, gain, eps, coords);
    const bool pass = r.max_rel_error <= tolerance;
    std::cout << "max relative error " << r.max_rel_error << " over " << r.coordinates << " coordinates (worst "
              << r.worst_parameter << "[" << r.worst_index << "]: analytic " << r.worst_analytic << ", numeric "
              << r.worst_numeric << "): " << (pass ? "PASS" : "FAIL") << "\n";
    if (!pass) throw ThresholdFailure("gradient check above " + std::to_string(tolerance));
    return kExitOk;
  }
};

// -- ablate -------------------------------------------------------------------

struct Ablate {
  std::string config_path, out;
  std::size_t iters = 0;
  std::uint64_t seed = 0;
  CLI::Option *iters_opt = nullptr, *seed_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "experiment config JSON; flags override it");
    app->add_option("--out", out, "output directory")->required();
    iters_opt = app->add_option("--iters", iters, "training iterations per arm");
    seed_opt = app->add_option("--seed", seed, "training seed");
  }

  int run() {
    json j = load_config(config_path);
    if (iters_opt->count()) j["train"]["total_iters"] = iters;
    if (seed_opt->count()) j["train"]["seed"] = seed;
    std::vector<std::string> warnings;
    const ExperimentConfig cfg = ExperimentConfig::from_json(j, &warnings);
    for (const auto& w : warnings) warn(w);
    print_resolved("ablate", cfg.to_json());
    fs::create_directories(out);

    const auto result = run_experiment(cfg, [&](Arch a, const TrainLogRecord& r) {
      std::cout << to_string(a) << " iter " << r.iter << " L_f " << r.loss_f;
      if (r.loss_r) std::cout << " L_r " << *r.loss_r;
      std::cout << " (" << r.secs << " s)\n" << std::flush;
    });
    for (const auto& a : result.arms) write_checkpoint(fs::path(out) / (to_string(a.arch) + ".innc"), a.checkpoint);
    const MetricReport report = result.report(cfg);
    emit_report(report, out);
    std::cout << report_csv(report);

    std::vector<std::string> losers;
    for (const auto& a : result.arms) {
      if (!(a.all_slices.psnr().mean > result.noisy.psnr().mean)) losers.push_back(to_string(a.arch));
    }
    if (!losers.empty()) {
      std::string names;
      for (const auto& n : losers) names += (names.empty() ? "" : ", ") + n;
      throw ThresholdFailure("did not beat the noisy input PSNR: " + names);
    }
    return kExitOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised CT denoising with an invertible network"};
  app.require_subcommand(1);

  GenPhantom gen;
  auto* gen_cmd = app.add_subcommand("gen-phantom", "write a synthetic phantom volume");
  FlatOptions gen_opts(gen_cmd);
  gen_opts.add("--dims", gen.dims, "z,y,x");
  gen_opts.add("--seed", gen.seed, "phantom seed");
  gen_opts.add("--kind", gen.kind, "ellipses or shepp_logan_like");
  gen_opts.add("--out", gen.out, "output .rvol path");

  AddNoise noise;
  auto* noise_cmd = app.add_subcommand("add-noise", "add per-slice independent noise");
  FlatOptions noise_opts(noise_cmd);
  noise_opts.add("--in", noise.in, "input .rvol (HU)");
  noise_opts.add("--out", noise.out, "output .rvol (HU)");
  noise_opts.add("--sigma", noise.sigma, "Gaussian std in normalised units");
  noise_opts.add_flag("--signal-dependent", noise.signal_dependent, "std = a + b * value instead");
  noise_opts.add("--a", noise.a, "signal-dependent offset");
  noise_opts.add("--b", noise.b, "signal-dependent slope");
  noise_opts.add("--seed", noise.seed, "noise seed");
  noise_opts.add("--window", noise.window, "HU window lo,hi");

  Train train;
  auto* train_cmd = app.add_subcommand("train", "train M1, M2 or M3 on noisy volumes");
  train.add(train_cmd);

  Denoise den;
  auto* den_cmd = app.add_subcommand("denoise", "denoise a volume with a checkpoint");
  FlatOptions den_opts(den_cmd);
  den_opts.add("--ckpt", den.ckpt, "checkpoint");
  den_opts.add("--in", den.in, "noisy .rvol (HU)");
  den_opts.add("--out", den.out, "denoised .rvol (HU)");
  den_opts.add("--window", den.window, "HU window lo,hi");
  den_opts.add("--slices-per-batch", den.slices_per_batch, "slices per forward pass");

  Eval ev;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM report against a clean volume");
  FlatOptions eval_opts(eval_cmd);
  eval_opts.add("--clean", ev.clean, "clean .rvol");
  eval_opts.add("--noisy", ev.noisy, "noisy .rvol");
  eval_opts.add("--denoised", ev.denoised, "denoised .rvol");
  eval_opts.add("--ckpt", ev.ckpt, "checkpoint to denoise --noisy with");
  eval_opts.add("--name", ev.name, "report row name");
  eval_opts.add("--slices", ev.slices, "comma-separated slice indices (default: all)");
  eval_opts.add("--window", ev.window, "HU window lo,hi");
  eval_opts.add("--out", ev.out, "report directory");

  CheckInvert inv;
  auto* inv_cmd = app.add_subcommand("check-invert", "roundtrip the invertible core on random inputs");
  FlatOptions inv_opts(inv_cmd);
  inv_opts.add("--ckpt", inv.ckpt, "M3 checkpoint (default: fresh model)");
  inv_opts.add("--trials", inv.trials, "random inputs");
  inv_opts.add("--shape", inv.shape, "C,H,W of each input");
  inv_opts.add("--channels", inv.channels, "fresh model width");
  inv_opts.add("--blocks", inv.blocks, "fresh model depth");
  inv_opts.add("--gain", inv.gain, "fresh model projection gain (0 keeps the identity init)");
  inv_opts.add("--seed", inv.seed, "seed");
  inv_opts.add("--tolerance", inv.tolerance, "max-abs tolerance");

  GradCheck gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference check of L_f + L_r");
  FlatOptions gc_opts(gc_cmd);
  gc_opts.add("--channels", gc.channels, "model width");
  gc_opts.add("--blocks", gc.blocks, "coupling blocks");
  gc_opts.add("--size", gc.size, "input height and width");
  gc_opts.add("--coords", gc.coords, "coordinates sampled per large tensor");
  gc_opts.add("--gain", gc.gain, "projection gain");
  gc_opts.add("--eps", gc.eps, "difference step");
  gc_opts.add("--seed", gc.seed, "seed");
  gc_opts.add("--tolerance", gc.tolerance, "max relative error");

  Ablate abl;
  auto* abl_cmd = app.add_subcommand("ablate", "train M1, M2, M3 and emit the comparison report");
  abl.add(abl_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return gen.run(gen_opts.resolve());
    if (*noise_cmd) return noise.run(noise_opts.resolve());
    if (*train_cmd) return train.run();
    if (*den_cmd) return den.run(den_opts.resolve());
    if (*eval_cmd) return ev.run(eval_opts.resolve());
    if (*inv_cmd) return inv.run(inv_opts.resolve());
    if (*gc_cmd) return gc.run(gc_opts.resolve());
    if (*abl_cmd) return abl.run();
  } catch (const ThresholdFailure& e) {
    std::cerr << "FAIL: " << e.what() << "\n";
    return kExitThreshold;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitThreshold;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitThreshold;
  }
  return kExitUsage;
}
