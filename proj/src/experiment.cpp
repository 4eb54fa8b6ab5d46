#include "ctflow/experiment.hpp"

#include <cmath>
#include <cstdio>

#include "ctflow/binary_io.hpp"
#include "ctflow/errors.hpp"

namespace ctflow {

void ExperimentConfig::validate() const {
  train.validate();
  for (std::size_t d : dims) {
    if (d < 8) throw ConfigError("experiment dims must be at least 8 per axis");
  }
  if (dims[1] < train.patch_size || dims[2] < train.patch_size) {
    throw ConfigError("patch_size " + std::to_string(train.patch_size) + " exceeds the phantom slices");
  }
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be finite and non-negative");
  if (arms.empty()) throw ConfigError("experiment needs at least one arm");
  if (train_seed == test_seed) throw ConfigError("train_seed and test_seed must differ");
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json arm_names = nlohmann::json::array();
  for (Arch a : arms) arm_names.push_back(to_string(a));
  auto t = train.to_json();
  t.erase("arch");
  return {{"train", t},
          {"dims", dims},
          {"phantom", to_string(phantom)},
          {"sigma", sigma},
          {"train_seed", train_seed},
          {"test_seed", test_seed},
          {"arms", arm_names}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, std::vector<std::string>* warnings) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c = desk_experiment();
  const auto known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  if (j.contains("train")) {
    auto t = c.train.to_json();
    t.erase("arch");
    if (!j.at("train").is_object()) throw ConfigError("'train' must be an object");
    for (const auto& [key, value] : j.at("train").items()) {
      if (key == "arch") throw ConfigError("'train.arch' is set per arm; use 'arms'");
      if (!t.contains(key)) throw ConfigError("unknown config key 'train." + key + "'");
      t[key] = value;
    }
    c.train = TrainConfig::from_json(t, warnings);
  }
  try {
    if (j.contains("dims")) c.dims = j.at("dims").get<Dims3>();
    if (j.contains("phantom")) c.phantom = parse_phantom_kind(j.at("phantom").get<std::string>());
    if (j.contains("sigma")) c.sigma = j.at("sigma").get<double>();
    if (j.contains("train_seed")) c.train_seed = j.at("train_seed").get<std::uint64_t>();
    if (j.contains("test_seed")) c.test_seed = j.at("test_seed").get<std::uint64_t>();
    if (j.contains("arms")) {
      c.arms.clear();
      for (const auto& a : j.at("arms")) c.arms.push_back(parse_arch(a.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig desk_experiment() {
  ExperimentConfig c;
  TrainConfig& t = c.train;
  t.model.channels = 32;
  t.model.blocks = 12;
  t.batch_size = 8;
  t.patch_size = 48;
  t.patches_per_slice = 4;
  t.lr0 = 3e-4;  // 1e-3 diverges within 20 iterations at this width
  t.lr_warmup = 20;
  t.lr_halve_every = 300;
  t.total_iters = 400;
  t.log_every = 10;
  t.seed = 1;
  return c;
}

ExperimentData make_experiment_data(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentData d;
  d.train_phantom = make_phantom(cfg.phantom, cfg.dims, cfg.train_seed);
  d.test_phantom = make_phantom(cfg.phantom, cfg.dims, cfg.test_seed);
  d.train_clean = normalize(d.train_phantom.volume, cfg.train.window);
  d.test_clean = normalize(d.test_phantom.volume, cfg.train.window);
  d.train_noisy = add_noise(d.train_clean, NoiseSpec::gaussian(cfg.sigma, cfg.train_seed + 1));
  d.test_noisy = add_noise(d.test_clean, NoiseSpec::gaussian(cfg.sigma, cfg.test_seed + 1));
  return d;
}

Volume box_filter(const Volume& v) {
  v.validate();
  Volume out = v;
  const long H = static_cast<long>(v.height()), W = static_cast<long>(v.width());
  for (std::size_t z = 0; z < v.depth(); ++z)
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double acc = 0.0;
        int n = 0;
        for (long yy = std::max(0L, y - 1); yy <= std::min(H - 1, y + 1); ++yy)
          for (long xx = std::max(0L, x - 1); xx <= std::min(W - 1, x + 1); ++xx) {
            acc += v.at(z, yy, xx);
            ++n;
          }
        out.at(z, y, x) = static_cast<float>(acc / n);
      }
  return out;
}

double cycle_residual(const ModelBundle<float>& model, const Volume& noisy) {
  const Volume xhat = denoise_normalized(model, noisy);
  const Volume yhat = reconstruct_normalized(model, xhat);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = noisy.slice_size(); i + noisy.slice_size() < noisy.values.size(); ++i) {
    const double d = static_cast<double>(yhat.values[i]) - noisy.values[i];
    acc += d * d;
    ++n;
  }
  if (n == 0) throw ShapeError("cycle_residual needs at least 3 slices");
  return acc / static_cast<double>(n);
}

ArmResult run_arm(const ExperimentConfig& cfg, const ExperimentData& data, Arch arch, const ArmLogger& on_log) {
  TrainConfig tc = cfg.train;
  tc.arch = arch;
  Trainer trainer(tc, {data.train_noisy});
  trainer.run([&](const TrainLogRecord& r) {
    if (on_log) on_log(arch, r);
  });
  ArmResult res;
  res.arch = arch;
  res.checkpoint = trainer.checkpoint();
  res.log = trainer.log();
  const Volume est = denoise_normalized(trainer.model(), data.test_noisy);
  res.all_slices = evaluate_volume(to_string(arch), data.test_clean, data.test_noisy, est);
  res.end_organ =
      evaluate_volume(to_string(arch) + "@end", data.test_clean, data.test_noisy, est, data.test_phantom.organ_end_slices);
  if (trainer.model().has_reverse()) res.cycle_residual = cycle_residual(trainer.model(), data.train_noisy);
  return res;
}

const ArmResult* ExperimentResult::arm(Arch arch) const {
  for (const auto& a : arms) {
    if (a.arch == arch) return &a;
  }
  return nullptr;
}

MetricReport ExperimentResult::report(const ExperimentConfig& cfg) const {
  MetricReport r;
  r.entries = {noisy, box};
  for (const auto& a : arms) r.entries.push_back(a.all_slices);
  r.entries.push_back(noisy_end_organ);
  r.entries.push_back(box_end_organ);
  for (const auto& a : arms) r.entries.push_back(a.end_organ);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : r.entries) rows.push_back(e.name);
  nlohmann::json residuals = nlohmann::json::object();
  for (const auto& a : arms) {
    if (a.cycle_residual) residuals[to_string(a.arch)] = *a.cycle_residual;
  }
  r.metadata = {{"experiment", cfg.to_json()},
                {"rows", rows},
                {"window", {cfg.train.window.lo, cfg.train.window.hi}},
                {"dataset", {{"phantom", to_string(cfg.phantom)},
                             {"train_seed", cfg.train_seed},
                             {"test_seed", cfg.test_seed},
                             {"noise_seeds", {cfg.train_seed + 1, cfg.test_seed + 1}}}},
                {"mean_square_y", mean_square_y},
                {"cycle_residual", residuals}};
  for (const auto& a : arms) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(encode_checkpoint(a.checkpoint))));
    r.metadata["checkpoints"][to_string(a.arch)] = hex;
  }
  return r;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ArmLogger& on_log) {
  const ExperimentData data = make_experiment_data(cfg);
  ExperimentResult res;
  const Volume box = box_filter(data.test_noisy);
  const auto& ends = data.test_phantom.organ_end_slices;
  res.noisy = evaluate_volume("noisy", data.test_clean, data.test_noisy, data.test_noisy);
  res.box = evaluate_volume("box3x3", data.test_clean, data.test_noisy, box);
  res.noisy_end_organ = evaluate_volume("noisy@end", data.test_clean, data.test_noisy, data.test_noisy, ends);
  res.box_end_organ = evaluate_volume("box3x3@end", data.test_clean, data.test_noisy, box, ends);
  res.mean_square_y = mean_square({data.train_noisy});
  for (Arch a : cfg.arms) res.arms.push_back(run_arm(cfg, data, a, on_log));
  return res;
}

// -- property checks ------------------------------------------------------------

template <typename T>
double core_roundtrip_error(const DenoiserModel<T>& model, std::size_t trials, std::array<std::size_t, 3> chw,
                            std::uint64_t seed, std::size_t batch) {
  if (chw[0] != model.config().channels) {
    throw ShapeError("core input needs " + std::to_string(model.config().channels) + " channels, got " +
                     std::to_string(chw[0]));
  }
  if (batch == 0) throw ConfigError("batch must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t done = 0; done < trials;) {
    const std::size_t n = std::min(batch, trials - done);
    Tensor<T> x({n, chw[0], chw[1], chw[2]});
    for (T& v : x.data()) v = static_cast<T>(normal(rng));
    const auto back = model.core_inverse(model.core_forward(Var<T>(x)));
    worst = std::max(worst, max_abs_diff(back.value(), x));
    done += n;
  }
  return worst;
}

template <typename T>
double core_roundtrip_error(const DenoiserModel<T>& model, const Tensor<T>& inputs, std::size_t batch) {
  if (inputs.rank() != 4 || inputs.dim(1) != model.config().channels) {
    throw ShapeError("core inputs must be [N, " + std::to_string(model.config().channels) + ", H, W], got " +
                     shape_str(inputs.shape()));
  }
  if (batch == 0) throw ConfigError("batch must be positive");
  const std::size_t per = inputs.numel() / inputs.dim(0);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t done = 0; done < inputs.dim(0);) {
    const std::size_t n = std::min(batch, inputs.dim(0) - done);
    Tensor<T> x({n, inputs.dim(1), inputs.dim(2), inputs.dim(3)});
    std::copy_n(inputs.data().begin() + static_cast<std::ptrdiff_t>(done * per), n * per, x.data().begin());
    const auto back = model.core_inverse(model.core_forward(Var<T>(x)));
    worst = std::max(worst, max_abs_diff(back.value(), x));
    done += n;
  }
  return worst;
}

template double core_roundtrip_error(const DenoiserModel<float>&, const Tensor<float>&, std::size_t);
template double core_roundtrip_error(const DenoiserModel<double>&, const Tensor<double>&, std::size_t);
template double core_roundtrip_error(const DenoiserModel<float>&, std::size_t, std::array<std::size_t, 3>,
                                     std::uint64_t, std::size_t);
template double core_roundtrip_error(const DenoiserModel<double>&, std::size_t, std::array<std::size_t, 3>,
                                     std::uint64_t, std::size_t);

GradCheckReport composite_grad_check(const ModelConfig& cfg, std::size_t size, std::uint64_t seed, double gain,
                                     double eps, std::size_t coords_per_tensor) {
  const auto model = build_model<double>(Arch::kM3, cfg, seed);
  randomize_projections(model.parameters(), seed + 1, gain);
  std::mt19937_64 rng(seed + 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor<double> y({1, 1, size, size}), target({1, 1, size, size});
  for (double& v : y.data()) v = unit(rng);
  for (double& v : target.data()) v = unit(rng);
  const Var<double> yv(y), tv(target);
  ModelBundle<long double> wide = build_model<long double>(Arch::kM3, cfg, seed);
  copy_parameters(model, wide);
  const Var<long double> ywide(y.cast<long double>()), twide(target.cast<long double>());
  return grad_check_parameters(
      [&] {
        const auto x = model.denoise(yv);
        return add(loss_forward(x, tv), loss_reverse(model.reconstruct(x), yv));
      },
      model.parameters(),
      [&] {
        const auto x = wide.denoise(ywide);
        return add(loss_forward(x, twide), loss_reverse(wide.reconstruct(x), ywide));
      },
      wide.parameters(), eps, coords_per_tensor, seed + 3);
}

}  // namespace ctflow
