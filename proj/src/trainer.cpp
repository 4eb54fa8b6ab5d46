#include "ctflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "ctflow/errors.hpp"

namespace ctflow {

// -- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  auto positive = [](const char* name, double v) {
    if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive("batch_size", static_cast<double>(batch_size));
  positive("lr0", lr0);
  positive("lr_halve_every", static_cast<double>(lr_halve_every));
  positive("total_iters", static_cast<double>(total_iters));
  positive("patch_size", static_cast<double>(patch_size));
  positive("patches_per_slice", static_cast<double>(patches_per_slice));
  positive("adam_eps", adam_eps);
  positive("w_f", w_f);
  positive("log_every", static_cast<double>(log_every));
  if (w_r < 0.0) throw ConfigError("w_r must be non-negative");
  for (double b : adam_betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("adam_betas must lie in [0, 1)");
  }
  if (patch_size % model.unshuffle != 0) {
    throw ConfigError("patch_size " + std::to_string(patch_size) + " is not divisible by r=" +
                      std::to_string(model.unshuffle));
  }
  if (!(window.lo < window.hi)) throw ConfigError("window must satisfy lo < hi");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"arch", to_string(arch)},
          {"channels", model.channels},
          {"blocks", model.blocks},
          {"r", model.unshuffle},
          {"s_max", model.s_max},
          {"growth", model.growth},
          {"dense_layers", model.dense_layers},
          {"leaky_slope", model.leaky_slope},
          {"batch_size", batch_size},
          {"lr0", lr0},
          {"lr_halve_every", lr_halve_every},
          {"lr_warmup", lr_warmup},
          {"total_iters", total_iters},
          {"patch_size", patch_size},
          {"patches_per_slice", patches_per_slice},
          {"adam_betas", adam_betas},
          {"adam_eps", adam_eps},
          {"seed", seed},
          {"w_f", w_f},
          {"w_r", w_r},
          {"log_every", log_every},
          {"window", {window.lo, window.hi}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, std::vector<std::string>* warnings) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainConfig c;
  const auto known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    if (j.contains("arch")) c.arch = parse_arch(j.at("arch").get<std::string>());
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    read("channels", c.model.channels);
    read("blocks", c.model.blocks);
    read("r", c.model.unshuffle);
    read("s_max", c.model.s_max);
    read("growth", c.model.growth);
    read("dense_layers", c.model.dense_layers);
    read("leaky_slope", c.model.leaky_slope);
    read("batch_size", c.batch_size);
    read("lr0", c.lr0);
    read("lr_halve_every", c.lr_halve_every);
    read("lr_warmup", c.lr_warmup);
    read("total_iters", c.total_iters);
    read("patch_size", c.patch_size);
    read("patches_per_slice", c.patches_per_slice);
    read("adam_betas", c.adam_betas);
    read("adam_eps", c.adam_eps);
    read("seed", c.seed);
    read("w_f", c.w_f);
    read("w_r", c.w_r);
    read("log_every", c.log_every);
    if (j.contains("window")) {
      const auto w = j.at("window").get<std::array<double, 2>>();
      c.window = {w[0], w[1]};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  if (warnings && c.arch == Arch::kM1 && j.contains("w_r")) warnings->push_back("reverse loss ignored for M1");
  return c;
}

double lr_schedule(std::size_t iter, const TrainConfig& cfg) {
  const double lr = std::ldexp(cfg.lr0, -static_cast<int>(iter / cfg.lr_halve_every));
  if (cfg.lr_warmup == 0 || iter >= cfg.lr_warmup) return lr;
  return lr * static_cast<double>(iter + 1) / static_cast<double>(cfg.lr_warmup);
}

// -- losses -----------------------------------------------------------------

namespace {

template <typename T>
Var<T> batch_sse(const char* what, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(a.shape()) + " vs target " + shape_str(b.shape()));
  }
  if (a.shape().empty() || a.dim(0) == 0) throw ShapeError(std::string(what) + ": empty batch");
  const auto d = sub(a, b);
  return scale(sum(mul(d, d)), T(1) / static_cast<T>(a.dim(0)));
}

}  // namespace

template <typename T>
Var<T> loss_forward(const Var<T>& denoised, const Var<T>& target) {
  return batch_sse("loss_forward", denoised, target);
}

template <typename T>
Var<T> loss_reverse(const Var<T>& reconstructed, const Var<T>& noisy) {
  return batch_sse("loss_reverse", reconstructed, noisy);
}

template Var<float> loss_forward(const Var<float>&, const Var<float>&);
template Var<double> loss_forward(const Var<double>&, const Var<double>&);
template Var<float> loss_reverse(const Var<float>&, const Var<float>&);
template Var<double> loss_reverse(const Var<double>&, const Var<double>&);
template Var<long double> loss_forward(const Var<long double>&, const Var<long double>&);
template Var<long double> loss_reverse(const Var<long double>&, const Var<long double>&);

// -- Adam -------------------------------------------------------------------

Adam::Adam(ParameterList<float> params, std::array<double, 2> betas, double eps)
    : params_(std::move(params)), beta1_(betas[0]), beta2_(betas[1]), eps_(eps) {
  for (const auto& p : params_) {
    state_.m.emplace(p.name, Tensor<float>(p.var.shape()));
    state_.v.emplace(p.name, Tensor<float>(p.var.shape()));
  }
}

void Adam::set_state(AdamState s) {
  for (const auto& p : params_) {
    const auto m = s.m.find(p.name), v = s.v.find(p.name);
    if (m == s.m.end() || v == s.v.end() || m->second.shape() != p.var.shape() || v->second.shape() != p.var.shape()) {
      throw FormatError(FormatErrorKind::kMalformedHeader, "optimiser state missing or misshaped for " + p.name);
    }
  }
  state_ = std::move(s);
}

void Adam::step(double lr, std::size_t iteration) {
  // Check everything first so a bad gradient leaves the parameters untouched.
  for (const auto& p : params_) {
    if (!p.var.has_grad()) continue;
    const auto g = p.var.grad();
    if (!all_finite(g)) {
      double norm = 0.0;
      for (float x : g.data()) norm += static_cast<double>(x) * x;
      std::ostringstream msg;
      msg << "non-finite gradient at iteration " << iteration << " in parameter " << p.name << " (grad norm "
          << std::sqrt(norm) << ")";
      throw NumericError(msg.str());
    }
  }
  ++state_.step;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
  const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  for (const auto& p : params_) {
    Tensor<float>& m = state_.m.at(p.name);
    Tensor<float>& v = state_.v.at(p.name);
    Tensor<float>& w = Var<float>(p.var).mutable_value();
    const Tensor<float> g = p.var.has_grad() ? p.var.grad() : Tensor<float>(p.var.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * m_hat / (std::sqrt(v_hat) + eps_));
    }
  }
}

// -- training loop ------------------------------------------------------------

nlohmann::json TrainLogRecord::to_json() const {
  nlohmann::json j = {{"iter", iter}, {"lr", lr}, {"loss_f", loss_f}, {"loss_r", nullptr}, {"secs", secs}};
  if (loss_r) j["loss_r"] = *loss_r;
  return j;
}

namespace {

std::vector<Volume> checked_volumes(std::vector<Volume> volumes, const TrainConfig& cfg) {
  if (volumes.empty()) throw ConfigError("empty training set");
  for (const auto& v : volumes) {
    v.validate();
    if (v.depth() < 3) throw ConfigError("training volumes need at least 3 slices");
    if (v.height() < cfg.patch_size || v.width() < cfg.patch_size) {
      throw ConfigError("patch_size " + std::to_string(cfg.patch_size) + " exceeds a " + std::to_string(v.height()) +
                        "x" + std::to_string(v.width()) + " slice");
    }
  }
  return volumes;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::vector<Volume> volumes)
    : cfg_((cfg.validate(), std::move(cfg))),
      volumes_(checked_volumes(std::move(volumes), cfg_)),
      model_(build_model<float>(cfg_.arch, cfg_.model, cfg_.seed)),
      adam_(model_.parameters(), cfg_.adam_betas, cfg_.adam_eps),
      rng_(cfg_.seed ^ 0x5eed5eed5eedULL) {}

void Trainer::sample_batch(Tensor<float>& input, Tensor<float>& target) {
  const std::size_t k = cfg_.batch_size, P = cfg_.patch_size;
  input = Tensor<float>({k, 1, P, P});
  target = Tensor<float>({k, 1, P, P});
  std::size_t filled = 0;
  while (filled < k) {
    const auto vi = std::uniform_int_distribution<std::size_t>(0, volumes_.size() - 1)(rng_);
    const Volume& v = volumes_[vi];
    const auto z = std::uniform_int_distribution<std::size_t>(1, v.depth() - 2)(rng_);
    const N2NPair pair = make_n2n_pair(slice_triple(v, z));
    for (const auto& patch : sample_patches(pair, cfg_.patches_per_slice, P, cfg_.model.unshuffle, rng_)) {
      if (filled == k) break;
      std::copy(patch.input.data().begin(), patch.input.data().end(), input.ptr() + filled * P * P);
      std::copy(patch.target.data().begin(), patch.target.data().end(), target.ptr() + filled * P * P);
      ++filled;
    }
  }
}

std::pair<double, double> Trainer::step() {
  Tensor<float> in, tgt;
  sample_batch(in, tgt);
  const auto params = model_.parameters();
  for (const auto& p : params) Var<float>(p.var).zero_grad();

  const Var<float> y(std::move(in));
  const Var<float> target(std::move(tgt));
  const Var<float> denoised = model_.denoise(y);
  const Var<float> lf = loss_forward(denoised, target);
  double loss_f = lf.value()[0], loss_r = 0.0;
  Var<float> total = scale(lf, static_cast<float>(cfg_.w_f));
  if (model_.has_reverse()) {
    const Var<float> lr = loss_reverse(model_.reconstruct(denoised), y);
    loss_r = lr.value()[0];
    if (cfg_.w_r > 0.0) total = add(total, scale(lr, static_cast<float>(cfg_.w_r)));
  }
  if (!std::isfinite(loss_f) || !std::isfinite(loss_r)) {
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration_));
  }
  backward(total);
  adam_.step(lr_schedule(iteration_, cfg_), iteration_);
  ++iteration_;
  return {loss_f, loss_r};
}

void Trainer::run(const std::function<void(const TrainLogRecord&)>& on_log) {
  while (iteration_ < cfg_.total_iters) {
    const double lr = lr_schedule(iteration_, cfg_);
    const auto t0 = std::chrono::steady_clock::now();
    const auto [lf, lr_loss] = step();
    elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    window_f_ += lf;
    window_r_ += lr_loss;
    ++window_count_;
    if (iteration_ % cfg_.log_every == 0 || iteration_ == cfg_.total_iters) {
      TrainLogRecord rec;
      rec.iter = iteration_;
      rec.lr = lr;
      rec.loss_f = window_f_ / static_cast<double>(window_count_);
      if (model_.has_reverse()) rec.loss_r = window_r_ / static_cast<double>(window_count_);
      rec.secs = elapsed_;
      window_f_ = window_r_ = 0.0;
      window_count_ = 0;
      log_.push_back(rec);
      if (on_log) on_log(rec);
    }
  }
}

CheckpointData Trainer::checkpoint() const {
  CheckpointData data = model_to_checkpoint(model_);
  std::ostringstream rng;
  rng << rng_;
  data.meta["train_config"] = cfg_.to_json();
  data.meta["train_state"] = {{"iteration", iteration_},
                              {"rng", rng.str()},
                              {"window_loss_f", window_f_},
                              {"window_loss_r", window_r_},
                              {"window_count", window_count_},
                              {"adam_step", adam_.state().step}};
  for (const auto& [name, t] : adam_.state().m) data.tensors.emplace("adam.m." + name, t);
  for (const auto& [name, t] : adam_.state().v) data.tensors.emplace("adam.v." + name, t);
  return data;
}

Trainer Trainer::resume(const CheckpointData& data, std::vector<Volume> volumes,
                        std::optional<std::size_t> total_iters) {
  if (!data.meta.contains("train_config") || !data.meta.contains("train_state")) {
    throw FormatError(FormatErrorKind::kMalformedHeader, "checkpoint carries no training state");
  }
  TrainConfig cfg = TrainConfig::from_json(data.meta.at("train_config"));
  if (total_iters) cfg.total_iters = *total_iters;
  Trainer t(cfg, std::move(volumes));
  const ModelBundle<float> saved = model_from_checkpoint(data);
  copy_parameters(saved, t.model_);
  try {
    const auto& s = data.meta.at("train_state");
    t.iteration_ = s.at("iteration").get<std::size_t>();
    std::istringstream rng(s.at("rng").get<std::string>());
    rng >> t.rng_;
    if (!rng) throw FormatError(FormatErrorKind::kMalformedHeader, "unreadable RNG state");
    t.window_f_ = s.at("window_loss_f").get<double>();
    t.window_r_ = s.at("window_loss_r").get<double>();
    t.window_count_ = s.at("window_count").get<std::size_t>();
    AdamState adam;
    adam.step = s.at("adam_step").get<std::size_t>();
    for (const auto& [name, tensor] : data.tensors) {
      if (name.rfind("adam.m.", 0) == 0) adam.m.emplace(name.substr(7), tensor);
      if (name.rfind("adam.v.", 0) == 0) adam.v.emplace(name.substr(7), tensor);
    }
    t.adam_.set_state(std::move(adam));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("train_state: ") + e.what());
  }
  return t;
}

double mean_square(const std::vector<Volume>& volumes) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& v : volumes) {
    for (std::size_t i = v.slice_size(); i + v.slice_size() < v.values.size(); ++i) {
      acc += static_cast<double>(v.values[i]) * v.values[i];
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

// -- inference ----------------------------------------------------------------

namespace {

std::size_t reflect(std::size_t i, std::size_t n) { return i < n ? i : 2 * (n - 1) - i; }

}  // namespace

namespace {

// Runs `map` over slice batches, reflect-padding each slice to a multiple of r.
template <typename Map>
Volume map_slices(const ModelBundle<float>& model, const Volume& v, std::size_t slices_per_batch, Map map) {
  v.validate();
  if (slices_per_batch == 0) throw ConfigError("slices_per_batch must be positive");
  const std::size_t r = model.config.unshuffle;
  const std::size_t H = v.height(), W = v.width();
  const std::size_t Hp = (H + r - 1) / r * r, Wp = (W + r - 1) / r * r;
  if (Hp - H >= H || Wp - W >= W) throw ShapeError("slice too small to reflect-pad to a multiple of r");
  NoGradGuard no_grad;
  Volume out = v;
  for (std::size_t z0 = 0; z0 < v.depth(); z0 += slices_per_batch) {
    const std::size_t n = std::min(slices_per_batch, v.depth() - z0);
    Tensor<float> batch({n, 1, Hp, Wp});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t y = 0; y < Hp; ++y)
        for (std::size_t x = 0; x < Wp; ++x) batch.at(s, 0, y, x) = v.at(z0 + s, reflect(y, H), reflect(x, W));
    const Tensor<float> res = map(Var<float>(std::move(batch))).value();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) out.at(z0 + s, y, x) = res.at(s, 0, y, x);
  }
  return out;
}

}  // namespace

Volume denoise_normalized(const ModelBundle<float>& model, const Volume& v, std::size_t slices_per_batch) {
  return map_slices(model, v, slices_per_batch, [&](const Var<float>& y) { return model.denoise(y); });
}

Volume reconstruct_normalized(const ModelBundle<float>& model, const Volume& v, std::size_t slices_per_batch) {
  if (!model.has_reverse()) throw ConfigError(to_string(model.arch) + " has no reverse mapping");
  return map_slices(model, v, slices_per_batch, [&](const Var<float>& x) { return model.reconstruct(x); });
}

Volume denoise_volume(const ModelBundle<float>& model, const Volume& v, Window window) {
  return denormalize(denoise_normalized(model, normalize(v, window)), window);
}

}  // namespace ctflow
