#include "ctflow/model.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace ctflow {

Arch parse_arch(std::string_view name) {
  if (name == "M1") return Arch::kM1;
  if (name == "M2") return Arch::kM2;
  if (name == "M3") return Arch::kM3;
  throw ConfigError("unknown architecture '" + std::string(name) + "' (expected M1, M2 or M3)");
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::kM1:
      return "M1";
    case Arch::kM2:
      return "M2";
    case Arch::kM3:
      return "M3";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (channels == 0 || blocks == 0 || unshuffle == 0 || growth == 0 || dense_layers == 0) {
    throw ConfigError("model: channels, blocks, unshuffle, growth and dense_layers must be positive");
  }
  if (core_channels() % 2 != 0) {
    throw ConfigError("model: core width " + std::to_string(core_channels()) + " must be even to split");
  }
  if (!(s_max > 0.0)) throw ConfigError("model: s_max must be positive");
  if (!(leaky_slope > 0.0)) throw ConfigError("model: leaky_slope must be positive");
}

std::size_t conv_parameter_count(std::size_t in, std::size_t out, std::size_t kernel) {
  return out * in * kernel * kernel + out;
}

std::size_t subnet_parameter_count(std::size_t in, std::size_t out, const ModelConfig& cfg) {
  std::size_t total = 0;
  for (std::size_t j = 0; j < cfg.dense_layers; ++j) total += conv_parameter_count(in + j * cfg.growth, cfg.growth);
  return total + conv_parameter_count(in + cfg.dense_layers * cfg.growth, out);
}

std::size_t denoiser_parameter_count(const ModelConfig& cfg) {
  const std::size_t half = cfg.core_channels() / 2;
  return 2 * conv_parameter_count(1, cfg.channels) + 2 * conv_parameter_count(cfg.channels, 1) +
         cfg.blocks * 3 * subnet_parameter_count(half, half, cfg);
}

std::size_t baseline_parameter_count(const ModelConfig& cfg, std::size_t depth) {
  const std::size_t width = cfg.core_channels();
  return conv_parameter_count(1, cfg.channels) + conv_parameter_count(cfg.channels, 1) +
         depth * subnet_parameter_count(width, width, cfg);
}

std::size_t matching_baseline_depth(const ModelConfig& cfg) {
  const double target = static_cast<double>(denoiser_parameter_count(cfg));
  const double fixed = static_cast<double>(baseline_parameter_count(cfg, 0));
  const double per_block = static_cast<double>(subnet_parameter_count(cfg.core_channels(), cfg.core_channels(), cfg));
  const auto depth = static_cast<std::size_t>(std::llround((target - fixed) / per_block));
  return std::max<std::size_t>(1, depth);
}

// -- layers -------------------------------------------------------------------

template <typename T>
ConvLayer<T> ConvLayer<T>::he_normal(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  constexpr std::size_t k = 3;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
  Tensor<T> w({out, in, k, k});
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>({out}))};
}

template <typename T>
ConvLayer<T> ConvLayer<T>::zeros(std::size_t in, std::size_t out) {
  return {Var<T>::parameter(Tensor<T>({out, in, 3, 3})), Var<T>::parameter(Tensor<T>({out}))};
}

template <typename T>
ConvLayer<T> ConvLayer<T>::center_tap_encoder(std::size_t out, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / 9.0));
  Tensor<T> w({out, 1, 3, 3});
  for (std::size_t c = 0; c < out; ++c) w[c * 9 + 4] = static_cast<T>(dist(rng));
  return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>({out}))};
}

template <typename T>
ConvLayer<T> ConvLayer<T>::left_inverse(const ConvLayer& encoder) {
  const Tensor<T>& e = encoder.weight.value();
  const std::size_t channels = e.dim(0);
  double energy = 0.0;
  for (std::size_t c = 0; c < channels; ++c) energy += static_cast<double>(e[c * 9 + 4]) * e[c * 9 + 4];
  if (!(energy > 0.0)) throw NumericError("left_inverse: encoder has no centre-tap energy");
  Tensor<T> w({1, channels, 3, 3});
  for (std::size_t c = 0; c < channels; ++c) w[c * 9 + 4] = static_cast<T>(e[c * 9 + 4] / energy);
  return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>({1}))};
}

template <typename T>
void ConvLayer<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

template <typename T>
SubNet<T>::SubNet(std::size_t in, std::size_t out, const ModelConfig& cfg, std::mt19937_64& rng)
    : in_(in), out_(out), slope_(static_cast<T>(cfg.leaky_slope)), projection_(ConvLayer<T>::zeros(in + cfg.dense_layers * cfg.growth, out)) {
  for (std::size_t j = 0; j < cfg.dense_layers; ++j) {
    layers_.push_back(ConvLayer<T>::he_normal(in + j * cfg.growth, cfg.growth, rng));
  }
}

template <typename T>
Var<T> SubNet<T>::operator()(const Var<T>& x) const {
  std::vector<Var<T>> features{x};
  features.reserve(layers_.size() + 1);
  for (const auto& layer : layers_) {
    const Var<T> input = features.size() == 1 ? x : channel_concat(features);
    features.push_back(leaky_relu(layer(input), slope_));
  }
  return projection_(channel_concat(features));
}

template <typename T>
void SubNet<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  for (std::size_t j = 0; j < layers_.size(); ++j) layers_[j].collect(prefix + ".layer" + std::to_string(j), out);
  projection_.collect(prefix + ".proj", out);
}

template <typename T>
CouplingBlock<T>::CouplingBlock(std::size_t channels, const ModelConfig& cfg, std::mt19937_64& rng)
    : s_max_(static_cast<T>(cfg.s_max)),
      phi1_(channels / 2, channels / 2, cfg, rng),
      phi2_(channels / 2, channels / 2, cfg, rng),
      phi3_(channels / 2, channels / 2, cfg, rng) {}

template <typename T>
Var<T> bounded_log_scale(const Var<T>& raw, T s_max) {
  return scale(tanh(scale(raw, T{1} / s_max)), s_max);
}

template <typename T>
Var<T> affine_coupling_forward(const Var<T>& m, const SubnetFn<T>& phi1, const SubnetFn<T>& phi2,
                               const SubnetFn<T>& phi3, T s_max) {
  auto [m1, m2] = channel_split(m);
  Var<T> n1 = add(m1, phi1(m2));
  Var<T> n2 = add(mul(m2, exp(bounded_log_scale(phi2(n1), s_max))), phi3(n1));
  return channel_concat(n1, n2);
}

template <typename T>
Var<T> affine_coupling_inverse(const Var<T>& n, const SubnetFn<T>& phi1, const SubnetFn<T>& phi2,
                               const SubnetFn<T>& phi3, T s_max) {
  auto [n1, n2] = channel_split(n);
  Var<T> m2 = mul(sub(n2, phi3(n1)), exp(scale(bounded_log_scale(phi2(n1), s_max), T{-1})));
  Var<T> m1 = sub(n1, phi1(m2));
  return channel_concat(m1, m2);
}

template <typename T>
Var<T> CouplingBlock<T>::forward(const Var<T>& m) const {
  return affine_coupling_forward<T>(m, std::cref(phi1_), std::cref(phi2_), std::cref(phi3_), s_max_);
}

template <typename T>
Var<T> CouplingBlock<T>::inverse(const Var<T>& n) const {
  return affine_coupling_inverse<T>(n, std::cref(phi1_), std::cref(phi2_), std::cref(phi3_), s_max_);
}

template <typename T>
void CouplingBlock<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  phi1_.collect(prefix + ".phi1", out);
  phi2_.collect(prefix + ".phi2", out);
  phi3_.collect(prefix + ".phi3", out);
}

namespace {

std::string block_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02zu", prefix, i);
  return buf;
}

}  // namespace

// -- invertible model ---------------------------------------------------------

template <typename T>
DenoiserModel<T>::DenoiserModel(const ModelConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      enc_y_(ConvLayer<T>::center_tap_encoder(cfg.channels, rng)),
      enc_x_(ConvLayer<T>::center_tap_encoder(cfg.channels, rng)),
      dec_y_(ConvLayer<T>::left_inverse(enc_y_)),
      dec_x_(ConvLayer<T>::left_inverse(enc_x_)) {
  cfg_.validate();
  blocks_.reserve(cfg.blocks);
  for (std::size_t i = 0; i < cfg.blocks; ++i) blocks_.emplace_back(cfg.core_channels(), cfg, rng);
}

template <typename T>
Var<T> DenoiserModel<T>::core_forward(const Var<T>& x) const {
  Var<T> h = cfg_.unshuffle > 1 ? pixel_unshuffle(x, cfg_.unshuffle) : x;
  for (const auto& block : blocks_) h = block.forward(h);
  return cfg_.unshuffle > 1 ? pixel_shuffle(h, cfg_.unshuffle) : h;
}

template <typename T>
Var<T> DenoiserModel<T>::core_inverse(const Var<T>& y) const {
  Var<T> h = cfg_.unshuffle > 1 ? pixel_unshuffle(y, cfg_.unshuffle) : y;
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) h = it->inverse(h);
  return cfg_.unshuffle > 1 ? pixel_shuffle(h, cfg_.unshuffle) : h;
}

template <typename T>
Var<T> DenoiserModel<T>::forward(const Var<T>& noisy) const {
  return dec_y_(core_forward(enc_y_(noisy)));
}

template <typename T>
Var<T> DenoiserModel<T>::reverse(const Var<T>& denoised) const {
  return dec_x_(core_inverse(enc_x_(denoised)));
}

template <typename T>
ParameterList<T> DenoiserModel<T>::parameters() const {
  ParameterList<T> out;
  enc_y_.collect("enc_y", out);
  enc_x_.collect("enc_x", out);
  dec_y_.collect("dec_y", out);
  dec_x_.collect("dec_x", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(block_name("core.block", i), out);
  return out;
}

// -- baseline -----------------------------------------------------------------

template <typename T>
BaselineModel<T>::BaselineModel(const ModelConfig& cfg, std::size_t depth, std::mt19937_64& rng)
    : cfg_(cfg),
      enc_(ConvLayer<T>::center_tap_encoder(cfg.channels, rng)),
      dec_(ConvLayer<T>::left_inverse(enc_)) {
  cfg_.validate();
  blocks_.reserve(depth);
  for (std::size_t i = 0; i < depth; ++i) blocks_.emplace_back(cfg.core_channels(), cfg.core_channels(), cfg, rng);
}

template <typename T>
Var<T> BaselineModel<T>::forward(const Var<T>& x) const {
  Var<T> h = enc_(x);
  if (cfg_.unshuffle > 1) h = pixel_unshuffle(h, cfg_.unshuffle);
  for (const auto& block : blocks_) h = add(h, block(h));
  if (cfg_.unshuffle > 1) h = pixel_shuffle(h, cfg_.unshuffle);
  return dec_(h);
}

template <typename T>
ParameterList<T> BaselineModel<T>::parameters() const {
  ParameterList<T> out;
  enc_.collect("enc", out);
  dec_.collect("dec", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(block_name("block", i), out);
  return out;
}

// -- bundle -------------------------------------------------------------------

template <typename T>
Var<T> ModelBundle<T>::denoise(const Var<T>& noisy) const {
  return arch == Arch::kM3 ? invertible->forward(noisy) : forward_net->forward(noisy);
}

template <typename T>
Var<T> ModelBundle<T>::reconstruct(const Var<T>& denoised) const {
  switch (arch) {
    case Arch::kM3:
      return invertible->reverse(denoised);
    case Arch::kM2:
      return reverse_net->forward(denoised);
    case Arch::kM1:
      break;
  }
  throw std::logic_error("M1 has no reverse mapping");
}

template <typename T>
ParameterList<T> ModelBundle<T>::parameters() const {
  if (arch == Arch::kM3) return invertible->parameters();
  ParameterList<T> out;
  for (auto& p : forward_net->parameters()) out.push_back({"F." + p.name, p.var});
  if (reverse_net) {
    for (auto& p : reverse_net->parameters()) out.push_back({"R." + p.name, p.var});
  }
  return out;
}

template <typename T>
std::size_t ModelBundle<T>::parameter_count() const {
  return ctflow::parameter_count(parameters());
}

template <typename T>
ModelBundle<T> build_model(Arch arch, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelBundle<T> bundle;
  bundle.arch = arch;
  bundle.config = cfg;
  if (arch == Arch::kM3) {
    bundle.invertible.emplace(cfg, rng);
    return bundle;
  }
  bundle.baseline_depth = matching_baseline_depth(cfg);
  const double target = static_cast<double>(denoiser_parameter_count(cfg));
  const double actual = static_cast<double>(baseline_parameter_count(cfg, bundle.baseline_depth));
  if (std::abs(actual - target) > 0.1 * target) {
    throw ConfigError("baseline with " + std::to_string(bundle.baseline_depth) + " blocks has " +
                      std::to_string(static_cast<std::size_t>(actual)) + " parameters, more than 10% away from " +
                      std::to_string(static_cast<std::size_t>(target)));
  }
  bundle.forward_net.emplace(cfg, bundle.baseline_depth, rng);
  if (arch == Arch::kM2) bundle.reverse_net.emplace(cfg, bundle.baseline_depth, rng);
  return bundle;
}

template <typename Dst, typename Src>
void copy_parameters(const ModelBundle<Src>& src, ModelBundle<Dst>& dst) {
  const auto from = src.parameters();
  const auto to = dst.parameters();
  if (from.size() != to.size()) throw ShapeError("copy_parameters: models differ in structure");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].var.shape() != to[i].var.shape()) {
      throw ShapeError("copy_parameters: mismatch at " + from[i].name);
    }
    Var<Dst>(to[i].var).mutable_value() = from[i].var.value().template cast<Dst>();
  }
}

template <typename T>
void randomize_projections(const ParameterList<T>& params, std::uint64_t seed, double gain) {
  std::mt19937_64 rng(seed);
  for (const auto& p : params) {
    if (p.name.find(".proj.") == std::string::npos) continue;
    Var<T> var = p.var;
    Tensor<T>& value = var.mutable_value();
    const double stddev = value.rank() == 4
                              ? gain * std::sqrt(2.0 / static_cast<double>(value.dim(1) * value.dim(2) * value.dim(3)))
                              : gain * 0.1;
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : value.data()) v = static_cast<T>(dist(rng));
  }
}

#define CTFLOW_MODEL_INSTANTIATE(T)                                                   \
  template Var<T> bounded_log_scale(const Var<T>&, T);                                \
  template Var<T> affine_coupling_forward(const Var<T>&, const SubnetFn<T>&, const SubnetFn<T>&, \
                                          const SubnetFn<T>&, T);                    \
  template Var<T> affine_coupling_inverse(const Var<T>&, const SubnetFn<T>&, const SubnetFn<T>&, \
                                          const SubnetFn<T>&, T);                    \
  template struct ConvLayer<T>;                                                       \
  template class SubNet<T>;                                                           \
  template class CouplingBlock<T>;                                                    \
  template class DenoiserModel<T>;                                                    \
  template class BaselineModel<T>;                                                    \
  template struct ModelBundle<T>;                                                     \
  template ModelBundle<T> build_model<T>(Arch, const ModelConfig&, std::uint64_t);    \
  template void randomize_projections<T>(const ParameterList<T>&, std::uint64_t, double);

CTFLOW_MODEL_INSTANTIATE(float)
CTFLOW_MODEL_INSTANTIATE(double)
CTFLOW_MODEL_INSTANTIATE(long double)

template void copy_parameters(const ModelBundle<float>&, ModelBundle<double>&);
template void copy_parameters(const ModelBundle<double>&, ModelBundle<float>&);
template void copy_parameters(const ModelBundle<float>&, ModelBundle<float>&);
template void copy_parameters(const ModelBundle<double>&, ModelBundle<double>&);
template void copy_parameters(const ModelBundle<double>&, ModelBundle<long double>&);

}  // namespace ctflow
