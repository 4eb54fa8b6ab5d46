#pragma once

// Invertible coupling network and the non-invertible baselines used for the
// ablation.
//
//   forward:  Y  -> enc_y -> unshuffle -> B_1 ... B_n -> shuffle -> dec_y -> X^
//   reverse:  X^ -> enc_x -> unshuffle -> B_n^-1 ... B_1^-1 -> shuffle -> dec_x -> Y^
//
// Each coupling block B splits its input channels (m1, m2) and computes
//   n1 = m1 + phi1(m2)
//   n2 = m2 * exp(s(phi2(n1))) + phi3(n1),   s(x) = s_max * tanh(x / s_max)
// with the closed-form inverse
//   m2 = (n2 - phi3(n1)) * exp(-s(phi2(n1)))
//   m1 = n1 - phi1(m2)

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ctflow/autograd.hpp"

namespace ctflow {

enum class Arch { kM1, kM2, kM3 };

Arch parse_arch(std::string_view name);
std::string to_string(Arch arch);

struct ModelConfig {
  std::size_t channels = 64;   // encoder output width C
  std::size_t blocks = 12;     // coupling blocks in the core
  std::size_t unshuffle = 2;   // space-to-depth factor around the core; 1 disables it
  double s_max = 2.0;          // scale clamp: log-scales lie in [-s_max, s_max]
  std::size_t growth = 32;     // dense-block growth rate
  std::size_t dense_layers = 4;
  double leaky_slope = 0.2;

  std::size_t core_channels() const { return channels * unshuffle * unshuffle; }
  void validate() const;
};

std::size_t conv_parameter_count(std::size_t in, std::size_t out, std::size_t kernel = 3);
std::size_t subnet_parameter_count(std::size_t in, std::size_t out, const ModelConfig& cfg);
std::size_t denoiser_parameter_count(const ModelConfig& cfg);
std::size_t baseline_parameter_count(const ModelConfig& cfg, std::size_t depth);
/// Number of residual dense blocks giving a baseline closest in size to the invertible model.
std::size_t matching_baseline_depth(const ModelConfig& cfg);

template <typename T>
struct ConvLayer {
  Var<T> weight;  // [out, in, k, k]
  Var<T> bias;    // [out]

  static ConvLayer he_normal(std::size_t in, std::size_t out, std::mt19937_64& rng);
  static ConvLayer zeros(std::size_t in, std::size_t out);
  /// 1 -> out encoder whose kernels are random centre taps (He scale of a 3x3 kernel).
  static ConvLayer center_tap_encoder(std::size_t out, std::mt19937_64& rng);
  /// out -> 1 decoder that undoes `encoder` exactly: dec(enc(y)) == y.
  static ConvLayer left_inverse(const ConvLayer& encoder);

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, weight.dim(2) / 2); }
  void collect(const std::string& prefix, ParameterList<T>& out) const;
};

/// Dense block: each layer sees the concatenation of the block input and all
/// earlier layer outputs; a final projection maps everything to `out` channels.
template <typename T>
class SubNet {
 public:
  SubNet(std::size_t in, std::size_t out, const ModelConfig& cfg, std::mt19937_64& rng);

  Var<T> operator()(const Var<T>& x) const;
  void collect(const std::string& prefix, ParameterList<T>& out) const;

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }

 private:
  std::size_t in_;
  std::size_t out_;
  T slope_;
  std::vector<ConvLayer<T>> layers_;
  ConvLayer<T> projection_;  // zero-initialised
};

template <typename T>
using SubnetFn = std::function<Var<T>(const Var<T>&)>;

/// s(x) = s_max * tanh(x / s_max): zero at zero, bounded by s_max.
template <typename T>
Var<T> bounded_log_scale(const Var<T>& raw, T s_max);

/// The coupling equations for arbitrary sub-networks.
template <typename T>
Var<T> affine_coupling_forward(const Var<T>& m, const SubnetFn<T>& phi1, const SubnetFn<T>& phi2,
                               const SubnetFn<T>& phi3, T s_max);
template <typename T>
Var<T> affine_coupling_inverse(const Var<T>& n, const SubnetFn<T>& phi1, const SubnetFn<T>& phi2,
                               const SubnetFn<T>& phi3, T s_max);

template <typename T>
class CouplingBlock {
 public:
  CouplingBlock(std::size_t channels, const ModelConfig& cfg, std::mt19937_64& rng);

  Var<T> forward(const Var<T>& m) const;
  Var<T> inverse(const Var<T>& n) const;
  void collect(const std::string& prefix, ParameterList<T>& out) const;

 private:
  T s_max_;
  SubNet<T> phi1_;
  SubNet<T> phi2_;
  SubNet<T> phi3_;
};

template <typename T>
Var<T> coupling_forward(const Var<T>& m, const CouplingBlock<T>& block) {
  return block.forward(m);
}
template <typename T>
Var<T> coupling_inverse(const Var<T>& n, const CouplingBlock<T>& block) {
  return block.inverse(n);
}

template <typename T>
class DenoiserModel {
 public:
  DenoiserModel(const ModelConfig& cfg, std::mt19937_64& rng);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<CouplingBlock<T>>& blocks() const { return blocks_; }

  /// shuffle(B_n(...B_1(unshuffle(x))))
  Var<T> core_forward(const Var<T>& x) const;
  /// Exact inverse of core_forward, sharing its parameters.
  Var<T> core_inverse(const Var<T>& y) const;

  /// enc_y(Y): what the core sees for a noisy slice.
  Var<T> encode(const Var<T>& noisy) const { return enc_y_(noisy); }
  Var<T> forward(const Var<T>& noisy) const;      // X^ = dec_y(core(enc_y(Y)))
  Var<T> reverse(const Var<T>& denoised) const;   // Y^ = dec_x(core^-1(enc_x(X^)))

  ParameterList<T> parameters() const;

 private:
  ModelConfig cfg_;
  ConvLayer<T> enc_y_;
  ConvLayer<T> enc_x_;
  ConvLayer<T> dec_y_;
  ConvLayer<T> dec_x_;
  std::vector<CouplingBlock<T>> blocks_;
};

/// Feed-forward stand-in for the invertible core: the same encoder, decoder
/// and shuffle sandwich with residual dense blocks in place of coupling blocks.
template <typename T>
class BaselineModel {
 public:
  BaselineModel(const ModelConfig& cfg, std::size_t depth, std::mt19937_64& rng);

  Var<T> forward(const Var<T>& x) const;
  ParameterList<T> parameters() const;
  std::size_t depth() const { return blocks_.size(); }

 private:
  ModelConfig cfg_;
  ConvLayer<T> enc_;
  ConvLayer<T> dec_;
  std::vector<SubNet<T>> blocks_;
};

/// The trainable pieces of one ablation arm.
///   M3: the invertible model.
///   M2: independent forward (F) and reverse (R) baselines.
///   M1: a single forward baseline trained on the forward loss only.
template <typename T>
struct ModelBundle {
  Arch arch = Arch::kM3;
  ModelConfig config;
  std::size_t baseline_depth = 0;
  std::optional<DenoiserModel<T>> invertible;
  std::optional<BaselineModel<T>> forward_net;
  std::optional<BaselineModel<T>> reverse_net;

  /// Test-time mapping noisy -> denoised.
  Var<T> denoise(const Var<T>& noisy) const;
  /// Reverse mapping denoised -> noisy; absent for M1.
  Var<T> reconstruct(const Var<T>& denoised) const;
  bool has_reverse() const { return arch != Arch::kM1; }

  /// Names are unique and stable; M2 parameters carry "F." / "R." prefixes.
  ParameterList<T> parameters() const;
  std::size_t parameter_count() const;
};

/// Builds and initialises one ablation arm. Baselines are sized so their
/// parameter count is within 10% of the invertible model (checked here).
template <typename T>
ModelBundle<T> build_model(Arch arch, const ModelConfig& cfg, std::uint64_t seed);

/// Copies parameter values between bundles of identical structure.
template <typename Dst, typename Src>
void copy_parameters(const ModelBundle<Src>& src, ModelBundle<Dst>& dst);

template <typename Dst, typename Src>
ModelBundle<Dst> cast_bundle(const ModelBundle<Src>& src) {
  ModelBundle<Dst> out = build_model<Dst>(src.arch, src.config, 0);
  copy_parameters(src, out);
  return out;
}

/// Re-draws every dense-block projection from N(0, (gain * he_std)^2). Used to
/// exercise the coupling maps away from their identity initialisation.
template <typename T>
void randomize_projections(const ParameterList<T>& params, std::uint64_t seed, double gain);

template <typename T>
std::size_t parameter_count(const ParameterList<T>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.var.numel();
  return total;
}

}  // namespace ctflow
