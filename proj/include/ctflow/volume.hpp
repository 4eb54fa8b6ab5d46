#pragma once

// CT volumes, synthetic phantoms, noise models and the inter-slice training
// pairs. Slices are Tensor<float> of shape {H, W}.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ctflow/tensor.hpp"
#include "json.hpp"

namespace ctflow {

using Dims3 = std::array<std::size_t, 3>;  // z, y, x

struct Volume {
  Dims3 dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per axis, z-y-x order
  std::vector<float> values;                      // z-major

  Volume() = default;
  Volume(Dims3 dims, std::array<double, 3> spacing, float fill = 0.0f);

  std::size_t depth() const { return dims[0]; }
  std::size_t height() const { return dims[1]; }
  std::size_t width() const { return dims[2]; }
  std::size_t slice_size() const { return dims[1] * dims[2]; }

  float& at(std::size_t z, std::size_t y, std::size_t x) { return values[(z * dims[1] + y) * dims[2] + x]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return values[(z * dims[1] + y) * dims[2] + x]; }

  Tensor<float> slice(std::size_t z) const;
  void set_slice(std::size_t z, const Tensor<float>& s);

  /// Throws ShapeError / NumericError when an invariant is broken.
  void validate() const;

  bool operator==(const Volume&) const = default;
};

struct Window {
  double lo = -1024.0;
  double hi = 3071.0;
};

/// Clamp to the window, then map it affinely onto [0, 1].
Volume normalize(const Volume& v, Window w = {});
Volume denormalize(const Volume& v, Window w = {});

// -- phantoms ---------------------------------------------------------------

enum class PhantomKind { kEllipses, kSheppLoganLike };
PhantomKind parse_phantom_kind(const std::string& s);
std::string to_string(PhantomKind kind);

struct Phantom {
  Volume volume;  // HU
  /// Slices on either side of an abrupt organ start or end, ascending.
  std::vector<std::size_t> organ_end_slices;
  double hu_min = 0.0;
  double hu_max = 0.0;

  nlohmann::json sidecar(PhantomKind kind, std::uint64_t seed) const;
};

/// Piecewise-constant anatomy whose structures drift slowly along z, plus a
/// few organs that start and stop abruptly. Needs at least 8 voxels per axis.
Phantom make_phantom(PhantomKind kind, Dims3 dims, std::uint64_t seed);

// -- noise ------------------------------------------------------------------

struct NoiseSpec {
  enum class Kind { kGaussian, kSignalDependent };
  Kind kind = Kind::kGaussian;
  double sigma = 0.0;  // gaussian
  double a = 0.0;      // signal dependent: std = a + b * value
  double b = 0.0;
  std::uint64_t seed = 0;

  static NoiseSpec gaussian(double sigma, std::uint64_t seed) { return {Kind::kGaussian, sigma, 0.0, 0.0, seed}; }
  static NoiseSpec signal_dependent(double a, double b, std::uint64_t seed) {
    return {Kind::kSignalDependent, 0.0, a, b, seed};
  }
  void validate() const;
};

/// Seed of the noise substream for slice z.
std::uint64_t slice_seed(std::uint64_t seed, std::size_t z);

/// Y = X + eta, each slice drawn from its own substream.
Volume add_noise(const Volume& v, const NoiseSpec& spec);

// -- training pairs ---------------------------------------------------------

struct SliceTriple {
  Tensor<float> prev, cur, next;
  std::size_t index = 0;
};

/// Slices i-1, i, i+1. Boundary slices have no triple and raise ShapeError.
SliceTriple slice_triple(const Volume& v, std::size_t i);

struct N2NPair {
  Tensor<float> input;   // Y_i
  Tensor<float> target;  // (Y_{i-1} + Y_{i+1}) / 2
};

N2NPair make_n2n_pair(const SliceTriple& t);

struct PatchPair {
  Tensor<float> input, target;
  std::size_t y = 0, x = 0;  // top-left corner
};

/// n random size x size crops, identical coordinates in input and target.
std::vector<PatchPair> sample_patches(const N2NPair& pair, std::size_t n, std::size_t size, std::size_t divisor,
                                      std::mt19937_64& rng);

// -- RVOL files -------------------------------------------------------------
//
//   "RVOL", u32 LE version, u32 LE header length,
//   JSON {dims:[z,y,x], spacing:[..], dtype:"f32", unit:"HU"}, LE f32 payload.

inline constexpr std::uint32_t kVolumeVersion = 1;

std::string encode_volume(const Volume& v);
Volume decode_volume(std::string_view bytes);
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

/// p.rvol -> p.json
std::filesystem::path sidecar_path(const std::filesystem::path& volume_path);

}  // namespace ctflow
