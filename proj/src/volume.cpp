#include "ctflow/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ctflow/binary_io.hpp"
#include "ctflow/errors.hpp"

namespace ctflow {

Volume::Volume(Dims3 d, std::array<double, 3> s, float fill)
    : dims(d), spacing(s), values(d[0] * d[1] * d[2], fill) {}

Tensor<float> Volume::slice(std::size_t z) const {
  if (z >= dims[0]) throw ShapeError("slice " + std::to_string(z) + " out of range for depth " + std::to_string(dims[0]));
  const auto begin = values.begin() + static_cast<std::ptrdiff_t>(z * slice_size());
  return Tensor<float>({dims[1], dims[2]}, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(slice_size())));
}

void Volume::set_slice(std::size_t z, const Tensor<float>& s) {
  if (z >= dims[0] || s.shape() != Shape{dims[1], dims[2]}) {
    throw ShapeError("cannot store slice of shape " + shape_str(s.shape()) + " at z=" + std::to_string(z));
  }
  std::copy(s.data().begin(), s.data().end(), values.begin() + static_cast<std::ptrdiff_t>(z * slice_size()));
}

void Volume::validate() const {
  if (values.size() != dims[0] * dims[1] * dims[2]) {
    throw ShapeError("volume holds " + std::to_string(values.size()) + " values for dims " + std::to_string(dims[0]) +
                     "x" + std::to_string(dims[1]) + "x" + std::to_string(dims[2]));
  }
  for (double s : spacing) {
    if (!(s > 0.0)) throw ShapeError("voxel spacing must be positive");
  }
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError("volume contains a non-finite value");
  }
}

// -- normalisation ----------------------------------------------------------

namespace {

void check_window(Window w) {
  if (!(w.lo < w.hi)) throw ConfigError("degenerate window [" + std::to_string(w.lo) + ", " + std::to_string(w.hi) + "]");
}

}  // namespace

Volume normalize(const Volume& v, Window w) {
  check_window(w);
  Volume out = v;
  const double range = w.hi - w.lo;
  for (float& x : out.values) x = static_cast<float>((std::clamp<double>(x, w.lo, w.hi) - w.lo) / range);
  return out;
}

Volume denormalize(const Volume& v, Window w) {
  check_window(w);
  Volume out = v;
  const double range = w.hi - w.lo;
  for (float& x : out.values) x = static_cast<float>(w.lo + static_cast<double>(x) * range);
  return out;
}

// -- phantoms ---------------------------------------------------------------

PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "ellipses") return PhantomKind::kEllipses;
  if (s == "shepp_logan_like") return PhantomKind::kSheppLoganLike;
  throw ConfigError("unknown phantom kind '" + s + "' (expected ellipses or shepp_logan_like)");
}

std::string to_string(PhantomKind kind) {
  return kind == PhantomKind::kEllipses ? "ellipses" : "shepp_logan_like";
}

namespace {

constexpr double kAirHU = -1000.0;
constexpr double kMaxHU = 1000.0;

// Ellipse in [-1,1]^2 slice coordinates whose geometry is a smooth function
// of t = z / (depth - 1). Painted in order; later ellipses overwrite earlier ones.
struct Blob {
  double cx, cy, ax, ay, angle, hu;
  double drift_x = 0.0, drift_y = 0.0;  // total centre travel over the volume
  double swell = 0.0;                   // relative axis change over the volume
  double phase = 0.0;
  std::size_t z_first = 0, z_last = static_cast<std::size_t>(-1);  // abrupt extent

  bool contains(double u, double v, double t) const {
    const double wave = std::sin(std::numbers::pi * t + phase);
    const double x0 = cx + drift_x * (t - 0.5);
    const double y0 = cy + drift_y * (t - 0.5);
    const double scale = 1.0 + swell * wave;
    const double c = std::cos(angle), s = std::sin(angle);
    const double du = u - x0, dv = v - y0;
    const double p = (c * du + s * dv) / (ax * scale);
    const double q = (-s * du + c * dv) / (ay * scale);
    return p * p + q * q <= 1.0;
  }
};

std::vector<Blob> ellipse_body(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](double amp) { return amp * (2.0 * unit(rng) - 1.0); };
  std::vector<Blob> blobs;
  blobs.push_back({0.0, 0.05, 0.88, 0.68, 0.0, -90.0, 0.0, 0.0, 0.03, 0.0});  // subcutaneous fat
  blobs.push_back({0.0, 0.05, 0.80, 0.60, 0.0, 40.0, 0.0, 0.0, 0.03, 0.0});   // soft tissue
  for (double side : {-1.0, 1.0}) {                                          // lungs
    blobs.push_back({side * 0.42, -0.08, 0.24 + jitter(0.02), 0.33 + jitter(0.02), side * 0.15, -850.0,
                     side * 0.03, 0.04, -0.15, jitter(0.5)});
  }
  blobs.push_back({0.0, 0.47, 0.11, 0.10, 0.0, 900.0, 0.0, 0.02, 0.05, 0.0});   // vertebra
  blobs.push_back({0.0, 0.49, 0.04, 0.035, 0.0, 20.0, 0.0, 0.02, 0.05, 0.0});  // canal
  blobs.push_back({0.12, 0.30, 0.06, 0.06, 0.0, 200.0, 0.04, 0.0, 0.08, 0.0});  // aorta
  const int lesions = 4 + static_cast<int>(unit(rng) * 3.0);
  for (int i = 0; i < lesions; ++i) {
    const double r = 0.04 + 0.08 * unit(rng);
    blobs.push_back({jitter(0.5), 0.05 + jitter(0.35), r, r * (0.7 + 0.6 * unit(rng)), jitter(1.5),
                     -20.0 + 140.0 * unit(rng), jitter(0.06), jitter(0.06), 0.1, jitter(3.0)});
  }
  return blobs;
}

std::vector<Blob> shepp_logan_body(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](double amp) { return amp * (2.0 * unit(rng) - 1.0); };
  const double deg = std::numbers::pi / 180.0;
  // Classic head geometry with HU materials instead of additive intensities.
  std::vector<Blob> blobs = {
      {0.0, 0.0, 0.69, 0.92, 0.0, 900.0, 0.0, 0.0, 0.02, 0.0},            // skull
      {0.0, -0.0184, 0.6624, 0.874, 0.0, 30.0, 0.0, 0.0, 0.02, 0.0},      // brain
      {0.22, 0.0, 0.11, 0.31, -18.0 * deg, 5.0, 0.02, 0.0, 0.12, 0.3},    // ventricles
      {-0.22, 0.0, 0.16, 0.41, 18.0 * deg, 5.0, -0.02, 0.0, 0.12, 0.6},
      {0.0, 0.35, 0.21, 0.25, 0.0, 50.0, 0.0, 0.03, 0.08, 0.0},
      {0.0, 0.1, 0.046, 0.046, 0.0, 45.0, 0.0, 0.0, 0.1, 1.0},
      {0.0, -0.1, 0.046, 0.046, 0.0, 45.0, 0.0, 0.0, 0.1, 2.0},
      {-0.08, -0.605, 0.046, 0.023, 0.0, 60.0, 0.0, 0.0, 0.1, 0.0},
      {0.0, -0.605, 0.023, 0.023, 0.0, 60.0, 0.0, 0.0, 0.1, 0.0},
      {0.06, -0.605, 0.023, 0.046, 0.0, 60.0, 0.0, 0.0, 0.1, 0.0},
  };
  for (auto& b : blobs) b.phase += jitter(0.3);
  return blobs;
}

// Organs that appear and disappear between two slices.
void add_abrupt_organs(std::vector<Blob>& blobs, std::size_t depth, std::mt19937_64& rng, PhantomKind kind) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](std::size_t lo, std::size_t hi) {  // inclusive
    return lo + static_cast<std::size_t>(unit(rng) * static_cast<double>(hi - lo + 1)) % (hi - lo + 1);
  };
  const std::size_t organs = depth >= 16 ? 2 : 1;
  for (std::size_t k = 0; k < organs; ++k) {
    // Both ends interior so that each transition has slices on both sides.
    const std::size_t first = pick(2, std::max<std::size_t>(2, depth / 3));
    const std::size_t last = pick(std::max(first + 2, 2 * depth / 3), depth - 3);
    const double side = k == 0 ? -1.0 : 1.0;
    Blob b{side * (0.30 + 0.1 * unit(rng)), 0.20 + 0.1 * unit(rng), 0.13 + 0.05 * unit(rng), 0.10 + 0.05 * unit(rng),
           unit(rng), kind == PhantomKind::kEllipses ? (k == 0 ? 150.0 : 75.0) : (k == 0 ? 300.0 : 450.0),
           0.02, 0.02, 0.05, 0.0};
    if (kind == PhantomKind::kSheppLoganLike) b.cy = -0.35 + 0.1 * unit(rng);
    b.z_first = first;
    b.z_last = std::min(last, depth - 3);
    blobs.push_back(b);
  }
}

}  // namespace

Phantom make_phantom(PhantomKind kind, Dims3 dims, std::uint64_t seed) {
  for (std::size_t d : dims) {
    if (d < 8) throw ShapeError("phantom needs at least 8 voxels per axis");
  }
  std::mt19937_64 rng(seed);
  std::vector<Blob> blobs = kind == PhantomKind::kEllipses ? ellipse_body(rng) : shepp_logan_body(rng);
  add_abrupt_organs(blobs, dims[0], rng, kind);

  Phantom out;
  out.volume = Volume(dims, {1.0, 1.0, 1.0}, static_cast<float>(kAirHU));
  out.hu_min = kAirHU;
  out.hu_max = kMaxHU;
  const std::size_t H = dims[1], W = dims[2];
  constexpr int kSuper = 2;  // 2x2 supersampling softens the edges
  for (std::size_t z = 0; z < dims[0]; ++z) {
    const double t = static_cast<double>(z) / static_cast<double>(dims[0] - 1);
    std::vector<const Blob*> active;
    for (const auto& b : blobs) {
      if (z >= b.z_first && z <= b.z_last) active.push_back(&b);
    }
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double u = 2.0 * (static_cast<double>(x) + (sx + 0.5) / kSuper) / static_cast<double>(W) - 1.0;
            const double v = 2.0 * (static_cast<double>(y) + (sy + 0.5) / kSuper) / static_cast<double>(H) - 1.0;
            double hu = kAirHU;
            for (const Blob* b : active) {
              if (b->contains(u, v, t)) hu = b->hu;
            }
            acc += hu;
          }
        }
        out.volume.at(z, y, x) = static_cast<float>(acc / (kSuper * kSuper));
      }
    }
  }
  for (const auto& b : blobs) {
    if (b.z_last >= dims[0]) continue;
    for (std::size_t z : {b.z_first - 1, b.z_first, b.z_last, b.z_last + 1}) out.organ_end_slices.push_back(z);
  }
  std::sort(out.organ_end_slices.begin(), out.organ_end_slices.end());
  out.organ_end_slices.erase(std::unique(out.organ_end_slices.begin(), out.organ_end_slices.end()),
                             out.organ_end_slices.end());
  return out;
}

nlohmann::json Phantom::sidecar(PhantomKind kind, std::uint64_t seed) const {
  return {{"kind", to_string(kind)},
          {"seed", seed},
          {"dims", volume.dims},
          {"organ_end_slices", organ_end_slices},
          {"hu_range", {hu_min, hu_max}}};
}

// -- noise ------------------------------------------------------------------

void NoiseSpec::validate() const {
  if (sigma < 0.0 || a < 0.0 || b < 0.0) throw ConfigError("noise parameters must be non-negative");
  if (!std::isfinite(sigma) || !std::isfinite(a) || !std::isfinite(b)) throw ConfigError("noise parameters must be finite");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t slice_seed(std::uint64_t seed, std::size_t z) {
  return splitmix64(splitmix64(seed) ^ splitmix64(0xC0FFEEULL + static_cast<std::uint64_t>(z)));
}

Volume add_noise(const Volume& v, const NoiseSpec& spec) {
  spec.validate();
  Volume out = v;
  const std::size_t n = v.slice_size();
  for (std::size_t z = 0; z < v.depth(); ++z) {
    std::mt19937_64 rng(slice_seed(spec.seed, z));
    std::normal_distribution<double> normal(0.0, 1.0);
    float* s = out.values.data() + z * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double std_dev =
          spec.kind == NoiseSpec::Kind::kGaussian ? spec.sigma : std::max(0.0, spec.a + spec.b * s[i]);
      const double eta = normal(rng);  // drawn even when std_dev is 0 so streams stay aligned
      if (std_dev > 0.0) s[i] = static_cast<float>(s[i] + std_dev * eta);
    }
  }
  return out;
}

// -- training pairs ---------------------------------------------------------

SliceTriple slice_triple(const Volume& v, std::size_t i) {
  if (i == 0 || i + 1 >= v.depth()) {
    throw ShapeError("slice " + std::to_string(i) + " is a boundary slice of a " + std::to_string(v.depth()) +
                     "-slice volume and has no neighbour triple");
  }
  return {v.slice(i - 1), v.slice(i), v.slice(i + 1), i};
}

N2NPair make_n2n_pair(const SliceTriple& t) {
  if (t.prev.shape() != t.cur.shape() || t.next.shape() != t.cur.shape()) {
    throw ShapeError("triple slices differ in shape: " + shape_str(t.prev.shape()) + ", " + shape_str(t.cur.shape()) +
                     ", " + shape_str(t.next.shape()));
  }
  if (t.index == 0) throw ShapeError("slice 0 is a boundary slice and has no neighbour triple");
  N2NPair out{t.cur, Tensor<float>(t.cur.shape())};
  for (std::size_t i = 0; i < t.cur.numel(); ++i) out.target[i] = (t.prev[i] + t.next[i]) * 0.5f;
  return out;
}

std::vector<PatchPair> sample_patches(const N2NPair& pair, std::size_t n, std::size_t size, std::size_t divisor,
                                      std::mt19937_64& rng) {
  const std::size_t H = pair.input.dim(0), W = pair.input.dim(1);
  if (size == 0 || size > H || size > W) {
    throw ShapeError("patch size " + std::to_string(size) + " does not fit a " + std::to_string(H) + "x" +
                     std::to_string(W) + " slice");
  }
  if (divisor == 0 || size % divisor != 0) {
    throw ShapeError("patch size " + std::to_string(size) + " is not divisible by " + std::to_string(divisor));
  }
  std::vector<PatchPair> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    PatchPair p;
    p.y = std::uniform_int_distribution<std::size_t>(0, H - size)(rng);
    p.x = std::uniform_int_distribution<std::size_t>(0, W - size)(rng);
    p.input = Tensor<float>({size, size});
    p.target = Tensor<float>({size, size});
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        p.input[y * size + x] = pair.input[(p.y + y) * W + p.x + x];
        p.target[y * size + x] = pair.target[(p.y + y) * W + p.x + x];
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

// -- RVOL -------------------------------------------------------------------

namespace {
constexpr std::string_view kVolumeMagic = "RVOL";
}

std::string encode_volume(const Volume& v) {
  v.validate();
  std::string payload;
  payload.reserve(4 * v.values.size());
  for (float x : v.values) binary::put_f32(payload, x);
  const nlohmann::json header = {{"dims", v.dims}, {"spacing", v.spacing}, {"dtype", "f32"}, {"unit", "HU"}};
  return binary::frame(kVolumeMagic, kVolumeVersion, header, payload);
}

Volume decode_volume(std::string_view bytes) {
  const auto [header, payload] = binary::unframe(bytes, kVolumeMagic, kVolumeVersion);
  Volume v;
  try {
    v.dims = header.at("dims").get<Dims3>();
    v.spacing = header.at("spacing").get<std::array<double, 3>>();
    if (header.at("dtype").get<std::string>() != "f32") {
      throw FormatError(FormatErrorKind::kMalformedHeader, "unsupported dtype " + header.at("dtype").dump());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, e.what());
  }
  const std::size_t count = v.dims[0] * v.dims[1] * v.dims[2];
  if (payload.size() != 4 * count) {
    throw FormatError(FormatErrorKind::kPayloadSizeMismatch,
                      "dims describe " + std::to_string(4 * count) + " payload bytes, file holds " +
                          std::to_string(payload.size()));
  }
  v.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) v.values[i] = binary::get_f32(payload, 4 * i);
  v.validate();
  return v;
}

void write_volume(const Volume& v, const std::filesystem::path& path) { binary::write_file(path, encode_volume(v)); }

Volume read_volume(const std::filesystem::path& path) { return decode_volume(binary::read_file(path)); }

std::filesystem::path sidecar_path(const std::filesystem::path& volume_path) {
  auto p = volume_path;
  return p.replace_extension(".json");
}

}  // namespace ctflow
