#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "ctflow/checkpoint.hpp"
#include "ctflow/model.hpp"
#include "test_util.hpp"

namespace ctflow {
namespace {

using testing::random_tensor;

ModelConfig small_config(std::size_t channels = 8, std::size_t blocks = 2) {
  ModelConfig cfg;
  cfg.channels = channels;
  cfg.blocks = blocks;
  return cfg;
}

template <typename T>
ModelBundle<T> random_m3(const ModelConfig& cfg, std::uint64_t seed, double gain = 0.3) {
  auto model = build_model<T>(Arch::kM3, cfg, seed);
  randomize_projections(model.parameters(), seed + 1, gain);
  return model;
}

TEST(Coupling, StubSubnetsHandEvaluated) {
  const SubnetFn<float> identity = [](const Var<float>& x) { return x; };
  const SubnetFn<float> zero = [](const Var<float>& x) { return scale(x, 0.0f); };
  Var<float> m(Tensor<float>({1, 2, 1, 1}, std::vector<float>{1.0f, 2.0f}));
  const auto n = affine_coupling_forward(m, identity, zero, identity, 2.0f);
  EXPECT_EQ(n.value()[0], 3.0f);
  EXPECT_EQ(n.value()[1], 5.0f);
  const auto back = affine_coupling_inverse(n, identity, zero, identity, 2.0f);
  EXPECT_EQ(back.value()[0], 1.0f);
  EXPECT_EQ(back.value()[1], 2.0f);
}

TEST(Coupling, ScaleClampIsBoundedAndZeroAtZero) {
  Var<double> raw(Tensor<double>({4}, std::vector<double>{0.0, 1e6, -1e6, 0.5}));
  const auto s = bounded_log_scale(raw, 2.0).value();
  EXPECT_EQ(s[0], 0.0);
  EXPECT_NEAR(s[1], 2.0, 1e-12);
  EXPECT_NEAR(s[2], -2.0, 1e-12);
  EXPECT_NEAR(s[3], 2.0 * std::tanh(0.25), 1e-15);
}

TEST(Coupling, ZeroInitialisedBlockIsIdentity) {
  std::mt19937_64 rng(3);
  const auto cfg = small_config();
  CouplingBlock<float> block(32, cfg, rng);
  const auto x = random_tensor<float>({2, 32, 4, 4}, 4);
  EXPECT_EQ(coupling_forward(Var<float>(x), block).value(), x);
  EXPECT_EQ(coupling_inverse(Var<float>(x), block).value(), x);
}

TEST(Coupling, RandomBlockRoundTrips) {
  const auto cfg = small_config(8, 1);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto model = random_m3<float>(cfg, seed, 1.0);
    const auto& block = model.invertible->blocks().front();
    const auto m = random_tensor<float>({2, 32, 6, 6}, 100 + seed);
    const auto n = coupling_forward(Var<float>(m), block);
    EXPECT_GT(max_abs_diff(n.value(), m), 1e-2);  // the block is far from identity
    EXPECT_LE(max_abs_diff(coupling_inverse(n, block).value(), m), 1e-4);
    EXPECT_LE(max_abs_diff(coupling_forward(coupling_inverse(Var<float>(m), block), block).value(), m), 1e-4);
  }
}

TEST(Core, ZeroInitialisedCoreIsExactIdentity) {
  const auto model = build_model<float>(Arch::kM3, small_config(8, 3), 7);
  const auto x = random_tensor<float>({2, 8, 8, 8}, 8);
  EXPECT_EQ(model.invertible->core_forward(Var<float>(x)).value(), x);
  EXPECT_EQ(model.invertible->core_inverse(Var<float>(x)).value(), x);
}

TEST(Core, DefaultWidthRoundTripF32AndF64) {
  ModelConfig cfg;  // C = 64, 12 blocks
  // Gain 0.1 moves the output by ~8 while activations stay O(10); an absolute
  // tolerance only makes sense while magnitudes are bounded.
  const auto model = random_m3<float>(cfg, 11, 0.1);
  const auto x = random_tensor<float>({2, 64, 16, 16}, 12);
  const auto y = model.invertible->core_forward(Var<float>(x));
  EXPECT_LE(max_abs_diff(model.invertible->core_inverse(y).value(), x), 1e-4);

  const auto model64 = cast_bundle<double>(model);
  const auto x64 = random_tensor<double>({2, 64, 16, 16}, 12);
  const auto y64 = model64.invertible->core_forward(Var<double>(x64));
  EXPECT_LE(max_abs_diff(model64.invertible->core_inverse(y64).value(), x64), 1e-10);
}

TEST(Core, WrongInverseOrderDoesNotRoundTrip) {
  const auto model = random_m3<double>(small_config(8, 2), 21, 1.0);
  const auto& blocks = model.invertible->blocks();
  const auto x = random_tensor<double>({1, 32, 4, 4}, 22);
  Var<double> h = coupling_forward(coupling_forward(Var<double>(x), blocks[0]), blocks[1]);
  const auto right = coupling_inverse(coupling_inverse(h, blocks[1]), blocks[0]);
  const auto wrong = coupling_inverse(coupling_inverse(h, blocks[0]), blocks[1]);
  EXPECT_LE(max_abs_diff(right.value(), x), 1e-10);
  EXPECT_GT(max_abs_diff(wrong.value(), x), 1e-2);
}

TEST(Core, IndivisibleSpatialSizeAsksForPadding) {
  const auto model = build_model<float>(Arch::kM3, small_config(), 1);
  try {
    model.invertible->core_forward(Var<float>(Tensor<float>({1, 8, 7, 8})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(Core, ParametersAreSharedBetweenDirections) {
  const auto model = random_m3<float>(small_config(8, 2), 31);
  const auto x = Var<float>(random_tensor<float>({1, 8, 4, 4}, 32));
  const auto fwd_before = model.invertible->core_forward(x).value();
  const auto inv_before = model.invertible->core_inverse(x).value();
  for (const auto& p : model.parameters()) {
    if (p.name == "core.block01.phi3.proj.bias") {
      Var<float> v = p.var;
      v.mutable_value()[0] += 0.5f;
    }
  }
  EXPECT_GT(max_abs_diff(model.invertible->core_forward(x).value(), fwd_before), 1e-3);
  EXPECT_GT(max_abs_diff(model.invertible->core_inverse(x).value(), inv_before), 1e-3);
}

TEST(Model, ForwardAndReverseShapes) {
  const auto model = build_model<float>(Arch::kM3, small_config(), 41);
  const auto y = Var<float>(testing::uniform_tensor<float>({4, 1, 32, 32}, 42));
  const auto xhat = model.denoise(y);
  EXPECT_EQ(xhat.shape(), (Shape{4, 1, 32, 32}));
  EXPECT_TRUE(all_finite(xhat.value()));
  const auto yhat = model.reconstruct(xhat);
  EXPECT_EQ(yhat.shape(), (Shape{4, 1, 32, 32}));
}

TEST(Model, ReverseLossReachesEncoderDecoderAndCore) {
  const auto model = build_model<float>(Arch::kM3, small_config(), 43);
  const auto y = Var<float>(testing::uniform_tensor<float>({2, 1, 8, 8}, 44));
  const auto yhat = model.reconstruct(model.denoise(y));
  const auto diff = sub(yhat, y);
  backward(sum(mul(diff, diff)));
  std::set<std::string> touched;
  for (const auto& p : model.parameters()) {
    const auto g = p.var.grad();
    double norm = 0.0;
    for (float v : g.data()) norm += std::abs(v);
    if (norm > 0.0) touched.insert(p.name);
  }
  for (const char* name : {"enc_x.weight", "dec_x.weight", "enc_y.weight", "dec_y.weight",
                           "core.block00.phi1.proj.weight", "core.block01.phi3.proj.weight"}) {
    EXPECT_TRUE(touched.count(name)) << name;
  }
}

TEST(BuildModel, BaselinesMatchInvertibleSize) {
  for (std::size_t channels : {8u, 32u, 64u}) {
    const auto cfg = small_config(channels, 12);
    const std::size_t m3 = denoiser_parameter_count(cfg);
    const auto built = build_model<float>(Arch::kM3, cfg, 1);
    EXPECT_EQ(built.parameter_count(), m3);
    const std::size_t depth = matching_baseline_depth(cfg);
    const double ratio = static_cast<double>(baseline_parameter_count(cfg, depth)) / static_cast<double>(m3);
    EXPECT_NEAR(ratio, 1.0, 0.1) << "C=" << channels;
  }
  // C = 64: 12 x 3 x (dense 202880 + projection 295040) + encoders/decoders 2434.
  EXPECT_EQ(denoiser_parameter_count(ModelConfig{}), 17927554u);
}

TEST(BuildModel, M2HasIndependentNetworks) {
  const auto cfg = small_config(8, 2);
  const auto m2 = build_model<float>(Arch::kM2, cfg, 5);
  ASSERT_TRUE(m2.forward_net && m2.reverse_net);
  const auto params = m2.parameters();
  std::set<const void*> ids;
  std::size_t f = 0, r = 0;
  for (const auto& p : params) {
    ids.insert(p.var.id());
    f += p.name.rfind("F.", 0) == 0;
    r += p.name.rfind("R.", 0) == 0;
  }
  EXPECT_EQ(ids.size(), params.size());
  EXPECT_EQ(f, r);
  EXPECT_EQ(f + r, params.size());
  const auto m1 = build_model<float>(Arch::kM1, cfg, 5);
  EXPECT_FALSE(m1.reverse_net.has_value());
  EXPECT_FALSE(m1.has_reverse());
  EXPECT_EQ(2 * m1.parameter_count(), m2.parameter_count());
}

TEST(BuildModel, UnknownArchitecture) { EXPECT_THROW(parse_arch("M4"), ConfigError); }

TEST(BuildModel, BaselineStartsAsEncoderDecoder) {
  // Residual dense blocks with zero projections pass features through unchanged.
  const auto cfg = small_config(8, 2);
  const auto m1 = build_model<double>(Arch::kM1, cfg, 9);
  const auto m3 = build_model<double>(Arch::kM3, cfg, 9);
  const auto y = Var<double>(random_tensor<double>({1, 1, 8, 8}, 10));
  EXPECT_TRUE(all_finite(m1.denoise(y).value()));
  EXPECT_TRUE(all_finite(m3.denoise(y).value()));
}

// -- checkpoint ---------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  for (Arch arch : {Arch::kM1, Arch::kM2, Arch::kM3}) {
    const auto model = build_model<float>(arch, small_config(8, 2), 3);
    randomize_projections(model.parameters(), 4, 0.5);
    const std::string bytes = encode_checkpoint(model_to_checkpoint(model));
    const auto loaded = model_from_checkpoint(decode_checkpoint(bytes));
    EXPECT_EQ(loaded.arch, arch);
    const auto a = model.parameters();
    const auto b = loaded.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].var.value(), b[i].var.value()) << a[i].name;
    EXPECT_EQ(encode_checkpoint(model_to_checkpoint(loaded)), bytes);
  }
}

TEST(Checkpoint, HeaderLayout) {
  const auto model = build_model<float>(Arch::kM3, small_config(8, 1), 3);
  const std::string bytes = encode_checkpoint(model_to_checkpoint(model));
  EXPECT_EQ(bytes.substr(0, 4), "INNC");
  EXPECT_EQ(binary::get_u32(bytes, 4), kCheckpointVersion);
  const auto header = nlohmann::json::parse(bytes.substr(12, binary::get_u32(bytes, 8)));
  EXPECT_EQ(header.at("arch"), "M3");
  EXPECT_EQ(header.at("channels"), 8);
  EXPECT_EQ(header.at("blocks"), 1);
  EXPECT_EQ(header.at("r"), 2);
  EXPECT_EQ(header.at("s_max"), 2.0);
  std::vector<std::string> names;
  for (const auto& e : header.at("tensor_index")) names.push_back(e.at("name"));
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
  EXPECT_EQ(header.at("tensor_index")[0].at("byte_offset"), 0);
}

FormatErrorKind decode_error(const std::string& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode succeeded";
  return FormatErrorKind::kIo;
}

TEST(Checkpoint, CorruptionProducesDistinctErrors) {
  const auto model = build_model<float>(Arch::kM3, small_config(8, 1), 3);
  const std::string good = encode_checkpoint(model_to_checkpoint(model));

  std::string magic = good;
  magic[0] = 'X';
  EXPECT_EQ(decode_error(magic), FormatErrorKind::kBadMagic);

  std::string version = good;
  version[4] = 9;
  EXPECT_EQ(decode_error(version), FormatErrorKind::kUnsupportedVersion);

  EXPECT_EQ(decode_error(good.substr(0, 40)), FormatErrorKind::kTruncated);
  EXPECT_EQ(decode_error(good.substr(0, good.size() - 4)), FormatErrorKind::kPayloadSizeMismatch);
  EXPECT_EQ(decode_error(good + "abcd"), FormatErrorKind::kPayloadSizeMismatch);

  std::string payload = good;
  payload[payload.size() - 3] ^= 0x10;
  EXPECT_EQ(decode_error(payload), FormatErrorKind::kChecksumMismatch);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "ctflow_model_test.innc";
  const auto model = build_model<float>(Arch::kM3, small_config(8, 1), 3);
  write_checkpoint(path, model_to_checkpoint(model));
  const auto loaded = model_from_checkpoint(read_checkpoint(path));
  EXPECT_EQ(loaded.parameter_count(), model.parameter_count());
  std::filesystem::remove(path);
  EXPECT_THROW(read_checkpoint(path), FormatError);
}

}  // namespace
}  // namespace ctflow
