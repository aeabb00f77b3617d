#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "epvsq/rng.hpp"
#include "epvsq/volgrid.hpp"
#include "oracles.hpp"

namespace epvsq {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  auto dir = fs::temp_directory_path() / "epvsq_volgrid_test";
  fs::create_directories(dir);
  return dir;
}

using testing::bit_equal;
using testing::flood_dilation_oracle;
using testing::random_mask;
using testing::random_volume;

// ---------------------------------------------------------------------------

TEST(Svol, RoundTripConstantVolume) {
  const Volume v(Dims{2, 2, 2}, Spacing{0.5f, 0.5f, 0.5f}, 0.5f);
  const auto path = scratch_dir() / "const.svol";
  write_volume(path, v);
  EXPECT_TRUE(bit_equal(read_volume(path), v));
}

TEST(Svol, RoundTripIsBitExactOnRandomVolumes) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const Dims d{1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)};
    Volume v = random_volume(rng, d);
    // Include awkward but finite payloads.
    v[0] = -0.0f;
    if (v.size() > 1) v[1] = std::numeric_limits<float>::denorm_min();
    if (v.size() > 2) v[2] = std::numeric_limits<float>::max();
    const auto back = svol::decode(svol::encode(v)).volume;
    ASSERT_TRUE(bit_equal(back, v)) << "trial " << trial;
  }
}

TEST(Svol, HeaderLayoutIsLittleEndian) {
  const Volume v(Dims{3, 1, 2}, Spacing{1.0f, 2.0f, 0.5f}, 1.0f);
  const Bytes b = svol::encode(v);
  ASSERT_EQ(b.size(), svol::kHeaderBytes + 6 * 4);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "SVOL");
  EXPECT_EQ(b[4], 1);  // version
  EXPECT_EQ(b[5], 0);
  EXPECT_EQ(b[6], 1);  // dtype f32
  EXPECT_EQ(b[8], 3);  // H
  EXPECT_EQ(b[12], 1);  // W
  EXPECT_EQ(b[16], 2);  // D
  float sy;
  std::memcpy(&sy, b.data() + 24, 4);
  EXPECT_EQ(sy, 2.0f);
}

TEST(Svol, MaskUsesDtypeTwo) {
  MaskVolume m(Dims{2, 2, 1}, Spacing{}, 0.25f);
  const auto path = scratch_dir() / "mask.svol";
  write_mask(path, m);
  EXPECT_EQ(read_file(path)[6], 2);
  EXPECT_EQ(read_mask(path), m);
  EXPECT_THROW(read_mask(scratch_dir() / "const.svol"), FormatError);
}

TEST(Svol, BadMagicIsFormatError) {
  Bytes b = svol::encode(Volume(Dims{2, 2, 2}, Spacing{}, 1.0f));
  std::memcpy(b.data(), "XXXX", 4);
  try {
    svol::decode(b);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST(Svol, PatchedDimsAreLengthMismatch) {
  Bytes b = svol::encode(Volume(Dims{3, 3, 3}, Spacing{}, 1.0f));
  b[8] = 4;  // H: 3 -> 4
  try {
    svol::decode(b);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("length mismatch"), std::string::npos);
  }
}

TEST(Svol, BadVersionAndZeroDimNameTheField) {
  Bytes b = svol::encode(Volume(Dims{2, 2, 2}, Spacing{}, 1.0f));
  Bytes v2 = b;
  v2[4] = 7;
  EXPECT_THROW(svol::decode(v2), FormatError);
  Bytes z = b;
  std::memset(z.data() + 12, 0, 4);
  try {
    svol::decode(z);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("dims.W"), std::string::npos);
  }
}

TEST(Svol, NanPayloadIsValidationError) {
  Bytes b = svol::encode(Volume(Dims{2, 1, 1}, Spacing{}, 1.0f));
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(b.data() + svol::kHeaderBytes + 4, &nan, 4);
  EXPECT_THROW(svol::decode(b), ValidationError);
}

// ---------------------------------------------------------------------------

TEST(Dilate, SingleVoxelOneIterationGivesSevenVoxels) {
  MaskVolume m(Dims{11, 11, 11}, Spacing{});
  m(5, 5, 5) = 1.0f;
  EXPECT_EQ(count_nonzero(binary_dilate(m, 1)), 7u);
}

TEST(Dilate, SingleVoxelFourIterationsMatchesL1Ball) {
  MaskVolume m(Dims{11, 11, 11}, Spacing{});
  m(5, 5, 5) = 1.0f;
  // Lattice points with |dx|+|dy|+|dz| <= 4, enumerated independently.
  std::size_t expected = 0;
  for (int dx = -4; dx <= 4; ++dx)
    for (int dy = -4; dy <= 4; ++dy)
      for (int dz = -4; dz <= 4; ++dz) expected += std::abs(dx) + std::abs(dy) + std::abs(dz) <= 4;
  ASSERT_EQ(expected, 129u);
  const auto out = binary_dilate(m, 4);
  EXPECT_EQ(count_nonzero(out), expected);
  EXPECT_EQ(out, flood_dilation_oracle(m, 4));
}

TEST(Dilate, EmptyMaskStaysEmpty) {
  MaskVolume m(Dims{6, 5, 4}, Spacing{});
  EXPECT_EQ(count_nonzero(binary_dilate(m, 3)), 0u);
}

TEST(Dilate, NonBinaryInputRejected) {
  MaskVolume m(Dims{3, 3, 3}, Spacing{});
  m[4] = 0.5f;
  EXPECT_THROW(binary_dilate(m, 1), ValidationError);
}

TEST(Dilate, MatchesFloodOracleOnRandomMasks) {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const Dims d{3 + rng.below(10), 3 + rng.below(10), 3 + rng.below(10)};
    const auto m = random_mask(rng, d, rng.uniform(0.0, 0.08));
    const int it = static_cast<int>(rng.below(5));
    ASSERT_EQ(binary_dilate(m, it), flood_dilation_oracle(m, it)) << "trial " << trial;
  }
}

TEST(Dilate, MonotoneAndDistributesOverUnion) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Dims d{8, 7, 6};
    const auto a = random_mask(rng, d, 0.05), b = random_mask(rng, d, 0.05);
    MaskVolume u(d, Spacing{});
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::max(a[i], b[i]);
    const auto da = binary_dilate(a, 2), db = binary_dilate(b, 2), du = binary_dilate(u, 2);
    for (std::size_t i = 0; i < u.size(); ++i) {
      ASSERT_GE(da[i], a[i]);
      ASSERT_EQ(du[i], std::max(da[i], db[i]));
    }
  }
}

// ---------------------------------------------------------------------------

TEST(Gaussian, KernelRadiusAndNormalisation) {
  const auto k = gaussian_kernel(2.0);
  EXPECT_EQ(k.size(), 13u);
  double s = 0;
  for (double v : k) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_EQ(gaussian_kernel(0.4).size(), 5u);  // ceil(1.2) = 2
}

TEST(Gaussian, PreservesConstantInterior) {
  const Volume v(Dims{30, 30, 30}, Spacing{}, 1.0f);
  const auto s = gaussian_smooth(v, 2.0);
  for (std::size_t z = 6; z < 24; ++z)
    for (std::size_t y = 6; y < 24; ++y)
      for (std::size_t x = 6; x < 24; ++x) ASSERT_NEAR(s(x, y, z), 1.0, 1e-6);
}

TEST(Gaussian, ImpulseMatchesDenseConvolutionOracle) {
  const double sigma = 2.0;
  const Dims d{21, 19, 17};
  Volume v(d, Spacing{});
  const std::int64_t cx = 10, cy = 9, cz = 8;
  v(cx, cy, cz) = 1.0f;
  const auto s = gaussian_smooth(v, sigma);

  const auto expected = testing::dense_gaussian_oracle(v, sigma);
  double peak = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    ASSERT_NEAR(s[i], expected[i], 1e-6) << "voxel " << i;
    peak = std::max<double>(peak, s[i]);
  }
  EXPECT_LT(peak, 1.0);
}

TEST(Gaussian, RejectsNonPositiveSigma) {
  const Volume v(Dims{3, 3, 3}, Spacing{}, 1.0f);
  EXPECT_THROW(gaussian_smooth(v, 0.0), ValidationError);
  EXPECT_THROW(gaussian_smooth(v, -1.0), ValidationError);
}

TEST(Gaussian, IsLinearInDoublePrecision) {
  Rng rng(4);
  using VolumeD = BasicVolume<double>;
  for (int trial = 0; trial < 10; ++trial) {
    VolumeD v(Dims{9, 8, 7}, Spacing{});
    for (auto& x : v.data()) x = rng.normal();
    const double a = rng.uniform(-5.0, 5.0);
    VolumeD av = v;
    for (auto& x : av.data()) x *= a;
    const auto lhs = gaussian_smooth(av, 1.3);
    const auto rhs = gaussian_smooth(v, 1.3);
    for (std::size_t i = 0; i < v.size(); ++i) {
      ASSERT_NEAR(lhs[i], a * rhs[i], 1e-9 * std::max(1.0, std::abs(a * rhs[i])));
    }
  }
}

// ---------------------------------------------------------------------------

MaskVolume centred_cube(Dims d, std::size_t half) {
  MaskVolume m(d, Spacing{});
  for (std::size_t z = d.nz / 2 - half; z <= d.nz / 2 + half; ++z)
    for (std::size_t y = d.ny / 2 - half; y <= d.ny / 2 + half; ++y)
      for (std::size_t x = d.nx / 2 - half; x <= d.nx / 2 + half; ++x) m(x, y, z) = 1.0f;
  return m;
}

TEST(SmoothRoi, AllOnesVolumeWithCubeRoi) {
  const Dims d{40, 40, 40};
  const Volume v(d, Spacing{}, 1.0f);
  PreprocessConfig cfg;
  cfg.crop_dims = Dims{36, 36, 36};
  const auto roi = make_smooth_roi(v, centred_cube(d, 3), cfg);
  EXPECT_FALSE(roi.rescale_skipped);
  EXPECT_EQ(roi.image.dims(), cfg.crop_dims);
  float mx = 0;
  for (std::size_t i = 0; i < roi.image.size(); ++i) {
    mx = std::max(mx, roi.image[i]);
    ASSERT_GE(roi.image[i], 0.0f);
    ASSERT_LE(roi.image[i], 1.0f);
    if (roi.smooth_mask[i] == 0.0f) {
      ASSERT_EQ(roi.image[i], 0.0f);
    }
  }
  EXPECT_EQ(mx, 1.0f);
  // Beyond cube half-width + dilation + kernel radius nothing survives.
  const auto centre = Index3{20, 20, 20} - roi.origin;
  EXPECT_EQ(roi.image(centre.x + 14, centre.y, centre.z), 0.0f);
  EXPECT_GT(roi.image(centre.x + 12, centre.y, centre.z), 0.0f);
}

TEST(SmoothRoi, EmptyRoiIsDegenerate) {
  const Dims d{10, 10, 10};
  EXPECT_THROW(make_smooth_roi(Volume(d, Spacing{}, 1.0f), MaskVolume(d, Spacing{}), PreprocessConfig{}),
               DegenerateError);
}

TEST(SmoothRoi, ZeroVolumeSkipsRescale) {
  const Dims d{20, 20, 20};
  PreprocessConfig cfg;
  cfg.crop_dims = Dims{10, 10, 10};
  const auto roi = make_smooth_roi(Volume(d, Spacing{}), centred_cube(d, 2), cfg);
  EXPECT_TRUE(roi.rescale_skipped);
  EXPECT_EQ(count_nonzero(roi.image), 0u);
}

TEST(SmoothRoi, EqualsStraightLineComposition) {
  Rng rng(99);
  const Dims d{30, 26, 22};
  Volume v(d, Spacing{0.5f, 0.5f, 0.5f});
  for (auto& x : v.data()) x = static_cast<float>(rng.uniform(0.1, 1.0));
  MaskVolume roi(d, Spacing{0.5f, 0.5f, 0.5f});
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const double ex = (x - 13.0) / 6.0, ey = (y - 12.0) / 5.0, ez = (z - 10.0) / 4.0;
        roi(x, y, z) = ex * ex + ey * ey + ez * ez <= 1.0 ? 1.0f : 0.0f;
      }
  PreprocessConfig cfg;
  cfg.crop_dims = Dims{24, 20, 26};  // z exceeds the grid: symmetric padding
  const auto got = make_smooth_roi(v, roi, cfg);

  const auto smooth = gaussian_smooth(binary_dilate(roi, 4), 2.0);
  double sx = 0, sy = 0, sz = 0, tot = 0;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const double m = std::clamp(smooth(x, y, z), 0.0f, 1.0f);
        sx += m * x, sy += m * y, sz += m * z, tot += m;
      }
  const auto cx = static_cast<std::int64_t>(std::floor(sx / tot));
  const auto cy = static_cast<std::int64_t>(std::floor(sy / tot));
  const std::int64_t ox = std::clamp<std::int64_t>(cx - 12, 0, 30 - 24);
  const std::int64_t oy = std::clamp<std::int64_t>(cy - 10, 0, 26 - 20);
  const std::int64_t oz = -2;
  EXPECT_EQ(got.origin, (Index3{ox, oy, oz}));
  float peak = 0;
  std::vector<float> expect(cfg.crop_dims.size(), 0.0f);
  for (std::int64_t z = 0; z < 26; ++z)
    for (std::int64_t y = 0; y < 20; ++y)
      for (std::int64_t x = 0; x < 24; ++x) {
        const std::int64_t px = x + ox, py = y + oy, pz = z + oz;
        float val = 0;
        if (v.contains(px, py, pz)) val = v(px, py, pz) * std::clamp(smooth(px, py, pz), 0.0f, 1.0f);
        expect[x + 24 * (y + 20 * z)] = val;
        peak = std::max(peak, val);
      }
  for (std::size_t i = 0; i < expect.size(); ++i) ASSERT_FLOAT_EQ(got.image[i], expect[i] / peak);
  EXPECT_EQ(*std::max_element(got.image.data().begin(), got.image.data().end()), 1.0f);
}

TEST(SmoothRoi, DimensionMismatchRejected) {
  EXPECT_THROW(make_smooth_roi(Volume(Dims{4, 4, 4}, Spacing{}), MaskVolume(Dims{4, 4, 5}, Spacing{}),
                               PreprocessConfig{}),
               ShapeError);
}

// ---------------------------------------------------------------------------

TEST(Rigid, IdentityIsBitExact) {
  Rng rng(1);
  const auto v = random_volume(rng, Dims{7, 6, 5});
  EXPECT_TRUE(bit_equal(rigid_resample(v, RigidTransform{}), v));
}

TEST(Rigid, DoubleFlipIsIdentity) {
  Rng rng(2);
  for (int axis = 0; axis < 3; ++axis) {
    const auto v = random_volume(rng, Dims{7, 6, 5});
    RigidTransform tf;
    tf.flip[axis] = true;
    const auto once = rigid_resample(v, tf);
    EXPECT_FALSE(bit_equal(once, v));
    EXPECT_TRUE(bit_equal(rigid_resample(once, tf), v));
  }
}

TEST(Rigid, UnitTranslationMovesImpulse) {
  Volume v(Dims{9, 9, 9}, Spacing{});
  v(4, 4, 4) = 1.0f;
  RigidTransform tf;
  tf.translation = {1, 0, 0};
  const auto out = rigid_resample(v, tf);
  for (std::int64_t z = 0; z < 9; ++z)
    for (std::int64_t y = 0; y < 9; ++y)
      for (std::int64_t x = 0; x < 9; ++x) ASSERT_EQ(out(x, y, z), v.get_or_zero(x - 1, y, z));
}

TEST(Rigid, IntegerTranslationEqualsIndexShift) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = random_volume(rng, Dims{6 + rng.below(4), 5 + rng.below(4), 4 + rng.below(4)});
    RigidTransform tf;
    const std::int64_t t[3] = {static_cast<std::int64_t>(rng.below(7)) - 3,
                               static_cast<std::int64_t>(rng.below(7)) - 3,
                               static_cast<std::int64_t>(rng.below(7)) - 3};
    tf.translation = {double(t[0]), double(t[1]), double(t[2])};
    const auto out = rigid_resample(v, tf);
    const Dims d = v.dims();
    for (std::size_t z = 0; z < d.nz; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x)
          ASSERT_EQ(out(x, y, z), v.get_or_zero(std::int64_t(x) - t[0], std::int64_t(y) - t[1],
                                                std::int64_t(z) - t[2]));
  }
}

TEST(Rigid, RotationKeepsCentreAndRejectsLargeAngles) {
  Volume v(Dims{9, 9, 9}, Spacing{});
  v(4, 4, 4) = 2.0f;
  RigidTransform tf;
  tf.rotation = {0.3, -0.2, 0.1};
  EXPECT_NEAR(rigid_resample(v, tf)(4, 4, 4), 2.0f, 1e-6);
  tf.rotation = {4.0, 0, 0};
  EXPECT_THROW(rigid_resample(v, tf), ValidationError);
}

}  // namespace
}  // namespace epvsq
