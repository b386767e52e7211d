/*
 * Copyright 2026 The swinct Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "swinct/pipeline.hpp"
#include "swinct/volume.hpp"

namespace swinct {
namespace {

namespace fs = std::filesystem;

Volume patterned_volume(std::size_t d, std::size_t h, std::size_t w,
                        const std::string& id = "vol") {
  Volume vol;
  vol.id = id;
  vol.depth = d;
  vol.height = h;
  vol.width = w;
  vol.voxels.resize(d * h * w);
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        vol.at(z, y, x) =
            static_cast<std::int16_t>((z * 31 + y * 7 + x) % 1000 - 500);
  return vol;
}

// ---------------------------------------------------------------------------
// SWV1 container
// ---------------------------------------------------------------------------

TEST(SwvFormatTest, RoundtripPreservesEverything) {
  Volume vol = patterned_volume(3, 4, 5, "rt");
  vol.spacing = {2.5f, 0.7f, 0.7f};
  Volume back = decode_swv(encode_swv(vol), "rt");
  EXPECT_EQ(back.id, "rt");
  EXPECT_EQ(back.depth, 3u);
  EXPECT_EQ(back.height, 4u);
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.spacing, vol.spacing);
  EXPECT_EQ(back.voxels, vol.voxels);
}

TEST(SwvFormatTest, DecodesHandAssembledBytes) {
  // 1x1x2 volume, unit spacing, voxels {-1000, 400}.
  std::string bytes = "SWV1";
  bytes.push_back(1);  // dtype int16
  bytes.push_back(3);  // rank
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
      bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  u32(1);
  u32(1);
  u32(2);
  float one = 1.0f;
  std::uint32_t fb;
  std::memcpy(&fb, &one, 4);
  u32(fb);
  u32(fb);
  u32(fb);
  auto i16 = [&](std::int16_t v) {
    bytes.push_back(static_cast<char>(v & 0xff));
    bytes.push_back(static_cast<char>((v >> 8) & 0xff));
  };
  i16(-1000);
  i16(400);
  ASSERT_EQ(bytes.size(), 30u + 4u);
  Volume vol = decode_swv(bytes, "fixture");
  EXPECT_EQ(vol.depth, 1u);
  EXPECT_EQ(vol.width, 2u);
  EXPECT_EQ(vol.at(0, 0, 0), -1000);
  EXPECT_EQ(vol.at(0, 0, 1), 400);
  EXPECT_FLOAT_EQ(vol.spacing[0], 1.0f);
}

TEST(SwvFormatTest, ReportsErrorOffsets) {
  Volume vol = patterned_volume(2, 2, 2);
  std::string good = encode_swv(vol);

  std::string truncated = good.substr(0, 10);
  try {
    decode_swv(truncated, "t");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 10u);
  }

  std::string bad = good;
  bad[0] = 'X';
  try {
    decode_swv(bad, "t");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 0u);
  }

  bad = good;
  bad[4] = 7;  // unknown dtype
  try {
    decode_swv(bad, "t");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 4u);
  }

  bad = good;
  bad[5] = 2;  // rank must be 3
  try {
    decode_swv(bad, "t");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 5u);
  }

  bad = good;
  bad[6] = bad[7] = bad[8] = bad[9] = 0;  // depth = 0
  try {
    decode_swv(bad, "t");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 6u);
  }

  bad = good;
  for (int i = 6; i < 18; ++i) bad[i] = static_cast<char>(0xff);
  try {
    decode_swv(bad, "t");  // dimension product overflows size_t
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 6u);
  }

  bad = good;
  bad[22] = bad[23] = bad[24] = bad[25] = 0;  // spacing[1] = 0.0f
  try {
    decode_swv(bad, "t");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 22u);
  }

  bad = good + "xx";  // payload size no longer matches the dims
  try {
    decode_swv(bad, "t");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_EQ(e.byte_offset(), 30u);
  }
}

TEST(SwvFormatTest, FileRoundtripDerivesIdFromStem) {
  Volume vol = patterned_volume(2, 3, 4, "ignored");
  auto dir = fs::temp_directory_path() / "swv_test";
  fs::create_directories(dir);
  auto path = (dir / "case-007.swv").string();
  write_volume(path, vol);
  Volume back = load_volume(path);
  EXPECT_EQ(back.id, "case-007");
  EXPECT_EQ(back.voxels, vol.voxels);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

TEST(AnnotationTest, JsonlRoundtripIncludingNullDiameter) {
  std::vector<NoduleAnnotation> anns(2);
  anns[0] = {"case-1", {10, 20, 30}, 6.5};
  anns[1] = {"case-2", {0, 0, 1}, std::nullopt};
  auto back = parse_annotations(encode_annotations(anns));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].volume_id, "case-1");
  EXPECT_EQ(back[0].center_zyx, (std::array<std::int64_t, 3>{10, 20, 30}));
  ASSERT_TRUE(back[0].diameter_mm.has_value());
  EXPECT_DOUBLE_EQ(*back[0].diameter_mm, 6.5);
  EXPECT_FALSE(back[1].diameter_mm.has_value());
}

TEST(AnnotationTest, ParsesExplicitJsonl) {
  std::string text =
      "{\"volume_id\": \"v\", \"center_zyx\": [1, 2, 3], \"diameter_mm\": "
      "null}\n"
      "\n"
      "{\"volume_id\": \"w\", \"center_zyx\": [4, 5, 6]}\n";
  auto anns = parse_annotations(text);
  ASSERT_EQ(anns.size(), 2u);  // blank lines are skipped
  EXPECT_EQ(anns[1].volume_id, "w");
}

TEST(AnnotationTest, MalformedLinesReportTheirLineNumber) {
  std::string text =
      "{\"volume_id\": \"v\", \"center_zyx\": [1, 2, 3]}\n"
      "this is not json\n";
  try {
    parse_annotations(text);
    FAIL() << "expected data_error";
  } catch (const data_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_annotations("{\"volume_id\": \"v\"}\n"), data_error);
  EXPECT_THROW(
      parse_annotations(
          "{\"volume_id\": \"v\", \"center_zyx\": [1.5, 2, 3]}\n"),
      data_error);
}

TEST(AnnotationTest, CenterMustIndexTheVolume) {
  Volume vol = patterned_volume(4, 4, 4);
  EXPECT_NO_THROW(validate_annotation(vol, {"vol", {3, 3, 3}, {}}));
  EXPECT_THROW(validate_annotation(vol, {"vol", {4, 0, 0}, {}}), data_error);
  EXPECT_THROW(validate_annotation(vol, {"vol", {0, -1, 0}, {}}), data_error);
}

// ---------------------------------------------------------------------------
// HU windowing
// ---------------------------------------------------------------------------

TEST(HuWindowTest, MapsEndpointsMidpointAndClamps) {
  EXPECT_FLOAT_EQ(hu_to_unit(-1000), 0.0f);
  EXPECT_FLOAT_EQ(hu_to_unit(400), 1.0f);
  EXPECT_FLOAT_EQ(hu_to_unit(-300), 0.5f);
  EXPECT_FLOAT_EQ(hu_to_unit(-2000), 0.0f);
  EXPECT_FLOAT_EQ(hu_to_unit(1500), 1.0f);
}

TEST(HuWindowTest, IsMonotoneNonDecreasing) {
  float prev = hu_to_unit(-1300);
  for (int hu = -1293; hu <= 700; hu += 7) {
    float cur = hu_to_unit(static_cast<std::int16_t>(hu));
    EXPECT_GE(cur, prev) << "at " << hu;
    prev = cur;
  }
}

// ---------------------------------------------------------------------------
// Cropping
// ---------------------------------------------------------------------------

TEST(CropTest, InteriorCropCopiesVoxelsVerbatim) {
  Volume vol = patterned_volume(64, 64, 64);
  NoduleAnnotation ann{"vol", {32, 32, 32}, {}};
  Volume cube = crop_nodule(vol, ann);
  ASSERT_EQ(cube.depth, 48u);
  ASSERT_EQ(cube.height, 48u);
  ASSERT_EQ(cube.width, 48u);
  for (std::size_t z = 0; z < 48; z += 5)
    for (std::size_t y = 0; y < 48; y += 5)
      for (std::size_t x = 0; x < 48; x += 5)
        ASSERT_EQ(cube.at(z, y, x), vol.at(z + 8, y + 8, x + 8));
  // the pattern never emits -1000, so a fully interior crop has no fill
  EXPECT_EQ(std::count(cube.voxels.begin(), cube.voxels.end(),
                       std::int16_t{-1000}),
            0);
}

TEST(CropTest, CornerCropFillsOutsideWithAir) {
  Volume vol = patterned_volume(64, 64, 64);
  NoduleAnnotation ann{"vol", {0, 0, 0}, {}};
  Volume cube = crop_nodule(vol, ann);
  // half the cube hangs off each low face: 48^3 - 24^3 voxels read as air
  EXPECT_EQ(std::count(cube.voxels.begin(), cube.voxels.end(),
                       std::int16_t{-1000}),
            48 * 48 * 48 - 24 * 24 * 24);
  EXPECT_EQ(cube.at(0, 0, 0), -1000);
  EXPECT_EQ(cube.at(24, 24, 24), vol.at(0, 0, 0));
  EXPECT_EQ(cube.at(47, 25, 30), vol.at(23, 1, 6));
}

TEST(CropTest, MaskCropSharesTheGeometry) {
  Volume vol = patterned_volume(64, 64, 64);
  std::vector<std::uint8_t> mask(vol.numel(), 0);
  std::array<std::int64_t, 3> c{20, 24, 28};
  std::size_t ball = 0;
  for (std::size_t z = 0; z < 64; ++z)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        double dz = static_cast<double>(z) - static_cast<double>(c[0]);
        double dy = static_cast<double>(y) - static_cast<double>(c[1]);
        double dx = static_cast<double>(x) - static_cast<double>(c[2]);
        if (dz * dz + dy * dy + dx * dx <= 16.0) {
          mask[(z * 64 + y) * 64 + x] = 1;
          ++ball;
        }
      }
  NoduleAnnotation ann{"vol", c, {}};
  auto cube = crop_mask(vol, mask, ann);
  ASSERT_EQ(cube.size(), 48u * 48u * 48u);
  // radius-4 ball sits well inside the crop, so every voxel survives
  EXPECT_EQ(static_cast<std::size_t>(
                std::count(cube.begin(), cube.end(), std::uint8_t{1})),
            ball);
  EXPECT_EQ(cube[(24 * 48 + 24) * 48 + 24], 1);
  EXPECT_THROW(crop_mask(vol, std::vector<std::uint8_t>(5, 0), ann),
               data_error);
}

// ---------------------------------------------------------------------------
// Tri-axial slicing
// ---------------------------------------------------------------------------

TEST(SliceTest, EmitsOneSlicePerIndexPerAxisInOrder) {
  Volume vol = patterned_volume(48, 48, 48);
  auto slices = slice_triaxial(vol);
  ASSERT_EQ(slices.size(), 144u);
  for (std::size_t i = 0; i < 48; ++i) {
    EXPECT_EQ(slices[i].prov.axis, 'z');
    EXPECT_EQ(slices[i].prov.index, i);
    EXPECT_EQ(slices[48 + i].prov.axis, 'y');
    EXPECT_EQ(slices[96 + i].prov.axis, 'x');
    EXPECT_EQ(slices[i].label, 0);
  }
}

TEST(SliceTest, PixelsMatchDirectIndexingOnEveryAxis) {
  Volume vol = patterned_volume(3, 4, 5);
  auto slices = slice_triaxial(vol);
  ASSERT_EQ(slices.size(), 12u);

  const auto& sz = slices[1];  // axis z, index 1, [4,5]
  ASSERT_EQ(sz.height(), 4u);
  ASSERT_EQ(sz.width(), 5u);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t ccol = 0; ccol < 5; ++ccol)
      for (std::size_t ch = 0; ch < 3; ++ch)
        ASSERT_FLOAT_EQ(sz.image.values()[(r * 5 + ccol) * 3 + ch],
                        hu_to_unit(vol.at(1, r, ccol)));

  const auto& sy = slices[3 + 2];  // axis y, index 2, [3,5]
  ASSERT_EQ(sy.height(), 3u);
  ASSERT_EQ(sy.width(), 5u);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t ccol = 0; ccol < 5; ++ccol)
      ASSERT_FLOAT_EQ(sy.image.values()[(r * 5 + ccol) * 3],
                      hu_to_unit(vol.at(r, 2, ccol)));

  const auto& sx = slices[3 + 4 + 4];  // axis x, index 4, [3,4]
  ASSERT_EQ(sx.height(), 3u);
  ASSERT_EQ(sx.width(), 4u);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t ccol = 0; ccol < 4; ++ccol)
      ASSERT_FLOAT_EQ(sx.image.values()[(r * 4 + ccol) * 3],
                      hu_to_unit(vol.at(r, ccol, 4)));
}

TEST(SliceTest, MaskKeepsOnlySlicesTouchingTheNodule) {
  Volume vol = patterned_volume(6, 6, 6);
  std::vector<std::uint8_t> mask(vol.numel(), 0);
  mask[(2 * 6 + 1) * 6 + 3] = 1;  // (z,y,x) = (2,1,3)
  mask[(4 * 6 + 5) * 6 + 0] = 1;  // (z,y,x) = (4,5,0)
  auto slices = slice_triaxial(vol, &mask);
  // two positive planes per axis
  ASSERT_EQ(slices.size(), 6u);
  std::vector<std::pair<char, std::size_t>> got;
  for (const auto& s : slices) {
    got.emplace_back(s.prov.axis, s.prov.index);
    EXPECT_EQ(s.label, 1);
    EXPECT_EQ(s.mask.size(), s.height() * s.width());
    EXPECT_GE(std::count(s.mask.begin(), s.mask.end(), std::uint8_t{1}), 1);
  }
  std::vector<std::pair<char, std::size_t>> want{
      {'z', 2}, {'z', 4}, {'y', 1}, {'y', 5}, {'x', 0}, {'x', 3}};
  EXPECT_EQ(got, want);

  // mask plane carries the right pixel
  EXPECT_EQ(slices[0].mask[1 * 6 + 3], 1);
  EXPECT_EQ(std::count(slices[0].mask.begin(), slices[0].mask.end(),
                       std::uint8_t{1}),
            1);
}

TEST(SliceTest, AllZeroMaskYieldsNothingAndMismatchThrows) {
  Volume vol = patterned_volume(5, 5, 5);
  std::vector<std::uint8_t> zeros(vol.numel(), 0);
  EXPECT_TRUE(slice_triaxial(vol, &zeros).empty());
  std::vector<std::uint8_t> bad(7, 0);
  EXPECT_THROW(slice_triaxial(vol, &bad), data_error);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

SliceRecord tiny_record(std::size_t h, std::size_t w, bool with_mask,
                        std::uint64_t seed = 11) {
  SliceRecord rec;
  Rng rng(seed);
  std::vector<float> img(h * w * 3);
  for (auto& v : img) v = static_cast<float>(rng.uniform01());
  rec.image = Tensor<float>::from({h, w, 3}, std::move(img));
  rec.label = 1;
  rec.prov = {"case-9", 'z', 5, ""};
  if (with_mask) {
    rec.mask.assign(h * w, 0);
    for (auto& m : rec.mask) m = rng.below(4) == 0 ? 1 : 0;
  }
  return rec;
}

TEST(AugmentTest, QuarterTurnPermutesAKnownImage) {
  // [[a,b],[c,d]] rotated clockwise becomes [[c,a],[d,b]]
  std::vector<float> img(2 * 2 * 3);
  float vals[4] = {0.1f, 0.2f, 0.3f, 0.4f};
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) img[p * 3 + ch] = vals[p];
  SliceRecord rec;
  rec.image = Tensor<float>::from({2, 2, 3}, img);
  AugmentPlan plan;
  plan.quarter_turns = 1;
  auto out = augment(rec, plan);
  const auto& v = out.image.values();
  EXPECT_FLOAT_EQ(v[0 * 3], 0.3f);
  EXPECT_FLOAT_EQ(v[1 * 3], 0.1f);
  EXPECT_FLOAT_EQ(v[2 * 3], 0.4f);
  EXPECT_FLOAT_EQ(v[3 * 3], 0.2f);
}

TEST(AugmentTest, ExactOpsComposeToIdentity) {
  SliceRecord rec = tiny_record(6, 9, true);
  AugmentPlan turn;
  turn.quarter_turns = 1;
  SliceRecord r = rec;
  for (int i = 0; i < 4; ++i) r = augment(r, turn);
  EXPECT_EQ(r.image.values(), rec.image.values());
  EXPECT_EQ(r.mask, rec.mask);

  AugmentPlan both;
  both.flip_h = true;
  both.flip_v = true;
  r = augment(augment(rec, both), both);
  EXPECT_EQ(r.image.values(), rec.image.values());
  EXPECT_EQ(r.mask, rec.mask);
}

TEST(AugmentTest, ExactOpsPreserveMaskPixelCounts) {
  SliceRecord rec = tiny_record(7, 7, true);
  auto ones = std::count(rec.mask.begin(), rec.mask.end(), std::uint8_t{1});
  for (int turns = 0; turns < 4; ++turns)
    for (int fh = 0; fh < 2; ++fh)
      for (int fv = 0; fv < 2; ++fv) {
        AugmentPlan plan;
        plan.quarter_turns = turns;
        plan.flip_h = fh == 1;
        plan.flip_v = fv == 1;
        auto out = augment(rec, plan);
        EXPECT_EQ(std::count(out.mask.begin(), out.mask.end(),
                             std::uint8_t{1}),
                  ones);
      }
}

TEST(AugmentTest, IntegerShiftTranslatesExactly) {
  SliceRecord rec = tiny_record(8, 8, true);
  AugmentPlan plan;
  plan.shift_y = 2;
  plan.shift_x = -3;
  auto out = augment(rec, plan);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      std::int64_t sy = static_cast<std::int64_t>(y) - 2;
      std::int64_t sx = static_cast<std::int64_t>(x) + 3;
      bool inside = sy >= 0 && sy < 8 && sx >= 0 && sx < 8;
      float want = inside ? rec.image.values()
                                [(static_cast<std::size_t>(sy) * 8 +
                                  static_cast<std::size_t>(sx)) *
                                     3]
                          : 0.0f;
      EXPECT_FLOAT_EQ(out.image.values()[(y * 8 + x) * 3], want);
      std::uint8_t mwant =
          inside ? rec.mask[static_cast<std::size_t>(sy) * 8 +
                            static_cast<std::size_t>(sx)]
                 : 0;
      EXPECT_EQ(out.mask[y * 8 + x], mwant);
    }
}

TEST(AugmentTest, PhotometricTermsTouchOnlyTheImage) {
  SliceRecord rec = tiny_record(5, 5, true);
  AugmentPlan plan;
  plan.brightness = 0.2;
  plan.contrast = 1.3;
  auto out = augment(rec, plan);
  EXPECT_EQ(out.mask, rec.mask);
  bool changed = false;
  for (std::size_t i = 0; i < out.image.numel(); ++i) {
    float v = out.image.values()[i];
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
    if (v != rec.image.values()[i]) changed = true;
  }
  EXPECT_TRUE(changed);
}

TEST(AugmentTest, SampledPlansAreSeedDeterministic) {
  SliceRecord rec = tiny_record(16, 16, true);
  Rng a(42), b(42);
  auto pa = AugmentPlan::sample(a, 16);
  auto pb = AugmentPlan::sample(b, 16);
  auto ra = augment(rec, pa);
  auto rb = augment(rec, pb);
  EXPECT_EQ(ra.image.values(), rb.image.values());
  EXPECT_EQ(ra.mask, rb.mask);
}

// ---------------------------------------------------------------------------
// Expansion and subsampling
// ---------------------------------------------------------------------------

TEST(ExpandTest, FactorOneReturnsTheInputs) {
  std::vector<SliceRecord> recs{tiny_record(8, 8, false, 1),
                                tiny_record(8, 8, false, 2)};
  auto out = expand_positives(recs, 1, 99);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].image.values(), recs[0].image.values());
  EXPECT_EQ(out[1].image.values(), recs[1].image.values());
  EXPECT_THROW(expand_positives(recs, 0, 99), usage_error);
}

TEST(ExpandTest, FortyFoldExpansionTagsVariants) {
  std::vector<SliceRecord> recs{tiny_record(12, 12, false, 3),
                                tiny_record(12, 12, false, 4)};
  auto out = expand_positives(recs, 40, 7);
  ASSERT_EQ(out.size(), 80u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(out[i * 40].prov.aug, "");
    EXPECT_EQ(out[i * 40].image.values(), recs[i].image.values());
    std::size_t differing = 0;
    for (std::size_t k = 1; k < 40; ++k) {
      const auto& rec = out[i * 40 + k];
      EXPECT_EQ(rec.prov.aug, "aug" + std::to_string(k));
      EXPECT_EQ(rec.prov.volume_id, recs[i].prov.volume_id);
      EXPECT_EQ(rec.label, recs[i].label);
      if (rec.image.shape() != recs[i].image.shape() ||
          rec.image.values() != recs[i].image.values())
        ++differing;
    }
    EXPECT_GE(differing, 30u);
  }
}

TEST(ExpandTest, SameSeedReproducesEveryVariant) {
  std::vector<SliceRecord> recs{tiny_record(10, 10, true, 5)};
  auto a = expand_positives(recs, 8, 123);
  auto b = expand_positives(recs, 8, 123);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.values(), b[i].image.values());
    EXPECT_EQ(a[i].mask, b[i].mask);
  }
  auto c = expand_positives(recs, 8, 124);
  bool any_diff = false;
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a[i].image.shape() != c[i].image.shape() ||
        a[i].image.values() != c[i].image.values())
      any_diff = true;
  EXPECT_TRUE(any_diff);
}

TEST(SubsampleTest, KeepsARoundedShareInOriginalOrder) {
  std::vector<SliceRecord> recs;
  for (std::size_t i = 0; i < 10; ++i) {
    auto r = tiny_record(4, 4, false, 100 + i);
    r.prov.index = i;
    recs.push_back(std::move(r));
  }
  auto out = subsample_negatives(recs, 0.2, 17);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_LT(out[0].prov.index, out[1].prov.index);
  for (const auto& r : out) EXPECT_LT(r.prov.index, 10u);

  auto all = subsample_negatives(recs, 1.0, 17);
  EXPECT_EQ(all.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i].prov.index, i);
}

TEST(SubsampleTest, SeedDeterminesTheSubsetAndBadFractionsThrow) {
  std::vector<SliceRecord> recs;
  for (std::size_t i = 0; i < 30; ++i) {
    auto r = tiny_record(4, 4, false, 200 + i);
    r.prov.index = i;
    recs.push_back(std::move(r));
  }
  auto a = subsample_negatives(recs, 0.3, 5);
  auto b = subsample_negatives(recs, 0.3, 5);
  ASSERT_EQ(a.size(), 9u);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(a[i].prov.index, b[i].prov.index);
  EXPECT_THROW(subsample_negatives(recs, 0.0, 5), usage_error);
  EXPECT_THROW(subsample_negatives(recs, 1.5, 5), usage_error);
  EXPECT_THROW(subsample_negatives(recs, -0.2, 5), usage_error);
}

// ---------------------------------------------------------------------------
// Split assembly
// ---------------------------------------------------------------------------

SliceRecord labeled_record(const std::string& volume, int label,
                           std::size_t idx) {
  SliceRecord rec;
  rec.image = Tensor<float>::from({2, 2, 3}, std::vector<float>(12, 0.5f));
  rec.label = label;
  rec.prov = {volume, 'z', idx, ""};
  return rec;
}

TEST(ClassSplitTest, TrainOnlyCaseHitsTheSixToOneRatio) {
  std::vector<SliceRecord> pos, neg;
  for (std::size_t i = 0; i < 12; ++i)
    pos.push_back(labeled_record("pv", 1, i));
  for (std::size_t i = 0; i < 5; ++i)
    neg.push_back(labeled_record("nv" + std::to_string(i), 0, i));
  auto man = build_splits_classification(pos, neg, 3, {1.0, 0.0, 0.0});
  std::size_t train_pos = 0, train_neg = 0;
  for (auto i : man.train) (i < 12 ? train_pos : train_neg) += 1;
  EXPECT_EQ(train_pos, 12u);
  EXPECT_EQ(train_neg, 2u);  // 12 positives / 6
  EXPECT_TRUE(man.val.empty());
  EXPECT_TRUE(man.test.empty());
  EXPECT_EQ(man.kind, "classification");
}

TEST(ClassSplitTest, RatiosHoldAcrossAllThreeSplits) {
  std::vector<SliceRecord> pos, neg;
  for (std::size_t v = 0; v < 10; ++v) {
    std::string id = "pv" + std::to_string(v);
    for (std::size_t i = 0; i < 6; ++i) pos.push_back(labeled_record(id, 1, i));
    for (std::size_t i = 0; i < 8; ++i) neg.push_back(labeled_record(id, 0, i));
  }
  for (std::size_t v = 0; v < 20; ++v) {
    std::string id = "nv" + std::to_string(v);
    for (std::size_t i = 0; i < 10; ++i)
      neg.push_back(labeled_record(id, 0, i));
  }
  auto man = build_splits_classification(pos, neg, 11);
  std::array<const std::vector<std::size_t>*, 3> splits{&man.train, &man.val,
                                                        &man.test};
  std::array<double, 3> ratio{6.0, 1.2, 1.0};
  for (std::size_t s = 0; s < 3; ++s) {
    std::size_t p = 0, n = 0;
    for (auto i : *splits[s]) (i < pos.size() ? p : n) += 1;
    EXPECT_GT(p, 0u);
    EXPECT_EQ(n, static_cast<std::size_t>(std::llround(
                     static_cast<double>(p) / ratio[s])));
  }
  std::size_t total_pos =
      std::count_if(man.train.begin(), man.train.end(),
                    [&](std::size_t i) { return i < pos.size(); }) +
      std::count_if(man.val.begin(), man.val.end(),
                    [&](std::size_t i) { return i < pos.size(); }) +
      std::count_if(man.test.begin(), man.test.end(),
                    [&](std::size_t i) { return i < pos.size(); });
  EXPECT_EQ(total_pos, pos.size());  // every positive is used
}

TEST(ClassSplitTest, VolumesNeverStraddleSplits) {
  Rng rng(404);
  std::vector<SliceRecord> pos, neg;
  for (std::size_t v = 0; v < 12; ++v) {
    std::string id = "pv" + std::to_string(v);
    std::size_t np = 2 + rng.below(8);
    for (std::size_t i = 0; i < np; ++i) pos.push_back(labeled_record(id, 1, i));
    std::size_t nn = 4 + rng.below(8);
    for (std::size_t i = 0; i < nn; ++i) neg.push_back(labeled_record(id, 0, i));
  }
  for (std::size_t v = 0; v < 25; ++v) {
    std::string id = "nv" + std::to_string(v);
    std::size_t nn = 3 + rng.below(10);
    for (std::size_t i = 0; i < nn; ++i) neg.push_back(labeled_record(id, 0, i));
  }
  auto man = build_splits_classification(pos, neg, 2026);
  auto volume_of = [&](std::size_t i) {
    return i < pos.size() ? pos[i].prov.volume_id
                          : neg[i - pos.size()].prov.volume_id;
  };
  std::array<std::set<std::string>, 3> vols;
  const std::vector<std::size_t>* splits[3] = {&man.train, &man.val,
                                               &man.test};
  std::set<std::size_t> seen;
  for (std::size_t s = 0; s < 3; ++s)
    for (auto i : *splits[s]) {
      vols[s].insert(volume_of(i));
      EXPECT_TRUE(seen.insert(i).second) << "index used twice";
      EXPECT_LT(i, pos.size() + neg.size());
    }
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b)
      for (const auto& v : vols[a])
        EXPECT_EQ(vols[b].count(v), 0u)
            << "volume " << v << " leaks between splits";
}

TEST(ClassSplitTest, ImpossibleRatiosAreRejected) {
  std::vector<SliceRecord> pos, neg;
  for (std::size_t i = 0; i < 10; ++i)
    pos.push_back(labeled_record("only", 1, i));
  EXPECT_THROW(build_splits_classification(pos, neg, 1, {1.0, 0.0, 0.0}),
               data_error);
}

TEST(ClassSplitTest, SameSeedSameSplit) {
  std::vector<SliceRecord> pos, neg;
  for (std::size_t v = 0; v < 6; ++v) {
    std::string id = "pv" + std::to_string(v);
    for (std::size_t i = 0; i < 5; ++i) pos.push_back(labeled_record(id, 1, i));
  }
  for (std::size_t v = 0; v < 12; ++v) {
    std::string id = "nv" + std::to_string(v);
    for (std::size_t i = 0; i < 6; ++i) neg.push_back(labeled_record(id, 0, i));
  }
  auto a = build_splits_classification(pos, neg, 77);
  auto b = build_splits_classification(pos, neg, 77);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);
}

TEST(SegSplitTest, TenRecordsSplitEightOneOne) {
  std::vector<SliceRecord> recs;
  for (std::size_t i = 0; i < 10; ++i)
    recs.push_back(labeled_record("v" + std::to_string(i), 1, i));
  auto man = build_splits_segmentation(recs, 9);
  EXPECT_EQ(man.train.size(), 8u);
  EXPECT_EQ(man.val.size(), 1u);
  EXPECT_EQ(man.test.size(), 1u);
  EXPECT_EQ(man.kind, "segmentation");
}

TEST(SegSplitTest, FewerThanTenRecordsAreRejected) {
  std::vector<SliceRecord> recs;
  for (std::size_t i = 0; i < 9; ++i)
    recs.push_back(labeled_record("v" + std::to_string(i), 1, i));
  EXPECT_THROW(build_splits_segmentation(recs, 9), data_error);
}

TEST(SegSplitTest, GuardedModeKeepsVolumesTogetherAndPartitions) {
  Rng rng(31);
  std::vector<SliceRecord> recs;
  for (std::size_t v = 0; v < 15; ++v) {
    std::string id = "v" + std::to_string(v);
    std::size_t n = 1 + rng.below(7);
    for (std::size_t i = 0; i < n; ++i) recs.push_back(labeled_record(id, 1, i));
  }
  auto man = build_splits_segmentation(recs, 55);
  std::set<std::size_t> seen;
  std::array<std::set<std::string>, 3> vols;
  const std::vector<std::size_t>* splits[3] = {&man.train, &man.val,
                                               &man.test};
  for (std::size_t s = 0; s < 3; ++s)
    for (auto i : *splits[s]) {
      ASSERT_LT(i, recs.size());
      EXPECT_TRUE(seen.insert(i).second);
      vols[s].insert(recs[i].prov.volume_id);
    }
  EXPECT_EQ(seen.size(), recs.size());  // exact partition, nothing dropped
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b)
      for (const auto& v : vols[a]) EXPECT_EQ(vols[b].count(v), 0u);
  // train dominates even at volume granularity
  EXPECT_GT(man.train.size(), man.val.size() + man.test.size());
}

TEST(SegSplitTest, PaperSplitsHitLargestRemainderCounts) {
  std::vector<SliceRecord> recs;
  for (std::size_t i = 0; i < 23; ++i)
    recs.push_back(labeled_record("shared", 1, i));
  auto man = build_splits_segmentation(recs, 4, /*paper_splits=*/true);
  // 23 * (0.8, 0.1, 0.1) = (18.4, 2.3, 2.3); the leftover goes to train
  EXPECT_EQ(man.train.size(), 19u);
  EXPECT_EQ(man.val.size(), 2u);
  EXPECT_EQ(man.test.size(), 2u);
  std::set<std::size_t> seen(man.train.begin(), man.train.end());
  seen.insert(man.val.begin(), man.val.end());
  seen.insert(man.test.begin(), man.test.end());
  EXPECT_EQ(seen.size(), 23u);
}

TEST(SegSplitTest, SameSeedSameSplit) {
  std::vector<SliceRecord> recs;
  for (std::size_t i = 0; i < 40; ++i)
    recs.push_back(labeled_record("v" + std::to_string(i % 13), 1, i));
  auto a = build_splits_segmentation(recs, 8);
  auto b = build_splits_segmentation(recs, 8);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);
}

// ---------------------------------------------------------------------------
// Phantom generator
// ---------------------------------------------------------------------------

TEST(PhantomTest, SameSeedIsBitIdentical) {
  auto a = make_phantom(7, 4);
  auto b = make_phantom(7, 4);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].volume.voxels, b[i].volume.voxels);
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].nodule.has_value(), b[i].nodule.has_value());
    if (a[i].nodule)
      EXPECT_EQ(a[i].nodule->center_zyx, b[i].nodule->center_zyx);
  }
  EXPECT_EQ(a[0].volume.id, "phantom-0000");
  EXPECT_EQ(a[3].volume.id, "phantom-0003");
}

TEST(PhantomTest, ZeroProbabilityMakesOnlyCleanLungs) {
  auto vols = make_phantom(3, 6, 32, 0.0);
  for (const auto& pv : vols) {
    EXPECT_FALSE(pv.nodule.has_value());
    EXPECT_EQ(std::count(pv.mask.begin(), pv.mask.end(), std::uint8_t{1}), 0);
    double mean = 0;
    for (auto v : pv.volume.voxels) mean += v;
    mean /= static_cast<double>(pv.volume.voxels.size());
    EXPECT_NEAR(mean, -700.0, 5.0);  // 50 HU noise over 32^3 samples
  }
}

TEST(PhantomTest, SphereVoxelCountTracksAnalyticVolume) {
  auto vols = make_phantom(2026, 24, 64, 1.0);
  std::size_t checked = 0;
  for (const auto& pv : vols) {
    ASSERT_TRUE(pv.nodule.has_value());
    double r = *pv.nodule->diameter_mm / 2.0;
    ASSERT_GE(r, 3.0);
    ASSERT_LE(r, 8.0);
    double expect = 4.0 / 3.0 * 3.14159265358979323846 * r * r * r;
    auto count = static_cast<double>(
        std::count(pv.mask.begin(), pv.mask.end(), std::uint8_t{1}));
    EXPECT_LE(std::abs(count - expect) / expect, 0.15)
        << "radius " << r << " count " << count;
    ++checked;
  }
  EXPECT_EQ(checked, 24u);
}

TEST(PhantomTest, NodulesAreBrightInteriorSpheres) {
  auto vols = make_phantom(5, 10, 64, 1.0);
  for (const auto& pv : vols) {
    const auto& c = pv.nodule->center_zyx;
    validate_annotation(pv.volume, *pv.nodule);
    std::size_t at = (static_cast<std::size_t>(c[0]) * 64 +
                      static_cast<std::size_t>(c[1])) *
                         64 +
                     static_cast<std::size_t>(c[2]);
    EXPECT_EQ(pv.mask[at], 1);
    double masked_mean = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pv.mask.size(); ++i)
      if (pv.mask[i]) {
        masked_mean += pv.volume.voxels[i];
        ++n;
      }
    masked_mean /= static_cast<double>(n);
    EXPECT_NEAR(masked_mean, 50.0, 15.0);
    EXPECT_GT(masked_mean, -400.0);  // clearly separated from lung field
  }
  EXPECT_THROW(make_phantom(5, 1, 8), usage_error);
}

// ---------------------------------------------------------------------------
// Bicubic resize
// ---------------------------------------------------------------------------

TEST(ResizeTest, ConstantImageStaysConstant) {
  Tensor<float> img =
      Tensor<float>::from({5, 7, 3}, std::vector<float>(105, 0.42f));
  auto out = resize_bicubic(img, 11, 13);
  ASSERT_EQ(out.shape(), (Shape{11, 13, 3}));
  for (std::size_t i = 0; i < out.numel(); ++i)
    EXPECT_NEAR(out.values()[i], 0.42f, 1e-6f);
}

TEST(ResizeTest, ReproducesALinearRampAwayFromEdges) {
  std::vector<float> img(8 * 8 * 1);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      img[y * 8 + x] = static_cast<float>(x) / 7.0f;
  auto out = resize_bicubic(Tensor<float>::from({8, 8, 1}, img), 16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 3; x <= 12; ++x) {
      double src = (static_cast<double>(x) + 0.5) * 0.5 - 0.5;
      EXPECT_NEAR(out.values()[y * 16 + x], src / 7.0, 1e-6)
          << "at row " << y << " col " << x;
    }
}

TEST(ResizeTest, CommutesWithHorizontalFlip) {
  SliceRecord rec = tiny_record(6, 8, false, 77);
  std::vector<float> flipped(rec.image.values());
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        flipped[(y * 8 + x) * 3 + ch] =
            rec.image.values()[(y * 8 + (7 - x)) * 3 + ch];
  auto a = resize_bicubic(Tensor<float>::from({6, 8, 3}, flipped), 12, 16);
  auto b = resize_bicubic(rec.image, 12, 16);
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        ASSERT_NEAR(a.values()[(y * 16 + x) * 3 + ch],
                    b.values()[(y * 16 + (15 - x)) * 3 + ch], 1e-6)
            << y << "," << x;
}

TEST(ResizeTest, OvershootIsClampedToUnitRange) {
  std::vector<float> img(10 * 10 * 1);
  for (std::size_t y = 0; y < 10; ++y)
    for (std::size_t x = 0; x < 10; ++x)
      img[y * 10 + x] = ((x / 2 + y / 2) % 2 == 0) ? 0.0f : 1.0f;
  auto out = resize_bicubic(Tensor<float>::from({10, 10, 1}, img), 37, 41);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    EXPECT_GE(out.values()[i], 0.0f);
    EXPECT_LE(out.values()[i], 1.0f);
  }
}

TEST(ResizeTest, RejectsBadArguments) {
  Tensor<float> img =
      Tensor<float>::from({4, 4, 3}, std::vector<float>(48, 0.0f));
  EXPECT_THROW(resize_bicubic(img, 0, 4), usage_error);
  Tensor<float> flat = Tensor<float>::from({16}, std::vector<float>(16, 0.f));
  EXPECT_THROW(resize_bicubic(flat, 4, 4), usage_error);
}

// ---------------------------------------------------------------------------
// Slice store and manifest
// ---------------------------------------------------------------------------

TEST(StoreTest, SliceSurvivesTheRoundtrip) {
  auto dir = fs::temp_directory_path() / "swinct_store";
  fs::remove_all(dir);
  fs::create_directories(dir);
  SliceRecord rec = tiny_record(5, 4, true);
  rec.prov = {"case-3", 'y', 17, "aug5"};
  DatasetEntry e = store_slice(dir.string(), rec);
  EXPECT_EQ(e.image_file.size(), 16u + 4u);  // fnv1a hex + ".swt"
  EXPECT_TRUE(fs::exists(dir / e.image_file));
  EXPECT_TRUE(fs::exists(dir / e.mask_file));
  SliceRecord back = load_slice(dir.string(), e);
  EXPECT_EQ(back.image.values(), rec.image.values());
  EXPECT_EQ(back.mask, rec.mask);
  EXPECT_EQ(back.label, rec.label);
  EXPECT_EQ(back.prov.volume_id, "case-3");
  EXPECT_EQ(back.prov.axis, 'y');
  EXPECT_EQ(back.prov.index, 17u);
  EXPECT_EQ(back.prov.aug, "aug5");
  fs::remove_all(dir);
}

TEST(StoreTest, NamesAreContentAddressed) {
  auto d1 = fs::temp_directory_path() / "swinct_store_a";
  auto d2 = fs::temp_directory_path() / "swinct_store_b";
  fs::create_directories(d1);
  fs::create_directories(d2);
  SliceRecord rec = tiny_record(6, 6, false);
  DatasetEntry e1 = store_slice(d1.string(), rec);
  DatasetEntry e2 = store_slice(d2.string(), rec);
  EXPECT_EQ(e1.image_file, e2.image_file);
  SliceRecord other = tiny_record(6, 6, false, 999);
  DatasetEntry e3 = store_slice(d1.string(), other);
  EXPECT_NE(e1.image_file, e3.image_file);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(StoreTest, ManifestJsonRoundtrip) {
  DatasetManifest man;
  man.kind = "classification";
  man.seed = 42;
  man.ratios = {6.0, 1.2, 1.0};
  man.img_size = 64;
  DatasetEntry e;
  e.image_file = "abc.swt";
  e.mask_file = "abc.mask.swt";
  e.label = 1;
  e.prov = {"case-1", 'x', 9, "aug2"};
  man.train.push_back(e);
  e.mask_file.clear();
  e.prov.aug.clear();
  e.label = 0;
  man.val.push_back(e);

  auto dir = fs::temp_directory_path() / "swinct_manifest";
  fs::create_directories(dir);
  auto path = (dir / "manifest.json").string();
  write_manifest(path, man);
  DatasetManifest back = read_manifest(path);
  EXPECT_EQ(back.kind, "classification");
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.img_size, 64u);
  EXPECT_DOUBLE_EQ(back.ratios[1], 1.2);
  ASSERT_EQ(back.train.size(), 1u);
  ASSERT_EQ(back.val.size(), 1u);
  EXPECT_TRUE(back.test.empty());
  EXPECT_EQ(back.train[0].mask_file, "abc.mask.swt");
  EXPECT_EQ(back.train[0].prov.aug, "aug2");
  EXPECT_EQ(back.train[0].prov.axis, 'x');
  EXPECT_EQ(back.val[0].mask_file, "");
  EXPECT_EQ(back.val[0].label, 0);
  fs::remove_all(dir);
}

TEST(StoreTest, GarbageManifestsAreRejected) {
  auto dir = fs::temp_directory_path() / "swinct_manifest_bad";
  fs::create_directories(dir);
  auto path = (dir / "manifest.json").string();
  atomic_write_file(path, "not json at all");
  EXPECT_THROW(read_manifest(path), data_error);
  atomic_write_file(path, "{\"kind\": \"classification\"}");
  EXPECT_THROW(read_manifest(path), data_error);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace swinct
