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

/// Attention, block, and full-backbone behavior. The shifted-window branch
/// is checked against a brute-force oracle that runs plain attention
/// independently on every contiguous region.

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <vector>

#include "swinct/grad_check.hpp"
#include "swinct/swin.hpp"

namespace swinct {
namespace {

// hand-rolled affine map, independent of ops.hpp
std::vector<double> affine_row(const std::vector<double>& x,
                               const Tensor<double>& w,
                               const Tensor<double>& b) {
  std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<double> y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b.defined() ? b.data()[o] : 0.0;
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * w.data()[i * out + o];
    y[o] = acc;
  }
  return y;
}

std::vector<double> ln_row(const std::vector<double>& x, const double* gamma,
                           const double* beta) {
  double mu = 0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  double inv = 1.0 / std::sqrt(var + 1e-5);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = (x[i] - mu) * inv * gamma[i] + beta[i];
  return y;
}

Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0,
                           double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

void fill_zero(Tensor<double>& t) {
  std::fill(t.values().begin(), t.values().end(), 0.0);
}

// --- window attention ---

TEST(WindowAttention, ConstantValueRowsPassThroughSoftmax) {
  ParamStore<double> ps;
  Rng rng(41);
  WindowAttentionLayer<double> attn(ps, "attn", 6, 2, 2, rng);
  // zero the V columns of the fused qkv weight, then set the V bias to c:
  // every token's value vector becomes c while Q and K stay arbitrary
  std::size_t dim = 6;
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t o = 2 * dim; o < 3 * dim; ++o)
      attn.qkv.weight.values()[i * 3 * dim + o] = 0.0;
  std::vector<double> c{0.3, -1.2, 0.7, 2.0, -0.5, 0.1};
  for (std::size_t o = 0; o < dim; ++o)
    attn.qkv.bias.values()[2 * dim + o] = c[o];
  // nonzero bias table to exercise the bias path too
  for (auto& v : attn.relpos_table.values()) v = rng.uniform(-1, 1);

  auto x = rand_tensor({3, 4, 6}, rng);
  auto out = attn.forward(x, Tensor<double>());
  auto want = affine_row(c, attn.proj.weight, attn.proj.bias);
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t d = 0; d < dim; ++d)
      EXPECT_NEAR(out.data()[t * dim + d], want[d], 1e-12);
}

TEST(WindowAttention, SingleTokenWindowIsProjectionOfV) {
  ParamStore<double> ps;
  Rng rng(42);
  WindowAttentionLayer<double> attn(ps, "attn", 4, 2, 1, rng);
  for (auto& v : attn.relpos_table.values()) v = rng.uniform(-9, 9);
  auto x = rand_tensor({3, 1, 4}, rng);
  auto out = attn.forward(x, Tensor<double>());
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> row(x.data() + t * 4, x.data() + (t + 1) * 4);
    auto qkv = affine_row(row, attn.qkv.weight, attn.qkv.bias);
    std::vector<double> v(qkv.begin() + 8, qkv.begin() + 12);
    auto want = affine_row(v, attn.proj.weight, attn.proj.bias);
    for (std::size_t d = 0; d < 4; ++d)
      EXPECT_NEAR(out.data()[t * 4 + d], want[d], 1e-12);
  }
}

TEST(WindowAttention, OutputsAreConvexCombinationsOfV) {
  ParamStore<double> ps;
  Rng rng(43);
  std::size_t dim = 6, m2 = 4;
  WindowAttentionLayer<double> attn(ps, "attn", dim, 2, 2, rng);
  for (auto& v : attn.relpos_table.values()) v = rng.uniform(-2, 2);
  // identity projection exposes the raw head-concatenated context
  fill_zero(attn.proj.weight);
  for (std::size_t i = 0; i < dim; ++i)
    attn.proj.weight.values()[i * dim + i] = 1.0;
  fill_zero(attn.proj.bias);

  auto x = rand_tensor({2, m2, dim}, rng, -2.0, 2.0);
  auto out = attn.forward(x, Tensor<double>());
  for (std::size_t w = 0; w < 2; ++w) {
    // per-token V vectors of this window
    std::vector<std::vector<double>> vs;
    for (std::size_t t = 0; t < m2; ++t) {
      std::vector<double> row(x.data() + (w * m2 + t) * dim,
                              x.data() + (w * m2 + t + 1) * dim);
      auto qkv = affine_row(row, attn.qkv.weight, attn.qkv.bias);
      vs.emplace_back(qkv.begin() + 2 * dim, qkv.begin() + 3 * dim);
    }
    for (std::size_t t = 0; t < m2; ++t)
      for (std::size_t d = 0; d < dim; ++d) {
        double lo = vs[0][d], hi = vs[0][d];
        for (const auto& v : vs) {
          lo = std::min(lo, v[d]);
          hi = std::max(hi, v[d]);
        }
        double got = out.data()[(w * m2 + t) * dim + d];
        EXPECT_GE(got, lo - 1e-12);
        EXPECT_LE(got, hi + 1e-12);
      }
  }
}

// --- swin block ---

TEST(SwinBlock, ZeroedBranchesAreIdentity) {
  ParamStore<double> ps;
  Rng rng(44);
  SwinBlockLayer<double> block(ps, "b", 8, 8, 8, 2, 4, true, 2, 0.0, rng);
  fill_zero(block.attn.proj.weight);
  fill_zero(block.attn.proj.bias);
  fill_zero(block.fc2.weight);
  fill_zero(block.fc2.bias);
  auto x = rand_tensor({2, 64, 8}, rng);
  auto y = block.forward(x, false, nullptr);
  EXPECT_EQ(y.values(), x.values());
}

/// Brute-force oracle for the shifted attention branch: tokens are grouped
/// into contiguous regions via the wrap test, plain attention (with the
/// relative position bias) runs independently inside each region, and the
/// result must match the mask-based computation.
void check_shifted_block_against_region_oracle(std::size_t h, std::size_t w,
                                               std::size_t M, std::size_t dim,
                                               std::size_t heads,
                                               std::uint64_t seed) {
  ParamStore<double> ps;
  Rng rng(seed);
  SwinBlockLayer<double> block(ps, "b", h, w, dim, heads, M, true, 2, 0.0,
                               rng);
  ASSERT_GT(block.shift, 0u);
  std::size_t s = block.shift;
  std::size_t hp = block.pad_h, wp = block.pad_w;
  for (auto& v : block.attn.relpos_table.values()) v = rng.uniform(-0.5, 0.5);
  fill_zero(block.fc2.weight);  // forward becomes x + attention branch
  fill_zero(block.fc2.bias);

  auto x = rand_tensor({1, h * w, dim}, rng);
  auto out = block.forward(x, false, nullptr);

  // --- oracle ---
  std::size_t hd = dim / heads;
  // normalized tokens on the padded grid (pads are zero vectors)
  std::vector<std::vector<double>> xn(hp * wp, std::vector<double>(dim, 0.0));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      std::vector<double> row(x.data() + (r * w + c) * dim,
                              x.data() + (r * w + c + 1) * dim);
      xn[r * wp + c] = ln_row(row, block.norm1.gamma.data(),
                              block.norm1.beta.data());
    }
  // post-shift grid: rolled(r,c) = xn((r+s) mod hp, (c+s) mod wp)
  auto rolled_src = [&](std::size_t r, std::size_t c) {
    return ((r + s) % hp) * wp + (c + s) % wp;
  };
  auto is_pad = [&](std::size_t r, std::size_t c) {
    return (r + s) % hp >= h || (c + s) % wp >= w;
  };
  // qkv per rolled position
  std::vector<std::vector<double>> qkv(hp * wp);
  for (std::size_t r = 0; r < hp; ++r)
    for (std::size_t c = 0; c < wp; ++c)
      qkv[r * wp + c] = affine_row(xn[rolled_src(r, c)], block.attn.qkv.weight,
                                   block.attn.qkv.bias);

  std::vector<std::vector<double>> ctx(hp * wp,
                                       std::vector<double>(dim, 0.0));
  std::size_t span = 2 * M - 1;
  for (std::size_t wy = 0; wy < hp / M; ++wy)
    for (std::size_t wx = 0; wx < wp / M; ++wx) {
      // group real tokens of this window into wrap regions
      std::map<std::pair<bool, bool>, std::vector<std::size_t>> regions;
      for (std::size_t i = 0; i < M * M; ++i) {
        std::size_t r = wy * M + i / M, c = wx * M + i % M;
        if (is_pad(r, c)) continue;
        regions[{r + s >= hp, c + s >= wp}].push_back(i);  // wrap flags
      }
      for (auto& [key, members] : regions) {
        for (std::size_t i : members) {
          std::size_t ri = wy * M + i / M, ci = wx * M + i % M;
          const auto& qi = qkv[ri * wp + ci];
          for (std::size_t head = 0; head < heads; ++head) {
            // softmax over the region
            std::vector<double> scores;
            scores.reserve(members.size());
            for (std::size_t j : members) {
              std::size_t rj = wy * M + j / M, cj = wx * M + j % M;
              const auto& kj = qkv[rj * wp + cj];
              double dot = 0;
              for (std::size_t d = 0; d < hd; ++d)
                dot += qi[head * hd + d] * kj[dim + head * hd + d];
              dot /= std::sqrt(static_cast<double>(hd));
              std::ptrdiff_t dr = static_cast<std::ptrdiff_t>(i / M) -
                                  static_cast<std::ptrdiff_t>(j / M);
              std::ptrdiff_t dc = static_cast<std::ptrdiff_t>(i % M) -
                                  static_cast<std::ptrdiff_t>(j % M);
              std::size_t bias_row =
                  static_cast<std::size_t>(dr + static_cast<std::ptrdiff_t>(M) - 1) * span +
                  static_cast<std::size_t>(dc + static_cast<std::ptrdiff_t>(M) - 1);
              dot += block.attn.relpos_table.data()[bias_row * heads + head];
              scores.push_back(dot);
            }
            double mx = scores[0];
            for (double v : scores) mx = std::max(mx, v);
            double denom = 0;
            for (double& v : scores) {
              v = std::exp(v - mx);
              denom += v;
            }
            for (std::size_t m = 0; m < members.size(); ++m) {
              std::size_t j = members[m];
              std::size_t rj = wy * M + j / M, cj = wx * M + j % M;
              const auto& vj = qkv[rj * wp + cj];
              double p = scores[m] / denom;
              for (std::size_t d = 0; d < hd; ++d)
                ctx[ri * wp + ci][head * hd + d] +=
                    p * vj[2 * dim + head * hd + d];
            }
          }
        }
      }
    }

  // project, roll back, add residual; compare at real positions
  for (std::size_t r0 = 0; r0 < h; ++r0)
    for (std::size_t c0 = 0; c0 < w; ++c0) {
      std::size_t rr = (r0 + hp - s) % hp;  // post-shift position
      std::size_t rc = (c0 + wp - s) % wp;
      auto proj = affine_row(ctx[rr * wp + rc], block.attn.proj.weight,
                             block.attn.proj.bias);
      for (std::size_t d = 0; d < dim; ++d) {
        double want = x.data()[(r0 * w + c0) * dim + d] + proj[d];
        double got = out.data()[(r0 * w + c0) * dim + d];
        ASSERT_NEAR(got, want, 1e-5)
            << "token (" << r0 << "," << c0 << ") dim " << d;
      }
    }
}

TEST(SwinBlock, ShiftedAttentionMatchesRegionOracle) {
  check_shifted_block_against_region_oracle(8, 8, 4, 8, 2, 45);
}

TEST(SwinBlock, ShiftedAttentionMatchesRegionOracleRectangular) {
  check_shifted_block_against_region_oracle(8, 12, 4, 6, 3, 46);
}

TEST(SwinBlock, PaddedShiftedAttentionMatchesRegionOracle) {
  check_shifted_block_against_region_oracle(6, 6, 4, 4, 1, 47);
}

TEST(SwinBlock, PaddedRectangularOracle) {
  check_shifted_block_against_region_oracle(5, 7, 4, 4, 2, 48);
}

TEST(SwinBlock, GradientCheck) {
  ParamStore<double> ps;
  Rng rng(49);
  SwinBlockLayer<double> block(ps, "b", 8, 8, 16, 4, 4, true, 2, 0.0, rng);
  for (auto& v : block.attn.relpos_table.values()) v = rng.uniform(-0.3, 0.3);
  auto x = rand_tensor({1, 64, 16}, rng);
  x.set_requires_grad(true);
  auto target = rand_tensor({1, 64, 16}, rng);
  std::vector<Tensor<double>> params{x};
  for (auto& [name, t] : ps.items()) params.push_back(t);
  auto f = [&] { return sum(mul(block.forward(x, false, nullptr), target)); };
  Rng pick(50);
  EXPECT_LT(max_rel_grad_error_sampled<double>(f, params, 8, pick), 1e-4);
}

TEST(SwinBlock, UnshiftedBlockIsWindowTranslationEquivariant) {
  ParamStore<double> ps;
  Rng rng(51);
  std::size_t h = 8, w = 8, dim = 4, M = 4;
  SwinBlockLayer<double> block(ps, "b", h, w, dim, 2, M, false, 2, 0.0, rng);
  ASSERT_EQ(block.shift, 0u);
  auto x = rand_tensor({1, h * w, dim}, rng);

  NoGradGuard guard;
  auto roll_tokens = [&](const Tensor<double>& t) {
    auto g = reshape(t, {1, h, w, dim});
    return reshape(roll_hw(g, static_cast<std::ptrdiff_t>(M),
                           static_cast<std::ptrdiff_t>(M)),
                   {1, h * w, dim});
  };
  auto y1 = roll_tokens(block.forward(x, false, nullptr));
  auto y2 = block.forward(roll_tokens(x), false, nullptr);
  ASSERT_EQ(y1.numel(), y2.numel());
  for (std::size_t i = 0; i < y1.numel(); ++i)
    EXPECT_NEAR(y1.data()[i], y2.data()[i], 1e-12);
}

TEST(SwinBlock, DropPathScalesOrDropsWholeSamples) {
  ParamStore<double> ps;
  Rng rng(52);
  SwinBlockLayer<double> block(ps, "b", 4, 4, 4, 2, 4, false, 2, 0.5, rng);
  auto x = rand_tensor({8, 16, 4}, rng);

  // eval: identity regardless of rate
  auto ye = block.forward(x, false, nullptr);
  auto ye2 = block.forward(x, false, nullptr);
  EXPECT_EQ(ye.values(), ye2.values());

  // training: per-sample branches are either dropped or rescaled by 2
  Rng dp(53);
  auto yt = block.forward(x, true, &dp);
  std::size_t chunk = 16 * 4;
  std::size_t dropped_or_scaled = 0;
  for (std::size_t b = 0; b < 8; ++b) {
    bool differs = false;
    for (std::size_t j = 0; j < chunk; ++j)
      if (yt.data()[b * chunk + j] != ye.data()[b * chunk + j]) differs = true;
    bool same_as_input = true;
    for (std::size_t j = 0; j < chunk; ++j)
      if (yt.data()[b * chunk + j] != x.data()[b * chunk + j])
        same_as_input = false;
    if (differs || same_as_input) ++dropped_or_scaled;
  }
  EXPECT_GT(dropped_or_scaled, 0u);
  EXPECT_THROW(block.forward(x, true, nullptr), usage_error);
}

// --- full backbone ---

SwinConfig toy_config() {
  SwinConfig cfg;
  cfg.img_size = 32;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.depths = {2, 2, 2, 2};
  cfg.num_heads = {2, 2, 2, 2};
  cfg.window_size = 4;
  cfg.variant = "toy";
  return cfg;
}

TEST(SwinModel, StandardShapeFlow) {
  NoGradGuard guard;
  SwinModel<double> model(SwinConfig::swin_t(), 7);
  Rng rng(54);
  auto img = rand_tensor({1, 224, 224, 3}, rng);
  auto feats = model.forward_backbone(img);
  ASSERT_EQ(feats.size(), 4u);
  std::size_t res[] = {56, 28, 14, 7};
  std::size_t dim[] = {96, 192, 384, 768};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(feats[i].height, res[i]);
    EXPECT_EQ(feats[i].width, res[i]);
    EXPECT_EQ(feats[i].dim, dim[i]);
    EXPECT_EQ(feats[i].data.shape(), (Shape{1, res[i] * res[i], dim[i]}));
  }
  // final stage runs a single unshifted 7x7 window
  EXPECT_EQ(model.stages()[3].blocks[1].window, 7u);
  EXPECT_EQ(model.stages()[3].blocks[1].shift, 0u);
  EXPECT_FALSE(model.stages()[3].blocks[1].mask.defined());
  // earlier stages do shift their odd blocks
  EXPECT_EQ(model.stages()[0].blocks[1].shift, 3u);
  EXPECT_TRUE(model.stages()[0].blocks[1].mask.defined());

  auto bad = rand_tensor({1, 112, 112, 3}, rng);
  EXPECT_THROW(model.forward_backbone(bad), usage_error);
}

TEST(SwinModel, ZeroedBranchesReduceToEmbedAndMerges) {
  SwinModel<double> model(toy_config(), 11);
  for (auto& [name, t] : model.params().items()) {
    if (name.find(".attn.proj.") != std::string::npos ||
        name.find(".mlp.fc2.") != std::string::npos) {
      auto copy = t;
      fill_zero(copy);
    }
  }
  Rng rng(55);
  auto img = rand_tensor({2, 32, 32, 3}, rng);
  auto feats = model.forward_backbone(img);

  // expected: patch embed then the three merges, no blocks
  auto grid = model.embed().forward(img);
  for (std::size_t st = 0; st < 4; ++st) {
    EXPECT_EQ(feats[st].data.values(), grid.data.values()) << "stage " << st;
    if (st < 3) grid = model.stages()[st].downsample->forward(grid);
  }
}

TEST(SwinModel, FullModelGradientCheck) {
  SwinModel<double> model(toy_config(), 13);
  // nonzero bias tables so their gradients are exercised
  Rng rng(56);
  for (auto& [name, t] : model.params().items())
    if (name.find("relpos.table") != std::string::npos) {
      Tensor<double> handle = t;  // shares storage
      for (auto& v : handle.values()) v = rng.uniform(-0.2, 0.2);
    }

  auto img = rand_tensor({1, 32, 32, 3}, rng);
  img.set_requires_grad(true);
  auto target = rand_tensor({1, 1, 64}, rng);
  std::vector<Tensor<double>> params{img};
  for (auto& [name, t] : model.params().items()) params.push_back(t);
  auto f = [&] {
    auto feats = model.forward_backbone(img);
    return sum(mul(feats[3].data, target));
  };
  Rng pick(57);
  EXPECT_LT(max_rel_grad_error_sampled<double>(f, params, 2, pick), 1e-4);
}

TEST(SwinModel, ParameterNamesAreStable) {
  SwinModel<double> model(toy_config(), 3);
  auto& ps = model.params();
  EXPECT_NE(ps.find("patch_embed.proj.weight"), nullptr);
  EXPECT_NE(ps.find("patch_embed.proj.bias"), nullptr);
  EXPECT_NE(ps.find("patch_embed.norm.gamma"), nullptr);
  EXPECT_NE(ps.find("stages.0.blocks.1.attn.qkv.weight"), nullptr);
  EXPECT_NE(ps.find("stages.0.blocks.1.attn.relpos.table"), nullptr);
  EXPECT_NE(ps.find("stages.2.blocks.0.mlp.fc1.bias"), nullptr);
  EXPECT_NE(ps.find("stages.0.downsample.reduction.weight"), nullptr);
  EXPECT_NE(ps.find("stages.0.downsample.norm.beta"), nullptr);
  // the merge reduction carries no bias, and the last stage no downsample
  EXPECT_EQ(ps.find("stages.0.downsample.reduction.bias"), nullptr);
  EXPECT_EQ(ps.find("stages.3.downsample.norm.gamma"), nullptr);

  // shapes of the documented examples
  EXPECT_EQ(ps.find("stages.0.blocks.1.attn.qkv.weight")->shape(),
            (Shape{8, 24}));
  EXPECT_EQ(ps.find("stages.0.downsample.reduction.weight")->shape(),
            (Shape{32, 16}));
  EXPECT_EQ(ps.find("stages.0.blocks.0.attn.relpos.table")->shape(),
            (Shape{49, 2}));
}

TEST(SwinModel, InitializationContract) {
  SwinModel<double> model(toy_config(), 21);
  for (auto& [name, t] : model.params().items()) {
    if (name.find("norm") != std::string::npos &&
        name.find("gamma") != std::string::npos) {
      for (double v : t.values()) EXPECT_EQ(v, 1.0);
    } else if (name.find("beta") != std::string::npos ||
               name.find(".bias") != std::string::npos ||
               name.find("relpos.table") != std::string::npos) {
      for (double v : t.values()) EXPECT_EQ(v, 0.0);
    } else {  // weights: truncated normal, |w| <= 2 sigma
      for (double v : t.values()) EXPECT_LE(std::abs(v), 0.04);
      double acc = 0;
      for (double v : t.values()) acc += v * v;
      if (t.numel() > 500) {
        // truncation at 2 sigma shrinks the std to about 0.88 sigma
        double rms = std::sqrt(acc / static_cast<double>(t.numel()));
        EXPECT_NEAR(rms, 0.0176, 0.002) << name;
      }
    }
  }

  // determinism: same seed bitwise-equal, different seed differs
  SwinModel<double> again(toy_config(), 21);
  SwinModel<double> other(toy_config(), 22);
  bool any_diff = false;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    EXPECT_EQ(model.params().items()[i].second.values(),
              again.params().items()[i].second.values());
    if (model.params().items()[i].second.values() !=
        other.params().items()[i].second.values())
      any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(SwinModel, TokenGridConsistencyGuard) {
  TokenGrid<double> g;
  g.height = 2;
  g.width = 2;
  g.dim = 3;
  g.data = Tensor<double>::zeros({1, 5, 3});
  EXPECT_THROW(g.check_consistent(), usage_error);
  g.data = Tensor<double>::zeros({1, 4, 3});
  EXPECT_NO_THROW(g.check_consistent());
}

TEST(SwinModel, DuplicateParamNameRejected) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>::zeros({2}));
  EXPECT_THROW(ps.add("w", Tensor<double>::zeros({2})), usage_error);
  EXPECT_EQ(ps.count_elements(), 2u);
}

}  // namespace
}  // namespace swinct
