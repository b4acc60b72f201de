// Copyright 2026 The occ4d Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "occ4d/forecast.hpp"
#include "occ4d/train.hpp"
#include "support.hpp"

namespace occ4d {
namespace {

using testing::tiny_pipeline;

void zero(ConvLayer& l) {
  std::fill(l.weights.mutable_data().begin(), l.weights.mutable_data().end(), 0.0);
  std::fill(l.bias.mutable_data().begin(), l.bias.mutable_data().end(), 0.0);
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::vector<Tensor> random_bev(const PipelineConfig& cfg, std::mt19937_64& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < cfg.input_frames(); ++i)
    out.push_back(testing::random_tensor({cfg.encode_grid.nz(), cfg.bev_height(), cfg.bev_width()}, rng, 0, 1, false));
  return out;
}

TEST(Config, Validation) {
  PipelineConfig cfg = tiny_pipeline();
  EXPECT_NO_THROW(validate_pipeline(cfg));
  cfg.num_future = 0;
  EXPECT_THROW(validate_pipeline(cfg), ContractViolation);
  cfg = tiny_pipeline();
  cfg.output_grid = GridSpec::from_counts({-8, -8, -2}, 8, 8, 4, {2, 2, 1});
  EXPECT_THROW(validate_pipeline(cfg), ContractViolation);
  cfg = tiny_pipeline();
  cfg.bev_downsample = 3;
  EXPECT_THROW(validate_pipeline(cfg), ContractViolation);
}

TEST(TemporalFuse, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(1);
  const PipelineConfig cfg = tiny_pipeline();
  ForecasterParams p = init_params(cfg, 1);
  zero(p.fuse_out);
  std::fill(p.fuse_out.bias.mutable_data().begin(), p.fuse_out.bias.mutable_data().end(), 0.7);
  const Tensor fused = temporal_fuse(random_bev(cfg, rng), p);
  for (double v : fused.data()) EXPECT_EQ(v, 0.7);
}

TEST(TemporalFuse, SingleFrameIsPlainConvBlock) {
  std::mt19937_64 rng(2);
  const PipelineConfig cfg = tiny_pipeline(0);
  const ForecasterParams p = init_params(cfg, 2);
  const auto bev = random_bev(cfg, rng);
  ASSERT_EQ(bev.size(), 1u);
  const Tensor expect = p.fuse_out(leaky_relu(p.fuse_in(bev[0]), cfg.leaky_slope));
  EXPECT_TRUE(same_values(temporal_fuse(bev, p, cfg.leaky_slope), expect));
}

TEST(TemporalFuse, OrderMatters) {
  std::mt19937_64 rng(3);
  const PipelineConfig cfg = tiny_pipeline();
  const ForecasterParams p = init_params(cfg, 3);
  auto bev = random_bev(cfg, rng);
  const Tensor a = temporal_fuse(bev, p);
  std::reverse(bev.begin(), bev.end());
  const Tensor b = temporal_fuse(bev, p);
  EXPECT_FALSE(same_values(a, b));
  bev.pop_back();
  bev.push_back(Tensor(Shape{4, 4, 4}));
  EXPECT_THROW(temporal_fuse(bev, p), ContractViolation);
}

TEST(Rollout, ZeroRecurrenceGivesHeadBias) {
  std::mt19937_64 rng(4);
  const PipelineConfig cfg = tiny_pipeline();
  ForecasterParams p = init_params(cfg, 4);
  zero(p.step);
  zero(p.head);
  const Tensor fused = temporal_fuse(random_bev(cfg, rng), p);
  for (double b : {0.0, -1.25}) {
    std::fill(p.head.bias.mutable_data().begin(), p.head.bias.mutable_data().end(), b);
    const auto f = rollout(fused, p, 3, cfg.output_grid);
    ASSERT_EQ(f.size(), 3u);
    for (const auto& g : f.frames) {
      EXPECT_EQ(g.kind, GridKind::kLogit);
      for (double v : g.values.data()) EXPECT_EQ(v, b);
      if (b == 0.0) {
        const Tensor prob = sigmoid(g.values);
        for (double v : prob.data()) EXPECT_EQ(v, 0.5);
      }
    }
  }
}

TEST(Rollout, OneStepIsOneBlockAndHead) {
  std::mt19937_64 rng(5);
  const PipelineConfig cfg = tiny_pipeline();
  const ForecasterParams p = init_params(cfg, 5);
  const Tensor fused = temporal_fuse(random_bev(cfg, rng), p);
  const Tensor h1 = leaky_relu(p.step(concat_channels({fused, fused})), cfg.leaky_slope);
  const Tensor expect = upsample_nearest2x(p.head(h1));
  const auto f = rollout(fused, p, 1, cfg.output_grid, cfg.frame_period, cfg.leaky_slope);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_TRUE(same_values(f.frames[0].values, expect));
}

TEST(Rollout, FrameCountAndSharedWeights) {
  std::mt19937_64 rng(6);
  std::size_t count = 0;
  for (std::size_t t = 1; t <= 8; ++t) {
    const PipelineConfig cfg = tiny_pipeline(2, t);
    const ForecasterParams p = init_params(cfg, 6);
    if (t == 1) count = p.parameter_count();
    EXPECT_EQ(p.parameter_count(), count);
    const auto f = rollout(temporal_fuse(random_bev(cfg, rng), p), p, t, cfg.output_grid);
    EXPECT_EQ(f.size(), t);
    for (const auto& g : f.frames) EXPECT_EQ(g.values.shape(), cfg.output_grid.shape());
  }
  EXPECT_THROW(rollout(Tensor(Shape{4, 8, 8}), init_params(tiny_pipeline(), 6), 0, tiny_pipeline().output_grid),
               ContractViolation);
}

// A loss on frame t reaches the step weights through t block applications:
// the gradient is exact for every t and differs between t.
TEST(Rollout, PerFrameGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  const PipelineConfig cfg = tiny_pipeline(1, 3, 2);
  const ForecasterParams p = init_params(cfg, 7);
  const auto bev = random_bev(cfg, rng);
  std::vector<std::vector<double>> grads;
  for (std::size_t t = 0; t < 3; ++t) {
    const auto w = testing::random_weights(cfg.output_grid.cell_count(), rng);
    auto loss = [&] { return testing::weighted_sum(rollout(temporal_fuse(bev, p), p, 3, cfg.output_grid).frames[t].values, w); };
    const auto r = testing::check_gradients({p.step.weights, p.step.bias, p.fuse_in.weights}, loss);
    EXPECT_LT(r.max_rel_error, 1e-5) << "frame " << t;
    EXPECT_GT(r.max_abs_grad, 0.0);
  }
}

TEST(Unet, IdentityAtInitialization) {
  std::mt19937_64 rng(8);
  const PipelineConfig cfg = tiny_pipeline();
  const ForecasterParams p = init_params(cfg, 8);
  for (double v : p.unet_out.weights.data()) EXPECT_EQ(v, 0.0);
  OccupancyForecast in{{{cfg.output_grid, testing::random_tensor(cfg.output_grid.shape(), rng, -3, 3, false),
                         GridKind::kLogit}},
                       0.6};
  const auto out = unet_refine(in, p);
  EXPECT_TRUE(same_values(out.frames[0].values, in.frames[0].values));
}

TEST(Unet, ZeroInputZeroBiasesGivesZero) {
  std::mt19937_64 rng(9);
  const PipelineConfig cfg = tiny_pipeline();
  ForecasterParams p = init_params(cfg, 9);
  testing::wake_unet(p, rng);
  std::fill(p.unet_out.bias.mutable_data().begin(), p.unet_out.bias.mutable_data().end(), 0.0);
  const OccupancyForecast in{{{cfg.output_grid, Tensor(cfg.output_grid.shape()), GridKind::kLogit}}, 0.6};
  const auto out = unet_refine(in, p);
  for (double v : out.frames[0].values.data()) EXPECT_EQ(v, 0.0);
}

TEST(Unet, OneTrainingStepMakesRefinementLive) {
  std::mt19937_64 rng(10);
  const PipelineConfig cfg = tiny_pipeline();
  ForecasterParams p = init_params(cfg, 10);
  const OccupancyForecast in{{{cfg.output_grid, testing::random_tensor(cfg.output_grid.shape(), rng, -1, 1, false),
                               GridKind::kLogit}},
                             0.6};
  const auto target = testing::random_weights(cfg.output_grid.cell_count(), rng);
  std::vector<Tensor> params;
  for (const auto& n : p.named())
    if (n.name.rfind("unet", 0) == 0) params.push_back(n.tensor);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(depth_l1_loss(reshape(unet_refine(in, p).frames[0].values, {target.size()}), target));
  }
  OptimizerState opt;
  adam_step(params, opt, 1e-2);
  EXPECT_FALSE(same_values(unet_refine(in, p).frames[0].values, in.frames[0].values));
}

TEST(ForecastFromClouds, DeterministicAndChecksFrameCount) {
  std::mt19937_64 rng(11);
  const PipelineConfig cfg = tiny_pipeline();
  const ForecasterParams p = init_params(cfg, 11);
  const auto clouds = testing::random_clouds(cfg, 200, rng);
  const auto a = forecast_from_clouds(clouds, cfg, p);
  const auto b = forecast_from_clouds(clouds, cfg, p);
  ASSERT_EQ(a.size(), cfg.num_future);
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_TRUE(same_values(a.frames[t].values, b.frames[t].values));
  const std::vector<PointCloud> short_input(clouds.begin(), clouds.end() - 1);
  EXPECT_THROW(forecast_from_clouds(short_input, cfg, p), ContractViolation);
}

TEST(ForecastFromClouds, EmptyCloudsGiveUninformativePrior) {
  const PipelineConfig cfg = tiny_pipeline();
  const ForecasterParams p = init_params(cfg, 12);
  const std::vector<PointCloud> clouds(cfg.input_frames());
  const auto f = forecast_from_clouds(clouds, cfg, p);
  for (const auto& g : f.frames) {
    const Tensor prob = sigmoid(g.values);
    for (double v : prob.data()) EXPECT_EQ(v, 0.5);
  }
}

TEST(ForecastFromClouds, ParameterGradientsMatchFiniteDifferences) {
  const auto r = testing::pipeline_gradient_check(13);
  EXPECT_LT(r.max_rel_error, 1e-3);
  EXPECT_GT(r.checked, 1000u);
}

TEST(Params, CheckpointRoundTrip) {
  const PipelineConfig cfg = tiny_pipeline();
  const ForecasterParams p = init_params(cfg, 14);
  const auto dir = testing::scratch_dir("forecast_params");
  save_model(dir / "m.json", cfg, p);
  const ForecasterParams back = load_model(dir / "m.json", cfg);
  const auto a = p.named(), b = back.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_values(a[i].tensor, b[i].tensor)) << a[i].name;
  PipelineConfig other = cfg;
  other.channels = 5;
  EXPECT_THROW(load_model(dir / "m.json", other), ParseError);
}

}  // namespace
}  // namespace occ4d
