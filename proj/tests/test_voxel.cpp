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
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "occ4d/voxel.hpp"
#include "support.hpp"

namespace occ4d {
namespace {

GridSpec small_grid() { return GridSpec({-4.0, -3.0, -1.0}, {4.0, 5.0, 2.0}, {0.5, 0.5, 0.25}); }

PointCloud random_cloud(std::mt19937_64& rng, std::size_t n, const Vec3& lo, const Vec3& hi) {
  std::uniform_real_distribution<double> ux(lo[0], hi[0]), uy(lo[1], hi[1]), uz(lo[2], hi[2]);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({ux(rng), uy(rng), uz(rng)});
  return c;
}

TEST(GridSpec, CountsAndValidation) {
  const GridSpec g = small_grid();
  EXPECT_EQ(g.nx(), 16u);
  EXPECT_EQ(g.ny(), 16u);
  EXPECT_EQ(g.nz(), 12u);
  EXPECT_EQ(g.shape(), (Shape{12, 16, 16}));
  EXPECT_THROW(GridSpec({0, 0, 0}, {1, 1, 1}, {0.3, 1, 1}), ContractViolation);
  EXPECT_THROW(GridSpec({0, 0, 0}, {0, 1, 1}, {1, 1, 1}), ContractViolation);
  EXPECT_THROW(GridSpec({0, 0, 0}, {1, 1, 1}, {1, -1, 1}), ContractViolation);
  // Decimal extents that are whole multiples of the voxel in exact arithmetic.
  EXPECT_EQ(GridSpec({-4.5, 0, 0}, {4.5, 1, 1}, {0.2, 1, 1}).nx(), 45u);
}

TEST(VoxelIndex, FineGridExample) {
  const GridSpec g = GridSpec::from_counts({-70.0, -70.0, -4.5}, 1867, 1867, 45, {0.075, 0.075, 0.2});
  const auto idx = voxel_index(g, {0.1, 0.1, 0.1});
  ASSERT_TRUE(idx.has_value());
  EXPECT_EQ(*idx, (CellIndex{934, 934, 23}));
}

TEST(VoxelIndex, HalfOpenBounds) {
  const GridSpec g = small_grid();
  EXPECT_EQ(voxel_index(g, g.min_corner()), (CellIndex{0, 0, 0}));
  EXPECT_FALSE(voxel_index(g, g.max_corner()).has_value());
  EXPECT_FALSE(voxel_index(g, {0.0, 0.0, 2.0}).has_value());
  EXPECT_FALSE(voxel_index(g, {-4.0 - 1e-6, 0.0, 0.0}).has_value());
  EXPECT_EQ(voxel_index(g, {3.999, 4.999, 1.999}), (CellIndex{15, 15, 11}));
}

TEST(VoxelIndex, CellCentersMapBackToTheirCells) {
  const GridSpec g = small_grid();
  for (std::int64_t z = 0; z < 12; ++z)
    for (std::int64_t y = 0; y < 16; ++y)
      for (std::int64_t x = 0; x < 16; ++x) {
        const CellIndex c{x, y, z};
        EXPECT_EQ(voxel_index(g, g.cell_center(c)), c);
      }
}

TEST(Voxelize, EmptyAndSinglePoint) {
  const GridSpec g = small_grid();
  const auto empty = voxelize({}, g);
  EXPECT_EQ(empty.outside, 0u);
  for (double v : empty.grid.values.data()) EXPECT_EQ(v, 0.0);

  const auto one = voxelize({{{0.3, 0.3, 0.3}, {100, 0, 0}}, 0.0}, g);
  EXPECT_EQ(one.outside, 1u);
  EXPECT_EQ(std::count(one.grid.values.data().begin(), one.grid.values.data().end(), 1.0), 1);
  EXPECT_EQ(one.grid.at(CellIndex{8, 6, 5}), 1.0);
}

TEST(Voxelize, MatchesBruteForceFloor) {
  std::mt19937_64 rng(1);
  const GridSpec g = small_grid();
  const PointCloud c = random_cloud(rng, 10000, {-5, -4, -2}, {5, 6, 3});
  const auto got = voxelize(c, g);

  std::set<std::size_t> expect;
  std::size_t outside = 0;
  for (const Vec3& p : c.points) {
    if (auto cell = testing::floor_cell(g.min_corner(), g.voxel_size(), {16, 16, 12}, p))
      expect.insert(static_cast<std::size_t>(((*cell)[2] * 16 + (*cell)[1]) * 16 + (*cell)[0]));
    else
      ++outside;
  }
  std::set<std::size_t> occupied;
  for (std::size_t i = 0; i < got.grid.values.numel(); ++i)
    if (got.grid.values.data()[i] == 1.0) occupied.insert(i);
  EXPECT_EQ(occupied, expect);
  EXPECT_EQ(got.outside, outside);
}

TEST(Voxelize, InvariantUnderPointOrder) {
  std::mt19937_64 rng(2);
  const GridSpec g = small_grid();
  PointCloud c = random_cloud(rng, 2000, {-5, -4, -2}, {5, 6, 3});
  const auto a = voxelize(c, g);
  std::shuffle(c.points.begin(), c.points.end(), rng);
  const auto b = voxelize(c, g);
  EXPECT_TRUE(std::equal(a.grid.values.data().begin(), a.grid.values.data().end(), b.grid.values.data().begin()));
}

TEST(Bev, SingleVoxelLandsAtChannelRowColumn) {
  const GridSpec g = small_grid();
  const CellIndex c{3, 7, 9};
  const Tensor bev = bev_encode(voxelize({{g.cell_center(c)}, 0.0}, g).grid);
  ASSERT_EQ(bev.shape(), (Shape{12, 16, 16}));
  for (std::size_t ch = 0; ch < 12; ++ch)
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t col = 0; col < 16; ++col)
        EXPECT_EQ(bev.data()[(ch * 16 + r) * 16 + col], (ch == 9 && r == 7 && col == 3) ? 1.0 : 0.0);
}

TEST(Bev, ZeroCopyAndZeroGrid) {
  const GridSpec g = small_grid();
  const OccupancyGrid grid = voxelize({}, g).grid;
  const Tensor bev = bev_encode(grid);
  EXPECT_EQ(bev.id(), grid.values.id());
  for (double v : bev.data()) EXPECT_EQ(v, 0.0);
  OccupancyGrid logits{g, Tensor(g.shape()), GridKind::kLogit};
  EXPECT_THROW(bev_encode(logits), ContractViolation);
}

TEST(Bev, ChannelSumEqualsColumnCount) {
  std::mt19937_64 rng(3);
  const GridSpec g = small_grid();
  const PointCloud c = random_cloud(rng, 3000, {-4, -3, -1}, {4, 5, 2});
  const Tensor bev = bev_encode(voxelize(c, g).grid);
  std::map<std::pair<long, long>, std::set<long>> columns;
  for (const Vec3& p : c.points) {
    const auto cell = testing::floor_cell(g.min_corner(), g.voxel_size(), {16, 16, 12}, p);
    ASSERT_TRUE(cell);
    columns[{(*cell)[1], (*cell)[0]}].insert((*cell)[2]);
  }
  double total = 0.0;
  for (long r = 0; r < 16; ++r)
    for (long col = 0; col < 16; ++col) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < 12; ++ch) s += bev.data()[(ch * 16 + r) * 16 + col];
      const auto it = columns.find({r, col});
      EXPECT_EQ(s, it == columns.end() ? 0.0 : static_cast<double>(it->second.size()));
      total += s;
    }
  std::size_t occupied = 0;
  for (const auto& [key, zs] : columns) occupied += zs.size();
  EXPECT_EQ(total, static_cast<double>(occupied));
}

TEST(Downsample, IdentityMaxAndErrors) {
  std::mt19937_64 rng(4);
  const Tensor x = testing::random_tensor({3, 4, 6}, rng, -1, 1, false);
  const Tensor same = downsample_bev(x, 1);
  EXPECT_TRUE(std::equal(same.data().begin(), same.data().end(), x.data().begin()));
  EXPECT_EQ(downsample_bev(Tensor(Shape{1, 2, 2}, std::vector<double>{0, 0, 0, 1}), 2).item(), 1.0);
  EXPECT_THROW(downsample_bev(x, 4), ContractViolation);
}

TEST(Downsample, MatchesBruteForceBlockMax) {
  std::mt19937_64 rng(5);
  for (std::size_t f : {2u, 3u}) {
    const std::size_t c = 2, hh = 4 * f, w = 3 * f;
    const Tensor x = testing::random_tensor({c, hh, w}, rng, -1, 1, false);
    const Tensor y = downsample_bev(x, f);
    ASSERT_EQ(y.shape(), (Shape{c, hh / f, w / f}));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < hh / f; ++r)
        for (std::size_t col = 0; col < w / f; ++col) {
          double m = -1e300;
          for (std::size_t dy = 0; dy < f; ++dy)
            for (std::size_t dx = 0; dx < f; ++dx)
              m = std::max(m, x.data()[(ch * hh + r * f + dy) * w + col * f + dx]);
          EXPECT_EQ(y.data()[(ch * (hh / f) + r) * (w / f) + col], m);
        }
  }
}

TEST(GridDump, RoundTripAndCorruption) {
  std::mt19937_64 rng(6);
  const GridSpec g = small_grid();
  OccupancyGrid grid = voxelize(random_cloud(rng, 500, {-4, -3, -1}, {4, 5, 2}), g).grid;
  grid.values.mutable_data()[5] = 0.25;
  const auto dir = testing::scratch_dir("grid_dump");
  write_grid(dir / "g.o4dg", grid);
  const std::string bytes = testing::read_bytes(dir / "g.o4dg");
  EXPECT_EQ(bytes.size(), 4u + 4u + 72u + 4u * g.cell_count());
  EXPECT_EQ(bytes.substr(0, 4), "O4DG");
  const OccupancyGrid back = read_grid(dir / "g.o4dg");
  EXPECT_EQ(back.spec, g);
  EXPECT_TRUE(std::equal(back.values.data().begin(), back.values.data().end(), grid.values.data().begin()));

  testing::write_bytes(dir / "bad.o4dg", "X" + bytes.substr(1));
  EXPECT_THROW(read_grid(dir / "bad.o4dg"), ParseError);
  testing::write_bytes(dir / "short.o4dg", bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(read_grid(dir / "short.o4dg"), ParseError);
}

}  // namespace
}  // namespace occ4d
