// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace fibro {

using Extents = std::array<std::size_t, 3>;
using Vec3 = std::array<double, 3>;

/// Voxel index -> world (mm). Row r is [a_r0, a_r1, a_r2, t_r].
using Affine = std::array<std::array<double, 4>, 3>;

inline Affine diagonal_affine(const Vec3& spacing, const Vec3& origin = {0.0, 0.0, 0.0}) {
  Affine a{};
  for (int r = 0; r < 3; ++r) {
    a[r][r] = spacing[r];
    a[r][3] = origin[r];
  }
  return a;
}

inline Vec3 apply_affine(const Affine& a, const Vec3& ijk) {
  Vec3 w{};
  for (int r = 0; r < 3; ++r) w[r] = a[r][0] * ijk[0] + a[r][1] * ijk[1] + a[r][2] * ijk[2] + a[r][3];
  return w;
}

/// Euclidean norms of the three columns of the linear part.
Vec3 affine_column_norms(const Affine& a);
double affine_determinant(const Affine& a);

/// 3D scalar grid, x-fastest storage.
struct Volume {
  Extents extents{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Affine affine = diagonal_affine({1.0, 1.0, 1.0});
  std::vector<double> data;

  std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + extents[0] * (y + extents[1] * z);
  }
  double& at(std::size_t x, std::size_t y, std::size_t z) { return data[index(x, y, z)]; }
  double at(std::size_t x, std::size_t y, std::size_t z) const { return data[index(x, y, z)]; }

  bool operator==(const Volume&) const = default;
};

/// A zero-filled volume with a diagonal affine.
Volume make_volume(const Extents& extents, const Vec3& spacing = {1.0, 1.0, 1.0});

}  // namespace fibro
