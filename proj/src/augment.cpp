// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numbers>

#include "fibro/error.hpp"
#include "fibro/preprocess.hpp"
#include "fibro/random.hpp"

namespace fibro {

namespace {

struct Grid {
  std::size_t nx, ny, nz;
  std::vector<float>& v;

  float get(long x, long y, long z) const {
    if (x < 0 || y < 0 || z < 0 || x >= static_cast<long>(nx) || y >= static_cast<long>(ny) || z >= static_cast<long>(nz))
      return 0.0f;
    return v[static_cast<std::size_t>(x) + nx * (static_cast<std::size_t>(y) + ny * static_cast<std::size_t>(z))];
  }

  // Trilinear sample; outside the grid reads zero.
  double sample(double x, double y, double z) const {
    const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
    const double ax = x - fx, ay = y - fy, az = z - fz;
    const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy), z0 = static_cast<long>(fz);
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay) * (dz ? az : 1 - az);
          if (w != 0.0) acc += w * get(x0 + dx, y0 + dy, z0 + dz);
        }
    return acc;
  }
};

void flip_x(std::vector<float>& v, const Extents& e) {
  for (std::size_t z = 0; z < e[2]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y) {
      auto row = v.begin() + static_cast<std::ptrdiff_t>(e[0] * (y + e[1] * z));
      std::reverse(row, row + static_cast<std::ptrdiff_t>(e[0]));
    }
}

// Inverse-maps every output voxel through an in-plane rotation and an
// isotropic zoom about the grid center.
void rotate_zoom(std::vector<float>& v, const Extents& e, double angle_rad, double zoom) {
  std::vector<float> src = v;
  const Grid g{e[0], e[1], e[2], src};
  const double cx = (static_cast<double>(e[0]) - 1) / 2, cy = (static_cast<double>(e[1]) - 1) / 2,
               cz = (static_cast<double>(e[2]) - 1) / 2;
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  std::size_t o = 0;
  for (std::size_t z = 0; z < e[2]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y)
      for (std::size_t x = 0; x < e[0]; ++x, ++o) {
        const double px = (static_cast<double>(x) - cx) / zoom, py = (static_cast<double>(y) - cy) / zoom,
                     pz = (static_cast<double>(z) - cz) / zoom;
        v[o] = static_cast<float>(g.sample(c * px + s * py + cx, -s * px + c * py + cy, pz + cz));
      }
}

void gaussian_smooth(std::vector<float>& v, const Extents& e, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& w : k) w /= sum;
  const std::array<std::size_t, 3> stride{1, e[0], e[0] * e[1]};
  std::vector<float> tmp(v.size());
  for (int axis = 0; axis < 3; ++axis) {
    const long n = static_cast<long>(e[axis]);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const long pos = static_cast<long>((i / stride[axis]) % e[axis]);
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        const long q = std::clamp(pos + t, 0L, n - 1);
        acc += k[static_cast<std::size_t>(t + radius)] * v[i + static_cast<std::size_t>(q - pos) * stride[axis]];
      }
      tmp[i] = static_cast<float>(acc);
    }
    v.swap(tmp);
  }
}

}  // namespace

CaseBundle augment(const CaseBundle& bundle, std::uint64_t seed, double strength) {
  if (!(strength >= 0.0 && strength <= 1.0)) throw Error(ErrorCode::InvalidConfig, "strength must be in [0,1]");
  CaseBundle out = bundle;
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double p = strength / 2.0;
  auto fires = [&] { return unit(rng) < p; };
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const bool do_flip = fires();
  const bool do_rotate = fires();
  const double angle = uniform(-10.0, 10.0) * std::numbers::pi / 180.0;
  const bool do_zoom = fires();
  const double zoom = uniform(1.0 - 0.1 * strength, 1.0 + 0.1 * strength);

  for (std::size_t m = 0; m < kNumModalities; ++m) {
    // Intensity draws happen for every slot so streams do not depend on the mask.
    const bool do_scale = fires();
    const double scale = uniform(1.0 - 0.1 * strength, 1.0 + 0.1 * strength);
    const bool do_noise = fires();
    const std::uint64_t noise_seed = rng();
    const bool do_gamma = fires();
    const double gamma = uniform(1.0 - 0.2 * strength, 1.0 + 0.2 * strength);
    const bool do_smooth = fires();
    const double sigma = uniform(0.0, strength);
    const bool do_shift = fires();
    const double shift = uniform(-0.05 * strength, 0.05 * strength);

    if (!bundle.mask[m]) continue;
    auto& v = out.volumes[m];
    bool touched = false;
    if (do_flip) {
      flip_x(v, out.extents);
      touched = true;
    }
    if (do_rotate || do_zoom) {
      rotate_zoom(v, out.extents, do_rotate ? angle : 0.0, do_zoom ? zoom : 1.0);
      touched = true;
    }
    if (do_scale) {
      for (float& x : v) x = static_cast<float>(x * scale);
      touched = true;
    }
    if (do_noise && strength > 0.0) {
      Rng nrng(noise_seed);
      std::normal_distribution<double> noise(0.0, 0.02 * strength);
      for (float& x : v) x = static_cast<float>(x + noise(nrng));
      touched = true;
    }
    if (do_gamma) {
      for (float& x : v) x = static_cast<float>(std::pow(std::max(static_cast<double>(x), 0.0), gamma));
      touched = true;
    }
    if (do_smooth && sigma > 1e-3) {
      gaussian_smooth(v, out.extents, sigma);
      touched = true;
    }
    if (do_shift) {
      for (float& x : v) x = static_cast<float>(x + shift);
      touched = true;
    }
    if (touched)
      for (float& x : v) x = std::clamp(x, 0.0f, 1.0f);
  }
  return out;
}

}  // namespace fibro
