// SPDX-License-Identifier: Apache-2.0
#include "fibro/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "fibro/error.hpp"
#include "fibro/nifti_io.hpp"

namespace fibro {

void PreprocessConfig::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (!(target_spacing[i] > 0.0)) throw Error(ErrorCode::InvalidConfig, "target_spacing must be positive");
    if (target_extents[i] < 1) throw Error(ErrorCode::InvalidConfig, "target_extents must be >= 1");
  }
  if (drop_leading_slices >= target_extents[2])
    throw Error(ErrorCode::InvalidConfig, "drop_leading_slices must be < target z extent");
  if (!(p_low >= 0.0 && p_low < p_high && p_high <= 100.0))
    throw Error(ErrorCode::InvalidConfig, "percentiles must satisfy 0 <= p_low < p_high <= 100");
}

PreprocessConfig PreprocessConfig::desk() {
  PreprocessConfig c;
  c.target_extents = {16, 16, 16};
  c.drop_leading_slices = 0;
  return c;
}

Extents resampled_extents(const Extents& in, const Vec3& spacing, const Vec3& target, std::array<bool, 3>* degenerate) {
  Extents out{};
  for (int i = 0; i < 3; ++i) {
    const double n = std::round(static_cast<double>(in[i]) * spacing[i] / target[i]);
    if (degenerate) (*degenerate)[i] = n < 1.0;
    out[i] = n < 1.0 ? 1 : static_cast<std::size_t>(n);
  }
  return out;
}

Volume resample_trilinear(const Volume& vol, const Vec3& target_spacing) {
  for (double t : target_spacing)
    if (!(t > 0.0)) throw Error(ErrorCode::InvalidConfig, "target spacing must be positive");
  std::array<bool, 3> degenerate{};
  Volume out;
  out.extents = resampled_extents(vol.extents, vol.spacing, target_spacing, &degenerate);
  if (degenerate[0] || degenerate[1] || degenerate[2])
    std::clog << "warning=EmptyOutput detail=resampled extent rounded to 0, clamped to 1\n";
  out.spacing = target_spacing;

  Vec3 ratio{};
  for (int i = 0; i < 3; ++i) ratio[i] = target_spacing[i] / vol.spacing[i];
  out.affine = vol.affine;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.affine[r][c] = vol.affine[r][c] * ratio[c];

  // Per-axis lower index and weight of the upper neighbor.
  auto axis_samples = [&](int axis) {
    const std::size_t n = vol.extents[axis];
    std::vector<std::pair<std::size_t, double>> s(out.extents[axis]);
    for (std::size_t i = 0; i < s.size(); ++i) {
      double p = static_cast<double>(i) * ratio[axis];
      p = std::clamp(p, 0.0, static_cast<double>(n - 1));
      auto lo = static_cast<std::size_t>(std::floor(p));
      if (lo >= n - 1) lo = n > 1 ? n - 2 : 0;
      const double frac = n > 1 ? p - static_cast<double>(lo) : 0.0;
      s[i] = {lo, frac};
    }
    return s;
  };
  const auto sx = axis_samples(0), sy = axis_samples(1), sz = axis_samples(2);
  const std::size_t nx = vol.extents[0], ny = vol.extents[1], nz = vol.extents[2];
  const std::size_t dx = nx > 1 ? 1 : 0, dy = ny > 1 ? nx : 0, dz = nz > 1 ? nx * ny : 0;

  out.data.resize(out.voxel_count());
  std::size_t o = 0;
  for (const auto& [z0, fz] : sz)
    for (const auto& [y0, fy] : sy)
      for (const auto& [x0, fx] : sx) {
        const std::size_t b = vol.index(x0, y0, z0);
        const double* d = vol.data.data();
        const double c00 = d[b] * (1 - fx) + d[b + dx] * fx;
        const double c10 = d[b + dy] * (1 - fx) + d[b + dy + dx] * fx;
        const double c01 = d[b + dz] * (1 - fx) + d[b + dz + dx] * fx;
        const double c11 = d[b + dz + dy] * (1 - fx) + d[b + dz + dy + dx] * fx;
        const double c0 = c00 * (1 - fy) + c10 * fy;
        const double c1 = c01 * (1 - fy) + c11 * fy;
        out.data[o++] = c0 * (1 - fz) + c1 * fz;
      }
  return out;
}

double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw Error(ErrorCode::InvalidConfig, "percentile of an empty set");
  std::vector<double> v(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  double b = a;
  if (hi != lo) b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

Volume normalize_percentile(const Volume& vol, double p_low, double p_high) {
  if (vol.data.empty()) throw Error(ErrorCode::InvalidConfig, "cannot normalize an empty volume");
  const double a = percentile(vol.data, p_low);
  const double b = percentile(vol.data, p_high);
  Volume out = vol;
  if (b - a < 1e-12) {
    std::fill(out.data.begin(), out.data.end(), 0.0);
    return out;
  }
  const double inv = 1.0 / (b - a);
  for (double& v : out.data) v = std::clamp((v - a) * inv, 0.0, 1.0);
  return out;
}

namespace {

// Copies the window starting at `start` (may be negative) with extents `ext`;
// voxels outside the source read as zero.
Volume window(const Volume& vol, const std::array<long, 3>& start, const Extents& ext) {
  Volume out;
  out.extents = ext;
  out.spacing = vol.spacing;
  out.affine = vol.affine;
  const Vec3 shift = apply_affine(vol.affine, {static_cast<double>(start[0]), static_cast<double>(start[1]),
                                               static_cast<double>(start[2])});
  for (int r = 0; r < 3; ++r) out.affine[r][3] = shift[r];
  out.data.assign(out.voxel_count(), 0.0);
  const auto inside = [&](long v, int axis) { return v >= 0 && v < static_cast<long>(vol.extents[axis]); };
  for (std::size_t z = 0; z < ext[2]; ++z) {
    const long iz = static_cast<long>(z) + start[2];
    if (!inside(iz, 2)) continue;
    for (std::size_t y = 0; y < ext[1]; ++y) {
      const long iy = static_cast<long>(y) + start[1];
      if (!inside(iy, 1)) continue;
      for (std::size_t x = 0; x < ext[0]; ++x) {
        const long ix = static_cast<long>(x) + start[0];
        if (!inside(ix, 0)) continue;
        out.at(x, y, z) = vol.at(static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), static_cast<std::size_t>(iz));
      }
    }
  }
  return out;
}

}  // namespace

Volume pad_crop_center(const Volume& vol, const Extents& target) {
  std::array<long, 3> start{};
  for (int i = 0; i < 3; ++i) {
    const long n = static_cast<long>(vol.extents[i]);
    const long t = static_cast<long>(target[i]);
    start[i] = n >= t ? (n - t) / 2 : -((t - n) / 2);
  }
  return window(vol, start, target);
}

Volume drop_leading_slices(const Volume& vol, std::size_t k) {
  if (k >= vol.extents[2])
    throw Error(ErrorCode::KTooLarge, "cannot drop " + std::to_string(k) + " of " + std::to_string(vol.extents[2]) +
                                          " slices");
  return window(vol, {0, 0, static_cast<long>(k)}, {vol.extents[0], vol.extents[1], vol.extents[2] - k});
}

Volume preprocess_volume(const Volume& raw, const PreprocessConfig& cfg) {
  cfg.validate();
  Volume v = reorient_to_ras(raw);
  v = resample_trilinear(v, cfg.target_spacing);
  v = normalize_percentile(v, cfg.p_low, cfg.p_high);
  v = pad_crop_center(v, cfg.target_extents);
  return drop_leading_slices(v, cfg.drop_leading_slices);
}

CaseBundle build_bundle(const std::string& case_id, const std::array<std::optional<Volume>, kNumModalities>& raw,
                        std::optional<int> stage, const PreprocessConfig& cfg) {
  cfg.validate();
  if (!raw[0] && !raw[1] && !raw[2])
    throw Error(ErrorCode::AllModalitiesMissing, "case " + case_id + " has no modality");
  CaseBundle b;
  b.case_id = case_id;
  b.stage = stage;
  b.extents = cfg.output_extents();
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (!raw[m]) {
      b.volumes[m].assign(b.voxel_count(), 0.0f);
      continue;
    }
    const Volume v = preprocess_volume(*raw[m], cfg);
    b.volumes[m].assign(v.data.begin(), v.data.end());
    b.mask[m] = 1;
  }
  b.validate();
  return b;
}

}  // namespace fibro
