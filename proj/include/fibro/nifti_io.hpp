// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fibro/volume.hpp"

namespace fibro {

enum class NiftiDatatype : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

/// The subset of the NIfTI-1 header this library reads and writes.
struct NiftiHeader {
  std::int32_t sizeof_hdr = 348;
  std::array<std::int16_t, 8> dim{3, 1, 1, 1, 1, 1, 1, 1};
  NiftiDatatype datatype = NiftiDatatype::float32;
  std::array<float, 8> pixdim{1.0f, 1.0f, 1.0f, 1.0f, 0.0f, 0.0f, 0.0f, 0.0f};
  float vox_offset = 352.0f;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::int16_t sform_code = 1;
  std::array<float, 4> srow_x{1.0f, 0.0f, 0.0f, 0.0f};
  std::array<float, 4> srow_y{0.0f, 1.0f, 0.0f, 0.0f};
  std::array<float, 4> srow_z{0.0f, 0.0f, 1.0f, 0.0f};
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  bool big_endian = false;

  bool operator==(const NiftiHeader&) const = default;
};

/// Decodes a single-file NIfTI-1 image. Input may be gzip-compressed.
std::pair<NiftiHeader, Volume> parse_nifti(std::span<const std::uint8_t> bytes);

/// Little-endian float32 output with vox_offset 352; only extents, spacing and
/// sform are taken from the header/volume pair.
std::vector<std::uint8_t> write_nifti(const NiftiHeader& header, const Volume& vol);

/// Canonical header for `vol` (float32, sform from the affine).
NiftiHeader header_for(const Volume& vol);

Volume read_nifti_file(const std::string& path);
void write_nifti_file(const std::string& path, const Volume& vol);

/// Permutes/flips voxel axes so the affine's linear part has a positive
/// dominant diagonal (x->R, y->A, z->S). World positions of voxel centers are
/// preserved.
Volume reorient_to_ras(const Volume& vol);

}  // namespace fibro
