// SPDX-License-Identifier: Apache-2.0
#include "fibro/nifti_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fibro/detail/bytes.hpp"
#include "fibro/error.hpp"

namespace fibro {

namespace {

constexpr std::int32_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

bool is_gzip(std::span<const std::uint8_t> b) { return b.size() >= 2 && b[0] == 0x1f && b[1] == 0x8b; }

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw Error(ErrorCode::Io, "inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk{};
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw Error(ErrorCode::TruncatedData, "corrupt gzip stream");
    }
    out.insert(out.end(), chunk.begin(), chunk.begin() + (chunk.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw Error(ErrorCode::TruncatedData, "gzip stream ended early");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::size_t element_size(NiftiDatatype dt) {
  switch (dt) {
    case NiftiDatatype::uint8: return 1;
    case NiftiDatatype::int16: return 2;
    case NiftiDatatype::float32: return 4;
  }
  return 0;
}

bool spacing_matches(const Vec3& spacing, const Vec3& norms) {
  for (int i = 0; i < 3; ++i)
    if (std::abs(spacing[i] - norms[i]) > 1e-4 * std::max(std::abs(norms[i]), 1e-12)) return false;
  return true;
}

}  // namespace

Vec3 affine_column_norms(const Affine& a) {
  Vec3 n{};
  for (int c = 0; c < 3; ++c) n[c] = std::sqrt(a[0][c] * a[0][c] + a[1][c] * a[1][c] + a[2][c] * a[2][c]);
  return n;
}

double affine_determinant(const Affine& a) {
  return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
         a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
}

Volume make_volume(const Extents& extents, const Vec3& spacing) {
  Volume v;
  v.extents = extents;
  v.spacing = spacing;
  v.affine = diagonal_affine(spacing);
  v.data.assign(v.voxel_count(), 0.0);
  return v;
}

std::pair<NiftiHeader, Volume> parse_nifti(std::span<const std::uint8_t> input) {
  std::vector<std::uint8_t> inflated;
  std::span<const std::uint8_t> bytes = input;
  if (is_gzip(input)) {
    inflated = gunzip(input);
    bytes = inflated;
  }
  if (bytes.size() < kDataOffset)
    throw Error(ErrorCode::TruncatedData, "file has " + std::to_string(bytes.size()) + " bytes, header needs 352");

  detail::ByteReader r(bytes, ErrorCode::TruncatedData);
  NiftiHeader h;
  std::int32_t sizeof_hdr = r.i32();
  if (sizeof_hdr != kHeaderSize) {
    r.set_big_endian(true);
    r.seek(0);
    sizeof_hdr = r.i32();
    if (sizeof_hdr != kHeaderSize) throw Error(ErrorCode::BadMagic, "sizeof_hdr is not 348 in either byte order");
    h.big_endian = true;
  }
  h.sizeof_hdr = sizeof_hdr;

  r.seek(344);
  for (auto& c : h.magic) c = static_cast<char>(r.u8());
  if (h.magic != std::array<char, 4>{'n', '+', '1', '\0'}) throw Error(ErrorCode::BadMagic, "magic is not n+1");

  r.seek(40);
  for (auto& d : h.dim) d = r.i16();
  r.seek(70);
  const std::int16_t datatype = r.i16();
  if (datatype != 2 && datatype != 4 && datatype != 16)
    throw Error(ErrorCode::UnsupportedDatatype, "datatype code " + std::to_string(datatype));
  h.datatype = static_cast<NiftiDatatype>(datatype);
  r.seek(76);
  for (auto& p : h.pixdim) p = r.f32();
  h.vox_offset = r.f32();
  h.scl_slope = r.f32();
  h.scl_inter = r.f32();
  r.seek(254);
  h.sform_code = r.i16();
  r.seek(280);
  for (auto& v : h.srow_x) v = r.f32();
  for (auto& v : h.srow_y) v = r.f32();
  for (auto& v : h.srow_z) v = r.f32();

  if (h.dim[0] != 3) throw Error(ErrorCode::BadHeader, "dim[0] must be 3, got " + std::to_string(h.dim[0]));
  for (int i = 1; i <= 3; ++i)
    if (h.dim[i] < 1) throw Error(ErrorCode::BadHeader, "dim[" + std::to_string(i) + "] < 1");
  for (int i = 1; i <= 3; ++i)
    if (!(h.pixdim[i] > 0.0f))
      throw Error(ErrorCode::NonPositiveSpacing, "pixdim[" + std::to_string(i) + "] = " + std::to_string(h.pixdim[i]));
  if (!(h.vox_offset >= 352.0f)) throw Error(ErrorCode::BadHeader, "vox_offset < 352");

  Volume vol;
  vol.extents = {static_cast<std::size_t>(h.dim[1]), static_cast<std::size_t>(h.dim[2]),
                 static_cast<std::size_t>(h.dim[3])};
  const Vec3 pix{h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  if (h.sform_code > 0) {
    for (int c = 0; c < 4; ++c) {
      vol.affine[0][c] = h.srow_x[c];
      vol.affine[1][c] = h.srow_y[c];
      vol.affine[2][c] = h.srow_z[c];
    }
  } else {
    // No sform: qform is not decoded, fall back to a scaled identity.
    vol.affine = diagonal_affine(pix);
  }
  const Vec3 norms = affine_column_norms(vol.affine);
  vol.spacing = spacing_matches(pix, norms) ? pix : norms;
  for (double s : vol.spacing)
    if (!(s > 0.0)) throw Error(ErrorCode::NonPositiveSpacing, "affine has a zero-length column");

  const std::size_t n = vol.voxel_count();
  const std::size_t esize = element_size(h.datatype);
  const auto offset = static_cast<std::size_t>(h.vox_offset);
  if (bytes.size() < offset || (bytes.size() - offset) / esize < n)
    throw Error(ErrorCode::TruncatedData, "voxel data needs " + std::to_string(n * esize) + " bytes at offset " +
                                              std::to_string(offset));
  r.seek(offset);
  vol.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (h.datatype) {
      case NiftiDatatype::uint8: vol.data[i] = r.u8(); break;
      case NiftiDatatype::int16: vol.data[i] = r.i16(); break;
      case NiftiDatatype::float32: vol.data[i] = r.f32(); break;
    }
  }
  if (h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
    for (double& v : vol.data) v = v * h.scl_slope + h.scl_inter;
  }
  for (double v : vol.data)
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteData, "voxel data contains NaN or Inf");
  return {h, std::move(vol)};
}

NiftiHeader header_for(const Volume& vol) {
  NiftiHeader h;
  for (int i = 0; i < 3; ++i) {
    h.dim[i + 1] = static_cast<std::int16_t>(vol.extents[i]);
    h.pixdim[i + 1] = static_cast<float>(vol.spacing[i]);
  }
  for (int c = 0; c < 4; ++c) {
    h.srow_x[c] = static_cast<float>(vol.affine[0][c]);
    h.srow_y[c] = static_cast<float>(vol.affine[1][c]);
    h.srow_z[c] = static_cast<float>(vol.affine[2][c]);
  }
  return h;
}

std::vector<std::uint8_t> write_nifti(const NiftiHeader& header, const Volume& vol) {
  for (int i = 0; i < 3; ++i) {
    if (vol.extents[i] < 1 || vol.extents[i] > 32767)
      throw Error(ErrorCode::InconsistentExtents, "extent out of NIfTI-1 range");
    if (header.dim[i + 1] != static_cast<std::int16_t>(vol.extents[i]))
      throw Error(ErrorCode::InconsistentExtents, "header dim[" + std::to_string(i + 1) + "] disagrees with volume");
    if (!(vol.spacing[i] > 0.0)) throw Error(ErrorCode::NonPositiveSpacing, "volume spacing must be positive");
  }
  if (header.dim[0] != 3) throw Error(ErrorCode::InconsistentExtents, "dim[0] must be 3");
  if (vol.data.size() != vol.voxel_count())
    throw Error(ErrorCode::InconsistentExtents, "data length " + std::to_string(vol.data.size()) +
                                                    " != extents product " + std::to_string(vol.voxel_count()));
  for (double v : vol.data)
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteData, "volume contains NaN or Inf");

  const NiftiHeader h = header_for(vol);
  detail::ByteWriter w;
  w.i32(kHeaderSize);
  w.zeros(36);  // data_type, db_name, extents, session_error, regular, dim_info
  for (auto d : h.dim) w.i16(d);
  w.zeros(12);  // intent_p1..p3
  w.i16(0);     // intent_code
  w.i16(static_cast<std::int16_t>(NiftiDatatype::float32));
  w.i16(32);  // bitpix
  w.i16(0);   // slice_start
  for (auto p : h.pixdim) w.f32(p);
  w.f32(static_cast<float>(kDataOffset));
  w.f32(1.0f);  // scl_slope
  w.f32(0.0f);  // scl_inter
  w.i16(0);     // slice_end
  w.u8(0);      // slice_code
  w.u8(2);      // xyzt_units: mm
  w.zeros(24);  // cal_max, cal_min, slice_duration, toffset, glmax, glmin
  w.zeros(80 + 24);  // descrip, aux_file
  w.i16(0);          // qform_code
  w.i16(1);          // sform_code
  w.zeros(24);       // quatern_b..qoffset_z
  for (auto v : h.srow_x) w.f32(v);
  for (auto v : h.srow_y) w.f32(v);
  for (auto v : h.srow_z) w.f32(v);
  w.zeros(16);  // intent_name
  w.raw(std::string_view("n+1\0", 4));
  w.zeros(4);  // extension flag
  for (double v : vol.data) w.f32(static_cast<float>(v));
  return w.take();
}

Volume read_nifti_file(const std::string& path) {
  const auto bytes = detail::read_file(path);
  return parse_nifti(bytes).second;
}

void write_nifti_file(const std::string& path, const Volume& vol) {
  detail::write_file(path, write_nifti(header_for(vol), vol));
}

Volume reorient_to_ras(const Volume& vol) {
  const Affine& a = vol.affine;
  const double det = affine_determinant(a);
  const Vec3 norms = affine_column_norms(a);
  const double scale = std::max({norms[0], norms[1], norms[2], 1e-300});
  if (!std::isfinite(det) || std::abs(det) <= 1e-12 * scale * scale * scale)
    throw Error(ErrorCode::SingularAffine, "affine linear part is singular");

  // world axis -> voxel axis that dominates it
  std::array<int, 3> src{-1, -1, -1};
  for (int j = 0; j < 3; ++j) {
    int best = 0;
    for (int w = 1; w < 3; ++w)
      if (std::abs(a[w][j]) > std::abs(a[best][j])) best = w;
    for (int w = 0; w < 3; ++w)
      if (w != best && std::abs(a[w][j]) == std::abs(a[best][j]))
        throw Error(ErrorCode::ObliqueAffine, "voxel axis " + std::to_string(j) + " has no dominant world axis");
    if (src[best] != -1)
      throw Error(ErrorCode::ObliqueAffine, "two voxel axes map onto world axis " + std::to_string(best));
    src[best] = j;
  }

  std::array<bool, 3> flip{};
  for (int k = 0; k < 3; ++k) flip[k] = a[k][src[k]] < 0.0;

  Volume out;
  for (int k = 0; k < 3; ++k) {
    out.extents[k] = vol.extents[src[k]];
    out.spacing[k] = vol.spacing[src[k]];
  }
  // Old voxel index of new voxel (0,0,0), then new columns.
  Vec3 origin_idx{};
  for (int k = 0; k < 3; ++k) origin_idx[src[k]] = flip[k] ? static_cast<double>(vol.extents[src[k]] - 1) : 0.0;
  const Vec3 origin = apply_affine(a, origin_idx);
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) out.affine[r][k] = flip[k] ? -a[r][src[k]] : a[r][src[k]];
    out.affine[r][3] = origin[r];
  }

  out.data.resize(vol.data.size());
  std::array<std::size_t, 3> old_idx{};
  std::size_t n = 0;
  for (std::size_t z = 0; z < out.extents[2]; ++z)
    for (std::size_t y = 0; y < out.extents[1]; ++y)
      for (std::size_t x = 0; x < out.extents[0]; ++x, ++n) {
        const std::array<std::size_t, 3> idx{x, y, z};
        for (int k = 0; k < 3; ++k) old_idx[src[k]] = flip[k] ? out.extents[k] - 1 - idx[k] : idx[k];
        out.data[n] = vol.at(old_idx[0], old_idx[1], old_idx[2]);
      }
  return out;
}

}  // namespace fibro
