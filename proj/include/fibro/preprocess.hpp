// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fibro/volume.hpp"

namespace fibro {

inline constexpr std::size_t kNumModalities = 3;

enum class Modality : int { T1WI = 0, T2WI = 1, DWI = 2 };

inline constexpr std::array<const char*, kNumModalities> kModalityNames{"T1WI", "T2WI", "DWI"};

struct PreprocessConfig {
  Vec3 target_spacing{1.5, 1.5, 3.0};
  Extents target_extents{200, 200, 64};
  std::size_t drop_leading_slices = 20;
  double p_low = 1.0;
  double p_high = 99.0;

  /// Throws InvalidConfig when an invariant is violated.
  void validate() const;

  Extents output_extents() const {
    return {target_extents[0], target_extents[1], target_extents[2] - drop_leading_slices};
  }

  /// 16x16x16 grids at the native synthetic spacing, no slice removal.
  static PreprocessConfig desk();
};

/// Output extent per axis: round(n * s / t), at least 1. `degenerate`, when
/// given, reports axes whose unclamped extent rounded to 0.
Extents resampled_extents(const Extents& in, const Vec3& spacing, const Vec3& target,
                          std::array<bool, 3>* degenerate = nullptr);

/// Trilinear resampling onto `target_spacing`. Output voxel i sits at input
/// voxel coordinate i * target / spacing (voxel 0 centers coincide); samples
/// outside the grid clamp to the edge.
Volume resample_trilinear(const Volume& vol, const Vec3& target_spacing);

/// Linear-interpolation percentile (numpy's default definition), p in [0,100].
double percentile(std::span<const double> values, double p);

/// clamp((v - P_low) / (P_high - P_low), 0, 1); all zeros when the range
/// collapses below 1e-12.
Volume normalize_percentile(const Volume& vol, double p_low, double p_high);

/// Symmetric zero padding / centered cropping per axis. Odd differences put
/// the extra voxel on the high-index side.
Volume pad_crop_center(const Volume& vol, const Extents& target);

/// Removes the k lowest z slices. Throws KTooLarge when k >= nz.
Volume drop_leading_slices(const Volume& vol, std::size_t k);

/// reorient -> resample -> normalize -> pad/crop -> slice drop.
Volume preprocess_volume(const Volume& raw, const PreprocessConfig& cfg);

/// One patient, ready for the network.
struct CaseBundle {
  std::string case_id;
  Extents extents{0, 0, 0};
  std::array<std::vector<float>, kNumModalities> volumes;
  std::array<std::uint8_t, kNumModalities> mask{0, 0, 0};
  std::optional<int> stage;

  std::size_t available_count() const { return mask[0] + mask[1] + mask[2]; }
  std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }

  /// Throws BadBundle when shapes, mask or stage are inconsistent.
  void validate() const;

  bool operator==(const CaseBundle&) const = default;
};

/// Missing modalities are zero-filled with mask 0. Throws AllModalitiesMissing.
CaseBundle build_bundle(const std::string& case_id, const std::array<std::optional<Volume>, kNumModalities>& raw,
                        std::optional<int> stage, const PreprocessConfig& cfg);

std::vector<std::uint8_t> encode_bundle(const CaseBundle& bundle);
CaseBundle decode_bundle(std::span<const std::uint8_t> bytes);
void write_bundle(const std::string& path, const CaseBundle& bundle);
CaseBundle read_bundle(const std::string& path);

/// All *.cbun files in `dir`, sorted by file name.
std::vector<CaseBundle> read_bundle_dir(const std::string& dir);

/// Training-time augmentation. Deterministic in (seed, strength); strength 0
/// is the identity. Output stays in [0,1] and masked grids stay zero.
CaseBundle augment(const CaseBundle& bundle, std::uint64_t seed, double strength);

/// One row of the preprocessing manifest.
struct ManifestRow {
  std::string case_id;
  std::array<std::string, kNumModalities> paths;  // empty = missing
  std::optional<int> stage;
};

std::vector<ManifestRow> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);

/// Builds one bundle per manifest row, reading images relative to `input_dir`.
/// Returns the written bundle paths.
std::vector<std::string> preprocess_manifest(const std::string& manifest_path, const std::string& input_dir,
                                             const std::string& output_dir, const PreprocessConfig& cfg);

}  // namespace fibro
