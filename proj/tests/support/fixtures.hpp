// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fibro/model.hpp"
#include "fibro/preprocess.hpp"
#include "fibro/random.hpp"

namespace fibro::testing {

/// Uniform [0,1) grids for the present modalities, zeros elsewhere.
CaseBundle random_bundle(Rng& rng, const Extents& extents, std::array<std::uint8_t, 3> mask,
                         std::optional<int> stage = std::nullopt, const std::string& id = "case");

struct GradCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  /// Coordinates whose +-step interval crosses a LeakyReLU kink; these are
  /// differenced on the active piece (slopes frozen at the base point).
  std::size_t kink_coords = 0;
};

/// Sign of every LeakyReLU input in one modality's conv encoder (eval mode),
/// replayed stage by stage with the public kernels.
std::vector<std::uint8_t> encoder_kink_pattern(const Model& model, const CaseBundle& bundle, std::size_t modality);

/// Eval-mode logits rebuilt from the public building blocks with every
/// encoder LeakyReLU replaced by its slope under `patterns[m]` (the output of
/// encoder_kink_pattern for modality m).
std::vector<double> frozen_logits(const Model& model, const CaseBundle& bundle,
                                  const std::array<std::vector<std::uint8_t>, 3>& patterns);

/// Central differences of the summed cross-entropy over `bundles` against the
/// tape gradient, at `per_tensor` sampled coordinates of every parameter
/// (all of them when the tensor is smaller). Relative error is
/// |a - n| / max(|a|, |n|, floor).
std::vector<GradCheck> gradcheck_model(Model& model, std::span<const CaseBundle> bundles,
                                       std::span<const std::size_t> labels, std::size_t per_tensor, double step,
                                       std::uint64_t seed, double floor = 1e-6);

/// Scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const { return (path_ / child).string(); }

 private:
  std::filesystem::path path_;
};

std::vector<std::uint8_t> file_bytes(const std::string& path);

}  // namespace fibro::testing
