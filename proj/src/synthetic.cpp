// SPDX-License-Identifier: Apache-2.0
#include "fibro/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>

#include "fibro/error.hpp"
#include "fibro/nifti_io.hpp"
#include "fibro/random.hpp"

namespace fibro {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, "synth: " + what); };
  if (n_cases < 8) bad("n_cases must be >= 8");
  for (auto e : extents)
    if (e < 1) bad("extents must be >= 1");
  for (auto s : spacing)
    if (!(s > 0.0)) bad("spacing must be positive");
  double total = 0.0;
  for (double w : stage_weights) {
    if (!(w >= 0.0)) bad("stage weights must be >= 0");
    total += w;
  }
  if (!(total > 0.0)) bad("stage weights must not all be zero");
  if (!(p_drop >= 0.0 && p_drop < 1.0)) bad("p_drop must be in [0, 1)");
  if (!(contrast >= 0.0)) bad("contrast must be >= 0");
  if (!(noise >= 0.0)) bad("noise must be >= 0");
}

std::vector<int> synth_stages(const SynthConfig& cfg) {
  const double total = std::accumulate(cfg.stage_weights.begin(), cfg.stage_weights.end(), 0.0);
  std::array<std::size_t, 4> count{};
  std::array<double, 4> rem{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    const double exact = cfg.stage_weights[s] / total * static_cast<double>(cfg.n_cases);
    count[s] = static_cast<std::size_t>(std::floor(exact));
    rem[s] = exact - static_cast<double>(count[s]);
    assigned += count[s];
  }
  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < cfg.n_cases; i = (i + 1) % 4, ++assigned) ++count[order[i]];
  std::vector<int> stages;
  for (std::size_t s = 0; s < 4; ++s) stages.insert(stages.end(), count[s], static_cast<int>(s + 1));
  Rng rng(derive_seed(cfg.seed, 0x57a9e));
  std::shuffle(stages.begin(), stages.end(), rng);
  return stages;
}

double blob_mean(std::size_t modality, int stage, double contrast) {
  const double s = static_cast<double>(stage);
  switch (modality) {
    case 0: return 0.3 + s * contrast;
    case 1: return 0.3 + s * contrast / 2.0;
    default: return 0.3 - s * contrast / 2.0;
  }
}

bool in_blob(const Extents& e, std::size_t x, std::size_t y, std::size_t z) {
  const double r = static_cast<double>(*std::min_element(e.begin(), e.end())) / 4.0;
  const double dx = static_cast<double>(x) - (static_cast<double>(e[0]) - 1.0) / 2.0;
  const double dy = static_cast<double>(y) - (static_cast<double>(e[1]) - 1.0) / 2.0;
  const double dz = static_cast<double>(z) - (static_cast<double>(e[2]) - 1.0) / 2.0;
  return dx * dx + dy * dy + dz * dz <= r * r;
}

RawCase generate_case(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  if (index >= cfg.n_cases) throw Error(ErrorCode::InvalidConfig, "case index out of range");
  char id[64];
  std::snprintf(id, sizeof id, "%s_%04zu", cfg.id_prefix.c_str(), index);
  RawCase c;
  c.case_id = id;
  c.stage = synth_stages(cfg)[index];

  Rng rng(derive_seed(cfg.seed, 0xca5e, index));
  std::bernoulli_distribution drop(cfg.p_drop);
  std::array<bool, kNumModalities> present{};
  do {
    for (auto& p : present) p = !drop(rng);
  } while (!(present[0] || present[1] || present[2]));

  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (!present[m]) continue;
    Volume v = make_volume(cfg.extents, cfg.spacing);
    const double inside = blob_mean(m, c.stage, cfg.contrast);
    for (std::size_t z = 0; z < cfg.extents[2]; ++z)
      for (std::size_t y = 0; y < cfg.extents[1]; ++y)
        for (std::size_t x = 0; x < cfg.extents[0]; ++x)
          v.at(x, y, z) = static_cast<float>((in_blob(cfg.extents, x, y, z) ? inside : 0.3) + cfg.noise * noise(rng));
    c.volumes[m] = std::move(v);
  }
  return c;
}

SynthOutput generate_dataset(const SynthConfig& cfg, const std::string& out_dir, const PreprocessConfig& prep) {
  cfg.validate();
  prep.validate();
  const fs::path root(out_dir);
  fs::create_directories(root / "raw");
  fs::create_directories(root / "bundles");
  SynthOutput out;
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < cfg.n_cases; ++i) {
    const RawCase c = generate_case(cfg, i);
    ManifestRow row{c.case_id, {}, c.stage};
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      if (!c.volumes[m]) continue;
      row.paths[m] = "raw/" + c.case_id + "_" + kModalityNames[m] + ".nii";
      write_nifti_file((root / row.paths[m]).string(), *c.volumes[m]);
    }
    rows.push_back(row);
    const std::string path = (root / "bundles" / (c.case_id + ".cbun")).string();
    write_bundle(path, build_bundle(c.case_id, c.volumes, c.stage, prep));
    out.bundle_paths.push_back(path);
  }
  out.manifest_path = (root / "manifest.csv").string();
  write_manifest(out.manifest_path, rows);
  return out;
}

std::vector<CaseBundle> generate_bundles(const SynthConfig& cfg, const PreprocessConfig& prep) {
  cfg.validate();
  prep.validate();
  std::vector<CaseBundle> out;
  for (std::size_t i = 0; i < cfg.n_cases; ++i) {
    const RawCase c = generate_case(cfg, i);
    out.push_back(build_bundle(c.case_id, c.volumes, c.stage, prep));
  }
  return out;
}

}  // namespace fibro
