// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fibro/detail/bytes.hpp"
#include "fibro/error.hpp"
#include "fibro/nifti_io.hpp"
#include "fibro/preprocess.hpp"

namespace fs = std::filesystem;

namespace fibro {

namespace {
constexpr std::uint32_t kBundleVersion = 1;
}

void CaseBundle::validate() const {
  const std::size_t n = voxel_count();
  if (n == 0) throw Error(ErrorCode::BadBundle, case_id + ": empty extents");
  if (available_count() == 0) throw Error(ErrorCode::AllModalitiesMissing, case_id + ": mask is all zero");
  if (stage && (*stage < 1 || *stage > 4)) throw Error(ErrorCode::BadBundle, case_id + ": stage out of 1..4");
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (mask[m] > 1) throw Error(ErrorCode::BadBundle, case_id + ": mask entries must be 0 or 1");
    if (volumes[m].size() != n) throw Error(ErrorCode::BadBundle, case_id + ": grid size disagrees with extents");
    for (float v : volumes[m]) {
      if (!std::isfinite(v)) throw Error(ErrorCode::BadBundle, case_id + ": non-finite voxel");
      if (mask[m] == 0 && v != 0.0f) throw Error(ErrorCode::BadBundle, case_id + ": masked grid is not all zero");
    }
  }
}

std::vector<std::uint8_t> encode_bundle(const CaseBundle& b) {
  b.validate();
  detail::ByteWriter w;
  w.raw("CBUN");
  w.u32(kBundleVersion);
  w.u32(static_cast<std::uint32_t>(b.case_id.size()));
  w.raw(b.case_id);
  w.i32(b.stage.value_or(-1));
  for (auto m : b.mask) w.u8(m);
  for (auto e : b.extents) w.u32(static_cast<std::uint32_t>(e));
  for (const auto& grid : b.volumes)
    for (float v : grid) w.f32(v);
  return w.take();
}

CaseBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, ErrorCode::BadBundle);
  if (r.str(4) != "CBUN") throw Error(ErrorCode::BadBundle, "bad magic");
  const std::uint32_t version = r.u32();
  if (version != kBundleVersion) throw Error(ErrorCode::BadBundle, "unsupported version " + std::to_string(version));
  CaseBundle b;
  b.case_id = r.str(r.u32());
  const std::int32_t stage = r.i32();
  if (stage != -1) b.stage = stage;
  for (auto& m : b.mask) m = r.u8();
  for (auto& e : b.extents) e = r.u32();
  const std::size_t n = b.voxel_count();
  r.require(n * 4 * kNumModalities);
  for (auto& grid : b.volumes) {
    grid.resize(n);
    for (float& v : grid) v = r.f32();
  }
  if (r.remaining() != 0) throw Error(ErrorCode::BadBundle, "trailing bytes after modality blocks");
  b.validate();
  return b;
}

void write_bundle(const std::string& path, const CaseBundle& bundle) { detail::write_file(path, encode_bundle(bundle)); }

CaseBundle read_bundle(const std::string& path) { return decode_bundle(detail::read_file(path)); }

std::vector<CaseBundle> read_bundle_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::Io, dir + " is not a directory");
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".cbun") paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  std::vector<CaseBundle> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(read_bundle(p));
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open manifest " + path);
  std::vector<ManifestRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_csv_line(line);
    if (lineno == 1 && !cells.empty() && cells[0] == "case_id") continue;
    if (cells.size() != 5)
      throw Error(ErrorCode::BadValue, path + ":" + std::to_string(lineno) + ": expected 5 columns");
    ManifestRow row;
    row.case_id = cells[0];
    for (std::size_t m = 0; m < kNumModalities; ++m) row.paths[m] = cells[m + 1];
    if (!cells[4].empty()) {
      try {
        row.stage = std::stoi(cells[4]);
      } catch (const std::exception&) {
        throw Error(ErrorCode::BadValue, path + ":" + std::to_string(lineno) + ": stage '" + cells[4] + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write manifest " + path);
  out << "case_id,t1_path,t2_path,dwi_path,stage\n";
  for (const auto& r : rows) {
    out << r.case_id;
    for (const auto& p : r.paths) out << ',' << p;
    out << ',';
    if (r.stage) out << *r.stage;
    out << '\n';
  }
}

std::vector<std::string> preprocess_manifest(const std::string& manifest_path, const std::string& input_dir,
                                             const std::string& output_dir, const PreprocessConfig& cfg) {
  cfg.validate();
  const auto rows = read_manifest(manifest_path);
  fs::create_directories(output_dir);
  std::vector<std::string> written;
  for (const auto& row : rows) {
    std::array<std::optional<Volume>, kNumModalities> raw;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      if (row.paths[m].empty()) continue;
      const fs::path p = fs::path(row.paths[m]).is_absolute() ? fs::path(row.paths[m]) : fs::path(input_dir) / row.paths[m];
      raw[m] = read_nifti_file(p.string());
    }
    const CaseBundle b = build_bundle(row.case_id, raw, row.stage, cfg);
    const std::string out = (fs::path(output_dir) / (row.case_id + ".cbun")).string();
    write_bundle(out, b);
    written.push_back(out);
  }
  return written;
}

}  // namespace fibro
