// SPDX-License-Identifier: Apache-2.0
#include "fibro/checkpoint.hpp"

#include <json.hpp>

#include "fibro/detail/bytes.hpp"
#include "fibro/error.hpp"

namespace fibro {

namespace {

constexpr std::string_view kMagic = "FCPT";

std::string header_json(const Checkpoint& c) {
  nlohmann::json j;
  j["model"] = nlohmann::json::parse(model_config_to_json(c.model));
  j["task"] = c.task;
  return j.dump();
}

float to_file(double v) { return static_cast<float>(v); }

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (!(model == o.model) || task != o.task || params.size() != o.params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [na, ta] = params[i];
    const auto& [nb, tb] = o.params[i];
    if (na != nb || ta.shape != tb.shape || ta.value != tb.value) return false;
  }
  return true;
}

Checkpoint make_checkpoint(const Model& model, const std::string& task) {
  Checkpoint c{model.config(), task, {}};
  for (const auto& [name, t] : model.parameters().entries()) {
    Tensor copy(t->shape);
    for (std::size_t i = 0; i < t->size(); ++i) copy.value[i] = to_file(t->value[i]);
    c.params.emplace_back(name, std::move(copy));
  }
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  const std::string cfg = header_json(c);
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.raw(cfg);
  w.u64(c.params.size());
  for (const auto& [name, t] : c.params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.value) w.f32(to_file(v));
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, ErrorCode::IncompatibleCheckpoint);
  if (r.str(4) != kMagic) throw Error(ErrorCode::IncompatibleCheckpoint, "bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::IncompatibleCheckpoint, "unsupported version " + std::to_string(version));
  const std::string cfg = r.str(r.u32());
  Checkpoint c;
  try {
    const auto j = nlohmann::json::parse(cfg);
    c.model = model_config_from_json(j.at("model").dump());
    c.task = j.at("task").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IncompatibleCheckpoint, std::string("config: ") + e.what());
  }
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const auto rank = r.u32();
    if (rank > 8) throw Error(ErrorCode::IncompatibleCheckpoint, name + ": rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    Tensor t(shape);
    r.require(t.size() * 4);
    for (double& v : t.value) v = r.f32();
    c.params.emplace_back(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::IncompatibleCheckpoint, "trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { detail::write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m(ckpt.model, 0);
  const auto& entries = m.parameters().entries();
  if (entries.size() != ckpt.params.size())
    throw Error(ErrorCode::IncompatibleCheckpoint, "expected " + std::to_string(entries.size()) + " parameters, found " +
                                                       std::to_string(ckpt.params.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    const auto& [cname, ct] = ckpt.params[i];
    if (name != cname || t->shape != ct.shape)
      throw Error(ErrorCode::IncompatibleCheckpoint, "parameter " + std::to_string(i) + ": expected " + name +
                                                         shape_string(t->shape) + ", found " + cname +
                                                         shape_string(ct.shape));
    t->value = ct.value;
  }
  return m;
}

}  // namespace fibro
