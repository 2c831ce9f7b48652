// SPDX-License-Identifier: Apache-2.0
#include "fibro/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "fibro/error.hpp"

namespace fibro {

namespace {

using nlohmann::json;

enum class Kind { integer, real, text, reals3, ints3, texts, opt_real };

struct KeySpec {
  std::string name;
  Kind kind;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view what) {
  throw Error(ErrorCode::BadValue, std::string(key) + ": '" + std::string(value) + "' " + std::string(what));
}

std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t");
  return std::string(s.substr(a, b - a + 1));
}

double parse_real(std::string_view key, std::string_view raw) {
  const std::string v = trim(raw);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    bad(key, raw, "is not a number");
  return out;
}

std::uint64_t parse_uint(std::string_view key, std::string_view raw) {
  const std::string v = trim(raw);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) bad(key, raw, "is not a non-negative integer");
  return out;
}

std::vector<std::string> split(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

template <typename T, typename F>
std::array<T, 3> parse3(std::string_view key, std::string_view raw, F one) {
  const auto parts = split(raw);
  if (parts.size() != 3) bad(key, raw, "needs three comma-separated values");
  return {one(key, parts[0]), one(key, parts[1]), one(key, parts[2])};
}

std::string fmt_real(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T>
std::string fmt3(const std::array<T, 3>& a) {
  std::string out;
  for (std::size_t i = 0; i < 3; ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>)
      out += fmt_real(a[i]);
    else
      out += std::to_string(a[i]);
  }
  return out;
}

int to_int(std::string_view key, std::string_view raw) {
  const auto v = parse_uint(key, raw);
  if (v > 1'000'000'000) bad(key, raw, "is too large");
  return static_cast<int>(v);
}

std::size_t to_size(std::string_view key, std::string_view raw) { return parse_uint(key, raw); }

KeySpec size_key(std::string name, std::size_t RunConfig::*outer) {
  return {name, Kind::integer, [name, outer](RunConfig& c, std::string_view v) { c.*outer = to_size(name, v); },
          [outer](const RunConfig& c) { return std::to_string(c.*outer); }};
}

template <typename Sub>
KeySpec sub_size_key(std::string name, Sub RunConfig::*outer, std::size_t Sub::*inner) {
  return {name, Kind::integer,
          [name, outer, inner](RunConfig& c, std::string_view v) { (c.*outer).*inner = to_size(name, v); },
          [outer, inner](const RunConfig& c) { return std::to_string((c.*outer).*inner); }};
}

template <typename Sub>
KeySpec sub_real_key(std::string name, Sub RunConfig::*outer, double Sub::*inner) {
  return {name, Kind::real,
          [name, outer, inner](RunConfig& c, std::string_view v) { (c.*outer).*inner = parse_real(name, v); },
          [outer, inner](const RunConfig& c) { return fmt_real((c.*outer).*inner); }};
}

template <typename Sub>
KeySpec sub_int_key(std::string name, Sub RunConfig::*outer, int Sub::*inner) {
  return {name, Kind::integer,
          [name, outer, inner](RunConfig& c, std::string_view v) { (c.*outer).*inner = to_int(name, v); },
          [outer, inner](const RunConfig& c) { return std::to_string((c.*outer).*inner); }};
}

KeySpec text_key(std::string name, std::string RunConfig::*field) {
  return {name, Kind::text, [field](RunConfig& c, std::string_view v) { c.*field = std::string(v); },
          [field](const RunConfig& c) { return c.*field; }};
}

std::vector<KeySpec> build_keys() {
  std::vector<KeySpec> k;
  k.push_back({"seed", Kind::integer,
               [](RunConfig& c, std::string_view v) {
                 c.train.seed = parse_uint("seed", v);
                 c.synth.seed = c.train.seed;
               },
               [](const RunConfig& c) { return std::to_string(c.train.seed); }});

  k.push_back({"preprocess.spacing", Kind::reals3,
               [](RunConfig& c, std::string_view v) {
                 c.preprocess.target_spacing = parse3<double>("preprocess.spacing", v, parse_real);
               },
               [](const RunConfig& c) { return fmt3(c.preprocess.target_spacing); }});
  k.push_back({"preprocess.extents", Kind::ints3,
               [](RunConfig& c, std::string_view v) {
                 c.preprocess.target_extents = parse3<std::size_t>("preprocess.extents", v, to_size);
               },
               [](const RunConfig& c) { return fmt3(c.preprocess.target_extents); }});
  k.push_back(sub_size_key("preprocess.drop_slices", &RunConfig::preprocess, &PreprocessConfig::drop_leading_slices));
  k.push_back(sub_real_key("preprocess.p_low", &RunConfig::preprocess, &PreprocessConfig::p_low));
  k.push_back(sub_real_key("preprocess.p_high", &RunConfig::preprocess, &PreprocessConfig::p_high));

  k.push_back({"model.scale", Kind::text,
               [](RunConfig& c, std::string_view v) {
                 if (v == "paper") {
                   c.model = ModelConfig::paper();
                 } else if (v == "desk") {
                   c.model = ModelConfig::desk();
                 } else {
                   bad("model.scale", v, "must be paper or desk");
                 }
                 c.model.num_classes = task_classes(c.task);
                 c.model_scale = std::string(v);
               },
               [](const RunConfig& c) { return c.model_scale; }});
  k.push_back(sub_size_key("model.base_width", &RunConfig::model, &ModelConfig::base_width));
  k.push_back(sub_size_key("model.token_dim", &RunConfig::model, &ModelConfig::token_dim));
  k.push_back(sub_size_key("model.heads", &RunConfig::model, &ModelConfig::heads));
  k.push_back(sub_size_key("model.intra_layers", &RunConfig::model, &ModelConfig::intra_layers));
  k.push_back(sub_size_key("model.corr_layers", &RunConfig::model, &ModelConfig::corr_layers));
  k.push_back(sub_size_key("model.ffn_hidden", &RunConfig::model, &ModelConfig::ffn_hidden));
  k.push_back(sub_size_key("model.head_hidden", &RunConfig::model, &ModelConfig::head_hidden));
  k.push_back(sub_real_key("model.alpha", &RunConfig::model, &ModelConfig::alpha));
  k.push_back(sub_real_key("model.eps", &RunConfig::model, &ModelConfig::eps));
  k.push_back(sub_real_key("model.dropout", &RunConfig::model, &ModelConfig::dropout));
  k.push_back({"model.input_extents", Kind::ints3,
               [](RunConfig& c, std::string_view v) {
                 c.model.input_extents = parse3<std::size_t>("model.input_extents", v, to_size);
               },
               [](const RunConfig& c) { return fmt3(c.model.input_extents); }});

  k.push_back({"train.task", Kind::text,
               [](RunConfig& c, std::string_view v) {
                 try {
                   c.task = parse_task(v);
                 } catch (const Error&) {
                   bad("train.task", v, "must be cirrhosis, substantial or four_class");
                 }
                 c.model.num_classes = task_classes(c.task);
               },
               [](const RunConfig& c) { return std::string(task_name(c.task)); }});
  k.push_back(size_key("train.folds", &RunConfig::folds));
  k.push_back(sub_real_key("train.lr", &RunConfig::train, &TrainConfig::lr));
  k.push_back(sub_real_key("train.lr_min", &RunConfig::train, &TrainConfig::lr_min));
  k.push_back(sub_real_key("train.wd", &RunConfig::train, &TrainConfig::weight_decay));
  k.push_back(sub_int_key("train.epochs", &RunConfig::train, &TrainConfig::epochs));
  k.push_back(sub_int_key("train.patience", &RunConfig::train, &TrainConfig::patience));
  k.push_back(sub_size_key("train.batch", &RunConfig::train, &TrainConfig::batch_size));
  k.push_back({"train.augment_strength", Kind::opt_real,
               [](RunConfig& c, std::string_view v) {
                 if (trim(v).empty() || trim(v) == "auto")
                   c.train.augment_strength.reset();
                 else
                   c.train.augment_strength = parse_real("train.augment_strength", v);
               },
               [](const RunConfig& c) {
                 return c.train.augment_strength ? fmt_real(*c.train.augment_strength) : std::string("auto");
               }});

  k.push_back(sub_size_key("synth.n", &RunConfig::synth, &SynthConfig::n_cases));
  k.push_back({"synth.extents", Kind::ints3,
               [](RunConfig& c, std::string_view v) { c.synth.extents = parse3<std::size_t>("synth.extents", v, to_size); },
               [](const RunConfig& c) { return fmt3(c.synth.extents); }});
  k.push_back(sub_real_key("synth.p_drop", &RunConfig::synth, &SynthConfig::p_drop));
  k.push_back(sub_real_key("synth.contrast", &RunConfig::synth, &SynthConfig::contrast));
  k.push_back(sub_real_key("synth.noise", &RunConfig::synth, &SynthConfig::noise));
  k.push_back({"synth.prefix", Kind::text, [](RunConfig& c, std::string_view v) { c.synth.id_prefix = std::string(v); },
               [](const RunConfig& c) { return c.synth.id_prefix; }});

  k.push_back(size_key("evaluate.ensemble_size", &RunConfig::ensemble_size));

  k.push_back(text_key("path.input_dir", &RunConfig::input_dir));
  k.push_back(text_key("path.output_dir", &RunConfig::output_dir));
  k.push_back(text_key("path.manifest", &RunConfig::manifest));
  k.push_back(text_key("path.bundles", &RunConfig::bundles));
  k.push_back(text_key("path.out", &RunConfig::out));
  k.push_back(text_key("path.checkpoint", &RunConfig::checkpoint));
  k.push_back({"path.checkpoints", Kind::texts,
               [](RunConfig& c, std::string_view v) {
                 c.checkpoints.clear();
                 if (!trim(v).empty()) c.checkpoints = split(v);
               },
               [](const RunConfig& c) {
                 std::string out;
                 for (std::size_t i = 0; i < c.checkpoints.size(); ++i) out += (i ? "," : "") + c.checkpoints[i];
                 return out;
               }});
  return k;
}

const std::vector<KeySpec>& keys() {
  static const std::vector<KeySpec> k = build_keys();
  return k;
}

const KeySpec& find_key(std::string_view key) {
  for (const auto& k : keys())
    if (k.name == key) return k;
  throw Error(ErrorCode::UnknownFlag, "unknown config key '" + std::string(key) + "'");
}

json typed(const KeySpec& k, const std::string& text) {
  switch (k.kind) {
    case Kind::integer: return json(parse_uint(k.name, text));
    case Kind::real: return json(parse_real(k.name, text));
    case Kind::opt_real: return text == "auto" ? json(nullptr) : json(parse_real(k.name, text));
    case Kind::text: return json(text);
    case Kind::reals3: {
      json a = json::array();
      for (const auto& p : split(text)) a.push_back(parse_real(k.name, p));
      return a;
    }
    case Kind::ints3: {
      json a = json::array();
      for (const auto& p : split(text)) a.push_back(parse_uint(k.name, p));
      return a;
    }
    case Kind::texts: {
      json a = json::array();
      if (!text.empty())
        for (const auto& p : split(text)) a.push_back(p);
      return a;
    }
  }
  return json(text);
}

std::string untyped(const KeySpec& k, const json& v) {
  if (v.is_null()) {
    if (k.kind == Kind::opt_real) return "auto";
    bad(k.name, "null", "is not allowed");
  }
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number_float()) return fmt_real(v.get<double>());
  if (v.is_array()) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + untyped(k, v[i]);
    return out;
  }
  bad(k.name, v.dump(), "has an unsupported type");
}

}  // namespace

void RunConfig::validate() const {
  preprocess.validate();
  model.validate();
  train.validate();
  synth.validate();
  if (folds < 2) throw Error(ErrorCode::InvalidConfig, "train.folds must be >= 2");
  if (ensemble_size < 1) throw Error(ErrorCode::InvalidConfig, "evaluate.ensemble_size must be >= 1");
  if (model.num_classes != task_classes(task))
    throw Error(ErrorCode::InvalidConfig, "model.num_classes does not match train.task");
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& k : keys()) n.push_back(k.name);
    return n;
  }();
  return names;
}

void set_key(RunConfig& cfg, std::string_view key, std::string_view value) { find_key(key).set(cfg, value); }

std::string get_key(const RunConfig& cfg, std::string_view key) { return find_key(key).get(cfg); }

std::string run_config_to_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& k : keys()) j[k.name] = typed(k, k.get(cfg));
  return j.dump(2);
}

RunConfig run_config_from_json(std::string_view text, RunConfig base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadValue, std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::BadValue, "config: expected a flat JSON object");
  for (const auto& [key, value] : j.items()) find_key(key);
  // model.scale first so explicit model.* keys refine the chosen profile.
  if (j.contains("model.scale")) set_key(base, "model.scale", untyped(find_key("model.scale"), j["model.scale"]));
  if (j.contains("train.task")) set_key(base, "train.task", untyped(find_key("train.task"), j["train.task"]));
  for (const auto& k : keys()) {
    if (k.name == "model.scale" || k.name == "train.task" || !j.contains(k.name)) continue;
    k.set(base, untyped(k, j[k.name]));
  }
  return base;
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : run_config_to_json(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fibro
