// SPDX-License-Identifier: Apache-2.0
#include "fibro/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "fibro/error.hpp"
#include "fibro/random.hpp"

namespace fibro {

using nlohmann::json;

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, "model: " + what); };
  if (stages != 5) bad("stages must be 5");
  if (base_width < 1) bad("base_width must be >= 1");
  if (token_dim < 2 || token_dim % 2 != 0) bad("token_dim must be even and >= 2");
  if (heads < 1 || token_dim % heads != 0) bad("token_dim must be divisible by heads");
  if (ffn_hidden < 1 || head_hidden < 1) bad("hidden widths must be >= 1");
  if (num_classes < 2) bad("num_classes must be >= 2");
  if (!(alpha > 0.0 && alpha <= 1.0)) bad("alpha must be in (0, 1]");
  if (!(eps > 0.0)) bad("eps must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must be in [0, 1)");
  for (auto e : input_extents)
    if (e < 9) bad("input extents must be >= 9 for four stride-2 stages");
}

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.base_width = 2;
  c.token_dim = 16;
  c.heads = 2;
  c.intra_layers = 1;
  c.corr_layers = 1;
  c.ffn_hidden = 32;
  c.head_hidden = 16;
  c.input_extents = {16, 16, 16};
  return c;
}

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["base_width"] = c.base_width;
  j["stages"] = c.stages;
  j["token_dim"] = c.token_dim;
  j["heads"] = c.heads;
  j["intra_layers"] = c.intra_layers;
  j["corr_layers"] = c.corr_layers;
  j["ffn_hidden"] = c.ffn_hidden;
  j["head_hidden"] = c.head_hidden;
  j["num_classes"] = c.num_classes;
  j["alpha"] = c.alpha;
  j["eps"] = c.eps;
  j["dropout"] = c.dropout;
  j["input_extents"] = c.input_extents;
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.base_width = j.at("base_width").get<std::size_t>();
    c.stages = j.at("stages").get<std::size_t>();
    c.token_dim = j.at("token_dim").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.intra_layers = j.at("intra_layers").get<std::size_t>();
    c.corr_layers = j.at("corr_layers").get<std::size_t>();
    c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
    c.head_hidden = j.at("head_hidden").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.alpha = j.at("alpha").get<double>();
    c.eps = j.at("eps").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.input_extents = j.at("input_extents").get<Extents>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IncompatibleCheckpoint, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::size_t channel_schedule(std::size_t stage, std::size_t base_width) {
  if (stage < 1 || stage > 5) throw Error(ErrorCode::StageOutOfRange, "stage " + std::to_string(stage));
  return (std::size_t{1} << (stage - 1)) * base_width;
}

Extents encoder_output_extents(const Extents& input, std::size_t stages) {
  Extents e = input;
  for (std::size_t s = 2; s <= stages; ++s)
    for (auto& v : e) v = (v + 1) / 2;
  return e;
}

// ---------------------------------------------------------------- parameters

TensorPtr ParameterStore::add(std::string name, Shape shape) {
  auto t = std::make_shared<Tensor>(std::move(shape), true);
  entries_.emplace_back(std::move(name), t);
  return t;
}

std::vector<TensorPtr> ParameterStore::tensors() const {
  std::vector<TensorPtr> out;
  out.reserve(entries_.size());
  for (const auto& [_, t] : entries_) out.push_back(t);
  return out;
}

TensorPtr ParameterStore::find(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  return nullptr;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t->size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, t] : entries_) t->zero_grad();
}

namespace {

class Builder {
 public:
  Builder(ParameterStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  // Kaiming-uniform over fan-in; gain sqrt(2) in front of LeakyReLU, 1 otherwise.
  TensorPtr kaiming(const std::string& name, Shape shape, std::size_t fan_in, double gain) {
    auto t = store_.add(name, std::move(shape));
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t->value) v = u(rng_);
    return t;
  }

  TensorPtr constant(const std::string& name, Shape shape, double value) {
    auto t = store_.add(name, std::move(shape));
    std::fill(t->value.begin(), t->value.end(), value);
    return t;
  }

  ConvWeights conv(const std::string& name, std::size_t cin, std::size_t cout) {
    return {kaiming(name + ".weight", {cout, cin, 3, 3, 3}, cin * 27, std::sqrt(2.0)),
            constant(name + ".bias", {cout}, 0.0)};
  }

  LinearWeights linear(const std::string& name, std::size_t in, std::size_t out, bool bias = true) {
    LinearWeights l{kaiming(name + ".weight", {in, out}, in, 1.0), nullptr};
    if (bias) l.bias = constant(name + ".bias", {out}, 0.0);
    return l;
  }

  NormWeights norm(const std::string& name, std::size_t c) {
    return {constant(name + ".gain", {c}, 1.0), constant(name + ".bias", {c}, 0.0)};
  }

  AttentionWeights attention(const std::string& name, std::size_t c) {
    return {linear(name + ".wq", c, c, false).weight, linear(name + ".wk", c, c, false).weight,
            linear(name + ".wv", c, c, false).weight, linear(name + ".wo", c, c, false).weight};
  }

  FfnWeights ffn(const std::string& name, std::size_t c, std::size_t hidden) {
    return {linear(name + ".fc1", c, hidden), linear(name + ".fc2", hidden, c)};
  }

  TransformerBlock block(const std::string& name, std::size_t c, std::size_t hidden) {
    TransformerBlock b;
    b.norm_attn = norm(name + ".norm_attn", c);
    b.attn = attention(name + ".attn", c);
    b.norm_ffn = norm(name + ".norm_ffn", c);
    b.ffn = ffn(name + ".ffn", c, hidden);
    return b;
  }

  Calibration calibration(const std::string& name, std::size_t c) {
    return {constant(name + ".mu", {c}, 0.0), constant(name + ".sigma", {c}, 1.0),
            constant(name + ".weight", {c}, 1.0)};
  }

 private:
  ParameterStore& store_;
  Rng rng_;
};

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Builder b(params_, seed);
  const std::size_t C = cfg_.token_dim;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const std::string root = std::string("branch.") + kModalityNames[m];
    auto& br = branches_[m];
    std::size_t cin = 1;
    for (std::size_t s = 1; s <= cfg_.stages; ++s) {
      const std::size_t cs = channel_schedule(s, cfg_.base_width);
      const std::string sn = root + ".stage" + std::to_string(s);
      EncoderStage st;
      st.entry = b.conv(sn + ".entry", cin, cs);
      st.units[0] = b.conv(sn + ".unit1", cs, cs);
      st.units[1] = b.conv(sn + ".unit2", cs, cs);
      br.stages.push_back(std::move(st));
      cin = cs;
    }
    br.projection = b.linear(root + ".proj", cin, C);
    for (std::size_t l = 0; l < cfg_.intra_layers; ++l)
      br.blocks.push_back(b.block(root + ".block" + std::to_string(l), C, cfg_.ffn_hidden));
    br.calibration = b.calibration(root + ".calib", C);
  }
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const std::string root = std::string("proxy.") + kModalityNames[m];
    proxies_[m].attn = b.attention(root + ".attn", C);
    proxies_[m].calibration = b.calibration(root + ".calib", C);
    proxies_[m].ffn = b.ffn(root + ".ffn", C, cfg_.ffn_hidden);
  }
  for (std::size_t l = 0; l < cfg_.corr_layers; ++l)
    correlated_.push_back(b.block("corr.block" + std::to_string(l), C, cfg_.ffn_hidden));
  head_.norm = b.norm("head.norm", C);
  head_.embed = b.linear("head.embed", C, cfg_.head_hidden);
  head_.mlp1 = b.linear("head.mlp1", cfg_.head_hidden, cfg_.head_hidden);
  head_.mlp2 = b.linear("head.mlp2", cfg_.head_hidden, cfg_.head_hidden);
  head_.out = b.linear("head.out", cfg_.head_hidden, cfg_.num_classes);
}

void Model::copy_values_from(const Model& other) {
  if (!(other.cfg_ == cfg_)) throw Error(ErrorCode::IncompatibleCheckpoint, "model configurations differ");
  const auto& src = other.params_.entries();
  const auto& dst = params_.entries();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i].second->value = src[i].second->value;
}

// ---------------------------------------------------------------- forward pieces

TensorPtr conv_encoder_forward(Tape& tape, const TensorPtr& x, std::span<const EncoderStage> stages,
                               const DropoutCtx& drop) {
  TensorPtr h = x;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    ConvSpec entry_spec{1, 1, PadMode::zero};
    if (s > 0) {
      for (int a = 1; a <= 3; ++a)
        if (h->shape[a] < 2)
          throw Error(ErrorCode::InputTooSmall, "stage " + std::to_string(s + 1) + " input " + shape_string(h->shape) +
                                                    " is too small to downsample");
      entry_spec = {2, 1, PadMode::reflect};
    }
    const auto& st = stages[s];
    const TensorPtr e = conv3d(tape, h, st.entry.weight, st.entry.bias, entry_spec);
    TensorPtr u = e;
    for (const auto& unit : st.units) {
      u = dropout(tape, leaky_relu(tape, instance_norm(tape, u)), drop);
      u = conv3d(tape, u, unit.weight, unit.bias, {1, 1, PadMode::zero});
    }
    h = add(tape, e, u);
  }
  return h;
}

TensorPtr tokenize(Tape& tape, const TensorPtr& features, const LinearWeights& projection) {
  return linear(tape, channels_to_tokens(tape, features), projection);
}

TensorPtr transformer_block(Tape& tape, const TensorPtr& x, const TransformerBlock& blk, const TensorPtr& pos,
                            std::size_t heads, const DropoutCtx& drop) {
  const TensorPtr xt = add(tape, x, pos);
  const TensorPtr n1 = layer_norm(tape, xt, blk.norm_attn.gain, blk.norm_attn.bias);
  const TensorPtr z = add(tape, multi_head_attention(tape, n1, n1, n1, blk.attn, heads), xt);
  const TensorPtr n2 = layer_norm(tape, z, blk.norm_ffn.gain, blk.norm_ffn.bias);
  return add(tape, ffn(tape, n2, blk.ffn, drop), z);
}

TensorPtr transformer_stack(Tape& tape, const TensorPtr& x, std::span<const TransformerBlock> blocks,
                            std::size_t heads, const DropoutCtx& drop) {
  if (blocks.empty()) return x;
  const TensorPtr pos = positional_encoding(x->shape.at(0), x->shape.at(1));
  TensorPtr h = x;
  for (const auto& blk : blocks) h = transformer_block(tape, h, blk, pos, heads, drop);
  return h;
}

TensorPtr calibrate(Tape& tape, const TensorPtr& x, const Calibration& c, double eps) {
  return delta_calibrate(tape, x, c.mu, c.sigma, c.weight, eps);
}

TensorPtr reference_average(Tape& tape, std::span<const TensorPtr> calibrated) {
  if (calibrated.empty()) throw Error(ErrorCode::EmptyAvailableSet, "no available modality to average");
  std::size_t n = calibrated.front()->shape.at(0);
  for (const auto& t : calibrated) n = std::min(n, t->shape.at(0));
  std::vector<TensorPtr> trimmed;
  trimmed.reserve(calibrated.size());
  for (const auto& t : calibrated) trimmed.push_back(slice_rows(tape, t, n));
  if (trimmed.size() == 1) return trimmed.front();
  return mean_of(tape, trimmed);
}

TensorPtr proxy_synthesize(Tape& tape, const TensorPtr& ref, const ProxyBranch& proxy, double alpha, double eps,
                           std::size_t heads, const DropoutCtx& drop) {
  if (ref->shape.at(0) == 0) throw Error(ErrorCode::EmptyAvailableSet, "empty reference sequence");
  const TensorPtr prelim = multi_head_attention(tape, ref, ref, ref, proxy.attn, heads);
  const TensorPtr calibrated = calibrate(tape, prelim, proxy.calibration, eps);
  return scale(tape, ffn(tape, calibrated, proxy.ffn, drop), alpha);
}

TensorPtr fuse_tokens(Tape& tape, const std::array<TensorPtr, kNumModalities>& seqs) {
  std::size_t n = seqs[0]->shape.at(0);
  for (const auto& s : seqs) n = std::min(n, s->shape.at(0));
  std::array<TensorPtr, kNumModalities> trimmed;
  for (std::size_t m = 0; m < kNumModalities; ++m) trimmed[m] = slice_rows(tape, seqs[m], n);
  return concat_rows(tape, trimmed);
}

TensorPtr classify(Tape& tape, const TensorPtr& fused, const ClassifierHead& head, const DropoutCtx& drop) {
  const TensorPtr pooled = mean_rows(tape, layer_norm(tape, fused, head.norm.gain, head.norm.bias));
  const TensorPtr emb = dropout(tape, linear(tape, pooled, head.embed), drop);
  const TensorPtr hidden = linear(tape, gelu(tape, linear(tape, emb, head.mlp1)), head.mlp2);
  return linear(tape, hidden, head.out);
}

TensorPtr modality_input(const CaseBundle& bundle, std::size_t m) {
  const auto& e = bundle.extents;
  const auto& grid = bundle.volumes.at(m);
  return make_tensor({1, e[2], e[1], e[0]}, std::vector<double>(grid.begin(), grid.end()));
}

TensorPtr Model::forward(Tape& tape, const CaseBundle& bundle, const DropoutCtx& drop) const {
  if (bundle.available_count() == 0)
    throw Error(ErrorCode::AllModalitiesMissing, bundle.case_id + ": nothing to encode");
  std::array<TensorPtr, kNumModalities> seqs;
  std::vector<TensorPtr> available;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (!bundle.mask[m]) continue;
    const auto& br = branches_[m];
    TensorPtr t = tokenize(tape, conv_encoder_forward(tape, modality_input(bundle, m), br.stages, drop), br.projection);
    t = transformer_stack(tape, t, br.blocks, cfg_.heads, drop);
    seqs[m] = calibrate(tape, t, br.calibration, cfg_.eps);
    available.push_back(seqs[m]);
  }
  if (available.size() < kNumModalities) {
    const TensorPtr ref = reference_average(tape, available);
    for (std::size_t m = 0; m < kNumModalities; ++m)
      if (!seqs[m]) seqs[m] = proxy_synthesize(tape, ref, proxies_[m], cfg_.alpha, cfg_.eps, cfg_.heads, drop);
  }
  const TensorPtr fused = transformer_stack(tape, fuse_tokens(tape, seqs), correlated_, cfg_.heads, drop);
  TensorPtr out = classify(tape, fused, head_, drop);
  for (double v : out->value)
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteData, bundle.case_id + ": non-finite logits");
  return out;
}

std::vector<double> Model::logits(const CaseBundle& bundle) const {
  Tape tape(false);
  return forward(tape, bundle)->value;
}

}  // namespace fibro
