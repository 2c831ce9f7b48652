// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fibro/ops.hpp"
#include "fibro/preprocess.hpp"
#include "fibro/tensor.hpp"

namespace fibro {

struct ModelConfig {
  std::size_t base_width = 8;
  std::size_t stages = 5;
  std::size_t token_dim = 256;
  std::size_t heads = 4;
  std::size_t intra_layers = 4;
  std::size_t corr_layers = 4;
  std::size_t ffn_hidden = 512;
  std::size_t head_hidden = 256;
  std::size_t num_classes = 2;
  double alpha = 0.3;
  double eps = 1e-8;
  double dropout = 0.1;
  Extents input_extents{200, 200, 44};

  void validate() const;

  /// Full-size network on 200x200x44 inputs.
  static ModelConfig paper();
  /// Tiny profile for tests and CPU experiments (16^3 inputs).
  static ModelConfig desk();

  bool operator==(const ModelConfig&) const = default;
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(std::string_view json);

/// 2^(stage-1) * base_width for stage in 1..5.
std::size_t channel_schedule(std::size_t stage, std::size_t base_width);

/// Spatial extents after the encoder (ceil-halving once per stage after the
/// first).
Extents encoder_output_extents(const Extents& input, std::size_t stages = 5);

/// Flat, ordered registry of learnable tensors.
class ParameterStore {
 public:
  TensorPtr add(std::string name, Shape shape);

  const std::vector<std::pair<std::string, TensorPtr>>& entries() const { return entries_; }
  std::vector<TensorPtr> tensors() const;
  TensorPtr find(std::string_view name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, TensorPtr>> entries_;
};

struct ConvWeights {
  TensorPtr weight;  // [Co, Ci, 3, 3, 3]
  TensorPtr bias;    // [Co]
};

struct EncoderStage {
  ConvWeights entry;
  std::array<ConvWeights, 2> units;
};

struct NormWeights {
  TensorPtr gain;
  TensorPtr bias;
};

struct TransformerBlock {
  NormWeights norm_attn;
  AttentionWeights attn;
  NormWeights norm_ffn;
  FfnWeights ffn;
};

struct Calibration {
  TensorPtr mu;
  TensorPtr sigma;
  TensorPtr weight;
};

/// Everything that belongs to one modality's encoder path.
struct ModalityBranch {
  std::vector<EncoderStage> stages;
  LinearWeights projection;
  std::vector<TransformerBlock> blocks;
  Calibration calibration;
};

/// Proxy synthesis for one target modality.
struct ProxyBranch {
  AttentionWeights attn;
  Calibration calibration;
  FfnWeights ffn;
};

struct ClassifierHead {
  NormWeights norm;
  LinearWeights embed;
  LinearWeights mlp1;
  LinearWeights mlp2;
  LinearWeights out;
};

// Building blocks, exposed for testing.

/// Stage 1: stride-1 entry conv; stages 2..5: stride-2 reflect-padded entry
/// conv. Each stage adds two (IN -> LeakyReLU -> dropout -> conv) units on top
/// of the entry output.
TensorPtr conv_encoder_forward(Tape& tape, const TensorPtr& x, std::span<const EncoderStage> stages,
                               const DropoutCtx& drop);

/// 1x1x1 projection to token_dim, flattened to [D'H'W', C_t].
TensorPtr tokenize(Tape& tape, const TensorPtr& features, const LinearWeights& projection);

/// Pre-norm block; `pos` is added to the input first.
TensorPtr transformer_block(Tape& tape, const TensorPtr& x, const TransformerBlock& block, const TensorPtr& pos,
                            std::size_t heads, const DropoutCtx& drop);

/// Runs `blocks` with the same sinusoidal table added before every block.
TensorPtr transformer_stack(Tape& tape, const TensorPtr& x, std::span<const TransformerBlock> blocks,
                            std::size_t heads, const DropoutCtx& drop);

TensorPtr calibrate(Tape& tape, const TensorPtr& x, const Calibration& c, double eps);

/// Mean of the available calibrated sequences after truncation to the
/// shortest one. Throws EmptyAvailableSet.
TensorPtr reference_average(Tape& tape, std::span<const TensorPtr> calibrated);

/// alpha * FFN(calibrate(MSA(ref, ref, ref))).
TensorPtr proxy_synthesize(Tape& tape, const TensorPtr& ref, const ProxyBranch& proxy, double alpha, double eps,
                           std::size_t heads, const DropoutCtx& drop);

/// Truncates to the shortest sequence and concatenates T1WI, T2WI, DWI.
TensorPtr fuse_tokens(Tape& tape, const std::array<TensorPtr, kNumModalities>& seqs);

/// LN -> token mean -> embed + dropout -> MLP -> logits [1, K].
TensorPtr classify(Tape& tape, const TensorPtr& fused, const ClassifierHead& head, const DropoutCtx& drop);

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  const ModalityBranch& branch(std::size_t m) const { return branches_.at(m); }
  const ProxyBranch& proxy(std::size_t m) const { return proxies_.at(m); }
  const std::vector<TransformerBlock>& correlated() const { return correlated_; }
  const ClassifierHead& head() const { return head_; }

  /// Logits [1, num_classes]. Missing modalities are never read; their slots
  /// are filled with synthesized proxies. Dropout follows `drop`.
  TensorPtr forward(Tape& tape, const CaseBundle& bundle, const DropoutCtx& drop = {}) const;

  /// Eval-mode logits without recording a graph.
  std::vector<double> logits(const CaseBundle& bundle) const;

  /// Copies parameter values (not gradients) from another model of the same
  /// configuration.
  void copy_values_from(const Model& other);

 private:
  ModelConfig cfg_;
  ParameterStore params_;
  std::array<ModalityBranch, kNumModalities> branches_;
  std::array<ProxyBranch, kNumModalities> proxies_;
  std::vector<TransformerBlock> correlated_;
  ClassifierHead head_;
};

/// [1, nz, ny, nx] view of one modality grid.
TensorPtr modality_input(const CaseBundle& bundle, std::size_t m);

}  // namespace fibro
