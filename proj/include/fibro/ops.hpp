// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fibro/random.hpp"
#include "fibro/tensor.hpp"

// Differentiable kernels. Every op computes its forward value immediately and,
// when the tape tracks one of its inputs, records the matching backward step.
// Matrices are [rows, cols] row-major; feature maps are [C, D, H, W].

namespace fibro {

enum class PadMode { zero, reflect };

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
  PadMode mode = PadMode::zero;
};

/// Stride 1 keeps the extent; stride 2 yields ceil(n/2). Both with k=3, pad=1.
Shape conv3d_output_shape(const Shape& input, const Shape& kernel, const ConvSpec& spec);

/// Cross-correlation of x [Ci,D,H,W] with w [Co,Ci,k,k,k] plus optional bias
/// [Co]. Reflect padding mirrors without repeating the edge voxel.
TensorPtr conv3d(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias, const ConvSpec& spec);

/// Per-channel normalization over all trailing axes, no affine.
TensorPtr instance_norm(Tape& tape, const TensorPtr& x, double eps = 1e-5);

TensorPtr leaky_relu(Tape& tape, const TensorPtr& x, double slope = 0.01);

struct DropoutCtx {
  double rate = 0.0;
  bool training = false;
  Rng* rng = nullptr;

  bool active() const { return training && rate > 0.0 && rng != nullptr; }
};

/// Inverted dropout; the identity unless `ctx.active()`.
TensorPtr dropout(Tape& tape, const TensorPtr& x, const DropoutCtx& ctx);

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape& tape, const TensorPtr& x, double factor);
TensorPtr sum(Tape& tape, const TensorPtr& x);

/// Elementwise mean of equally shaped tensors.
TensorPtr mean_of(Tape& tape, std::span<const TensorPtr> xs);

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);

struct LinearWeights {
  TensorPtr weight;  // [in, out]
  TensorPtr bias;    // [out] or null
};

/// x [N,in] * W + b.
TensorPtr linear(Tape& tape, const TensorPtr& x, const LinearWeights& lin);

/// Row-wise normalization over channels then gain/bias, variance floor eps.
TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps = 1e-5);

/// tanh approximation.
double gelu_value(double x);
TensorPtr gelu(Tape& tape, const TensorPtr& x);

/// Numerically stable softmax of one row.
std::vector<double> softmax(std::span<const double> logits);

/// Row-wise softmax of a matrix.
TensorPtr softmax_rows(Tape& tape, const TensorPtr& x);

/// softmax(Q_i K_i^T / sqrt(d_k)) V_i for each of `heads` column blocks,
/// concatenated back to [N, C].
TensorPtr attention_heads(Tape& tape, const TensorPtr& q, const TensorPtr& k, const TensorPtr& v, std::size_t heads);

struct AttentionWeights {
  TensorPtr wq, wk, wv, wo;  // each [C, C], no biases
};

TensorPtr multi_head_attention(Tape& tape, const TensorPtr& q_in, const TensorPtr& k_in, const TensorPtr& v_in,
                               const AttentionWeights& w, std::size_t heads);

struct FfnWeights {
  LinearWeights fc1;  // [C, C_h]
  LinearWeights fc2;  // [C_h, C]
};

/// fc1 -> GELU -> dropout -> fc2.
TensorPtr ffn(Tape& tape, const TensorPtr& x, const FfnWeights& w, const DropoutCtx& drop);

/// Fixed sinusoidal table: P[n,2j] = sin(n / 10000^(2j/C)), P[n,2j+1] = cos(...).
TensorPtr positional_encoding(std::size_t length, std::size_t channels);

/// (x - mu) / (|sigma| + eps) * weight, per channel of x [N, C].
TensorPtr delta_calibrate(Tape& tape, const TensorPtr& x, const TensorPtr& mu, const TensorPtr& sigma,
                          const TensorPtr& weight, double eps);

/// First `rows` rows of a matrix.
TensorPtr slice_rows(Tape& tape, const TensorPtr& x, std::size_t rows);
TensorPtr concat_rows(Tape& tape, std::span<const TensorPtr> xs);

/// Mean over rows: [N, C] -> [1, C].
TensorPtr mean_rows(Tape& tape, const TensorPtr& x);

/// [C, D, H, W] -> [D*H*W, C], voxels in memory (W-fastest) order.
TensorPtr channels_to_tokens(Tape& tape, const TensorPtr& x);

/// -log softmax(logits)[label] as a 1-element tensor.
TensorPtr softmax_cross_entropy(Tape& tape, const TensorPtr& logits, std::size_t label);

}  // namespace fibro
