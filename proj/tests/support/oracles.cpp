// SPDX-License-Identifier: Apache-2.0
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fibro/synthetic.hpp"

namespace fibro::oracle {

Mat from_tensor(const Tensor& t) {
  if (t.shape.size() != 2) throw std::invalid_argument("from_tensor: not a matrix");
  Mat m(t.shape[0], t.shape[1]);
  m.v = t.value;
  return m;
}

std::vector<double> values(const TensorPtr& t) { return t ? t->value : std::vector<double>{}; }

Mat random_mat(Rng& rng, std::size_t r, std::size_t c, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  Mat m(r, c);
  for (auto& x : m.v) x = nd(rng);
  return m;
}

namespace {

long padded(long i, long n, bool reflect) {
  if (i >= 0 && i < n) return i;
  if (!reflect) return -1;
  return i < 0 ? -i : 2 * (n - 1) - i;
}

Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

Mat plus(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

Mat truncate(const Mat& a, std::size_t rows) {
  Mat out(rows, a.cols);
  std::copy_n(a.v.begin(), rows * a.cols, out.v.begin());
  return out;
}

}  // namespace

std::vector<double> conv3d(const std::vector<double>& x, std::size_t ci, std::size_t d, std::size_t h, std::size_t w,
                           const std::vector<double>& weight, std::size_t co, const std::vector<double>& bias,
                           std::size_t stride, bool reflect, std::array<std::size_t, 3>& out_dhw) {
  const std::size_t od = (d - 1) / stride + 1, oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;
  out_dhw = {od, oh, ow};
  std::vector<double> out(co * od * oh * ow, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (long kz = 0; kz < 3; ++kz)
              for (long ky = 0; ky < 3; ++ky)
                for (long kx = 0; kx < 3; ++kx) {
                  const long iz = padded(static_cast<long>(z * stride) + kz - 1, static_cast<long>(d), reflect);
                  const long iy = padded(static_cast<long>(y * stride) + ky - 1, static_cast<long>(h), reflect);
                  const long ix = padded(static_cast<long>(xx * stride) + kx - 1, static_cast<long>(w), reflect);
                  if (iz < 0 || iy < 0 || ix < 0) continue;
                  const double wv = weight[(((o * ci + c) * 3 + kz) * 3 + ky) * 3 + kx];
                  s += wv * x[((c * d + iz) * h + iy) * w + ix];
                }
          out[((o * od + z) * oh + y) * ow + xx] = s;
        }
  return out;
}

double gelu(double x) {
  const double k = std::sqrt(2.0 / std::acos(-1.0));
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * std::pow(x, 3))));
}

Mat layer_norm(const Mat& x, const std::vector<double>& gain, const std::vector<double>& bias, double eps) {
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) var += std::pow(x.at(i, j) - mean, 2);
    var /= static_cast<double>(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j)
      out.at(i, j) = (x.at(i, j) - mean) / std::sqrt(var + eps) * gain[j] + bias[j];
  }
  return out;
}

Mat positional(std::size_t n, std::size_t c) {
  Mat p(n, c);
  for (std::size_t pos = 0; pos < n; ++pos)
    for (std::size_t i = 0; i < c; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i - i % 2) / static_cast<double>(c));
      p.at(pos, i) = i % 2 == 0 ? std::sin(static_cast<double>(pos) * freq) : std::cos(static_cast<double>(pos) * freq);
    }
  return p;
}

Attn attn_of(const AttentionWeights& w) {
  return {from_tensor(*w.wq), from_tensor(*w.wk), from_tensor(*w.wv), from_tensor(*w.wo)};
}

Ffn ffn_of(const FfnWeights& w) {
  return {from_tensor(*w.fc1.weight), from_tensor(*w.fc2.weight), values(w.fc1.bias), values(w.fc2.bias)};
}

Block block_of(const TransformerBlock& b) {
  return {values(b.norm_attn.gain), values(b.norm_attn.bias), attn_of(b.attn),
          values(b.norm_ffn.gain),  values(b.norm_ffn.bias),  ffn_of(b.ffn)};
}

Calib calib_of(const Calibration& c) { return {values(c.mu), values(c.sigma), values(c.weight)}; }

Mat attention(const Mat& q_in, const Mat& k_in, const Mat& v_in, const Attn& w, std::size_t heads) {
  const Mat q = matmul(q_in, w.wq), k = matmul(k_in, w.wk), v = matmul(v_in, w.wv);
  const std::size_t dk = q.cols / heads;
  Mat concat(q.rows, q.cols);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const std::size_t off = hd * dk;
    for (std::size_t i = 0; i < q.rows; ++i) {
      std::vector<double> score(k.rows);
      for (std::size_t j = 0; j < k.rows; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < dk; ++t) s += q.at(i, off + t) * k.at(j, off + t);
        score[j] = s / std::sqrt(static_cast<double>(dk));
      }
      const double top = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (auto& s : score) z += (s = std::exp(s - top));
      for (std::size_t t = 0; t < dk; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k.rows; ++j) acc += score[j] / z * v.at(j, off + t);
        concat.at(i, off + t) = acc;
      }
    }
  }
  return matmul(concat, w.wo);
}

Mat feed_forward(const Mat& x, const Ffn& f) {
  Mat h = matmul(x, f.w1);
  for (std::size_t i = 0; i < h.rows; ++i)
    for (std::size_t j = 0; j < h.cols; ++j) h.at(i, j) = gelu(h.at(i, j) + (f.b1.empty() ? 0.0 : f.b1[j]));
  Mat out = matmul(h, f.w2);
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out.at(i, j) += f.b2.empty() ? 0.0 : f.b2[j];
  return out;
}

Mat calibrate(const Mat& x, const Calib& c, double eps) {
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j)
      out.at(i, j) = c.weight[j] * (x.at(i, j) - c.mu[j]) / (std::fabs(c.sigma[j]) + eps);
  return out;
}

Mat block(const Mat& x, const Block& b, const Mat& pos, std::size_t heads) {
  const Mat xt = plus(x, pos);
  const Mat n1 = layer_norm(xt, b.g1, b.b1);
  const Mat z = plus(attention(n1, n1, n1, b.attn, heads), xt);
  return plus(feed_forward(layer_norm(z, b.g2, b.b2), b.ffn), z);
}

Mat stack(const Mat& x, std::span<const Block> blocks, std::size_t heads) {
  const Mat pos = positional(x.rows, x.cols);
  Mat h = x;
  for (const auto& b : blocks) h = block(h, b, pos, heads);
  return h;
}

Mat proxy(const Mat& ref, const Attn& attn, const Calib& calib, const Ffn& ffn, double alpha, double eps,
          std::size_t heads) {
  Mat out = feed_forward(calibrate(attention(ref, ref, ref, attn, heads), calib, eps), ffn);
  for (auto& v : out.v) v *= alpha;
  return out;
}

Mat correlated(const std::array<Mat, 3>& seqs, std::span<const Block> blocks, std::size_t heads) {
  const std::size_t n = std::min({seqs[0].rows, seqs[1].rows, seqs[2].rows});
  Mat fused(3 * n, seqs[0].cols);
  for (std::size_t m = 0; m < 3; ++m) {
    const Mat t = truncate(seqs[m], n);
    std::copy(t.v.begin(), t.v.end(), fused.v.begin() + static_cast<long>(m * n * fused.cols));
  }
  return stack(fused, blocks, heads);
}

double auroc_pairs(std::span<const double> scores, std::span<const std::size_t> labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  return wins / pairs;
}

int threshold_stage(const Volume& vol, std::size_t modality, double contrast) {
  const auto& e = vol.extents;
  const double r = static_cast<double>(std::min({e[0], e[1], e[2]})) / 4.0;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t z = 0; z < e[2]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y)
      for (std::size_t x = 0; x < e[0]; ++x) {
        const double dx = static_cast<double>(x) - (static_cast<double>(e[0]) - 1.0) / 2.0;
        const double dy = static_cast<double>(y) - (static_cast<double>(e[1]) - 1.0) / 2.0;
        const double dz = static_cast<double>(z) - (static_cast<double>(e[2]) - 1.0) / 2.0;
        if (dx * dx + dy * dy + dz * dz > r * r) continue;
        sum += vol.at(x, y, z);
        ++n;
      }
  const double mean = sum / static_cast<double>(n);
  const double slope = modality == 0 ? contrast : modality == 1 ? contrast / 2.0 : -contrast / 2.0;
  int best = 1;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int s = 1; s <= 4; ++s) {
    const double gap = std::fabs(mean - (0.3 + s * slope));
    if (gap < best_gap) {
      best_gap = gap;
      best = s;
    }
  }
  return best;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace fibro::oracle
