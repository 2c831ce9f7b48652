// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "fibro/training.hpp"

#include <unistd.h>

namespace fibro::testing {

CaseBundle random_bundle(Rng& rng, const Extents& extents, std::array<std::uint8_t, 3> mask,
                         std::optional<int> stage, const std::string& id) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  CaseBundle b;
  b.case_id = id;
  b.extents = extents;
  b.mask = mask;
  b.stage = stage;
  const std::size_t n = extents[0] * extents[1] * extents[2];
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    b.volumes[m].assign(n, 0.0f);
    if (mask[m])
      for (auto& v : b.volumes[m]) v = static_cast<float>(u(rng));
  }
  return b;
}

namespace {

double total_loss(const Model& model, std::span<const CaseBundle> bundles, std::span<const std::size_t> labels,
                  std::span<const std::size_t> which) {
  double loss = 0.0;
  for (std::size_t i : which) {
    Tape tape(false);
    const auto logits = model.forward(tape, bundles[i]);
    loss += softmax_cross_entropy(tape, logits, labels[i])->value[0];
  }
  return loss;
}

// Bundles whose loss can depend on a parameter, judged by its name.
std::vector<std::size_t> dependents(const std::string& name, std::span<const CaseBundle> bundles) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    bool uses = true;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const std::string mod = kModalityNames[m];
      if (name.starts_with("branch." + mod + ".")) uses = bundles[i].mask[m] != 0;
      if (name.starts_with("proxy." + mod + ".")) uses = bundles[i].mask[m] == 0;
    }
    if (uses) out.push_back(i);
  }
  return out;
}

// "branch.<M>.stage..." -> M, otherwise none.
std::optional<std::size_t> encoder_modality(const std::string& name) {
  for (std::size_t m = 0; m < kNumModalities; ++m)
    if (name.starts_with("branch." + std::string(kModalityNames[m]) + ".stage")) return m;
  return std::nullopt;
}

}  // namespace

namespace {

// Conv encoder replay. With `frozen` null the LeakyReLU signs are recorded
// into `signs`; otherwise the slopes come from `frozen`.
TensorPtr encoder_replay(const Model& model, const CaseBundle& bundle, std::size_t modality,
                         std::vector<std::uint8_t>* signs, const std::vector<std::uint8_t>* frozen) {
  Tape tape(false);
  TensorPtr h = modality_input(bundle, modality);
  const auto& stages = model.branch(modality).stages;
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const ConvSpec entry = s == 0 ? ConvSpec{1, 1, PadMode::zero} : ConvSpec{2, 1, PadMode::reflect};
    const TensorPtr e = conv3d(tape, h, stages[s].entry.weight, stages[s].entry.bias, entry);
    TensorPtr u = e;
    for (const auto& unit : stages[s].units) {
      const TensorPtr pre = instance_norm(tape, u);
      TensorPtr act;
      if (frozen) {
        auto slope = zeros_tensor(pre->shape);
        for (std::size_t i = 0; i < pre->size(); ++i) slope->value[i] = (*frozen).at(cursor++) ? 1.0 : 0.01;
        act = mul(tape, pre, slope);
      } else {
        for (double v : pre->value) signs->push_back(v > 0.0);
        act = leaky_relu(tape, pre);
      }
      u = conv3d(tape, act, unit.weight, unit.bias, {1, 1, PadMode::zero});
    }
    h = add(tape, e, u);
  }
  return h;
}

}  // namespace

std::vector<std::uint8_t> encoder_kink_pattern(const Model& model, const CaseBundle& bundle, std::size_t modality) {
  std::vector<std::uint8_t> signs;
  encoder_replay(model, bundle, modality, &signs, nullptr);
  return signs;
}

std::vector<double> frozen_logits(const Model& model, const CaseBundle& bundle,
                                  const std::array<std::vector<std::uint8_t>, 3>& patterns) {
  Tape tape(false);
  const auto& cfg = model.config();
  std::array<TensorPtr, kNumModalities> seqs;
  std::vector<TensorPtr> available;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (!bundle.mask[m]) continue;
    const auto& br = model.branch(m);
    TensorPtr t = tokenize(tape, encoder_replay(model, bundle, m, nullptr, &patterns[m]), br.projection);
    t = transformer_stack(tape, t, br.blocks, cfg.heads, {});
    seqs[m] = calibrate(tape, t, br.calibration, cfg.eps);
    available.push_back(seqs[m]);
  }
  if (available.size() < kNumModalities) {
    const TensorPtr ref = reference_average(tape, available);
    for (std::size_t m = 0; m < kNumModalities; ++m)
      if (!seqs[m]) seqs[m] = proxy_synthesize(tape, ref, model.proxy(m), cfg.alpha, cfg.eps, cfg.heads, {});
  }
  const TensorPtr fused = transformer_stack(tape, fuse_tokens(tape, seqs), model.correlated(), cfg.heads, {});
  return classify(tape, fused, model.head(), {})->value;
}

std::vector<GradCheck> gradcheck_model(Model& model, std::span<const CaseBundle> bundles,
                                       std::span<const std::size_t> labels, std::size_t per_tensor, double step,
                                       std::uint64_t seed, double floor) {
  model.parameters().zero_grad();
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    Tape tape;
    const auto logits = model.forward(tape, bundles[i]);
    tape.backward(softmax_cross_entropy(tape, logits, labels[i]));
  }
  // Base-point activation patterns; the replay must reproduce the model.
  std::vector<std::array<std::vector<std::uint8_t>, 3>> base(bundles.size());
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    for (std::size_t m = 0; m < kNumModalities; ++m)
      if (bundles[i].mask[m]) base[i][m] = encoder_kink_pattern(model, bundles[i], m);
    if (frozen_logits(model, bundles[i], base[i]) != model.logits(bundles[i]))
      throw std::logic_error("frozen replay disagrees with Model::forward");
  }
  Rng rng(seed);
  std::vector<GradCheck> out;
  for (const auto& [name, t] : model.parameters().entries()) {
    GradCheck g{name};
    std::vector<std::size_t> coords(t->size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_tensor);
    }
    const auto which = dependents(name, bundles);
    const auto modality = encoder_modality(name);
    for (std::size_t c : coords) {
      const double analytic = t->grad.empty() ? 0.0 : t->grad[c];
      const double saved = t->value[c];
      bool smooth = true;
      for (double dir : {1.0, -1.0}) {
        if (!modality || !smooth) break;
        t->value[c] = saved + dir * step;
        for (std::size_t j = 0; j < which.size() && smooth; ++j)
          smooth = encoder_kink_pattern(model, bundles[which[j]], *modality) == base[which[j]][*modality];
      }
      auto loss = [&] {
        if (smooth) return total_loss(model, bundles, labels, which);
        double sum = 0.0;
        for (std::size_t i : which) sum += cross_entropy(frozen_logits(model, bundles[i], base[i]), labels[i]);
        return sum;
      };
      g.kink_coords += !smooth;
      t->value[c] = saved + step;
      const double up = loss();
      t->value[c] = saved - step;
      const double down = loss();
      t->value[c] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double rel = std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
      if (rel >= g.max_rel) {
        g.max_rel = rel;
        g.worst_analytic = analytic;
        g.worst_numeric = numeric;
      }
      ++g.checked;
    }
    out.push_back(g);
  }
  return out;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("fibro_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fibro::testing
