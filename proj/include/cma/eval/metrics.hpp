#pragma once

// Dice coefficients accumulated over a whole split, reported as percentages.

#include <cstdint>
#include <vector>

#include "cma/core/common.hpp"
#include "cma/core/tensor.hpp"

namespace cma::eval {

struct DiceAccumulator {
  explicit DiceAccumulator(int num_classes)
      : intersection(static_cast<size_t>(num_classes), 0),
        pred_size(static_cast<size_t>(num_classes), 0),
        true_size(static_cast<size_t>(num_classes), 0) {}

  void add(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth) {
    CMA_CHECK_INPUT(pred.size() == truth.size(), "prediction/label size mismatch");
    for (size_t i = 0; i < pred.size(); ++i) {
      pred_size[pred[i]]++;
      true_size[truth[i]]++;
      if (pred[i] == truth[i]) intersection[pred[i]]++;
    }
  }

  // 2|A n B| / (|A| + |B|) * 100; both-empty counts as a perfect match.
  real dice(int cls) const {
    const int64_t denom = pred_size[static_cast<size_t>(cls)] + true_size[static_cast<size_t>(cls)];
    if (denom == 0) return 100.0;
    return 200.0 * static_cast<real>(intersection[static_cast<size_t>(cls)]) / static_cast<real>(denom);
  }

  std::vector<int64_t> intersection, pred_size, true_size;
};

struct DiceReport {
  std::vector<real> per_class;  // foreground classes 1..C-1
  real average = 0.0;
};

inline DiceReport dice_report(const DiceAccumulator& acc) {
  DiceReport rep;
  const int num_classes = static_cast<int>(acc.pred_size.size());
  real sum = 0.0;
  for (int c = 1; c < num_classes; ++c) {
    rep.per_class.push_back(acc.dice(c));
    sum += rep.per_class.back();
  }
  rep.average = rep.per_class.empty() ? 0.0 : sum / static_cast<real>(rep.per_class.size());
  return rep;
}

// Argmax over the class dim of [B,C,H,W] logits or probabilities.
inline std::vector<std::vector<uint8_t>> argmax_labels(const Tensor& scores) {
  CMA_CHECK_SHAPE(scores.ndim() == 4, "argmax_labels expects [B,C,H,W]");
  const int64_t b = scores.dim(0), c = scores.dim(1), hw = scores.dim(2) * scores.dim(3);
  std::vector<std::vector<uint8_t>> out(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    auto& lab = out[static_cast<size_t>(i)];
    lab.resize(static_cast<size_t>(hw));
    for (int64_t j = 0; j < hw; ++j) {
      int best = 0;
      real best_v = scores.data()[(i * c) * hw + j];
      for (int64_t ch = 1; ch < c; ++ch) {
        const real v = scores.data()[(i * c + ch) * hw + j];
        if (v > best_v) {
          best_v = v;
          best = static_cast<int>(ch);
        }
      }
      lab[static_cast<size_t>(j)] = static_cast<uint8_t>(best);
    }
  }
  return out;
}

}  // namespace cma::eval
