#pragma once

// Frozen reference numbers from the published benchmark tables (Synapse
// multi-organ, LiTS2017, and the LiTS2017 ablation grid). These are
// report-only values for side-by-side display; they are never mixed into
// computed metrics.

#include <string>
#include <vector>

#include "cma/core/common.hpp"

namespace cma {

struct ReferenceEntry {
  const char* dataset;
  const char* model;
  const char* cls;
  double dice;
};

inline const std::vector<ReferenceEntry>& reference_table() {
  static const std::vector<ReferenceEntry> table = {
      // Synapse multi-organ, CMAformer row
      {"synapse", "CMAformer", "Average", 87.39},
      {"synapse", "CMAformer", "Aorta", 93.21},
      {"synapse", "CMAformer", "Gallbladder", 72.03},
      {"synapse", "CMAformer", "Kidney(Left)", 86.55},
      {"synapse", "CMAformer", "Kidney(Right)", 86.62},
      {"synapse", "CMAformer", "Liver", 97.78},
      {"synapse", "CMAformer", "Pancreas", 83.81},
      {"synapse", "CMAformer", "Spleen", 92.19},
      {"synapse", "CMAformer", "Stomach", 86.92},
      // LiTS2017 comparison table
      {"lits2017", "ResUnet++", "Average", 82.62},
      {"lits2017", "ResUnet++", "Liver", 85.83},
      {"lits2017", "ResUnet++", "Tumor", 79.41},
      {"lits2017", "ResT-V2-B", "Average", 90.91},
      {"lits2017", "ResT-V2-B", "Liver", 94.88},
      {"lits2017", "ResT-V2-B", "Tumor", 86.93},
      {"lits2017", "TransUNet", "Average", 90.65},
      {"lits2017", "TransUNet", "Liver", 94.56},
      {"lits2017", "TransUNet", "Tumor", 86.73},
      {"lits2017", "Swin UNETR", "Average", 94.41},
      {"lits2017", "Swin UNETR", "Liver", 97.10},
      {"lits2017", "Swin UNETR", "Tumor", 91.71},
      {"lits2017", "nnFormer", "Average", 93.10},
      {"lits2017", "nnFormer", "Liver", 96.01},
      {"lits2017", "nnFormer", "Tumor", 90.16},
      {"lits2017", "CMAformer-SSL", "Average", 95.27},
      {"lits2017", "CMAformer-SSL", "Liver", 96.32},
      {"lits2017", "CMAformer-SSL", "Tumor", 94.21},
      {"lits2017", "CMAformer", "Average", 95.62},
      {"lits2017", "CMAformer", "Liver", 97.89},
      {"lits2017", "CMAformer", "Tumor", 93.34},
      // LiTS2017 ablation grid (ViT block / cross attention / LDC loss)
      {"lits2017-ablation", "vit_only", "Average", 83.29},
      {"lits2017-ablation", "vit_only", "Liver", 85.64},
      {"lits2017-ablation", "vit_only", "Tumor", 80.93},
      {"lits2017-ablation", "vit_cross", "Average", 92.44},
      {"lits2017-ablation", "vit_cross", "Liver", 95.94},
      {"lits2017-ablation", "vit_cross", "Tumor", 88.94},
      {"lits2017-ablation", "ldc_only", "Average", 93.50},
      {"lits2017-ablation", "ldc_only", "Liver", 96.57},
      {"lits2017-ablation", "ldc_only", "Tumor", 90.43},
      {"lits2017-ablation", "all", "Average", 95.62},
      {"lits2017-ablation", "all", "Liver", 97.89},
      {"lits2017-ablation", "all", "Tumor", 94.21},
  };
  return table;
}

inline double reference_value(const std::string& dataset, const std::string& model, const std::string& cls) {
  for (const auto& e : reference_table())
    if (dataset == e.dataset && model == e.model && cls == e.cls) return e.dice;
  throw InputError("no reference entry for (" + dataset + ", " + model + ", " + cls + ")");
}

}  // namespace cma
