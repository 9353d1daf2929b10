// CLI harness: data synthesis, training, evaluation, and ablation sweeps.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "cma/config.hpp"
#include "cma/data/synth.hpp"
#include "cma/io/exports.hpp"
#include "cma/reference.hpp"
#include "cma/train/experiment.hpp"

namespace fs = std::filesystem;
using cma::ExperimentConfig;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct SynthArgs {
  int64_t n = 0;
  int64_t size = 64;
  uint64_t seed = 1;
  double noise = 0.10;
  double labeled_fraction = 1.0;
  std::vector<double> ratios = {0.8, 0.15, 0.05};
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  cma::data::GenOptions gen;
  gen.noise_std = a.noise;
  cma::data::Dataset ds = cma::data::generate_dataset(a.n, a.size, a.size, a.seed, gen);
  if (a.ratios.size() != 3) throw cma::InputError("--ratios needs exactly three values");
  cma::data::split_dataset(ds, a.ratios[0], a.ratios[1], a.ratios[2]);
  cma::data::mark_labeled_fraction(ds, a.labeled_fraction, a.seed);
  const std::string out = a.out.empty()
                              ? "dataset_n" + std::to_string(a.n) + "_seed" + std::to_string(a.seed)
                              : a.out;
  cma::data::save_dataset(out, ds);
  std::cout << "wrote " << ds.samples.size() << " samples to " << out << "\n";
  std::cout << "content hash: " << ds.manifest.content_hash << "\n";
  return 0;
}

void print_report(const char* tag, const cma::eval::DiceReport& rep, int64_t num_classes) {
  const auto names = cma::train::foreground_class_names(num_classes);
  std::printf("%s:", tag);
  for (size_t i = 0; i < rep.per_class.size(); ++i) std::printf(" %s %.2f", names[i].c_str(), rep.per_class[i]);
  std::printf(" average %.2f\n", rep.average);
}

void print_reference_reprint() {
  std::printf("reference (paper, not reproduced): LiTS2017 CMAformer avg %.2f liver %.2f tumor %.2f; "
              "CMAformer-SSL avg %.2f liver %.2f tumor %.2f\n",
              cma::reference_value("lits2017", "CMAformer", "Average"),
              cma::reference_value("lits2017", "CMAformer", "Liver"),
              cma::reference_value("lits2017", "CMAformer", "Tumor"),
              cma::reference_value("lits2017", "CMAformer-SSL", "Average"),
              cma::reference_value("lits2017", "CMAformer-SSL", "Liver"),
              cma::reference_value("lits2017", "CMAformer-SSL", "Tumor"));
}

struct TrainArgs {
  std::string data, out, config_path;
  uint64_t seed = 0;
  int64_t epochs = 0;
  double labeled_fraction = -1.0;
  int64_t batch = 0;
  bool no_vit = false, no_cross = false, no_ldc = false;
  bool quiet = false;
  bool seed_set = false, epochs_set = false, lf_set = false, batch_set = false;
};

ExperimentConfig resolve_config(const TrainArgs& a) {
  ExperimentConfig cfg;
  if (!a.config_path.empty()) cfg = cma::load_config_file(a.config_path);
  if (!a.data.empty()) cfg.data_path = a.data;
  if (a.seed_set) cfg.seed = a.seed;
  if (a.epochs_set) cfg.trainer.epochs = a.epochs;
  if (a.lf_set) cfg.labeled_fraction = a.labeled_fraction;
  if (a.batch_set) cfg.trainer.batch_size = a.batch;
  if (a.no_vit) cfg.ablate.vit_block = false;
  if (a.no_cross) cfg.ablate.cross_attention = false;
  if (a.no_ldc) cfg.ablate.ldc_loss = false;
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = resolve_config(a);
  if (cfg.data_path.empty()) throw cma::DataError("no dataset: pass --data or set data.path in the config");
  cma::data::Dataset ds = cma::data::load_dataset(cfg.data_path);
  if (!a.quiet && !cfg.ablate.ldc_loss)
    std::printf("ablate: ldc_loss off -> gamma_con forced to 0\n");
  cma::train::RunHooks hooks;
  if (!a.quiet) {
    hooks.on_eval = [&](const cma::train::EvalPoint& pt) {
      std::printf("[epoch %lld] %s dice", static_cast<long long>(pt.epoch), pt.split.c_str());
      for (cma::real d : pt.report.per_class) std::printf(" %.2f", d);
      std::printf(" (avg %.2f)\n", pt.report.average);
    };
  }
  cma::train::RunResult res = cma::train::run_experiment(cfg, ds, a.out, hooks);
  print_report("final train", res.final_train, cfg.model.num_classes);
  if (res.final_val) print_report("final val", *res.final_val, cfg.model.num_classes);
  std::printf("optimizer: lr %g momentum %g weight_decay %g\n", cfg.trainer.sgd.lr, cfg.trainer.sgd.momentum,
              cfg.trainer.sgd.weight_decay);
  std::cout << "outputs in " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, split = "val", out;
  int64_t overlays = 0;
  bool stack3d = false;
};

int cmd_eval(const EvalArgs& a) {
  cma::io::Checkpoint ckpt = cma::io::load_checkpoint(a.checkpoint);
  auto [model, cfg] = cma::train::model_from_checkpoint(ckpt);
  const std::string data_path = a.data.empty() ? cfg.data_path : a.data;
  if (data_path.empty()) throw cma::DataError("no dataset: pass --data");
  cma::data::Dataset ds = cma::data::load_dataset(data_path);
  const cma::data::Split split = cma::data::split_from_name(a.split);

  const auto report = cma::train::evaluate(*model, ds, split);
  print_report(("eval " + a.split).c_str(), report, cfg.model.num_classes);
  print_reference_reprint();

  if (!a.out.empty()) {
    fs::create_directories(a.out);
    cma::train::detail::write_eval_csv((fs::path(a.out) / ("eval_" + a.split + ".csv")).string(), report,
                                       cma::train::foreground_class_names(cfg.model.num_classes));
    const auto idx = ds.indices_of(split);
    // predictions for artifacts
    if (a.overlays > 0 || a.stack3d) {
      cma::NoGradGuard ng;
      const int64_t h = ds.manifest.height, w = ds.manifest.width;
      std::vector<uint8_t> volume;
      if (a.stack3d) volume.reserve(idx.size() * static_cast<size_t>(h * w));
      int64_t overlays_left = a.overlays;
      for (size_t start = 0; start < idx.size(); start += 8) {
        std::vector<size_t> chunk(idx.begin() + static_cast<int64_t>(start),
                                  idx.begin() + static_cast<int64_t>(std::min(idx.size(), start + 8)));
        cma::Tensor logits = model->forward(ds.images_for(chunk));
        const auto preds = cma::eval::argmax_labels(logits);
        for (size_t i = 0; i < chunk.size(); ++i) {
          const auto& sample = ds.samples[chunk[i]];
          if (overlays_left > 0) {
            cma::io::write_overlay_png((fs::path(a.out) / ("overlay_" + sample.id + ".png")).string(), h, w,
                                       sample.image, sample.label, preds[i]);
            --overlays_left;
          }
          if (a.stack3d) volume.insert(volume.end(), preds[i].begin(), preds[i].end());
        }
      }
      if (a.stack3d)
        cma::io::write_npy_u8((fs::path(a.out) / ("stack_" + a.split + ".npy")).string(),
                              static_cast<int64_t>(idx.size()), h, w, volume);
    }
    std::cout << "outputs in " << a.out << "\n";
  }
  return 0;
}

struct AblateArgs {
  std::string data, out, config_path;
  int64_t seeds = 3;
  int64_t epochs = 0;
  bool epochs_set = false;
  uint64_t base_seed = 1;
  bool quiet = false;
};

struct ComboDef {
  const char* label;
  bool vit, cross, ldc;
};

int cmd_ablate(const AblateArgs& a) {
  ExperimentConfig base;
  if (!a.config_path.empty()) base = cma::load_config_file(a.config_path);
  if (!a.data.empty()) base.data_path = a.data;
  if (base.data_path.empty()) throw cma::DataError("no dataset: pass --data");
  if (a.epochs_set) base.trainer.epochs = a.epochs;
  cma::data::Dataset ds = cma::data::load_dataset(base.data_path);

  // The four rows of the published ablation grid.
  const std::vector<ComboDef> combos = {
      {"vit_only", true, false, false},
      {"vit_cross", true, true, false},
      {"ldc_only", false, false, true},
      {"all", true, true, true},
  };

  fs::create_directories(a.out);
  std::ofstream csv(fs::path(a.out) / "ablation_report.csv");
  csv << "combo,vit_block,cross_attention,ldc_loss,seeds,"
         "avg_mean,avg_std,organ_mean,organ_std,tumor_mean,tumor_std,"
         "paper_avg,paper_liver,paper_tumor,paper_note\n";

  for (const auto& combo : combos) {
    std::vector<double> avg, organ, tumor;
    for (int64_t k = 0; k < a.seeds; ++k) {
      ExperimentConfig cfg = base;
      cfg.ablate = {combo.vit, combo.cross, combo.ldc};
      cfg.seed = a.base_seed + static_cast<uint64_t>(k);
      const std::string run_dir =
          (fs::path(a.out) / (std::string(combo.label) + "_seed" + std::to_string(cfg.seed))).string();
      if (!a.quiet)
        std::printf("ablate %s seed %llu ...\n", combo.label, static_cast<unsigned long long>(cfg.seed));
      cma::train::RunResult res = cma::train::run_experiment(cfg, ds, run_dir);
      const auto& rep = res.final_val ? *res.final_val : res.final_train;
      organ.push_back(rep.per_class[0]);
      tumor.push_back(rep.per_class[1]);
      avg.push_back(rep.average);
    }
    auto mean_std = [](const std::vector<double>& v) {
      double m = 0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double s = 0;
      for (double x : v) s += (x - m) * (x - m);
      s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
      return std::pair<double, double>{m, s};
    };
    const auto [am, as] = mean_std(avg);
    const auto [om, os] = mean_std(organ);
    const auto [tm, ts] = mean_std(tumor);
    char line[512];
    std::snprintf(line, sizeof(line), "%s,%d,%d,%d,%lld,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.2f,%.2f,%.2f,%s",
                  combo.label, combo.vit ? 1 : 0, combo.cross ? 1 : 0, combo.ldc ? 1 : 0,
                  static_cast<long long>(a.seeds), am, as, om, os, tm, ts,
                  cma::reference_value("lits2017-ablation", combo.label, "Average"),
                  cma::reference_value("lits2017-ablation", combo.label, "Liver"),
                  cma::reference_value("lits2017-ablation", combo.label, "Tumor"),
                  "paper; not reproduced");
    csv << line << "\n";
    if (!a.quiet) std::printf("  %s: avg %.2f organ %.2f tumor %.2f\n", combo.label, am, om, tm);
  }
  std::cout << "report: " << (fs::path(a.out) / "ablation_report.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CMAformer semi-supervised segmentation experiments"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
  synth->add_option("--n", sa.n, "number of samples")->required();
  synth->add_option("--size", sa.size, "image side length");
  synth->add_option("--seed", sa.seed, "generator seed");
  synth->add_option("--noise", sa.noise, "gaussian intensity noise stddev");
  synth->add_option("--labeled-fraction", sa.labeled_fraction, "fraction of train samples kept labeled");
  synth->add_option("--ratios", sa.ratios, "train/val/test ratios")->expected(3);
  synth->add_option("--out", sa.out, "output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  train->add_option("--data", ta.data, "dataset directory");
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--config", ta.config_path, "experiment config JSON");
  auto* topt_seed = train->add_option("--seed", ta.seed, "experiment seed");
  auto* topt_epochs = train->add_option("--epochs", ta.epochs, "training epochs");
  auto* topt_lf = train->add_option("--labeled-fraction", ta.labeled_fraction, "labeled fraction of train");
  auto* topt_batch = train->add_option("--batch", ta.batch, "batch size");
  train->add_flag("--ablate-no-vit", ta.no_vit, "disable transformer blocks");
  train->add_flag("--ablate-no-cross", ta.no_cross, "disable decoder cross-attention");
  train->add_flag("--ablate-no-ldc", ta.no_ldc, "disable the LDC consistency term");
  train->add_flag("--quiet", ta.quiet, "suppress progress output");

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  evalc->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  evalc->add_option("--data", ea.data, "dataset directory (defaults to the checkpoint's)");
  evalc->add_option("--split", ea.split, "split to evaluate (train/val/test)");
  evalc->add_option("--out", ea.out, "output directory for CSV/overlays");
  evalc->add_option("--overlays", ea.overlays, "write up to N overlay PNGs");
  evalc->add_flag("--stack3d", ea.stack3d, "write predictions stacked into a .npy volume");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "run the 4-way component ablation");
  ablate->add_option("--data", aa.data, "dataset directory");
  ablate->add_option("--out", aa.out, "output directory")->required();
  ablate->add_option("--config", aa.config_path, "experiment config JSON");
  ablate->add_option("--seeds", aa.seeds, "number of seeds per combination");
  auto* aopt_epochs = ablate->add_option("--epochs", aa.epochs, "training epochs");
  ablate->add_option("--base-seed", aa.base_seed, "first seed");
  ablate->add_flag("--quiet", aa.quiet, "suppress progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  ta.seed_set = topt_seed->count() > 0;
  ta.epochs_set = topt_epochs->count() > 0;
  ta.lf_set = topt_lf->count() > 0;
  ta.batch_set = topt_batch->count() > 0;
  aa.epochs_set = aopt_epochs->count() > 0;

  try {
    if (synth->parsed()) return cmd_synth(sa);
    if (train->parsed()) return cmd_train(ta);
    if (evalc->parsed()) return cmd_eval(ea);
    if (ablate->parsed()) return cmd_ablate(aa);
  } catch (const cma::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const cma::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const cma::InputError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const cma::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
