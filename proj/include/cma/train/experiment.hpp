#pragma once

// End-to-end experiment runner shared by the CLI and the acceptance suite:
// builds the trainer from an ExperimentConfig, drives the epoch loop with
// 1:1 labeled/unlabeled batches, and emits metrics (JSON lines + CSV),
// checkpoints, plots, and the resolved config echo.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cma/config.hpp"
#include "cma/data/synth.hpp"
#include "cma/io/checkpoint.hpp"
#include "cma/io/svg_plot.hpp"
#include "cma/train/trainer.hpp"

namespace cma::train {

struct EvalPoint {
  int64_t epoch = 0;
  int64_t step = 0;
  std::string split;
  eval::DiceReport report;
};

struct RunResult {
  std::vector<StepMetrics> steps;
  std::vector<EvalPoint> evals;
  eval::DiceReport final_train;
  std::optional<eval::DiceReport> final_val;
  std::string out_dir;
};

struct RunHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const EvalPoint&)> on_eval;
};

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_f6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// Field order is fixed; wall_ms goes last so the deterministic prefix of a
// record is easy to compare across runs.
inline std::string metrics_line(const StepMetrics& m) {
  std::string s = "{\"step\":" + std::to_string(m.step);
  s += ",\"lr\":" + fmt_g17(m.lr);
  s += ",\"loss_total\":" + fmt_g17(m.total);
  s += ",\"loss_sup\":" + fmt_g17(m.sup);
  s += ",\"loss_contrast\":" + fmt_g17(m.contrast);
  s += ",\"loss_con\":" + fmt_g17(m.con);
  s += ",\"gamma\":" + fmt_g17(m.gamma_eff);
  s += ",\"wall_ms\":" + fmt_g17(m.wall_ms) + "}";
  return s;
}

// The same record without its volatile timing field.
inline std::string strip_wall_ms(const std::string& line) {
  const auto pos = line.rfind(",\"wall_ms\":");
  return pos == std::string::npos ? line : line.substr(0, pos) + "}";
}

inline void write_eval_csv(const std::string& path, const eval::DiceReport& rep,
                           const std::vector<std::string>& class_names) {
  std::ofstream out(path);
  CMA_CHECK(out.good(), IoError, "cannot write " << path);
  out << "class,dice\n";
  for (size_t i = 0; i < rep.per_class.size(); ++i)
    out << class_names[i] << "," << fmt_f6(rep.per_class[i]) << "\n";
  out << "average," << fmt_f6(rep.average) << "\n";
}

}  // namespace detail

inline std::vector<std::string> foreground_class_names(int64_t num_classes) {
  std::vector<std::string> names;
  if (num_classes == 3) return {"organ", "tumor"};
  for (int64_t c = 1; c < num_classes; ++c) names.push_back("class" + std::to_string(c));
  return names;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const data::Dataset& dataset,
                                const std::string& out_dir, const RunHooks& hooks = {}) {
  namespace fs = std::filesystem;
  CMA_CHECK(dataset.manifest.height == cfg.model.image_size && dataset.manifest.width == cfg.model.image_size,
            DataError, "dataset is " << dataset.manifest.height << "px but model expects "
                                     << cfg.model.image_size << "px");

  data::Dataset ds = dataset;  // local copy; labeled flags are re-marked below
  data::mark_labeled_fraction(ds, cfg.labeled_fraction, cfg.seed);

  const train::TrainerOptions topt = cfg.resolved_trainer();
  Trainer trainer(cfg.resolved_model(), topt, cfg.seed);

  const auto labeled = ds.train_indices(true);
  const auto unlabeled = ds.train_indices(false);
  CMA_CHECK_INPUT(!labeled.empty(), "training error: no labeled training samples");
  const bool use_unlabeled =
      !unlabeled.empty() && (topt.weights.beta_contrast > 0.0 || topt.weights.gamma_con > 0.0);

  const int64_t bs = topt.batch_size;
  const int64_t steps_per_epoch = (static_cast<int64_t>(labeled.size()) + bs - 1) / bs;
  trainer.set_max_steps(topt.epochs * steps_per_epoch);

  Rng order_lab(Rng::derive(cfg.seed, 0x0bde1));
  Rng order_unlab(Rng::derive(cfg.seed, 0x0bde2));
  std::vector<size_t> unlab_queue;
  auto next_unlabeled = [&]() {
    std::vector<size_t> chunk;
    while (static_cast<int64_t>(chunk.size()) < bs) {
      if (unlab_queue.empty()) {
        unlab_queue = unlabeled;
        order_unlab.shuffle(unlab_queue);
      }
      chunk.push_back(unlab_queue.back());
      unlab_queue.pop_back();
    }
    return chunk;
  };

  RunResult result;
  result.out_dir = out_dir;
  std::ofstream metrics_out;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream cfg_out(fs::path(out_dir) / "config.json");
    cfg_out << cfg.to_json().dump(2) << "\n";
    metrics_out.open(fs::path(out_dir) / "metrics.jsonl");
    CMA_CHECK(metrics_out.good(), IoError, "cannot write metrics.jsonl under " << out_dir);
  }

  const auto val_indices = ds.indices_of(data::Split::Val);
  const auto class_names = foreground_class_names(cfg.model.num_classes);

  auto run_eval = [&](int64_t epoch, data::Split split, const char* name) {
    EvalPoint pt;
    pt.epoch = epoch;
    pt.step = trainer.step_count();
    pt.split = name;
    pt.report = evaluate(trainer.student(), ds, split);
    result.evals.push_back(pt);
    if (hooks.on_eval) hooks.on_eval(pt);
    return pt.report;
  };

  std::vector<size_t> lab_order = labeled;
  for (int64_t epoch = 0; epoch < topt.epochs; ++epoch) {
    order_lab.shuffle(lab_order);
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const size_t begin = static_cast<size_t>(s * bs);
      const size_t end = std::min(lab_order.size(), begin + static_cast<size_t>(bs));
      std::vector<size_t> lab_chunk(lab_order.begin() + static_cast<int64_t>(begin),
                                    lab_order.begin() + static_cast<int64_t>(end));
      Batch lab{ds.images_for(lab_chunk), ds.labels_for(lab_chunk)};
      Batch unlab;
      if (use_unlabeled) {
        auto chunk = next_unlabeled();
        unlab.images = ds.images_for(chunk);
      }
      StepMetrics m = trainer.step(lab, unlab);
      if (metrics_out.is_open()) metrics_out << detail::metrics_line(m) << "\n";
      if (hooks.on_step) hooks.on_step(m);
      result.steps.push_back(m);
    }
    if (!val_indices.empty() && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 &&
        epoch + 1 < topt.epochs)
      run_eval(epoch + 1, data::Split::Val, "val");
  }

  result.final_train = run_eval(topt.epochs, data::Split::Train, "train");
  if (!val_indices.empty()) result.final_val = run_eval(topt.epochs, data::Split::Val, "val");

  if (!out_dir.empty()) {
    metrics_out.close();
    // eval CSVs + history
    detail::write_eval_csv((fs::path(out_dir) / "eval_train.csv").string(), result.final_train, class_names);
    if (result.final_val)
      detail::write_eval_csv((fs::path(out_dir) / "eval_val.csv").string(), *result.final_val, class_names);
    std::ofstream hist(fs::path(out_dir) / "dice_history.csv");
    hist << "epoch,step,split";
    for (const auto& n : class_names) hist << "," << n;
    hist << ",average\n";
    for (const auto& pt : result.evals) {
      hist << pt.epoch << "," << pt.step << "," << pt.split;
      for (real d : pt.report.per_class) hist << "," << detail::fmt_f6(d);
      hist << "," << detail::fmt_f6(pt.report.average) << "\n";
    }
    hist.close();

    // checkpoint: student, teacher, heads, optimizer momentum
    nlohmann::json meta;
    meta["config"] = cfg.to_json();
    meta["step"] = trainer.step_count();
    meta["seed"] = cfg.seed;
    meta["dataset_hash"] = ds.manifest.content_hash;
    std::vector<std::pair<std::string, Tensor*>> arrays;
    for (auto& [n, t] : trainer.student().state()) arrays.emplace_back("student/" + n, t);
    for (auto& [n, t] : trainer.teacher().state()) arrays.emplace_back("teacher/" + n, t);
    for (auto& [n, t] : trainer.student_head().state()) arrays.emplace_back("head_s/" + n, t);
    for (auto& [n, t] : trainer.teacher_head().state()) arrays.emplace_back("head_t/" + n, t);
    std::vector<Tensor> mom;
    mom.reserve(trainer.optimizer().buffers().size());
    for (size_t i = 0; i < trainer.optimizer().buffers().size(); ++i) {
      const auto& [pname, p] = trainer.optimizer().params()[i];
      mom.push_back(Tensor::from(p->shape(), trainer.optimizer().buffers()[i]));
      arrays.emplace_back("opt/m/" + pname, &mom.back());
    }
    io::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), meta, arrays);

    // curves
    io::Series loss_s{"loss_total", "#1f77b4", {}, {}};
    for (const auto& m : result.steps) {
      loss_s.x.push_back(static_cast<double>(m.step));
      loss_s.y.push_back(m.total);
    }
    io::write_svg_plot((fs::path(out_dir) / "loss.svg").string(), "training loss", {loss_s}, "step",
                       "loss");
    if (!result.evals.empty()) {
      std::vector<io::Series> dice_series;
      const char* colors[] = {"#2ca02c", "#d62728", "#1f77b4"};
      for (size_t c = 0; c < class_names.size(); ++c) {
        io::Series s{class_names[c], colors[c % 3], {}, {}};
        for (const auto& pt : result.evals)
          if (pt.split == "val") {
            s.x.push_back(static_cast<double>(pt.epoch));
            s.y.push_back(pt.report.per_class[c]);
          }
        if (!s.x.empty()) dice_series.push_back(std::move(s));
      }
      if (!dice_series.empty())
        io::write_svg_plot((fs::path(out_dir) / "dice.svg").string(), "validation dice", dice_series,
                           "epoch", "dice (%)");
    }
  }
  return result;
}

// Rebuild a student model from a checkpoint's config echo and restore its
// weights; throws DataError on any mismatch.
inline std::pair<std::unique_ptr<model::CMAformer>, ExperimentConfig> model_from_checkpoint(
    const io::Checkpoint& ckpt) {
  CMA_CHECK(ckpt.meta.contains("config"), DataError, "checkpoint has no config echo");
  ExperimentConfig cfg = ExperimentConfig::from_json(ckpt.meta.at("config"));
  auto m = std::make_unique<model::CMAformer>(cfg.resolved_model(), cfg.seed);
  io::restore_state(ckpt, "student/", m->state());
  m->set_training(false);
  return {std::move(m), cfg};
}

}  // namespace cma::train
