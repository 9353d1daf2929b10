#pragma once

// Experiment configuration: nested JSON document with defaults for every
// field, lossless round-trip, and hard rejection of unknown keys.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cma/core/common.hpp"
#include "cma/model/cmaformer.hpp"
#include "cma/train/trainer.hpp"

namespace cma {

using json = nlohmann::json;

namespace detail {

// Tracks which keys were consumed so leftovers can be reported as errors.
class StrictObject {
public:
  StrictObject(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    CMA_CHECK_CFG(j_.is_object(), "config section '" << path_ << "' must be an object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + path_ + key + "' has the wrong type");
    }
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }

  json section(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) return json::object();
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      CMA_CHECK_CFG(used_.count(it.key()) > 0, "unknown config key '" << path_ << it.key() << "'");
    }
  }

private:
  json j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

struct AblateToggles {
  bool vit_block = true;
  bool cross_attention = true;
  bool ldc_loss = true;

  bool operator==(const AblateToggles&) const = default;

  std::string label() const {
    if (vit_block && cross_attention && ldc_loss) return "all";
    if (vit_block && cross_attention) return "vit_cross";
    if (vit_block && !cross_attention && !ldc_loss) return "vit_only";
    if (!vit_block && !cross_attention && ldc_loss) return "ldc_only";
    std::string s = "custom";
    s += vit_block ? "_vit" : "";
    s += cross_attention ? "_cross" : "";
    s += ldc_loss ? "_ldc" : "";
    return s;
  }
};

struct ExperimentConfig {
  // data
  std::string data_path;
  double labeled_fraction = 1.0;

  model::ModelConfig model;
  train::TrainerOptions trainer;
  AblateToggles ablate;

  uint64_t seed = 1;
  int64_t eval_every = 5;  // epochs between validation evals; 0 = final only

  bool operator==(const ExperimentConfig& o) const {
    return data_path == o.data_path && labeled_fraction == o.labeled_fraction && seed == o.seed &&
           eval_every == o.eval_every && ablate == o.ablate && model_eq(o) && trainer_eq(o);
  }

  json to_json() const {
    json j;
    j["data"] = {{"path", data_path}, {"labeled_fraction", labeled_fraction}};
    j["model"] = {{"in_channels", model.in_channels},
                  {"num_classes", model.num_classes},
                  {"image_size", model.image_size},
                  {"patch_size", model.patch_size},
                  {"stage_widths", model.stage_widths},
                  {"depths", model.depths},
                  {"heads", model.heads},
                  {"mlp_ratio", model.mlp_ratio},
                  {"aspp_rates", model.aspp_rates},
                  {"reduce_ratio", model.reduce_ratio},
                  {"dropout", model.dropout_rate}};
    j["loss"] = {{"alpha", trainer.ldc.alpha},
                 {"beta1", trainer.ldc.beta1},
                 {"beta2", trainer.ldc.beta2},
                 {"eps", trainer.ldc.eps},
                 {"tau", trainer.tau},
                 {"s_factor", trainer.s_factor},
                 {"weight_norm_cap", trainer.weight_norm_cap},
                 {"project_weights", trainer.project_weights},
                 {"lambda_sup", trainer.weights.lambda_sup},
                 {"beta_contrast", trainer.weights.beta_contrast},
                 {"gamma_con", trainer.weights.gamma_con},
                 {"ramp_frac", trainer.weights.ramp_frac}};
    j["optim"] = {{"lr", trainer.sgd.lr},
                  {"momentum", trainer.sgd.momentum},
                  {"weight_decay", trainer.sgd.weight_decay},
                  {"lr_power", trainer.lr_power},
                  {"epochs", trainer.epochs},
                  {"batch_size", trainer.batch_size},
                  {"ema_decay", trainer.ema_decay},
                  {"aug_noise", trainer.aug_noise},
                  {"head_pool", trainer.head_pool},
                  {"head_hidden", trainer.head_hidden},
                  {"head_embed", trainer.head_embed}};
    j["train"] = {{"seed", seed}, {"eval_every", eval_every}};
    j["ablate"] = {{"vit_block", ablate.vit_block},
                   {"cross_attention", ablate.cross_attention},
                   {"ldc_loss", ablate.ldc_loss}};
    return j;
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    detail::StrictObject root(j, "");

    detail::StrictObject data(root.section("data"), "data.");
    c.data_path = data.get<std::string>("path", "");
    c.labeled_fraction = data.get<double>("labeled_fraction", 1.0);
    data.finish();

    detail::StrictObject m(root.section("model"), "model.");
    c.model.in_channels = m.get<int64_t>("in_channels", c.model.in_channels);
    c.model.num_classes = m.get<int64_t>("num_classes", c.model.num_classes);
    c.model.image_size = m.get<int64_t>("image_size", c.model.image_size);
    c.model.patch_size = m.get<int64_t>("patch_size", c.model.patch_size);
    c.model.stage_widths = m.get<std::vector<int64_t>>("stage_widths", c.model.stage_widths);
    c.model.depths = m.get<std::vector<int64_t>>("depths", c.model.depths);
    c.model.heads = m.get<std::vector<int64_t>>("heads", c.model.heads);
    c.model.mlp_ratio = m.get<int64_t>("mlp_ratio", c.model.mlp_ratio);
    c.model.aspp_rates = m.get<std::vector<int64_t>>("aspp_rates", c.model.aspp_rates);
    c.model.reduce_ratio = m.get<int64_t>("reduce_ratio", c.model.reduce_ratio);
    c.model.dropout_rate = m.get<double>("dropout", c.model.dropout_rate);
    m.finish();

    detail::StrictObject l(root.section("loss"), "loss.");
    c.trainer.ldc.alpha = l.get<double>("alpha", c.trainer.ldc.alpha);
    c.trainer.ldc.beta1 = l.get<double>("beta1", c.trainer.ldc.beta1);
    c.trainer.ldc.beta2 = l.get<double>("beta2", c.trainer.ldc.beta2);
    c.trainer.ldc.eps = l.get<double>("eps", c.trainer.ldc.eps);
    c.trainer.tau = l.get<double>("tau", c.trainer.tau);
    c.trainer.s_factor = l.get<double>("s_factor", c.trainer.s_factor);
    c.trainer.weight_norm_cap = l.get<double>("weight_norm_cap", c.trainer.weight_norm_cap);
    c.trainer.project_weights = l.get<bool>("project_weights", c.trainer.project_weights);
    c.trainer.weights.lambda_sup = l.get<double>("lambda_sup", c.trainer.weights.lambda_sup);
    c.trainer.weights.beta_contrast = l.get<double>("beta_contrast", c.trainer.weights.beta_contrast);
    c.trainer.weights.gamma_con = l.get<double>("gamma_con", c.trainer.weights.gamma_con);
    c.trainer.weights.ramp_frac = l.get<double>("ramp_frac", c.trainer.weights.ramp_frac);
    l.finish();

    detail::StrictObject o(root.section("optim"), "optim.");
    c.trainer.sgd.lr = o.get<double>("lr", c.trainer.sgd.lr);
    c.trainer.sgd.momentum = o.get<double>("momentum", c.trainer.sgd.momentum);
    c.trainer.sgd.weight_decay = o.get<double>("weight_decay", c.trainer.sgd.weight_decay);
    c.trainer.lr_power = o.get<double>("lr_power", c.trainer.lr_power);
    c.trainer.epochs = o.get<int64_t>("epochs", c.trainer.epochs);
    c.trainer.batch_size = o.get<int64_t>("batch_size", c.trainer.batch_size);
    c.trainer.ema_decay = o.get<double>("ema_decay", c.trainer.ema_decay);
    c.trainer.aug_noise = o.get<double>("aug_noise", c.trainer.aug_noise);
    c.trainer.head_pool = o.get<int64_t>("head_pool", c.trainer.head_pool);
    c.trainer.head_hidden = o.get<int64_t>("head_hidden", c.trainer.head_hidden);
    c.trainer.head_embed = o.get<int64_t>("head_embed", c.trainer.head_embed);
    o.finish();

    detail::StrictObject t(root.section("train"), "train.");
    c.seed = t.get<uint64_t>("seed", c.seed);
    c.eval_every = t.get<int64_t>("eval_every", c.eval_every);
    t.finish();

    detail::StrictObject a(root.section("ablate"), "ablate.");
    c.ablate.vit_block = a.get<bool>("vit_block", c.ablate.vit_block);
    c.ablate.cross_attention = a.get<bool>("cross_attention", c.ablate.cross_attention);
    c.ablate.ldc_loss = a.get<bool>("ldc_loss", c.ablate.ldc_loss);
    a.finish();

    root.finish();
    return c;
  }

  // Model config with the ablation toggles applied.
  model::ModelConfig resolved_model() const {
    model::ModelConfig m = model;
    m.use_transformer = ablate.vit_block;
    m.use_cross_attention = ablate.cross_attention;
    return m;
  }

  // Trainer options with the LDC toggle applied (gamma forced to 0).
  train::TrainerOptions resolved_trainer() const {
    train::TrainerOptions t = trainer;
    if (!ablate.ldc_loss) t.weights.gamma_con = 0.0;
    return t;
  }

private:
  bool model_eq(const ExperimentConfig& o) const {
    const auto& a = model;
    const auto& b = o.model;
    return a.in_channels == b.in_channels && a.num_classes == b.num_classes && a.image_size == b.image_size &&
           a.patch_size == b.patch_size && a.stage_widths == b.stage_widths && a.depths == b.depths &&
           a.heads == b.heads && a.mlp_ratio == b.mlp_ratio && a.aspp_rates == b.aspp_rates &&
           a.reduce_ratio == b.reduce_ratio && a.dropout_rate == b.dropout_rate;
  }

  bool trainer_eq(const ExperimentConfig& o) const {
    const auto& a = trainer;
    const auto& b = o.trainer;
    return a.sgd.lr == b.sgd.lr && a.sgd.momentum == b.sgd.momentum &&
           a.sgd.weight_decay == b.sgd.weight_decay && a.lr_power == b.lr_power && a.epochs == b.epochs &&
           a.batch_size == b.batch_size && a.ema_decay == b.ema_decay && a.aug_noise == b.aug_noise &&
           a.head_pool == b.head_pool && a.head_hidden == b.head_hidden && a.head_embed == b.head_embed &&
           a.tau == b.tau && a.s_factor == b.s_factor && a.weight_norm_cap == b.weight_norm_cap &&
           a.project_weights == b.project_weights && a.ldc.alpha == b.ldc.alpha && a.ldc.beta1 == b.ldc.beta1 &&
           a.ldc.beta2 == b.ldc.beta2 && a.ldc.eps == b.ldc.eps &&
           a.weights.lambda_sup == b.weights.lambda_sup &&
           a.weights.beta_contrast == b.weights.beta_contrast && a.weights.gamma_con == b.weights.gamma_con &&
           a.weights.ramp_frac == b.weights.ramp_frac;
  }
};

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  CMA_CHECK(in.good(), IoError, "cannot open config file " << path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config JSON in " + path + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

}  // namespace cma
