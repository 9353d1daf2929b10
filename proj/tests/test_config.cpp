// Config round-trips, unknown-key rejection, checkpoint serialization, and
// the frozen reference table.

#include <catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <unistd.h>

#include "cma/config.hpp"
#include "cma/io/checkpoint.hpp"
#include "cma/reference.hpp"
#include "cma/train/experiment.hpp"

using namespace cma;
namespace fs = std::filesystem;

TEST_CASE("default config round-trips through JSON") {
  ExperimentConfig c;
  ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  REQUIRE(back == c);
}

TEST_CASE("non-default config round-trips losslessly") {
  ExperimentConfig c;
  c.data_path = "some/dir";
  c.labeled_fraction = 0.25;
  c.seed = 123456789ULL;
  c.eval_every = 7;
  c.model.stage_widths = {16, 48, 96};
  c.model.heads = {2, 4, 8};
  c.model.depths = {2, 1, 1};
  c.model.image_size = 32;
  c.model.dropout_rate = 0.1;
  c.trainer.sgd.lr = 0.01;
  c.trainer.weights.gamma_con = 0.5;
  c.trainer.weights.ramp_frac = 0.33;
  c.trainer.ldc.beta1 = 0.3140001;
  c.trainer.s_factor = 2.5;
  c.ablate.cross_attention = false;
  ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  REQUIRE(back == c);
  // and the emitted JSON is stable
  REQUIRE(back.to_json() == c.to_json());
}

TEST_CASE("unknown config keys are rejected with their path") {
  json j = ExperimentConfig().to_json();
  j["optim"]["lrr"] = 0.1;
  try {
    ExperimentConfig::from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("optim.lrr") != std::string::npos);
  }
  json top = ExperimentConfig().to_json();
  top["bogus"] = 1;
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(top), ConfigError);
}

TEST_CASE("wrongly typed config values are rejected") {
  json j = ExperimentConfig().to_json();
  j["optim"]["lr"] = "fast";
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
}

TEST_CASE("ablation toggles map onto the resolved configs") {
  ExperimentConfig c;
  c.ablate.vit_block = false;
  c.ablate.cross_attention = false;
  c.ablate.ldc_loss = false;
  REQUIRE_FALSE(c.resolved_model().use_transformer);
  REQUIRE_FALSE(c.resolved_model().use_cross_attention);
  REQUIRE(c.resolved_trainer().weights.gamma_con == 0.0);
  c.ablate.ldc_loss = true;
  REQUIRE(c.resolved_trainer().weights.gamma_con == c.trainer.weights.gamma_con);
  REQUIRE(c.ablate.label() == "ldc_only");
  c.ablate = {true, false, false};
  REQUIRE(c.ablate.label() == "vit_only");
  c.ablate = {true, true, true};
  REQUIRE(c.ablate.label() == "all");
  c.ablate = {true, true, false};
  REQUIRE(c.ablate.label() == "vit_cross");
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const fs::path path = fs::temp_directory_path() / ("cma_ckpt_" + std::to_string(::getpid()) + ".bin");
  Rng rng(1);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({2, 2, 2}, rng);
  a.data()[0] = 1.0 / 3.0;  // not exactly representable in decimal
  nlohmann::json meta = {{"step", 12}, {"seed", 7}, {"config", ExperimentConfig().to_json()}};
  io::save_checkpoint(path.string(), meta, {{"w/a", &a}, {"w/b", &b}});
  io::Checkpoint ckpt = io::load_checkpoint(path.string());
  REQUIRE(ckpt.meta == meta);
  REQUIRE(ckpt.arrays.size() == 2);
  const Tensor* ra = ckpt.find("w/a");
  REQUIRE(ra != nullptr);
  REQUIRE(ra->shape() == a.shape());
  REQUIRE(std::memcmp(ra->data(), a.data(), sizeof(real) * static_cast<size_t>(a.numel())) == 0);
  const Tensor* rb = ckpt.find("w/b");
  REQUIRE(std::memcmp(rb->data(), b.data(), sizeof(real) * static_cast<size_t>(b.numel())) == 0);
  fs::remove(path);
}

TEST_CASE("restore_state validates presence and shape") {
  const fs::path path = fs::temp_directory_path() / ("cma_ckpt2_" + std::to_string(::getpid()) + ".bin");
  Rng rng(2);
  Tensor a = Tensor::randn({3}, rng);
  io::save_checkpoint(path.string(), {{"v", 1}}, {{"student/x", &a}});
  io::Checkpoint ckpt = io::load_checkpoint(path.string());
  Tensor target = Tensor::zeros({3});
  io::restore_state(ckpt, "student/", {{"x", &target}});
  REQUIRE(target.vec() == a.vec());
  Tensor wrong = Tensor::zeros({4});
  REQUIRE_THROWS_AS(io::restore_state(ckpt, "student/", {{"x", &wrong}}), DataError);
  REQUIRE_THROWS_AS(io::restore_state(ckpt, "student/", {{"missing", &target}}), DataError);
  fs::remove(path);
}

TEST_CASE("a model restored from a checkpoint reproduces its outputs bitwise") {
  model::ModelConfig mcfg;
  mcfg.image_size = 32;
  mcfg.stage_widths = {8, 16};
  mcfg.depths = {1, 1};
  mcfg.heads = {2, 4};
  mcfg.aspp_rates = {1, 3};
  ExperimentConfig cfg;
  cfg.model = mcfg;
  cfg.seed = 77;

  model::CMAformer original(cfg.resolved_model(), cfg.seed);
  original.set_training(false);
  Rng rng(3);
  Tensor x = Tensor::rand_uniform({1, 1, 32, 32}, rng, 0.0, 1.0);
  // perturb a parameter so restoration is actually exercised
  original.parameters()[0].second->data()[0] += 0.25;
  Tensor before = original.forward(x);

  const fs::path path = fs::temp_directory_path() / ("cma_ckpt3_" + std::to_string(::getpid()) + ".bin");
  std::vector<std::pair<std::string, Tensor*>> arrays;
  for (auto& [n, t] : original.state()) arrays.emplace_back("student/" + n, t);
  nlohmann::json meta;
  meta["config"] = cfg.to_json();
  meta["step"] = 0;
  meta["seed"] = cfg.seed;
  io::save_checkpoint(path.string(), meta, arrays);

  io::Checkpoint ckpt = io::load_checkpoint(path.string());
  auto [restored, rcfg] = train::model_from_checkpoint(ckpt);
  REQUIRE(rcfg == cfg);
  Tensor after = restored->forward(x);
  for (int64_t i = 0; i < before.numel(); ++i) REQUIRE(before.data()[i] == after.data()[i]);
  fs::remove(path);
}

TEST_CASE("malformed checkpoints are rejected") {
  const fs::path path = fs::temp_directory_path() / ("cma_bad_" + std::to_string(::getpid()) + ".bin");
  std::ofstream out(path, std::ios::binary);
  out << "not a checkpoint at all";
  out.close();
  REQUIRE_THROWS_AS(io::load_checkpoint(path.string()), DataError);
  fs::remove(path);
}

TEST_CASE("reference table holds the frozen published numbers") {
  REQUIRE(reference_value("lits2017", "CMAformer", "Average") == 95.62);
  REQUIRE(reference_value("lits2017", "CMAformer", "Liver") == 97.89);
  REQUIRE(reference_value("lits2017", "CMAformer", "Tumor") == 93.34);
  REQUIRE(reference_value("lits2017", "CMAformer-SSL", "Average") == 95.27);
  REQUIRE(reference_value("lits2017", "CMAformer-SSL", "Liver") == 96.32);
  REQUIRE(reference_value("lits2017", "CMAformer-SSL", "Tumor") == 94.21);
  REQUIRE(reference_value("synapse", "CMAformer", "Average") == 87.39);
  REQUIRE(reference_value("lits2017-ablation", "vit_only", "Average") == 83.29);
  REQUIRE(reference_value("lits2017-ablation", "vit_cross", "Average") == 92.44);
  REQUIRE(reference_value("lits2017-ablation", "ldc_only", "Average") == 93.50);
  REQUIRE(reference_value("lits2017-ablation", "all", "Average") == 95.62);
  REQUIRE_THROWS_AS(reference_value("lits2017", "NoSuchModel", "Average"), InputError);
}
