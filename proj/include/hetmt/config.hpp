#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "hetmt/model.hpp"
#include "hetmt/phantom.hpp"
#include "hetmt/trainer.hpp"

namespace hetmt {

struct InferConfig {
  int T = 20;
  int stride = 16;      // sliding-window step; the window is train.patch_size
  int checkpoints = 2;  // last k retained checkpoints
};

struct EvalConfig {
  int bins = 8;
};

/// Everything one experiment needs. The global `seed` overwrites the phantom
/// and training seeds so one number pins a run.
struct RunConfig {
  static constexpr int kVersion = 1;

  int version = kVersion;
  PhantomSpec phantom;
  int cases = 16;
  int test_cases = 4;
  ModelConfig model;
  TrainConfig train;
  InferConfig infer;
  EvalConfig eval;
  std::uint64_t seed = 1;
  std::string out = "run";

  /// Copies `seed` into the sub-configs.
  void apply_seed();
  void validate() const;  // ConfigError
};

void to_json(nlohmann::json& j, const InferConfig& c);
void from_json(const nlohmann::json& j, InferConfig& c);
void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace hetmt
