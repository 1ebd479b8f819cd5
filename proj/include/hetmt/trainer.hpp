#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetmt/loss.hpp"
#include "hetmt/model.hpp"
#include "hetmt/phantom.hpp"
#include "hetmt/rng.hpp"

namespace hetmt {

struct TrainConfig {
  int patch_size = 32;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t max_iterations = 2000;
  std::int64_t checkpoint_interval = 100;
  int keep_checkpoints = 2;
  std::uint64_t seed = 1;

  void validate() const;  // ConfigError
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One case held in network units: normalized MR input, normalized CT target
/// and labels, stored slice-major.
struct TrainingCase {
  std::string id;
  int depth = 1, height = 0, width = 0;
  std::vector<float> input;
  std::vector<float> target;
  std::vector<std::uint8_t> labels;
};

struct TrainingSet {
  std::vector<TrainingCase> cases;
};

TrainingSet make_training_set(const std::vector<CaseBundle>& cases, const ModelConfig& cfg);
TrainingSet load_training_set(const Manifest& manifest, const ModelConfig& cfg, const std::string& split = "train");

struct Patch {
  int case_index = 0, slice = 0, y0 = 0, x0 = 0;
  std::vector<float> x;
  std::vector<float> y1;
  std::vector<std::uint8_t> y2;
};

struct PatchBatch {
  int patch_size = 0;
  std::vector<Patch> items;
};

/// Uniform case, then uniform slice, then uniform top-left corner.
PatchBatch sample_patch_batch(const TrainingSet& data, const TrainConfig& cfg, Rng& rng);

struct LossRecord {
  std::int64_t iteration = 0;
  LossBreakdown loss;
};

struct TrainState {
  Params<float> params;
  Params<float> adam_m;
  Params<float> adam_v;
  std::int64_t iteration = 0;
  std::vector<LossRecord> history;
};

TrainState init_train_state(const Network<float>& net, std::uint64_t init_seed);

/// Loss for the network's variant on one output, with gradients w.r.t. the
/// outputs (`grad_out`) and the homoscedastic scalars (`grad_params`).
template <class T>
LossBreakdown variant_loss(const Network<T>& net, const Params<T>& params, const DualTaskOutput<T>& out,
                           std::span<const T> y1, std::span<const std::uint8_t> y2, DualTaskOutput<T>* grad_out,
                           Params<T>* grad_params, double weight = 1.0);

/// Gradient of the batch-mean variant loss w.r.t. all parameters, computed
/// per item in parallel and reduced in item order.
template <class T>
LossBreakdown batch_gradient(const Network<T>& net, const Params<T>& params,
                             const std::vector<std::vector<T>>& inputs, const std::vector<std::vector<T>>& targets,
                             const std::vector<std::vector<std::uint8_t>>& labels, int height, int width,
                             Mode mode, const std::vector<std::uint64_t>& seeds, Params<T>& grads);

/// One bias-corrected ADAM update; `step` is the 1-based update count.
void adam_update(Params<float>& params, const Params<float>& grads, Params<float>& m, Params<float>& v,
                 std::int64_t step, const TrainConfig& cfg);

/// Forward (train mode), loss, backward and ADAM update; iteration += 1.
/// NumericError on a non-finite loss.
LossBreakdown train_step(const Network<float>& net, TrainState& state, const PatchBatch& batch,
                         const TrainConfig& cfg);

struct TrainResult {
  std::vector<std::filesystem::path> checkpoints;  // retained, oldest first
  std::filesystem::path history_csv;
  TrainState state;
};

using ProgressFn = std::function<void(std::int64_t iteration, const LossBreakdown& loss)>;

/// Runs train_step up to cfg.max_iterations, checkpointing every
/// checkpoint_interval iterations (and at the end) and keeping the last
/// keep_checkpoints. Resumes from the newest checkpoint in out_dir when
/// `resume` is set.
TrainResult train_loop(const TrainConfig& cfg, const ModelConfig& model_cfg, const TrainingSet& data,
                       const std::filesystem::path& out_dir, bool resume = true, const ProgressFn& progress = {});

TrainResult train_loop(const TrainConfig& cfg, const ModelConfig& model_cfg, const Manifest& manifest,
                       const std::filesystem::path& out_dir, bool resume = true, const ProgressFn& progress = {});

/// Checkpoint stems in a training directory, sorted by iteration.
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir);

}  // namespace hetmt
