#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hetmt/checkpoint.hpp"
#include "hetmt/model.hpp"
#include "hetmt/volume.hpp"

namespace hetmt {

/// A checkpoint ready for sampling.
struct LoadedModel {
  std::string id;
  Network<float> net;
  Params<float> params;

  LoadedModel(std::string id_, const ModelConfig& cfg, Params<float> p)
      : id(std::move(id_)), net(cfg), params(std::move(p)) {}
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

/// T stochastic forward passes on one normalized patch: T/k passes per
/// checkpoint in mc_sample mode, pass t of checkpoint i seeded from (seed, i, t).
/// Outputs are in network units.
std::vector<DualTaskOutput<float>> mc_forward_samples(const std::vector<LoadedModel>& models,
                                                      std::span<const float> patch, int height, int width, int T,
                                                      std::uint64_t seed);

/// One stochastic sample over a full field, in physical units. Empty vectors
/// mark heads the model does not have.
struct StochasticSample {
  std::vector<double> reg_mean;       // f1
  std::vector<double> reg_intrinsic;  // exp(s1), rescaled to target units squared
  std::vector<double> seg_prob;       // C x N, scaled softmax (plain softmax without a variance head)
  std::vector<double> seg_intrinsic;  // exp(s2)
};

/// Converts a network output to physical units.
StochasticSample to_sample(const DualTaskOutput<float>& out, const ModelConfig& cfg);

struct RegressionStats {
  std::vector<float> mean;
  std::vector<float> param_var;      // population variance over samples
  std::vector<float> intrinsic_var;  // mean of exp(s1); zero without a variance head
  std::vector<float> total_var;      // intrinsic_var + param_var, summed in float
};

struct SegmentationStats {
  int classes = 0;
  std::vector<float> mean_prob;  // C x N
  std::vector<std::uint8_t> label;  // argmax, lowest index wins ties
  std::vector<float> param_var;  // C x N, population variance per class
  std::vector<float> intrinsic;  // mean of exp(s2); zero without a variance head
};

RegressionStats aggregate_regression(std::span<const StochasticSample> samples);
SegmentationStats aggregate_segmentation(std::span<const StochasticSample> samples, int classes);

struct StitchPlan {
  int height = 0, width = 0;
  int patch = 0;
  int stride = 0;
  std::vector<std::array<int, 2>> origins;  // (y, x)
  std::vector<int> coverage;               // H x W
};

/// Regular grid of patch origins with the last row/column clamped to end at
/// the border. Only the in-plane dims of `shape` are used.
StitchPlan plan_stitch(const std::vector<int>& shape, int patch, int stride);

/// Full-volume prediction; every field is a Volume on the input grid.
struct StochasticPrediction {
  int T = 0;
  int classes = 0;
  std::vector<std::string> checkpoint_ids;
  bool has_regression = false;
  bool has_segmentation = false;
  Volume reg_mean, reg_param_var, reg_intrinsic_var, reg_total_var;
  std::vector<Volume> seg_mean_prob;  // one per class
  Volume seg_label;
  std::vector<Volume> seg_param_var;  // one per class
  Volume seg_intrinsic;
};

/// Per patch, T stochastic passes; each sample's full-slice field is stitched
/// by uniform overlap averaging before statistics over samples are taken.
/// 3D volumes are processed slice by slice.
StochasticPrediction sliding_window_predict(const std::vector<LoadedModel>& models, const Volume& mr,
                                            const StitchPlan& plan, int T, std::uint64_t seed);

/// Writes every field as a Volume plus index.json.
void write_prediction(const StochasticPrediction& p, const std::filesystem::path& dir);
StochasticPrediction read_prediction(const std::filesystem::path& dir);

}  // namespace hetmt
