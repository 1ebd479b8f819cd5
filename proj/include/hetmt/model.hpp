#pragma once

// Dual-task network: a shared dilated residual trunk, a dropout layer on the
// trunk output, and up to four task heads (regression mean, regression
// log-variance, segmentation logits, segmentation log-variance).
//
// Normalization: none. Residual blocks are pre-activation (ReLU -> conv ->
// ReLU -> conv) with an identity skip, zero-padded along channels when the
// width grows. Without batch statistics every mode is a pure function of
// (params, input, seed).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetmt/kernels.hpp"

namespace hetmt {

enum class Variant {
  M1_reg,
  M1_seg,
  M2a_reg,
  M2a_seg,
  M2b_reg,
  M2b_seg,
  M3_multitask_homo,
  M4_multitask_hetero,
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);  // also accepts "M3" and "M4"

struct VariantTraits {
  bool regression = false;
  bool segmentation = false;
  bool heteroscedastic = false;  // per-voxel log-variance heads
  bool homoscedastic = false;    // learnable scalar log-variances
  bool dropout = false;
  bool baseline = false;  // half-width trunk + single 1x1 output layer per head
};

VariantTraits traits_of(Variant v, bool dropout_in_m3 = true);

struct ModelConfig {
  std::vector<int> trunk_features{16, 16, 32, 64, 128};
  std::vector<int> dilations{1, 2, 4};
  int repeats = 2;
  int kernel = 3;
  std::vector<int> branch_widths{32, 32, 32, 32};
  double dropout = 0.5;
  int class_count = 6;
  Variant variant = Variant::M4_multitask_hetero;
  bool dropout_in_m3 = true;
  // Test-only: replaces every ReLU with the identity.
  bool linear_activations = false;
  // Inputs are fed as (mr - input_offset) / input_scale; the regression head
  // predicts (ct - target_offset) / target_scale.
  double input_offset = 150.0;
  double input_scale = 100.0;
  double target_offset = 0.0;
  double target_scale = 100.0;

  /// Full-size layer widths: f_R = [64,64,128,256,2048],
  /// branches [256,256,256,256].
  static ModelConfig full_scale();

  VariantTraits traits() const { return traits_of(variant, dropout_in_m3); }
  void validate() const;  // ConfigError
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class HeadKind { reg_mean, reg_logvar, seg_logits, seg_logvar };
std::string to_string(HeadKind k);

struct ConvLayer {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int dilation = 1;
  std::size_t weight = 0;  // tensor indices in Params
  std::size_t bias = 0;

  kernels::ConvGeometry geometry(int height, int width) const {
    return {in_channels, out_channels, kernel, dilation, height, width};
  }
};

struct ResidualBlock {
  int conv_a = 0;
  int conv_b = 0;
  int in_channels = 0;
  int out_channels = 0;
};

struct Head {
  HeadKind kind{};
  std::vector<int> convs;  // indices into Architecture::convs, last one linear
};

/// Layer graph implied by a ModelConfig.
struct Architecture {
  std::vector<ConvLayer> convs;
  int stem = 0;
  std::vector<ResidualBlock> blocks;
  int trunk_final = 0;
  int trunk_channels = 0;
  std::vector<Head> heads;
  bool homo_scalars = false;
  std::vector<std::string> tensor_names;
  std::vector<std::vector<int>> tensor_shapes;
  int receptive_radius = 0;  // half-width of the receptive field, in voxels

  const Head* head(HeadKind k) const;
};

Architecture make_architecture(const ModelConfig& cfg);

template <class T>
struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> data;

  bool operator==(const ParamTensor&) const = default;
};

/// Named, ordered weight set.
template <class T>
struct Params {
  std::vector<ParamTensor<T>> tensors;

  std::size_t total_size() const;
  std::optional<std::size_t> find(const std::string& name) const;
  bool contains(const std::string& name) const { return find(name).has_value(); }
  bool all_finite() const;
  Params zeros_like() const;
  void set_zero();

  template <class U>
  Params<U> cast() const {
    Params<U> out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.shape, std::vector<U>(t.data.begin(), t.data.end())});
    return out;
  }

  bool operator==(const Params&) const = default;
};

/// Per-voxel network outputs for one patch, in network (normalized) units.
/// Head maps are H*W; seg_logits is C*H*W (channel-major). Absent heads are empty.
template <class T>
struct DualTaskOutput {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<T> reg_mean;
  std::vector<T> reg_logvar;
  std::vector<T> seg_logits;
  std::vector<T> seg_logvar;

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::vector<T>& field(HeadKind k);
  const std::vector<T>& field(HeadKind k) const;
};

enum class Mode { train, mc_sample, deterministic };

/// Activations kept for the backward pass.
template <class T>
struct ForwardCache {
  int height = 0;
  int width = 0;
  std::vector<T> input;
  std::vector<T> stem_out;
  std::vector<std::vector<T>> block_in, block_act_a, block_pre_b, block_act_b;
  std::vector<T> final_act, trunk_pre, trunk_act, mask, trunk_out;
  // Per head, the input fed to each layer and each layer's pre-activation.
  std::vector<std::vector<std::vector<T>>> head_in, head_pre;
};

template <class T>
class Network {
 public:
  explicit Network(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const Architecture& architecture() const { return arch_; }

  /// Fan-in-scaled uniform initialization, biases zero, homoscedastic
  /// scalars zero. Deterministic in init_seed.
  Params<T> init(std::uint64_t init_seed) const;

  /// Forward pass on one single-channel patch of shape h x w (already
  /// normalized). Train and mc_sample modes apply the dropout mask drawn
  /// from `seed` when the variant uses dropout.
  DualTaskOutput<T> forward(const Params<T>& params, std::span<const T> patch, int height, int width,
                            Mode mode, std::uint64_t seed, ForwardCache<T>* cache = nullptr) const;

  /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(outputs).
  void backward(const Params<T>& params, const ForwardCache<T>& cache, const DualTaskOutput<T>& grad_out,
                Params<T>& grads) const;

  /// Dropout mask (0 or 1/(1-p)) for a trunk output of the given size.
  std::vector<T> dropout_mask(std::size_t size, std::uint64_t seed) const;

  bool dropout_active(Mode mode) const;

 private:
  ModelConfig cfg_;
  Architecture arch_;
};

/// Convenience: normalize raw MR intensities into network input units.
template <class T>
std::vector<T> normalize_input(const ModelConfig& cfg, std::span<const float> mr);

}  // namespace hetmt
