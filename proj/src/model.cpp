#include "hetmt/model.hpp"

#include <algorithm>
#include <cmath>

#include "hetmt/errors.hpp"
#include "hetmt/rng.hpp"

namespace hetmt {

using nlohmann::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::M1_reg: return "M1_reg";
    case Variant::M1_seg: return "M1_seg";
    case Variant::M2a_reg: return "M2a_reg";
    case Variant::M2a_seg: return "M2a_seg";
    case Variant::M2b_reg: return "M2b_reg";
    case Variant::M2b_seg: return "M2b_seg";
    case Variant::M3_multitask_homo: return "M3_multitask_homo";
    case Variant::M4_multitask_hetero: return "M4_multitask_hetero";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::M1_reg, Variant::M1_seg, Variant::M2a_reg, Variant::M2a_seg, Variant::M2b_reg,
                    Variant::M2b_seg, Variant::M3_multitask_homo, Variant::M4_multitask_hetero})
    if (to_string(v) == s) return v;
  if (s == "M3") return Variant::M3_multitask_homo;
  if (s == "M4") return Variant::M4_multitask_hetero;
  throw ConfigError("unknown variant: " + s);
}

VariantTraits traits_of(Variant v, bool dropout_in_m3) {
  VariantTraits t;
  switch (v) {
    case Variant::M1_reg: t.regression = true; t.baseline = true; break;
    case Variant::M1_seg: t.segmentation = true; t.baseline = true; break;
    case Variant::M2a_reg: t.regression = true; t.baseline = true; t.dropout = true; break;
    case Variant::M2a_seg: t.segmentation = true; t.baseline = true; t.dropout = true; break;
    case Variant::M2b_reg:
      t.regression = true; t.baseline = true; t.dropout = true; t.heteroscedastic = true;
      break;
    case Variant::M2b_seg:
      t.segmentation = true; t.baseline = true; t.dropout = true; t.heteroscedastic = true;
      break;
    case Variant::M3_multitask_homo:
      t.regression = t.segmentation = true; t.homoscedastic = true; t.dropout = dropout_in_m3;
      break;
    case Variant::M4_multitask_hetero:
      t.regression = t.segmentation = true; t.heteroscedastic = true; t.dropout = true;
      break;
  }
  return t;
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.trunk_features = {64, 64, 128, 256, 2048};
  c.branch_widths = {256, 256, 256, 256};
  return c;
}

void ModelConfig::validate() const {
  if (dilations.empty()) throw ConfigError("need at least one dilation group");
  if (trunk_features.size() != dilations.size() + 2)
    throw ConfigError("trunk_features must have dilations.size() + 2 entries");
  for (int f : trunk_features)
    if (f < 1) throw ConfigError("trunk widths must be positive");
  for (int d : dilations)
    if (d < 1) throw ConfigError("dilations must be positive");
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel size must be odd and positive");
  if (branch_widths.size() != 4) throw ConfigError("branch_widths must list the four hidden layer widths");
  for (int w : branch_widths)
    if (w < 1) throw ConfigError("branch widths must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout probability must be in [0, 1)");
  if (class_count < 2 || class_count > 255) throw ConfigError("class count must be in [2, 255]");
  if (!(input_scale > 0.0) || !(target_scale > 0.0)) throw ConfigError("normalization scales must be positive");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"trunk_features", c.trunk_features},
           {"dilations", c.dilations},
           {"repeats", c.repeats},
           {"kernel", c.kernel},
           {"branch_widths", c.branch_widths},
           {"dropout", c.dropout},
           {"class_count", c.class_count},
           {"variant", to_string(c.variant)},
           {"dropout_in_m3", c.dropout_in_m3},
           {"linear_activations", c.linear_activations},
           {"input_offset", c.input_offset},
           {"input_scale", c.input_scale},
           {"target_offset", c.target_offset},
           {"target_scale", c.target_scale}};
}

void from_json(const json& j, ModelConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("trunk_features", c.trunk_features);
  get("dilations", c.dilations);
  get("repeats", c.repeats);
  get("kernel", c.kernel);
  get("branch_widths", c.branch_widths);
  get("dropout", c.dropout);
  get("class_count", c.class_count);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  get("dropout_in_m3", c.dropout_in_m3);
  get("linear_activations", c.linear_activations);
  get("input_offset", c.input_offset);
  get("input_scale", c.input_scale);
  get("target_offset", c.target_offset);
  get("target_scale", c.target_scale);
}

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::reg_mean: return "reg_mean";
    case HeadKind::reg_logvar: return "reg_logvar";
    case HeadKind::seg_logits: return "seg_logits";
    case HeadKind::seg_logvar: return "seg_logvar";
  }
  return "?";
}

const Head* Architecture::head(HeadKind k) const {
  for (const auto& h : heads)
    if (h.kind == k) return &h;
  return nullptr;
}

Architecture make_architecture(const ModelConfig& cfg) {
  cfg.validate();
  const VariantTraits tr = cfg.traits();
  Architecture a;

  std::vector<int> widths = cfg.trunk_features;
  if (tr.baseline)
    for (int& w : widths) w = std::max(1, w / 2);

  auto add_conv = [&](const std::string& name, int in, int out, int kernel, int dilation) {
    ConvLayer c{name, in, out, kernel, dilation, a.tensor_names.size(), a.tensor_names.size() + 1};
    a.tensor_names.push_back(name + ".w");
    a.tensor_shapes.push_back({out, in, kernel, kernel});
    a.tensor_names.push_back(name + ".b");
    a.tensor_shapes.push_back({out});
    a.convs.push_back(c);
    return static_cast<int>(a.convs.size()) - 1;
  };

  const int k = cfg.kernel;
  const int half = k / 2;
  a.stem = add_conv("trunk.stem", 1, widths[0], k, 1);
  a.receptive_radius = half;
  int channels = widths[0];
  for (std::size_t g = 0; g < cfg.dilations.size(); ++g) {
    const int d = cfg.dilations[g];
    const int out = widths[g + 1];
    for (int r = 0; r < cfg.repeats; ++r) {
      const std::string prefix = "trunk.g" + std::to_string(g) + ".r" + std::to_string(r);
      ResidualBlock b;
      b.in_channels = channels;
      b.out_channels = std::max(channels, out);
      b.conv_a = add_conv(prefix + ".conv_a", channels, b.out_channels, k, d);
      b.conv_b = add_conv(prefix + ".conv_b", b.out_channels, b.out_channels, k, d);
      a.blocks.push_back(b);
      channels = b.out_channels;
      a.receptive_radius += 2 * half * d;
    }
  }
  a.trunk_final = add_conv("trunk.final", channels, widths.back(), k, 1);
  a.receptive_radius += half;
  a.trunk_channels = widths.back();

  std::vector<HeadKind> kinds;
  if (tr.regression) {
    kinds.push_back(HeadKind::reg_mean);
    if (tr.heteroscedastic) kinds.push_back(HeadKind::reg_logvar);
  }
  if (tr.segmentation) {
    kinds.push_back(HeadKind::seg_logits);
    if (tr.heteroscedastic) kinds.push_back(HeadKind::seg_logvar);
  }
  for (HeadKind kind : kinds) {
    Head h;
    h.kind = kind;
    const int out = kind == HeadKind::seg_logits ? cfg.class_count : 1;
    const std::string prefix = "head." + to_string(kind);
    if (tr.baseline) {
      h.convs.push_back(add_conv(prefix + ".out", a.trunk_channels, out, 1, 1));
    } else {
      int in = a.trunk_channels;
      for (int l = 0; l < 4; ++l) {
        const int kernel = l < 2 ? k : 1;
        h.convs.push_back(add_conv(prefix + ".l" + std::to_string(l), in, cfg.branch_widths[l], kernel, 1));
        in = cfg.branch_widths[l];
      }
      h.convs.push_back(add_conv(prefix + ".l4", in, out, 1, 1));
    }
    a.heads.push_back(h);
  }
  if (!tr.baseline) a.receptive_radius += 2 * half;

  if (tr.homoscedastic) {
    a.homo_scalars = true;
    a.tensor_names.push_back("homo.s1");
    a.tensor_shapes.push_back({1});
    a.tensor_names.push_back("homo.s2");
    a.tensor_shapes.push_back({1});
  }
  return a;
}

// ---------------------------------------------------------------------------
// Params

template <class T>
std::size_t Params<T>::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.data.size();
  return n;
}

template <class T>
std::optional<std::size_t> Params<T>::find(const std::string& name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return i;
  return std::nullopt;
}

template <class T>
bool Params<T>::all_finite() const {
  for (const auto& t : tensors)
    for (T v : t.data)
      if (!std::isfinite(v)) return false;
  return true;
}

template <class T>
Params<T> Params<T>::zeros_like() const {
  Params<T> z;
  z.tensors.reserve(tensors.size());
  for (const auto& t : tensors) z.tensors.push_back({t.name, t.shape, std::vector<T>(t.data.size(), T(0))});
  return z;
}

template <class T>
void Params<T>::set_zero() {
  for (auto& t : tensors) std::fill(t.data.begin(), t.data.end(), T(0));
}

template <class T>
std::vector<T>& DualTaskOutput<T>::field(HeadKind k) {
  switch (k) {
    case HeadKind::reg_mean: return reg_mean;
    case HeadKind::reg_logvar: return reg_logvar;
    case HeadKind::seg_logits: return seg_logits;
    case HeadKind::seg_logvar: return seg_logvar;
  }
  return reg_mean;
}

template <class T>
const std::vector<T>& DualTaskOutput<T>::field(HeadKind k) const {
  return const_cast<DualTaskOutput<T>*>(this)->field(k);
}

// ---------------------------------------------------------------------------
// Network

namespace {

template <class T>
std::span<const T> cspan(const std::vector<T>& v) {
  return {v.data(), v.size()};
}

template <class T>
void relu_into(const std::vector<T>& x, std::vector<T>& y, bool linear) {
  y.resize(x.size());
  if (linear) {
    std::copy(x.begin(), x.end(), y.begin());
    return;
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

// dx = dy * relu'(pre), in place on dy.
template <class T>
void relu_backward(const std::vector<T>& pre, std::vector<T>& grad, bool linear) {
  if (linear) return;
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(pre[i] > T(0))) grad[i] = T(0);
}

template <class T>
void check_finite(const std::vector<T>& v, const std::string& layer) {
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError("non-finite activation in layer " + layer);
}

}  // namespace

template <class T>
Network<T>::Network(ModelConfig cfg) : cfg_(std::move(cfg)), arch_(make_architecture(cfg_)) {}

template <class T>
Params<T> Network<T>::init(std::uint64_t init_seed) const {
  Params<T> p;
  Rng rng(derive_seed(init_seed, {0x1417}));
  for (std::size_t i = 0; i < arch_.tensor_names.size(); ++i) {
    ParamTensor<T> t{arch_.tensor_names[i], arch_.tensor_shapes[i], {}};
    std::size_t n = 1;
    for (int d : t.shape) n *= static_cast<std::size_t>(d);
    t.data.assign(n, T(0));
    if (t.shape.size() == 4) {
      const double fan_in = static_cast<double>(t.shape[1]) * t.shape[2] * t.shape[3];
      const double bound = std::sqrt(3.0 / fan_in);
      for (T& w : t.data) w = static_cast<T>(rng.uniform(-bound, bound));
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template <class T>
bool Network<T>::dropout_active(Mode mode) const {
  return mode != Mode::deterministic && cfg_.traits().dropout && cfg_.dropout > 0.0;
}

template <class T>
std::vector<T> Network<T>::dropout_mask(std::size_t size, std::uint64_t seed) const {
  Rng rng(derive_seed(seed, {0xD0}));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
  std::vector<T> mask(size);
  for (T& m : mask) m = rng.uniform() < cfg_.dropout ? T(0) : keep_scale;
  return mask;
}

template <class T>
DualTaskOutput<T> Network<T>::forward(const Params<T>& params, std::span<const T> patch, int height, int width,
                                      Mode mode, std::uint64_t seed, ForwardCache<T>* cache) const {
  int max_dilation = 1;
  for (int d : cfg_.dilations) max_dilation = std::max(max_dilation, d);
  // Every dilated tap must land inside the patch for at least one voxel.
  const int min_size = max_dilation * (cfg_.kernel / 2) + 1;
  if (height < min_size || width < min_size)
    throw ConfigError("patch " + std::to_string(height) + "x" + std::to_string(width) +
                      " is smaller than the largest dilated kernel reach (" + std::to_string(min_size) + ")");
  const std::size_t pixels = static_cast<std::size_t>(height) * width;
  if (patch.size() != pixels) throw ConfigError("patch data size does not match its shape");
  if (params.tensors.size() != arch_.tensor_names.size())
    throw ConfigError("parameter set does not match the architecture");

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  const bool linear = cfg_.linear_activations;
  std::vector<T> scratch;

  auto conv = [&](int idx, std::span<const T> in, std::vector<T>& out) {
    const ConvLayer& L = arch_.convs[idx];
    const auto g = L.geometry(height, width);
    out.resize(g.output_size());
    kernels::conv2d_forward<T>(g, in, cspan(params.tensors[L.weight].data), cspan(params.tensors[L.bias].data),
                               {out.data(), out.size()}, scratch);
    check_finite(out, L.name);
  };

  c.height = height;
  c.width = width;
  c.input.assign(patch.begin(), patch.end());
  conv(arch_.stem, cspan(c.input), c.stem_out);

  const std::size_t nb = arch_.blocks.size();
  c.block_in.resize(nb);
  c.block_act_a.resize(nb);
  c.block_pre_b.resize(nb);
  c.block_act_b.resize(nb);
  std::vector<T> current = c.stem_out;
  for (std::size_t b = 0; b < nb; ++b) {
    const ResidualBlock& blk = arch_.blocks[b];
    c.block_in[b] = current;
    relu_into(c.block_in[b], c.block_act_a[b], linear);
    conv(blk.conv_a, cspan(c.block_act_a[b]), c.block_pre_b[b]);
    relu_into(c.block_pre_b[b], c.block_act_b[b], linear);
    std::vector<T> out;
    conv(blk.conv_b, cspan(c.block_act_b[b]), out);
    // Identity skip into the leading channels.
    const std::size_t skip = static_cast<std::size_t>(blk.in_channels) * pixels;
    for (std::size_t i = 0; i < skip; ++i) out[i] += c.block_in[b][i];
    current = std::move(out);
  }
  relu_into(current, c.final_act, linear);
  conv(arch_.trunk_final, cspan(c.final_act), c.trunk_pre);
  relu_into(c.trunk_pre, c.trunk_act, linear);
  c.trunk_out = c.trunk_act;
  if (dropout_active(mode)) {
    c.mask = dropout_mask(c.trunk_out.size(), seed);
    for (std::size_t i = 0; i < c.trunk_out.size(); ++i) c.trunk_out[i] *= c.mask[i];
  } else {
    c.mask.clear();
  }

  DualTaskOutput<T> out;
  out.height = height;
  out.width = width;
  out.classes = cfg_.class_count;
  c.head_in.assign(arch_.heads.size(), {});
  c.head_pre.assign(arch_.heads.size(), {});
  for (std::size_t h = 0; h < arch_.heads.size(); ++h) {
    const Head& head = arch_.heads[h];
    const std::size_t nl = head.convs.size();
    c.head_in[h].resize(nl);
    c.head_pre[h].resize(nl);
    c.head_in[h][0] = c.trunk_out;
    for (std::size_t l = 0; l < nl; ++l) {
      conv(head.convs[l], cspan(c.head_in[h][l]), c.head_pre[h][l]);
      if (l + 1 < nl) relu_into(c.head_pre[h][l], c.head_in[h][l + 1], linear);
    }
    out.field(head.kind) = c.head_pre[h][nl - 1];
  }
  return out;
}

template <class T>
void Network<T>::backward(const Params<T>& params, const ForwardCache<T>& c, const DualTaskOutput<T>& grad_out,
                          Params<T>& grads) const {
  const int height = c.height, width = c.width;
  const std::size_t pixels = static_cast<std::size_t>(height) * width;
  const bool linear = cfg_.linear_activations;
  std::vector<T> scratch;

  // Backprop through one conv: returns d(input) when wanted.
  auto conv_back = [&](int idx, const std::vector<T>& in, const std::vector<T>& grad, std::vector<T>* grad_in) {
    const ConvLayer& L = arch_.convs[idx];
    const auto g = L.geometry(height, width);
    std::span<T> gi;
    if (grad_in) {
      grad_in->resize(g.input_size());
      gi = {grad_in->data(), grad_in->size()};
    }
    auto& gw = grads.tensors[L.weight].data;
    auto& gb = grads.tensors[L.bias].data;
    kernels::conv2d_backward<T>(g, cspan(in), cspan(params.tensors[L.weight].data), cspan(grad), gi,
                                {gw.data(), gw.size()}, {gb.data(), gb.size()}, scratch);
  };

  std::vector<T> grad_trunk_out(c.trunk_out.size(), T(0));
  for (std::size_t h = 0; h < arch_.heads.size(); ++h) {
    const Head& head = arch_.heads[h];
    const std::vector<T>& g_head = grad_out.field(head.kind);
    if (g_head.empty()) continue;
    std::vector<T> grad = g_head;
    for (std::size_t l = head.convs.size(); l-- > 0;) {
      std::vector<T> grad_in;
      conv_back(head.convs[l], c.head_in[h][l], grad, &grad_in);
      if (l > 0) {
        relu_backward(c.head_pre[h][l - 1], grad_in, linear);
        grad = std::move(grad_in);
      } else {
        for (std::size_t i = 0; i < grad_in.size(); ++i) grad_trunk_out[i] += grad_in[i];
      }
    }
  }

  if (!c.mask.empty())
    for (std::size_t i = 0; i < grad_trunk_out.size(); ++i) grad_trunk_out[i] *= c.mask[i];
  relu_backward(c.trunk_pre, grad_trunk_out, linear);
  std::vector<T> grad;
  conv_back(arch_.trunk_final, c.final_act, grad_trunk_out, &grad);
  // final_act = relu(last block output); the block output is not cached, but
  // relu'(x) only needs its sign, which final_act > 0 encodes.
  if (!linear)
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!(c.final_act[i] > T(0))) grad[i] = T(0);

  for (std::size_t b = arch_.blocks.size(); b-- > 0;) {
    const ResidualBlock& blk = arch_.blocks[b];
    std::vector<T> g_act_b;
    conv_back(blk.conv_b, c.block_act_b[b], grad, &g_act_b);
    relu_backward(c.block_pre_b[b], g_act_b, linear);
    std::vector<T> g_act_a;
    conv_back(blk.conv_a, c.block_act_a[b], g_act_b, &g_act_a);
    relu_backward(c.block_in[b], g_act_a, linear);
    // Skip connection.
    const std::size_t skip = static_cast<std::size_t>(blk.in_channels) * pixels;
    for (std::size_t i = 0; i < skip; ++i) g_act_a[i] += grad[i];
    grad = std::move(g_act_a);
  }
  conv_back(arch_.stem, c.input, grad, nullptr);
}

template <class T>
std::vector<T> normalize_input(const ModelConfig& cfg, std::span<const float> mr) {
  std::vector<T> out(mr.size());
  for (std::size_t i = 0; i < mr.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(mr[i]) - cfg.input_offset) / cfg.input_scale);
  return out;
}

template struct Params<float>;
template struct Params<double>;
template struct DualTaskOutput<float>;
template struct DualTaskOutput<double>;
template class Network<float>;
template class Network<double>;
template std::vector<float> normalize_input<float>(const ModelConfig&, std::span<const float>);
template std::vector<double> normalize_input<double>(const ModelConfig&, std::span<const float>);

}  // namespace hetmt
