#include "hetmt/inference.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"
#include "hetmt/kernels.hpp"
#include "hetmt/loss.hpp"
#include "hetmt/rng.hpp"

namespace hetmt {

namespace fs = std::filesystem;
using nlohmann::json;

LoadedModel load_model(const fs::path& checkpoint) {
  Checkpoint ck = load_checkpoint(checkpoint);
  return LoadedModel(io::stem_path(checkpoint).filename().string(), ck.config, std::move(ck.params));
}

std::vector<DualTaskOutput<float>> mc_forward_samples(const std::vector<LoadedModel>& models,
                                                      std::span<const float> patch, int height, int width, int T,
                                                      std::uint64_t seed) {
  if (models.empty()) throw ConfigError("need at least one checkpoint");
  if (T < 2) throw ConfigError("need T >= 2 stochastic samples");
  const int k = static_cast<int>(models.size());
  if (T % k != 0) throw ConfigError("T must be divisible by the number of checkpoints");
  const json ref = models.front().net.config();
  for (const auto& m : models)
    if (json(m.net.config()) != ref) throw ConfigError("checkpoint " + m.id + " has a different model config");

  const int per = T / k;
  std::vector<DualTaskOutput<float>> out(T);
  kernels::parallel_for(T, [&](int t) {
    const int ci = t / per, si = t % per;
    const auto& m = models[ci];
    out[t] = m.net.forward(m.params, patch, height, width, Mode::mc_sample,
                           derive_seed(seed, {static_cast<std::uint64_t>(ci), static_cast<std::uint64_t>(si)}));
  });
  return out;
}

StochasticSample to_sample(const DualTaskOutput<float>& out, const ModelConfig& cfg) {
  StochasticSample s;
  const std::size_t n = out.pixels();
  const double scale = cfg.target_scale, offset = cfg.target_offset;
  if (!out.reg_mean.empty()) {
    s.reg_mean.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.reg_mean[i] = static_cast<double>(out.reg_mean[i]) * scale + offset;
  }
  if (!out.reg_logvar.empty()) {
    s.reg_intrinsic.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      s.reg_intrinsic[i] = std::exp(static_cast<double>(out.reg_logvar[i])) * scale * scale;
  }
  if (!out.seg_logits.empty()) {
    const std::span<const float> logits(out.seg_logits.data(), out.seg_logits.size());
    std::vector<float> probs;
    if (!out.seg_logvar.empty()) {
      probs = scaled_softmax<float>(logits, {out.seg_logvar.data(), out.seg_logvar.size()}, out.classes);
    } else {
      // Plain softmax: scaled_softmax with 2 sigma^2 = 1.
      const std::vector<float> unit(n, static_cast<float>(std::log(0.5)));
      probs = scaled_softmax<float>(logits, {unit.data(), unit.size()}, out.classes);
    }
    s.seg_prob.assign(probs.begin(), probs.end());
  }
  if (!out.seg_logvar.empty()) {
    s.seg_intrinsic.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.seg_intrinsic[i] = std::exp(static_cast<double>(out.seg_logvar[i]));
  }
  return s;
}

namespace {

// Mean and population variance over samples of one field. Deviations are
// taken from the first sample so identical samples give exactly zero variance.
void moments(std::span<const StochasticSample> samples, std::vector<double> StochasticSample::*field,
             std::vector<double>& mean, std::vector<double>& var) {
  const std::vector<double>& ref = samples.front().*field;
  const std::size_t n = ref.size();
  const double inv_t = 1.0 / static_cast<double>(samples.size());
  std::vector<double> shift(n, 0.0);
  for (const auto& s : samples) {
    if ((s.*field).size() != n) throw ConfigError("samples disagree in size");
    for (std::size_t i = 0; i < n; ++i) shift[i] += (s.*field)[i] - ref[i];
  }
  for (double& d : shift) d *= inv_t;
  var.assign(n, 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (s.*field)[i] - ref[i] - shift[i];
      var[i] += d * d;
    }
  for (double& v : var) v *= inv_t;
  mean.resize(n);
  for (std::size_t i = 0; i < n; ++i) mean[i] = ref[i] + shift[i];
}

std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace

RegressionStats aggregate_regression(std::span<const StochasticSample> samples) {
  if (samples.size() < 2) throw ConfigError("aggregation needs at least 2 samples");
  if (samples.front().reg_mean.empty()) throw ConfigError("samples carry no regression output");
  RegressionStats r;
  std::vector<double> mean, var;
  moments(samples, &StochasticSample::reg_mean, mean, var);
  r.mean = to_float(mean);
  r.param_var = to_float(var);
  if (!samples.front().reg_intrinsic.empty()) {
    std::vector<double> im, iv;
    moments(samples, &StochasticSample::reg_intrinsic, im, iv);
    r.intrinsic_var = to_float(im);
  } else {
    r.intrinsic_var.assign(mean.size(), 0.0f);
  }
  r.total_var.resize(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) r.total_var[i] = r.intrinsic_var[i] + r.param_var[i];
  return r;
}

SegmentationStats aggregate_segmentation(std::span<const StochasticSample> samples, int classes) {
  if (samples.size() < 2) throw ConfigError("aggregation needs at least 2 samples");
  if (samples.front().seg_prob.empty()) throw ConfigError("samples carry no segmentation output");
  SegmentationStats s;
  s.classes = classes;
  std::vector<double> mean, var;
  moments(samples, &StochasticSample::seg_prob, mean, var);
  const std::size_t n = mean.size() / static_cast<std::size_t>(classes);
  s.mean_prob = to_float(mean);
  s.param_var = to_float(var);
  s.label.resize(n);
  for (std::size_t v = 0; v < n; ++v) {
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (mean[c * n + v] > mean[best * n + v]) best = c;
    s.label[v] = static_cast<std::uint8_t>(best);
  }
  if (!samples.front().seg_intrinsic.empty()) {
    std::vector<double> im, iv;
    moments(samples, &StochasticSample::seg_intrinsic, im, iv);
    s.intrinsic = to_float(im);
  } else {
    s.intrinsic.assign(n, 0.0f);
  }
  return s;
}

StitchPlan plan_stitch(const std::vector<int>& shape, int patch, int stride) {
  if (shape.size() < 2) throw ConfigError("stitch plan needs at least 2 dims");
  StitchPlan p;
  p.height = shape[shape.size() - 2];
  p.width = shape.back();
  p.patch = patch;
  p.stride = stride;
  if (patch < 1 || patch > p.height || patch > p.width)
    throw ConfigError("patch size " + std::to_string(patch) + " does not fit the volume");
  if (stride < 1 || stride > patch) throw ConfigError("stride must be in [1, patch size]");
  auto axis = [&](int size) {
    std::vector<int> o;
    for (int s = 0;; s += stride) {
      const int clamped = std::min(s, size - patch);
      if (o.empty() || o.back() != clamped) o.push_back(clamped);
      if (clamped == size - patch) break;
    }
    return o;
  };
  const auto ys = axis(p.height), xs = axis(p.width);
  for (int y : ys)
    for (int x : xs) p.origins.push_back({y, x});
  p.coverage.assign(static_cast<std::size_t>(p.height) * p.width, 0);
  for (const auto& o : p.origins)
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x) ++p.coverage[static_cast<std::size_t>(o[0] + y) * p.width + o[1] + x];
  return p;
}

StochasticPrediction sliding_window_predict(const std::vector<LoadedModel>& models, const Volume& mr,
                                            const StitchPlan& plan, int T, std::uint64_t seed) {
  if (models.empty()) throw ConfigError("need at least one checkpoint");
  if (mr.height() != plan.height || mr.width() != plan.width) throw ConfigError("stitch plan does not match volume");
  const ModelConfig& cfg = models.front().net.config();
  const VariantTraits tr = cfg.traits();
  const int C = cfg.class_count;
  const int H = plan.height, W = plan.width, P = plan.patch;
  const std::size_t slice_n = static_cast<std::size_t>(H) * W;
  const std::size_t patch_n = static_cast<std::size_t>(P) * P;

  StochasticPrediction pred;
  pred.T = T;
  pred.classes = C;
  for (const auto& m : models) pred.checkpoint_ids.push_back(m.id);
  pred.has_regression = tr.regression;
  pred.has_segmentation = tr.segmentation;
  auto make = [&](VolumeKind kind) {
    Volume v = Volume::scalar(mr.shape, kind);
    v.spacing = mr.spacing;
    return v;
  };
  if (tr.regression) {
    pred.reg_mean = make(VolumeKind::intensity);
    pred.reg_param_var = make(VolumeKind::variance);
    pred.reg_intrinsic_var = make(VolumeKind::variance);
    pred.reg_total_var = make(VolumeKind::variance);
  }
  if (tr.segmentation) {
    for (int c = 0; c < C; ++c) {
      pred.seg_mean_prob.push_back(make(VolumeKind::intensity));
      pred.seg_param_var.push_back(make(VolumeKind::variance));
    }
    pred.seg_label = Volume::label_map(mr.shape);
    pred.seg_label.spacing = mr.spacing;
    pred.seg_intrinsic = make(VolumeKind::variance);
  }

  const std::vector<float> input_all = normalize_input<float>(cfg, mr.values);
  const int n_patches = static_cast<int>(plan.origins.size());

  for (int z = 0; z < mr.depth(); ++z) {
    const float* slice = input_all.data() + static_cast<std::size_t>(z) * slice_n;
    std::vector<std::vector<StochasticSample>> per_patch(n_patches);
    kernels::parallel_for(n_patches, [&](int j) {
      const auto& o = plan.origins[j];
      std::vector<float> patch(patch_n);
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x)
          patch[static_cast<std::size_t>(y) * P + x] = slice[static_cast<std::size_t>(o[0] + y) * W + o[1] + x];
      const auto outs = mc_forward_samples(models, patch, P, P, T,
                                           derive_seed(seed, {static_cast<std::uint64_t>(z), static_cast<std::uint64_t>(j)}));
      per_patch[j].reserve(T);
      for (const auto& out : outs) per_patch[j].push_back(to_sample(out, cfg));
    });

    // Stitch each sample's field over the slice, in patch order.
    std::vector<StochasticSample> stitched(T);
    for (int t = 0; t < T; ++t) {
      StochasticSample& s = stitched[t];
      const StochasticSample& first = per_patch[0][t];
      if (!first.reg_mean.empty()) s.reg_mean.assign(slice_n, 0.0);
      if (!first.reg_intrinsic.empty()) s.reg_intrinsic.assign(slice_n, 0.0);
      if (!first.seg_prob.empty()) s.seg_prob.assign(slice_n * C, 0.0);
      if (!first.seg_intrinsic.empty()) s.seg_intrinsic.assign(slice_n, 0.0);
      for (int j = 0; j < n_patches; ++j) {
        const auto& o = plan.origins[j];
        const StochasticSample& ps = per_patch[j][t];
        for (int y = 0; y < P; ++y)
          for (int x = 0; x < P; ++x) {
            const std::size_t src = static_cast<std::size_t>(y) * P + x;
            const std::size_t dst = static_cast<std::size_t>(o[0] + y) * W + o[1] + x;
            if (!s.reg_mean.empty()) s.reg_mean[dst] += ps.reg_mean[src];
            if (!s.reg_intrinsic.empty()) s.reg_intrinsic[dst] += ps.reg_intrinsic[src];
            if (!s.seg_intrinsic.empty()) s.seg_intrinsic[dst] += ps.seg_intrinsic[src];
            for (int c = 0; c < C && !s.seg_prob.empty(); ++c)
              s.seg_prob[c * slice_n + dst] += ps.seg_prob[c * patch_n + src];
          }
      }
      for (std::size_t v = 0; v < slice_n; ++v) {
        const double inv = 1.0 / plan.coverage[v];
        if (!s.reg_mean.empty()) s.reg_mean[v] *= inv;
        if (!s.reg_intrinsic.empty()) s.reg_intrinsic[v] *= inv;
        if (!s.seg_intrinsic.empty()) s.seg_intrinsic[v] *= inv;
        for (int c = 0; c < C && !s.seg_prob.empty(); ++c) s.seg_prob[c * slice_n + v] *= inv;
      }
    }

    const std::size_t off = static_cast<std::size_t>(z) * slice_n;
    if (tr.regression) {
      const RegressionStats r = aggregate_regression(stitched);
      std::copy(r.mean.begin(), r.mean.end(), pred.reg_mean.values.begin() + off);
      std::copy(r.param_var.begin(), r.param_var.end(), pred.reg_param_var.values.begin() + off);
      std::copy(r.intrinsic_var.begin(), r.intrinsic_var.end(), pred.reg_intrinsic_var.values.begin() + off);
      std::copy(r.total_var.begin(), r.total_var.end(), pred.reg_total_var.values.begin() + off);
    }
    if (tr.segmentation) {
      const SegmentationStats s = aggregate_segmentation(stitched, C);
      for (int c = 0; c < C; ++c) {
        std::copy_n(s.mean_prob.begin() + c * slice_n, slice_n, pred.seg_mean_prob[c].values.begin() + off);
        std::copy_n(s.param_var.begin() + c * slice_n, slice_n, pred.seg_param_var[c].values.begin() + off);
      }
      std::copy(s.label.begin(), s.label.end(), pred.seg_label.labels.begin() + off);
      std::copy(s.intrinsic.begin(), s.intrinsic.end(), pred.seg_intrinsic.values.begin() + off);
    }
  }
  return pred;
}

void write_prediction(const StochasticPrediction& p, const fs::path& dir) {
  io::ensure_dir(dir);
  json fields = json::object();
  auto put = [&](const std::string& name, const Volume& v) {
    try {
      write_volume(v, dir / name);
    } catch (const FormatError& e) {
      throw NumericError(name + ": " + e.what());
    }
    fields[name] = name;
  };
  if (p.has_regression) {
    put("reg_mean", p.reg_mean);
    put("reg_param_var", p.reg_param_var);
    put("reg_intrinsic_var", p.reg_intrinsic_var);
    put("reg_total_var", p.reg_total_var);
  }
  if (p.has_segmentation) {
    for (int c = 0; c < p.classes; ++c) {
      put("seg_mean_prob_c" + std::to_string(c), p.seg_mean_prob[c]);
      put("seg_param_var_c" + std::to_string(c), p.seg_param_var[c]);
    }
    put("seg_label", p.seg_label);
    put("seg_intrinsic", p.seg_intrinsic);
  }
  json index{{"T", p.T},
             {"classes", p.classes},
             {"checkpoints", p.checkpoint_ids},
             {"regression", p.has_regression},
             {"segmentation", p.has_segmentation},
             {"fields", fields}};
  io::write_text(dir / "index.json", index.dump(2) + "\n");
}

StochasticPrediction read_prediction(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path)) throw IoError("prediction index not found: " + index_path.string());
  json index;
  try {
    index = json::parse(io::read_text(index_path));
  } catch (const json::exception& e) {
    throw FormatError("bad prediction index " + index_path.string() + ": " + e.what());
  }
  StochasticPrediction p;
  p.T = index.at("T").get<int>();
  p.classes = index.at("classes").get<int>();
  p.checkpoint_ids = index.at("checkpoints").get<std::vector<std::string>>();
  p.has_regression = index.at("regression").get<bool>();
  p.has_segmentation = index.at("segmentation").get<bool>();
  if (p.has_regression) {
    p.reg_mean = read_volume(dir / "reg_mean");
    p.reg_param_var = read_volume(dir / "reg_param_var");
    p.reg_intrinsic_var = read_volume(dir / "reg_intrinsic_var");
    p.reg_total_var = read_volume(dir / "reg_total_var");
  }
  if (p.has_segmentation) {
    for (int c = 0; c < p.classes; ++c) {
      p.seg_mean_prob.push_back(read_volume(dir / ("seg_mean_prob_c" + std::to_string(c))));
      p.seg_param_var.push_back(read_volume(dir / ("seg_param_var_c" + std::to_string(c))));
    }
    p.seg_label = read_volume(dir / "seg_label", p.classes);
    p.seg_intrinsic = read_volume(dir / "seg_intrinsic");
  }
  return p;
}

}  // namespace hetmt
