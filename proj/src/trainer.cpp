#include "hetmt/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "hetmt/checkpoint.hpp"
#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"
#include "hetmt/kernels.hpp"

namespace hetmt {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (patch_size < 1) throw ConfigError("patch size must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("ADAM betas must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("ADAM epsilon must be positive");
  if (max_iterations < 0) throw ConfigError("max iterations must be nonnegative");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint interval must be positive");
  if (keep_checkpoints < 1) throw ConfigError("keep-count must be >= 1");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"patch_size", c.patch_size},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"epsilon", c.epsilon},
           {"max_iterations", c.max_iterations},
           {"checkpoint_interval", c.checkpoint_interval},
           {"keep_checkpoints", c.keep_checkpoints},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("patch_size", c.patch_size);
  get("batch_size", c.batch_size);
  get("learning_rate", c.learning_rate);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("epsilon", c.epsilon);
  get("max_iterations", c.max_iterations);
  get("checkpoint_interval", c.checkpoint_interval);
  get("keep_checkpoints", c.keep_checkpoints);
  get("seed", c.seed);
}

TrainingSet make_training_set(const std::vector<CaseBundle>& cases, const ModelConfig& cfg) {
  TrainingSet set;
  for (const auto& b : cases) {
    TrainingCase tc;
    tc.id = b.id;
    tc.depth = b.mr.depth();
    tc.height = b.mr.height();
    tc.width = b.mr.width();
    tc.input = normalize_input<float>(cfg, b.mr.values);
    tc.target.resize(b.ct.values.size());
    for (std::size_t i = 0; i < tc.target.size(); ++i)
      tc.target[i] = static_cast<float>((static_cast<double>(b.ct.values[i]) - cfg.target_offset) / cfg.target_scale);
    tc.labels = b.labels.labels;
    set.cases.push_back(std::move(tc));
  }
  return set;
}

TrainingSet load_training_set(const Manifest& manifest, const ModelConfig& cfg, const std::string& split) {
  std::vector<CaseBundle> cases;
  for (const auto& e : manifest.split(split)) cases.push_back(load_case(manifest, e, cfg.class_count));
  if (cases.empty()) throw ConfigError("manifest has no '" + split + "' cases");
  return make_training_set(cases, cfg);
}

PatchBatch sample_patch_batch(const TrainingSet& data, const TrainConfig& cfg, Rng& rng) {
  if (data.cases.empty()) throw ConfigError("cannot sample patches from an empty training set");
  const int p = cfg.patch_size;
  bool any_fits = false;
  for (const auto& c : data.cases)
    if (c.height >= p && c.width >= p) any_fits = true;
  if (!any_fits) throw ConfigError("patch size " + std::to_string(p) + " exceeds every training slice");

  PatchBatch batch;
  batch.patch_size = p;
  batch.items.reserve(cfg.batch_size);
  while (static_cast<int>(batch.items.size()) < cfg.batch_size) {
    Patch patch;
    patch.case_index = static_cast<int>(rng.index(data.cases.size()));
    const TrainingCase& c = data.cases[patch.case_index];
    if (c.height < p || c.width < p) continue;
    patch.slice = static_cast<int>(rng.index(c.depth));
    patch.y0 = static_cast<int>(rng.index(c.height - p + 1));
    patch.x0 = static_cast<int>(rng.index(c.width - p + 1));
    const std::size_t n = static_cast<std::size_t>(p) * p;
    patch.x.resize(n);
    patch.y1.resize(n);
    patch.y2.resize(n);
    const std::size_t slice_off = static_cast<std::size_t>(patch.slice) * c.height * c.width;
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x) {
        const std::size_t src = slice_off + static_cast<std::size_t>(patch.y0 + y) * c.width + patch.x0 + x;
        const std::size_t dst = static_cast<std::size_t>(y) * p + x;
        patch.x[dst] = c.input[src];
        patch.y1[dst] = c.target[src];
        patch.y2[dst] = c.labels[src];
      }
    batch.items.push_back(std::move(patch));
  }
  return batch;
}

TrainState init_train_state(const Network<float>& net, std::uint64_t init_seed) {
  TrainState s;
  s.params = net.init(init_seed);
  s.adam_m = s.params.zeros_like();
  s.adam_v = s.params.zeros_like();
  return s;
}

template <class T>
LossBreakdown variant_loss(const Network<T>& net, const Params<T>& params, const DualTaskOutput<T>& out,
                           std::span<const T> y1, std::span<const std::uint8_t> y2, DualTaskOutput<T>* grad_out,
                           Params<T>* grad_params, double weight) {
  const ModelConfig& cfg = net.config();
  const VariantTraits tr = cfg.traits();
  auto cs = [](const std::vector<T>& v) { return std::span<const T>(v.data(), v.size()); };
  auto gs = [&](HeadKind k, std::size_t n) -> std::span<T> {
    if (!grad_out) return {};
    auto& f = grad_out->field(k);
    if (f.size() != n) f.assign(n, T(0));
    return {f.data(), f.size()};
  };
  if (grad_out) {
    grad_out->height = out.height;
    grad_out->width = out.width;
    grad_out->classes = out.classes;
  }

  LossBreakdown b;
  if (tr.homoscedastic) {
    const auto i1 = params.find("homo.s1"), i2 = params.find("homo.s2");
    if (!i1 || !i2) throw ConfigError("homoscedastic variant needs homo.s1 and homo.s2");
    T* g1 = grad_params ? &grad_params->tensors[*i1].data[0] : nullptr;
    T* g2 = grad_params ? &grad_params->tensors[*i2].data[0] : nullptr;
    return joint_homo_loss<T>(out, y1, y2, params.tensors[*i1].data[0], params.tensors[*i2].data[0], grad_out, g1,
                              g2, weight);
  }
  if (tr.regression && tr.segmentation && tr.heteroscedastic)
    return joint_hetero_loss<T>(out, y1, y2, grad_out, weight);

  if (tr.regression) {
    if (tr.heteroscedastic) {
      const auto m = regression_nll<T>(y1, cs(out.reg_mean), cs(out.reg_logvar), gs(HeadKind::reg_mean, out.reg_mean.size()),
                                       gs(HeadKind::reg_logvar, out.reg_logvar.size()), weight);
      b.reg_data_term = m.data_term;
      b.reg_log_term = m.log_term;
    } else {
      const auto m = mse_loss<T>(y1, cs(out.reg_mean), gs(HeadKind::reg_mean, out.reg_mean.size()), weight);
      b.reg_data_term = m.data_term;
    }
  }
  if (tr.segmentation) {
    if (tr.heteroscedastic) {
      const auto m = classification_nll<T>(cs(out.seg_logits), cs(out.seg_logvar), y2, out.classes,
                                           gs(HeadKind::seg_logits, out.seg_logits.size()),
                                           gs(HeadKind::seg_logvar, out.seg_logvar.size()), weight);
      b.seg_data_term = m.data_term;
      b.seg_log_term = m.log_term;
    } else {
      const auto m = cross_entropy_loss<T>(cs(out.seg_logits), y2, out.classes,
                                           gs(HeadKind::seg_logits, out.seg_logits.size()), weight);
      b.seg_data_term = m.data_term;
    }
  }
  b.finalize();
  return b;
}

template <class T>
LossBreakdown batch_gradient(const Network<T>& net, const Params<T>& params,
                             const std::vector<std::vector<T>>& inputs, const std::vector<std::vector<T>>& targets,
                             const std::vector<std::vector<std::uint8_t>>& labels, int height, int width,
                             Mode mode, const std::vector<std::uint64_t>& seeds, Params<T>& grads) {
  const int n = static_cast<int>(inputs.size());
  if (n == 0) throw ConfigError("empty batch");
  const double weight = 1.0 / n;
  std::vector<Params<T>> item_grads(n);
  std::vector<LossBreakdown> item_loss(n);
  const std::size_t pixels = static_cast<std::size_t>(height) * width;
  kernels::parallel_for(n, [&](int i) {
    ForwardCache<T> cache;
    const auto out = net.forward(params, {inputs[i].data(), inputs[i].size()}, height, width, mode, seeds[i], &cache);
    item_grads[i] = params.zeros_like();
    DualTaskOutput<T> gout;
    const std::vector<T> no_target(pixels, T(0));
    const std::vector<std::uint8_t> no_labels(pixels, 0);
    const auto& y1 = targets.empty() ? no_target : targets[i];
    const auto& y2 = labels.empty() ? no_labels : labels[i];
    item_loss[i] = variant_loss<T>(net, params, out, {y1.data(), y1.size()}, {y2.data(), y2.size()}, &gout,
                                   &item_grads[i], weight);
    net.backward(params, cache, gout, item_grads[i]);
  });
  LossBreakdown total;
  for (int i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < grads.tensors.size(); ++t) {
      auto& dst = grads.tensors[t].data;
      const auto& src = item_grads[i].tensors[t].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    total.reg_data_term += item_loss[i].reg_data_term * weight;
    total.reg_log_term += item_loss[i].reg_log_term * weight;
    total.seg_data_term += item_loss[i].seg_data_term * weight;
    total.seg_log_term += item_loss[i].seg_log_term * weight;
  }
  total.finalize();
  return total;
}

void adam_update(Params<float>& params, const Params<float>& grads, Params<float>& m, Params<float>& v,
                 std::int64_t step, const TrainConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& w = params.tensors[t].data;
    const auto& g = grads.tensors[t].data;
    auto& mt = m.tensors[t].data;
    auto& vt = v.tensors[t].data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * mt[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * vt[i] + (1.0 - cfg.beta2) * gi * gi;
      mt[i] = static_cast<float>(mi);
      vt[i] = static_cast<float>(vi);
      const double m_hat = mi / bc1;
      const double v_hat = vi / bc2;
      w[i] = static_cast<float>(w[i] - cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
    }
  }
}

LossBreakdown train_step(const Network<float>& net, TrainState& state, const PatchBatch& batch,
                         const TrainConfig& cfg) {
  const int n = static_cast<int>(batch.items.size());
  std::vector<std::vector<float>> inputs(n), targets(n);
  std::vector<std::vector<std::uint8_t>> labels(n);
  std::vector<std::uint64_t> seeds(n);
  for (int i = 0; i < n; ++i) {
    inputs[i] = batch.items[i].x;
    targets[i] = batch.items[i].y1;
    labels[i] = batch.items[i].y2;
    seeds[i] = derive_seed(cfg.seed, {static_cast<std::uint64_t>(state.iteration), static_cast<std::uint64_t>(i), 0xD0});
  }
  Params<float> grads = state.params.zeros_like();
  const LossBreakdown loss = batch_gradient<float>(net, state.params, inputs, targets, labels, batch.patch_size,
                                                   batch.patch_size, Mode::train, seeds, grads);
  if (!std::isfinite(loss.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << state.iteration + 1 << " (reg_data=" << loss.reg_data_term
        << ", reg_log=" << loss.reg_log_term << ", seg_data=" << loss.seg_data_term
        << ", seg_log=" << loss.seg_log_term << ")";
    throw NumericError(msg.str());
  }
  state.iteration += 1;
  adam_update(state.params, grads, state.adam_m, state.adam_v, state.iteration, cfg);
  state.history.push_back({state.iteration, loss});
  return loss;
}

// ---------------------------------------------------------------------------
// Loop, checkpoints and loss history

namespace {

constexpr const char* kHistoryHeader = "iteration,total,reg_data_term,reg_log_term,seg_data_term,seg_log_term";

std::string checkpoint_stem(std::int64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%07" PRId64, iteration);
  return buf;
}

std::string format_history(const std::vector<LossRecord>& history) {
  std::string out = std::string(kHistoryHeader) + "\n";
  char line[256];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%" PRId64 ",%.9g,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.loss.total,
                  r.loss.reg_data_term, r.loss.reg_log_term, r.loss.seg_data_term, r.loss.seg_log_term);
    out += line;
  }
  return out;
}

std::vector<LossRecord> parse_history(const fs::path& path, std::int64_t up_to) {
  std::vector<LossRecord> out;
  if (!fs::exists(path)) return out;
  std::istringstream in(io::read_text(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    LossRecord r;
    if (std::sscanf(line.c_str(), "%" SCNd64 ",%lf,%lf,%lf,%lf,%lf", &r.iteration, &r.loss.total,
                    &r.loss.reg_data_term, &r.loss.reg_log_term, &r.loss.seg_data_term,
                    &r.loss.seg_log_term) != 6)
      throw FormatError("bad loss history line in " + path.string() + ": " + line);
    if (r.iteration <= up_to) out.push_back(r);
  }
  return out;
}

}  // namespace

std::vector<fs::path> list_checkpoints(const fs::path& dir) {
  std::vector<std::pair<std::int64_t, fs::path>> found;
  if (!fs::is_directory(dir)) return {};
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    std::int64_t it = 0;
    if (name.rfind("ckpt_", 0) == 0 && entry.path().extension() == ".json" &&
        std::sscanf(name.c_str(), "ckpt_%" SCNd64, &it) == 1)
      found.emplace_back(it, io::stem_path(entry.path()));
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(f.second);
  return out;
}

TrainResult train_loop(const TrainConfig& cfg, const ModelConfig& model_cfg, const TrainingSet& data,
                       const fs::path& out_dir, bool resume, const ProgressFn& progress) {
  cfg.validate();
  model_cfg.validate();
  io::ensure_dir(out_dir);
  const Network<float> net(model_cfg);
  const std::uint64_t init_seed = derive_seed(cfg.seed, {0x1A17});
  const fs::path history_path = out_dir / "loss_history.csv";

  TrainState state;
  auto existing = list_checkpoints(out_dir);
  if (resume && !existing.empty()) {
    Checkpoint ck = load_checkpoint(existing.back());
    if (!ck.adam_m) throw FormatError("checkpoint " + existing.back().string() + " has no optimizer state");
    if (json(ck.config) != json(model_cfg))
      throw ConfigError("checkpoint in " + out_dir.string() + " was written with a different model config");
    state.params = std::move(ck.params);
    state.adam_m = std::move(*ck.adam_m);
    state.adam_v = std::move(*ck.adam_v);
    state.iteration = ck.iteration;
    state.history = parse_history(history_path, ck.iteration);
  } else {
    for (const auto& stale : existing) {
      fs::remove(fs::path(stale).concat(".json"));
      fs::remove(fs::path(stale).concat(".bin"));
    }
    state = init_train_state(net, init_seed);
  }

  json echo{{"train", cfg}, {"model", model_cfg}, {"init_seed", init_seed}};
  io::write_text(out_dir / "train_config.json", echo.dump(2) + "\n");

  auto write_checkpoint = [&] {
    Checkpoint ck{model_cfg, state.iteration, init_seed, state.params, state.adam_m, state.adam_v};
    save_checkpoint(ck, out_dir / checkpoint_stem(state.iteration));
    auto all = list_checkpoints(out_dir);
    while (static_cast<int>(all.size()) > cfg.keep_checkpoints) {
      fs::remove(fs::path(all.front()).concat(".json"));
      fs::remove(fs::path(all.front()).concat(".bin"));
      all.erase(all.begin());
    }
    io::write_text(history_path, format_history(state.history));
  };

  while (state.iteration < cfg.max_iterations) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(state.iteration), 0xBA7C}));
    const PatchBatch batch = sample_patch_batch(data, cfg, rng);
    const LossBreakdown loss = train_step(net, state, batch, cfg);
    if (progress) progress(state.iteration, loss);
    if (state.iteration % cfg.checkpoint_interval == 0 || state.iteration == cfg.max_iterations) write_checkpoint();
  }
  if (list_checkpoints(out_dir).empty()) write_checkpoint();
  io::write_text(history_path, format_history(state.history));

  TrainResult result;
  result.checkpoints = list_checkpoints(out_dir);
  result.history_csv = history_path;
  result.state = std::move(state);
  return result;
}

TrainResult train_loop(const TrainConfig& cfg, const ModelConfig& model_cfg, const Manifest& manifest,
                       const fs::path& out_dir, bool resume, const ProgressFn& progress) {
  return train_loop(cfg, model_cfg, load_training_set(manifest, model_cfg, "train"), out_dir, resume, progress);
}

template LossBreakdown variant_loss<float>(const Network<float>&, const Params<float>&, const DualTaskOutput<float>&,
                                           std::span<const float>, std::span<const std::uint8_t>,
                                           DualTaskOutput<float>*, Params<float>*, double);
template LossBreakdown variant_loss<double>(const Network<double>&, const Params<double>&,
                                            const DualTaskOutput<double>&, std::span<const double>,
                                            std::span<const std::uint8_t>, DualTaskOutput<double>*, Params<double>*,
                                            double);
template LossBreakdown batch_gradient<float>(const Network<float>&, const Params<float>&,
                                             const std::vector<std::vector<float>>&,
                                             const std::vector<std::vector<float>>&,
                                             const std::vector<std::vector<std::uint8_t>>&, int, int, Mode,
                                             const std::vector<std::uint64_t>&, Params<float>&);
template LossBreakdown batch_gradient<double>(const Network<double>&, const Params<double>&,
                                              const std::vector<std::vector<double>>&,
                                              const std::vector<std::vector<double>>&,
                                              const std::vector<std::vector<std::uint8_t>>&, int, int, Mode,
                                              const std::vector<std::uint64_t>&, Params<double>&);

}  // namespace hetmt
