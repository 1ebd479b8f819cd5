#include "hetmt/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hetmt/config.hpp"
#include "hetmt/errors.hpp"
#include "hetmt/eval.hpp"
#include "hetmt/inference.hpp"
#include "hetmt/io.hpp"
#include "hetmt/kernels.hpp"
#include "hetmt/phantom.hpp"
#include "hetmt/rng.hpp"
#include "hetmt/trainer.hpp"

namespace hetmt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::string> variant;
  std::optional<std::string> manifest;
  std::optional<std::uint64_t> seed;
  std::optional<int> cases;
  std::optional<int> test_cases;
  std::optional<std::int64_t> iterations;
  std::optional<int> T;
  std::optional<int> stride;
  std::optional<int> checkpoints;
  std::optional<int> bins;
  bool quiet = false;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "run config JSON")->check(CLI::ExistingFile);
  sub->add_option("--out", o.out, "run directory");
  sub->add_option("--variant", o.variant, "M1_reg|M1_seg|M2a_reg|M2a_seg|M2b_reg|M2b_seg|M3|M4");
  sub->add_option("--seed", o.seed, "global seed");
  sub->add_flag("--quiet", o.quiet, "no progress output");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.out) c.out = *o.out;
  if (o.variant) c.model.variant = parse_variant(*o.variant);
  if (o.seed) c.seed = *o.seed;
  if (o.cases) c.cases = *o.cases;
  if (o.test_cases) c.test_cases = *o.test_cases;
  else if (o.cases && o.config.empty()) c.test_cases = *o.cases / 4;
  if (o.iterations) c.train.max_iterations = *o.iterations;
  if (o.T) c.infer.T = *o.T;
  if (o.stride) c.infer.stride = *o.stride;
  if (o.checkpoints) c.infer.checkpoints = *o.checkpoints;
  if (o.bins) c.eval.bins = *o.bins;
  if (c.test_cases >= c.cases) c.test_cases = c.cases / 4;
  c.apply_seed();
  c.validate();
  return c;
}

fs::path data_dir(const RunConfig& c) { return fs::path(c.out) / "data"; }
std::string variant_name(const RunConfig& c) { return to_string(c.model.variant); }

Manifest run_manifest(const RunConfig& c, const Overrides& o) {
  return load_manifest(o.manifest ? fs::path(*o.manifest) : data_dir(c) / "manifest.json");
}

std::vector<std::string> class_names(const RunConfig& c, const Manifest& m) {
  const fs::path spec = m.root / "phantom_spec.json";
  if (fs::exists(spec)) return json::parse(io::read_text(spec)).get<PhantomSpec>().class_names;
  return c.phantom.class_names;
}

// Relative paths of every file under the run directory, written to outputs.json.
void write_outputs_index(const fs::path& root) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      const std::string rel = fs::relative(e.path(), root).generic_string();
      if (rel != "outputs.json") files.push_back(rel);
    }
  std::sort(files.begin(), files.end());
  io::write_text(root / "outputs.json", json{{"files", files}}.dump(2) + "\n");
}

void cmd_genphantom(const RunConfig& c, std::ostream& out, bool quiet) {
  const Manifest m = gen_dataset(c.phantom, c.cases, data_dir(c), c.test_cases);
  if (!quiet) out << "wrote " << m.cases.size() << " cases to " << data_dir(c).generic_string() << "\n";
}

void cmd_train(const RunConfig& c, const Overrides& o, std::ostream& out) {
  const Manifest m = run_manifest(c, o);
  const fs::path dir = fs::path(c.out) / "train" / variant_name(c);
  ProgressFn progress;
  if (!o.quiet)
    progress = [&](std::int64_t it, const LossBreakdown& l) {
      if (it % 100 == 0 || it == c.train.max_iterations) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "iter %lld loss %.6g\n", static_cast<long long>(it), l.total);
        out << buf << std::flush;
      }
    };
  const TrainResult r = train_loop(c.train, c.model, m, dir, true, progress);
  if (!o.quiet) out << "kept " << r.checkpoints.size() << " checkpoints in " << dir.generic_string() << "\n";
}

std::vector<LoadedModel> load_last_models(const RunConfig& c) {
  const fs::path dir = fs::path(c.out) / "train" / variant_name(c);
  const auto all = list_checkpoints(dir);
  if (static_cast<int>(all.size()) < c.infer.checkpoints)
    throw IoError("need " + std::to_string(c.infer.checkpoints) + " checkpoints in " + dir.string() + ", found " +
                  std::to_string(all.size()));
  std::vector<LoadedModel> models;
  for (std::size_t i = all.size() - c.infer.checkpoints; i < all.size(); ++i) models.push_back(load_model(all[i]));
  return models;
}

void cmd_infer(const RunConfig& c, const Overrides& o, std::ostream& out) {
  const Manifest m = run_manifest(c, o);
  const auto models = load_last_models(c);
  const int patch = c.train.patch_size;
  const auto test = m.split("test");
  if (test.empty()) throw ConfigError("manifest has no test cases");
  for (std::size_t k = 0; k < test.size(); ++k) {
    const CaseBundle cb = load_case(m, test[k], c.model.class_count);
    const StitchPlan plan = plan_stitch(cb.mr.shape, patch, c.infer.stride);
    const auto pred = sliding_window_predict(models, cb.mr, plan, c.infer.T, derive_seed(c.seed, {0x1F, k}));
    write_prediction(pred, fs::path(c.out) / "infer" / variant_name(c) / cb.id);
    if (!o.quiet) out << "predicted " << cb.id << "\n" << std::flush;
  }
}

std::vector<ReferenceCase> load_references(const RunConfig& c, const Manifest& m) {
  std::vector<ReferenceCase> refs;
  for (const auto& e : m.split("test")) {
    CaseBundle cb = load_case(m, e, c.model.class_count);
    refs.push_back({cb.id, std::move(cb.ct), std::move(cb.labels)});
  }
  if (refs.empty()) throw ConfigError("manifest has no test cases");
  return refs;
}

VariantPredictions load_predictions(const fs::path& dir, const std::string& variant,
                                    const std::vector<ReferenceCase>& refs) {
  VariantPredictions vp{variant, {}};
  for (const auto& r : refs) vp.predictions.push_back(read_prediction(dir / variant / r.id));
  return vp;
}

CalibrationReport evaluate(const RunConfig& c, const Overrides& o, const std::vector<std::string>& variants) {
  const Manifest m = run_manifest(c, o);
  const auto refs = load_references(c, m);
  EvalSettings settings = EvalSettings::defaults(c.model.class_count, class_names(c, m));
  settings.bins = c.eval.bins;
  std::vector<VariantPredictions> preds;
  for (const auto& v : variants) preds.push_back(load_predictions(fs::path(c.out) / "infer", v, refs));
  return make_report(preds, refs, settings);
}

void cmd_eval(const RunConfig& c, const Overrides& o, std::ostream& out) {
  const auto rep = evaluate(c, o, {variant_name(c)});
  const fs::path dir = fs::path(c.out) / "eval" / variant_name(c);
  io::ensure_dir(dir);
  io::write_text(dir / "metrics.csv", metrics_csv(rep));
  io::write_text(dir / "report.json", report_json(rep));
  if (!o.quiet) out << metrics_csv(rep);
}

void cmd_calibrate(const RunConfig& c, const Overrides& o, std::ostream& out) {
  const auto rep = evaluate(c, o, {variant_name(c)});
  const fs::path dir = fs::path(c.out) / "calibrate" / variant_name(c);
  io::ensure_dir(dir);
  io::write_text(dir / "calibration.csv", calibration_csv(rep));
  io::write_text(dir / "z_histogram.csv", histogram_csv(rep));
  if (!o.quiet) out << calibration_csv(rep);
}

void cmd_report(const RunConfig& c, const Overrides& o, std::ostream& out) {
  const fs::path infer = fs::path(c.out) / "infer";
  if (!fs::is_directory(infer)) throw IoError("no predictions under " + infer.string());
  std::vector<std::string> variants;
  for (const auto& e : fs::directory_iterator(infer))
    if (e.is_directory()) variants.push_back(e.path().filename().string());
  std::sort(variants.begin(), variants.end());
  const auto rep = evaluate(c, o, variants);
  const fs::path dir = fs::path(c.out) / "report";
  write_report(rep, dir);
  io::write_text(dir / "calibration.csv", calibration_csv(rep));
  if (!o.quiet) out << "report for " << variants.size() << " variant(s) in " << dir.generic_string() << "\n";
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task dropout networks with uncertainty estimates on synthetic pelvic phantoms", "hetmt"};
  app.require_subcommand(1);
  Overrides o;

  auto* gen = app.add_subcommand("genphantom", "generate a synthetic phantom dataset");
  add_common(gen, o);
  gen->add_option("--cases", o.cases, "number of cases");
  gen->add_option("--test-cases", o.test_cases, "cases held out for testing");

  auto* train = app.add_subcommand("train", "train one variant");
  add_common(train, o);
  train->add_option("--manifest", o.manifest, "dataset manifest (default <out>/data/manifest.json)");
  train->add_option("--iterations", o.iterations, "training iterations");

  auto* infer = app.add_subcommand("infer", "Monte Carlo sliding-window prediction on the test split");
  add_common(infer, o);
  infer->add_option("--manifest", o.manifest, "dataset manifest");
  infer->add_option("--T", o.T, "stochastic samples");
  infer->add_option("--stride", o.stride, "sliding-window stride");
  infer->add_option("--checkpoints", o.checkpoints, "number of trailing checkpoints");

  std::vector<CLI::App*> evals;
  for (const char* name : {"eval", "calibrate", "report"}) {
    auto* s = app.add_subcommand(name, std::string(name) == "eval"        ? "MAE and fuzzy Dice"
                                       : std::string(name) == "calibrate" ? "z-scores and chi-squared test"
                                                                          : "combined report over all variants");
    add_common(s, o);
    s->add_option("--manifest", o.manifest, "dataset manifest");
    s->add_option("--bins", o.bins, "chi-squared bins");
    evals.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    const RunConfig c = resolve(o);
    if (gen->parsed()) cmd_genphantom(c, out, o.quiet);
    else if (train->parsed()) cmd_train(c, o, out);
    else if (infer->parsed()) cmd_infer(c, o, out);
    else if (evals[0]->parsed()) cmd_eval(c, o, out);
    else if (evals[1]->parsed()) cmd_calibrate(c, o, out);
    else cmd_report(c, o, out);
    write_outputs_index(c.out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace hetmt::cli
