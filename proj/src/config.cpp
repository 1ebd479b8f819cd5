#include "hetmt/config.hpp"

#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"

namespace hetmt {

using nlohmann::json;

namespace {

template <class T>
void get(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

}  // namespace

void to_json(json& j, const InferConfig& c) {
  j = json{{"T", c.T}, {"stride", c.stride}, {"checkpoints", c.checkpoints}};
}

void from_json(const json& j, InferConfig& c) {
  get(j, "T", c.T);
  get(j, "stride", c.stride);
  get(j, "checkpoints", c.checkpoints);
}

void to_json(json& j, const EvalConfig& c) { j = json{{"bins", c.bins}}; }

void from_json(const json& j, EvalConfig& c) { get(j, "bins", c.bins); }

void to_json(json& j, const RunConfig& c) {
  j = json{{"version", c.version}, {"seed", c.seed},   {"out", c.out},     {"cases", c.cases},
           {"test_cases", c.test_cases}, {"phantom", c.phantom}, {"model", c.model}, {"train", c.train},
           {"infer", c.infer}, {"eval", c.eval}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  get(j, "version", c.version);
  if (c.version != RunConfig::kVersion)
    throw ConfigError("unsupported run config version " + std::to_string(c.version));
  get(j, "seed", c.seed);
  get(j, "out", c.out);
  get(j, "cases", c.cases);
  get(j, "test_cases", c.test_cases);
  get(j, "phantom", c.phantom);
  get(j, "model", c.model);
  get(j, "train", c.train);
  get(j, "infer", c.infer);
  get(j, "eval", c.eval);
}

void RunConfig::apply_seed() {
  phantom.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  phantom.validate();
  model.validate();
  train.validate();
  if (model.class_count != phantom.class_count) throw ConfigError("model and phantom class counts differ");
  if (cases < 1) throw ConfigError("need at least one case");
  if (test_cases < 0 || test_cases >= cases) throw ConfigError("test_cases must be in [0, cases)");
  if (infer.T < 2) throw ConfigError("T must be >= 2");
  if (infer.checkpoints < 1 || infer.T % infer.checkpoints != 0)
    throw ConfigError("T must be a positive multiple of the checkpoint count");
  if (infer.stride < 1 || infer.stride > train.patch_size) throw ConfigError("stride must be in [1, patch_size]");
  if (eval.bins < 2) throw ConfigError("need at least 2 bins");
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    j.get_to(c);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return c;
}

}  // namespace hetmt
