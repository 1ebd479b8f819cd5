#include <doctest.h>

#include <cmath>
#include <limits>

#include "hetmt/checkpoint.hpp"
#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"
#include "hetmt/trainer.hpp"
#include "test_util.hpp"

using namespace hetmt;

namespace {

Params<float> scalar_param(float w) {
  Params<float> p;
  p.tensors.push_back({"w", {1}, {w}});
  return p;
}

// Small phantom training set shared by the loop tests.
const TrainingSet& tiny_data() {
  static const TrainingSet data = [] {
    PhantomSpec spec;
    spec.shape = {32, 32};
    std::vector<CaseBundle> cases;
    for (int i = 0; i < 3; ++i) cases.push_back(gen_phantom_case(spec, 100 + i));
    return make_training_set(cases, ModelConfig{});
  }();
  return data;
}

ModelConfig small_model(Variant v = Variant::M4_multitask_hetero) {
  ModelConfig c;
  c.trunk_features = {4, 4, 8, 8, 16};
  c.branch_widths = {8, 8, 8, 8};
  c.variant = v;
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.patch_size = 16;
  t.batch_size = 4;
  t.checkpoint_interval = 100;
  t.keep_checkpoints = 2;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("ADAM first step has magnitude lr") {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  Params<float> w = scalar_param(1.0f), m = scalar_param(0.0f), v = scalar_param(0.0f);
  // L = w^2 / 2, dL/dw = w.
  adam_update(w, scalar_param(1.0f), m, v, 1, cfg);
  CHECK(w.tensors[0].data[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("ADAM converges on a one-dimensional quadratic") {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  Params<float> w = scalar_param(1.0f), m = scalar_param(0.0f), v = scalar_param(0.0f);
  for (int step = 1; step <= 5000; ++step) {
    const float g = w.tensors[0].data[0] - 0.25f;  // L = (w - 0.25)^2 / 2
    adam_update(w, scalar_param(g), m, v, step, cfg);
  }
  CHECK(std::abs(w.tensors[0].data[0] - 0.25f) < 1e-6);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const Network<float> net(small_model());
  TrainState st = init_train_state(net, 3);
  const Params<float> before = st.params;
  TrainConfig cfg = small_train();
  cfg.learning_rate = 0.0;
  Rng rng(1);
  train_step(net, st, sample_patch_batch(tiny_data(), cfg, rng), cfg);
  CHECK(st.params == before);
  CHECK(st.iteration == 1);
  bool moved = false;
  for (const auto& t : st.adam_v.tensors)
    for (float x : t.data) moved |= x != 0.0f;
  CHECK(moved);
}

TEST_CASE("patch sampling") {
  const TrainingSet& data = tiny_data();
  TrainConfig cfg = small_train();

  SUBCASE("full-slice patch sits at the origin") {
    cfg.patch_size = 32;
    Rng rng(3);
    for (const auto& p : sample_patch_batch(data, cfg, rng).items) {
      CHECK(p.y0 == 0);
      CHECK(p.x0 == 0);
    }
  }
  SUBCASE("deterministic and co-located") {
    Rng a(9), b(9);
    const auto ba = sample_patch_batch(data, cfg, a), bb = sample_patch_batch(data, cfg, b);
    REQUIRE(ba.items.size() == 4);
    for (std::size_t i = 0; i < ba.items.size(); ++i) {
      CHECK(ba.items[i].x == bb.items[i].x);
      const auto& p = ba.items[i];
      const auto& c = data.cases[p.case_index];
      const std::size_t src = static_cast<std::size_t>(p.y0 + 3) * c.width + p.x0 + 5;
      CHECK(p.x[3 * 16 + 5] == c.input[src]);
      CHECK(p.y1[3 * 16 + 5] == c.target[src]);
      CHECK(p.y2[3 * 16 + 5] == c.labels[src]);
    }
  }
  SUBCASE("cases are drawn uniformly") {
    TrainingSet two;
    two.cases = {data.cases[0], data.cases[1]};
    cfg.batch_size = 1000;
    Rng rng(17);
    int first = 0;
    for (const auto& p : sample_patch_batch(two, cfg, rng).items) first += p.case_index == 0;
    CHECK(std::abs(first / 1000.0 - 0.5) <= 0.05);
  }
  SUBCASE("oversized patch") {
    cfg.patch_size = 33;
    Rng rng(1);
    CHECK_THROWS_AS(sample_patch_batch(data, cfg, rng), ConfigError);
  }
}

TEST_CASE("training set normalization") {
  ModelConfig cfg;
  PhantomSpec spec;
  spec.shape = {32, 32};
  const CaseBundle cb = gen_phantom_case(spec, 1);
  const TrainingSet ts = make_training_set({cb}, cfg);
  CHECK(ts.cases[0].input[10] == doctest::Approx((cb.mr.values[10] - 150.0) / 100.0));
  CHECK(ts.cases[0].target[10] == doctest::Approx(cb.ct.values[10] / 100.0));
}

TEST_CASE("checkpoint retention, resume and reproducibility") {
  const auto dir = testutil::scratch_dir("train_loop");
  const ModelConfig mc = small_model(Variant::M3_multitask_homo);
  TrainConfig cfg = small_train();
  cfg.max_iterations = 300;

  const TrainResult full = train_loop(cfg, mc, tiny_data(), dir / "full", false);
  REQUIRE(full.checkpoints.size() == 2);
  CHECK(full.checkpoints[0].filename() == "ckpt_0000200");
  CHECK(full.checkpoints[1].filename() == "ckpt_0000300");
  CHECK(std::filesystem::exists(dir / "full/train_config.json"));

  const std::string csv = io::read_text(dir / "full/loss_history.csv");
  CHECK(csv.rfind("iteration,total,reg_data_term,reg_log_term,seg_data_term,seg_log_term\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 301);

  // Same configs and seeds: identical bytes.
  train_loop(cfg, mc, tiny_data(), dir / "again", false);
  CHECK(io::read_bytes(dir / "full/ckpt_0000300.bin") == io::read_bytes(dir / "again/ckpt_0000300.bin"));

  // Interrupted at 200, resumed to 300: history continues at 201 and the
  // result matches the uninterrupted run.
  TrainConfig first = cfg;
  first.max_iterations = 200;
  train_loop(first, mc, tiny_data(), dir / "resumed", false);
  const TrainResult resumed = train_loop(cfg, mc, tiny_data(), dir / "resumed", true);
  REQUIRE(resumed.state.history.size() == 300);
  CHECK(resumed.state.history[200].iteration == 201);
  CHECK(resumed.state.params == full.state.params);
  CHECK(io::read_text(dir / "resumed/loss_history.csv") == csv);

  // A different model config refuses to resume.
  CHECK_THROWS_AS(train_loop(cfg, small_model(), tiny_data(), dir / "resumed", true), ConfigError);
}

TEST_CASE("loss decreases over 200 iterations") {
  const auto dir = testutil::scratch_dir("train_trend");
  TrainConfig cfg = small_train();
  cfg.max_iterations = 200;
  cfg.checkpoint_interval = 200;
  for (Variant v : {Variant::M4_multitask_hetero, Variant::M1_reg, Variant::M2a_seg}) {
    const TrainResult r = train_loop(cfg, small_model(v), tiny_data(), dir / to_string(v), false);
    double head = 0, tail = 0;
    for (int i = 0; i < 50; ++i) {
      head += r.state.history[i].loss.total;
      tail += r.state.history[150 + i].loss.total;
    }
    CAPTURE(to_string(v));
    CHECK(tail < head);
  }
}

TEST_CASE("non-finite loss aborts") {
  const Network<float> net(small_model());
  TrainState st = init_train_state(net, 3);
  st.params.tensors[*st.params.find("head.reg_mean.l4.b")].data[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg = small_train();
  Rng rng(1);
  CHECK_THROWS_AS(train_step(net, st, sample_patch_batch(tiny_data(), cfg, rng), cfg), NumericError);
}
