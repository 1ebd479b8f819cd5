#include <doctest.h>

#include <cmath>

#include "hetmt/errors.hpp"
#include "hetmt/inference.hpp"
#include "hetmt/rng.hpp"
#include "test_util.hpp"

using namespace hetmt;
using doctest::Approx;

namespace {

StochasticSample reg_sample(std::vector<double> mean, std::vector<double> intrinsic = {}) {
  StochasticSample s;
  s.reg_mean = std::move(mean);
  s.reg_intrinsic = std::move(intrinsic);
  return s;
}

StochasticSample seg_sample(std::vector<double> prob, std::vector<double> intrinsic = {}) {
  StochasticSample s;
  s.seg_prob = std::move(prob);
  s.seg_intrinsic = std::move(intrinsic);
  return s;
}

ModelConfig small_model(Variant v = Variant::M4_multitask_hetero, double dropout = 0.5) {
  ModelConfig c;
  c.trunk_features = {4, 4, 4, 4, 8};
  c.branch_widths = {4, 4, 4, 4};
  c.variant = v;
  c.dropout = dropout;
  return c;
}

LoadedModel make_model(const ModelConfig& cfg, std::uint64_t seed, const std::string& id = "m") {
  const Network<float> net(cfg);
  Params<float> p = net.init(seed);
  Rng rng(seed + 7);
  for (auto& t : p.tensors)
    if (t.name.ends_with(".b"))
      for (auto& x : t.data) x = static_cast<float>(rng.uniform(-0.2, 0.2));
  return LoadedModel(id, cfg, std::move(p));
}

Volume random_mr(std::vector<int> shape, std::uint64_t seed) {
  Volume v = Volume::scalar(std::move(shape));
  Rng rng(seed);
  for (auto& x : v.values) x = static_cast<float>(rng.uniform(0.0, 400.0));
  return v;
}

}  // namespace

TEST_CASE("regression aggregation") {
  SUBCASE("two-point mean and population variance") {
    const std::vector<StochasticSample> s{reg_sample({1.0}, {0.5}), reg_sample({3.0}, {1.5})};
    const RegressionStats r = aggregate_regression(s);
    CHECK(r.mean[0] == 2.0f);
    CHECK(r.param_var[0] == 1.0f);
    CHECK(r.intrinsic_var[0] == 1.0f);
    CHECK(r.total_var[0] == 2.0f);
  }
  SUBCASE("equal samples") {
    const std::vector<StochasticSample> s(4, reg_sample({5.0, -1.0}, {0.25, 2.0}));
    const RegressionStats r = aggregate_regression(s);
    CHECK(r.param_var == std::vector<float>{0.0f, 0.0f});
    CHECK(r.total_var == r.intrinsic_var);
  }
  SUBCASE("no variance head") {
    const std::vector<StochasticSample> s{reg_sample({1.0}), reg_sample({2.0})};
    const RegressionStats r = aggregate_regression(s);
    CHECK(r.intrinsic_var[0] == 0.0f);
    CHECK(r.total_var[0] == r.param_var[0]);
  }
  SUBCASE("too few samples") {
    const std::vector<StochasticSample> s{reg_sample({1.0})};
    CHECK_THROWS_AS(aggregate_regression(s), ConfigError);
  }
}

TEST_CASE("segmentation aggregation") {
  SUBCASE("two-point statistics") {
    const std::vector<StochasticSample> s{seg_sample({0.6, 0.4}, {1.0}), seg_sample({0.8, 0.2}, {3.0})};
    const SegmentationStats r = aggregate_segmentation(s, 2);
    CHECK(r.mean_prob[0] == Approx(0.7));
    CHECK(r.mean_prob[1] == Approx(0.3));
    CHECK(r.label[0] == 0);
    CHECK(r.param_var[0] == Approx(0.01));
    CHECK(r.param_var[1] == Approx(0.01));
    CHECK(r.intrinsic[0] == 2.0f);
  }
  SUBCASE("identical samples") {
    const std::vector<StochasticSample> s(3, seg_sample({0.1, 0.2, 0.7}));
    const SegmentationStats r = aggregate_segmentation(s, 3);
    for (float v : r.param_var) CHECK(v == 0.0f);
    CHECK(r.label[0] == 2);
  }
  SUBCASE("ties go to the lowest class") {
    const std::vector<StochasticSample> s(2, seg_sample({0.25, 0.375, 0.375}));
    CHECK(aggregate_segmentation(s, 3).label[0] == 1);
  }
}

TEST_CASE("stitch plans") {
  SUBCASE("single patch") {
    const StitchPlan p = plan_stitch({4, 4}, 4, 4);
    REQUIRE(p.origins.size() == 1);
    CHECK(p.origins[0] == std::array<int, 2>{0, 0});
    for (int c : p.coverage) CHECK(c == 1);
  }
  SUBCASE("overlapping rows") {
    const StitchPlan p = plan_stitch({6, 4}, 4, 2);
    REQUIRE(p.origins.size() == 2);
    CHECK(p.origins[0] == std::array<int, 2>{0, 0});
    CHECK(p.origins[1] == std::array<int, 2>{2, 0});
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 4; ++x) CHECK(p.coverage[y * 4 + x] == (y >= 2 && y < 4 ? 2 : 1));
  }
  SUBCASE("clamped last row and column") {
    const StitchPlan p = plan_stitch({5, 5}, 4, 4);
    REQUIRE(p.origins.size() == 4);
    CHECK(p.origins[0] == std::array<int, 2>{0, 0});
    CHECK(p.origins[1] == std::array<int, 2>{0, 1});
    CHECK(p.origins[2] == std::array<int, 2>{1, 0});
    CHECK(p.origins[3] == std::array<int, 2>{1, 1});
  }
  SUBCASE("3D shapes use the in-plane dims") {
    const StitchPlan p = plan_stitch({3, 8, 8}, 4, 4);
    CHECK(p.origins.size() == 4);
  }
  SUBCASE("invalid") {
    CHECK_THROWS_AS(plan_stitch({4, 4}, 5, 1), ConfigError);
    CHECK_THROWS_AS(plan_stitch({8, 8}, 4, 5), ConfigError);
    CHECK_THROWS_AS(plan_stitch({8, 8}, 4, 0), ConfigError);
  }
  SUBCASE("random plans cover every voxel within bounds") {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
      const int h = 1 + static_cast<int>(rng.index(40)), w = 1 + static_cast<int>(rng.index(40));
      const int patch = 1 + static_cast<int>(rng.index(std::min(h, w)));
      const int stride = 1 + static_cast<int>(rng.index(patch));
      const StitchPlan p = plan_stitch({h, w}, patch, stride);
      for (const auto& o : p.origins) {
        CHECK(o[0] >= 0);
        CHECK(o[1] >= 0);
        CHECK(o[0] + patch <= h);
        CHECK(o[1] + patch <= w);
      }
      std::vector<int> cov(static_cast<std::size_t>(h) * w, 0);
      for (const auto& o : p.origins)
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x) ++cov[(o[0] + y) * w + o[1] + x];
      CHECK(cov == p.coverage);
      CHECK(*std::min_element(cov.begin(), cov.end()) >= 1);
    }
  }
}

TEST_CASE("MC forward samples") {
  const ModelConfig cfg = small_model();
  const std::vector<LoadedModel> models{make_model(cfg, 1, "a"), make_model(cfg, 2, "b")};
  const auto patch = testutil::random_vector<float>(64, 3);

  SUBCASE("T is split across checkpoints") {
    const auto out = mc_forward_samples(models, patch, 8, 8, 20, 11);
    REQUIRE(out.size() == 20);
    for (int t = 0; t < 20; ++t) {
      const int ci = t / 10, si = t % 10;
      const auto& m = models[ci];
      const auto ref = m.net.forward(m.params, patch, 8, 8, Mode::mc_sample,
                                     derive_seed(11, {static_cast<std::uint64_t>(ci), static_cast<std::uint64_t>(si)}));
      CHECK(out[t].reg_mean == ref.reg_mean);
    }
    CHECK(out[0].reg_mean != out[1].reg_mean);
  }
  SUBCASE("deterministic in the seed") {
    const auto a = mc_forward_samples(models, patch, 8, 8, 2, 5);
    const auto b = mc_forward_samples(models, patch, 8, 8, 2, 5);
    CHECK(a[0].seg_logits == b[0].seg_logits);
    CHECK(a[1].reg_logvar == b[1].reg_logvar);
  }
  SUBCASE("preconditions") {
    CHECK_THROWS_AS(mc_forward_samples(models, patch, 8, 8, 1, 5), ConfigError);
    CHECK_THROWS_AS(mc_forward_samples(models, patch, 8, 8, 3, 5), ConfigError);
    CHECK_THROWS_AS(mc_forward_samples({}, patch, 8, 8, 2, 5), ConfigError);
    const std::vector<LoadedModel> mixed{make_model(cfg, 1), make_model(small_model(Variant::M3_multitask_homo), 1)};
    CHECK_THROWS_AS(mc_forward_samples(mixed, patch, 8, 8, 2, 5), ConfigError);
  }
}

TEST_CASE("sliding-window prediction") {
  SUBCASE("constant-output model is constant under any plan") {
    const ModelConfig cfg = small_model(Variant::M1_reg);
    const Network<float> net(cfg);
    Params<float> p = net.init(1);
    for (auto& t : p.tensors) std::fill(t.data.begin(), t.data.end(), 0.0f);
    p.tensors[*p.find("head.reg_mean.out.b")].data[0] = 0.375f;
    const std::vector<LoadedModel> models{LoadedModel("c", cfg, p)};
    const Volume mr = random_mr({13, 11}, 1);
    for (auto [patch, stride] : {std::pair{11, 11}, std::pair{8, 3}, std::pair{5, 5}, std::pair{6, 1}}) {
      const StochasticPrediction pred = sliding_window_predict(models, mr, plan_stitch(mr.shape, patch, stride), 2, 9);
      for (float v : pred.reg_mean.values) CHECK(v == Approx(37.5).epsilon(1e-6));
      for (float v : pred.reg_param_var.values) CHECK(v == 0.0f);
    }
  }

  SUBCASE("overlap averaging matches per-patch means") {
    const ModelConfig cfg = small_model();
    const std::vector<LoadedModel> models{make_model(cfg, 4)};
    const Volume mr = random_mr({14, 12}, 2);
    for (auto [patch, stride] : {std::pair{6, 6}, std::pair{8, 3}}) {
      const StitchPlan plan = plan_stitch(mr.shape, patch, stride);
      const int T = 4;
      const std::uint64_t seed = 21;
      const StochasticPrediction pred = sliding_window_predict(models, mr, plan, T, seed);

      const std::vector<float> input = normalize_input<float>(cfg, mr.values);
      std::vector<double> sum(mr.values.size(), 0.0);
      for (std::size_t j = 0; j < plan.origins.size(); ++j) {
        const auto& o = plan.origins[j];
        std::vector<float> crop(static_cast<std::size_t>(patch) * patch);
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x) crop[y * patch + x] = input[(o[0] + y) * 12 + o[1] + x];
        const auto outs = mc_forward_samples(models, crop, patch, patch, T, derive_seed(seed, {0, j}));
        std::vector<StochasticSample> samples;
        for (const auto& out : outs) samples.push_back(to_sample(out, cfg));
        const RegressionStats r = aggregate_regression(samples);
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x) sum[(o[0] + y) * 12 + o[1] + x] += r.mean[y * patch + x];
      }
      for (std::size_t v = 0; v < sum.size(); ++v) {
        const double expected = sum[v] / plan.coverage[v];
        CHECK(testutil::close(pred.reg_mean.values[v], expected, 1e-5, 1e-5));
      }
    }
  }

  SUBCASE("invariants on a random model") {
    const ModelConfig cfg = small_model();
    const std::vector<LoadedModel> models{make_model(cfg, 5, "a"), make_model(cfg, 6, "b")};
    const Volume mr = random_mr({2, 12, 12}, 3);
    const StochasticPrediction pred = sliding_window_predict(models, mr, plan_stitch(mr.shape, 8, 4), 4, 1);
    CHECK(pred.checkpoint_ids == std::vector<std::string>{"a", "b"});
    const std::size_t n = mr.values.size();
    for (std::size_t v = 0; v < n; ++v) {
      CHECK(pred.reg_total_var.values[v] == pred.reg_intrinsic_var.values[v] + pred.reg_param_var.values[v]);
      CHECK(pred.reg_param_var.values[v] >= 0.0f);
      double total = 0.0;
      int best = 0;
      for (int c = 0; c < cfg.class_count; ++c) {
        const float pc = pred.seg_mean_prob[c].values[v];
        CHECK(pc >= 0.0f);
        CHECK(pc <= 1.0f);
        CHECK(pred.seg_param_var[c].values[v] >= 0.0f);
        total += pc;
        if (pc > pred.seg_mean_prob[best].values[v]) best = c;
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
      CHECK(pred.seg_label.labels[v] == best);
      CHECK(pred.seg_intrinsic.values[v] > 0.0f);
    }
  }

  SUBCASE("zero dropout gives zero parameter uncertainty") {
    const ModelConfig cfg = small_model(Variant::M4_multitask_hetero, 0.0);
    const std::vector<LoadedModel> models{make_model(cfg, 8)};
    const Volume mr = random_mr({10, 10}, 4);
    const StochasticPrediction pred = sliding_window_predict(models, mr, plan_stitch(mr.shape, 8, 2), 3, 2);
    for (float v : pred.reg_param_var.values) CHECK(v == 0.0f);
    for (const auto& c : pred.seg_param_var)
      for (float v : c.values) CHECK(v == 0.0f);
    CHECK(pred.reg_total_var.values == pred.reg_intrinsic_var.values);
  }
}

TEST_CASE("prediction round trip") {
  const ModelConfig cfg = small_model();
  const std::vector<LoadedModel> models{make_model(cfg, 3, "ckpt_0000010")};
  const Volume mr = random_mr({9, 9}, 5);
  const StochasticPrediction pred = sliding_window_predict(models, mr, plan_stitch(mr.shape, 6, 3), 2, 4);
  const auto dir = testutil::scratch_dir("prediction_io");
  write_prediction(pred, dir);
  const StochasticPrediction back = read_prediction(dir);
  CHECK(back.T == 2);
  CHECK(back.checkpoint_ids == pred.checkpoint_ids);
  CHECK(back.reg_total_var.values == pred.reg_total_var.values);
  CHECK(back.seg_label.labels == pred.seg_label.labels);
  CHECK(back.seg_mean_prob[5].values == pred.seg_mean_prob[5].values);
  CHECK_THROWS_AS(read_prediction(dir / "missing"), IoError);
}
