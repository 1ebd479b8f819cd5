#include <doctest.h>

#include <cmath>
#include <set>

#include "gradcheck.hpp"
#include "hetmt/checkpoint.hpp"
#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"
#include "hetmt/model.hpp"
#include "test_util.hpp"

using namespace hetmt;

namespace {

ModelConfig desk(Variant v) {
  ModelConfig c;
  c.variant = v;
  return c;
}

}  // namespace

TEST_CASE("parameter counts match the layer list") {
  // Counted by hand from the desk-scale layer list (weights + biases):
  // trunk 160 + 9280 + 32384 + 129280 + 73856 = 244960; a five-layer branch
  // with n outputs holds 48256 + 33 n.
  CHECK(Network<float>(desk(Variant::M4_multitask_hetero)).init(1).total_size() == 438281);
  CHECK(Network<float>(desk(Variant::M3_multitask_homo)).init(1).total_size() == 341705);
  // Half-width trunk (61424) and a single 1x1 output layer.
  CHECK(Network<float>(desk(Variant::M1_reg)).init(1).total_size() == 61489);
  CHECK(Network<float>(desk(Variant::M1_seg)).init(1).total_size() == 61424 + 6 * 64 + 6);
}

TEST_CASE("variant gating") {
  for (Variant v : {Variant::M1_reg, Variant::M2a_reg, Variant::M2b_reg}) {
    const Params<float> p = Network<float>(desk(v)).init(1);
    for (const auto& t : p.tensors) CHECK(t.name.find("seg") == std::string::npos);
  }
  for (Variant v : {Variant::M1_seg, Variant::M2a_seg, Variant::M2b_seg}) {
    const Params<float> p = Network<float>(desk(v)).init(1);
    for (const auto& t : p.tensors) CHECK(t.name.find("reg") == std::string::npos);
  }
  CHECK(Network<float>(desk(Variant::M2b_reg)).init(1).contains("head.reg_logvar.out.w"));
  CHECK_FALSE(Network<float>(desk(Variant::M2a_reg)).init(1).contains("head.reg_logvar.out.w"));
  const Params<float> m3 = Network<float>(desk(Variant::M3_multitask_homo)).init(1);
  CHECK(m3.contains("homo.s1"));
  CHECK(m3.contains("homo.s2"));
  CHECK_FALSE(m3.contains("head.reg_logvar.l0.w"));

  CHECK_FALSE(traits_of(Variant::M1_reg).dropout);
  CHECK(traits_of(Variant::M2a_seg).dropout);
  CHECK(traits_of(Variant::M2b_reg).dropout);
  CHECK(traits_of(Variant::M4_multitask_hetero).dropout);
  CHECK(traits_of(Variant::M3_multitask_homo, true).dropout);
  CHECK_FALSE(traits_of(Variant::M3_multitask_homo, false).dropout);
}

TEST_CASE("parameter names are unique and init is deterministic") {
  const Network<float> net(desk(Variant::M4_multitask_hetero));
  const Params<float> a = net.init(42), b = net.init(42), c = net.init(43);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  std::set<std::string> names;
  for (const auto& t : a.tensors) names.insert(t.name);
  CHECK(names.size() == a.tensors.size());
  // Fan-in uniform bound, zero biases.
  const auto& w = a.tensors[*a.find("trunk.final.w")];
  const double bound = std::sqrt(3.0 / (64 * 9));
  for (float x : w.data) CHECK(std::abs(x) <= bound);
  for (float x : a.tensors[*a.find("trunk.final.b")].data) CHECK(x == 0.0f);
}

TEST_CASE("output shapes") {
  const Network<float> net(desk(Variant::M4_multitask_hetero));
  const auto p = net.init(1);
  const auto x = testutil::random_vector<float>(32 * 32, 2);
  const auto out = net.forward(p, x, 32, 32, Mode::deterministic, 0);
  CHECK(out.reg_mean.size() == 32 * 32);
  CHECK(out.reg_logvar.size() == 32 * 32);
  CHECK(out.seg_logits.size() == 6 * 32 * 32);
  CHECK(out.seg_logvar.size() == 32 * 32);
  const auto rect = net.forward(p, testutil::random_vector<float>(12 * 20, 3), 12, 20, Mode::mc_sample, 5);
  CHECK(rect.reg_mean.size() == 12 * 20);

  const Network<float> m1(desk(Variant::M1_reg));
  const auto o1 = m1.forward(m1.init(1), x, 32, 32, Mode::train, 1);
  CHECK(o1.reg_mean.size() == 32 * 32);
  CHECK(o1.reg_logvar.empty());
  CHECK(o1.seg_logits.empty());
}

TEST_CASE("constant-zero input gives constant maps") {
  const Network<double> net(desk(Variant::M4_multitask_hetero));
  const auto p = net.init(3);
  const std::vector<double> zeros(16 * 16, 0.0);
  const auto out = net.forward(p, zeros, 16, 16, Mode::deterministic, 0);
  for (const auto* f : {&out.reg_mean, &out.reg_logvar, &out.seg_logvar})
    for (double v : *f) CHECK(v == (*f)[0]);
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 256; ++i) CHECK(out.seg_logits[c * 256 + i] == out.seg_logits[c * 256]);
}

TEST_CASE("forward determinism and dropout sampling") {
  const Network<float> net(desk(Variant::M4_multitask_hetero));
  const auto p = net.init(1);
  const auto x = testutil::random_vector<float>(24 * 24, 2);
  const auto a = net.forward(p, x, 24, 24, Mode::mc_sample, 1);
  const auto b = net.forward(p, x, 24, 24, Mode::mc_sample, 1);
  const auto c = net.forward(p, x, 24, 24, Mode::mc_sample, 2);
  CHECK(a.reg_mean == b.reg_mean);
  CHECK(a.seg_logits == b.seg_logits);
  CHECK(a.reg_mean != c.reg_mean);
  const auto d1 = net.forward(p, x, 24, 24, Mode::deterministic, 1);
  const auto d2 = net.forward(p, x, 24, 24, Mode::deterministic, 2);
  CHECK(d1.reg_mean == d2.reg_mean);

  // M1 has no dropout: train mode is deterministic.
  const Network<float> m1(desk(Variant::M1_reg));
  const auto p1 = m1.init(1);
  CHECK(m1.forward(p1, x, 24, 24, Mode::train, 1).reg_mean == m1.forward(p1, x, 24, 24, Mode::train, 9).reg_mean);
}

TEST_CASE("dropout mask") {
  const Network<double> net(desk(Variant::M4_multitask_hetero));
  const auto m = net.dropout_mask(100000, 4);
  std::size_t kept = 0;
  for (double v : m) {
    CHECK((v == 0.0 || v == 2.0));
    kept += v != 0.0;
  }
  CHECK(std::abs(static_cast<double>(kept) / m.size() - 0.5) < 0.01);
}

TEST_CASE("MC dropout average converges to the deterministic output for a linear network") {
  ModelConfig cfg = gradcheck::tiny_config(Variant::M4_multitask_hetero);
  cfg.trunk_features = {4, 4, 4, 4, 8};
  cfg.linear_activations = true;
  const Network<double> net(cfg);
  auto p = net.init(5);
  const int s = 10;
  const auto x = testutil::random_vector(s * s, 6);
  const auto det = net.forward(p, x, s, s, Mode::deterministic, 0);
  const int n = 4000;
  std::vector<double> sum(det.reg_mean.size(), 0.0), sq(det.reg_mean.size(), 0.0);
  for (int t = 0; t < n; ++t) {
    const auto o = net.forward(p, x, s, s, Mode::mc_sample, 1000 + t);
    for (std::size_t i = 0; i < sum.size(); ++i) {
      sum[i] += o.reg_mean[i];
      sq[i] += o.reg_mean[i] * o.reg_mean[i];
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) {
    const double mean = sum[i] / n;
    const double se = std::sqrt(std::max(0.0, sq[i] / n - mean * mean) / n);
    CHECK(std::abs(mean - det.reg_mean[i]) <= 5.0 * se + 1e-12);
  }
}

TEST_CASE("forward errors") {
  const Network<float> net(desk(Variant::M4_multitask_hetero));
  const auto p = net.init(1);
  // Dilation 4 with a 3x3 kernel reaches 4 voxels: 5 is the smallest patch.
  CHECK_NOTHROW(net.forward(p, std::vector<float>(25, 0.0f), 5, 5, Mode::deterministic, 0));
  CHECK_THROWS_AS(net.forward(p, std::vector<float>(16, 0.0f), 4, 4, Mode::deterministic, 0), ConfigError);
  CHECK_THROWS_AS(net.forward(p, std::vector<float>(10, 0.0f), 8, 8, Mode::deterministic, 0), ConfigError);
  auto x = testutil::random_vector<float>(64, 1);
  x[10] = NAN;
  try {
    net.forward(p, x, 8, 8, Mode::deterministic, 0);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("trunk.stem") != std::string::npos);
  }
}

TEST_CASE("model config validation and JSON") {
  ModelConfig c;
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.class_count = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.trunk_features.pop_back();
  CHECK_THROWS_AS(Network<float>{c}, ConfigError);
  c = ModelConfig::full_scale();
  CHECK(c.trunk_features.back() == 2048);
  const ModelConfig back = nlohmann::json(c).get<ModelConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  CHECK(parse_variant("M4") == Variant::M4_multitask_hetero);
  CHECK(parse_variant("M2b_seg") == Variant::M2b_seg);
  CHECK_THROWS_AS(parse_variant("M5"), ConfigError);
}

TEST_CASE("checkpoint round trip and validation") {
  const auto dir = testutil::scratch_dir("checkpoint");
  const ModelConfig cfg = desk(Variant::M3_multitask_homo);
  const Network<float> net(cfg);
  Checkpoint ck{cfg, 300, 17, net.init(17), std::nullopt, std::nullopt};
  ck.adam_m = ck.params.zeros_like();
  ck.adam_v = ck.params.zeros_like();
  ck.adam_v->tensors[0].data[0] = 0.25f;
  save_checkpoint(ck, dir / "ck");
  const Checkpoint back = load_checkpoint(dir / "ck");
  CHECK(back.iteration == 300);
  CHECK(back.init_seed == 17);
  CHECK(back.params == ck.params);
  REQUIRE(back.adam_v.has_value());
  CHECK(*back.adam_v == *ck.adam_v);
  CHECK(nlohmann::json(back.config) == nlohmann::json(cfg));

  // Header claims a different architecture than the payload holds.
  auto j = nlohmann::json::parse(io::read_text(dir / "ck.json"));
  j["config"]["trunk_features"] = {8, 8, 16, 32, 64};
  io::write_text(dir / "ck.json", j.dump());
  CHECK_THROWS(load_checkpoint(dir / "ck"));
}

TEST_CASE("analytic gradients match finite differences on the tiny model") {
  for (Variant v : {Variant::M1_reg, Variant::M1_seg, Variant::M2a_reg, Variant::M2b_reg, Variant::M2b_seg,
                    Variant::M3_multitask_homo, Variant::M4_multitask_hetero}) {
    const auto r = gradcheck::check_network(gradcheck::tiny_config(v), 21);
    CAPTURE(to_string(v));
    CAPTURE(r.worst_name);
    CAPTURE(r.worst_rel);
    CHECK(r.checked > 0);
    CHECK(r.failures == 0);
  }
}
