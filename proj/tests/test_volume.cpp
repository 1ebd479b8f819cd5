#include <doctest.h>

#include <json.hpp>

#include <fstream>

#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"
#include "hetmt/volume.hpp"
#include "test_util.hpp"

using namespace hetmt;

TEST_CASE("volume round trip is bit exact") {
  const auto dir = testutil::scratch_dir("volume_roundtrip");
  Volume zeros = Volume::scalar({4, 4});
  write_volume(zeros, dir / "zeros");
  CHECK(read_volume(dir / "zeros") == zeros);

  Volume v = Volume::scalar({2, 3, 5}, VolumeKind::variance);
  v.spacing = {2.5, 0.7, 0.7};
  const auto data = testutil::random_vector<float>(v.voxel_count(), 3, 0.0, 1e4);
  v.values = data;
  v.values[7] = 1e-40f;  // denormal survives
  write_volume(v, dir / "var");
  CHECK(read_volume(dir / "var.json") == v);
  CHECK(read_volume(dir / "var.bin") == v);

  Volume l = Volume::label_map({6, 7});
  l.labels = testutil::random_labels(42, 6, 5);
  write_volume(l, dir / "labels");
  CHECK(read_volume(dir / "labels", 6) == l);
}

TEST_CASE("volume sidecar fields") {
  const auto dir = testutil::scratch_dir("volume_sidecar");
  write_volume(Volume::label_map({3, 2}, 1), dir / "l");
  const auto j = nlohmann::json::parse(io::read_text(dir / "l.json"));
  CHECK(j["shape"] == nlohmann::json::array({3, 2}));
  CHECK(j["dtype"] == "u8");
  CHECK(j["order"] == "row-major");
  CHECK(j["kind"] == "label");
  CHECK(j["spacing"].size() == 2);
}

TEST_CASE("truncated payload is rejected") {
  const auto dir = testutil::scratch_dir("volume_truncated");
  write_volume(Volume::scalar({4, 4}), dir / "v");
  auto bytes = io::read_bytes(dir / "v.bin");
  bytes.resize(15 * 4);
  io::write_bytes(dir / "v.bin", bytes);
  CHECK_THROWS_AS(read_volume(dir / "v"), FormatError);
}

TEST_CASE("label range is checked when a class count is given") {
  const auto dir = testutil::scratch_dir("volume_range");
  Volume l = Volume::label_map({2, 2});
  l.labels[3] = 7;
  write_volume(l, dir / "l");
  CHECK_NOTHROW(read_volume(dir / "l"));
  CHECK_THROWS_AS(read_volume(dir / "l", 6), FormatError);
}

TEST_CASE("unknown dtype and dtype/kind mismatch are rejected") {
  const auto dir = testutil::scratch_dir("volume_dtype");
  write_volume(Volume::scalar({2, 2}), dir / "v");
  auto j = nlohmann::json::parse(io::read_text(dir / "v.json"));
  j["dtype"] = "f64";
  io::write_text(dir / "v.json", j.dump());
  CHECK_THROWS(read_volume(dir / "v"));
  j["dtype"] = "u8";
  io::write_text(dir / "v.json", j.dump());
  CHECK_THROWS(read_volume(dir / "v"));
}

TEST_CASE("invalid volumes") {
  Volume v = Volume::scalar({2, 2}, VolumeKind::variance);
  v.values[0] = -1.0f;
  CHECK_THROWS_AS(v.validate(), FormatError);
  Volume s = Volume::scalar({2, 2});
  s.spacing = {1.0, 0.0};
  CHECK_THROWS_AS(s.validate(), FormatError);
  Volume bad = Volume::scalar({2, 2});
  bad.values.pop_back();
  CHECK_THROWS_AS(bad.validate(), FormatError);
}
