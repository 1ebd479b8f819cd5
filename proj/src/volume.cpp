#include "hetmt/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"

namespace hetmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace io {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span<const char>(text.data(), text.size()));
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory: " + dir.string());
}

fs::path stem_path(const fs::path& p) {
  const auto ext = p.extension();
  if (ext == ".json" || ext == ".bin") return fs::path(p).replace_extension();
  return p;
}

}  // namespace io

std::string to_string(VolumeKind kind) {
  switch (kind) {
    case VolumeKind::intensity: return "intensity";
    case VolumeKind::label: return "label";
    case VolumeKind::variance: return "variance";
  }
  return "?";
}

std::string to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "u8"; }

VolumeKind parse_volume_kind(const std::string& s) {
  if (s == "intensity") return VolumeKind::intensity;
  if (s == "label") return VolumeKind::label;
  if (s == "variance") return VolumeKind::variance;
  throw FormatError("unknown volume kind: " + s);
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "u8") return DType::u8;
  throw FormatError("unknown dtype: " + s);
}

Volume Volume::scalar(std::vector<int> shape, VolumeKind kind, float fill) {
  Volume v;
  v.shape = std::move(shape);
  v.spacing.assign(v.shape.size(), 1.0);
  v.kind = kind;
  v.values.assign(v.voxel_count(), fill);
  return v;
}

Volume Volume::label_map(std::vector<int> shape, std::uint8_t fill) {
  Volume v;
  v.shape = std::move(shape);
  v.spacing.assign(v.shape.size(), 1.0);
  v.kind = VolumeKind::label;
  v.labels.assign(v.voxel_count(), fill);
  return v;
}

std::size_t Volume::voxel_count() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

void Volume::validate(std::optional<int> class_count) const {
  if (shape.size() != 2 && shape.size() != 3)
    throw FormatError("volume must be 2D or 3D, got " + std::to_string(shape.size()) + " dims");
  for (int d : shape)
    if (d <= 0) throw FormatError("volume dimensions must be positive");
  if (spacing.size() != shape.size()) throw FormatError("spacing rank differs from shape rank");
  for (double s : spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw FormatError("spacing must be strictly positive");
  const std::size_t n = voxel_count();
  if (kind == VolumeKind::label) {
    if (labels.size() != n || !values.empty())
      throw FormatError("label payload has " + std::to_string(labels.size()) + " voxels, shape needs " +
                        std::to_string(n));
    if (class_count) {
      for (std::uint8_t l : labels)
        if (l >= *class_count)
          throw FormatError("label value " + std::to_string(l) + " outside [0, " +
                            std::to_string(*class_count - 1) + "]");
    }
  } else {
    if (values.size() != n || !labels.empty())
      throw FormatError("scalar payload has " + std::to_string(values.size()) + " voxels, shape needs " +
                        std::to_string(n));
    if (kind == VolumeKind::variance) {
      for (float x : values)
        if (!(x >= 0.0f)) throw FormatError("variance volume has a negative or NaN voxel");
    }
  }
}

void write_volume(const Volume& v, const fs::path& base_in) {
  v.validate();
  const fs::path base = io::stem_path(base_in);
  json meta;
  meta["shape"] = v.shape;
  meta["dtype"] = to_string(v.dtype());
  meta["spacing"] = v.spacing;
  meta["order"] = "row-major";
  meta["kind"] = to_string(v.kind);

  std::vector<char> payload;
  if (v.dtype() == DType::u8) {
    payload.assign(v.labels.begin(), v.labels.end());
  } else {
    payload.resize(v.values.size() * 4);
    for (std::size_t i = 0; i < v.values.size(); ++i) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(v.values[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      std::memcpy(payload.data() + 4 * i, &bits, 4);
    }
  }
  io::write_bytes(fs::path(base).concat(".bin"), payload);
  io::write_text(fs::path(base).concat(".json"), meta.dump(2) + "\n");
}

Volume read_volume(const fs::path& base_in, std::optional<int> class_count) {
  const fs::path base = io::stem_path(base_in);
  const fs::path meta_path = fs::path(base).concat(".json");
  json meta;
  try {
    meta = json::parse(io::read_text(meta_path));
  } catch (const json::exception& e) {
    throw FormatError("bad volume sidecar " + meta_path.string() + ": " + e.what());
  }

  Volume v;
  try {
    v.shape = meta.at("shape").get<std::vector<int>>();
    v.spacing = meta.at("spacing").get<std::vector<double>>();
    v.kind = parse_volume_kind(meta.at("kind").get<std::string>());
    const DType dtype = parse_dtype(meta.at("dtype").get<std::string>());
    if (meta.value("order", std::string("row-major")) != "row-major")
      throw FormatError("unsupported voxel order in " + meta_path.string());
    if (dtype != v.dtype())
      throw FormatError("dtype " + to_string(dtype) + " incompatible with kind " + to_string(v.kind));
  } catch (const json::exception& e) {
    throw FormatError("bad volume sidecar " + meta_path.string() + ": " + e.what());
  }
  for (int d : v.shape)
    if (d <= 0) throw FormatError("non-positive dimension in " + meta_path.string());

  const std::vector<char> payload = io::read_bytes(fs::path(base).concat(".bin"));
  const std::size_t n = v.voxel_count();
  const std::size_t width = v.dtype() == DType::u8 ? 1 : 4;
  if (payload.size() != n * width)
    throw FormatError("payload of " + base.string() + " holds " + std::to_string(payload.size() / width) +
                      " voxels, header says " + std::to_string(n));
  if (v.dtype() == DType::u8) {
    v.labels.assign(payload.begin(), payload.end());
  } else {
    v.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, payload.data() + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      v.values[i] = std::bit_cast<float>(bits);
    }
  }
  v.validate(class_count);
  return v;
}

}  // namespace hetmt
