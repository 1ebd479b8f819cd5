#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hetmt {

enum class VolumeKind { intensity, label, variance };
enum class DType { f32, u8 };

std::string to_string(VolumeKind kind);
std::string to_string(DType dtype);
VolumeKind parse_volume_kind(const std::string& s);
DType parse_dtype(const std::string& s);

/// A 2D [H,W] or 3D [D,H,W] grid in row-major order. Label volumes store
/// their payload in `labels`, everything else in `values`.
struct Volume {
  std::vector<int> shape;
  std::vector<double> spacing;
  VolumeKind kind = VolumeKind::intensity;
  std::vector<float> values;
  std::vector<std::uint8_t> labels;

  static Volume scalar(std::vector<int> shape, VolumeKind kind = VolumeKind::intensity,
                       float fill = 0.0f);
  static Volume label_map(std::vector<int> shape, std::uint8_t fill = 0);

  DType dtype() const { return kind == VolumeKind::label ? DType::u8 : DType::f32; }
  std::size_t voxel_count() const;
  int depth() const { return shape.size() == 3 ? shape[0] : 1; }
  int height() const { return shape[shape.size() - 2]; }
  int width() const { return shape.back(); }
  std::size_t slice_size() const {
    return static_cast<std::size_t>(height()) * static_cast<std::size_t>(width());
  }

  /// Throws FormatError when an invariant does not hold. With a class count,
  /// label volumes are range-checked against [0, class_count-1].
  void validate(std::optional<int> class_count = std::nullopt) const;

  bool operator==(const Volume&) const = default;
};

/// Writes `<base>.bin` (little-endian payload) and `<base>.json` (sidecar).
void write_volume(const Volume& v, const std::filesystem::path& base);

/// Reads a volume written by write_volume. `base` may name the sidecar, the
/// payload, or the common stem.
Volume read_volume(const std::filesystem::path& base,
                   std::optional<int> class_count = std::nullopt);

}  // namespace hetmt
