#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetmt/volume.hpp"

namespace hetmt {

/// Placement prior for one organ, as fractions of the image extent.
/// The z fields are only used for 3D phantoms.
struct OrganPrior {
  std::string name;
  int label = 0;
  double center_y_lo = 0.5, center_y_hi = 0.5;
  double center_x_lo = 0.5, center_x_hi = 0.5;
  double radius_y_lo = 0.1, radius_y_hi = 0.1;
  double radius_x_lo = 0.1, radius_x_hi = 0.1;
  double center_z_lo = 0.5, center_z_hi = 0.5;
  double radius_z_lo = 0.3, radius_z_hi = 0.3;
};

struct PhantomSpec {
  std::vector<int> shape{64, 64};
  std::vector<double> spacing{1.0, 1.0};
  int class_count = 6;
  std::vector<std::string> class_names{"background", "left_femur", "right_femur",
                                       "prostate",   "rectum",     "bladder"};
  // Pseudo-MR means are deliberately not monotonic in the CT means.
  std::vector<double> mr_means{100.0, 30.0, 55.0, 160.0, 220.0, 380.0};
  std::vector<double> ct_means{0.0, 600.0, 600.0, 40.0, -50.0, 10.0};
  // Cortical-bone-like rim painted inside the listed classes.
  std::vector<int> rim_classes{1, 2};
  double rim_value = 800.0;
  double rim_width = 1.5;
  std::vector<OrganPrior> organs = default_organs();

  double sigma_hi = 150.0;
  double sigma_lo = 15.0;
  double decay_length = 2.0;

  double texture_scale = 3.0;
  double mr_texture_amplitude = 8.0;
  double ct_texture_amplitude = 20.0;

  std::uint64_t seed = 1;
  int max_placement_retries = 500;

  static std::vector<OrganPrior> default_organs();

  /// ConfigError on any violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

struct CaseBundle {
  std::string id;
  Volume mr;
  Volume ct;
  Volume labels;
  Volume sigma_true;
};

/// Everything rendered for a case before CT noise is added. `ct_clean` is the
/// noiseless CT, i.e. the conditional mean a perfect regressor would output.
struct PhantomFields {
  Volume labels;
  Volume mr;
  Volume ct_clean;
  Volume sigma_true;
  Volume boundary_distance;
};

/// sigma_lo + (sigma_hi - sigma_lo) * exp(-d / decay_length)
double noise_std_at_distance(const PhantomSpec& spec, double distance);

/// Euclidean distance (voxel units) from every voxel to the nearest label
/// boundary voxel, i.e. a voxel with a face neighbour of a different label.
/// Brute force over the boundary set.
std::vector<float> boundary_distance(const Volume& labels);

PhantomFields render_phantom(const PhantomSpec& spec, std::uint64_t case_seed);

CaseBundle gen_phantom_case(const PhantomSpec& spec, std::uint64_t case_seed);

struct ManifestEntry {
  std::string id;
  std::string mr;
  std::string ct;
  std::string labels;
  std::string sigma_true;
  std::string split;  // "train" or "test"
};

struct Manifest {
  std::filesystem::path root;  // directory the relative entry paths resolve against
  std::vector<ManifestEntry> cases;

  std::vector<ManifestEntry> split(const std::string& which) const;
  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

/// Writes n_cases bundles seeded spec.seed + index under out_dir and a
/// manifest.json. The last `test_cases` cases are flagged "test"; a negative
/// value selects n_cases / 4.
Manifest gen_dataset(const PhantomSpec& spec, int n_cases, const std::filesystem::path& out_dir,
                     int test_cases = -1);

Manifest load_manifest(const std::filesystem::path& manifest_path);

CaseBundle load_case(const Manifest& m, const ManifestEntry& e, int class_count);

}  // namespace hetmt
