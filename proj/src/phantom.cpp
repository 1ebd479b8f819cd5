#include "hetmt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"
#include "hetmt/rng.hpp"

namespace hetmt {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<OrganPrior> PhantomSpec::default_organs() {
  std::vector<OrganPrior> organs(5);
  // name, label, center y/x ranges, radius y/x ranges
  organs[0] = {"bladder", 5, 0.26, 0.30, 0.46, 0.54, 0.10, 0.13, 0.15, 0.19};
  organs[1] = {"prostate", 3, 0.55, 0.58, 0.47, 0.53, 0.07, 0.08, 0.08, 0.10};
  organs[2] = {"rectum", 4, 0.78, 0.81, 0.45, 0.55, 0.06, 0.08, 0.09, 0.12};
  organs[3] = {"left_femur", 1, 0.48, 0.58, 0.14, 0.20, 0.10, 0.12, 0.09, 0.11};
  organs[4] = {"right_femur", 2, 0.48, 0.58, 0.80, 0.86, 0.10, 0.12, 0.09, 0.11};
  return organs;
}

void PhantomSpec::validate() const {
  if (shape.size() != 2 && shape.size() != 3) throw ConfigError("phantom shape must be 2D or 3D");
  for (int d : shape)
    if (d < 4) throw ConfigError("phantom dimensions must be >= 4");
  if (spacing.size() != shape.size()) throw ConfigError("phantom spacing rank differs from shape rank");
  for (double s : spacing)
    if (!(s > 0.0)) throw ConfigError("phantom spacing must be strictly positive");
  if (class_count < 2 || class_count > 255) throw ConfigError("class count must be in [2, 255]");
  if (static_cast<int>(mr_means.size()) != class_count || static_cast<int>(ct_means.size()) != class_count)
    throw ConfigError("intensity tables must have one entry per class");
  if (!class_names.empty() && static_cast<int>(class_names.size()) != class_count)
    throw ConfigError("class names must have one entry per class");
  if (!(sigma_lo > 0.0) || !(sigma_hi >= sigma_lo)) throw ConfigError("need sigma_hi >= sigma_lo > 0");
  if (!(decay_length > 0.0)) throw ConfigError("decay length must be positive");
  if (!(texture_scale > 0.0)) throw ConfigError("texture scale must be positive");
  if (rim_width < 0.0) throw ConfigError("rim width must be nonnegative");
  for (int c : rim_classes)
    if (c <= 0 || c >= class_count) throw ConfigError("rim class out of range");
  if (max_placement_retries < 1) throw ConfigError("placement retries must be >= 1");
  for (const auto& o : organs) {
    if (o.label <= 0 || o.label >= class_count)
      throw ConfigError("organ '" + o.name + "' has label outside [1, C-1]");
    auto check_axis = [&](double c_lo, double c_hi, double r_lo, double r_hi, const char* axis) {
      if (c_lo > c_hi || r_lo > r_hi || r_lo <= 0.0)
        throw ConfigError("organ '" + o.name + "' has an empty " + axis + " range");
      if (c_lo - r_hi < 0.0 || c_hi + r_hi > 1.0)
        throw ConfigError("organ '" + o.name + "' may extend outside the image along " + axis);
    };
    check_axis(o.center_y_lo, o.center_y_hi, o.radius_y_lo, o.radius_y_hi, "y");
    check_axis(o.center_x_lo, o.center_x_hi, o.radius_x_lo, o.radius_x_hi, "x");
    if (shape.size() == 3) check_axis(o.center_z_lo, o.center_z_hi, o.radius_z_lo, o.radius_z_hi, "z");
  }
}

void to_json(json& j, const OrganPrior& o) {
  j = json{{"name", o.name},
           {"label", o.label},
           {"center_y", {o.center_y_lo, o.center_y_hi}},
           {"center_x", {o.center_x_lo, o.center_x_hi}},
           {"radius_y", {o.radius_y_lo, o.radius_y_hi}},
           {"radius_x", {o.radius_x_lo, o.radius_x_hi}},
           {"center_z", {o.center_z_lo, o.center_z_hi}},
           {"radius_z", {o.radius_z_lo, o.radius_z_hi}}};
}

void from_json(const json& j, OrganPrior& o) {
  auto range = [&](const char* key, double& lo, double& hi) {
    if (!j.contains(key)) return;
    const auto& r = j.at(key);
    lo = r.at(0).get<double>();
    hi = r.at(1).get<double>();
  };
  o.name = j.at("name").get<std::string>();
  o.label = j.at("label").get<int>();
  range("center_y", o.center_y_lo, o.center_y_hi);
  range("center_x", o.center_x_lo, o.center_x_hi);
  range("radius_y", o.radius_y_lo, o.radius_y_hi);
  range("radius_x", o.radius_x_lo, o.radius_x_hi);
  range("center_z", o.center_z_lo, o.center_z_hi);
  range("radius_z", o.radius_z_lo, o.radius_z_hi);
}

void to_json(json& j, const PhantomSpec& s) {
  j = json{{"shape", s.shape},
           {"spacing", s.spacing},
           {"class_count", s.class_count},
           {"class_names", s.class_names},
           {"mr_means", s.mr_means},
           {"ct_means", s.ct_means},
           {"rim_classes", s.rim_classes},
           {"rim_value", s.rim_value},
           {"rim_width", s.rim_width},
           {"organs", s.organs},
           {"sigma_hi", s.sigma_hi},
           {"sigma_lo", s.sigma_lo},
           {"decay_length", s.decay_length},
           {"texture_scale", s.texture_scale},
           {"mr_texture_amplitude", s.mr_texture_amplitude},
           {"ct_texture_amplitude", s.ct_texture_amplitude},
           {"seed", s.seed},
           {"max_placement_retries", s.max_placement_retries}};
}

void from_json(const json& j, PhantomSpec& s) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("shape", s.shape);
  if (j.contains("shape") && !j.contains("spacing")) s.spacing.assign(s.shape.size(), 1.0);
  get("spacing", s.spacing);
  get("class_count", s.class_count);
  get("class_names", s.class_names);
  get("mr_means", s.mr_means);
  get("ct_means", s.ct_means);
  get("rim_classes", s.rim_classes);
  get("rim_value", s.rim_value);
  get("rim_width", s.rim_width);
  get("organs", s.organs);
  get("sigma_hi", s.sigma_hi);
  get("sigma_lo", s.sigma_lo);
  get("decay_length", s.decay_length);
  get("texture_scale", s.texture_scale);
  get("mr_texture_amplitude", s.mr_texture_amplitude);
  get("ct_texture_amplitude", s.ct_texture_amplitude);
  get("seed", s.seed);
  get("max_placement_retries", s.max_placement_retries);
}

double noise_std_at_distance(const PhantomSpec& spec, double distance) {
  return spec.sigma_lo + (spec.sigma_hi - spec.sigma_lo) * std::exp(-distance / spec.decay_length);
}

namespace {

struct Grid {
  int d, h, w;
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * h + y) * w + x;
  }
  std::size_t size() const { return static_cast<std::size_t>(d) * h * w; }
};

Grid grid_of(const std::vector<int>& shape) {
  if (shape.size() == 3) return {shape[0], shape[1], shape[2]};
  return {1, shape[0], shape[1]};
}

// Boundary voxels: some face neighbour carries a different label.
std::vector<std::size_t> boundary_voxels(const Grid& g, const std::vector<std::uint8_t>& labels) {
  std::vector<std::size_t> out;
  for (int z = 0; z < g.d; ++z)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x) {
        const std::uint8_t l = labels[g.index(z, y, x)];
        bool edge = false;
        if (x > 0 && labels[g.index(z, y, x - 1)] != l) edge = true;
        if (x + 1 < g.w && labels[g.index(z, y, x + 1)] != l) edge = true;
        if (y > 0 && labels[g.index(z, y - 1, x)] != l) edge = true;
        if (y + 1 < g.h && labels[g.index(z, y + 1, x)] != l) edge = true;
        if (z > 0 && labels[g.index(z - 1, y, x)] != l) edge = true;
        if (z + 1 < g.d && labels[g.index(z + 1, y, x)] != l) edge = true;
        if (edge) out.push_back(g.index(z, y, x));
      }
  return out;
}

// In-place separable Gaussian blur with mirrored borders along one axis.
void blur_axis(std::vector<double>& data, const Grid& g, int axis, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    norm += kernel[k + radius];
  }
  for (double& k : kernel) k /= norm;

  const int len = axis == 0 ? g.d : axis == 1 ? g.h : g.w;
  if (len == 1) return;
  auto mirror = [len](int i) {
    while (i < 0 || i >= len) i = i < 0 ? -i - 1 : 2 * len - i - 1;
    return i;
  };
  std::vector<double> line(len), out(len);
  const int n0 = axis == 0 ? g.h : g.d;
  const int n1 = axis == 2 ? g.h : g.w;
  for (int a = 0; a < n0; ++a)
    for (int b = 0; b < n1; ++b) {
      auto at = [&](int i) -> double& {
        if (axis == 0) return data[g.index(i, a, b)];
        if (axis == 1) return data[g.index(a, i, b)];
        return data[g.index(a, b, i)];
      };
      for (int i = 0; i < len; ++i) line[i] = at(i);
      for (int i = 0; i < len; ++i) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * line[mirror(i + k)];
        out[i] = acc;
      }
      for (int i = 0; i < len; ++i) at(i) = out[i];
    }
}

std::vector<double> smooth_texture(const Grid& g, double scale, Rng& rng) {
  std::vector<double> t(g.size());
  for (double& v : t) v = rng.normal();
  if (g.d > 1) blur_axis(t, g, 0, scale);
  blur_axis(t, g, 1, scale);
  blur_axis(t, g, 2, scale);
  double mean = 0.0;
  for (double v : t) mean += v;
  mean /= static_cast<double>(t.size());
  double var = 0.0;
  for (double v : t) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(t.size()));
  for (double& v : t) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  return t;
}

std::vector<std::uint8_t> place_organs(const PhantomSpec& spec, const Grid& g, Rng& rng) {
  std::vector<std::uint8_t> labels(g.size(), 0);
  const bool is3d = spec.shape.size() == 3;
  constexpr int kGap = 2;  // background voxels kept between organs and from the border

  for (const auto& organ : spec.organs) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_placement_retries && !placed; ++attempt) {
      const double cy = rng.uniform(organ.center_y_lo, organ.center_y_hi) * g.h;
      const double cx = rng.uniform(organ.center_x_lo, organ.center_x_hi) * g.w;
      const double ry = rng.uniform(organ.radius_y_lo, organ.radius_y_hi) * g.h;
      const double rx = rng.uniform(organ.radius_x_lo, organ.radius_x_hi) * g.w;
      double cz = 0.0, rz = 1.0;
      if (is3d) {
        cz = rng.uniform(organ.center_z_lo, organ.center_z_hi) * g.d;
        rz = rng.uniform(organ.radius_z_lo, organ.radius_z_hi) * g.d;
      }
      std::vector<std::size_t> voxels;
      bool ok = true;
      for (int z = 0; z < g.d && ok; ++z)
        for (int y = 0; y < g.h && ok; ++y)
          for (int x = 0; x < g.w && ok; ++x) {
            const double dy = (y + 0.5 - cy) / ry;
            const double dx = (x + 0.5 - cx) / rx;
            const double dz = is3d ? (z + 0.5 - cz) / rz : 0.0;
            if (dy * dy + dx * dx + dz * dz > 1.0) continue;
            if (y < kGap || x < kGap || y >= g.h - kGap || x >= g.w - kGap) ok = false;
            if (is3d && (z < kGap || z >= g.d - kGap)) ok = false;
            const int zr = is3d ? kGap : 0;
            for (int oz = -zr; oz <= zr && ok; ++oz)
              for (int oy = -kGap; oy <= kGap && ok; ++oy)
                for (int ox = -kGap; ox <= kGap && ok; ++ox) {
                  const int zz = z + oz, yy = y + oy, xx = x + ox;
                  if (zz < 0 || yy < 0 || xx < 0 || zz >= g.d || yy >= g.h || xx >= g.w) continue;
                  if (labels[g.index(zz, yy, xx)] != 0) ok = false;
                }
            voxels.push_back(g.index(z, y, x));
          }
      if (ok && !voxels.empty()) {
        for (std::size_t i : voxels) labels[i] = static_cast<std::uint8_t>(organ.label);
        placed = true;
      }
    }
    if (!placed)
      throw GenerationError("could not place organ '" + organ.name + "' after " +
                            std::to_string(spec.max_placement_retries) + " attempts");
  }
  return labels;
}

}  // namespace

std::vector<float> boundary_distance(const Volume& labels) {
  const Grid g = grid_of(labels.shape);
  const auto boundary = boundary_voxels(g, labels.labels);
  std::vector<float> dist(g.size(), std::numeric_limits<float>::infinity());
  if (boundary.empty()) return dist;
  struct P {
    int z, y, x;
  };
  std::vector<P> pts;
  pts.reserve(boundary.size());
  for (std::size_t i : boundary) {
    const int x = static_cast<int>(i % g.w);
    const int y = static_cast<int>((i / g.w) % g.h);
    const int z = static_cast<int>(i / (static_cast<std::size_t>(g.w) * g.h));
    pts.push_back({z, y, x});
  }
  for (int z = 0; z < g.d; ++z)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x) {
        long best = std::numeric_limits<long>::max();
        for (const P& p : pts) {
          const long dz = z - p.z, dy = y - p.y, dx = x - p.x;
          best = std::min(best, dz * dz + dy * dy + dx * dx);
        }
        dist[g.index(z, y, x)] = static_cast<float>(std::sqrt(static_cast<double>(best)));
      }
  return dist;
}

PhantomFields render_phantom(const PhantomSpec& spec, std::uint64_t case_seed) {
  spec.validate();
  const Grid g = grid_of(spec.shape);

  Rng placement_rng(derive_seed(case_seed, {1}));
  Rng texture_rng(derive_seed(case_seed, {2}));

  PhantomFields f;
  f.labels = Volume::label_map(spec.shape);
  f.labels.spacing = spec.spacing;
  f.labels.labels = place_organs(spec, g, placement_rng);

  const std::vector<float> dist = boundary_distance(f.labels);
  f.boundary_distance = Volume::scalar(spec.shape);
  f.boundary_distance.spacing = spec.spacing;
  f.boundary_distance.values = dist;

  f.sigma_true = Volume::scalar(spec.shape, VolumeKind::variance);
  f.sigma_true.spacing = spec.spacing;
  for (std::size_t i = 0; i < g.size(); ++i)
    f.sigma_true.values[i] = static_cast<float>(noise_std_at_distance(spec, dist[i]));

  const std::vector<double> texture = smooth_texture(g, spec.texture_scale, texture_rng);

  // Rim voxels: within rim_width of a voxel with another label.
  std::vector<bool> rim(g.size(), false);
  if (spec.rim_width > 0.0 && !spec.rim_classes.empty()) {
    const int r = static_cast<int>(std::ceil(spec.rim_width));
    const double r2 = spec.rim_width * spec.rim_width;
    const auto& lab = f.labels.labels;
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x) {
          const std::uint8_t l = lab[g.index(z, y, x)];
          if (std::find(spec.rim_classes.begin(), spec.rim_classes.end(), l) == spec.rim_classes.end())
            continue;
          const int zr = g.d > 1 ? r : 0;
          bool hit = false;
          for (int oz = -zr; oz <= zr && !hit; ++oz)
            for (int oy = -r; oy <= r && !hit; ++oy)
              for (int ox = -r; ox <= r && !hit; ++ox) {
                if (oz * oz + oy * oy + ox * ox > r2) continue;
                const int zz = z + oz, yy = y + oy, xx = x + ox;
                if (zz < 0 || yy < 0 || xx < 0 || zz >= g.d || yy >= g.h || xx >= g.w) continue;
                if (lab[g.index(zz, yy, xx)] != l) hit = true;
              }
          rim[g.index(z, y, x)] = hit;
        }
  }

  f.mr = Volume::scalar(spec.shape);
  f.mr.spacing = spec.spacing;
  f.ct_clean = Volume::scalar(spec.shape);
  f.ct_clean.spacing = spec.spacing;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const int c = f.labels.labels[i];
    const double ct_base = rim[i] ? spec.rim_value : spec.ct_means[c];
    f.mr.values[i] = static_cast<float>(spec.mr_means[c] + spec.mr_texture_amplitude * texture[i]);
    f.ct_clean.values[i] = static_cast<float>(ct_base + spec.ct_texture_amplitude * texture[i]);
  }
  return f;
}

CaseBundle gen_phantom_case(const PhantomSpec& spec, std::uint64_t case_seed) {
  PhantomFields f = render_phantom(spec, case_seed);
  Rng noise_rng(derive_seed(case_seed, {3}));
  CaseBundle b;
  b.id = "case_" + std::to_string(case_seed);
  b.ct = f.ct_clean;
  for (std::size_t i = 0; i < b.ct.values.size(); ++i)
    b.ct.values[i] = static_cast<float>(static_cast<double>(f.ct_clean.values[i]) +
                                        static_cast<double>(f.sigma_true.values[i]) * noise_rng.normal());
  b.mr = std::move(f.mr);
  b.labels = std::move(f.labels);
  b.sigma_true = std::move(f.sigma_true);
  return b;
}

std::vector<ManifestEntry> Manifest::split(const std::string& which) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : cases)
    if (e.split == which) out.push_back(e);
  return out;
}

Manifest gen_dataset(const PhantomSpec& spec, int n_cases, const fs::path& out_dir, int test_cases) {
  if (n_cases < 1) throw ConfigError("gen_dataset needs n_cases >= 1");
  spec.validate();
  if (test_cases < 0) test_cases = n_cases / 4;
  if (test_cases > n_cases) throw ConfigError("more test cases than cases");
  io::ensure_dir(out_dir);

  Manifest m;
  m.root = out_dir;
  json arr = json::array();
  for (int i = 0; i < n_cases; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    CaseBundle b = gen_phantom_case(spec, spec.seed + static_cast<std::uint64_t>(i));
    b.id = id;
    const fs::path dir = out_dir / id;
    io::ensure_dir(dir);
    write_volume(b.mr, dir / "mr");
    write_volume(b.ct, dir / "ct");
    write_volume(b.labels, dir / "labels");
    write_volume(b.sigma_true, dir / "sigma_true");
    ManifestEntry e{id,
                    std::string(id) + "/mr",
                    std::string(id) + "/ct",
                    std::string(id) + "/labels",
                    std::string(id) + "/sigma_true",
                    i >= n_cases - test_cases ? "test" : "train"};
    arr.push_back(json{{"id", e.id},
                       {"mr", e.mr},
                       {"ct", e.ct},
                       {"labels", e.labels},
                       {"sigma_true", e.sigma_true},
                       {"split", e.split}});
    m.cases.push_back(std::move(e));
  }
  io::write_text(out_dir / "manifest.json", arr.dump(2) + "\n");
  io::write_text(out_dir / "phantom_spec.json", json(spec).dump(2) + "\n");
  return m;
}

Manifest load_manifest(const fs::path& manifest_path) {
  fs::path path = manifest_path;
  if (fs::is_directory(path)) path /= "manifest.json";
  if (!fs::exists(path)) throw IoError("manifest not found: " + path.string());
  json arr;
  try {
    arr = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw FormatError("bad manifest " + path.string() + ": " + e.what());
  }
  if (!arr.is_array()) throw FormatError("manifest must be a JSON array: " + path.string());
  Manifest m;
  m.root = path.parent_path();
  for (const auto& j : arr) {
    ManifestEntry e;
    try {
      e.id = j.at("id").get<std::string>();
      e.mr = j.at("mr").get<std::string>();
      e.ct = j.at("ct").get<std::string>();
      e.labels = j.at("labels").get<std::string>();
      e.sigma_true = j.at("sigma_true").get<std::string>();
      e.split = j.at("split").get<std::string>();
    } catch (const json::exception& ex) {
      throw FormatError("bad manifest entry in " + path.string() + ": " + ex.what());
    }
    m.cases.push_back(std::move(e));
  }
  if (m.cases.empty()) throw FormatError("manifest is empty: " + path.string());
  return m;
}

CaseBundle load_case(const Manifest& m, const ManifestEntry& e, int class_count) {
  CaseBundle b;
  b.id = e.id;
  b.mr = read_volume(m.resolve(e.mr));
  b.ct = read_volume(m.resolve(e.ct));
  b.labels = read_volume(m.resolve(e.labels), class_count);
  b.sigma_true = read_volume(m.resolve(e.sigma_true));
  if (b.mr.shape != b.ct.shape || b.mr.shape != b.labels.shape || b.mr.shape != b.sigma_true.shape)
    throw FormatError("case " + e.id + " has volumes of differing shape");
  return b;
}

}  // namespace hetmt
