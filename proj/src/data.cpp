#include "p2v/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "p2v/common.hpp"

namespace p2v {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// .xyz io
// ---------------------------------------------------------------------------

PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  check<DataError>(in.good(), "cannot open point file '", path, "'");
  PointCloud cloud;
  bool any_labels = false;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::istringstream fields(line);
    double x, y, z;
    if (!(fields >> x >> y >> z)) {
      throw DataError(concat(path, ":", line_no, ": malformed point line"));
    }
    long long label;
    if (fields >> label) {
      any_labels = true;
      cloud.labels.push_back(static_cast<int32_t>(label));
    } else {
      cloud.labels.push_back(0);
    }
    cloud.points.push_back({static_cast<float>(x), static_cast<float>(y),
                            static_cast<float>(z)});
  }
  check<DataError>(!cloud.points.empty(), "point file '", path, "' is empty");
  if (!any_labels) cloud.labels.clear();
  cloud.validate();
  return cloud;
}

void save_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  check<DataError>(out.good(), "cannot write point file '", path, "'");
  char buf[128];
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    if (cloud.has_labels()) {
      std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %d\n", p[0], p[1], p[2],
                    cloud.labels[i]);
    } else {
      std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", p[0], p[1], p[2]);
    }
    out << buf;
  }
  check<DataError>(out.good(), "write failed for '", path, "'");
}

void save_xyz_colored(const std::vector<Point3>& points,
                      const std::vector<std::array<float, 3>>& colors,
                      const std::string& path) {
  check(points.size() == colors.size(), "colored export: size mismatch");
  std::ofstream out(path);
  check<DataError>(out.good(), "cannot write point file '", path, "'");
  char buf[192];
  for (size_t i = 0; i < points.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.6g %.6g %.6g\n",
                  points[i][0], points[i][1], points[i][2], colors[i][0],
                  colors[i][1], colors[i][2]);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  check<DataError>(in.good(), "cannot open manifest '", path, "'");
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& err) {
    throw DataError(concat("manifest '", path, "': ", err.what()));
  }
  DatasetManifest manifest;
  check<DataError>(doc.value("version", 0) == 1, "manifest '", path,
                   "': unsupported version");
  manifest.version = 1;
  for (const auto& name : doc.at("classes")) {
    manifest.classes.push_back(name.get<std::string>());
  }
  const int64_t num_classes = static_cast<int64_t>(manifest.classes.size());
  for (const auto& item : doc.at("samples")) {
    DatasetManifest::Sample sample;
    sample.path = item.at("path").get<std::string>();
    sample.label = item.at("label").get<int>();
    sample.split = item.at("split").get<std::string>();
    if (item.contains("parts")) {
      sample.parts = item.at("parts").get<std::string>();
    }
    check<DataError>(sample.label >= 0 && sample.label < num_classes,
                     "manifest '", path, "': label ", sample.label,
                     " outside the class table");
    check<DataError>(sample.split == "train" || sample.split == "test",
                     "manifest '", path, "': bad split '", sample.split, "'");
    manifest.samples.push_back(std::move(sample));
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  json doc;
  doc["version"] = manifest.version;
  doc["classes"] = manifest.classes;
  doc["samples"] = json::array();
  for (const auto& sample : manifest.samples) {
    json item = {{"path", sample.path},
                 {"label", sample.label},
                 {"split", sample.split}};
    if (!sample.parts.empty()) item["parts"] = sample.parts;
    doc["samples"].push_back(std::move(item));
  }
  std::ofstream out(path);
  check<DataError>(out.good(), "cannot write manifest '", path, "'");
  out << doc.dump(2) << "\n";
}

LoadedDataset load_split(const std::string& manifest_path,
                         const std::string& split) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  LoadedDataset data;
  data.class_names = manifest.classes;
  for (const auto& sample : manifest.samples) {
    if (sample.split != split) continue;
    const fs::path full = base / sample.path;
    check<DataError>(fs::exists(full), "manifest sample '", full.string(),
                     "' does not exist");
    data.clouds.push_back(load_xyz(full.string()));
    data.labels.push_back(sample.label);
  }
  return data;
}

// ---------------------------------------------------------------------------
// synthetic shapes
// ---------------------------------------------------------------------------

Primitive primitive_from_string(const std::string& name) {
  if (name == "sphere") return Primitive::kSphere;
  if (name == "cube") return Primitive::kCube;
  if (name == "cylinder") return Primitive::kCylinder;
  if (name == "cone") return Primitive::kCone;
  if (name == "torus") return Primitive::kTorus;
  throw ConfigError(concat("unknown primitive '", name, "'"));
}

std::string to_string(Primitive primitive) {
  switch (primitive) {
    case Primitive::kSphere: return "sphere";
    case Primitive::kCube: return "cube";
    case Primitive::kCylinder: return "cylinder";
    case Primitive::kCone: return "cone";
    case Primitive::kTorus: return "torus";
  }
  return "?";
}

namespace {

struct SurfaceSample {
  Point3 point;
  Point3 normal;
};

SurfaceSample sample_sphere(double radius, Rng& rng) {
  double x, y, z, norm2;
  do {
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
    norm2 = x * x + y * y + z * z;
  } while (norm2 < 1e-12);
  const double inv = 1.0 / std::sqrt(norm2);
  const float nx = static_cast<float>(x * inv);
  const float ny = static_cast<float>(y * inv);
  const float nz = static_cast<float>(z * inv);
  const float r = static_cast<float>(radius);
  return {{r * nx, r * ny, r * nz}, {nx, ny, nz}};
}

SurfaceSample sample_cube(double side, Rng& rng) {
  const double half = side / 2.0;
  const int64_t face = rng.uniform_int(6);
  const int axis = static_cast<int>(face / 2);
  const float sign = face % 2 == 0 ? 1.0f : -1.0f;
  const double u = rng.uniform(-half, half);
  const double v = rng.uniform(-half, half);
  Point3 p{};
  Point3 n{};
  p[axis] = sign * static_cast<float>(half);
  n[axis] = sign;
  p[(axis + 1) % 3] = static_cast<float>(u);
  p[(axis + 2) % 3] = static_cast<float>(v);
  return {p, n};
}

SurfaceSample sample_cylinder(double radius, double height, Rng& rng) {
  const double side_area = 2.0 * std::numbers::pi * radius * height;
  const double cap_area = std::numbers::pi * radius * radius;
  const double total = side_area + 2.0 * cap_area;
  const double pick = rng.uniform01() * total;
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  if (pick < side_area) {
    const double z = rng.uniform(-height / 2.0, height / 2.0);
    return {{static_cast<float>(radius * std::cos(theta)),
             static_cast<float>(radius * std::sin(theta)),
             static_cast<float>(z)},
            {static_cast<float>(std::cos(theta)),
             static_cast<float>(std::sin(theta)), 0.0f}};
  }
  const float sign = pick < side_area + cap_area ? 1.0f : -1.0f;
  const double rho = radius * std::sqrt(rng.uniform01());
  return {{static_cast<float>(rho * std::cos(theta)),
           static_cast<float>(rho * std::sin(theta)),
           sign * static_cast<float>(height / 2.0)},
          {0.0f, 0.0f, sign}};
}

SurfaceSample sample_cone(double radius, double height, Rng& rng) {
  const double slant = std::sqrt(radius * radius + height * height);
  const double side_area = std::numbers::pi * radius * slant;
  const double base_area = std::numbers::pi * radius * radius;
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  if (rng.uniform01() * (side_area + base_area) < side_area) {
    // apex at +h/2, base ring at -h/2; lateral area grows linearly toward
    // the base, hence the sqrt
    const double t = std::sqrt(rng.uniform01());
    const double rho = radius * t;
    const double z = height / 2.0 - height * t;
    const double inv = 1.0 / slant;
    return {{static_cast<float>(rho * std::cos(theta)),
             static_cast<float>(rho * std::sin(theta)),
             static_cast<float>(z)},
            {static_cast<float>(height * std::cos(theta) * inv),
             static_cast<float>(height * std::sin(theta) * inv),
             static_cast<float>(radius * inv)}};
  }
  const double rho = radius * std::sqrt(rng.uniform01());
  return {{static_cast<float>(rho * std::cos(theta)),
           static_cast<float>(rho * std::sin(theta)),
           static_cast<float>(-height / 2.0)},
          {0.0f, 0.0f, -1.0f}};
}

SurfaceSample sample_torus(double major, double minor, Rng& rng) {
  // Rejection in the tube angle keeps the sampling uniform in surface area.
  double phi;
  for (;;) {
    phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double accept = (major + minor * std::cos(phi)) / (major + minor);
    if (rng.uniform01() < accept) break;
  }
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ring = major + minor * std::cos(phi);
  return {{static_cast<float>(ring * std::cos(theta)),
           static_cast<float>(ring * std::sin(theta)),
           static_cast<float>(minor * std::sin(phi))},
          {static_cast<float>(std::cos(phi) * std::cos(theta)),
           static_cast<float>(std::cos(phi) * std::sin(theta)),
           static_cast<float>(std::sin(phi))}};
}

}  // namespace

PointCloud generate_synthetic_shape(const SyntheticShapeSpec& spec) {
  check<ConfigError>(spec.point_count >= 1, "shape spec: point count < 1");
  check<ConfigError>(spec.noise_sigma >= 0.0, "shape spec: negative noise");
  check<ConfigError>(spec.size_a > 0.0 && spec.size_b > 0.0,
                     "shape spec: sizes must be positive");
  Rng rng(spec.seed);
  PointCloud cloud;
  cloud.points.reserve(spec.point_count);
  for (int64_t i = 0; i < spec.point_count; ++i) {
    SurfaceSample s{};
    switch (spec.primitive) {
      case Primitive::kSphere: s = sample_sphere(spec.size_a, rng); break;
      case Primitive::kCube: s = sample_cube(spec.size_a, rng); break;
      case Primitive::kCylinder:
        s = sample_cylinder(spec.size_a, spec.size_b, rng);
        break;
      case Primitive::kCone:
        s = sample_cone(spec.size_a, spec.size_b, rng);
        break;
      case Primitive::kTorus:
        s = sample_torus(spec.size_a, spec.size_b, rng);
        break;
    }
    const float offset =
        spec.noise_sigma > 0.0
            ? static_cast<float>(rng.normal() * spec.noise_sigma)
            : 0.0f;
    cloud.points.push_back({s.point[0] + offset * s.normal[0],
                            s.point[1] + offset * s.normal[1],
                            s.point[2] + offset * s.normal[2]});
  }
  return cloud;
}

PointCloud generate_banded_cylinder(double radius, double height,
                                    double noise_sigma, int64_t point_count,
                                    uint64_t seed) {
  SyntheticShapeSpec spec;
  spec.primitive = Primitive::kCylinder;
  spec.size_a = radius;
  spec.size_b = height;
  spec.noise_sigma = noise_sigma;
  spec.point_count = point_count;
  spec.seed = seed;
  PointCloud cloud = generate_synthetic_shape(spec);
  cloud.labels.resize(cloud.points.size());
  const float third = static_cast<float>(height) / 3.0f;
  const float bottom = -static_cast<float>(height) / 2.0f;
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const float z = cloud.points[i][2];
    int band = static_cast<int>((z - bottom) / third);
    cloud.labels[i] = std::clamp(band, 0, 2);
  }
  return cloud;
}

namespace {

SyntheticShapeSpec class_spec(int label, double jitter, Rng& rng) {
  SyntheticShapeSpec spec;
  spec.primitive = static_cast<Primitive>(label);
  auto j = [&] { return 1.0 + jitter * rng.uniform(-1.0, 1.0); };
  switch (spec.primitive) {
    case Primitive::kSphere:
      spec.size_a = 1.0 * j();
      break;
    case Primitive::kCube:
      spec.size_a = 1.6 * j();
      break;
    case Primitive::kCylinder:
      spec.size_a = 0.6 * j();
      spec.size_b = 2.0 * j();
      break;
    case Primitive::kCone:
      spec.size_a = 0.9 * j();
      spec.size_b = 1.8 * j();
      break;
    case Primitive::kTorus:
      spec.size_a = 0.8 * j();
      spec.size_b = 0.3 * j();
      break;
  }
  return spec;
}

}  // namespace

LoadedDataset make_synthetic_classification(int64_t per_class, int64_t points,
                                            double noise_sigma,
                                            uint64_t seed) {
  LoadedDataset data;
  data.class_names = {"sphere", "cube", "cylinder", "cone", "torus"};
  Rng rng = Rng::derive(seed, "synthetic-classification");
  for (int label = 0; label < 5; ++label) {
    for (int64_t i = 0; i < per_class; ++i) {
      SyntheticShapeSpec spec = class_spec(label, 0.2, rng);
      spec.noise_sigma = noise_sigma;
      spec.point_count = points;
      spec.seed = rng.next_u64();
      data.clouds.push_back(generate_synthetic_shape(spec));
      data.labels.push_back(label);
    }
  }
  return data;
}

LoadedDataset make_synthetic_partseg(int64_t count, int64_t points,
                                     double noise_sigma, uint64_t seed) {
  LoadedDataset data;
  data.class_names = {"cylinder"};
  Rng rng = Rng::derive(seed, "synthetic-partseg");
  for (int64_t i = 0; i < count; ++i) {
    const double radius = 0.5 + 0.2 * rng.uniform01();
    const double height = 1.6 + 0.8 * rng.uniform01();
    data.clouds.push_back(generate_banded_cylinder(radius, height, noise_sigma,
                                                   points, rng.next_u64()));
    data.labels.push_back(0);
  }
  return data;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

void AugmentationSpec::validate() const {
  check<ConfigError>(scale_lo > 0.0 && scale_lo <= scale_hi,
                     "augment: need 0 < scale_lo <= scale_hi");
  check<ConfigError>(anisotropic_fraction >= 0.0 && anisotropic_fraction < 1.0,
                     "augment: anisotropic fraction must be in [0, 1)");
  check<ConfigError>(gravity_axis >= 0 && gravity_axis <= 2,
                     "augment: gravity axis must be 0, 1, or 2");
}

PointCloud augment(const PointCloud& cloud, const AugmentationSpec& spec,
                   Rng& rng) {
  spec.validate();
  PointCloud out = cloud;
  if (spec.uniform_scale) {
    const float s =
        static_cast<float>(rng.uniform(spec.scale_lo, spec.scale_hi));
    for (auto& p : out.points) {
      p[0] *= s;
      p[1] *= s;
      p[2] *= s;
    }
  }
  if (spec.anisotropic_scale) {
    const float f = static_cast<float>(spec.anisotropic_fraction);
    const float sx = 1.0f + f * static_cast<float>(rng.uniform(-1.0, 1.0));
    const float sy = 1.0f + f * static_cast<float>(rng.uniform(-1.0, 1.0));
    const float sz = 1.0f + f * static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& p : out.points) {
      p[0] *= sx;
      p[1] *= sy;
      p[2] *= sz;
    }
  }
  if (spec.rotate_gravity) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const int a = (spec.gravity_axis + 1) % 3;
    const int b = (spec.gravity_axis + 2) % 3;
    for (auto& p : out.points) {
      const float u = p[a];
      const float v = p[b];
      p[a] = c * u - s * v;
      p[b] = s * u + c * v;
    }
  }
  if (spec.center_unit_sphere) {
    double cx = 0.0, cy = 0.0, cz = 0.0;
    for (const auto& p : out.points) {
      cx += p[0];
      cy += p[1];
      cz += p[2];
    }
    const double inv = 1.0 / static_cast<double>(out.size());
    const float mx = static_cast<float>(cx * inv);
    const float my = static_cast<float>(cy * inv);
    const float mz = static_cast<float>(cz * inv);
    float max_norm2 = 0.0f;
    for (auto& p : out.points) {
      p[0] -= mx;
      p[1] -= my;
      p[2] -= mz;
      max_norm2 =
          std::max(max_norm2, p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    }
    if (max_norm2 > 0.0f) {
      const float inv_norm = 1.0f / std::sqrt(max_norm2);
      for (auto& p : out.points) {
        p[0] *= inv_norm;
        p[1] *= inv_norm;
        p[2] *= inv_norm;
      }
    }
  }
  return out;
}

PointCloud make_pretrain_sample(const PointCloud& cloud, int64_t target_points,
                                const AugmentationSpec& spec, Rng& rng) {
  check<DataError>(cloud.size() >= target_points,
                   "make_pretrain_sample: cloud has ", cloud.size(),
                   " points, need at least ", target_points);
  PointCloud sampled = fps_resample(cloud, target_points, rng.next_u64());
  return augment(sampled, spec, rng);
}

}  // namespace p2v
