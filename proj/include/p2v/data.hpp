#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "p2v/geometry.hpp"
#include "p2v/rng.hpp"

namespace p2v {

// ----- .xyz text files --------------------------------------------------------

// One point per line: three whitespace-separated floats, optionally followed
// by an integer part label. Blank lines and '#' comments are skipped.
PointCloud load_xyz(const std::string& path);
void save_xyz(const PointCloud& cloud, const std::string& path);
// "x y z r g b" per line, colors in [0, 1].
void save_xyz_colored(const std::vector<Point3>& points,
                      const std::vector<std::array<float, 3>>& colors,
                      const std::string& path);

// ----- manifest ---------------------------------------------------------------

struct DatasetManifest {
  struct Sample {
    std::string path;
    int label = 0;
    std::string split;  // "train" | "test"
    std::string parts;  // optional path to per-point labels
  };
  int version = 1;
  std::vector<std::string> classes;
  std::vector<Sample> samples;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

struct LoadedDataset {
  std::vector<PointCloud> clouds;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  int64_t size() const { return static_cast<int64_t>(clouds.size()); }
};

// Loads every sample of the given split; paths resolve relative to the
// manifest's directory.
LoadedDataset load_split(const std::string& manifest_path,
                         const std::string& split);

// ----- synthetic shapes ---------------------------------------------------------

enum class Primitive { kSphere, kCube, kCylinder, kCone, kTorus };

Primitive primitive_from_string(const std::string& name);
std::string to_string(Primitive primitive);

struct SyntheticShapeSpec {
  Primitive primitive = Primitive::kSphere;
  double size_a = 1.0;  // radius / side / major radius
  double size_b = 1.0;  // height / minor radius (unused for sphere, cube)
  double noise_sigma = 0.0;
  int64_t point_count = 1024;
  uint64_t seed = 0;
};

// Uniform surface sampling plus Gaussian noise along the surface normal.
PointCloud generate_synthetic_shape(const SyntheticShapeSpec& spec);

// Cylinder split into three equal axial bands, labelled 0/1/2 bottom to top.
PointCloud generate_banded_cylinder(double radius, double height,
                                    double noise_sigma, int64_t point_count,
                                    uint64_t seed);

// The desk-scale five-class dataset: sphere, cube, cylinder, cone, torus with
// per-sample size jitter.
LoadedDataset make_synthetic_classification(int64_t per_class, int64_t points,
                                            double noise_sigma, uint64_t seed);
LoadedDataset make_synthetic_partseg(int64_t count, int64_t points,
                                     double noise_sigma, uint64_t seed);

// ----- augmentation -------------------------------------------------------------

struct AugmentationSpec {
  bool uniform_scale = false;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  bool anisotropic_scale = false;
  double anisotropic_fraction = 0.0;  // per-axis factor in [1-f, 1+f]
  bool rotate_gravity = false;
  int gravity_axis = 2;
  bool center_unit_sphere = false;

  void validate() const;
};

// Stages apply in order: uniform scale, anisotropic scale, gravity-axis
// rotation, centering, unit-sphere rescale. Labels are untouched.
PointCloud augment(const PointCloud& cloud, const AugmentationSpec& spec,
                   Rng& rng);

// FPS resample to target_points, then the pretraining augmentations.
PointCloud make_pretrain_sample(const PointCloud& cloud, int64_t target_points,
                                const AugmentationSpec& spec, Rng& rng);

}  // namespace p2v
