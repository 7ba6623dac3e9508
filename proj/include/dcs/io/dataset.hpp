#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcs/core/rng.hpp"
#include "dcs/geometry/point_cloud.hpp"

namespace dcs {

enum class ShapeFamily { Sphere, Cube, Cylinder, Cone, Torus };

ShapeFamily parse_shape_family(const std::string& name);
std::string to_string(ShapeFamily family);

/// Nominal surfaces: unit sphere; surface of [-1, 1]^3; capped cylinder of
/// radius 1 over z in [-1, 1]; cone with apex (0, 0, 1) and unit base disk at
/// z = -1; torus with radii 1 and 0.35 about the z axis. Sampling is uniform
/// by area.
PointCloud sample_surface(ShapeFamily family, std::size_t n, Rng& rng);

struct ShapeSpec {
  ShapeFamily family = ShapeFamily::Sphere;
  /// Per-axis scale factors are drawn from [1 - jitter, 1 + jitter].
  double scale_jitter = 0.2;
  /// Standard deviation of isotropic Gaussian noise added after rotation.
  double noise = 0.01;
  std::size_t points = 512;
};

/// Surface sample, then anisotropic scale jitter, a uniformly random
/// rotation, noise, and normalization. Deterministic in `seed`.
PointCloud generate_shape(const ShapeSpec& spec, std::uint64_t seed);

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> class_names;

  std::size_t size() const { return clouds.size(); }
  std::size_t classes() const { return class_names.size(); }
};

struct DatasetSpec {
  std::vector<ShapeFamily> families;
  std::size_t per_class = 40;
  std::size_t points = 512;
  double scale_jitter = 0.2;
  double noise = 0.01;
};

/// Class-major in-memory dataset; sample s of class c has seed
/// Rng(seed).fork(c * per_class + s).seed().
Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed);

/// Writes one cloud file per sample plus manifest.csv (file,class,seed).
void generate_dataset(const DatasetSpec& spec, std::uint64_t seed,
                      const std::filesystem::path& dir);

/// Reads a directory written by generate_dataset. Labels follow the order in
/// which classes first appear in the manifest.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace dcs
