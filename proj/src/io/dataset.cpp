#include "dcs/io/dataset.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dcs/core/error.hpp"
#include "dcs/io/cloud_io.hpp"

namespace dcs {

namespace {

constexpr double kTorusMajor = 1.0;
constexpr double kTorusMinor = 0.35;

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 random_rotation(Rng& rng) {
  double q[4];
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& c : q) {
      c = rng.normal();
      n2 += c * c;
    }
  } while (n2 < 1e-12);
  const double inv = 1.0 / std::sqrt(n2);
  for (double& c : q) c *= inv;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return Mat3{{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
               {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
               {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

Point3 disk_point(Rng& rng, double z) {
  const double r = std::sqrt(rng.uniform());
  const double t = 2.0 * std::numbers::pi * rng.uniform();
  return {r * std::cos(t), r * std::sin(t), z};
}

Point3 surface_point(ShapeFamily family, Rng& rng) {
  const double two_pi = 2.0 * std::numbers::pi;
  switch (family) {
    case ShapeFamily::Sphere: {
      Point3 p;
      double r2;
      do {
        p = {rng.normal(), rng.normal(), rng.normal()};
        r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
      } while (r2 < 1e-12);
      const double inv = 1.0 / std::sqrt(r2);
      return {p[0] * inv, p[1] * inv, p[2] * inv};
    }
    case ShapeFamily::Cube: {
      const std::size_t face = rng.below(6);
      const double a = rng.uniform(-1.0, 1.0), b = rng.uniform(-1.0, 1.0);
      const double s = face % 2 == 0 ? 1.0 : -1.0;
      switch (face / 2) {
        case 0: return {s, a, b};
        case 1: return {a, s, b};
        default: return {a, b, s};
      }
    }
    case ShapeFamily::Cylinder: {
      // Side area 4 pi, caps 2 pi in total.
      const double u = rng.uniform();
      if (u < 2.0 / 3.0) {
        const double t = two_pi * rng.uniform();
        return {std::cos(t), std::sin(t), rng.uniform(-1.0, 1.0)};
      }
      return disk_point(rng, u < 5.0 / 6.0 ? 1.0 : -1.0);
    }
    case ShapeFamily::Cone: {
      // Lateral area pi sqrt(5), base pi.
      const double lateral = std::sqrt(5.0);
      if (rng.uniform() < lateral / (lateral + 1.0)) {
        const double rho = std::sqrt(rng.uniform());
        const double t = two_pi * rng.uniform();
        return {rho * std::cos(t), rho * std::sin(t), 1.0 - 2.0 * rho};
      }
      return disk_point(rng, -1.0);
    }
    case ShapeFamily::Torus: {
      double theta;
      do {
        theta = two_pi * rng.uniform();
      } while (rng.uniform() * (kTorusMajor + kTorusMinor) > kTorusMajor + kTorusMinor * std::cos(theta));
      const double phi = two_pi * rng.uniform();
      const double ring = kTorusMajor + kTorusMinor * std::cos(theta);
      return {ring * std::cos(phi), ring * std::sin(phi), kTorusMinor * std::sin(theta)};
    }
  }
  throw Error("unknown shape family");
}

}  // namespace

ShapeFamily parse_shape_family(const std::string& name) {
  if (name == "sphere") return ShapeFamily::Sphere;
  if (name == "cube") return ShapeFamily::Cube;
  if (name == "cylinder") return ShapeFamily::Cylinder;
  if (name == "cone") return ShapeFamily::Cone;
  if (name == "torus") return ShapeFamily::Torus;
  throw Error(fmt::format("unknown shape family '{}'", name));
}

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::Sphere: return "sphere";
    case ShapeFamily::Cube: return "cube";
    case ShapeFamily::Cylinder: return "cylinder";
    case ShapeFamily::Cone: return "cone";
    case ShapeFamily::Torus: return "torus";
  }
  return "?";
}

PointCloud sample_surface(ShapeFamily family, std::size_t n, Rng& rng) {
  PointCloud c;
  c.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) c.points.push_back(surface_point(family, rng));
  return c;
}

PointCloud generate_shape(const ShapeSpec& spec, std::uint64_t seed) {
  if (spec.points < 32) throw Error(fmt::format("shape: need at least 32 points, got {}", spec.points));
  Rng rng(seed);
  PointCloud c = sample_surface(spec.family, spec.points, rng);
  Point3 s;
  for (double& v : s) v = rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter);
  const Mat3 r = random_rotation(rng);
  for (auto& p : c.points) {
    const Point3 q{p[0] * s[0], p[1] * s[1], p[2] * s[2]};
    for (int i = 0; i < 3; ++i) {
      p[i] = r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2];
      if (spec.noise > 0.0) p[i] += spec.noise * rng.normal();
    }
  }
  c.normalize();
  return c;
}

Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.families.empty()) throw Error("dataset: no shape families given");
  Dataset ds;
  const Rng master(seed);
  for (std::size_t c = 0; c < spec.families.size(); ++c) {
    ds.class_names.push_back(to_string(spec.families[c]));
    const ShapeSpec shape{spec.families[c], spec.scale_jitter, spec.noise, spec.points};
    for (std::size_t s = 0; s < spec.per_class; ++s) {
      const std::size_t index = c * spec.per_class + s;
      PointCloud cloud = generate_shape(shape, master.fork(index).seed());
      cloud.label = static_cast<int>(c);
      cloud.id = fmt::format("{}_{:04d}", ds.class_names[c], index);
      ds.clouds.push_back(std::move(cloud));
    }
  }
  return ds;
}

void generate_dataset(const DatasetSpec& spec, std::uint64_t seed,
                      const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
  const Dataset ds = make_dataset(spec, seed);
  std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
  if (!manifest) throw Error(fmt::format("cannot write '{}'", (dir / "manifest.csv").string()));
  manifest << "file,class,seed\n";
  const Rng master(seed);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const PointCloud& c = ds.clouds[i];
    const std::string file = c.id + ".txt";
    write_cloud(dir / file, c);
    manifest << fmt::format("{},{},{}\n", file, ds.class_names[static_cast<std::size_t>(*c.label)],
                            master.fork(i).seed());
  }
  if (!manifest) throw Error(fmt::format("failed writing manifest in '{}'", dir.string()));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw Error(fmt::format("no manifest.csv in '{}'", dir.string()));
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 || line.empty()) continue;
    std::stringstream ss(line);
    std::string file, cls, seed;
    if (!std::getline(ss, file, ',') || !std::getline(ss, cls, ',') || !std::getline(ss, seed)) {
      throw Error(fmt::format("manifest line {}: expected file,class,seed", line_no));
    }
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), cls);
    if (it == ds.class_names.end()) it = ds.class_names.insert(ds.class_names.end(), cls);
    PointCloud c = read_cloud(dir / file);
    c.label = static_cast<int>(it - ds.class_names.begin());
    ds.clouds.push_back(std::move(c));
  }
  if (ds.clouds.empty()) throw Error(fmt::format("dataset '{}' is empty", dir.string()));
  return ds;
}

}  // namespace dcs
