#pragma once

#include <filesystem>
#include <iosfwd>

#include "dcs/geometry/point_cloud.hpp"

namespace dcs {

/// ASCII cloud format: optional leading '#' comment lines, then one point per
/// line as three reals separated by single spaces. Values are written in the
/// shortest form that reads back to the same double.
void write_cloud(std::ostream& out, const PointCloud& cloud);
void write_cloud(const std::filesystem::path& path, const PointCloud& cloud);

/// Rejects malformed or non-finite lines, naming the 1-based line number.
PointCloud read_cloud(std::istream& in, std::string id = {});
PointCloud read_cloud(const std::filesystem::path& path);

}  // namespace dcs
