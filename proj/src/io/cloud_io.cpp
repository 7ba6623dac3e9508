#include "dcs/io/cloud_io.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "dcs/core/error.hpp"

namespace dcs {

void write_cloud(std::ostream& out, const PointCloud& cloud) {
  if (!cloud.id.empty()) out << "# " << cloud.id << '\n';
  std::string line;
  for (const auto& p : cloud.points) {
    line = fmt::format("{} {} {}\n", p[0], p[1], p[2]);
    out << line;
  }
}

void write_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot open '{}' for writing", path.string()));
  write_cloud(out, cloud);
  if (!out) throw Error(fmt::format("failed writing '{}'", path.string()));
}

namespace {

bool parse_real(std::string_view s, double& v) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  return ec == std::errc() && ptr == end;
}

}  // namespace

PointCloud read_cloud(std::istream& in, std::string id) {
  PointCloud cloud;
  cloud.id = std::move(id);
  std::string line;
  std::size_t line_no = 0;
  bool in_header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (in_header && !line.empty() && line[0] == '#') continue;
    in_header = false;
    if (line.empty()) continue;
    const auto a = line.find(' ');
    const auto b = a == std::string::npos ? a : line.find(' ', a + 1);
    if (a == std::string::npos || b == std::string::npos || line.find(' ', b + 1) != std::string::npos) {
      throw Error(fmt::format("line {}: expected 3 space-separated values, got '{}'", line_no, line));
    }
    const std::string_view sv(line);
    Point3 p{};
    if (!parse_real(sv.substr(0, a), p[0]) || !parse_real(sv.substr(a + 1, b - a - 1), p[1]) ||
        !parse_real(sv.substr(b + 1), p[2])) {
      throw Error(fmt::format("line {}: malformed number in '{}'", line_no, line));
    }
    for (double c : p) {
      if (!std::isfinite(c)) throw Error(fmt::format("line {}: non-finite value", line_no));
    }
    cloud.points.push_back(p);
  }
  if (cloud.points.empty()) throw Error("cloud file contains no points");
  return cloud;
}

PointCloud read_cloud(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open '{}'", path.string()));
  try {
    return read_cloud(in, path.stem().string());
  } catch (const Error& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace dcs
