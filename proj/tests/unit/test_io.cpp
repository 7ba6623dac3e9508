#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dcs/core/error.hpp"
#include "dcs/io/checkpoint.hpp"
#include "dcs/io/cloud_io.hpp"
#include "dcs/io/config.hpp"
#include "dcs/io/dataset.hpp"

using namespace dcs;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dcsnet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(CloudIo, ParsesPointsAndComments) {
  std::istringstream in("# a comment\n#another\n0 0 0\n1 0 0\n");
  const PointCloud c = read_cloud(in);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.points[1][0], 1.0);
}

TEST(CloudIo, RoundTripIsExact) {
  Rng rng(3);
  PointCloud c;
  for (int i = 0; i < 1024; ++i) c.points.push_back({rng.normal(), rng.uniform(-1e3, 1e3), rng.uniform() * 1e-7});
  std::stringstream s;
  write_cloud(s, c);
  const PointCloud back = read_cloud(s);
  ASSERT_EQ(back.size(), c.size());
  double err = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int k = 0; k < 3; ++k) err = std::max(err, std::fabs(back.points[i][k] - c.points[i][k]));
  EXPECT_LT(err, 1e-8);
  EXPECT_EQ(err, 0.0);
}

TEST(CloudIo, ErrorsNameTheLine) {
  auto parse = [](const std::string& text) {
    return error_of([&] {
      std::istringstream in(text);
      read_cloud(in);
    });
  };
  EXPECT_NE(parse("1 2\n").find("line 1"), std::string::npos);
  EXPECT_NE(parse("0 0 0\n1 x 2\n").find("line 2"), std::string::npos);
  EXPECT_NE(parse("0 0 0\n0 0 0\nnan 0 0\n").find("line 3"), std::string::npos);
  EXPECT_NE(parse("0 0 0\n1  0 0\n").find("line 2"), std::string::npos);
  EXPECT_NE(parse("0 0 0\n# late comment\n").find("line 2"), std::string::npos);
}

TEST(Dataset, SurfacesBeforeJitter) {
  Rng rng(1);
  for (const auto& p : sample_surface(ShapeFamily::Sphere, 500, rng).points)
    EXPECT_NEAR(std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]), 1.0, 1e-9);
  for (const auto& p : sample_surface(ShapeFamily::Cube, 500, rng).points)
    EXPECT_NEAR(std::max({std::fabs(p[0]), std::fabs(p[1]), std::fabs(p[2])}), 1.0, 1e-9);
  for (const auto& p : sample_surface(ShapeFamily::Torus, 500, rng).points) {
    const double ring = std::sqrt(p[0] * p[0] + p[1] * p[1]) - 1.0;
    EXPECT_NEAR(std::sqrt(ring * ring + p[2] * p[2]), 0.35, 1e-9);
  }
  for (const auto& p : sample_surface(ShapeFamily::Cylinder, 500, rng).points) {
    const double r = std::sqrt(p[0] * p[0] + p[1] * p[1]);
    EXPECT_TRUE(std::fabs(r - 1.0) < 1e-9 || (std::fabs(std::fabs(p[2]) - 1.0) < 1e-9 && r <= 1.0 + 1e-9));
  }
  EXPECT_THROW(parse_shape_family("pyramid"), Error);
}

TEST(Dataset, GenerationIsDeterministicAndCounted) {
  DatasetSpec spec;
  spec.families = {ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Cylinder, ShapeFamily::Cone,
                   ShapeFamily::Torus};
  spec.per_class = 40;
  spec.points = 64;
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  generate_dataset(spec, 17, a);
  generate_dataset(spec, 17, b);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() == ".txt") {
      ++files;
      EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename()));
    }
  }
  EXPECT_EQ(files, 200u);
  std::ifstream manifest(a / "manifest.csv");
  std::string line;
  std::getline(manifest, line);
  EXPECT_EQ(line, "file,class,seed");
  std::size_t rows = 0;
  while (std::getline(manifest, line)) rows += !line.empty();
  EXPECT_EQ(rows, 200u);

  const Dataset loaded = load_dataset(a);
  const Dataset memory = make_dataset(spec, 17);
  ASSERT_EQ(loaded.size(), 200u);
  EXPECT_EQ(loaded.class_names, memory.class_names);
  EXPECT_EQ(loaded.clouds[57].points, memory.clouds[57].points);
  EXPECT_EQ(loaded.clouds[57].label, memory.clouds[57].label);
  spec.points = 16;
  EXPECT_THROW(make_dataset(spec, 1), Error);
}

TEST(Dataset, UnwritablePathRejected) {
  DatasetSpec spec;
  spec.families = {ShapeFamily::Sphere};
  spec.per_class = 1;
  const fs::path blocker = scratch("blocked") / "file";
  std::ofstream(blocker) << "x";
  EXPECT_THROW(generate_dataset(spec, 1, blocker / "sub"), std::exception);
}

TEST(Config, DefaultsAndRoundTrip) {
  const RunConfig d = RunConfig::parse_string("");
  EXPECT_EQ(d.sampler.groups, 32u);
  EXPECT_EQ(d.sampler.points_per_group, 16u);
  EXPECT_EQ(d.stage1.epochs, 200u);
  EXPECT_EQ(d.stage3.epochs, 300u);
  const RunConfig c = RunConfig::parse_string(
      "# run\n[run]\nseed = 9\n[sampler]\ngroups = 12\ntemperature = 0.5\n[stage3]\nglobal_loss = mmd\n"
      "[data]\nclasses = sphere, torus\n");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.sampler.groups, 12u);
  EXPECT_EQ(c.sampler.temperature, 0.5);
  EXPECT_EQ(c.stage3.global_loss, "mmd");
  EXPECT_EQ(c.data.classes, (std::vector<std::string>{"sphere", "torus"}));
  EXPECT_EQ(RunConfig::parse_string(c.to_ini()).to_ini(), c.to_ini());
}

TEST(Config, RejectionsNameKeyAndLine) {
  const std::string unknown = error_of([] { RunConfig::parse_string("[sampler]\ngroups = 8\nbogus = 1\n"); });
  EXPECT_NE(unknown.find("line 3"), std::string::npos) << unknown;
  EXPECT_NE(unknown.find("bogus"), std::string::npos) << unknown;
  EXPECT_NE(error_of([] { RunConfig::parse_string("[nowhere]\n"); }).find("line 1"), std::string::npos);
  EXPECT_NE(error_of([] { RunConfig::parse_string("[run]\nseed 3\n"); }).find("line 2"), std::string::npos);
  EXPECT_NE(error_of([] { RunConfig::parse_string("[run]\nseed = x\n"); }).find("seed"), std::string::npos);
  EXPECT_THROW(RunConfig::parse_string("[backbone]\nheads = 5\n"), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ParameterSet ps;
  Rng rng(2);
  std::vector<double> w(12), b(3);
  for (double& x : w) x = rng.normal();
  for (double& x : b) x = rng.normal();
  ps.add("layer.weight", Tensor({4, 3}, w, true));
  ps.add("layer.bias", Tensor({3}, b, true));
  ps.add_buffer("layer.stat", Tensor({2}, {0.1, 0.7}));
  AdamW opt(ps.parameters(), 1e-3, 0.05);
  sum(square(ps.get("layer.weight").tensor)).backward();
  sum(ps.get("layer.bias").tensor).backward();
  opt.step();

  Checkpoint ck = Checkpoint::capture(ps, 2);
  ck.epoch = 3;
  ck.total_epochs = 7;
  ck.rng_seed = 99;
  ck.store_optimizer(opt);
  const fs::path path = scratch("ckpt") / "x.ckpt";
  ck.save(path);
  const Checkpoint back = Checkpoint::load(path);
  EXPECT_EQ(back.stage, 2u);
  EXPECT_EQ(back.epoch, 3u);
  EXPECT_EQ(back.total_epochs, 7u);
  EXPECT_EQ(back.rng_seed, 99u);
  EXPECT_FALSE(back.complete());

  ParameterSet other;
  other.add("layer.weight", Tensor::zeros({4, 3}, true));
  other.add("layer.bias", Tensor::zeros({3}, true));
  other.add_buffer("layer.stat", Tensor::zeros({2}));
  back.restore(other);
  EXPECT_EQ(other.hash(), ps.hash());
  AdamW opt2(other.parameters(), 1e-3, 0.05);
  back.restore_optimizer(opt2);
  EXPECT_EQ(opt2.state().m, opt.state().m);
  EXPECT_EQ(opt2.state().v, opt.state().v);
  EXPECT_EQ(opt2.state().step, opt.state().step);

  std::stringstream again;
  back.write(again);
  EXPECT_EQ(again.str(), slurp(path));

  ParameterSet wrong;
  wrong.add("layer.weight", Tensor::zeros({3, 4}, true));
  EXPECT_THROW(back.restore(wrong), Error);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  ParameterSet ps;
  ps.add("w", Tensor::zeros({2}, true));
  std::stringstream s;
  Checkpoint::capture(ps, 1).write(s);
  const std::string bytes = s.str();

  std::string magic = bytes;
  magic[0] = 'X';
  std::istringstream m(magic);
  EXPECT_NE(error_of([&] { Checkpoint::read(m); }).find("magic"), std::string::npos);

  std::string version = bytes;
  version[4] = 2;
  std::istringstream v(version);
  EXPECT_NE(error_of([&] { Checkpoint::read(v); }).find("version"), std::string::npos);

  std::istringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(Checkpoint::read(cut), Error);
  EXPECT_THROW(Checkpoint::load("/nonexistent/dir/x.ckpt"), Error);
}
