// Command-line driver: dataset generation, the three pretraining stages,
// finetuning, few-shot evaluation, baseline comparison and diagnostics.

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "dcs/core/error.hpp"
#include "dcs/core/runtime.hpp"
#include "dcs/io/checkpoint.hpp"
#include "dcs/io/cloud_io.hpp"
#include "dcs/io/config.hpp"
#include "dcs/io/dataset.hpp"
#include "dcs/pipeline/evaluation.hpp"
#include "dcs/verify/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace dcs;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

struct Context {
  RunConfig config;
  std::uint64_t seed = 1;
  fs::path out;
};

Context open_context(const Globals& g) {
  Context ctx;
  ctx.config = RunConfig::load(g.config);
  if (g.seed) ctx.config.seed = *g.seed;
  ctx.seed = ctx.config.seed;
  ctx.out = g.out;
  fs::create_directories(ctx.out);
  return ctx;
}

/// Key/value lines written as comments ahead of the full config, so the
/// record itself loads as a config file.
class Record {
 public:
  Record(const Context& ctx, std::string command) : ctx_(ctx), command_(std::move(command)) {
    add("command", command_);
    add("version", DCSNET_VERSION);
    add("seed", ctx.seed);
  }

  template <class T>
  void add(const std::string& key, const T& value) {
    lines_.push_back(fmt::format("# {} = {}", key, value));
  }

  void hash(const std::string& key, std::uint64_t h) { add(key, fmt::format("{:016x}", h)); }

  fs::path write() const {
    const fs::path path = ctx_.out / (command_ + ".record");
    std::ofstream f(path);
    if (!f) throw Error(fmt::format("cannot write {}", path.string()));
    for (const auto& l : lines_) f << l << '\n';
    f << ctx_.config.to_ini();
    return path;
  }

 private:
  const Context& ctx_;
  std::string command_;
  std::vector<std::string> lines_;
};

DatasetSpec dataset_spec(const RunConfig& c) {
  DatasetSpec spec;
  for (const auto& name : c.data.classes) spec.families.push_back(parse_shape_family(name));
  spec.per_class = c.data.per_class;
  spec.points = c.data.points;
  spec.scale_jitter = c.data.scale_jitter;
  spec.noise = c.data.noise;
  return spec;
}

DataSplit load_split(const Context& ctx) {
  const fs::path dir = ctx.config.data.dir;
  if (!fs::exists(dir / "manifest.csv")) {
    throw Error(fmt::format("no dataset in '{}' (run gen-data first)", dir.string()));
  }
  return split_dataset(load_dataset(dir), ctx.config.data.holdout, ctx.seed);
}

void write_log(const fs::path& path, const LossLog& log) {
  std::ofstream f(path);
  if (!f) throw Error(fmt::format("cannot write {}", path.string()));
  log.write_csv(f);
}

fs::path default_input(const Context& ctx, const std::string& given, const char* file) {
  return given.empty() ? ctx.out / file : fs::path(given);
}

StageOptions stage_options(const Context& ctx, const std::optional<Checkpoint>& resume) {
  StageOptions opt;
  opt.seed = ctx.seed;
  if (resume) opt.resume = &*resume;
  opt.on_epoch = [](const LossLog::Row& r) {
    std::string line = fmt::format("epoch {:4d}  lr {:.3e}", r.epoch, r.lr);
    for (double v : r.values) line += fmt::format("  {:.6f}", v);
    fmt::print("{}\n", line);
    std::fflush(stdout);
  };
  return opt;
}

std::optional<Checkpoint> maybe_load(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return Checkpoint::load(path);
}

int cmd_gen_data(const Context& ctx) {
  const DatasetSpec spec = dataset_spec(ctx.config);
  generate_dataset(spec, ctx.seed, ctx.config.data.dir);
  Record rec(ctx, "gen-data");
  rec.add("clouds", spec.families.size() * spec.per_class);
  rec.add("dir", ctx.config.data.dir);
  fmt::print("wrote {} clouds to {}\n", spec.families.size() * spec.per_class, ctx.config.data.dir);
  rec.write();
  return 0;
}

int cmd_stage(const Context& ctx, StageId stage, const std::string& from, const std::string& resume) {
  const DataSplit split = load_split(ctx);
  DcsNetModel model(ctx.config, split.train.classes(), ctx.seed);
  const std::optional<Checkpoint> resumed = maybe_load(resume);
  const StagePlan plan = make_plan(ctx.config, stage);
  const StageOptions opt = stage_options(ctx, resumed);
  Record rec(ctx, to_string(stage));
  StageResult result;
  if (stage == StageId::Stage1) {
    result = run_stage1(model, split.train, plan, opt);
  } else {
    const char* prev = stage == StageId::Stage2 ? "stage1.ckpt" : "stage2.ckpt";
    const Checkpoint previous = resumed ? *resumed : Checkpoint::load(default_input(ctx, from, prev));
    rec.hash("sampler_hash_before", model.hash(groups::kSampler));
    result = stage == StageId::Stage2 ? run_stage2(model, split.train, previous, plan, opt)
                                      : run_stage3(model, split.train, previous, plan, opt);
    rec.hash("sampler_hash_after", model.hash(groups::kSampler));
  }
  const std::string name = to_string(stage);
  result.checkpoint.save(ctx.out / (name + ".ckpt"));
  write_log(ctx.out / (name + "_loss.csv"), result.log);
  rec.add("epochs", result.checkpoint.epoch);
  rec.hash("frozen_hash", result.frozen_hash);
  rec.write();
  fmt::print("saved {}\n", (ctx.out / (name + ".ckpt")).string());
  return 0;
}

int cmd_finetune(const Context& ctx, const std::string& from, bool stop_gradient, bool random_init) {
  const DataSplit split = load_split(ctx);
  DcsNetModel model(ctx.config, split.train.classes(), ctx.seed);
  const StagePlan plan = make_plan(ctx.config, StageId::Finetune, stop_gradient);
  const StageOptions opt = stage_options(ctx, std::nullopt);
  const FinetuneResult r =
      random_init ? finetune_from_current(model, split, plan, stop_gradient, opt)
                  : finetune(model, split, Checkpoint::load(default_input(ctx, from, "stage3.ckpt")), plan,
                             stop_gradient, opt);
  Record rec(ctx, "finetune");
  rec.add("stop_gradient", stop_gradient);
  rec.add("random_init", random_init);
  rec.hash("sampler_hash_before", r.sampler_hash_before);
  rec.hash("sampler_hash_after", r.sampler_hash_after);
  rec.add("sampler_unchanged", r.sampler_hash_before == r.sampler_hash_after);
  rec.add("test_accuracy", fmt::format("{:.4f}", r.accuracy));
  r.stage.checkpoint.save(ctx.out / "finetune.ckpt");
  write_log(ctx.out / "finetune_loss.csv", r.stage.log);
  rec.write();
  fmt::print("test accuracy {:.4f}  sampler {}\n", r.accuracy,
             r.sampler_hash_before == r.sampler_hash_after ? "unchanged" : "changed");
  return 0;
}

void load_into(DcsNetModel& model, const fs::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  ckpt.restore(model.params);
}

int cmd_fewshot(const Context& ctx, const std::string& from) {
  const fs::path dir = ctx.config.data.dir;
  const Dataset data = load_dataset(dir);
  DcsNetModel model(ctx.config, data.classes(), ctx.seed);
  load_into(model, default_input(ctx, from, "stage3.ckpt"));
  const auto& fc = ctx.config.fewshot;
  FewShotTask task{fc.ways, fc.shots, fc.queries, ctx.seed, fc.head_epochs, fc.lr};
  const FewShotResult r = few_shot_eval(model, data, task, fc.episodes);
  std::ofstream f(ctx.out / "fewshot.csv");
  f << "episode,accuracy\n";
  for (std::size_t e = 0; e < r.episodes.size(); ++e) f << fmt::format("{},{}\n", e + 1, r.episodes[e].accuracy);
  Record rec(ctx, "fewshot");
  rec.add("task", fmt::format("{}-way {}-shot", fc.ways, fc.shots));
  rec.add("mean", fmt::format("{:.4f}", r.mean));
  rec.add("stddev", fmt::format("{:.4f}", r.stddev));
  rec.write();
  fmt::print("{}-way {}-shot over {} episodes: {:.2f} +- {:.2f} %\n", fc.ways, fc.shots, r.episodes.size(),
             100.0 * r.mean, 100.0 * r.stddev);
  return 0;
}

int cmd_compare(const Context& ctx, const std::string& from) {
  const DataSplit split = load_split(ctx);
  DcsNetModel model(ctx.config, split.test.classes(), ctx.seed);
  load_into(model, default_input(ctx, from, "stage3.ckpt"));
  const CompareReport r = baseline_compare(model, split.test, ctx.seed);
  std::ofstream f(ctx.out / "compare.csv");
  r.write_csv(f);
  Record rec(ctx, "compare");
  rec.add("mean_fps", r.mean_fps);
  rec.add("mean_dcs", r.mean_dcs);
  rec.add("mean_random", r.mean_random);
  rec.add("dcs_beats_random", r.dcs_beats_random);
  rec.write();
  fmt::print("mean center CD  fps {:.5f}  dcs {:.5f}  random {:.5f}  (dcs < random on {:.0f}% of clouds)\n",
             r.mean_fps, r.mean_dcs, r.mean_random, 100.0 * r.dcs_beats_random);
  return 0;
}

int cmd_gradcheck(const Context& ctx, std::size_t instances) {
  const auto cases = run_gradcheck_suite(instances, ctx.seed);
  bool ok = true;
  for (const auto& c : cases) {
    fmt::print("{:<28} {:>3} instances  max rel err {:.2e}  {}\n", c.name, c.instances, c.max_error,
               c.passed ? "ok" : "FAIL");
    ok = ok && c.passed;
  }
  Record rec(ctx, "gradcheck");
  rec.add("cases", cases.size());
  rec.add("passed", ok);
  rec.write();
  return ok ? 0 : 1;
}

int cmd_heatmap(const Context& ctx, const std::string& from, const std::string& cloud_path) {
  DcsNetModel model(ctx.config, ctx.config.data.classes.size(), ctx.seed);
  load_into(model, default_input(ctx, from, "stage2.ckpt"));
  Tensor coords = model.sphere_tensor;
  if (!cloud_path.empty()) coords = read_cloud(fs::path(cloud_path)).normalized().to_tensor();
  const ProbabilityMap q = model.dcs(coords, false);
  const fs::path path = ctx.out / "heatmap.txt";
  std::ofstream f(path);
  write_heatmap(f, coords, q);
  Record rec(ctx, "heatmap");
  rec.add("rows", coords.size(0));
  rec.add("source", cloud_path.empty() ? std::string("sphere") : cloud_path);
  rec.write();
  fmt::print("wrote {} rows to {}\n", coords.size(0), path.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_resident();
  CLI::App app{"Leakage-free point-cloud pretraining with differentiable center sampling"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);
  app.set_version_flag("--version", DCSNET_VERSION);

  Globals g;
  app.add_option("--config", g.config, "Run configuration file")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  std::string from, resume, cloud;
  bool stop_gradient = true, random_init = false;
  std::size_t instances = 20;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset into data.dir");
  auto* s1 = app.add_subcommand("stage1", "Train the canonical sphere encoder and decoder");
  auto* s2 = app.add_subcommand("stage2", "Train the composition network U");
  auto* s3 = app.add_subcommand("stage3", "Train U and the point transformer jointly");
  auto* ft = app.add_subcommand("finetune", "Finetune the classifier on the labeled split");
  auto* fsh = app.add_subcommand("fewshot", "Few-shot evaluation with frozen features");
  auto* cmp = app.add_subcommand("compare", "Center-set chamfer of FPS, DCS and random centers");
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  auto* hm = app.add_subcommand("heatmap", "Export U's probability map");

  s1->add_option("--resume", resume, "Continue from a partial stage-1 checkpoint");
  for (auto* sc : {s2, s3}) {
    sc->add_option("--from", from, "Predecessor checkpoint (default: OUT/stage<n-1>.ckpt)");
    sc->add_option("--resume", resume, "Continue from a partial checkpoint of this stage");
  }
  ft->add_option("--from", from, "Stage-3 checkpoint (default: OUT/stage3.ckpt)");
  ft->add_option("--stop-gradient", stop_gradient, "Freeze the sampler during finetuning (true|false)")
      ->capture_default_str();
  ft->add_flag("--random-init", random_init, "Skip pretraining weights (baseline)");
  for (auto* sc : {fsh, cmp}) sc->add_option("--from", from, "Checkpoint (default: OUT/stage3.ckpt)");
  gc->add_option("--instances", instances, "Random instances per case")->capture_default_str();
  hm->add_option("--from", from, "Checkpoint (default: OUT/stage2.ckpt)");
  hm->add_option("--cloud", cloud, "Evaluate U on this cloud instead of the sphere samples");

  CLI11_PARSE(app, argc, argv);

  try {
    const Context ctx = open_context(g);
    if (*gen) return cmd_gen_data(ctx);
    if (*s1) return cmd_stage(ctx, StageId::Stage1, from, resume);
    if (*s2) return cmd_stage(ctx, StageId::Stage2, from, resume);
    if (*s3) return cmd_stage(ctx, StageId::Stage3, from, resume);
    if (*ft) return cmd_finetune(ctx, from, stop_gradient, random_init);
    if (*fsh) return cmd_fewshot(ctx, from);
    if (*cmp) return cmd_compare(ctx, from);
    if (*gc) return cmd_gradcheck(ctx, instances);
    if (*hm) return cmd_heatmap(ctx, from, cloud);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 1;
}
