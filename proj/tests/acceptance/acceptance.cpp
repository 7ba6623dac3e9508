// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any of them fails. Checkpoints and loss logs of the
// desk-scale run are left in the work directory.

#include <fmt/format.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "dcs/core/gumbel.hpp"
#include "dcs/core/runtime.hpp"
#include "dcs/geometry/distance.hpp"
#include "dcs/geometry/sampling.hpp"
#include "dcs/io/checkpoint.hpp"
#include "dcs/io/config.hpp"
#include "dcs/pipeline/evaluation.hpp"
#include "dcs/verify/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace dcs;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdicts {
  int failed = 0;

  void report(const std::string& id, bool pass, const std::string& what) {
    if (!pass) ++failed;
    fmt::print("[{}] {:>3}  {}\n", pass ? "PASS" : "FAIL", id, what);
    std::fflush(stdout);
  }
};

void progress(const std::string& msg) {
  fmt::print("      .. {}\n", msg);
  std::fflush(stdout);
}

Dataset dataset_for(const RunConfig& c) {
  DatasetSpec spec;
  for (const auto& n : c.data.classes) spec.families.push_back(parse_shape_family(n));
  spec.per_class = c.data.per_class;
  spec.points = c.data.points;
  spec.scale_jitter = c.data.scale_jitter;
  spec.noise = c.data.noise;
  return make_dataset(spec, c.seed);
}

void save_log(const fs::path& path, const LossLog& log) {
  std::ofstream f(path);
  log.write_csv(f);
}

std::string checkpoint_bytes(const Checkpoint& c) {
  std::ostringstream s;
  c.write(s);
  return s.str();
}

bool all_finite(const LossLog& log) {
  for (const auto& r : log.rows)
    for (double v : r.values)
      if (!std::isfinite(v)) return false;
  return true;
}

StageOptions progress_options(const RunConfig& c, const std::string& label, std::size_t every) {
  StageOptions o;
  o.seed = c.seed;
  const auto t0 = Clock::now();
  o.on_epoch = [label, every, t0](const LossLog::Row& r) {
    if (r.epoch == 1 || r.epoch % every == 0)
      progress(fmt::format("{} epoch {} loss {:.5f} ({:.0f}s)", label, r.epoch, r.values.front(), seconds_since(t0)));
  };
  return o;
}

// ---------------------------------------------------------------------------

void gradient_fidelity(Verdicts& v) {
  const auto t0 = Clock::now();
  const auto cases = run_gradcheck_suite(20, 1, 1e-4);
  const double took = seconds_since(t0);
  bool ok = took < 120.0;
  double worst = 0.0;
  std::size_t redrawn = 0;
  for (const auto& c : cases) {
    ok = ok && c.passed && c.instances >= 20;
    worst = std::max(worst, c.max_error);
    redrawn += c.redrawn;
    if (!c.passed) progress(fmt::format("gradcheck {} failed, error {:.3e}", c.name, c.max_error));
  }
  v.report("1", ok,
           fmt::format("gradient fidelity: {} ops x 20 instances, worst rel. error {:.2e}, {} kink redraws, {:.1f}s",
                       cases.size(), worst, redrawn, took));
}

PointCloud random_cloud(std::size_t n, Rng& rng) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  return c;
}

void oracle_equivalence(Verdicts& v) {
  Rng rng(2024);
  bool fps_ok = true;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 16 + rng.below(113);
    const std::size_t k = 1 + rng.below(16);
    const PointCloud c = random_cloud(n, rng);
    std::vector<std::size_t> sel{0};
    while (sel.size() < k) {
      std::size_t best = 0;
      double best_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t s : sel) d = std::min(d, squared_distance(c.points[i], c.points[s]));
        if (d > best_d) {
          best_d = d;
          best = i;
        }
      }
      sel.push_back(best);
    }
    fps_ok = fps_ok && fps(c, k) == sel;
  }

  double cd_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    const PointCloud p = random_cloud(1 + rng.below(100), rng), g = random_cloud(1 + rng.below(100), rng);
    for (bool squared : {true, false}) {
      auto one_way = [squared](const PointCloud& a, const PointCloud& b) {
        double s = 0.0;
        for (const auto& x : a.points) {
          double m = std::numeric_limits<double>::infinity();
          for (const auto& y : b.points) {
            const double d = squared_distance(x, y);
            m = std::min(m, squared ? d : std::sqrt(d));
          }
          s += m;
        }
        return s / a.size();
      };
      const double expect = one_way(p, g) + one_way(g, p);
      cd_err = std::max(cd_err, std::fabs(chamfer(p, g, squared ? ChamferForm::L2 : ChamferForm::L1) - expect));
    }
  }

  double emd_err = 0.0;
  for (std::size_t n = 1; n <= 7; ++n) {
    for (int t = 0; t < 15; ++t) {
      const PointCloud p = random_cloud(n, rng), g = random_cloud(n, rng);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      double best = std::numeric_limits<double>::infinity();
      do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::sqrt(squared_distance(p.points[i], g.points[perm[i]]));
        best = std::min(best, s);
      } while (std::next_permutation(perm.begin(), perm.end()));
      emd_err = std::max(emd_err, std::fabs(emd(p, g) - best));
    }
  }
  v.report("2", fps_ok && cd_err <= 1e-9 && emd_err <= 1e-9,
           fmt::format("oracle equivalence: fps exact on 100 clouds {}, chamfer max dev {:.1e}, emd (N<=7) max dev {:.1e}",
                       fps_ok ? "yes" : "no", cd_err, emd_err));
}

void gumbel_statistics(Verdicts& v) {
  constexpr std::size_t draws = 100000, groups = 8;
  Rng rng(77);
  const Tensor y = gumbel_softmax(Tensor::zeros({draws, groups}), 1.0, rng);
  std::vector<std::size_t> counts(groups, 0);
  for (std::size_t i = 0; i < draws; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < groups; ++j)
      if (y(i, j) > y(i, best)) best = j;
    ++counts[best];
  }
  double lo = 1.0, hi = 0.0;
  for (std::size_t c : counts) {
    lo = std::min(lo, static_cast<double>(c) / draws);
    hi = std::max(hi, static_cast<double>(c) / draws);
  }
  v.report("3", lo >= 0.119 && hi <= 0.131,
           fmt::format("gumbel statistics: argmax frequencies in [{:.4f}, {:.4f}] over 100000 draws", lo, hi));
}

// ---------------------------------------------------------------------------

// Center-set chamfer of stage-2 composition points and of FPS centers, both
// averaged over the clouds of `data`.
std::pair<double, double> composition_vs_fps(const DcsNetModel& model, const Dataset& data) {
  const auto clouds = prepare(data, model.encoder.k());
  double comp = 0.0, base = 0.0;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const CenterSet c = model.composition_centers(clouds[i].points, clouds[i].graph);
    comp += chamfer(c.coords, clouds[i].points).item() / clouds.size();
    const PointCloud& pc = data.clouds[i];
    PointCloud f;
    f.points = gather_points(pc, fps(pc, model.sampler_config.groups));
    base += chamfer(f, pc) / clouds.size();
  }
  return {comp, base};
}

struct Pipeline {
  Checkpoint s1, s2, s3;
  StageResult r1, r2, r3;
  FinetuneResult ft;
};

// Every stage and a stop-gradient finetune, as the CLI would run them.
Pipeline full_pipeline(const RunConfig& c, const DataSplit& split) {
  Pipeline p;
  StageOptions o;
  o.seed = c.seed;
  {
    DcsNetModel m(c, split.train.classes(), c.seed);
    p.r1 = run_stage1(m, split.train, make_plan(c, StageId::Stage1), o);
  }
  {
    DcsNetModel m(c, split.train.classes(), c.seed);
    p.r2 = run_stage2(m, split.train, p.r1.checkpoint, make_plan(c, StageId::Stage2), o);
  }
  {
    DcsNetModel m(c, split.train.classes(), c.seed);
    p.r3 = run_stage3(m, split.train, p.r2.checkpoint, make_plan(c, StageId::Stage3), o);
  }
  DcsNetModel m(c, split.train.classes(), c.seed);
  p.ft = finetune(m, split, p.r3.checkpoint, make_plan(c, StageId::Finetune, true), true, o);
  return p;
}

RunConfig reduced_config() {
  RunConfig c;
  c.seed = 11;
  c.data.classes = {"sphere", "cube", "torus"};
  c.data.per_class = 10;
  c.data.points = 64;
  c.model.latent = 16;
  c.model.edge_hidden = 16;
  c.model.decoder_hidden = 32;
  c.sampler.groups = 8;
  c.sampler.points_per_group = 8;
  c.sampler.hidden = 16;
  c.backbone.width = 16;
  c.backbone.heads = 2;
  c.backbone.encoder_blocks = 1;
  c.backbone.mlp_ratio = 2;
  for (TrainConfig* t : {static_cast<TrainConfig*>(&c.stage1), &c.stage2, static_cast<TrainConfig*>(&c.stage3),
                         &c.finetune}) {
    t->epochs = 4;
    t->batch_size = 8;
    t->warmup = 1;
  }
  c.validate();
  return c;
}

void determinism(Verdicts& v, const fs::path& work, const Checkpoint& desk_checkpoint,
                 const RunConfig& desk_config, std::size_t classes) {
  const RunConfig c = reduced_config();
  const DataSplit split = split_dataset(dataset_for(c), c.data.holdout, c.seed);
  const Pipeline a = full_pipeline(c, split);
  const Pipeline b = full_pipeline(c, split);
  const bool logs = a.r1.log.csv() == b.r1.log.csv() && a.r2.log.csv() == b.r2.log.csv() &&
                    a.r3.log.csv() == b.r3.log.csv() && a.ft.stage.log.csv() == b.ft.stage.log.csv() &&
                    a.ft.accuracy == b.ft.accuracy;
  const bool weights = checkpoint_bytes(a.ft.stage.checkpoint) == checkpoint_bytes(b.ft.stage.checkpoint);

  // Round trip through a file, then through a model and a second capture.
  const fs::path path = work / "roundtrip.ckpt";
  desk_checkpoint.save(path);
  const Checkpoint back = Checkpoint::load(path);
  const std::string original = checkpoint_bytes(desk_checkpoint);
  DcsNetModel m(desk_config, classes, desk_config.seed + 1);
  back.restore(m.params);
  Checkpoint again = Checkpoint::capture(m.params, back.stage);
  again.epoch = back.epoch;
  again.total_epochs = back.total_epochs;
  again.rng_seed = back.rng_seed;
  again.rng_counter = back.rng_counter;
  again.optimizer_step = back.optimizer_step;
  again.moments = back.moments;
  const bool round = checkpoint_bytes(back) == original && checkpoint_bytes(again) == original;

  v.report("10", logs && weights && round,
           fmt::format("determinism: two reduced full runs give identical logs {} and weights {}; checkpoint "
                       "round trip bit-exact {} ({} bytes)",
                       logs ? "yes" : "no", weights ? "yes" : "no", round ? "yes" : "no", original.size()));
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_resident();
  CLI::App app{"Acceptance run"};
  std::string work = "acceptance_run";
  std::string config_path;
  app.add_option("--work", work, "Directory for checkpoints and logs");
  app.add_option("--config", config_path, "Desk-scale run configuration")->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  const fs::path dir(work);

  const auto start = Clock::now();
  Verdicts v;
  try {
    gradient_fidelity(v);
    oracle_equivalence(v);
    gumbel_statistics(v);

    const RunConfig config = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    config.validate();
    const DataSplit split = split_dataset(dataset_for(config), config.data.holdout, config.seed);
    const std::size_t classes = split.train.classes();
    progress(fmt::format("desk data: {} train / {} held-out clouds of {} points, {} classes", split.train.size(),
                         split.test.size(), config.data.points, classes));

    // Stage 1.
    StageResult r1;
    {
      DcsNetModel m(config, classes, config.seed);
      const auto t0 = Clock::now();
      r1 = run_stage1(m, split.train, make_plan(config, StageId::Stage1), progress_options(config, "stage1", 20));
      const double took = seconds_since(t0);
      save_log(dir / "stage1_loss.csv", r1.log);
      r1.checkpoint.save(dir / "stage1.ckpt");
      const auto total = r1.log.series("total");
      const double ratio = total.back() / total.front();
      v.report("4", ratio <= 0.2 && took < 1800.0 && total.size() == config.stage1.epochs,
               fmt::format("stage-1 convergence: {} clouds, {} epochs, loss {:.4f} -> {:.4f} ({:.1f}% of epoch 1), "
                           "{:.1f} min",
                           split.train.size(), total.size(), total.front(), total.back(), 100.0 * ratio,
                           took / 60.0));
    }

    // Stage 2.
    StageResult r2;
    {
      DcsNetModel m(config, classes, config.seed);
      r2 = run_stage2(m, split.train, r1.checkpoint, make_plan(config, StageId::Stage2),
                      progress_options(config, "stage2", 20));
      save_log(dir / "stage2_loss.csv", r2.log);
      r2.checkpoint.save(dir / "stage2.ckpt");
      const auto [comp, base] = composition_vs_fps(m, split.test);
      v.report("5", comp <= 2.0 * base,
               fmt::format("stage-2 center quality: held-out composition-center CD {:.5f} vs FPS {:.5f} (ratio {:.2f}, "
                           "bar 2.00)",
                           comp, base, comp / base));
    }

    // Differentiability of the sampler at the start of stage 3.
    {
      DcsNetModel m(config, classes, config.seed);
      load_predecessor(m, r2.checkpoint, StageId::Stage2);
      const Tensor cloud = split.train.clouds[0].to_tensor();
      const double live = sampler_gradient_norm(m, cloud, config.seed, false);
      const double detached = sampler_gradient_norm(m, cloud, config.seed, true);
      v.report("6", live > 0.0 && detached == 0.0,
               fmt::format("sampler differentiability: |grad U| = {:.3e} live, {:.1e} detached", live, detached));
    }

    // Stage 3.
    StageResult r3;
    {
      DcsNetModel m(config, classes, config.seed);
      r3 = run_stage3(m, split.train, r2.checkpoint, make_plan(config, StageId::Stage3),
                      progress_options(config, "stage3", 10));
      save_log(dir / "stage3_loss.csv", r3.log);
      r3.checkpoint.save(dir / "stage3.ckpt");
      const CompareReport cmp = baseline_compare(m, split.test, config.seed);
      std::ofstream csv(dir / "compare.csv");
      cmp.write_csv(csv);
      v.report("5b", cmp.dcs_beats_random >= 0.8,
               fmt::format("trained DCS centers beat a random subset on {:.0f}% of held-out clouds (bar 80%); mean "
                           "CD dcs {:.5f}, fps {:.5f}, random {:.5f}",
                           100.0 * cmp.dcs_beats_random, cmp.mean_dcs, cmp.mean_fps, cmp.mean_random));
    }

    // Finetuning from the pretrained checkpoint and from scratch, each over
    // three seeds (initialization of the scratch model, shuffling, dropout).
    // One held-out cloud is worth two points, so single runs are too noisy to
    // resolve a five-point gap.
    constexpr std::size_t kSeeds = 3;
    FinetuneResult pre;
    double pre_mean = 0.0, scratch_mean = 0.0;
    std::string per_seed;
    for (std::size_t i = 0; i < kSeeds; ++i) {
      RunConfig c = config;
      c.seed = config.seed + i;
      const std::string tag = fmt::format("seed{}", c.seed);
      DcsNetModel pm(c, classes, c.seed);
      const FinetuneResult p = finetune(pm, split, r3.checkpoint, make_plan(c, StageId::Finetune, true), true,
                                        progress_options(c, "finetune " + tag, 20));
      save_log(dir / fmt::format("finetune_{}_loss.csv", tag), p.stage.log);
      DcsNetModel sm(c, classes, c.seed);
      const FinetuneResult s = finetune_from_current(sm, split, make_plan(c, StageId::Finetune, true), true,
                                                     progress_options(c, "scratch " + tag, 20));
      save_log(dir / fmt::format("scratch_{}_loss.csv", tag), s.stage.log);
      if (i == 0) pre = p;
      pre_mean += p.accuracy / kSeeds;
      scratch_mean += s.accuracy / kSeeds;
      per_seed += fmt::format(" {:.0f}/{:.0f}", 100.0 * p.accuracy, 100.0 * s.accuracy);
    }
    const double gain = 100.0 * (pre_mean - scratch_mean);
    v.report("7", pre_mean >= 0.9 && gain >= 5.0,
             fmt::format("end-to-end benefit: mean held-out accuracy over {} seeds {:.1f}% pretrained vs {:.1f}% "
                         "random init ({:+.1f} points; bars 90% and +5); per seed pretrained/random:{}",
                         kSeeds, 100.0 * pre_mean, 100.0 * scratch_mean, gain, per_seed));

    // Stop-gradient toggle.
    {
      DcsNetModel m(config, classes, config.seed);
      StagePlan plan = make_plan(config, StageId::Finetune, false);
      plan.epochs = 1;
      plan.schedule.total = 1;
      plan.schedule.warmup = 0;
      StageOptions once;
      once.seed = config.seed;
      const FinetuneResult live = finetune(m, split, r3.checkpoint, plan, false, once);
      const bool frozen_same = pre.sampler_hash_before == pre.sampler_hash_after;
      const bool live_changed = live.sampler_hash_before != live.sampler_hash_after;
      v.report("8", frozen_same && live_changed,
               fmt::format("stop-gradient: sampler hash {:016x} -> {:016x} when true, {:016x} -> {:016x} when false",
                           pre.sampler_hash_before, pre.sampler_hash_after, live.sampler_hash_before,
                           live.sampler_hash_after));
    }

    // Global-loss recipes.
    {
      bool ok = true;
      std::string detail;
      for (const std::string mode : {"l1", "l2", "l1+l2", "mmd"}) {
        RunConfig c = config;
        c.stage3.global_loss = mode;
        c.stage3.epochs = 50;
        DcsNetModel m(c, classes, c.seed);
        const StageResult r =
            run_stage3(m, split.train, r2.checkpoint, make_plan(c, StageId::Stage3), progress_options(c, mode, 25));
        save_log(dir / fmt::format("recipe_{}_loss.csv", mode == "l1+l2" ? "l1l2" : mode), r.log);
        const bool finite = all_finite(r.log) && r.log.rows.size() == 50;
        ok = ok && finite;
        detail += fmt::format("{} {} ({:.4f})  ", mode, finite ? "finite" : "DIVERGED", r.log.rows.back().values[0]);
      }
      v.report("9", ok, fmt::format("global-loss recipes over 50 epochs: {}", detail));
    }

    determinism(v, dir, r3.checkpoint, config, classes);
  } catch (const std::exception& e) {
    fmt::print("[FAIL]  --  aborted: {}\n", e.what());
    return 1;
  }
  fmt::print("{} criteria failed, {:.1f} min total\n", v.failed, seconds_since(start) / 60.0);
  return v.failed == 0 ? 0 : 1;
}
