#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "dcs/core/error.hpp"
#include "dcs/geometry/distance.hpp"
#include "dcs/geometry/sampling.hpp"
#include "dcs/pipeline/evaluation.hpp"

using namespace dcs;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.data.classes = {"sphere", "cube", "torus"};
  c.data.per_class = 8;
  c.data.points = 48;
  c.data.holdout = 0.25;
  c.model.latent = 16;
  c.model.edge_hidden = 8;
  c.model.decoder_hidden = 16;
  c.sampler.groups = 4;
  c.sampler.points_per_group = 8;
  c.sampler.hidden = 8;
  c.backbone.width = 16;
  c.backbone.heads = 2;
  c.backbone.encoder_blocks = 1;
  c.backbone.mlp_ratio = 2;
  for (TrainConfig* t : {static_cast<TrainConfig*>(&c.stage1), &c.stage2,
                         static_cast<TrainConfig*>(&c.stage3), &c.finetune}) {
    t->epochs = 3;
    t->batch_size = 6;
    t->warmup = 1;
  }
  return c;
}

Dataset tiny_data(const RunConfig& c, std::uint64_t seed = 5) {
  DatasetSpec spec;
  for (const auto& n : c.data.classes) spec.families.push_back(parse_shape_family(n));
  spec.per_class = c.data.per_class;
  spec.points = c.data.points;
  return make_dataset(spec, seed);
}

// Stage checkpoints of the tiny setup, computed once.
struct Pretrained {
  RunConfig config = tiny_config();
  Dataset data = tiny_data(config);
  DataSplit split = split_dataset(data, config.data.holdout, 1);
  Checkpoint s1, s2, s3;
  Pretrained() {
    DcsNetModel m(config, data.classes(), 1);
    StageOptions opt;
    s1 = run_stage1(m, split.train, make_plan(config, StageId::Stage1), opt).checkpoint;
    s2 = run_stage2(m, split.train, s1, make_plan(config, StageId::Stage2), opt).checkpoint;
    s3 = run_stage3(m, split.train, s2, make_plan(config, StageId::Stage3), opt).checkpoint;
  }
};

const Pretrained& pretrained() {
  static const Pretrained p;
  return p;
}

bool same_blocks(const Checkpoint& a, const Checkpoint& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    if (a.blocks[i].name != b.blocks[i].name || a.blocks[i].values != b.blocks[i].values) return false;
  }
  return true;
}

}  // namespace

TEST(Plan, StageSettings) {
  const RunConfig c;
  const StagePlan p1 = make_plan(c, StageId::Stage1);
  EXPECT_EQ(p1.epochs, 200u);
  EXPECT_EQ(p1.batch_size, 16u);
  EXPECT_DOUBLE_EQ(p1.schedule.lr_at(10), 5e-4);
  EXPECT_EQ(p1.trainable, std::vector<std::string>{groups::kCanonical});
  const StagePlan f = make_plan(c, StageId::Finetune, true);
  EXPECT_EQ(std::count(f.trainable.begin(), f.trainable.end(), std::string(groups::kSampler)), 0);
  const StagePlan g = make_plan(c, StageId::Finetune, false);
  EXPECT_EQ(std::count(g.trainable.begin(), g.trainable.end(), std::string(groups::kSampler)), 1);
}

TEST(Split, StratifiedAndDeterministic) {
  const RunConfig c = tiny_config();
  const Dataset d = tiny_data(c);
  const DataSplit s = split_dataset(d, 0.25, 3);
  EXPECT_EQ(s.test.size(), 6u);
  EXPECT_EQ(s.train.size(), 18u);
  for (int label = 0; label < 3; ++label) {
    EXPECT_EQ(std::count_if(s.test.clouds.begin(), s.test.clouds.end(),
                            [&](const PointCloud& x) { return x.label == label; }),
              2);
  }
  EXPECT_EQ(split_dataset(d, 0.25, 3).test.clouds[0].id, s.test.clouds[0].id);
}

TEST(Stages, LossLogCsv) {
  LossLog log;
  log.terms = {"total", "chamfer"};
  log.rows.push_back({1, 0.5, {2.0, 1.5}});
  EXPECT_EQ(log.csv(), "epoch,lr,total,chamfer\n1,0.5,2,1.5\n");
  EXPECT_EQ(log.series("chamfer"), std::vector<double>{1.5});
}

TEST(Stages, Stage1LossDecreasesAndEmptyDataRejected) {
  const Pretrained& p = pretrained();
  DcsNetModel m(p.config, 3, 1);
  StagePlan plan = make_plan(p.config, StageId::Stage1);
  EXPECT_THROW(run_stage1(m, Dataset{}, plan, StageOptions{}), Error);
  plan.epochs = 6;
  plan.schedule.total = 6;
  const StageResult r = run_stage1(m, p.split.train, plan, StageOptions{});
  const auto total = r.log.series("total");
  ASSERT_EQ(total.size(), 6u);
  EXPECT_LT(total.back(), total.front());
}

TEST(Stages, OrderingIsEnforced) {
  const Pretrained& p = pretrained();
  DcsNetModel m(p.config, 3, 1);
  const StageOptions opt;
  EXPECT_THROW(run_stage2(m, p.split.train, p.s2, make_plan(p.config, StageId::Stage2), opt), Error);
  EXPECT_THROW(run_stage3(m, p.split.train, p.s1, make_plan(p.config, StageId::Stage3), opt), Error);
  EXPECT_THROW(finetune(m, p.split, p.s2, make_plan(p.config, StageId::Finetune), true, opt), Error);
  Checkpoint partial = p.s1;
  partial.epoch = 1;
  EXPECT_THROW(run_stage2(m, p.split.train, partial, make_plan(p.config, StageId::Stage2), opt), Error);
}

TEST(Stages, FrozenGroupsUntouched) {
  const Pretrained& p = pretrained();
  DcsNetModel m(p.config, 3, 1);
  load_predecessor(m, p.s1, StageId::Stage1);
  const auto canon = m.hash(groups::kCanonical);
  const auto sampler = m.hash(groups::kSampler);
  run_stage2(m, p.split.train, p.s1, make_plan(p.config, StageId::Stage2), StageOptions{});
  EXPECT_EQ(m.hash(groups::kCanonical), canon);
  EXPECT_NE(m.hash(groups::kSampler), sampler);
}

TEST(Stages, ResumeReplaysBitwise) {
  const Pretrained& p = pretrained();
  const StagePlan plan = make_plan(p.config, StageId::Stage3);
  DcsNetModel full(p.config, 3, 1);
  const StageResult a = run_stage3(full, p.split.train, p.s2, plan, StageOptions{});

  DcsNetModel first(p.config, 3, 1);
  StageOptions stop;
  stop.stop_after = 1;
  const StageResult head = run_stage3(first, p.split.train, p.s2, plan, stop);
  EXPECT_FALSE(head.checkpoint.complete());

  std::stringstream bytes;
  head.checkpoint.write(bytes);
  const Checkpoint reread = Checkpoint::read(bytes);
  DcsNetModel second(p.config, 3, 1);
  StageOptions resume;
  resume.resume = &reread;
  const StageResult tail = run_stage3(second, p.split.train, p.s2, plan, resume);
  ASSERT_EQ(tail.log.rows.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(tail.log.rows[i].values, a.log.rows[i + 1].values);
  EXPECT_TRUE(same_blocks(tail.checkpoint, a.checkpoint));
}

TEST(Stages, SamplerGradientFlowsUnlessDetached) {
  const Pretrained& p = pretrained();
  DcsNetModel m(p.config, 3, 1);
  const Tensor cloud = p.split.train.clouds[0].to_tensor();
  EXPECT_GT(sampler_gradient_norm(m, cloud, 3, false), 0.0);
  EXPECT_EQ(sampler_gradient_norm(m, cloud, 3, true), 0.0);
}

TEST(Finetune, StopGradientFreezesSampler) {
  const Pretrained& p = pretrained();
  for (bool stop : {true, false}) {
    DcsNetModel m(p.config, 3, 1);
    const FinetuneResult r =
        finetune(m, p.split, p.s3, make_plan(p.config, StageId::Finetune, stop), stop, StageOptions{});
    EXPECT_EQ(r.sampler_hash_before == r.sampler_hash_after, stop);
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
}

TEST(Finetune, SingleClassRejected) {
  const Pretrained& p = pretrained();
  DataSplit one;
  for (const auto& c : p.split.train.clouds)
    if (c.label == 0) one.train.clouds.push_back(c);
  one.train.class_names = {"sphere"};
  one.test = one.train;
  DcsNetModel m(p.config, 1, 1);
  EXPECT_THROW(finetune_from_current(m, one, make_plan(p.config, StageId::Finetune), true, StageOptions{}),
               Error);
}

TEST(FewShot, EpisodesDisjointAndDeterministic) {
  RunConfig c = tiny_config();
  c.data.per_class = 25;
  const Dataset d = tiny_data(c);
  const FewShotTask task{3, 5, 20, 11, 5, 1e-3};
  const Episode e = sample_episode(d, task, 4);
  EXPECT_EQ(e.support.size(), 15u);
  EXPECT_EQ(e.query.size(), 60u);
  std::set<std::size_t> s(e.support.begin(), e.support.end());
  for (std::size_t q : e.query) EXPECT_EQ(s.count(q), 0u);
  EXPECT_EQ(sample_episode(d, task, 4).query, e.query);
  const FewShotTask greedy{3, 6, 20, 11, 5, 1e-3};
  EXPECT_THROW(sample_episode(d, greedy, 4), Error);
}

TEST(FewShot, SingleWayIsPerfectAndEpisodeCount) {
  RunConfig c = tiny_config();
  c.data.per_class = 22;
  const Dataset d = tiny_data(c);
  DcsNetModel m(c, 3, 1);
  const FewShotResult one = few_shot_eval(m, d, FewShotTask{1, 2, 20, 1, 3, 1e-3}, 2);
  EXPECT_EQ(one.mean, 1.0);
  const FewShotResult r = few_shot_eval(m, d, FewShotTask{2, 2, 20, 1, 3, 1e-3}, 10);
  EXPECT_EQ(r.episodes.size(), 10u);
}

TEST(Compare, ReportsAllThreeSamplers) {
  const Pretrained& p = pretrained();
  DcsNetModel m(p.config, 3, 1);
  p.s3.restore(m.params);
  const CompareReport r = baseline_compare(m, p.split.test, 2);
  ASSERT_EQ(r.rows.size(), p.split.test.size());
  for (const auto& row : r.rows) {
    EXPECT_GE(row.random, 0.0);
    EXPECT_GE(row.fps, 0.0);
    EXPECT_GE(row.dcs, 0.0);
  }
  // FPS centers are cloud points, so the center-to-cloud term vanishes and
  // the chamfer distance is the cloud-to-center term alone.
  const PointCloud& c = p.split.test.clouds[0];
  PointCloud cp;
  cp.points = gather_points(c, fps(c, p.config.sampler.groups));
  double second = 0.0;
  for (const auto& x : c.points) {
    double best = 1e300;
    for (const auto& y : cp.points) best = std::min(best, squared_distance(x, y));
    second += best / c.size();
  }
  EXPECT_NEAR(chamfer(cp, c), second, 1e-12);
  EXPECT_NEAR(r.rows[0].fps, second, 1e-12);
  std::ostringstream csv;
  r.write_csv(csv);
  EXPECT_EQ(csv.str().rfind("id,fps,dcs,random\n", 0), 0u);
}
