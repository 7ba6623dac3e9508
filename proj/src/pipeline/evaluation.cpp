#include "dcs/pipeline/evaluation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <ostream>

#include "dcs/core/error.hpp"
#include "dcs/geometry/distance.hpp"
#include "dcs/geometry/sampling.hpp"

namespace dcs {

namespace {

std::vector<std::vector<std::size_t>> by_class(const Dataset& data) {
  std::vector<std::vector<std::size_t>> out(data.classes());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int l = data.clouds[i].label.value_or(-1);
    if (l < 0 || static_cast<std::size_t>(l) >= out.size()) {
      throw Error(fmt::format("cloud '{}' has no valid label", data.clouds[i].id));
    }
    out[static_cast<std::size_t>(l)].push_back(i);
  }
  return out;
}

Tensor classify_cloud(const DcsNetModel& model, const Tensor& cloud, bool sampler_training,
                      const ForwardContext& ctx) {
  const DcsSample s = dcs_sample(cloud, model.dcs, model.sampler_config,
                                 model.sampler_config.temperature, std::span<const double>{},
                                 sampler_training);
  return model.backbone.classify(model.backbone.embed(s.patches), s.centers.coords, ctx);
}

}  // namespace

DataSplit split_dataset(const Dataset& data, double holdout, std::uint64_t seed) {
  DataSplit out;
  out.train.class_names = data.class_names;
  out.test.class_names = data.class_names;
  Rng rng(seed);
  std::vector<char> is_test(data.size(), 0);
  for (auto& members : by_class(data)) {
    rng.shuffle(members);
    const auto n = static_cast<std::size_t>(std::lround(holdout * static_cast<double>(members.size())));
    for (std::size_t i = 0; i < n && i < members.size(); ++i) is_test[members[i]] = 1;
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    (is_test[i] ? out.test : out.train).clouds.push_back(data.clouds[i]);
  }
  return out;
}

double evaluate_accuracy(const DcsNetModel& model, const Dataset& data) {
  if (data.size() == 0) throw Error("evaluate_accuracy: empty dataset");
  std::size_t correct = 0;
  const ForwardContext ctx{false, nullptr};
  for (const PointCloud& c : data.clouds) {
    const Tensor logits = classify_cloud(model, c.to_tensor(), false, ctx);
    const auto v = logits.values();
    const auto arg = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    if (arg == c.label.value_or(-1)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

FinetuneResult finetune_from_current(DcsNetModel& model, const DataSplit& data,
                                     const StagePlan& plan, bool stop_gradient,
                                     const StageOptions& options) {
  if (plan.stage != StageId::Finetune) throw Error("finetune: plan is not a finetune plan");
  std::size_t present = 0;
  for (const auto& members : by_class(data.train)) present += members.empty() ? 0 : 1;
  if (present < 2) throw Error("finetune: training data must contain at least 2 classes");

  FinetuneResult r;
  r.sampler_hash_before = model.hash(groups::kSampler);
  std::vector<Tensor> clouds;
  std::vector<std::size_t> labels;
  for (const PointCloud& c : data.train.clouds) {
    clouds.push_back(c.to_tensor());
    labels.push_back(static_cast<std::size_t>(c.label.value_or(0)));
  }
  BatchFn fn = [&](std::span<const std::size_t> batch, std::size_t, Rng& rng) {
    const ForwardContext ctx{true, &rng};
    std::vector<Tensor> logits;
    std::vector<std::size_t> y;
    for (std::size_t i : batch) {
      logits.push_back(classify_cloud(model, clouds[i], !stop_gradient, ctx));
      y.push_back(labels[i]);
    }
    const Tensor stacked = concat(logits, 0);
    const Tensor loss = cross_entropy(stacked, y);
    const auto v = stacked.values();
    const std::size_t c = stacked.size(1);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < y.size(); ++b) {
      const auto row = v.subspan(b * c, c);
      if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == y[b]) ++correct;
    }
    return BatchLoss{loss, {loss.item(), static_cast<double>(correct) / static_cast<double>(y.size())}};
  };
  r.stage = run_training(model, plan, clouds.size(), {"cross_entropy", "train_accuracy"}, fn, options);
  r.sampler_hash_after = model.hash(groups::kSampler);
  r.accuracy = evaluate_accuracy(model, data.test);
  return r;
}

FinetuneResult finetune(DcsNetModel& model, const DataSplit& data, const Checkpoint& stage3,
                        const StagePlan& plan, bool stop_gradient, const StageOptions& options) {
  if (!options.resume) load_predecessor(model, stage3, StageId::Stage3);
  return finetune_from_current(model, data, plan, stop_gradient, options);
}

Episode sample_episode(const Dataset& data, const FewShotTask& task, std::uint64_t episode_seed) {
  const auto members = by_class(data);
  std::vector<int> eligible;
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (members[c].size() >= task.shots + task.queries) eligible.push_back(static_cast<int>(c));
  }
  if (task.ways == 0 || eligible.size() < task.ways) {
    throw Error(fmt::format("few-shot: {}-way {}-shot needs {} classes with >= {} samples, found {}",
                            task.ways, task.shots, task.ways, task.shots + task.queries, eligible.size()));
  }
  Rng rng(episode_seed);
  Episode e;
  for (std::size_t i : random_subset(eligible.size(), task.ways, rng)) e.classes.push_back(eligible[i]);
  for (int c : e.classes) {
    const auto& m = members[static_cast<std::size_t>(c)];
    const auto pick = random_subset(m.size(), task.shots + task.queries, rng);
    for (std::size_t i = 0; i < pick.size(); ++i) {
      (i < task.shots ? e.support : e.query).push_back(m[pick[i]]);
    }
  }
  return e;
}

FewShotResult few_shot_eval(const DcsNetModel& model, const Dataset& data, const FewShotTask& task,
                            std::size_t episodes) {
  if (episodes == 0) throw Error("few-shot: need at least one episode");
  const std::size_t d = model.backbone.config().width;
  std::vector<std::vector<double>> features(data.size());
  auto feature = [&](std::size_t i) -> const std::vector<double>& {
    if (features[i].empty()) {
      const Tensor cloud = data.clouds[i].to_tensor();
      const DcsSample s = model.sample_eval(cloud);
      const Tensor f = model.backbone.features(model.backbone.embed(s.patches), s.centers.coords);
      features[i].assign(f.values().begin(), f.values().end());
    }
    return features[i];
  };
  auto stack = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> v;
    for (std::size_t i : idx) {
      const auto& f = feature(i);
      v.insert(v.end(), f.begin(), f.end());
    }
    return Tensor(Shape{idx.size(), d}, std::move(v));
  };

  FewShotResult out;
  const Rng master(task.seed);
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    Episode e = sample_episode(data, task, master.fork(ep).seed());
    auto local_label = [&](std::size_t i) {
      const int l = data.clouds[i].label.value_or(-1);
      return static_cast<std::size_t>(std::find(e.classes.begin(), e.classes.end(), l) - e.classes.begin());
    };
    const Tensor xs = stack(e.support);
    const Tensor xq = stack(e.query);
    std::vector<std::size_t> ys, yq;
    for (std::size_t i : e.support) ys.push_back(local_label(i));
    for (std::size_t i : e.query) yq.push_back(local_label(i));

    ParameterSet head;
    Rng init = master.fork(1000003ULL + ep);
    const Linear fc1(head, "fc1", d, d / 2, init);
    const Linear fc2(head, "fc2", d / 2, task.ways, init);
    AdamW opt(head.parameters(), task.lr, 0.05);
    for (std::size_t it = 0; it < task.head_epochs; ++it) {
      cross_entropy(fc2(relu(fc1(xs))), ys).backward();
      opt.step();
    }
    const Tensor logits = fc2(relu(fc1(xq)));
    const auto v = logits.values();
    std::size_t correct = 0;
    for (std::size_t q = 0; q < yq.size(); ++q) {
      const auto row = v.subspan(q * task.ways, task.ways);
      if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == yq[q]) ++correct;
    }
    e.accuracy = static_cast<double>(correct) / static_cast<double>(yq.size());
    out.episodes.push_back(std::move(e));
  }
  for (const Episode& e : out.episodes) out.mean += e.accuracy;
  out.mean /= static_cast<double>(episodes);
  for (const Episode& e : out.episodes) out.stddev += (e.accuracy - out.mean) * (e.accuracy - out.mean);
  out.stddev = std::sqrt(out.stddev / static_cast<double>(episodes));
  return out;
}

void CompareReport::write_csv(std::ostream& out) const {
  out << "id,fps,dcs,random\n";
  for (const CompareRow& r : rows) out << fmt::format("{},{},{},{}\n", r.id, r.fps, r.dcs, r.random);
  out << fmt::format("mean,{},{},{}\n", mean_fps, mean_dcs, mean_random);
}

CompareReport baseline_compare(const DcsNetModel& model, const Dataset& data, std::uint64_t seed) {
  CompareReport rep;
  const std::size_t g = model.sampler_config.groups;
  Rng rng(seed);
  std::size_t wins = 0;
  for (const PointCloud& c : data.clouds) {
    const Tensor cloud = c.to_tensor();
    CompareRow row;
    row.id = c.id;
    const auto f = fps(c, g, 0);
    row.fps = chamfer(centers_from_points(gather_points(c, f), CenterSource::Fps).coords, cloud).item();
    row.dcs = chamfer(model.sample_eval(cloud).centers.coords, cloud).item();
    const auto r = random_subset(c.size(), g, rng);
    row.random = chamfer(centers_from_points(gather_points(c, r), CenterSource::Random).coords, cloud).item();
    rep.mean_fps += row.fps;
    rep.mean_dcs += row.dcs;
    rep.mean_random += row.random;
    if (row.dcs < row.random) ++wins;
    rep.rows.push_back(std::move(row));
  }
  if (!rep.rows.empty()) {
    const double n = static_cast<double>(rep.rows.size());
    rep.mean_fps /= n;
    rep.mean_dcs /= n;
    rep.mean_random /= n;
    rep.dcs_beats_random = static_cast<double>(wins) / n;
  }
  return rep;
}

}  // namespace dcs
