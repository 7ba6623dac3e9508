#include "dcs/pipeline/stages.hpp"

#include <fmt/format.h>

#include <cmath>
#include <ostream>

#include "dcs/core/error.hpp"
#include "dcs/geometry/distance.hpp"

namespace dcs {

std::string to_string(StageId id) {
  switch (id) {
    case StageId::Stage1: return "stage1";
    case StageId::Stage2: return "stage2";
    case StageId::Stage3: return "stage3";
    case StageId::Finetune: return "finetune";
  }
  return "?";
}

StagePlan make_plan(const RunConfig& config, StageId stage, bool stop_gradient) {
  const TrainConfig* t = nullptr;
  StagePlan plan;
  plan.stage = stage;
  switch (stage) {
    case StageId::Stage1:
      t = &config.stage1;
      plan.recipe.emd_weight = config.stage1.emd_weight;
      plan.trainable = {groups::kCanonical};
      break;
    case StageId::Stage2:
      t = &config.stage2;
      plan.recipe.prior_weight = config.sampler.prior_weight;
      plan.trainable = {groups::kSampler};
      break;
    case StageId::Stage3:
      t = &config.stage3;
      plan.recipe.local_weight = config.stage3.local_weight;
      plan.recipe.global_weight = config.stage3.global_weight;
      plan.recipe.prior_weight = config.sampler.prior_weight;
      plan.recipe.global_mode = parse_global_loss(config.stage3.global_loss);
      plan.trainable = {groups::kSampler, groups::kBackbone, groups::kMae};
      break;
    case StageId::Finetune:
      t = &config.finetune;
      plan.trainable = {groups::kBackbone, groups::kHead};
      if (!stop_gradient) plan.trainable.push_back(groups::kSampler);
      break;
  }
  plan.epochs = t->epochs;
  plan.batch_size = t->batch_size;
  plan.weight_decay = t->weight_decay;
  plan.schedule = CosineWarmupSchedule{t->lr, t->warmup, t->epochs, t->min_lr};
  return plan;
}

std::string LossLog::csv() const {
  std::string out = "epoch,lr";
  for (const auto& t : terms) out += "," + t;
  out += '\n';
  for (const Row& r : rows) {
    out += fmt::format("{},{}", r.epoch, r.lr);
    for (double v : r.values) out += fmt::format(",{}", v);
    out += '\n';
  }
  return out;
}

void LossLog::write_csv(std::ostream& out) const { out << csv(); }

std::vector<double> LossLog::series(const std::string& term) const {
  std::size_t col = terms.size();
  for (std::size_t i = 0; i < terms.size(); ++i)
    if (terms[i] == term) col = i;
  if (col == terms.size()) throw Error(fmt::format("loss log has no term '{}'", term));
  std::vector<double> out;
  for (const Row& r : rows) out.push_back(r.values[col]);
  return out;
}

void load_predecessor(DcsNetModel& model, const Checkpoint& previous, StageId required) {
  if (previous.stage != static_cast<std::uint32_t>(required)) {
    throw Error(fmt::format("expected a {} checkpoint, got stage {}", to_string(required), previous.stage));
  }
  if (!previous.complete()) {
    throw Error(fmt::format("{} checkpoint is incomplete (epoch {} of {})", to_string(required),
                            previous.epoch, previous.total_epochs));
  }
  previous.restore(model.params);
}

namespace {

bool starts_with_any(const std::string& name, const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes)
    if (name.starts_with(p)) return true;
  return false;
}

std::uint64_t frozen_hash(const ParameterSet& params, const std::vector<std::string>& trainable) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const Parameter* p : params.all()) {
    if (starts_with_any(p->name, trainable)) continue;
    h ^= params.hash(p->name);
    h *= 0x100000001B3ULL;
  }
  return h;
}

void round_trained(ParameterSet& params, const std::vector<std::string>& trainable) {
  auto round = [&](std::vector<Parameter*> items) {
    for (Parameter* p : items) {
      if (!starts_with_any(p->name, trainable)) continue;
      for (double& v : p->tensor.mutable_values()) v = static_cast<double>(static_cast<float>(v));
    }
  };
  round(params.parameters());
  round(params.buffers());
}

}  // namespace

StageResult run_training(DcsNetModel& model, const StagePlan& plan, std::size_t samples,
                         std::vector<std::string> terms, const BatchFn& batch_fn,
                         const StageOptions& options) {
  if (samples == 0) throw Error(fmt::format("{}: dataset is empty", to_string(plan.stage)));
  ParameterSet& params = model.params;
  params.set_trainable("", false);
  for (const auto& prefix : plan.trainable) params.set_trainable(prefix, true);
  std::vector<Parameter*> trainable;
  for (Parameter* p : params.parameters())
    if (p->trainable) trainable.push_back(p);
  AdamW opt(trainable, plan.schedule.base, plan.weight_decay);

  std::size_t first_epoch = 1;
  if (options.resume) {
    const Checkpoint& r = *options.resume;
    if (r.stage != static_cast<std::uint32_t>(plan.stage) || r.total_epochs != plan.epochs) {
      throw Error(fmt::format("cannot resume {} ({} epochs) from a stage-{} checkpoint of {} epochs",
                              to_string(plan.stage), plan.epochs, r.stage, r.total_epochs));
    }
    if (r.rng_seed != options.seed) {
      throw Error(fmt::format("resume seed mismatch: checkpoint {}, run {}", r.rng_seed, options.seed));
    }
    r.restore(params);
    r.restore_optimizer(opt);
    first_epoch = r.epoch + 1;
  }

  const std::uint64_t hash_before = frozen_hash(params, plan.trainable);
  const std::size_t last = options.stop_after ? std::min(*options.stop_after, plan.epochs) : plan.epochs;
  const Rng master(options.seed);
  StageResult result;
  result.log.terms = std::move(terms);
  const std::size_t nterms = result.log.terms.size();

  for (std::size_t epoch = first_epoch; epoch <= last; ++epoch) {
    const double lr = plan.schedule.lr_at(epoch);
    opt.set_lr(lr);
    Rng rng = master.fork(static_cast<std::uint64_t>(plan.stage) * 1000003ULL + epoch);
    const auto order = rng.permutation(samples);
    std::vector<double> sums(nterms, 0.0);
    for (std::size_t b = 0; b < samples; b += plan.batch_size) {
      const std::size_t e = std::min(samples, b + plan.batch_size);
      const std::span<const std::size_t> batch(order.data() + b, e - b);
      BatchLoss loss = batch_fn(batch, epoch, rng);
      if (!std::isfinite(loss.total.item())) {
        throw Error(fmt::format("{}: non-finite loss at epoch {}", to_string(plan.stage), epoch));
      }
      loss.total.backward();
      opt.step();
      for (std::size_t t = 0; t < nterms; ++t) sums[t] += loss.values[t] * static_cast<double>(batch.size());
    }
    // Epoch boundaries hold exactly what a checkpoint stores, so resuming
    // from any epoch replays the uninterrupted run bit for bit.
    round_trained(params, plan.trainable);
    LossLog::Row row{epoch, lr, {}};
    for (double s : sums) row.values.push_back(s / static_cast<double>(samples));
    if (options.on_epoch) options.on_epoch(row);
    result.log.rows.push_back(std::move(row));
  }

  result.frozen_hash = frozen_hash(params, plan.trainable);
  if (result.frozen_hash != hash_before) {
    throw Error(fmt::format("{}: frozen parameters changed during training", to_string(plan.stage)));
  }
  params.set_trainable("", false);
  result.checkpoint = Checkpoint::capture(params, static_cast<std::uint32_t>(plan.stage));
  result.checkpoint.epoch = last;
  result.checkpoint.total_epochs = plan.epochs;
  result.checkpoint.rng_seed = options.seed;
  result.checkpoint.rng_counter = 0;
  result.checkpoint.store_optimizer(opt);
  return result;
}

namespace {

Tensor mean_of(const std::vector<Tensor>& items) {
  Tensor total = items.front();
  for (std::size_t i = 1; i < items.size(); ++i) total = add(total, items[i]);
  return scale(total, 1.0 / static_cast<double>(items.size()));
}

double mean_value(const std::vector<Tensor>& items) {
  double s = 0.0;
  for (const Tensor& t : items) s += t.item();
  return s / static_cast<double>(items.size());
}

void require_stage(const StagePlan& plan, StageId id) {
  if (plan.stage != id) {
    throw Error(fmt::format("plan is for {}, expected {}", to_string(plan.stage), to_string(id)));
  }
}

}  // namespace

StageResult run_stage1(DcsNetModel& model, const Dataset& data, const StagePlan& plan,
                       const StageOptions& options) {
  require_stage(plan, StageId::Stage1);
  const auto clouds = prepare(data, model.encoder.k());
  const double w = plan.recipe.emd_weight;
  // Assignment potentials per cloud carried across epochs; they only speed
  // up the EMD solve and never change its result.
  std::vector<std::vector<double>> duals(clouds.size());
  BatchFn fn = [&](std::span<const std::size_t> batch, std::size_t, Rng&) {
    std::vector<Tensor> totals, cds, emds;
    for (std::size_t i : batch) {
      const Tensor decoded = model.reconstruct(clouds[i].points, clouds[i].graph);
      Tensor cd = chamfer(decoded, clouds[i].points, ChamferForm::L2);
      Tensor total = cd;
      if (w != 0.0) {
        Tensor e = emd(decoded, clouds[i].points, &duals[i]).first;
        emds.push_back(e);
        total = add(cd, scale(e, w));
      }
      cds.push_back(cd);
      totals.push_back(total);
    }
    return BatchLoss{mean_of(totals),
                     {mean_value(totals), mean_value(cds), emds.empty() ? 0.0 : mean_value(emds)}};
  };
  return run_training(model, plan, clouds.size(), {"total", "chamfer", "emd"}, fn, options);
}

StageResult run_stage2(DcsNetModel& model, const Dataset& data, const Checkpoint& previous,
                       const StagePlan& plan, const StageOptions& options) {
  require_stage(plan, StageId::Stage2);
  // A resumed run carries every weight, frozen ones included.
  if (options.resume) options.resume->restore(model.params);
  else load_predecessor(model, previous, StageId::Stage1);
  const auto clouds = prepare(data, model.encoder.k());
  std::vector<Tensor> decoded;
  decoded.reserve(clouds.size());
  for (const auto& c : clouds) decoded.push_back(model.reconstruct(c.points, c.graph).detach());
  const LossRecipe recipe = plan.recipe;
  BatchFn fn = [&](std::span<const std::size_t> batch, std::size_t, Rng&) {
    const ProbabilityMap q = model.dcs(model.sphere_tensor, true);
    std::vector<Tensor> cds;
    for (std::size_t i : batch) {
      cds.push_back(stage2_loss(clouds[i].points, decoded[i], q, model.sampler_config.normalize_columns));
    }
    Tensor cd = mean_of(cds);
    Tensor prior = uniform_prior_penalty(q.matrix, 1.0);
    Tensor total = recipe.prior_weight != 0.0 ? add(cd, scale(prior, recipe.prior_weight)) : cd;
    return BatchLoss{total, {total.item(), cd.item(), prior.item()}};
  };
  return run_training(model, plan, clouds.size(), {"total", "chamfer", "prior"}, fn, options);
}

Stage3Terms stage3_terms(const DcsNetModel& model, const PreparedCloud& cloud, const LossRecipe& recipe,
                         double tau, Rng& rng, bool bn_training) {
  const DcsSample s = dcs_sample(cloud.points, model.dcs, model.sampler_config, tau, &rng, bn_training);
  const Tensor tokens = model.backbone.embed(s.patches);
  const MaskSplit split = random_mask(s.patches.groups, model.backbone.config().mask_ratio, rng);
  const Tensor predicted = model.backbone.encode_decode(tokens, s.centers.coords, split);
  const Tensor truth = masked_patch_rows(s.patches, split);
  Stage3Terms t;
  t.local = local_recon_loss(predicted, truth, s.patches.k);
  t.global = global_recon_loss(s.centers, cloud.points, recipe.global_mode);
  t.prior = uniform_prior_penalty(s.relaxed.matrix, 1.0);
  t.centers = s.centers;
  return t;
}

StageResult run_stage3(DcsNetModel& model, const Dataset& data, const Checkpoint& previous,
                       const StagePlan& plan, const StageOptions& options) {
  require_stage(plan, StageId::Stage3);
  // A resumed run carries every weight, frozen ones included.
  if (options.resume) options.resume->restore(model.params);
  else load_predecessor(model, previous, StageId::Stage2);
  const auto clouds = prepare(data, model.encoder.k());
  const LossRecipe r = plan.recipe;
  BatchFn fn = [&](std::span<const std::size_t> batch, std::size_t epoch, Rng& rng) {
    const double tau = model.sampler_config.temperature_at(epoch);
    std::vector<Tensor> locals, globals, priors, centers, points;
    for (std::size_t i : batch) {
      Stage3Terms t = stage3_terms(model, clouds[i], r, tau, rng, true);
      locals.push_back(t.local);
      globals.push_back(t.global);
      priors.push_back(t.prior);
      centers.push_back(t.centers.coords);
      points.push_back(clouds[i].points);
    }
    const Tensor local = mean_of(locals);
    const Tensor global = r.global_mode == GlobalLoss::Mmd
                              ? global_recon_loss(centers, points, GlobalLoss::Mmd)
                              : mean_of(globals);
    const Tensor prior = mean_of(priors);
    Tensor total = scale(local, r.local_weight);
    if (r.global_weight != 0.0) total = add(total, scale(global, r.global_weight));
    if (r.prior_weight != 0.0) total = add(total, scale(prior, r.prior_weight));
    return BatchLoss{total, {total.item(), local.item(), global.item(), prior.item()}};
  };
  return run_training(model, plan, clouds.size(), {"total", "local", "global", "prior"}, fn, options);
}

double sampler_gradient_norm(DcsNetModel& model, const Tensor& cloud, std::uint64_t seed,
                             bool detach_sampler) {
  model.params.set_trainable("", false);
  model.params.set_trainable(groups::kSampler, !detach_sampler);
  Rng rng(seed);
  const DcsSample s = dcs_sample(cloud, model.dcs, model.sampler_config,
                                 model.sampler_config.temperature, &rng, false);
  global_recon_loss(s.centers, cloud, GlobalLoss::L2).backward();
  double sq = 0.0;
  for (Parameter* p : model.params.parameters(groups::kSampler)) {
    if (!p->tensor.has_grad()) continue;
    for (double g : p->tensor.grad()) sq += g * g;
    p->tensor.zero_grad();
  }
  model.params.set_trainable("", false);
  return std::sqrt(sq);
}

}  // namespace dcs
