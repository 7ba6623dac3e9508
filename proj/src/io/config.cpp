#include "dcs/io/config.hpp"

#include <fmt/format.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "dcs/core/error.hpp"
#include "dcs/io/dataset.hpp"

namespace dcs {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw Error(fmt::format("'{}' is not a non-negative integer", v));
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw Error(fmt::format("'{}' is not a non-negative integer", v));
  return out;
}

double to_real(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw Error(fmt::format("'{}' is not a number", v));
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(fmt::format("'{}' is not a boolean (true/false)", v));
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw Error(fmt::format("empty entry in list '{}'", v));
    out.push_back(item);
  }
  return out;
}

template <class Member>
Field size_field(std::string section, std::string key, Member member) {
  return {std::move(section), std::move(key),
          [member](RunConfig& c, const std::string& v) { member(c) = to_size(v); },
          [member](const RunConfig& c) { return fmt::format("{}", member(const_cast<RunConfig&>(c))); }};
}

template <class Member>
Field real_field(std::string section, std::string key, Member member) {
  return {std::move(section), std::move(key),
          [member](RunConfig& c, const std::string& v) { member(c) = to_real(v); },
          [member](const RunConfig& c) { return fmt::format("{}", member(const_cast<RunConfig&>(c))); }};
}

template <class Member>
Field bool_field(std::string section, std::string key, Member member) {
  return {std::move(section), std::move(key),
          [member](RunConfig& c, const std::string& v) { member(c) = to_bool(v); },
          [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)) ? std::string("true") : std::string("false"); }};
}

template <class Member>
Field string_field(std::string section, std::string key, Member member) {
  return {std::move(section), std::move(key),
          [member](RunConfig& c, const std::string& v) { member(c) = v; },
          [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
}

void train_fields(std::vector<Field>& f, const std::string& s, TrainConfig& (*pick)(RunConfig&)) {
  f.push_back(size_field(s, "epochs", [pick](RunConfig& c) -> std::size_t& { return pick(c).epochs; }));
  f.push_back(size_field(s, "batch_size", [pick](RunConfig& c) -> std::size_t& { return pick(c).batch_size; }));
  f.push_back(real_field(s, "lr", [pick](RunConfig& c) -> double& { return pick(c).lr; }));
  f.push_back(real_field(s, "weight_decay", [pick](RunConfig& c) -> double& { return pick(c).weight_decay; }));
  f.push_back(size_field(s, "warmup", [pick](RunConfig& c) -> std::size_t& { return pick(c).warmup; }));
  f.push_back(real_field(s, "min_lr", [pick](RunConfig& c) -> double& { return pick(c).min_lr; }));
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"run", "seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
                 [](const RunConfig& c) { return fmt::format("{}", c.seed); }});

    f.push_back(string_field("data", "dir", [](RunConfig& c) -> std::string& { return c.data.dir; }));
    f.push_back({"data", "classes",
                 [](RunConfig& c, const std::string& v) {
                   auto list = to_list(v);
                   for (const auto& name : list) parse_shape_family(name);
                   c.data.classes = std::move(list);
                 },
                 [](const RunConfig& c) { return fmt::format("{}", fmt::join(c.data.classes, ",")); }});
    f.push_back(size_field("data", "per_class", [](RunConfig& c) -> std::size_t& { return c.data.per_class; }));
    f.push_back(size_field("data", "points", [](RunConfig& c) -> std::size_t& { return c.data.points; }));
    f.push_back(real_field("data", "holdout", [](RunConfig& c) -> double& { return c.data.holdout; }));
    f.push_back(real_field("data", "scale_jitter", [](RunConfig& c) -> double& { return c.data.scale_jitter; }));
    f.push_back(real_field("data", "noise", [](RunConfig& c) -> double& { return c.data.noise; }));

    f.push_back(size_field("model", "latent", [](RunConfig& c) -> std::size_t& { return c.model.latent; }));
    f.push_back(size_field("model", "edge_k", [](RunConfig& c) -> std::size_t& { return c.model.edge_k; }));
    f.push_back(size_field("model", "edge_hidden", [](RunConfig& c) -> std::size_t& { return c.model.edge_hidden; }));
    f.push_back(size_field("model", "decoder_hidden", [](RunConfig& c) -> std::size_t& { return c.model.decoder_hidden; }));

    f.push_back(size_field("sampler", "groups", [](RunConfig& c) -> std::size_t& { return c.sampler.groups; }));
    f.push_back(size_field("sampler", "points_per_group", [](RunConfig& c) -> std::size_t& { return c.sampler.points_per_group; }));
    f.push_back(size_field("sampler", "depth", [](RunConfig& c) -> std::size_t& { return c.sampler.depth; }));
    f.push_back(size_field("sampler", "hidden", [](RunConfig& c) -> std::size_t& { return c.sampler.hidden; }));
    f.push_back(real_field("sampler", "temperature", [](RunConfig& c) -> double& { return c.sampler.temperature; }));
    f.push_back(real_field("sampler", "anneal", [](RunConfig& c) -> double& { return c.sampler.anneal; }));
    f.push_back(real_field("sampler", "prior_weight", [](RunConfig& c) -> double& { return c.sampler.prior_weight; }));
    f.push_back(bool_field("sampler", "normalize_columns", [](RunConfig& c) -> bool& { return c.sampler.normalize_columns; }));
    f.push_back(bool_field("sampler", "hard", [](RunConfig& c) -> bool& { return c.sampler.hard; }));
    f.push_back(bool_field("sampler", "per_cloud_stats", [](RunConfig& c) -> bool& { return c.sampler.per_cloud_stats; }));

    f.push_back(size_field("backbone", "width", [](RunConfig& c) -> std::size_t& { return c.backbone.width; }));
    f.push_back(size_field("backbone", "encoder_blocks", [](RunConfig& c) -> std::size_t& { return c.backbone.encoder_blocks; }));
    f.push_back(size_field("backbone", "heads", [](RunConfig& c) -> std::size_t& { return c.backbone.heads; }));
    f.push_back(size_field("backbone", "decoder_blocks", [](RunConfig& c) -> std::size_t& { return c.backbone.decoder_blocks; }));
    f.push_back(size_field("backbone", "mlp_ratio", [](RunConfig& c) -> std::size_t& { return c.backbone.mlp_ratio; }));
    f.push_back(real_field("backbone", "mask_ratio", [](RunConfig& c) -> double& { return c.backbone.mask_ratio; }));
    f.push_back(real_field("backbone", "dropout", [](RunConfig& c) -> double& { return c.backbone.dropout; }));

    train_fields(f, "stage1", [](RunConfig& c) -> TrainConfig& { return c.stage1; });
    f.push_back(real_field("stage1", "emd_weight", [](RunConfig& c) -> double& { return c.stage1.emd_weight; }));
    train_fields(f, "stage2", [](RunConfig& c) -> TrainConfig& { return c.stage2; });
    train_fields(f, "stage3", [](RunConfig& c) -> TrainConfig& { return c.stage3; });
    f.push_back(real_field("stage3", "local_weight", [](RunConfig& c) -> double& { return c.stage3.local_weight; }));
    f.push_back(real_field("stage3", "global_weight", [](RunConfig& c) -> double& { return c.stage3.global_weight; }));
    f.push_back({"stage3", "global_loss",
                 [](RunConfig& c, const std::string& v) {
                   parse_global_loss(v);
                   c.stage3.global_loss = v;
                 },
                 [](const RunConfig& c) { return c.stage3.global_loss; }});
    train_fields(f, "finetune", [](RunConfig& c) -> TrainConfig& { return c.finetune; });

    f.push_back(size_field("fewshot", "ways", [](RunConfig& c) -> std::size_t& { return c.fewshot.ways; }));
    f.push_back(size_field("fewshot", "shots", [](RunConfig& c) -> std::size_t& { return c.fewshot.shots; }));
    f.push_back(size_field("fewshot", "queries", [](RunConfig& c) -> std::size_t& { return c.fewshot.queries; }));
    f.push_back(size_field("fewshot", "episodes", [](RunConfig& c) -> std::size_t& { return c.fewshot.episodes; }));
    f.push_back(size_field("fewshot", "head_epochs", [](RunConfig& c) -> std::size_t& { return c.fewshot.head_epochs; }));
    f.push_back(real_field("fewshot", "lr", [](RunConfig& c) -> double& { return c.fewshot.lr; }));
    return f;
  }();
  return table;
}

}  // namespace

RunConfig::RunConfig() {
  sampler.groups = 32;
  sampler.points_per_group = 16;
  stage1.epochs = 200;
  stage2.epochs = 200;
  stage3.epochs = 300;
  stage1.weight_decay = 5e-4;
  stage2.weight_decay = 5e-4;
  finetune.epochs = 60;
  finetune.lr = 5e-4;
  finetune.warmup = 5;
}

void RunConfig::validate() const {
  sampler.validate();
  backbone.validate();
  if (data.points < 32) throw Error(fmt::format("config: data.points must be >= 32, got {}", data.points));
  if (data.classes.empty()) throw Error("config: data.classes is empty");
  if (sampler.points_per_group > data.points) {
    throw Error(fmt::format("config: sampler.points_per_group {} exceeds data.points {}",
                            sampler.points_per_group, data.points));
  }
  if (model.edge_k + 1 > data.points) throw Error("config: model.edge_k must be below data.points");
  if (!(data.holdout > 0.0 && data.holdout < 1.0)) {
    throw Error(fmt::format("config: data.holdout must be in (0, 1), got {}", data.holdout));
  }
  for (const TrainConfig* t : {static_cast<const TrainConfig*>(&stage1), &stage2,
                               static_cast<const TrainConfig*>(&stage3), &finetune}) {
    if (t->batch_size == 0) throw Error("config: batch_size must be >= 1");
    if (t->epochs == 0) throw Error("config: epochs must be >= 1");
  }
}

std::string RunConfig::to_ini() const {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += fmt::format("[{}]\n", section);
    }
    out += fmt::format("{} = {}\n", f.key, f.get(*this));
  }
  return out;
}

RunConfig RunConfig::parse(std::istream& in) {
  RunConfig c;
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw Error(fmt::format("config line {}: malformed section header '{}'", line_no, t));
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      bool known = false;
      for (const Field& f : fields()) known = known || f.section == section;
      if (!known) throw Error(fmt::format("config line {}: unknown section [{}]", line_no, section));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error(fmt::format("config line {}: expected 'key = value', got '{}'", line_no, t));
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (section.empty()) throw Error(fmt::format("config line {}: key '{}' outside any section", line_no, key));
    const Field* field = nullptr;
    for (const Field& f : fields()) {
      if (f.section == section && f.key == key) field = &f;
    }
    if (!field) throw Error(fmt::format("config line {}: unknown key '{}' in [{}]", line_no, key, section));
    try {
      field->set(c, value);
    } catch (const Error& e) {
      throw Error(fmt::format("config line {}: {}.{}: {}", line_no, section, key, e.what()));
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open config '{}'", path.string()));
  try {
    return parse(in);
  } catch (const Error& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace dcs
