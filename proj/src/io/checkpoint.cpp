#include "dcs/io/checkpoint.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "dcs/core/error.hpp"

namespace dcs {

namespace {

template <class T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw Error("checkpoint: unexpected end of file");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 16)) throw Error(fmt::format("checkpoint: implausible name length {}", n));
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw Error("checkpoint: unexpected end of file");
  return s;
}

}  // namespace

Checkpoint Checkpoint::capture(ParameterSet& params, std::uint32_t stage) {
  params.round_to_float();
  Checkpoint c;
  c.stage = stage;
  for (const Parameter* p : params.all()) {
    Block b{p->name, p->tensor.shape(), {}};
    b.values.reserve(p->tensor.numel());
    for (double v : p->tensor.values()) b.values.push_back(static_cast<float>(v));
    c.blocks.push_back(std::move(b));
  }
  return c;
}

void Checkpoint::restore(ParameterSet& params) const {
  for (const Parameter* p : params.all()) {
    const Block* found = nullptr;
    for (const Block& b : blocks) {
      if (b.name == p->name) {
        found = &b;
        break;
      }
    }
    if (!found) throw Error(fmt::format("checkpoint: missing parameter '{}'", p->name));
    if (found->shape != p->tensor.shape()) {
      throw Error(fmt::format("checkpoint: parameter '{}' has shape {}, model expects {}", p->name,
                              shape_string(found->shape), shape_string(p->tensor.shape())));
    }
    Tensor t = params.get(p->name).tensor;
    auto dst = t.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(found->values[i]);
  }
}

void Checkpoint::store_optimizer(const AdamW& opt) {
  moments.clear();
  optimizer_step = opt.state().step;
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    moments.push_back(Moment{opt.params()[i]->name, opt.state().m[i], opt.state().v[i]});
  }
}

void Checkpoint::restore_optimizer(AdamW& opt) const {
  if (moments.size() != opt.params().size()) {
    throw Error(fmt::format("checkpoint: {} optimizer moments stored, optimizer has {} parameters",
                            moments.size(), opt.params().size()));
  }
  auto& st = opt.state();
  for (std::size_t i = 0; i < moments.size(); ++i) {
    if (moments[i].name != opt.params()[i]->name || moments[i].m.size() != st.m[i].size()) {
      throw Error(fmt::format("checkpoint: optimizer moment '{}' does not match parameter '{}'",
                              moments[i].name, opt.params()[i]->name));
    }
    st.m[i] = moments[i].m;
    st.v[i] = moments[i].v;
  }
  st.step = optimizer_step;
}

void Checkpoint::write(std::ostream& out) const {
  out.write("DCSN", 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, stage);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
  for (const Block& b : blocks) {
    put_string(out, b.name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t e : b.shape) put<std::uint64_t>(out, e);
    for (float v : b.values) put<float>(out, v);
  }
  put<std::uint64_t>(out, epoch);
  put<std::uint64_t>(out, total_epochs);
  put<std::uint64_t>(out, rng_seed);
  put<std::uint64_t>(out, rng_counter);
  put<std::uint64_t>(out, optimizer_step);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(moments.size()));
  for (const Moment& m : moments) {
    put_string(out, m.name);
    put<std::uint64_t>(out, m.m.size());
    for (double v : m.m) put<double>(out, v);
    for (double v : m.v) put<double>(out, v);
  }
}

Checkpoint Checkpoint::read(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "DCSN", 4) != 0) {
    throw Error("checkpoint: bad magic (not a DCSN file)");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) {
    throw Error(fmt::format("checkpoint: unsupported format version {} (expected {})", version, kVersion));
  }
  Checkpoint c;
  c.stage = get<std::uint32_t>(in);
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    Block b;
    b.name = get_string(in);
    const auto rank = get<std::uint32_t>(in);
    if (rank > 8) throw Error(fmt::format("checkpoint: block '{}' has implausible rank {}", b.name, rank));
    for (std::uint32_t r = 0; r < rank; ++r) b.shape.push_back(get<std::uint64_t>(in));
    const std::size_t n = shape_numel(b.shape);
    if (n > (std::size_t{1} << 28)) throw Error(fmt::format("checkpoint: block '{}' too large", b.name));
    b.values.resize(n);
    for (float& v : b.values) v = get<float>(in);
    c.blocks.push_back(std::move(b));
  }
  c.epoch = get<std::uint64_t>(in);
  c.total_epochs = get<std::uint64_t>(in);
  c.rng_seed = get<std::uint64_t>(in);
  c.rng_counter = get<std::uint64_t>(in);
  c.optimizer_step = get<std::uint64_t>(in);
  const auto moments = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < moments; ++i) {
    Moment m;
    m.name = get_string(in);
    const auto n = get<std::uint64_t>(in);
    if (n > (std::uint64_t{1} << 28)) throw Error("checkpoint: moment block too large");
    m.m.resize(n);
    m.v.resize(n);
    for (double& v : m.m) v = get<double>(in);
    for (double& v : m.v) v = get<double>(in);
    c.moments.push_back(std::move(m));
  }
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot open '{}' for writing", path.string()));
  write(out);
  if (!out) throw Error(fmt::format("failed writing checkpoint '{}'", path.string()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open checkpoint '{}'", path.string()));
  try {
    return read(in);
  } catch (const Error& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace dcs
