#include "cortexplain/checkpoint.hpp"

#include <fstream>
#include <map>

#include "cortexplain/binary_io.hpp"
#include "cortexplain/error.hpp"

namespace cx {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

void write_record(std::ostream& out, const NamedTensor& t) {
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
  out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
  for (auto e : t.value.shape()) binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  for (double x : t.value.values()) binio::write<float>(out, static_cast<float>(x));
}

NamedTensor read_record(std::istream& in) {
  NamedTensor t;
  const auto len = binio::read<std::uint32_t>(in, "tensor name length");
  if (len == 0 || len > kMaxNameLength) throw FormatError("checkpoint: bad tensor name length");
  t.name.resize(len);
  binio::read_bytes(in, t.name.data(), len, "tensor name");
  const auto rank = binio::read<std::uint32_t>(in, "tensor rank");
  if (rank > kMaxRank) throw FormatError("checkpoint: tensor '" + t.name + "' has rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = binio::read<std::uint32_t>(in, "tensor extent");
    n *= e;
  }
  if (n > (std::size_t{1} << 32)) throw FormatError("checkpoint: tensor '" + t.name + "' is implausibly large");
  std::vector<float> buf(n);
  binio::read_bytes(in, buf.data(), n * sizeof(float), "tensor data");
  std::vector<double> values(buf.begin(), buf.end());
  t.value = Tensor(std::move(shape), std::move(values));
  return t;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  binio::write_magic(out, "NEXC");
  binio::write<std::uint32_t>(out, kVersion);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) write_record(out, t);
  binio::write<std::uint32_t>(out, file.optimizer ? 1u : 0u);
  if (file.optimizer) {
    const auto& o = *file.optimizer;
    if (o.m.size() != o.v.size()) throw InvalidArgument("checkpoint: moment lists differ in length");
    binio::write<std::uint64_t>(out, o.step);
    binio::write<double>(out, o.config.lr);
    binio::write<double>(out, o.config.beta1);
    binio::write<double>(out, o.config.beta2);
    binio::write<double>(out, o.config.eps);
    binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(o.m.size()));
    for (std::size_t i = 0; i < o.m.size(); ++i) {
      write_record(out, o.m[i]);
      write_record(out, o.v[i]);
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  binio::expect_magic(in, "NEXC", "NEXC checkpoint");
  if (binio::read<std::uint32_t>(in, "version") != kVersion) throw FormatError("checkpoint: unsupported version");
  CheckpointFile f;
  const auto count = binio::read<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) f.tensors.push_back(read_record(in));
  const auto flag = binio::read<std::uint32_t>(in, "optimizer flag");
  if (flag > 1) throw FormatError("checkpoint: bad optimizer flag");
  if (flag == 1) {
    OptimizerSection o;
    o.step = binio::read<std::uint64_t>(in, "optimizer step");
    o.config.lr = binio::read<double>(in, "lr");
    o.config.beta1 = binio::read<double>(in, "beta1");
    o.config.beta2 = binio::read<double>(in, "beta2");
    o.config.eps = binio::read<double>(in, "eps");
    const auto n = binio::read<std::uint32_t>(in, "moment count");
    for (std::uint32_t i = 0; i < n; ++i) {
      o.m.push_back(read_record(in));
      o.v.push_back(read_record(in));
    }
    f.optimizer = std::move(o);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  return f;
}

CheckpointFile snapshot(const ModelState& state, const AdamState* optimizer) {
  CheckpointFile f;
  const auto params = state.parameters();
  for (const auto* p : params) f.tensors.push_back({p->name, p->value});
  for (const auto& [name, t] : state.buffers()) f.tensors.push_back({name, t});
  if (optimizer) {
    OptimizerSection o;
    o.config = optimizer->config;
    o.step = optimizer->step;
    if (!optimizer->m.empty()) {
      if (optimizer->m.size() != params.size()) throw InvalidArgument("checkpoint: optimizer does not match model");
      for (std::size_t i = 0; i < params.size(); ++i) {
        o.m.push_back({params[i]->name, optimizer->m[i]});
        o.v.push_back({params[i]->name, optimizer->v[i]});
      }
    }
    f.optimizer = std::move(o);
  }
  return f;
}

void restore(const CheckpointFile& file, ModelState& state, AdamState* optimizer) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : file.tensors) {
    if (!by_name.emplace(t.name, &t.value).second) throw FormatError("checkpoint: duplicate tensor '" + t.name + "'");
  }
  auto fetch = [&](const std::string& name, const Tensor& like) -> const Tensor& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (it->second->shape() != like.shape()) {
      throw ShapeError("checkpoint: tensor '" + name + "' has shape " + shape_string(it->second->shape()) +
                       ", model expects " + shape_string(like.shape()));
    }
    return *it->second;
  };
  const auto params = state.parameters();
  std::size_t expected = params.size() + state.buffers().size();
  if (file.tensors.size() != expected) {
    throw FormatError("checkpoint: " + std::to_string(file.tensors.size()) + " tensors, model has " +
                      std::to_string(expected));
  }
  for (auto* p : params) p->value = fetch(p->name, p->value);
  for (auto& [name, t] : state.buffers()) t = fetch(name, t);

  if (optimizer && file.optimizer) {
    const auto& o = *file.optimizer;
    optimizer->config = o.config;
    optimizer->step = o.step;
    optimizer->m.clear();
    optimizer->v.clear();
    if (!o.m.empty()) {
      if (o.m.size() != params.size()) throw FormatError("checkpoint: optimizer moments do not match the model");
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (o.m[i].name != params[i]->name || o.m[i].value.shape() != params[i]->value.shape() ||
            o.v[i].value.shape() != params[i]->value.shape()) {
          throw FormatError("checkpoint: optimizer moment for '" + params[i]->name + "' does not match");
        }
        optimizer->m.push_back(o.m[i].value);
        optimizer->v.push_back(o.v[i].value);
      }
    }
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& state, const AdamState* optimizer) {
  write_checkpoint(path, snapshot(state, optimizer));
}

void load_checkpoint(const std::filesystem::path& path, ModelState& state, AdamState* optimizer) {
  restore(read_checkpoint(path), state, optimizer);
}

}  // namespace cx
