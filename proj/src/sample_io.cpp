#include <algorithm>
#include <cmath>
#include <fstream>

#include "cortexplain/binary_io.hpp"
#include "cortexplain/data.hpp"
#include "cortexplain/error.hpp"
#include "json.hpp"

namespace cx {

namespace {
constexpr std::uint32_t kIcofVersion = 1;
}

void SurfaceSample::validate() const {
  if (label != kFullterm && label != kPreterm) {
    throw InvalidArgument("sample " + subject_id + ": label must be 0 or 1");
  }
  const std::size_t V = ico_vertex_count(level);
  for (int h = 0; h < kHemispheres; ++h) {
    const Tensor& f = features[static_cast<std::size_t>(h)];
    if (f.rows() != V || f.cols() != features[0].cols()) {
      throw ShapeError("sample " + subject_id + ": hemisphere " + std::to_string(h) + " has shape " +
                       shape_string(f.shape()) + " at level " + std::to_string(level));
    }
    if (!all_finite(f)) throw NumericError("sample " + subject_id + ": non-finite features");
    if (mask && (*mask)[static_cast<std::size_t>(h)].size() != V) {
      throw ShapeError("sample " + subject_id + ": mask size differs from vertex count");
    }
  }
}

Tensor stack_features(std::span<const SurfaceSample* const> batch) {
  if (batch.empty()) throw InvalidArgument("stack_features: empty batch");
  const std::size_t V = batch[0]->vertices(), C = batch[0]->channels();
  Tensor out = Tensor::matrix(batch.size() * kHemispheres * V, C);
  double* dst = out.data();
  for (const auto* s : batch) {
    for (const auto& f : s->features) {
      if (f.rows() != V || f.cols() != C) throw ShapeError("stack_features: mixed sample shapes");
      std::copy_n(f.data(), f.size(), dst);
      dst += f.size();
    }
  }
  return out;
}

void write_icof(const std::filesystem::path& path, int level, const Tensor& values) {
  if (values.rows() != ico_vertex_count(level)) {
    throw ShapeError("write_icof: " + std::to_string(values.rows()) + " rows for level " + std::to_string(level));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  binio::write_magic(out, "ICOF");
  binio::write<std::uint32_t>(out, kIcofVersion);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(level));
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(values.rows()));
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(values.cols()));
  std::vector<float> buf(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) buf[i] = static_cast<float>(values[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw IoError("failed writing " + path.string());
}

IcofFile read_icof(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  binio::expect_magic(in, "ICOF", "ICOF feature");
  const auto version = binio::read<std::uint32_t>(in, "version");
  if (version != kIcofVersion) throw FormatError(path.string() + ": unsupported ICOF version");
  const auto level = binio::read<std::uint32_t>(in, "level");
  const auto n_vertices = binio::read<std::uint32_t>(in, "n_vertices");
  const auto n_channels = binio::read<std::uint32_t>(in, "n_channels");
  if (level > static_cast<std::uint32_t>(kMaxIcoLevel)) throw FormatError(path.string() + ": level out of range");
  if (n_vertices != ico_vertex_count(static_cast<int>(level))) {
    throw FormatError(path.string() + ": " + std::to_string(n_vertices) + " vertices do not match level " +
                      std::to_string(level));
  }
  if (n_channels == 0) throw FormatError(path.string() + ": zero channels");
  // Reject trailing or missing payload up front.
  const auto payload = std::size_t{n_vertices} * n_channels * sizeof(float);
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto total = static_cast<std::size_t>(in.tellg());
  in.seekg(here);
  if (total != kIcofHeaderBytes + payload) {
    throw FormatError(path.string() + ": file is " + std::to_string(total) + " bytes, header implies " +
                      std::to_string(kIcofHeaderBytes + payload));
  }
  std::vector<float> buf(std::size_t{n_vertices} * n_channels);
  binio::read_bytes(in, buf.data(), payload, "payload");
  IcofFile f;
  f.level = static_cast<int>(level);
  f.values = Tensor::matrix(n_vertices, n_channels);
  for (std::size_t i = 0; i < buf.size(); ++i) f.values[i] = static_cast<double>(buf[i]);
  return f;
}

void write_mask(const std::filesystem::path& path, int level, const VertexMask& mask) {
  Tensor t = Tensor::matrix(mask.size(), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) t[i] = mask[i] ? 1.0 : 0.0;
  write_icof(path, level, t);
}

VertexMask read_mask(const std::filesystem::path& path, int expected_level) {
  const IcofFile f = read_icof(path);
  if (f.level != expected_level) throw FormatError(path.string() + ": mask level differs from features");
  if (f.values.cols() != 1) throw FormatError(path.string() + ": mask must have one channel");
  VertexMask m(f.values.rows());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double v = f.values[i];
    if (v != 0.0 && v != 1.0) throw FormatError(path.string() + ": mask values must be 0 or 1");
    m[i] = v == 1.0;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Manifest

Manifest Manifest::filter_split(const std::string& split) const {
  Manifest m;
  m.base_dir = base_dir;
  for (const auto& r : records) {
    if (r.split == split) m.records.push_back(r);
  }
  return m;
}

std::size_t Manifest::count_label(int label) const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.label == label;
  return n;
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestRecord r;
      r.subject_id = j.at("subject_id").get<std::string>();
      r.label = j.at("label").get<int>();
      r.lh = j.at("lh").get<std::string>();
      r.rh = j.at("rh").get<std::string>();
      if (j.contains("lh_mask") && !j["lh_mask"].is_null()) r.lh_mask = j["lh_mask"].get<std::string>();
      if (j.contains("rh_mask") && !j["rh_mask"].is_null()) r.rh_mask = j["rh_mask"].get<std::string>();
      r.split = j.value("split", std::string("train"));
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::vector<std::string> ids;
  for (const auto& r : m.records) ids.push_back(r.subject_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw FormatError(path.string() + ": duplicate subject ids");
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : manifest.records) {
    nlohmann::ordered_json j;
    j["subject_id"] = r.subject_id;
    j["label"] = r.label;
    j["lh"] = r.lh;
    j["rh"] = r.rh;
    j["lh_mask"] = r.lh_mask ? nlohmann::ordered_json(*r.lh_mask) : nlohmann::ordered_json(nullptr);
    j["rh_mask"] = r.rh_mask ? nlohmann::ordered_json(*r.rh_mask) : nlohmann::ordered_json(nullptr);
    j["split"] = r.split;
    out << j.dump() << '\n';
  }
}

ManifestRecord save_sample(const SurfaceSample& sample, const std::filesystem::path& dir) {
  sample.validate();
  std::filesystem::create_directories(dir);
  ManifestRecord r;
  r.subject_id = sample.subject_id;
  r.label = sample.label;
  r.lh = sample.subject_id + "_lh.icof";
  r.rh = sample.subject_id + "_rh.icof";
  write_icof(dir / r.lh, sample.level, sample.features[0]);
  write_icof(dir / r.rh, sample.level, sample.features[1]);
  if (sample.mask) {
    r.lh_mask = sample.subject_id + "_lh_mask.icof";
    r.rh_mask = sample.subject_id + "_rh_mask.icof";
    write_mask(dir / *r.lh_mask, sample.level, (*sample.mask)[0]);
    write_mask(dir / *r.rh_mask, sample.level, (*sample.mask)[1]);
  }
  return r;
}

SurfaceSample load_sample(const ManifestRecord& record, const std::filesystem::path& base_dir) {
  SurfaceSample s;
  s.subject_id = record.subject_id;
  s.label = record.label;
  IcofFile lh = read_icof(base_dir / record.lh);
  IcofFile rh = read_icof(base_dir / record.rh);
  if (lh.level != rh.level) throw FormatError(record.subject_id + ": hemispheres at different levels");
  s.level = lh.level;
  s.features = {std::move(lh.values), std::move(rh.values)};
  if (record.lh_mask.has_value() != record.rh_mask.has_value()) {
    throw FormatError(record.subject_id + ": mask given for only one hemisphere");
  }
  if (record.lh_mask) {
    s.mask = std::array<VertexMask, kHemispheres>{read_mask(base_dir / *record.lh_mask, s.level),
                                                  read_mask(base_dir / *record.rh_mask, s.level)};
  }
  s.validate();
  return s;
}

std::vector<SurfaceSample> load_samples(const Manifest& manifest) {
  std::vector<SurfaceSample> out;
  out.reserve(manifest.size());
  for (const auto& r : manifest.records) out.push_back(load_sample(r, manifest.base_dir));
  return out;
}

}  // namespace cx
