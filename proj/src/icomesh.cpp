#include "cortexplain/icomesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <string>

#include "cortexplain/binary_io.hpp"
#include "cortexplain/error.hpp"

namespace cx {

namespace {

constexpr std::uint32_t kMeshCacheVersion = 1;

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

void check_level(int level) {
  if (level < 0 || level > kMaxIcoLevel) {
    throw InvalidArgument("icosphere level must be in [0, 7], got " + std::to_string(level));
  }
}

std::uint64_t edge_key(std::uint32_t a, std::uint32_t b) {
  const auto lo = std::min(a, b);
  const auto hi = std::max(a, b);
  return (static_cast<std::uint64_t>(lo) << 32) | hi;
}

}  // namespace

std::size_t ico_vertex_count(int level) {
  check_level(level);
  return 10 * (std::size_t{1} << (2 * level)) + 2;
}

IcoMesh IcoMesh::base() {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  IcoMesh m;
  m.level_ = 0;
  const Vec3 raw[12] = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0},
                        {0, -1, t}, {0, 1, t},  {0, -1, -t}, {0, 1, -t},
                        {t, 0, -1}, {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (const auto& p : raw) m.positions_.push_back(normalized(p));
  m.faces_ = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
              {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
              {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
              {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  // Orient every face counterclockwise seen from outside.
  for (auto& f : m.faces_) {
    const auto& a = m.positions_[f[0]];
    const auto& b = m.positions_[f[1]];
    const auto& c = m.positions_[f[2]];
    const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const Vec3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
    const Vec3 n{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
    const double out = n[0] * (a[0] + b[0] + c[0]) + n[1] * (a[1] + b[1] + c[1]) +
                       n[2] * (a[2] + b[2] + c[2]);
    if (out < 0) std::swap(f[1], f[2]);
  }
  m.parents_.clear();
  m.build_rings();
  return m;
}

void IcoMesh::build_rings() {
  const std::size_t n = positions_.size();
  // succ[v] holds (x, y) pairs: y follows x counterclockwise around v.
  std::vector<std::array<std::pair<std::uint32_t, std::uint32_t>, 6>> succ(n);
  std::vector<std::uint8_t> count(n, 0);
  auto add = [&](std::uint32_t v, std::uint32_t x, std::uint32_t y) {
    if (count[v] >= 6) throw InvalidArgument("icomesh: vertex with more than 6 faces");
    succ[v][count[v]++] = {x, y};
  };
  for (const auto& f : faces_) {
    add(f[0], f[1], f[2]);
    add(f[1], f[2], f[0]);
    add(f[2], f[0], f[1]);
  }
  rings_.assign(n * kRingSize, 0);
  degree_.assign(n, 0);
  for (std::size_t v = 0; v < n; ++v) {
    const int deg = count[v];
    std::uint32_t start = succ[v][0].first;
    for (int k = 1; k < deg; ++k) start = std::min(start, succ[v][k].first);
    std::uint32_t* row = rings_.data() + v * kRingSize;
    row[0] = static_cast<std::uint32_t>(v);
    std::uint32_t cur = start;
    for (int k = 0; k < deg; ++k) {
      row[1 + k] = cur;
      const auto it = std::find_if(succ[v].begin(), succ[v].begin() + deg,
                                   [cur](const auto& p) { return p.first == cur; });
      cur = it->second;
    }
    if (deg == 5) row[6] = row[1];
    degree_[v] = static_cast<std::uint8_t>(deg);
  }
}

IcoMesh IcoMesh::refine() const {
  if (level_ >= kMaxIcoLevel) throw InvalidArgument("icomesh: cannot refine beyond level 7");
  std::vector<std::uint64_t> edges;
  edges.reserve(faces_.size() * 3);
  for (const auto& f : faces_) {
    edges.push_back(edge_key(f[0], f[1]));
    edges.push_back(edge_key(f[1], f[2]));
    edges.push_back(edge_key(f[2], f[0]));
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  IcoMesh m;
  m.level_ = level_ + 1;
  const auto base = static_cast<std::uint32_t>(positions_.size());
  m.positions_ = positions_;
  m.positions_.reserve(base + edges.size());
  m.parents_.reserve(base + edges.size());
  for (std::uint32_t v = 0; v < base; ++v) m.parents_.push_back({v, v});
  for (const auto key : edges) {
    const auto a = static_cast<std::uint32_t>(key >> 32);
    const auto b = static_cast<std::uint32_t>(key & 0xffffffffu);
    const auto& pa = positions_[a];
    const auto& pb = positions_[b];
    m.positions_.push_back(normalized({pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]}));
    m.parents_.push_back({a, b});
  }
  auto mid = [&](std::uint32_t a, std::uint32_t b) {
    const auto it = std::lower_bound(edges.begin(), edges.end(), edge_key(a, b));
    return base + static_cast<std::uint32_t>(it - edges.begin());
  };
  m.faces_.reserve(faces_.size() * 4);
  for (const auto& f : faces_) {
    const auto ab = mid(f[0], f[1]);
    const auto bc = mid(f[1], f[2]);
    const auto ca = mid(f[2], f[0]);
    m.faces_.push_back({f[0], ab, ca});
    m.faces_.push_back({f[1], bc, ab});
    m.faces_.push_back({f[2], ca, bc});
    m.faces_.push_back({ab, bc, ca});
  }
  m.build_rings();
  return m;
}

IcoMesh IcoMesh::build(int level) {
  check_level(level);
  IcoMesh m = base();
  while (m.level_ < level) m = m.refine();
  return m;
}

Ring IcoMesh::ring1(std::uint32_t vertex) const {
  if (vertex >= size()) throw InvalidArgument("ring1: vertex index out of range");
  Ring r;
  std::copy_n(rings_.data() + std::size_t{vertex} * kRingSize, kRingSize, r.begin());
  return r;
}

int IcoMesh::neighbor_count(std::uint32_t vertex) const {
  if (vertex >= size()) throw InvalidArgument("neighbor_count: vertex index out of range");
  return degree_[vertex];
}

std::size_t IcoMesh::coarse_size() const {
  return level_ == 0 ? 0 : ico_vertex_count(level_ - 1);
}

std::span<const std::uint32_t> IcoMesh::pool_map() const {
  return {rings_.data(), coarse_size() * kRingSize};
}

int IcoMesh::parent_count(std::uint32_t vertex) const {
  if (level_ == 0) return 0;
  const auto& p = parents_.at(vertex);
  return p[0] == p[1] ? 1 : 2;
}

MeshPyramid::MeshPyramid(int top_level) {
  check_level(top_level);
  levels_.push_back(IcoMesh::build(0));
  while (static_cast<int>(levels_.size()) <= top_level) levels_.push_back(levels_.back().refine());
}

const IcoMesh& MeshPyramid::at(int level) const {
  if (level < 0 || level > top_level()) {
    throw InvalidArgument("mesh pyramid has no level " + std::to_string(level));
  }
  return levels_[static_cast<std::size_t>(level)];
}

std::shared_ptr<const MeshPyramid> shared_pyramid(int level) {
  static std::mutex mu;
  static std::shared_ptr<const MeshPyramid> cached;
  std::lock_guard lock(mu);
  if (!cached || cached->top_level() < level) cached = std::make_shared<MeshPyramid>(level);
  return cached;
}

std::vector<std::uint32_t> hex_region(const MeshPyramid& pyramid, int coarse_level,
                                      std::uint32_t coarse_vertex, int depth) {
  if (depth < 0 || coarse_level + depth > pyramid.top_level()) {
    throw InvalidArgument("hex_region: inconsistent levels");
  }
  if (coarse_vertex >= pyramid.at(coarse_level).size()) {
    throw InvalidArgument("hex_region: vertex index out of range");
  }
  std::vector<std::uint32_t> frontier{coarse_vertex};
  for (int d = 1; d <= depth; ++d) {
    const auto pool = pyramid.at(coarse_level + d).pool_map();
    std::vector<std::uint32_t> next;
    next.reserve(frontier.size() * kRingSize);
    for (const auto v : frontier) {
      for (int k = 0; k < kRingSize; ++k) next.push_back(pool[std::size_t{v} * kRingSize + k]);
    }
    std::sort(next.begin(), next.end());
    next.erase(std::unique(next.begin(), next.end()), next.end());
    frontier = std::move(next);
  }
  return frontier;
}

std::vector<std::uint32_t> hex_region(const MeshPyramid& pyramid, const IcoMesh& fine,
                                      const IcoMesh& coarse, std::uint32_t coarse_vertex,
                                      int depth) {
  if (fine.level() - coarse.level() != depth) {
    throw InvalidArgument("hex_region: mesh levels differ by " +
                          std::to_string(fine.level() - coarse.level()) + ", expected depth " +
                          std::to_string(depth));
  }
  return hex_region(pyramid, coarse.level(), coarse_vertex, depth);
}

RegionTable hex_regions(const MeshPyramid& pyramid, int coarse_level, int depth) {
  RegionTable t;
  const auto n = pyramid.at(coarse_level).size();
  t.offsets.reserve(n + 1);
  t.offsets.push_back(0);
  for (std::uint32_t v = 0; v < n; ++v) {
    const auto r = hex_region(pyramid, coarse_level, v, depth);
    t.indices.insert(t.indices.end(), r.begin(), r.end());
    t.offsets.push_back(static_cast<std::uint32_t>(t.indices.size()));
  }
  return t;
}

void save_mesh_cache(const std::filesystem::path& path, const IcoMesh& mesh) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open mesh cache for writing: " + path.string());
  binio::write_magic(out, "ICOM");
  binio::write<std::uint32_t>(out, kMeshCacheVersion);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(mesh.level_));
  for (const auto& p : mesh.positions_) {
    for (double c : p) binio::write<double>(out, c);
  }
  for (std::size_t v = 0; v < mesh.size(); ++v) {
    for (int k = 1; k < kRingSize; ++k) binio::write<std::uint32_t>(out, mesh.rings_[v * kRingSize + k]);
  }
  if (mesh.level_ > 0) {
    for (const auto i : mesh.pool_map()) binio::write<std::uint32_t>(out, i);
    for (const auto& p : mesh.parents_) {
      binio::write<std::uint32_t>(out, p[0]);
      binio::write<std::uint32_t>(out, p[1]);
    }
  }
  if (!out) throw IoError("failed writing mesh cache: " + path.string());
}

IcoMesh load_mesh_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open mesh cache: " + path.string());
  binio::expect_magic(in, "ICOM", "mesh cache");
  const auto version = binio::read<std::uint32_t>(in, "version");
  if (version != kMeshCacheVersion) throw FormatError("unsupported mesh cache version");
  const auto level = static_cast<int>(binio::read<std::uint32_t>(in, "level"));
  if (level < 0 || level > kMaxIcoLevel) throw FormatError("mesh cache level out of range");
  IcoMesh m;
  m.level_ = level;
  const auto n = ico_vertex_count(level);
  m.positions_.resize(n);
  binio::read_bytes(in, m.positions_.data(), n * sizeof(Vec3), "positions");
  m.rings_.assign(n * kRingSize, 0);
  m.degree_.assign(n, 0);
  for (std::size_t v = 0; v < n; ++v) {
    std::uint32_t* row = m.rings_.data() + v * kRingSize;
    row[0] = static_cast<std::uint32_t>(v);
    binio::read_bytes(in, row + 1, 6 * sizeof(std::uint32_t), "neighbors");
    for (int k = 1; k < kRingSize; ++k) {
      if (row[k] >= n) throw FormatError("mesh cache neighbor index out of range");
    }
    m.degree_[v] = row[6] == row[1] ? 5 : 6;
  }
  if (level > 0) {
    const auto nc = ico_vertex_count(level - 1);
    std::vector<std::uint32_t> pool(nc * kRingSize);
    binio::read_bytes(in, pool.data(), pool.size() * sizeof(std::uint32_t), "pool map");
    if (!std::equal(pool.begin(), pool.end(), m.rings_.begin())) {
      throw FormatError("mesh cache pool map inconsistent with neighbors");
    }
    m.parents_.resize(n);
    binio::read_bytes(in, m.parents_.data(), n * sizeof(m.parents_[0]), "unpool map");
  }
  // Faces are implied by consecutive ring neighbors; keep each once.
  for (std::uint32_t v = 0; v < n; ++v) {
    const int deg = m.degree_[v];
    const std::uint32_t* row = m.rings_.data() + std::size_t{v} * kRingSize;
    for (int k = 0; k < deg; ++k) {
      const auto a = row[1 + k];
      const auto b = row[1 + (k + 1) % deg];
      if (v < a && v < b) m.faces_.push_back({v, a, b});
    }
  }
  return m;
}

}  // namespace cx
