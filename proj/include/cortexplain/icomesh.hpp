#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

namespace cx {

inline constexpr int kMaxIcoLevel = 7;
inline constexpr int kRingSize = 7;  // self + up to 6 neighbors

using Vec3 = std::array<double, 3>;
using Triangle = std::array<std::uint32_t, 3>;
using Ring = std::array<std::uint32_t, kRingSize>;

// Number of vertices of the icosphere at `level`: 10 * 4^level + 2.
std::size_t ico_vertex_count(int level);

// Icosphere at one subdivision level.
//
// Vertex order is deterministic: the first ico_vertex_count(level - 1)
// vertices are exactly the vertices of the previous level, and the new
// edge-midpoint vertices follow in (min, max) endpoint-sorted edge order.
// Rings are self-first, then neighbors counterclockwise seen from outside
// the sphere, starting at the smallest neighbor index. The 12 pentagon
// vertices repeat their first neighbor in the last slot.
class IcoMesh {
 public:
  // Builds every level from the base icosahedron up to `level`.
  static IcoMesh build(int level);

  int level() const { return level_; }
  std::size_t size() const { return positions_.size(); }

  std::span<const Vec3> positions() const { return positions_; }
  std::span<const Triangle> faces() const { return faces_; }

  // Flat V x 7 table of rings.
  std::span<const std::uint32_t> ring_table() const { return rings_; }
  Ring ring1(std::uint32_t vertex) const;
  int neighbor_count(std::uint32_t vertex) const;
  bool is_pentagon(std::uint32_t vertex) const { return neighbor_count(vertex) == 5; }

  // Pooling onto level - 1: row c holds the 7 fine indices pooled into
  // coarse vertex c (its own index plus its fine 1-ring). Empty at level 0.
  std::span<const std::uint32_t> pool_map() const;
  std::size_t coarse_size() const;

  // Per fine vertex, its parents on level - 1. Prefix vertices carry
  // {self, self}; edge vertices carry the two edge endpoints (sorted).
  std::span<const std::array<std::uint32_t, 2>> unpool_map() const { return parents_; }
  int parent_count(std::uint32_t vertex) const;

  // Subdivides this mesh once.
  IcoMesh refine() const;

  friend void save_mesh_cache(const std::filesystem::path& path, const IcoMesh& mesh);
  friend IcoMesh load_mesh_cache(const std::filesystem::path& path);

 private:
  static IcoMesh base();
  void build_rings();

  int level_ = 0;
  std::vector<Vec3> positions_;
  std::vector<Triangle> faces_;
  std::vector<std::uint32_t> rings_;
  std::vector<std::uint8_t> degree_;
  std::vector<std::array<std::uint32_t, 2>> parents_;
};

// Every level 0..top, built once. Immutable after construction.
class MeshPyramid {
 public:
  explicit MeshPyramid(int top_level);

  int top_level() const { return static_cast<int>(levels_.size()) - 1; }
  const IcoMesh& at(int level) const;

 private:
  std::vector<IcoMesh> levels_;
};

// Returns a process-wide shared pyramid containing at least `level`.
std::shared_ptr<const MeshPyramid> shared_pyramid(int level);

// Transitive pooling footprint of `coarse_vertex` at `coarse_level`, taken
// `depth` levels down. Sorted, de-duplicated fine indices.
std::vector<std::uint32_t> hex_region(const MeshPyramid& pyramid, int coarse_level,
                                      std::uint32_t coarse_vertex, int depth);

// Same, with the level pair given as meshes; rejects inconsistent levels.
std::vector<std::uint32_t> hex_region(const MeshPyramid& pyramid, const IcoMesh& fine,
                                      const IcoMesh& coarse, std::uint32_t coarse_vertex,
                                      int depth);

// Compressed footprint table for every vertex of `coarse_level`.
struct RegionTable {
  std::vector<std::uint32_t> offsets;  // size V_coarse + 1
  std::vector<std::uint32_t> indices;

  std::span<const std::uint32_t> region(std::size_t v) const {
    return {indices.data() + offsets[v], indices.data() + offsets[v + 1]};
  }
  std::size_t size() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};
RegionTable hex_regions(const MeshPyramid& pyramid, int coarse_level, int depth);

// Cache file: "ICOM", u32 version, u32 level, f64 positions (V x 3),
// u32 neighbors (V x 6), then for level >= 1 the u32 pool map
// (V_coarse x 7) and the u32 unpool map (V x 2). Little-endian, row-major.
void save_mesh_cache(const std::filesystem::path& path, const IcoMesh& mesh);
IcoMesh load_mesh_cache(const std::filesystem::path& path);

}  // namespace cx
