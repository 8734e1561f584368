#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <numbers>

#include "cortexplain/data.hpp"
#include "cortexplain/error.hpp"

namespace cx {

namespace {

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (n == 0.0) throw InvalidArgument("zero-length lesion center");
  return {v[0] / n, v[1] / n, v[2] / n};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

double angle_between(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(dot(a, b), -1.0, 1.0));
}

// Rotates `c` by an angle up to `max_angle`, uniform over the spherical cap
// in the small-angle sense.
Vec3 jitter_center(const Vec3& c, double max_angle, Rng& rng) {
  if (max_angle <= 0.0) return c;
  Vec3 r{rng.normal(), rng.normal(), rng.normal()};
  const double d = dot(r, c);
  Vec3 t{r[0] - d * c[0], r[1] - d * c[1], r[2] - d * c[2]};
  const double tn = std::sqrt(dot(t, t));
  if (tn < 1e-12) return c;
  for (auto& x : t) x /= tn;
  const double a = max_angle * std::sqrt(rng.uniform());
  return normalized({std::cos(a) * c[0] + std::sin(a) * t[0], std::cos(a) * c[1] + std::sin(a) * t[1],
                     std::cos(a) * c[2] + std::sin(a) * t[2]});
}

// White noise smoothed by `passes` rounds of 1-ring averaging, then
// z-scored per channel.
Tensor smooth_noise(const IcoMesh& mesh, int passes, Rng& rng) {
  const std::size_t V = mesh.size();
  Tensor x = Tensor::matrix(V, kInputChannels);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  Tensor next = x;
  for (int p = 0; p < passes; ++p) {
    for (std::uint32_t v = 0; v < V; ++v) {
      const Ring ring = mesh.ring1(v);
      const int n = mesh.neighbor_count(v) + 1;
      for (int c = 0; c < kInputChannels; ++c) {
        double s = 0.0;
        for (int k = 0; k < n; ++k) s += x(ring[static_cast<std::size_t>(k)], static_cast<std::size_t>(c));
        next(v, static_cast<std::size_t>(c)) = s / n;
      }
    }
    std::swap(x, next);
  }
  for (std::size_t c = 0; c < kInputChannels; ++c) {
    double m = 0.0, q = 0.0;
    for (std::size_t v = 0; v < V; ++v) m += x(v, c);
    m /= static_cast<double>(V);
    for (std::size_t v = 0; v < V; ++v) q += (x(v, c) - m) * (x(v, c) - m);
    const double sd = std::sqrt(q / static_cast<double>(V));
    for (std::size_t v = 0; v < V; ++v) x(v, c) = (x(v, c) - m) / (sd > 0.0 ? sd : 1.0);
  }
  return x;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_per_class < 1) throw ConfigError("synth: n_per_class must be positive");
  if (high_level < 0 || high_level > kMaxIcoLevel) throw ConfigError("synth: high_level out of range");
  if (input_level < 0 || input_level > high_level) {
    throw ConfigError("synth: input_level must lie in [0, high_level]");
  }
  if (smoothing_passes < 0) throw ConfigError("synth: smoothing_passes must be >= 0");
  if (!(radius_deg > 0.0 && radius_deg < 180.0)) throw ConfigError("synth: radius_deg must lie in (0, 180)");
  if (jitter_deg > radius_deg / 2.0) throw ConfigError("synth: jitter_deg may not exceed radius_deg / 2");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("synth: train_fraction must lie in (0, 1)");
  for (const auto& l : lesions) {
    if (l.hemisphere < 0 || l.hemisphere >= kHemispheres) throw ConfigError("synth: lesion hemisphere must be 0 or 1");
    if (dot(l.center, l.center) == 0.0) throw ConfigError("synth: lesion center must be non-zero");
  }
}

VertexMask cap_mask(const IcoMesh& mesh, const Vec3& center, double radius_deg) {
  const Vec3 c = normalized(center);
  const double r = deg2rad(radius_deg);
  VertexMask m(mesh.size(), 0);
  const auto pos = mesh.positions();
  for (std::size_t v = 0; v < pos.size(); ++v) m[v] = angle_between(pos[v], c) < r;
  return m;
}

SurfaceSample synth_subject(const SynthConfig& cfg, const MeshPyramid& pyramid,
                            const std::string& subject_id, int label) {
  if (label != kFullterm && label != kPreterm) throw InvalidArgument("synth_subject: label must be 0 or 1");
  const IcoMesh& mesh = pyramid.at(cfg.high_level);
  Rng rng(derive_seed(cfg.seed, subject_id));
  SurfaceSample s;
  s.subject_id = subject_id;
  s.label = label;
  s.level = cfg.high_level;
  std::array<VertexMask, kHemispheres> masks;
  const double r = deg2rad(cfg.radius_deg);
  const auto pos = mesh.positions();
  for (int h = 0; h < kHemispheres; ++h) {
    Tensor z = smooth_noise(mesh, cfg.smoothing_passes, rng);
    VertexMask& m = masks[static_cast<std::size_t>(h)];
    m.assign(mesh.size(), 0);
    for (const auto& lesion : cfg.lesions) {
      if (lesion.hemisphere != h) continue;
      // Drawn for both classes so the noise streams stay aligned.
      const Vec3 c = jitter_center(normalized(lesion.center), deg2rad(cfg.jitter()), rng);
      if (label != kPreterm) continue;
      for (std::size_t v = 0; v < pos.size(); ++v) {
        const double theta = angle_between(pos[v], c);
        if (theta >= r) continue;
        m[v] = 1;
        const double fall = 0.5 * (1.0 + std::cos(std::numbers::pi * theta / r));
        for (std::size_t ch = 0; ch < kInputChannels; ++ch) z(v, ch) += cfg.amplitude[ch] * fall;
      }
    }
    for (std::size_t v = 0; v < mesh.size(); ++v) {
      for (std::size_t ch = 0; ch < kInputChannels; ++ch) {
        // Stored as f32 on disk; keep the in-memory copy identical.
        z(v, ch) = static_cast<double>(static_cast<float>(kChannelOffset[ch] + kChannelScale[ch] * z(v, ch)));
      }
    }
    s.features[static_cast<std::size_t>(h)] = std::move(z);
  }
  s.mask = std::move(masks);
  return s;
}

Manifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const auto pyramid = shared_pyramid(cfg.high_level);
  const auto data_dir = out_dir / "data";
  std::filesystem::create_directories(data_dir);
  Manifest all;
  all.base_dir = out_dir;
  const int total = 2 * cfg.n_per_class;
  for (int i = 0; i < total; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "sub-%05d", i);
    const int label = i < cfg.n_per_class ? kFullterm : kPreterm;
    const SurfaceSample s = synth_subject(cfg, *pyramid, id, label);
    ManifestRecord r = save_sample(s, data_dir);
    for (std::string* p : {&r.lh, &r.rh}) *p = "data/" + *p;
    if (r.lh_mask) r.lh_mask = "data/" + *r.lh_mask;
    if (r.rh_mask) r.rh_mask = "data/" + *r.rh_mask;
    all.records.push_back(std::move(r));
  }
  const SplitResult split = make_splits(all, cfg.train_fraction, derive_seed(cfg.seed, "split"));
  Manifest out;
  out.base_dir = out_dir;
  out.records = split.train.records;
  out.records.insert(out.records.end(), split.test.records.begin(), split.test.records.end());
  std::sort(out.records.begin(), out.records.end(),
            [](const auto& a, const auto& b) { return a.subject_id < b.subject_id; });
  write_manifest(out_dir / "manifest.jsonl", out);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<const RegionTable> cached_regions(int source_level, int target_level) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::shared_ptr<const RegionTable>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{source_level, target_level}];
  if (!slot) {
    const auto pyramid = shared_pyramid(source_level);
    slot = std::make_shared<RegionTable>(hex_regions(*pyramid, target_level, source_level - target_level));
  }
  return slot;
}

}  // namespace

SurfaceSample coarsen_random(const SurfaceSample& sample, int target_level, Rng& rng,
                             const CoarsenOptions& options) {
  if (target_level < 0 || target_level > sample.level) {
    throw InvalidArgument("coarsen_random: target level " + std::to_string(target_level) +
                          " is not at or below the sample level " + std::to_string(sample.level));
  }
  if (!(options.rho_min > 0.0 && options.rho_min <= options.rho_max && options.rho_max <= 1.0)) {
    throw InvalidArgument("coarsen_random: need 0 < rho_min <= rho_max <= 1");
  }
  if (target_level == sample.level) return sample;
  const auto regions = cached_regions(sample.level, target_level);
  const std::size_t Vt = regions->size();
  const std::size_t C = sample.channels();
  SurfaceSample out;
  out.subject_id = sample.subject_id;
  out.label = sample.label;
  out.level = target_level;
  std::vector<std::uint32_t> pick;
  for (int h = 0; h < kHemispheres; ++h) {
    const Tensor& src = sample.features[static_cast<std::size_t>(h)];
    Tensor dst = Tensor::matrix(Vt, C);
    for (std::size_t v = 0; v < Vt; ++v) {
      const auto region = regions->region(v);
      const std::size_t n = region.size();
      std::size_t m = n;
      if (options.rho_min < 1.0) {
        const double rho = rng.uniform(options.rho_min, options.rho_max);
        m = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(rho * static_cast<double>(n))), 1, n);
      }
      pick.assign(region.begin(), region.end());
      // Partial Fisher-Yates: the first m entries are a uniform subset.
      for (std::size_t i = 0; i < m && m < n; ++i) {
        const auto j = i + rng.below(n - i);
        std::swap(pick[i], pick[j]);
      }
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < C; ++c) dst(v, c) += src(pick[i], c);
      }
      for (std::size_t c = 0; c < C; ++c) dst(v, c) /= static_cast<double>(m);
    }
    out.features[static_cast<std::size_t>(h)] = std::move(dst);
  }
  if (sample.mask) {
    std::array<VertexMask, kHemispheres> masks;
    for (int h = 0; h < kHemispheres; ++h) {
      const VertexMask& src = (*sample.mask)[static_cast<std::size_t>(h)];
      VertexMask& dst = masks[static_cast<std::size_t>(h)];
      dst.assign(Vt, 0);
      for (std::size_t v = 0; v < Vt; ++v) {
        const auto region = regions->region(v);
        std::size_t on = 0;
        for (auto u : region) on += src[u] != 0;
        dst[v] = 2 * on > region.size();
      }
    }
    out.mask = std::move(masks);
  }
  return out;
}

}  // namespace cx
