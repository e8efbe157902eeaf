#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <thread>

#include "tsubf/losses.hpp"

// Evaluation metrics over integer label volumes: HD95 between class
// surfaces, DSC, IoU, and the Sobel smoothness score. HD95 has a
// grid-indexed fast path and an all-pairs mode that must agree exactly.

namespace tsubf {

struct LabelVolume {
  Tensor<int> labels;                         // [H, W, D]
  std::array<double, 3> spacing{1, 1, 1};     // mm per voxel along each axis

  void validate(int num_classes) const {
    if (labels.ndim() != 3)
      throw ShapeError("LabelVolume: expected [H,W,D], got " +
                       shape_str(labels.shape()));
    for (double s : spacing)
      if (!(s > 0)) throw ConfigError("LabelVolume: spacing must be > 0");
    for (long long i = 0; i < labels.size(); ++i)
      if (labels.data()[i] < 0 || labels.data()[i] >= num_classes)
        throw DomainError("LabelVolume: label " +
                          std::to_string(labels.data()[i]) + " outside [0," +
                          std::to_string(num_classes) + ")");
  }
};

using Voxel = std::array<int, 3>;

// Voxels of the class mask with at least one of the 6 face-neighbors outside
// the mask; the volume border counts as outside.
inline std::vector<Voxel> surface_voxels(const Tensor<int>& labels,
                                         int class_id) {
  if (labels.ndim() != 3)
    throw ShapeError("surface_voxels: expected [H,W,D], got " +
                     shape_str(labels.shape()));
  const int H = labels.dim(0), W = labels.dim(1), D = labels.dim(2);
  auto in_class = [&](int x, int y, int z) {
    if (x < 0 || x >= H || y < 0 || y >= W || z < 0 || z >= D) return false;
    return labels.data()[(static_cast<long long>(x) * W + y) * D + z] ==
           class_id;
  };
  std::vector<Voxel> out;
  for (int x = 0; x < H; ++x)
    for (int y = 0; y < W; ++y)
      for (int z = 0; z < D; ++z) {
        if (!in_class(x, y, z)) continue;
        if (!in_class(x - 1, y, z) || !in_class(x + 1, y, z) ||
            !in_class(x, y - 1, z) || !in_class(x, y + 1, z) ||
            !in_class(x, y, z - 1) || !in_class(x, y, z + 1))
          out.push_back({x, y, z});
      }
  return out;
}

struct Hd95Options {
  bool literal_sum = false;  // sum the directed percentiles instead of max
  bool voxel_units = false;  // ignore spacing, distances in voxel units
  bool all_pairs = false;    // brute-force nearest-neighbor path
};

struct Hd95Result {
  double value = 0;
  bool sentinel = false;  // exactly one surface was empty
};

namespace detail {

inline double point_dist(const Voxel& a, const Voxel& b,
                         const std::array<double, 3>& sp) {
  const double dx = (a[0] - b[0]) * sp[0];
  const double dy = (a[1] - b[1]) * sp[1];
  const double dz = (a[2] - b[2]) * sp[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Uniform-grid nearest-neighbor index over surface voxels. Query expands
// Chebyshev cell rings outward until the ring's distance lower bound
// exceeds the best hit, which keeps the result exact.
class SurfaceIndex {
 public:
  SurfaceIndex(const std::vector<Voxel>& pts, std::array<double, 3> sp)
      : sp_(sp) {
    min_sp_ = *std::min_element(sp.begin(), sp.end());
    for (const auto& p : pts) cells_[cell_of(p)].push_back(p);
  }

  double nearest(const Voxel& q) const {
    const Voxel qc = cell_of(q);
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0;; ++r) {
      if (r > 0) {
        const double bound = ((r - 1) * kCell + 1) * min_sp_;
        if (bound > best) break;
      }
      visit_ring(qc, r, [&](const Voxel& c) {
        auto it = cells_.find(c);
        if (it == cells_.end()) return;
        for (const auto& p : it->second)
          best = std::min(best, point_dist(q, p, sp_));
      });
      if (r > kMaxRings) break;
    }
    return best;
  }

 private:
  static constexpr int kCell = 4;
  static constexpr int kMaxRings = 1 << 14;

  static Voxel cell_of(const Voxel& p) {
    auto f = [](int v) { return v >= 0 ? v / kCell : (v - kCell + 1) / kCell; };
    return {f(p[0]), f(p[1]), f(p[2])};
  }

  template <class F>
  void visit_ring(const Voxel& c, int r, F&& f) const {
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r)
            continue;
          f(Voxel{c[0] + dx, c[1] + dy, c[2] + dz});
        }
  }

  std::array<double, 3> sp_;
  double min_sp_;
  std::map<Voxel, std::vector<Voxel>> cells_;
};

inline double d95(const std::vector<Voxel>& from, const std::vector<Voxel>& to,
                  const std::array<double, 3>& sp, bool all_pairs) {
  std::vector<double> dists;
  dists.reserve(from.size());
  if (all_pairs) {
    for (const auto& a : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& b : to) best = std::min(best, point_dist(a, b, sp));
      dists.push_back(best);
    }
  } else {
    SurfaceIndex index(to, sp);
    for (const auto& a : from) dists.push_back(index.nearest(a));
  }
  std::sort(dists.begin(), dists.end());
  const size_t rank = static_cast<size_t>(
      std::ceil(0.95 * static_cast<double>(dists.size())));
  return dists[rank - 1];  // nearest-rank percentile, 1-based index
}

}  // namespace detail

inline Hd95Result hd95(const LabelVolume& y, const LabelVolume& p,
                       int class_id, const Hd95Options& opts = {}) {
  if (y.labels.shape() != p.labels.shape())
    throw ShapeError("hd95: shape mismatch " + shape_str(y.labels.shape()) +
                     " vs " + shape_str(p.labels.shape()));
  if (y.spacing != p.spacing)
    throw ConfigError("hd95: spacing mismatch between volumes");
  const std::array<double, 3> sp =
      opts.voxel_units ? std::array<double, 3>{1, 1, 1} : y.spacing;
  auto sy = surface_voxels(y.labels, class_id);
  auto sp_vox = surface_voxels(p.labels, class_id);
  if (sy.empty() && sp_vox.empty()) return {0.0, false};
  if (sy.empty() || sp_vox.empty()) {
    const double dx = y.labels.dim(0) * sp[0];
    const double dy = y.labels.dim(1) * sp[1];
    const double dz = y.labels.dim(2) * sp[2];
    return {std::sqrt(dx * dx + dy * dy + dz * dz), true};
  }
  const double fwd = detail::d95(sy, sp_vox, sp, opts.all_pairs);
  const double bwd = detail::d95(sp_vox, sy, sp, opts.all_pairs);
  return {opts.literal_sum ? fwd + bwd : std::max(fwd, bwd), false};
}

inline double dsc(const LabelVolume& y, const LabelVolume& p, int class_id) {
  if (y.labels.shape() != p.labels.shape())
    throw ShapeError("dsc: shape mismatch");
  long long ny = 0, np = 0, inter = 0;
  for (long long i = 0; i < y.labels.size(); ++i) {
    const bool a = y.labels.data()[i] == class_id;
    const bool b = p.labels.data()[i] == class_id;
    ny += a;
    np += b;
    inter += a && b;
  }
  if (ny + np == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ny + np);
}

inline double iou(const LabelVolume& y, const LabelVolume& p, int class_id) {
  if (y.labels.shape() != p.labels.shape())
    throw ShapeError("iou: shape mismatch");
  long long inter = 0, uni = 0;
  for (long long i = 0; i < y.labels.size(); ++i) {
    const bool a = y.labels.data()[i] == class_id;
    const bool b = p.labels.data()[i] == class_id;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// One-hot [l, H, W, D] encoding of a label volume.
inline Tensor<double> one_hot_volume(const LabelVolume& v, int num_classes) {
  v.validate(num_classes);
  const int H = v.labels.dim(0), W = v.labels.dim(1), D = v.labels.dim(2);
  Tensor<double> out({num_classes, H, W, D});
  const long long vox = static_cast<long long>(H) * W * D;
  for (long long i = 0; i < vox; ++i)
    out.data()[v.labels.data()[i] * vox + i] = 1.0;
  return out;
}

// Absolute-mean Sobel aggregate over the foreground classes of a
// probability or one-hot volume [l, H, W, D]; lower = smoother. Shares the
// loss-module code path with lambda = 1.
inline double smoothness_score(const Tensor<double>& p) {
  LossConfig cfg;
  cfg.lambda = 1.0;
  cfg.aggregate = SobelAggregate::absolute_mean;
  for (int i = 1; i < p.dim(0); ++i) cfg.class_mask.push_back(i);
  if (cfg.class_mask.empty()) cfg.class_mask.push_back(0);
  return sobel_loss(p, cfg).item();
}

struct ClassMetrics {
  int class_id = 0;
  double hd95 = 0;
  bool hd95_sentinel = false;
  double iou = 0;
  double dsc = 0;
};

struct VolumeMetrics {
  std::string id;
  std::vector<ClassMetrics> per_class;  // foreground classes 1..l-1
  double mean_hd95 = 0, mean_iou = 0, mean_dsc = 0;
  double smoothness = 0;
};

struct EvalReport {
  std::vector<VolumeMetrics> volumes;
  VolumeMetrics aggregate;  // means over volumes, id = "aggregate"
};

inline VolumeMetrics evaluate_pair(const LabelVolume& y, const LabelVolume& p,
                                   int num_classes, const std::string& id = "",
                                   const Hd95Options& opts = {}) {
  y.validate(num_classes);
  p.validate(num_classes);
  VolumeMetrics m;
  m.id = id;
  for (int c = 1; c < num_classes; ++c) {
    ClassMetrics cm;
    cm.class_id = c;
    auto h = hd95(y, p, c, opts);
    cm.hd95 = h.value;
    cm.hd95_sentinel = h.sentinel;
    cm.iou = iou(y, p, c);
    cm.dsc = dsc(y, p, c);
    m.per_class.push_back(cm);
  }
  for (const auto& cm : m.per_class) {
    m.mean_hd95 += cm.hd95;
    m.mean_iou += cm.iou;
    m.mean_dsc += cm.dsc;
  }
  const double n = std::max<size_t>(m.per_class.size(), 1);
  m.mean_hd95 /= n;
  m.mean_iou /= n;
  m.mean_dsc /= n;
  m.smoothness = smoothness_score(one_hot_volume(p, num_classes));
  return m;
}

// Evaluates volume pairs with a small worker pool; results land at their
// input index, so aggregation order is deterministic regardless of thread
// scheduling.
inline EvalReport evaluate_volumes(
    const std::vector<std::pair<LabelVolume, LabelVolume>>& pairs,
    int num_classes, const std::vector<std::string>& ids = {},
    const Hd95Options& opts = {}, int threads = 0) {
  if (!ids.empty() && ids.size() != pairs.size())
    throw UsageError("evaluate_volumes: ids size mismatch");
  if (threads <= 0)
    threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<int>(threads, static_cast<int>(pairs.size()));
  EvalReport report;
  report.volumes.resize(pairs.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next.fetch_add(1); i < pairs.size();
         i = next.fetch_add(1)) {
      const std::string id =
          ids.empty() ? "volume_" + std::to_string(i) : ids[i];
      report.volumes[i] = evaluate_pair(pairs[i].first, pairs[i].second,
                                        num_classes, id, opts);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  report.aggregate.id = "aggregate";
  if (num_classes > 1)
    report.aggregate.per_class.resize(static_cast<size_t>(num_classes - 1));
  for (const auto& v : report.volumes) {
    for (size_t c = 0; c < v.per_class.size(); ++c) {
      auto& a = report.aggregate.per_class[c];
      a.class_id = v.per_class[c].class_id;
      a.hd95 += v.per_class[c].hd95;
      a.iou += v.per_class[c].iou;
      a.dsc += v.per_class[c].dsc;
      a.hd95_sentinel = a.hd95_sentinel || v.per_class[c].hd95_sentinel;
    }
    report.aggregate.mean_hd95 += v.mean_hd95;
    report.aggregate.mean_iou += v.mean_iou;
    report.aggregate.mean_dsc += v.mean_dsc;
    report.aggregate.smoothness += v.smoothness;
  }
  const double n = std::max<size_t>(report.volumes.size(), 1);
  for (auto& a : report.aggregate.per_class) {
    a.hd95 /= n;
    a.iou /= n;
    a.dsc /= n;
  }
  report.aggregate.mean_hd95 /= n;
  report.aggregate.mean_iou /= n;
  report.aggregate.mean_dsc /= n;
  report.aggregate.smoothness /= n;
  return report;
}

// CSV rows: volume,class,hd95,hd95_sentinel,iou,dsc,smoothness. Per-class
// rows first, then a per-volume "mean" row; the aggregate block last.
inline void write_report_csv(std::ostream& os, const EvalReport& report) {
  os << "volume,class,hd95,hd95_sentinel,iou,dsc,smoothness\n";
  auto emit = [&](const VolumeMetrics& v) {
    for (const auto& c : v.per_class)
      os << v.id << "," << c.class_id << "," << c.hd95 << ","
         << (c.hd95_sentinel ? 1 : 0) << "," << c.iou << "," << c.dsc << ","
         << "" << "\n";
    os << v.id << ",mean," << v.mean_hd95 << ",,"
       << v.mean_iou << "," << v.mean_dsc << "," << v.smoothness << "\n";
  };
  for (const auto& v : report.volumes) emit(v);
  emit(report.aggregate);
}

inline void write_report_summary(std::ostream& os, const EvalReport& report) {
  os << "volumes evaluated: " << report.volumes.size() << "\n";
  os << "mean HD95: " << report.aggregate.mean_hd95 << "\n";
  os << "mean IoU:  " << report.aggregate.mean_iou << "\n";
  os << "mean DSC:  " << report.aggregate.mean_dsc << "\n";
  os << "mean smoothness: " << report.aggregate.smoothness << "\n";
}

}  // namespace tsubf
