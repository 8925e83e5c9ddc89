#pragma once

#include <vector>

#include "core/camera.hpp"

namespace pgns {

// Guided points with their generating view. Noise labels exist only for
// synthetic evaluation; training code never reads them.
struct PointBatch {
  std::vector<Vec3> positions;
  std::vector<int> source_view;
  std::vector<uint8_t> gt_noise;  // empty when labels are absent

  size_t size() const { return positions.size(); }
  bool has_noise_labels() const { return !gt_noise.empty(); }

  void validate(int n_views) const {
    require(source_view.size() == positions.size(), "point batch: missing source views");
    require(gt_noise.empty() || gt_noise.size() == positions.size(), "point batch: partial noise labels");
    for (const Vec3& p : positions) require(p.allFinite(), "point batch: non-finite position");
    for (int v : source_view) require(v >= 0 && v < n_views, "point batch: source view out of range");
  }
};

// Keeps points at indices 0, k, 2k, ... preserving order.
inline PointBatch downsample_interval(const PointBatch& points, int k) {
  require(k >= 1, "downsample_interval: k must be >= 1");
  PointBatch out;
  for (size_t i = 0; i < points.size(); i += size_t(k)) {
    out.positions.push_back(points.positions[i]);
    out.source_view.push_back(points.source_view[i]);
    if (points.has_noise_labels()) out.gt_noise.push_back(points.gt_noise[i]);
  }
  return out;
}

}  // namespace pgns
