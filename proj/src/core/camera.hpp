#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "core/common.hpp"

namespace pgns {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Pinhole camera. Camera space: x right, y down, z backward, so the optical
// axis is -z. Pixel (i,j) has its center at continuous coords (i+0.5, j+0.5).
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Mat3 R = Mat3::Identity();  // world-from-camera rotation
  Vec3 t = Vec3::Zero();      // camera center in world coords

  void validate() const;

  // World-space unit direction of the ray through pixel coords (px, py).
  Vec3 ray_dir(double px, double py) const {
    Vec3 d_cam((px - cx) / fx, (py - cy) / fy, -1.0);
    return (R * d_cam).normalized();
  }

  struct Projection {
    double u = 0, v = 0;  // pixel coords
    double z = 0;         // positive distance along the optical axis
    bool in_front = false;
  };

  Projection project(const Vec3& p) const {
    Vec3 pc = R.transpose() * (p - t);
    Projection pr;
    pr.z = -pc.z();
    pr.in_front = pr.z > 1e-9;
    if (pr.in_front) {
      pr.u = cx + fx * pc.x() / pr.z;
      pr.v = cy + fy * pc.y() / pr.z;
    }
    return pr;
  }

  bool inside_image(double u, double v, double margin = 0.5) const {
    return u >= margin && u <= width - margin && v >= margin && v <= height - margin;
  }

  // Camera at `eye` with the optical axis through `target`.
  static Camera look_at(const Vec3& eye, const Vec3& target, double focal_px, int w, int h);
};

struct Ray {
  Vec3 o = Vec3::Zero();
  Vec3 d = Vec3::Zero();  // unit
  double near = 0, far = 0;
};

// Intersection parameters of a ray with the sphere ||x|| = radius; nullopt on
// a miss.
std::optional<std::pair<double, double>> ray_sphere(const Vec3& o, const Vec3& d, double radius);

// One ray per pixel index through the pixel center; rays missing the bounding
// sphere are excluded and reported via `miss_count`.
std::vector<Ray> generate_rays(const Camera& cam, const std::vector<std::pair<int, int>>& pixels,
                               double bounding_radius, std::vector<int>* kept_indices = nullptr,
                               int* miss_count = nullptr);

}  // namespace pgns
