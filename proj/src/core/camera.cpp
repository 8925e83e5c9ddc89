#include "core/camera.hpp"

namespace pgns {

void Camera::validate() const {
  require(fx > 0 && fy > 0, "camera: focal lengths must be positive");
  require(width > 0 && height > 0, "camera: resolution must be positive");
  Mat3 rtr = R.transpose() * R;
  require((rtr - Mat3::Identity()).norm() < 1e-6, "camera: rotation not orthonormal");
  require(std::abs(R.determinant() - 1.0) < 1e-6, "camera: rotation must have det +1");
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, double focal_px, int w, int h) {
  Camera cam;
  cam.fx = cam.fy = focal_px;
  cam.cx = w / 2.0;
  cam.cy = h / 2.0;
  cam.width = w;
  cam.height = h;
  Vec3 zc = (eye - target).normalized();  // backward axis
  Vec3 up(0, 1, 0);
  if (std::abs(up.dot(zc)) > 0.95) up = Vec3(1, 0, 0);
  Vec3 xc = up.cross(zc).normalized();
  Vec3 yc = zc.cross(xc);
  cam.R.col(0) = xc;
  cam.R.col(1) = yc;
  cam.R.col(2) = zc;
  cam.t = eye;
  cam.validate();
  return cam;
}

std::optional<std::pair<double, double>> ray_sphere(const Vec3& o, const Vec3& d, double radius) {
  double b = o.dot(d);
  double c = o.squaredNorm() - radius * radius;
  double disc = b * b - c;
  if (disc < 0) return std::nullopt;
  double s = std::sqrt(disc);
  return std::make_pair(-b - s, -b + s);
}

std::vector<Ray> generate_rays(const Camera& cam, const std::vector<std::pair<int, int>>& pixels,
                               double bounding_radius, std::vector<int>* kept_indices, int* miss_count) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  if (kept_indices) kept_indices->clear();
  int missed = 0;
  for (size_t i = 0; i < pixels.size(); ++i) {
    auto [px, py] = pixels[i];
    require(px >= 0 && px < cam.width && py >= 0 && py < cam.height, "generate_rays: pixel out of bounds");
    Ray r;
    r.o = cam.t;
    r.d = cam.ray_dir(px + 0.5, py + 0.5);
    auto hit = ray_sphere(r.o, r.d, bounding_radius);
    if (!hit || hit->second <= 0) {
      ++missed;
      continue;
    }
    r.near = std::max(hit->first, 1e-4);
    r.far = hit->second;
    if (r.near >= r.far) {
      ++missed;
      continue;
    }
    rays.push_back(r);
    if (kept_indices) kept_indices->push_back(int(i));
  }
  if (miss_count) *miss_count = missed;
  return rays;
}

}  // namespace pgns
