#pragma once

#include <functional>

#include "core/camera.hpp"
#include "core/fields.hpp"
#include "core/rng.hpp"

namespace pgns {

// Discrete opacity from consecutive SDF samples (Eq-2 style weight function).
inline double neus_alpha(double f_i, double f_ip1, double s) {
  require(s > 0, "neus_alpha: s must be positive");
  double phi_i = pgns::sigmoid(s * f_i);
  double phi_ip1 = pgns::sigmoid(s * f_ip1);
  double denom = std::max(phi_i, 1e-12);
  return std::max((phi_i - phi_ip1) / denom, 0.0);
}

// Stratified uniform samples: one draw per stratum of [near, far], ascending.
inline std::vector<double> stratified_samples(double near, double far, int n, Rng& rng) {
  require(n >= 2, "stratified_samples: need at least two samples");
  std::vector<double> t(n);
  double w = (far - near) / n;
  for (int i = 0; i < n; ++i) t[i] = near + w * (i + rng.uniform());
  return t;
}

// Importance resampling proportional to coarse opacity: the coarse SDF values
// define interval weights via the alpha function at a fixed sharpness, then
// stratified inverse-CDF draws land inside those intervals. Returns the merged
// ascending set (coarse + importance).
inline std::vector<double> importance_resample(const std::vector<double>& t_coarse,
                                               const std::vector<double>& f_coarse, double s_fixed, int n_imp,
                                               Rng& rng) {
  int m = int(t_coarse.size());
  if (n_imp <= 0) return t_coarse;
  std::vector<double> w(m - 1);
  double total = 0;
  for (int i = 0; i + 1 < m; ++i) {
    w[i] = neus_alpha(f_coarse[i], f_coarse[i + 1], s_fixed) + 1e-5;
    total += w[i];
  }
  std::vector<double> cdf(m);
  cdf[0] = 0;
  for (int i = 0; i + 1 < m; ++i) cdf[i + 1] = cdf[i] + w[i] / total;
  cdf[m - 1] = 1.0;

  std::vector<double> merged = t_coarse;
  merged.reserve(t_coarse.size() + n_imp);
  for (int j = 0; j < n_imp; ++j) {
    double u = (j + rng.uniform()) / n_imp;
    int lo = 0, hi = m - 1;
    while (lo + 1 < hi) {
      int mid = (lo + hi) / 2;
      (cdf[mid] <= u ? lo : hi) = mid;
    }
    double seg = cdf[lo + 1] - cdf[lo];
    double frac = seg > 1e-12 ? (u - cdf[lo]) / seg : 0.5;
    merged.push_back(t_coarse[lo] + frac * (t_coarse[lo + 1] - t_coarse[lo]));
  }
  std::sort(merged.begin(), merged.end());
  return merged;
}

// Spec-level convenience: coarse strata plus optional importance refinement
// against a 1-D field along the ray.
inline std::vector<double> sample_along_ray(const Ray& ray, int n_coarse, int n_importance, uint64_t seed,
                                            const std::function<double(double)>& sdf_at_t = nullptr,
                                            double s_fixed = 64.0) {
  Rng rng(seed, streams::kRayStrata);
  std::vector<double> t = stratified_samples(ray.near, ray.far, n_coarse, rng);
  if (n_importance > 0) {
    require(bool(sdf_at_t), "sample_along_ray: importance sampling needs a field");
    std::vector<double> f(t.size());
    for (size_t i = 0; i < t.size(); ++i) f[i] = sdf_at_t(t[i]);
    Rng rng2(seed, streams::kImportance);
    t = importance_resample(t, f, s_fixed, n_importance, rng2);
  }
  return t;
}

// Plain (tape-free) transmittance accumulation for one ray; the oracle-style
// path used by tests and the validation renderer.
struct AccumResult {
  std::array<double, 3> color{0, 0, 0};
  std::vector<double> weights;
  double weight_sum = 0;
  double depth = 0;  // weight expectation of t
};

inline AccumResult accumulate_color(const std::vector<double>& alphas,
                                    const std::vector<std::array<double, 3>>& colors,
                                    const std::vector<double>& ts = {}) {
  require(alphas.size() == colors.size(), "accumulate_color: misaligned inputs");
  AccumResult out;
  out.weights.resize(alphas.size());
  double trans = 1.0;
  double depth_acc = 0;
  for (size_t i = 0; i < alphas.size(); ++i) {
    double w = trans * alphas[i];
    out.weights[i] = w;
    for (int c = 0; c < 3; ++c) out.color[c] += w * colors[i][c];
    if (!ts.empty()) depth_acc += w * ts[i];
    out.weight_sum += w;
    trans *= (1.0 - alphas[i]);
  }
  out.depth = depth_acc / std::max(out.weight_sum, 1e-8);
  return out;
}

// A batch of rays ready for the tape: fixed sample count per ray.
struct RayBundle {
  int n_rays = 0;
  int n_samples = 0;                      // per ray
  std::vector<double> pts;                // {n_rays*n_samples, 3} row-major
  std::vector<double> dirs;               // {n_rays, 3}
  std::vector<double> ts;                 // {n_rays, n_samples}
  std::vector<std::array<double, 3>> gt;  // per-ray supervision color
};

template <class T>
struct RenderOnTape {
  VarId rgb_sum = kNoVar;  // sum over rays of per-ray channel-summed |C - Chat|
  VarId eik_sum = kNoVar;  // sum over all samples of (|grad|-1)^2
  VarId chat = kNoVar;     // {n_rays, 3} composited color (with background)
  VarId weights = kNoVar;  // {n_rays, n_samples-1}
  int n_rays = 0;
  int n_samples = 0;
};

// Records the full NeuS-style rendering graph for one bundle. `s_param` is the
// trainable sharpness of the logistic weight function. Returns per-bundle
// sums so the caller can combine bundles into exact batch means.
template <class T>
RenderOnTape<T> render_rays_on_tape(Tape<T>& tape, ParamStore<T>& store, const SdfNetwork<T>& sdf,
                                    const ColorNetwork<T>& color, const RayBundle& rb, VarId s_param,
                                    const std::array<double, 3>& bg_color) {
  RenderOnTape<T> out;
  out.n_rays = rb.n_rays;
  out.n_samples = rb.n_samples;
  const int n = rb.n_rays, m = rb.n_samples;
  require(n > 0 && m >= 2, "render: empty bundle");

  Tensor<T> pts_t(n * m, 3);
  for (size_t i = 0; i < pts_t.data.size(); ++i) pts_t.data[i] = T(rb.pts[i]);
  VarId pts = tape.constant(std::move(pts_t));

  GaussianSdfPrediction pred = sdf.forward(tape, store, pts);
  VarId grad = tape.gradient(pred.f, pts);  // {n*m, 3}

  VarId f_mat = tape.reshape(pred.f, n, m);
  VarId f_i = tape.slice_cols(f_mat, 0, m - 1);
  VarId f_ip1 = tape.slice_cols(f_mat, 1, m - 1);
  VarId phi_i = tape.sigmoid_op(tape.scale_var(f_i, s_param));
  VarId phi_ip1 = tape.sigmoid_op(tape.scale_var(f_ip1, s_param));
  VarId alpha = tape.relu(tape.div(tape.sub(phi_i, phi_ip1), tape.clamp_min(phi_i, 1e-12)));
  VarId trans = tape.cumprod_exclusive(tape.add_scalar(tape.neg(alpha), 1.0 + 1e-7));
  VarId w = tape.mul(alpha, trans);  // {n, m-1}
  out.weights = w;

  // Color inputs live at the first m-1 samples of each ray.
  std::vector<int> idx;
  idx.reserve(size_t(n) * (m - 1));
  for (int r = 0; r < n; ++r)
    for (int i = 0; i + 1 < m; ++i) idx.push_back(r * m + i);
  VarId pts_c = tape.gather_rows(pts, idx);
  VarId grad_c = tape.gather_rows(grad, idx);
  VarId fea_c = tape.gather_rows(pred.fea, idx);
  Tensor<T> dirs_t(n * (m - 1), 3);
  for (int r = 0; r < n; ++r)
    for (int i = 0; i + 1 < m; ++i)
      for (int c = 0; c < 3; ++c) dirs_t.at(r * (m - 1) + i, c) = T(rb.dirs[size_t(r) * 3 + c]);
  VarId dirs = tape.constant(std::move(dirs_t));
  VarId c_rgb = color.forward(tape, store, pts_c, dirs, grad_c, fea_c);

  VarId w_col = tape.reshape(w, n * (m - 1), 1);
  VarId chat_fg = tape.seg_sum_rows(tape.mul_colvec(c_rgb, w_col), m - 1);  // {n,3}
  VarId w_sum = tape.row_sum(w);                                            // {n,1}
  Tensor<T> bg_t(n, 3);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < 3; ++c) bg_t.at(r, c) = T(bg_color[c]);
  VarId bg_rows = tape.constant(std::move(bg_t));
  VarId chat = tape.add(chat_fg, tape.mul_colvec(bg_rows, tape.add_scalar(tape.neg(w_sum), 1.0)));
  out.chat = chat;

  Tensor<T> gt_t(n, 3);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < 3; ++c) gt_t.at(r, c) = T(rb.gt[r][c]);
  out.rgb_sum = tape.sum(tape.abs_op(tape.sub(chat, tape.constant(std::move(gt_t)))));
  out.eik_sum = tape.sum(tape.square(tape.add_scalar(tape.row_norm(grad), -1.0)));
  return out;
}

// L1 color loss over a batch: channel-sum per ray, then the mean over rays.
template <class T>
VarId loss_rgb(Tape<T>& tape, VarId chat, VarId c_gt) {
  require(tape.val(chat).rows() == tape.val(c_gt).rows(), "loss_rgb: batch length mismatch");
  int n = tape.val(chat).rows();
  return tape.scale(tape.sum(tape.abs_op(tape.sub(chat, c_gt))), 1.0 / double(n));
}

// Mean squared deviation of gradient norms from one.
template <class T>
VarId loss_eikonal(Tape<T>& tape, VarId grads) {
  return tape.mean(tape.square(tape.add_scalar(tape.row_norm(grads), -1.0)));
}

}  // namespace pgns
