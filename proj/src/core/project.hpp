#pragma once

#include <array>
#include <optional>
#include <vector>

#include "core/camera.hpp"
#include "core/tape.hpp"

namespace pgns {

constexpr double kGradDegenerate = 1e-6;

// Closed-form move of a point onto the zero level set along the SDF gradient.
// Returns nullopt when the gradient is degenerate.
inline std::optional<Vec3> project_to_surface(const Vec3& x, double f, const Vec3& g) {
  double n = g.norm();
  if (n < kGradDegenerate) return std::nullopt;
  return x - f * g / n;
}

// Tape version over batches; callers pre-filter degenerate rows.
template <class T>
VarId project_points_on_tape(Tape<T>& tape, VarId x, VarId f, VarId g) {
  VarId gn = tape.clamp_min(tape.row_norm(g), kGradDegenerate);
  return tape.sub(x, tape.mul_colvec(g, tape.div(f, gn)));
}

// Orthonormal frame spanning the plane orthogonal to `normal`.
inline std::pair<Vec3, Vec3> tangent_frame(const Vec3& normal) {
  Vec3 n = normal.normalized();
  Vec3 up = std::abs(n.y()) < 0.9 ? Vec3(0, 1, 0) : Vec3(1, 0, 0);
  Vec3 e1 = up.cross(n).normalized();
  Vec3 e2 = n.cross(e1);
  return {e1, e2};
}

struct Patch {
  std::vector<Vec3> points;  // K*K points, row-major over the grid
  int k = 0;
};

// K x K grid on the tangent plane at t_P spanning extent x extent scene units.
inline Patch build_patch(const Vec3& t_p, const Vec3& g, int k, double extent) {
  require(k >= 1 && k % 2 == 1, "build_patch: K must be odd");
  require(g.norm() >= kGradDegenerate, "build_patch: degenerate gradient");
  Patch patch;
  patch.k = k;
  patch.points.reserve(size_t(k) * k);
  auto [e1, e2] = tangent_frame(g);
  double step = k > 1 ? extent / (k - 1) : 0.0;
  double half = (k - 1) / 2.0;
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < k; ++c)
      patch.points.push_back(t_p + ((c - half) * step) * e1 + ((r - half) * step) * e2);
  return patch;
}

// Bilinear grayscale lookup at pixel coords; matches the tape Bilerp op.
inline double sample_gray(const Tensor<double>& img, double u, double v) {
  int w = img.cols(), h = img.rows();
  double x = u - 0.5, y = v - 0.5;
  int ix = int(std::floor(x)), iy = int(std::floor(y));
  double fx = x - ix, fy = y - iy;
  auto cl = [](int a, int n) { return a < 0 ? 0 : (a >= n ? n - 1 : a); };
  int x0 = cl(ix, w), x1 = cl(ix + 1, w), y0 = cl(iy, h), y1 = cl(iy + 1, h);
  return img.at(y0, x0) * (1 - fx) * (1 - fy) + img.at(y0, x1) * fx * (1 - fy) +
         img.at(y1, x0) * (1 - fx) * fy + img.at(y1, x1) * fx * fy;
}

// Projects a patch into one view and samples grayscale intensities; nullopt if
// any point lands behind the camera or outside the image.
inline std::optional<std::vector<double>> sample_intensities(const Patch& patch, const Camera& cam,
                                                             const Tensor<double>& gray) {
  std::vector<double> out;
  out.reserve(patch.points.size());
  for (const Vec3& p : patch.points) {
    auto pr = cam.project(p);
    if (!pr.in_front || !cam.inside_image(pr.u, pr.v)) return std::nullopt;
    out.push_back(sample_gray(gray, pr.u, pr.v));
  }
  return out;
}

// Normalized cross-correlation with a variance floor under the root.
inline double ncc_score(const std::vector<double>& ref, const std::vector<double>& src, double floor = 1e-6) {
  require(ref.size() == src.size() && !ref.empty(), "ncc: patch size mismatch");
  double mr = 0, ms = 0;
  for (size_t i = 0; i < ref.size(); ++i) {
    mr += ref[i];
    ms += src[i];
  }
  mr /= ref.size();
  ms /= src.size();
  double cov = 0, vr = 0, vs = 0;
  for (size_t i = 0; i < ref.size(); ++i) {
    cov += (ref[i] - mr) * (src[i] - ms);
    vr += (ref[i] - mr) * (ref[i] - mr);
    vs += (src[i] - ms) * (src[i] - ms);
  }
  cov /= ref.size();
  vr /= ref.size();
  vs /= src.size();
  return cov / std::sqrt(vr * vs + floor);
}

struct PcDiagnostics {
  int degenerate_gradient = 0;  // points skipped for |g| ~ 0
  int no_valid_view = 0;        // points whose reference patch never resolved
  int pairs_scored = 0;
};

struct PcConfig {
  int patch_k = 5;
  double extent_px = 4.0;  // patch side in reference-view pixels at depth
  int m_best = 4;
  double ncc_floor = 1e-6;
};

// Photometric-consistency loss over a point batch (tape). `x`, `f`, `g` are
// the batch positions and base-SDF outputs already on the tape; `gray` holds
// one grayscale image per view (lifetime must cover tape use). Gradients flow
// through both the surface projection and the patch samplings into the base
// network only. Returns the loss SUM over points (caller divides by D_P).
template <class T>
VarId loss_pc_on_tape(Tape<T>& tape, VarId x, VarId f, VarId g, const std::vector<int>& ref_view,
                      const std::vector<Camera>& cams, const std::vector<Tensor<T>>& gray, const PcConfig& cfg,
                      PcDiagnostics* diag = nullptr,
                      std::vector<std::vector<double>>* scores_per_point = nullptr) {
  const int n = tape.val(x).rows();
  const int n_views = int(cams.size());
  const int kk = cfg.patch_k * cfg.patch_k;
  require(int(ref_view.size()) == n, "loss_pc: ref view list mismatch");
  require(int(gray.size()) == n_views, "loss_pc: one grayscale image per view");

  PcDiagnostics local;
  PcDiagnostics& dg = diag ? *diag : local;

  // Surface projection, then everything validity-related is decided from the
  // current values; only valid (point, view) pairs get recorded.
  VarId tp = project_points_on_tape(tape, x, f, g);
  const Tensor<T>& tp_val = tape.val(tp);
  const Tensor<T>& g_val = tape.val(g);

  // Per-point tangent frames and patch extents (treated as constants).
  std::vector<Vec3> e1(n), e2(n);
  std::vector<double> extent(n);
  std::vector<bool> usable(n, true);
  for (int i = 0; i < n; ++i) {
    Vec3 gv(double(g_val.at(i, 0)), double(g_val.at(i, 1)), double(g_val.at(i, 2)));
    if (gv.norm() < kGradDegenerate) {
      usable[i] = false;
      ++dg.degenerate_gradient;
      continue;
    }
    auto fr = tangent_frame(gv);
    e1[i] = fr.first;
    e2[i] = fr.second;
    Vec3 tpv(double(tp_val.at(i, 0)), double(tp_val.at(i, 1)), double(tp_val.at(i, 2)));
    auto pr = cams[ref_view[i]].project(tpv);
    if (!pr.in_front) {
      usable[i] = false;
      ++dg.no_valid_view;
      continue;
    }
    extent[i] = cfg.extent_px * pr.z / cams[ref_view[i]].fx;
  }

  // Validity of each (point, view) pair: all patch corners project inside.
  auto patch_offsets = [&](int i) {
    std::vector<Vec3> offs(kk);
    double step = cfg.patch_k > 1 ? extent[i] / (cfg.patch_k - 1) : 0.0;
    double half = (cfg.patch_k - 1) / 2.0;
    for (int r = 0; r < cfg.patch_k; ++r)
      for (int c = 0; c < cfg.patch_k; ++c) offs[r * cfg.patch_k + c] = ((c - half) * step) * e1[i] + ((r - half) * step) * e2[i];
    return offs;
  };
  std::vector<std::vector<Vec3>> offsets(n);
  for (int i = 0; i < n; ++i)
    if (usable[i]) offsets[i] = patch_offsets(i);

  std::vector<std::vector<char>> valid(n_views, std::vector<char>(n, 0));
  for (int v = 0; v < n_views; ++v) {
    for (int i = 0; i < n; ++i) {
      if (!usable[i]) continue;
      Vec3 tpv(double(tp_val.at(i, 0)), double(tp_val.at(i, 1)), double(tp_val.at(i, 2)));
      bool ok = true;
      for (const Vec3& o : offsets[i]) {
        auto pr = cams[v].project(tpv + o);
        if (!pr.in_front || !cams[v].inside_image(pr.u, pr.v)) {
          ok = false;
          break;
        }
      }
      valid[v][i] = ok;
    }
  }

  // Per-view recorded patches: gather the member points, apply constant
  // offsets, project with that view's camera, sample, center, and keep the
  // per-row variance.
  struct ViewPatch {
    std::vector<int> members;        // point indices in this view's batch
    std::vector<int> row_of_point;   // point index -> row, -1 if absent
    VarId centered = kNoVar;         // {s, kk}
    VarId variance = kNoVar;         // {s, 1}
  };
  std::vector<ViewPatch> vp(n_views);
  for (int v = 0; v < n_views; ++v) {
    ViewPatch& P = vp[v];
    P.row_of_point.assign(n, -1);
    for (int i = 0; i < n; ++i) {
      if (valid[v][i]) {
        P.row_of_point[i] = int(P.members.size());
        P.members.push_back(i);
      }
    }
    if (P.members.empty()) continue;
    int s = int(P.members.size());
    std::vector<int> gather_idx(size_t(s) * kk);
    Tensor<T> offs_t(s * kk, 3);
    for (int r = 0; r < s; ++r) {
      int i = P.members[r];
      for (int k = 0; k < kk; ++k) {
        gather_idx[size_t(r) * kk + k] = i;
        for (int c = 0; c < 3; ++c) offs_t.at(r * kk + k, c) = T(offsets[i][k][c]);
      }
    }
    VarId pts = tape.add(tape.gather_rows(tp, gather_idx), tape.constant(std::move(offs_t)));
    // Camera transform p_cam = R^T (p - t); z is the -z_cam distance.
    const Camera& cam = cams[v];
    Tensor<T> rot(3, 3);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot.at(r, c) = T(cam.R(r, c));  // right-multiply by R == R^T p
    Tensor<T> neg_t(1, 3);
    for (int c = 0; c < 3; ++c) neg_t.data[c] = T(-cam.t[c]);
    VarId pc = tape.matmul(tape.add_rowvec(pts, tape.constant(std::move(neg_t))), tape.constant(std::move(rot)));
    VarId z = tape.clamp_min(tape.neg(tape.slice_cols(pc, 2, 1)), 1e-9);
    VarId u = tape.add_scalar(tape.scale(tape.div(tape.slice_cols(pc, 0, 1), z), cam.fx), cam.cx);
    VarId w = tape.add_scalar(tape.scale(tape.div(tape.slice_cols(pc, 1, 1), z), cam.fy), cam.cy);
    VarId intens = tape.bilerp(tape.concat_cols({u, w}), &gray[v]);
    VarId patch = tape.reshape(intens, s, kk);
    VarId mean_v = tape.row_mean(patch);
    P.centered = tape.add_colvec(patch, tape.neg(mean_v));
    P.variance = tape.row_mean(tape.square(P.centered));
  }

  // Scores per (ref, src) view pair for the points that share both.
  struct PairScores {
    VarId score = kNoVar;           // {q,1}
    std::vector<int> points;        // batch point index per row
  };
  std::vector<PairScores> pair_scores;
  std::vector<std::vector<std::pair<double, std::pair<int, int>>>> per_point;  // (value,(pair idx,row))
  per_point.resize(n);
  for (int rv = 0; rv < n_views; ++rv) {
    for (int sv = 0; sv < n_views; ++sv) {
      if (sv == rv) continue;
      std::vector<int> pts_rows_ref, pts_rows_src, members;
      for (int i = 0; i < n; ++i) {
        if (ref_view[i] != rv || !valid[rv][i] || !valid[sv][i]) continue;
        pts_rows_ref.push_back(vp[rv].row_of_point[i]);
        pts_rows_src.push_back(vp[sv].row_of_point[i]);
        members.push_back(i);
      }
      if (members.empty()) continue;
      VarId cr = tape.gather_rows(vp[rv].centered, pts_rows_ref);
      VarId cs = tape.gather_rows(vp[sv].centered, pts_rows_src);
      VarId vr = tape.gather_rows(vp[rv].variance, pts_rows_ref);
      VarId vs = tape.gather_rows(vp[sv].variance, pts_rows_src);
      VarId cov = tape.row_mean(tape.mul(cr, cs));
      VarId score = tape.div(cov, tape.sqrt_op(tape.add_scalar(tape.mul(vr, vs), cfg.ncc_floor)));
      PairScores ps;
      ps.score = score;
      ps.points = members;
      int pair_idx = int(pair_scores.size());
      const Tensor<T>& sval = tape.val(score);
      for (size_t r = 0; r < members.size(); ++r)
        per_point[members[r]].push_back({double(sval.data[r]), {pair_idx, int(r)}});
      pair_scores.push_back(std::move(ps));
      dg.pairs_scored += int(members.size());
    }
  }

  // Keep the m best source views per point; fewer valid views shrink the
  // divisor. The selection itself is a value-level choice (constant indices).
  if (scores_per_point) scores_per_point->assign(n, {});
  std::vector<std::vector<std::pair<int, double>>> chosen_per_pair(pair_scores.size());
  for (int i = 0; i < n; ++i) {
    auto& cand = per_point[i];
    if (cand.empty()) {
      if (usable[i]) ++dg.no_valid_view;
      continue;
    }
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    if (scores_per_point)
      for (auto& c : cand) (*scores_per_point)[i].push_back(c.first);
    int m_i = std::min<int>(cfg.m_best, int(cand.size()));
    for (int j = 0; j < m_i; ++j) {
      auto [pair_idx, row] = cand[j].second;
      chosen_per_pair[pair_idx].push_back({row, 1.0 / double(m_i)});
    }
  }

  VarId total = tape.constant_scalar(0.0);
  for (size_t p = 0; p < pair_scores.size(); ++p) {
    if (chosen_per_pair[p].empty()) continue;
    std::vector<int> rows;
    Tensor<T> wts(int(chosen_per_pair[p].size()), 1);
    for (size_t j = 0; j < chosen_per_pair[p].size(); ++j) {
      rows.push_back(chosen_per_pair[p][j].first);
      wts.data[j] = T(chosen_per_pair[p][j].second);
    }
    VarId sel = tape.gather_rows(pair_scores[p].score, rows);
    VarId one_minus = tape.add_scalar(tape.neg(sel), 1.0);
    total = tape.add(total, tape.sum(tape.mul(one_minus, tape.constant(std::move(wts)))));
  }
  return total;
}

}  // namespace pgns
