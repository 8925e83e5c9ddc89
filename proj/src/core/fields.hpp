#pragma once

#include <string>
#include <vector>

#include "core/rng.hpp"
#include "core/tape.hpp"

namespace pgns {

// Frequency positional encoding: [x, sin(2^k x), cos(2^k x)] for k < bands.
struct EncodingConfig {
  int num_bands = 6;
  bool include_input = true;

  int out_dim(int in_dim) const { return in_dim * ((include_input ? 1 : 0) + 2 * num_bands); }
};

template <class T>
VarId encode(Tape<T>& tape, VarId x, const EncodingConfig& cfg) {
  std::vector<VarId> parts;
  if (cfg.include_input) parts.push_back(x);
  for (int k = 0; k < cfg.num_bands; ++k) {
    VarId s = tape.scale(x, double(1 << k));
    parts.push_back(tape.sin_op(s));
    parts.push_back(tape.cos_op(s));
  }
  return tape.concat_cols(parts);
}

template <class T>
using EMatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
EMatX<T> encode_eval(const EMatX<T>& x, const EncodingConfig& cfg) {
  int in = int(x.cols());
  EMatX<T> out(x.rows(), cfg.out_dim(in));
  int at = 0;
  if (cfg.include_input) {
    out.middleCols(0, in) = x;
    at = in;
  }
  for (int k = 0; k < cfg.num_bands; ++k) {
    T f = T(1 << k);
    out.middleCols(at, in) = (x.array() * f).sin();
    out.middleCols(at + in, in) = (x.array() * f).cos();
    at += 2 * in;
  }
  return out;
}

// Shifted softplus used in SDF trunks: softplus_beta(x) - softplus_beta(0),
// so a zero pre-activation maps to exactly zero and the geometric
// initialization is exact at the origin.
template <class T>
VarId trunk_act(Tape<T>& tape, VarId x, double beta) {
  return tape.add_scalar(tape.softplus_op(x, beta), -std::log(2.0) / beta);
}

template <class T>
void trunk_act_eval(EMatX<T>& x, double beta) {
  const T shift = T(std::log(2.0) / beta);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = T(softplus_stable(double(x.data()[i]) * beta) / beta) - shift;
  }
}

namespace detail {

template <class T>
Tensor<T> normal_init(int r, int c, double mean, double stddev, Rng& rng) {
  Tensor<T> t(r, c);
  for (auto& v : t.data) v = T(mean + stddev * rng.normal());
  return t;
}

}  // namespace detail

// Per-point Gaussian SDF prediction (tape variables).
struct GaussianSdfPrediction {
  VarId f = kNoVar;           // mean SDF, {n,1}
  VarId sigma2_raw = kNoVar;  // pre-activation variance head, {n,1}
  VarId sigma2_act = kNoVar;  // sigma0^2 + softplus(raw), {n,1}
  VarId fea = kNoVar;         // feature vector, {n,fea_dim}
};

// Minimum-variance activation; kept standalone so it can be exercised as a
// scalar function too.
template <class T>
VarId activate_variance(Tape<T>& tape, VarId sigma2_raw, double sigma0_sq) {
  require(sigma0_sq > 0, "activate_variance: sigma0_sq must be positive");
  return tape.add_scalar(tape.softplus_op(sigma2_raw, 1.0), sigma0_sq);
}

inline double activate_variance_scalar(double raw, double sigma0_sq) {
  require(sigma0_sq > 0, "activate_variance: sigma0_sq must be positive");
  return sigma0_sq + softplus_stable(raw);
}

struct SdfNetConfig {
  EncodingConfig enc{6, true};
  int hidden = 256;
  int trunk_layers = 4;
  int fea_dim = 64;
  double sigma0_sq = 1e-4;
  double geom_radius = 0.5;
  double softplus_beta = 100.0;
};

// Base SDF network: one trunk, three heads (mean SDF, raw variance, feature).
template <class T>
class SdfNetwork {
 public:
  SdfNetwork() = default;
  SdfNetwork(std::string prefix, SdfNetConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {}

  const SdfNetConfig& config() const { return cfg_; }

  // Geometric initialization: the field starts out approximating a sphere of
  // radius geom_radius centered at the origin (f(0) = -r exactly with the
  // shifted trunk activation).
  void register_params(ParamStore<T>& store, Rng& rng) const {
    int in = cfg_.enc.out_dim(3);
    int h = cfg_.hidden;
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      int li = l == 0 ? in : h;
      Tensor<T> w = detail::normal_init<T>(li, h, 0.0, std::sqrt(2.0) / std::sqrt(double(h)), rng);
      if (l == 0) {
        // Raw xyz rows keep their init; encoded-frequency rows start at zero.
        for (int r = 3; r < li; ++r)
          for (int c = 0; c < h; ++c) w.at(r, c) = T(0);
      }
      store.add(wname(l), std::move(w));
      store.add(bname(l), Tensor<T>(1, h));
    }
    store.add(prefix_ + "/head_sdf_w",
              detail::normal_init<T>(h, 1, std::sqrt(kPi) / std::sqrt(double(h)), 1e-4, rng));
    Tensor<T> sdf_b(1, 1);
    sdf_b.data[0] = T(-cfg_.geom_radius);
    store.add(prefix_ + "/head_sdf_b", std::move(sdf_b));
    store.add(prefix_ + "/head_var_w", detail::normal_init<T>(h, 1, 0.0, 1e-2, rng));
    store.add(prefix_ + "/head_var_b", Tensor<T>(1, 1));
    store.add(prefix_ + "/head_fea_w",
              detail::normal_init<T>(h, cfg_.fea_dim, 0.0, std::sqrt(2.0) / std::sqrt(double(cfg_.fea_dim)), rng));
    store.add(prefix_ + "/head_fea_b", Tensor<T>(1, cfg_.fea_dim));
  }

  // Full tape forward; x is {n,3}.
  GaussianSdfPrediction forward(Tape<T>& tape, ParamStore<T>& store, VarId x) const {
    require(tape.val(x).cols() == 3, "sdf forward: expected {n,3} points");
    require(tape.val(x).all_finite(), "sdf forward: non-finite input coordinates");
    VarId h = encode(tape, x, cfg_.enc);
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      h = tape.add_rowvec(tape.matmul(h, tape.param(store, wname(l))), tape.param(store, bname(l)));
      h = trunk_act(tape, h, cfg_.softplus_beta);
    }
    GaussianSdfPrediction out;
    out.f = tape.add_rowvec(tape.matmul(h, tape.param(store, prefix_ + "/head_sdf_w")),
                            tape.param(store, prefix_ + "/head_sdf_b"));
    out.sigma2_raw = tape.add_rowvec(tape.matmul(h, tape.param(store, prefix_ + "/head_var_w")),
                                     tape.param(store, prefix_ + "/head_var_b"));
    out.sigma2_act = activate_variance(tape, out.sigma2_raw, cfg_.sigma0_sq);
    out.fea = tape.add_rowvec(tape.matmul(h, tape.param(store, prefix_ + "/head_fea_w")),
                              tape.param(store, prefix_ + "/head_fea_b"));
    return out;
  }

  // No-tape forward for sampling/meshing; returns only the mean SDF.
  EMatX<T> eval_f(const ParamStore<T>& store, const EMatX<T>& x) const {
    EMatX<T> h = trunk_eval(store, x);
    EMatX<T> f = h * store.get(prefix_ + "/head_sdf_w").mat();
    f.array() += store.get(prefix_ + "/head_sdf_b").data[0];
    return f;
  }

  // No-tape forward returning f, activated variance, and (optionally) the
  // spatial gradient via manual backprop through the trunk.
  void eval_full(const ParamStore<T>& store, const EMatX<T>& x, EMatX<T>* f_out, EMatX<T>* sigma2_out,
                 EMatX<T>* grad_out, EMatX<T>* fea_out = nullptr) const {
    int n = int(x.rows());
    int L = cfg_.trunk_layers;
    std::vector<EMatX<T>> pre(L);  // pre-activation per layer
    EMatX<T> enc = encode_eval(x, cfg_.enc);
    EMatX<T> h = enc;
    for (int l = 0; l < L; ++l) {
      pre[l] = h * store.get(wname(l)).mat();
      pre[l].rowwise() += store.get(bname(l)).mat().row(0);
      h = pre[l];
      trunk_act_eval(h, cfg_.softplus_beta);
    }
    const auto& wf = store.get(prefix_ + "/head_sdf_w");
    if (f_out) {
      *f_out = h * wf.mat();
      f_out->array() += store.get(prefix_ + "/head_sdf_b").data[0];
    }
    if (sigma2_out) {
      *sigma2_out = h * store.get(prefix_ + "/head_var_w").mat();
      sigma2_out->array() += store.get(prefix_ + "/head_var_b").data[0];
      for (Eigen::Index i = 0; i < sigma2_out->size(); ++i)
        sigma2_out->data()[i] = T(activate_variance_scalar(double(sigma2_out->data()[i]), cfg_.sigma0_sq));
    }
    if (fea_out) {
      *fea_out = h * store.get(prefix_ + "/head_fea_w").mat();
      fea_out->rowwise() += store.get(prefix_ + "/head_fea_b").mat().row(0);
    }
    if (grad_out) {
      // Reverse pass w.r.t. the input: d f / d h_L = head weights, then back
      // through sigmoid(beta x) activation derivatives and layer weights.
      EMatX<T> d = wf.mat().transpose().replicate(n, 1);  // {n, hidden}
      for (int l = L - 1; l >= 0; --l) {
        d.array() *= pre[l].unaryExpr([this](T v) { return T(sigmoid(double(v) * cfg_.softplus_beta)); }).array();
        d = d * store.get(wname(l)).mat().transpose();
      }
      // Through the encoder: d enc_k / d x.
      grad_out->resize(n, 3);
      grad_out->setZero();
      int at = 0;
      if (cfg_.enc.include_input) {
        *grad_out += d.middleCols(0, 3);
        at = 3;
      }
      for (int k = 0; k < cfg_.enc.num_bands; ++k) {
        T fr = T(1 << k);
        grad_out->array() += d.middleCols(at, 3).array() * (x.array() * fr).cos() * fr;
        grad_out->array() -= d.middleCols(at + 3, 3).array() * (x.array() * fr).sin() * fr;
        at += 6;
      }
    }
  }

 private:
  std::string prefix_;
  SdfNetConfig cfg_;

  std::string wname(int l) const { return prefix_ + "/w" + std::to_string(l); }
  std::string bname(int l) const { return prefix_ + "/b" + std::to_string(l); }

  EMatX<T> trunk_eval(const ParamStore<T>& store, const EMatX<T>& x) const {
    EMatX<T> h = encode_eval(x, cfg_.enc);
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      EMatX<T> z = h * store.get(wname(l)).mat();
      z.rowwise() += store.get(bname(l)).mat().row(0);
      trunk_act_eval(z, cfg_.softplus_beta);
      h = std::move(z);
    }
    return h;
  }
};

struct BiasNetConfig {
  EncodingConfig enc{6, true};
  int hidden = 256;
  int trunk_layers = 2;
  double softplus_beta = 100.0;
  double init_scale = 0.05;  // keeps f_final ~ f early in training
};

// Auxiliary field adding a correction on top of the base SDF; consumes only
// filtered point batches, never rendering samples.
template <class T>
class BiasNetwork {
 public:
  BiasNetwork() = default;
  BiasNetwork(std::string prefix, BiasNetConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {}

  void register_params(ParamStore<T>& store, Rng& rng) const {
    int in = cfg_.enc.out_dim(3);
    int h = cfg_.hidden;
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      int li = l == 0 ? in : h;
      store.add(wname(l), detail::normal_init<T>(li, h, 0.0, std::sqrt(2.0) / std::sqrt(double(h)), rng));
      store.add(bname(l), Tensor<T>(1, h));
    }
    store.add(prefix_ + "/head_w",
              detail::normal_init<T>(h, 1, 0.0, cfg_.init_scale / std::sqrt(double(h)), rng));
    store.add(prefix_ + "/head_b", Tensor<T>(1, 1));
  }

  VarId forward(Tape<T>& tape, ParamStore<T>& store, VarId x) const {
    VarId h = encode(tape, x, cfg_.enc);
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      h = tape.add_rowvec(tape.matmul(h, tape.param(store, wname(l))), tape.param(store, bname(l)));
      h = trunk_act(tape, h, cfg_.softplus_beta);
    }
    return tape.add_rowvec(tape.matmul(h, tape.param(store, prefix_ + "/head_w")),
                           tape.param(store, prefix_ + "/head_b"));
  }

  EMatX<T> eval_f(const ParamStore<T>& store, const EMatX<T>& x) const {
    EMatX<T> h = encode_eval(x, cfg_.enc);
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      EMatX<T> z = h * store.get(wname(l)).mat();
      z.rowwise() += store.get(bname(l)).mat().row(0);
      trunk_act_eval(z, cfg_.softplus_beta);
      h = std::move(z);
    }
    EMatX<T> f = h * store.get(prefix_ + "/head_w").mat();
    f.array() += store.get(prefix_ + "/head_b").data[0];
    return f;
  }

 private:
  std::string prefix_;
  BiasNetConfig cfg_;
  std::string wname(int l) const { return prefix_ + "/w" + std::to_string(l); }
  std::string bname(int l) const { return prefix_ + "/b" + std::to_string(l); }
};

// Elementwise Eq-7 style composition of base and bias SDF batches.
template <class T>
VarId final_sdf(Tape<T>& tape, VarId base_f, VarId bias_f) {
  require(tape.val(base_f).rows() == tape.val(bias_f).rows(), "final_sdf: batch length mismatch");
  return tape.add(base_f, bias_f);
}

struct ColorNetConfig {
  EncodingConfig pos_enc{6, true};
  EncodingConfig dir_enc{4, true};
  int hidden = 128;
  int trunk_layers = 2;
  int fea_dim = 64;
};

// Radiance head: encoded position, encoded view direction, SDF spatial
// gradient and the feature vector in; sigmoid RGB out.
template <class T>
class ColorNetwork {
 public:
  ColorNetwork() = default;
  ColorNetwork(std::string prefix, ColorNetConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {}

  int in_dim() const { return cfg_.pos_enc.out_dim(3) + cfg_.dir_enc.out_dim(3) + 3 + cfg_.fea_dim; }

  void register_params(ParamStore<T>& store, Rng& rng) const {
    int h = cfg_.hidden;
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      int li = l == 0 ? in_dim() : h;
      store.add(wname(l), detail::normal_init<T>(li, h, 0.0, std::sqrt(2.0) / std::sqrt(double(li)), rng));
      store.add(bname(l), Tensor<T>(1, h));
    }
    store.add(prefix_ + "/head_w", detail::normal_init<T>(h, 3, 0.0, std::sqrt(2.0) / std::sqrt(double(h)), rng));
    store.add(prefix_ + "/head_b", Tensor<T>(1, 3));
  }

  // view_dir rows must be unit vectors (checked to 1e-3).
  VarId forward(Tape<T>& tape, ParamStore<T>& store, VarId x, VarId view_dir, VarId grad_f, VarId fea) const {
    const auto& D = tape.val(view_dir);
    require(D.cols() == 3, "color forward: view_dir must be {n,3}");
    for (int r = 0; r < D.rows(); ++r) {
      double n2 = 0;
      for (int c = 0; c < 3; ++c) n2 += double(D.at(r, c)) * double(D.at(r, c));
      require(std::abs(std::sqrt(n2) - 1.0) <= 1e-3, "color forward: view_dir not unit-normalized");
    }
    VarId h = tape.concat_cols({encode(tape, x, cfg_.pos_enc), encode(tape, view_dir, cfg_.dir_enc), grad_f, fea});
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      h = tape.relu(tape.add_rowvec(tape.matmul(h, tape.param(store, wname(l))), tape.param(store, bname(l))));
    }
    VarId rgb = tape.add_rowvec(tape.matmul(h, tape.param(store, prefix_ + "/head_w")),
                                tape.param(store, prefix_ + "/head_b"));
    return tape.sigmoid_op(rgb);
  }

  EMatX<T> eval(const ParamStore<T>& store, const EMatX<T>& x, const EMatX<T>& view_dir, const EMatX<T>& grad_f,
                const EMatX<T>& fea) const {
    EMatX<T> h(x.rows(), in_dim());
    EMatX<T> pe = encode_eval(x, cfg_.pos_enc);
    EMatX<T> de = encode_eval(view_dir, cfg_.dir_enc);
    h << pe, de, grad_f, fea;
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
      EMatX<T> z = h * store.get(wname(l)).mat();
      z.rowwise() += store.get(bname(l)).mat().row(0);
      h = z.cwiseMax(T(0));
    }
    EMatX<T> rgb = h * store.get(prefix_ + "/head_w").mat();
    rgb.rowwise() += store.get(prefix_ + "/head_b").mat().row(0);
    for (Eigen::Index i = 0; i < rgb.size(); ++i) rgb.data()[i] = T(sigmoid(double(rgb.data()[i])));
    return rgb;
  }

 private:
  std::string prefix_;
  ColorNetConfig cfg_;
  std::string wname(int l) const { return prefix_ + "/w" + std::to_string(l); }
  std::string bname(int l) const { return prefix_ + "/b" + std::to_string(l); }
};

}  // namespace pgns
