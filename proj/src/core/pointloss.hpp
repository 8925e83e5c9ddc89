#pragma once

#include <vector>

#include "core/tape.hpp"

namespace pgns {

struct FilterConfig {
  double epsilon = 4e-4;    // variance threshold, must exceed sigma0^2
  int warmup_steps = 1000;  // filter and bias loss stay inactive before this

  void validate(double sigma0_sq) const {
    require(epsilon > sigma0_sq, "filter: epsilon must exceed the variance floor sigma0^2");
    require(warmup_steps >= 0, "filter: warmup_steps must be >= 0");
  }
};

// Gaussian negative log-likelihood of the point SDFs against the ideal value
// zero: mean of f^2/(2 sigma~^2) + log(sigma~^2)/2.
template <class T>
VarId loss_usdf(Tape<T>& tape, VarId f, VarId sigma2_act) {
  require(tape.val(f).rows() >= 1, "loss_usdf: empty batch");
  VarId quad = tape.div(tape.square(f), tape.scale(sigma2_act, 2.0));
  VarId reg = tape.scale(tape.log_op(sigma2_act), 0.5);
  return tape.mean(tape.add(quad, reg));
}

// Naive guidance: mean |f| over the batch (the uncertainty loss with the
// variance frozen to a constant).
template <class T>
VarId loss_naive_sdf(Tape<T>& tape, VarId f) {
  require(tape.val(f).rows() >= 1, "loss_naive_sdf: empty batch");
  return tape.mean(tape.abs_op(f));
}

// Indices with activated variance strictly below the threshold, input order
// preserved; empty before the warmup step.
inline std::vector<int> filter_high_fidelity(const std::vector<double>& sigma2_act, const FilterConfig& cfg,
                                             int64_t step) {
  std::vector<int> keep;
  if (step < cfg.warmup_steps) return keep;
  for (size_t i = 0; i < sigma2_act.size(); ++i) {
    if (sigma2_act[i] < cfg.epsilon) keep.push_back(int(i));
  }
  return keep;
}

// Mean |f_final| over the filtered subset; a zero constant (with zero
// gradients) when the subset is empty.
template <class T>
VarId loss_bias(Tape<T>& tape, VarId f_final_subset) {
  if (tape.val(f_final_subset).rows() == 0) return tape.constant_scalar(0.0);
  return tape.mean(tape.abs_op(f_final_subset));
}

}  // namespace pgns
