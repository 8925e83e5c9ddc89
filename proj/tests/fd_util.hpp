#pragma once

// Central finite-difference oracles shared by the gradient tests. These stay
// independent of the tape: they only re-evaluate a black-box scalar function.

#include <cmath>
#include <functional>
#include <vector>

namespace fd {

inline std::vector<double> grad(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double x0 = x[i];
    x[i] = x0 + h;
    double fp = f(x);
    x[i] = x0 - h;
    double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
  return worst;
}

}  // namespace fd
