#pragma once

// finite-difference gradient checking against the tape, in double precision

#include <functional>

#include "osf/nn/tensor.hpp"
#include "osf/rng.hpp"

namespace osf::testing {

struct GradCheckResult {
  int checked = 0;
  int failed = 0;
  double worst_rel = 0;
};

// f builds a fresh graph from the current parameter values and returns the
// scalar loss value. analytic[i] must already hold dloss/dparam_i.
inline GradCheckResult fd_check(std::vector<nn::Param<double>*> params,
                                const std::function<double()>& f, int n_coords, Rng& rng,
                                double rel_tol = 1e-3, double h = 1e-5,
                                double abs_floor = 1e-10) {
  GradCheckResult res;
  long total = 0;
  for (auto* p : params) total += p->size();
  for (int k = 0; k < n_coords; ++k) {
    long flat = static_cast<long>(rng.index(static_cast<uint64_t>(total)));
    nn::Param<double>* p = nullptr;
    for (auto* cand : params) {
      if (flat < cand->size()) { p = cand; break; }
      flat -= cand->size();
    }
    long r = flat / p->value.cols(), c = flat % p->value.cols();
    double orig = p->value(r, c);
    double step = h * (1.0 + std::abs(orig));
    p->value(r, c) = orig + step;
    double fp = f();
    p->value(r, c) = orig - step;
    double fm = f();
    p->value(r, c) = orig;
    double fd = (fp - fm) / (2 * step);
    double an = p->grad(r, c);
    double denom = std::max({std::abs(fd), std::abs(an), abs_floor});
    double rel = std::abs(fd - an) / denom;
    if (std::abs(fd - an) > abs_floor && rel > rel_tol) ++res.failed;
    res.worst_rel = std::max(res.worst_rel, std::abs(fd - an) <= abs_floor ? 0.0 : rel);
    ++res.checked;
  }
  return res;
}

}  // namespace osf::testing
