#pragma once

#include <string>
#include <vector>

#include "histoseg/tensor.hpp"

namespace histoseg {

struct GradCheckParam {
  std::string name;
  TensorT<double> tensor;  // shares its buffer with the graph's leaf
};

struct GradCheckReport {
  std::size_t params_checked = 0;
  std::size_t values_checked = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

namespace detail {

class NoTapeGuard {
 public:
  NoTapeGuard() : prev_(TapeT<double>::current()) { TapeT<double>::current() = nullptr; }
  ~NoTapeGuard() { TapeT<double>::current() = prev_; }
  NoTapeGuard(const NoTapeGuard&) = delete;
  NoTapeGuard& operator=(const NoTapeGuard&) = delete;

 private:
  TapeT<double>* prev_;
};

}  // namespace detail

// Central-difference gradient verification in 64-bit. loss_fn must rebuild the
// graph from the current parameter values on every call and return a scalar;
// it must be deterministic (no live dropout). Step h = h_scale * max(1, |v|);
// relative error = |a - n| / max(|a| + |n|, denom_floor). max_per_tensor caps
// how many elements of each tensor get the two finite-difference evaluations
// (picked by a fixed-seed shuffle, so large graphs stay affordable while every
// tensor is still covered); 0 means check every element.
template <typename LossFn>
GradCheckReport gradcheck(LossFn&& loss_fn, std::vector<GradCheckParam>& params,
                          double h_scale = 1e-5, double denom_floor = 1e-3,
                          std::size_t max_per_tensor = 0) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    TapeT<double> tape;
    TapeScope<double> scope(tape);
    TensorT<double> loss = loss_fn();
    tape.backward(loss);
    for (auto& p : params) analytic.push_back(p.tensor.grad());
  }

  GradCheckReport report;
  detail::NoTapeGuard no_tape;
  Rng pick_rng(20240814);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    TensorT<double>& t = params[pi].tensor;
    std::vector<std::size_t> indices(t.numel());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (max_per_tensor > 0 && indices.size() > max_per_tensor) {
      shuffle(indices, pick_rng);
      indices.resize(max_per_tensor);
    }
    for (const std::size_t i : indices) {
      const double v = t.data()[i];
      const double h = h_scale * std::max(1.0, std::abs(v));
      t.data()[i] = v + h;
      const double up = loss_fn().item();
      t.data()[i] = v - h;
      const double down = loss_fn().item();
      t.data()[i] = v;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), denom_floor);
      ++report.values_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[pi].name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
    ++report.params_checked;
  }
  return report;
}

}  // namespace histoseg
