#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "meliba/params.hpp"

namespace meliba {

enum class OptKind : uint8_t { adam, rmsprop };

OptKind opt_kind_from_string(const std::string& s);
std::string opt_kind_name(OptKind k);

// Adam (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected) and RMSProp
// (alpha 0.99, eps 1e-5). Gradients are clipped to a global L2 norm
// before the update (max_grad_norm <= 0 disables clipping) and zeroed
// afterwards. Updates are deterministic.
class Optimizer {
 public:
  Optimizer(OptKind kind, double lr, double max_grad_norm)
      : kind_(kind), lr_(lr), max_grad_norm_(max_grad_norm) {}

  void step(ParamStore& ps);

  OptKind kind() const { return kind_; }
  double lr() const { return lr_; }

  void save(std::FILE* f) const;
  void load(std::FILE* f);

 private:
  void ensure_moments(const ParamStore& ps);

  OptKind kind_;
  double lr_;
  double max_grad_norm_;
  std::vector<std::vector<double>> m1_;  // adam first moment / rmsprop avg
  std::vector<std::vector<double>> m2_;  // adam second moment
};

}  // namespace meliba
