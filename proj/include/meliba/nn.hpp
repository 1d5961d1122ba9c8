#pragma once

#include <functional>
#include <string>
#include <vector>

#include "meliba/params.hpp"
#include "meliba/rng.hpp"
#include "meliba/tape.hpp"

namespace meliba {

// Weight initialization: scaled-uniform fan-in for dense weights,
// orthogonal for recurrent weights, zero biases. Output heads are
// registered with make_head() and stay zero.
void init_uniform_fanin(ParamEntry& e, Rng& rng);
void init_orthogonal(ParamEntry& e, Rng& rng);

// Registers <name>.w [out, in] and <name>.b [out].
void make_dense(ParamStore& ps, const std::string& name, int out, int in,
                Rng& rng);
// Zero-initialized dense layer (logits / value / gaussian heads).
void make_head(ParamStore& ps, const std::string& name, int out, int in);
// Registers the nine GRU parameter arrays under <name>.
void make_gru(ParamStore& ps, const std::string& name, int hidden, int in,
              Rng& rng);

// Convenience wrappers around Tape::affine for layers made above.
Var dense(Tape& t, ParamStore& ps, const std::string& name, Var x, Act act);

// Positive std-dev head: softplus(W x + b) + 1e-5.
inline constexpr double kSigmaFloor = 1e-5;
Var sigma_head(Tape& t, ParamStore& ps, const std::string& name, Var x);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  int checked = 0;
  std::vector<std::string> failures;
  bool ok(double tol) const { return max_rel_err < tol; }
};

// Compares tape gradients of a deterministic scalar loss against central
// finite differences. loss_fn must build the loss on the given tape (the
// tape is cleared before each call). For stores larger than sample_cap
// scalars a seeded subset is checked.
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                           ParamStore& params, double eps, double tol,
                           int sample_cap = 4000, uint64_t sample_seed = 1);

}  // namespace meliba
