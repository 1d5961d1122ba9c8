#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "meliba/common.hpp"
#include "meliba/params.hpp"

namespace meliba {

enum class Act : uint8_t { none, tanh, sigmoid };

// Handle into a Tape's value slots.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over vector-granularity operations. All values are
// flat double vectors; parameters live in a ParamStore and receive
// accumulated gradients on backward(). One tape is single-threaded;
// independent tapes may run on independent threads.
//
// Spans returned by val()/grad() are invalidated by recording further
// operations (the backing arena may grow).
class Tape {
 public:
  Tape() = default;

  // When recording is off, operations still compute values (same kernels,
  // bit-identical results) but no nodes are kept and backward() is not
  // available. Used for rollouts.
  void set_recording(bool r) { recording_ = r; }
  bool recording() const { return recording_; }

  Var alloc(int len);
  Var input(std::span<const double> v);
  Var zeros(int len);

  int len(Var v) const { return slots_[size_t(v.id)].len; }
  std::span<double> val(Var v);
  std::span<const double> val(Var v) const;
  std::span<double> grad(Var v);

  // y = act(W x + b); b_name may be empty for no bias. Shape errors name
  // the offending parameter.
  Var affine(ParamStore& ps, std::string_view w_name, std::string_view b_name,
             Var x, Act act);

  // Standard GRU cell:
  //   z = sigmoid(Wz x + Uz h + bz)
  //   r = sigmoid(Wr x + Ur h + br)
  //   n = tanh(Wn x + r * (Un h) + bn)
  //   h' = (1 - z) * n + z * h
  // Parameters are named <prefix>.{wz,wr,wn,uz,ur,un,bz,br,bn}.
  Var gru_step(ParamStore& ps, std::string_view prefix, Var h, Var x);

  Var concat(std::initializer_list<Var> parts);
  Var concat(std::span<const Var> parts);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var tanh_op(Var a);
  Var sigmoid_op(Var a);
  // softplus(x) + shift, elementwise; used for positive std-dev heads.
  Var softplus_shift(Var a, double shift);
  Var sum(Var a);
  Var stack_sum(std::span<const Var> scalars);

  // z = mu + sigma * eps with eps fixed (copied into the tape).
  Var reparam(Var mu, Var sigma, std::span<const double> eps);

  // KL( N(mu, sigma) || N(mu0, sigma0) ), diagonal, summed over dims.
  // The reference distribution is a constant (no gradient flows to it).
  Var kl_to_const(Var mu, Var sigma, std::span<const double> mu0,
                  std::span<const double> sigma0);

  // log softmax(logits)[index]
  Var cat_logprob(Var logits, int index);
  // entropy of softmax(logits)
  Var cat_entropy(Var logits);

  // min(ratio * adv, clip(ratio, 1 +- clip_eps) * adv), ratio = exp(lp - lp_old)
  Var ppo_clip(Var lp_new, double lp_old, double adv, double clip_eps);
  // max((v - ret)^2, (v_old + clip(v - v_old, +-clip_eps) - ret)^2)
  Var value_clip(Var v, double v_old, double ret, double clip_eps);

  // Accumulates d(loss)/d(param) into ParamStore grads and d(loss)/d(var)
  // into the tape's grad arena. loss must be a scalar.
  void backward(Var loss, double seed = 1.0);

  // Frees all recorded nodes and slots; capacity is kept. No gradient
  // flows across a clear.
  void clear();

  size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : uint8_t {
    affine,
    gru,
    concat,
    add,
    sub,
    mul,
    scale,
    tanh_,
    sigmoid_,
    softplus_shift_,
    sum_,
    stack_sum_,
    reparam_,
    kl_const,
    cat_logprob_,
    cat_entropy_,
    ppo_clip_,
    value_clip_,
  };

  struct Slot {
    int64_t off;
    int32_t len;
  };

  struct GruRefs {
    const double* w[3];  // wz wr wn  (hidden x in)
    const double* u[3];  // uz ur un  (hidden x hidden)
    const double* b[3];  // bz br bn
    double* gw[3];
    double* gu[3];
    double* gb[3];
    int hidden, in;
  };

  struct Node {
    Op op;
    Act act;
    int32_t in0 = -1, in1 = -1;
    int32_t out = -1;
    int32_t i0 = 0;   // aux slot base / ext offset / category index
    int32_t i1 = 0;   // ext count / const arena offset
    double d0 = 0, d1 = 0, d2 = 0;
    const double* w = nullptr;
    double* gw = nullptr;
    const double* b = nullptr;
    double* gb = nullptr;
  };

  double* vptr(int32_t id) { return varena_.data() + slots_[size_t(id)].off; }
  const double* vptr(int32_t id) const {
    return varena_.data() + slots_[size_t(id)].off;
  }
  double* gptr(int32_t id) { return garena_.data() + slots_[size_t(id)].off; }

  int64_t bump(int len);
  int64_t push_const(std::span<const double> v);
  Var unary(Op op, Var a);
  Var binary(Op op, Var a, Var b);
  void backward_node(const Node& n);

  std::vector<Slot> slots_;
  std::vector<double> varena_;
  std::vector<double> garena_;
  int64_t used_ = 0;
  std::vector<double> carena_;
  int64_t cused_ = 0;
  std::vector<Node> nodes_;
  std::vector<int32_t> ext_;
  std::vector<GruRefs> gru_refs_;
  std::vector<double> tmp_[4];
  bool recording_ = true;
};

}  // namespace meliba
