#include "meliba/tape.hpp"

#include <cmath>
#include <cstring>

namespace meliba {

namespace {

// Dot product with four accumulators: fixed summation order (deterministic)
// while still giving the compiler instruction-level parallelism.
inline double dot(const double* a, const double* b, int n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void matvec(const double* W, const double* x, double* y, int out,
                   int in) {
  for (int i = 0; i < out; ++i) y[i] = dot(W + int64_t(i) * in, x, in);
}

inline void matvec_acc(const double* W, const double* x, double* y, int out,
                       int in) {
  for (int i = 0; i < out; ++i) y[i] += dot(W + int64_t(i) * in, x, in);
}

// gx += W^T gy, row-wise over W so memory access stays sequential.
inline void matTvec_acc(const double* W, const double* gy, double* gx, int out,
                        int in) {
  for (int i = 0; i < out; ++i) {
    const double g = gy[i];
    if (g == 0.0) continue;
    const double* row = W + int64_t(i) * in;
    for (int j = 0; j < in; ++j) gx[j] += g * row[j];
  }
}

// gW += gy x^T
inline void outer_acc(double* gW, const double* gy, const double* x, int out,
                      int in) {
  for (int i = 0; i < out; ++i) {
    const double g = gy[i];
    if (g == 0.0) continue;
    double* row = gW + int64_t(i) * in;
    for (int j = 0; j < in; ++j) row[j] += g * x[j];
  }
}

inline void add_vec(const double* a, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += a[i];
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double logsumexp(const double* l, int n) {
  double m = l[0];
  for (int i = 1; i < n; ++i) m = std::max(m, l[i]);
  double s = 0;
  for (int i = 0; i < n; ++i) s += std::exp(l[i] - m);
  return m + std::log(s);
}

}  // namespace

int64_t Tape::bump(int len) {
  const int64_t off = used_;
  used_ += len;
  if (int64_t(varena_.size()) < used_) varena_.resize(size_t(used_ * 2 + 64));
  return off;
}

int64_t Tape::push_const(std::span<const double> v) {
  const int64_t off = cused_;
  cused_ += int64_t(v.size());
  if (int64_t(carena_.size()) < cused_) carena_.resize(size_t(cused_ * 2 + 64));
  std::memcpy(carena_.data() + off, v.data(), v.size() * sizeof(double));
  return off;
}

Var Tape::alloc(int len) {
  Slot s{bump(len), len};
  slots_.push_back(s);
  return Var{int32_t(slots_.size() - 1)};
}

Var Tape::input(std::span<const double> v) {
  Var out = alloc(int(v.size()));
  std::memcpy(vptr(out.id), v.data(), v.size() * sizeof(double));
  return out;
}

Var Tape::zeros(int len) {
  Var out = alloc(len);
  std::memset(vptr(out.id), 0, size_t(len) * sizeof(double));
  return out;
}

std::span<double> Tape::val(Var v) {
  return {vptr(v.id), size_t(len(v))};
}
std::span<const double> Tape::val(Var v) const {
  return {vptr(v.id), size_t(len(v))};
}
std::span<double> Tape::grad(Var v) {
  return {gptr(v.id), size_t(len(v))};
}

Var Tape::affine(ParamStore& ps, std::string_view w_name,
                 std::string_view b_name, Var x, Act act) {
  ParamEntry& we = ps.at(w_name);
  const int out_dim = we.rows();
  const int in_dim = we.cols();
  if (in_dim != len(x)) {
    throw config_error("layer " + we.name + ": expected input of length " +
                       std::to_string(in_dim) + ", got " +
                       std::to_string(len(x)));
  }
  Var out = alloc(out_dim);
  double* y = vptr(out.id);
  matvec(we.values.data(), vptr(x.id), y, out_dim, in_dim);

  Node n;
  n.op = Op::affine;
  n.act = act;
  n.in0 = x.id;
  n.out = out.id;
  n.w = we.values.data();
  n.gw = we.grads.data();
  if (!b_name.empty()) {
    ParamEntry& be = ps.at(b_name);
    if (be.size() != out_dim) {
      throw config_error("layer " + be.name + ": bias length " +
                         std::to_string(be.size()) + " does not match " +
                         std::to_string(out_dim));
    }
    add_vec(be.values.data(), y, out_dim);
    n.b = be.values.data();
    n.gb = be.grads.data();
  }
  switch (act) {
    case Act::none:
      break;
    case Act::tanh:
      for (int i = 0; i < out_dim; ++i) y[i] = std::tanh(y[i]);
      break;
    case Act::sigmoid:
      for (int i = 0; i < out_dim; ++i) y[i] = sigmoid(y[i]);
      break;
  }
  if (recording_) nodes_.push_back(n);
  return out;
}

Var Tape::gru_step(ParamStore& ps, std::string_view prefix, Var h, Var x) {
  const std::string p(prefix);
  GruRefs r;
  const char* wn[3] = {".wz", ".wr", ".wn"};
  const char* un[3] = {".uz", ".ur", ".un"};
  const char* bn[3] = {".bz", ".br", ".bn"};
  for (int g = 0; g < 3; ++g) {
    ParamEntry& w = ps.at(p + wn[g]);
    ParamEntry& u = ps.at(p + un[g]);
    ParamEntry& b = ps.at(p + bn[g]);
    r.w[g] = w.values.data();
    r.gw[g] = w.grads.data();
    r.u[g] = u.values.data();
    r.gu[g] = u.grads.data();
    r.b[g] = b.values.data();
    r.gb[g] = b.grads.data();
    if (g == 0) {
      r.hidden = w.rows();
      r.in = w.cols();
    }
  }
  if (len(h) != r.hidden) {
    throw config_error("gru " + p + ": hidden length " +
                       std::to_string(len(h)) + " does not match configured " +
                       std::to_string(r.hidden));
  }
  if (len(x) != r.in) {
    throw config_error("gru " + p + ": input length " + std::to_string(len(x)) +
                       " does not match configured " + std::to_string(r.in));
  }
  const double* hv = vptr(h.id);
  const double* xv = vptr(x.id);
  const int nh = r.hidden;
  for (int i = 0; i < nh; ++i) {
    if (!std::isfinite(hv[i]))
      throw numeric_error("gru " + p + ": non-finite hidden state");
  }
  for (int i = 0; i < r.in; ++i) {
    if (!std::isfinite(xv[i]))
      throw numeric_error("gru " + p + ": non-finite input");
  }

  // aux slots: z, r, n_cand, un_h (consecutive ids starting at zv.id)
  Var zv = alloc(nh);
  Var rv = alloc(nh);
  Var nv = alloc(nh);
  Var uv = alloc(nh);
  Var out = alloc(nh);
  // alloc() may grow the arena; fetch pointers afterwards.
  const double* hp = vptr(h.id);
  const double* xp = vptr(x.id);
  double* z = vptr(zv.id);
  double* rr = vptr(rv.id);
  double* nc = vptr(nv.id);
  double* unh = vptr(uv.id);
  double* ho = vptr(out.id);

  matvec(r.w[0], xp, z, nh, r.in);
  matvec_acc(r.u[0], hp, z, nh, nh);
  for (int i = 0; i < nh; ++i) z[i] = sigmoid(z[i] + r.b[0][i]);
  matvec(r.w[1], xp, rr, nh, r.in);
  matvec_acc(r.u[1], hp, rr, nh, nh);
  for (int i = 0; i < nh; ++i) rr[i] = sigmoid(rr[i] + r.b[1][i]);
  matvec(r.u[2], hp, unh, nh, nh);
  matvec(r.w[2], xp, nc, nh, r.in);
  for (int i = 0; i < nh; ++i)
    nc[i] = std::tanh(nc[i] + rr[i] * unh[i] + r.b[2][i]);
  for (int i = 0; i < nh; ++i) ho[i] = (1.0 - z[i]) * nc[i] + z[i] * hp[i];

  if (recording_) {
    Node n;
    n.op = Op::gru;
    n.in0 = h.id;
    n.in1 = x.id;
    n.out = out.id;
    n.i0 = zv.id;
    n.i1 = int32_t(gru_refs_.size());
    gru_refs_.push_back(r);
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::concat(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v));
}

Var Tape::concat(std::span<const Var> parts) {
  int total = 0;
  for (Var p : parts) total += len(p);
  Var out = alloc(total);
  double* y = vptr(out.id);
  int off = 0;
  const int32_t ext_off = int32_t(ext_.size());
  for (Var p : parts) {
    std::memcpy(y + off, vptr(p.id), size_t(len(p)) * sizeof(double));
    off += len(p);
    if (recording_) ext_.push_back(p.id);
  }
  if (recording_) {
    Node n;
    n.op = Op::concat;
    n.out = out.id;
    n.i0 = ext_off;
    n.i1 = int32_t(parts.size());
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::unary(Op op, Var a) {
  Var out = alloc(len(a));
  if (recording_) {
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.out = out.id;
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::binary(Op op, Var a, Var b) {
  if (len(a) != len(b))
    throw config_error("elementwise op: length mismatch " +
                       std::to_string(len(a)) + " vs " + std::to_string(len(b)));
  Var out = unary(op, a);
  if (recording_) nodes_.back().in1 = b.id;
  return out;
}

Var Tape::add(Var a, Var b) {
  Var out = binary(Op::add, a, b);
  double* y = vptr(out.id);
  const double* av = vptr(a.id);
  const double* bv = vptr(b.id);
  for (int i = 0; i < len(a); ++i) y[i] = av[i] + bv[i];
  return out;
}

Var Tape::sub(Var a, Var b) {
  Var out = binary(Op::sub, a, b);
  double* y = vptr(out.id);
  const double* av = vptr(a.id);
  const double* bv = vptr(b.id);
  for (int i = 0; i < len(a); ++i) y[i] = av[i] - bv[i];
  return out;
}

Var Tape::mul(Var a, Var b) {
  Var out = binary(Op::mul, a, b);
  double* y = vptr(out.id);
  const double* av = vptr(a.id);
  const double* bv = vptr(b.id);
  for (int i = 0; i < len(a); ++i) y[i] = av[i] * bv[i];
  return out;
}

Var Tape::scale(Var a, double c) {
  Var out = unary(Op::scale, a);
  if (recording_) nodes_.back().d0 = c;
  double* y = vptr(out.id);
  const double* av = vptr(a.id);
  for (int i = 0; i < len(a); ++i) y[i] = c * av[i];
  return out;
}

Var Tape::tanh_op(Var a) {
  Var out = unary(Op::tanh_, a);
  double* y = vptr(out.id);
  const double* av = vptr(a.id);
  for (int i = 0; i < len(a); ++i) y[i] = std::tanh(av[i]);
  return out;
}

Var Tape::sigmoid_op(Var a) {
  Var out = unary(Op::sigmoid_, a);
  double* y = vptr(out.id);
  const double* av = vptr(a.id);
  for (int i = 0; i < len(a); ++i) y[i] = sigmoid(av[i]);
  return out;
}

Var Tape::softplus_shift(Var a, double shift) {
  Var out = unary(Op::softplus_shift_, a);
  if (recording_) nodes_.back().d0 = shift;
  double* y = vptr(out.id);
  const double* av = vptr(a.id);
  for (int i = 0; i < len(a); ++i) y[i] = softplus(av[i]) + shift;
  return out;
}

Var Tape::sum(Var a) {
  Var out = alloc(1);
  const double* av = vptr(a.id);
  double s = 0;
  for (int i = 0; i < len(a); ++i) s += av[i];
  *vptr(out.id) = s;
  if (recording_) {
    Node n;
    n.op = Op::sum_;
    n.in0 = a.id;
    n.out = out.id;
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::stack_sum(std::span<const Var> scalars) {
  Var out = alloc(1);
  const int32_t ext_off = int32_t(ext_.size());
  double s = 0;
  for (Var v : scalars) {
    s += *vptr(v.id);
    if (recording_) ext_.push_back(v.id);
  }
  *vptr(out.id) = s;
  if (recording_) {
    Node n;
    n.op = Op::stack_sum_;
    n.out = out.id;
    n.i0 = ext_off;
    n.i1 = int32_t(scalars.size());
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::reparam(Var mu, Var sigma, std::span<const double> eps) {
  if (int(eps.size()) != len(mu) || len(mu) != len(sigma))
    throw config_error("reparam: length mismatch");
  Var out = alloc(len(mu));
  const int64_t coff = push_const(eps);
  double* y = vptr(out.id);
  const double* m = vptr(mu.id);
  const double* s = vptr(sigma.id);
  const double* e = carena_.data() + coff;
  for (int i = 0; i < len(mu); ++i) y[i] = m[i] + s[i] * e[i];
  if (recording_) {
    Node n;
    n.op = Op::reparam_;
    n.in0 = mu.id;
    n.in1 = sigma.id;
    n.out = out.id;
    n.i1 = int32_t(coff);
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::kl_to_const(Var mu, Var sigma, std::span<const double> mu0,
                      std::span<const double> sigma0) {
  const int n = len(mu);
  if (len(sigma) != n || int(mu0.size()) != n || int(sigma0.size()) != n)
    throw config_error("kl_to_const: length mismatch");
  const int64_t coff = push_const(mu0);
  const int64_t coff2 = push_const(sigma0);
  (void)coff2;  // mu0 and sigma0 are contiguous: sigma0 at coff + n
  Var out = alloc(1);
  const double* m = vptr(mu.id);
  const double* s = vptr(sigma.id);
  const double* m0 = carena_.data() + coff;
  const double* s0 = m0 + n;
  double kl = 0;
  for (int i = 0; i < n; ++i) {
    if (s[i] <= 0.0 || s0[i] <= 0.0)
      throw numeric_error("kl_to_const: non-positive standard deviation");
    const double dm = m[i] - m0[i];
    kl += std::log(s0[i] / s[i]) +
          (s[i] * s[i] + dm * dm) / (2.0 * s0[i] * s0[i]) - 0.5;
  }
  *vptr(out.id) = kl;
  if (recording_) {
    Node n2;
    n2.op = Op::kl_const;
    n2.in0 = mu.id;
    n2.in1 = sigma.id;
    n2.out = out.id;
    n2.i1 = int32_t(coff);
    nodes_.push_back(n2);
  }
  return out;
}

Var Tape::cat_logprob(Var logits, int index) {
  if (index < 0 || index >= len(logits))
    throw protocol_error("cat_logprob: index out of range");
  Var out = alloc(1);
  const double* l = vptr(logits.id);
  *vptr(out.id) = l[index] - logsumexp(l, len(logits));
  if (recording_) {
    Node n;
    n.op = Op::cat_logprob_;
    n.in0 = logits.id;
    n.out = out.id;
    n.i0 = index;
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::cat_entropy(Var logits) {
  Var out = alloc(1);
  const double* l = vptr(logits.id);
  const int n = len(logits);
  const double lse = logsumexp(l, n);
  double h = 0;
  for (int i = 0; i < n; ++i) {
    const double lp = l[i] - lse;
    h -= std::exp(lp) * lp;
  }
  *vptr(out.id) = h;
  if (recording_) {
    Node n2;
    n2.op = Op::cat_entropy_;
    n2.in0 = logits.id;
    n2.out = out.id;
    nodes_.push_back(n2);
  }
  return out;
}

Var Tape::ppo_clip(Var lp_new, double lp_old, double adv, double clip_eps) {
  Var out = alloc(1);
  const double r = std::exp(*vptr(lp_new.id) - lp_old);
  const double rc = std::min(std::max(r, 1.0 - clip_eps), 1.0 + clip_eps);
  *vptr(out.id) = std::min(r * adv, rc * adv);
  if (recording_) {
    Node n;
    n.op = Op::ppo_clip_;
    n.in0 = lp_new.id;
    n.out = out.id;
    n.d0 = lp_old;
    n.d1 = adv;
    n.d2 = clip_eps;
    nodes_.push_back(n);
  }
  return out;
}

Var Tape::value_clip(Var v, double v_old, double ret, double clip_eps) {
  Var out = alloc(1);
  const double vv = *vptr(v.id);
  const double dv = std::min(std::max(vv - v_old, -clip_eps), clip_eps);
  const double e1 = vv - ret;
  const double e2 = v_old + dv - ret;
  *vptr(out.id) = std::max(e1 * e1, e2 * e2);
  if (recording_) {
    Node n;
    n.op = Op::value_clip_;
    n.in0 = v.id;
    n.out = out.id;
    n.d0 = v_old;
    n.d1 = ret;
    n.d2 = clip_eps;
    nodes_.push_back(n);
  }
  return out;
}

void Tape::backward(Var loss, double seed) {
  if (!recording_)
    throw protocol_error("backward() on a non-recording tape");
  if (len(loss) != 1) throw protocol_error("backward() requires a scalar loss");
  if (int64_t(garena_.size()) < used_) garena_.resize(size_t(used_));
  std::memset(garena_.data(), 0, size_t(used_) * sizeof(double));
  *gptr(loss.id) = seed;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) backward_node(*it);
}

void Tape::backward_node(const Node& n) {
  const int out_len = slots_[size_t(n.out)].len;
  double* gy = gptr(n.out);
  switch (n.op) {
    case Op::affine: {
      const double* y = vptr(n.out);
      switch (n.act) {
        case Act::none:
          break;
        case Act::tanh:
          for (int i = 0; i < out_len; ++i) gy[i] *= (1.0 - y[i] * y[i]);
          break;
        case Act::sigmoid:
          for (int i = 0; i < out_len; ++i) gy[i] *= y[i] * (1.0 - y[i]);
          break;
      }
      const int in_len = slots_[size_t(n.in0)].len;
      matTvec_acc(n.w, gy, gptr(n.in0), out_len, in_len);
      outer_acc(n.gw, gy, vptr(n.in0), out_len, in_len);
      if (n.gb) add_vec(gy, n.gb, out_len);
      break;
    }
    case Op::gru: {
      const GruRefs& r = gru_refs_[size_t(n.i1)];
      const int nh = r.hidden;
      const double* z = vptr(n.i0);
      const double* rr = vptr(n.i0 + 1);
      const double* nc = vptr(n.i0 + 2);
      const double* unh = vptr(n.i0 + 3);
      const double* h = vptr(n.in0);
      const double* x = vptr(n.in1);
      double* gh = gptr(n.in0);
      double* gx = gptr(n.in1);
      for (auto& t : tmp_) t.resize(size_t(nh));
      double* gaz = tmp_[0].data();
      double* gan = tmp_[1].data();
      double* gar = tmp_[2].data();
      double* gun = tmp_[3].data();
      for (int i = 0; i < nh; ++i) {
        const double g = gy[i];
        gaz[i] = g * (h[i] - nc[i]) * z[i] * (1.0 - z[i]);
        gan[i] = g * (1.0 - z[i]) * (1.0 - nc[i] * nc[i]);
        gar[i] = gan[i] * unh[i] * rr[i] * (1.0 - rr[i]);
        gun[i] = gan[i] * rr[i];
        gh[i] += g * z[i];
      }
      matTvec_acc(r.u[0], gaz, gh, nh, nh);
      matTvec_acc(r.u[1], gar, gh, nh, nh);
      matTvec_acc(r.u[2], gun, gh, nh, nh);
      matTvec_acc(r.w[0], gaz, gx, nh, r.in);
      matTvec_acc(r.w[1], gar, gx, nh, r.in);
      matTvec_acc(r.w[2], gan, gx, nh, r.in);
      outer_acc(r.gw[0], gaz, x, nh, r.in);
      outer_acc(r.gw[1], gar, x, nh, r.in);
      outer_acc(r.gw[2], gan, x, nh, r.in);
      outer_acc(r.gu[0], gaz, h, nh, nh);
      outer_acc(r.gu[1], gar, h, nh, nh);
      outer_acc(r.gu[2], gun, h, nh, nh);
      add_vec(gaz, r.gb[0], nh);
      add_vec(gar, r.gb[1], nh);
      add_vec(gan, r.gb[2], nh);
      break;
    }
    case Op::concat: {
      int off = 0;
      for (int32_t k = 0; k < n.i1; ++k) {
        const int32_t pid = ext_[size_t(n.i0 + k)];
        const int plen = slots_[size_t(pid)].len;
        add_vec(gy + off, gptr(pid), plen);
        off += plen;
      }
      break;
    }
    case Op::add: {
      add_vec(gy, gptr(n.in0), out_len);
      add_vec(gy, gptr(n.in1), out_len);
      break;
    }
    case Op::sub: {
      add_vec(gy, gptr(n.in0), out_len);
      double* gb2 = gptr(n.in1);
      for (int i = 0; i < out_len; ++i) gb2[i] -= gy[i];
      break;
    }
    case Op::mul: {
      const double* a = vptr(n.in0);
      const double* b = vptr(n.in1);
      double* ga = gptr(n.in0);
      double* gb2 = gptr(n.in1);
      for (int i = 0; i < out_len; ++i) {
        ga[i] += gy[i] * b[i];
        gb2[i] += gy[i] * a[i];
      }
      break;
    }
    case Op::scale: {
      double* ga = gptr(n.in0);
      for (int i = 0; i < out_len; ++i) ga[i] += n.d0 * gy[i];
      break;
    }
    case Op::tanh_: {
      const double* y = vptr(n.out);
      double* ga = gptr(n.in0);
      for (int i = 0; i < out_len; ++i) ga[i] += gy[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::sigmoid_: {
      const double* y = vptr(n.out);
      double* ga = gptr(n.in0);
      for (int i = 0; i < out_len; ++i) ga[i] += gy[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::softplus_shift_: {
      const double* a = vptr(n.in0);
      double* ga = gptr(n.in0);
      for (int i = 0; i < out_len; ++i) ga[i] += gy[i] * sigmoid(a[i]);
      break;
    }
    case Op::sum_: {
      const double g = gy[0];
      double* ga = gptr(n.in0);
      const int in_len = slots_[size_t(n.in0)].len;
      for (int i = 0; i < in_len; ++i) ga[i] += g;
      break;
    }
    case Op::stack_sum_: {
      const double g = gy[0];
      for (int32_t k = 0; k < n.i1; ++k)
        *gptr(ext_[size_t(n.i0 + k)]) += g;
      break;
    }
    case Op::reparam_: {
      const double* e = carena_.data() + n.i1;
      double* gm = gptr(n.in0);
      double* gs = gptr(n.in1);
      for (int i = 0; i < out_len; ++i) {
        gm[i] += gy[i];
        gs[i] += gy[i] * e[i];
      }
      break;
    }
    case Op::kl_const: {
      const double g = gy[0];
      const int nl = slots_[size_t(n.in0)].len;
      const double* m = vptr(n.in0);
      const double* s = vptr(n.in1);
      const double* m0 = carena_.data() + n.i1;
      const double* s0 = m0 + nl;
      double* gm = gptr(n.in0);
      double* gs = gptr(n.in1);
      for (int i = 0; i < nl; ++i) {
        const double inv_v0 = 1.0 / (s0[i] * s0[i]);
        gm[i] += g * (m[i] - m0[i]) * inv_v0;
        gs[i] += g * (s[i] * inv_v0 - 1.0 / s[i]);
      }
      break;
    }
    case Op::cat_logprob_: {
      const double g = gy[0];
      const int nl = slots_[size_t(n.in0)].len;
      const double* l = vptr(n.in0);
      double* gl = gptr(n.in0);
      const double lse = logsumexp(l, nl);
      for (int i = 0; i < nl; ++i) {
        const double p = std::exp(l[i] - lse);
        gl[i] += g * ((i == n.i0 ? 1.0 : 0.0) - p);
      }
      break;
    }
    case Op::cat_entropy_: {
      const double g = gy[0];
      const double hv = *vptr(n.out);
      const int nl = slots_[size_t(n.in0)].len;
      const double* l = vptr(n.in0);
      double* gl = gptr(n.in0);
      const double lse = logsumexp(l, nl);
      for (int i = 0; i < nl; ++i) {
        const double lp = l[i] - lse;
        gl[i] += -g * std::exp(lp) * (lp + hv);
      }
      break;
    }
    case Op::ppo_clip_: {
      const double g = gy[0];
      const double r = std::exp(*vptr(n.in0) - n.d0);
      const double rc = std::min(std::max(r, 1.0 - n.d2), 1.0 + n.d2);
      // gradient flows through the unclipped branch when it attains the min
      if (r * n.d1 <= rc * n.d1) *gptr(n.in0) += g * n.d1 * r;
      break;
    }
    case Op::value_clip_: {
      const double g = gy[0];
      const double vv = *vptr(n.in0);
      const double dv = vv - n.d0;
      const double dvc = std::min(std::max(dv, -n.d2), n.d2);
      const double e1 = vv - n.d1;
      const double e2 = n.d0 + dvc - n.d1;
      if (e1 * e1 >= e2 * e2) {
        *gptr(n.in0) += g * 2.0 * e1;
      } else if (dv > -n.d2 && dv < n.d2) {
        *gptr(n.in0) += g * 2.0 * e2;
      }
      break;
    }
  }
}

void Tape::clear() {
  slots_.clear();
  nodes_.clear();
  ext_.clear();
  gru_refs_.clear();
  used_ = 0;
  cused_ = 0;
}

}  // namespace meliba
