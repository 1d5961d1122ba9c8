#include "meliba/nn.hpp"

#include <cmath>

namespace meliba {

void init_uniform_fanin(ParamEntry& e, Rng& rng) {
  const int fan_in = e.cols();
  const double a = std::sqrt(3.0 / double(fan_in));
  for (auto& v : e.values) v = rng.uniform(-a, a);
}

// QR of a square gaussian matrix via Gram-Schmidt, signs fixed so the
// result is deterministic.
void init_orthogonal(ParamEntry& e, Rng& rng) {
  const int n = e.rows();
  if (e.cols() != n)
    throw config_error("orthogonal init requires a square matrix: " + e.name);
  std::vector<double> a(size_t(n) * n);
  for (auto& v : a) v = rng.normal();
  for (int i = 0; i < n; ++i) {
    double* row = a.data() + size_t(i) * n;
    for (int j = 0; j < i; ++j) {
      const double* prev = a.data() + size_t(j) * n;
      double d = 0;
      for (int k = 0; k < n; ++k) d += row[k] * prev[k];
      for (int k = 0; k < n; ++k) row[k] -= d * prev[k];
    }
    double norm = 0;
    for (int k = 0; k < n; ++k) norm += row[k] * row[k];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw numeric_error("orthogonal init: degenerate basis");
    const double s = (row[0] < 0 ? -1.0 : 1.0) / norm;
    for (int k = 0; k < n; ++k) row[k] *= s;
  }
  e.values = std::move(a);
}

void make_dense(ParamStore& ps, const std::string& name, int out, int in,
                Rng& rng) {
  init_uniform_fanin(ps.at(ps.add(name + ".w", {out, in})), rng);
  ps.add(name + ".b", {out});
}

void make_head(ParamStore& ps, const std::string& name, int out, int in) {
  ps.add(name + ".w", {out, in});
  ps.add(name + ".b", {out});
}

void make_gru(ParamStore& ps, const std::string& name, int hidden, int in,
              Rng& rng) {
  const char* wn[3] = {".wz", ".wr", ".wn"};
  const char* un[3] = {".uz", ".ur", ".un"};
  const char* bn[3] = {".bz", ".br", ".bn"};
  for (int g = 0; g < 3; ++g) {
    init_uniform_fanin(ps.at(ps.add(name + wn[g], {hidden, in})), rng);
    init_orthogonal(ps.at(ps.add(name + un[g], {hidden, hidden})), rng);
    ps.add(name + bn[g], {hidden});
  }
}

Var dense(Tape& t, ParamStore& ps, const std::string& name, Var x, Act act) {
  return t.affine(ps, name + ".w", name + ".b", x, act);
}

Var sigma_head(Tape& t, ParamStore& ps, const std::string& name, Var x) {
  return t.softplus_shift(t.affine(ps, name + ".w", name + ".b", x, Act::none),
                          kSigmaFloor);
}

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                           ParamStore& params, double eps, double tol,
                           int sample_cap, uint64_t sample_seed) {
  Tape tape;
  tape.clear();
  Var loss = loss_fn(tape);
  params.zero_grads();
  tape.backward(loss);

  // Snapshot tape gradients; the fd loop reuses the tape.
  std::vector<std::vector<double>> tape_grads;
  tape_grads.reserve(size_t(params.count()));
  for (const auto& e : params.entries()) tape_grads.push_back(e.grads);

  GradCheckReport rep;
  Rng pick(sample_seed);
  for (int pi = 0; pi < params.count(); ++pi) {
    auto& e = params.at(pi);
    const int64_t n = e.size();
    const int64_t budget =
        std::max<int64_t>(1, int64_t(sample_cap) / std::max(1, params.count()));
    for (int64_t s = 0; s < std::min(n, budget); ++s) {
      const int64_t i = (n <= budget) ? s : int64_t(pick.uniform_int(int(n)));
      const double saved = e.values[size_t(i)];
      e.values[size_t(i)] = saved + eps;
      tape.clear();
      const double up = tape.val(loss_fn(tape))[0];
      e.values[size_t(i)] = saved - eps;
      tape.clear();
      const double dn = tape.val(loss_fn(tape))[0];
      e.values[size_t(i)] = saved;
      const double fd = (up - dn) / (2.0 * eps);
      const double tg = tape_grads[size_t(pi)][size_t(i)];
      const double denom = std::max({std::fabs(fd), std::fabs(tg), 1e-6});
      const double rel = std::fabs(fd - tg) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = e.name;
        rep.worst_index = int(i);
      }
      if (rel > tol) {
        rep.failures.push_back(e.name + "[" + std::to_string(i) +
                               "]: fd=" + std::to_string(fd) +
                               " tape=" + std::to_string(tg));
      }
    }
  }
  // Restore tape gradients so callers can inspect them if they wish.
  for (int pi = 0; pi < params.count(); ++pi)
    params.at(pi).grads = tape_grads[size_t(pi)];
  return rep;
}

}  // namespace meliba
