#include "meliba/optim.hpp"

#include <cmath>

namespace meliba {

namespace {
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kRmsAlpha = 0.99;
constexpr double kRmsEps = 1e-5;

void write_blob(std::FILE* f, const std::vector<std::vector<double>>& v) {
  uint64_t n = v.size();
  std::fwrite(&n, sizeof(n), 1, f);
  for (const auto& a : v) {
    uint64_t m = a.size();
    std::fwrite(&m, sizeof(m), 1, f);
    if (m) std::fwrite(a.data(), sizeof(double), a.size(), f);
  }
}

void read_blob(std::FILE* f, std::vector<std::vector<double>>& v) {
  uint64_t n = 0;
  if (std::fread(&n, sizeof(n), 1, f) != 1)
    throw std::runtime_error("optimizer state: short read");
  v.assign(n, {});
  for (auto& a : v) {
    uint64_t m = 0;
    if (std::fread(&m, sizeof(m), 1, f) != 1)
      throw std::runtime_error("optimizer state: short read");
    a.resize(m);
    if (m && std::fread(a.data(), sizeof(double), m, f) != m)
      throw std::runtime_error("optimizer state: short read");
  }
}
}  // namespace

OptKind opt_kind_from_string(const std::string& s) {
  if (s == "adam") return OptKind::adam;
  if (s == "rmsprop") return OptKind::rmsprop;
  throw config_error("unknown optimizer kind: " + s);
}

std::string opt_kind_name(OptKind k) {
  return k == OptKind::adam ? "adam" : "rmsprop";
}

void Optimizer::ensure_moments(const ParamStore& ps) {
  if (int(m1_.size()) == ps.count()) return;
  m1_.clear();
  m2_.clear();
  for (const auto& e : ps.entries()) {
    m1_.emplace_back(size_t(e.size()), 0.0);
    m2_.emplace_back(size_t(e.size()), 0.0);
  }
}

void Optimizer::step(ParamStore& ps) {
  ensure_moments(ps);

  double norm_sq = 0;
  for (const auto& e : ps.entries()) {
    for (double g : e.grads) {
      if (!std::isfinite(g))
        throw numeric_error("non-finite gradient in parameter " + e.name);
      norm_sq += g * g;
    }
  }
  const double norm = std::sqrt(norm_sq);
  double clip = 1.0;
  if (max_grad_norm_ > 0.0 && norm > max_grad_norm_)
    clip = max_grad_norm_ / norm;

  ps.step_count += 1;
  const double t = double(ps.step_count);

  for (int i = 0; i < ps.count(); ++i) {
    auto& e = ps.at(i);
    double* v = e.values.data();
    double* g = e.grads.data();
    double* m1 = m1_[size_t(i)].data();
    const int64_t n = e.size();
    if (kind_ == OptKind::adam) {
      double* m2 = m2_[size_t(i)].data();
      const double c1 = 1.0 - std::pow(kAdamBeta1, t);
      const double c2 = 1.0 - std::pow(kAdamBeta2, t);
      for (int64_t j = 0; j < n; ++j) {
        const double gj = g[j] * clip;
        m1[j] = kAdamBeta1 * m1[j] + (1.0 - kAdamBeta1) * gj;
        m2[j] = kAdamBeta2 * m2[j] + (1.0 - kAdamBeta2) * gj * gj;
        const double mh = m1[j] / c1;
        const double vh = m2[j] / c2;
        v[j] -= lr_ * mh / (std::sqrt(vh) + kAdamEps);
      }
    } else {
      for (int64_t j = 0; j < n; ++j) {
        const double gj = g[j] * clip;
        m1[j] = kRmsAlpha * m1[j] + (1.0 - kRmsAlpha) * gj * gj;
        v[j] -= lr_ * gj / (std::sqrt(m1[j]) + kRmsEps);
      }
    }
  }
  ps.zero_grads();
}

void Optimizer::save(std::FILE* f) const {
  const uint8_t k = uint8_t(kind_);
  std::fwrite(&k, 1, 1, f);
  std::fwrite(&lr_, sizeof(lr_), 1, f);
  std::fwrite(&max_grad_norm_, sizeof(max_grad_norm_), 1, f);
  write_blob(f, m1_);
  write_blob(f, m2_);
}

void Optimizer::load(std::FILE* f) {
  uint8_t k = 0;
  if (std::fread(&k, 1, 1, f) != 1 ||
      std::fread(&lr_, sizeof(lr_), 1, f) != 1 ||
      std::fread(&max_grad_norm_, sizeof(max_grad_norm_), 1, f) != 1)
    throw std::runtime_error("optimizer state: short read");
  kind_ = OptKind(k);
  read_blob(f, m1_);
  read_blob(f, m2_);
}

}  // namespace meliba
