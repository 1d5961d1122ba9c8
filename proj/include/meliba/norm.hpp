#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <vector>

namespace meliba {

// Running per-dimension normalizer for policy inputs (Welford moments).
// Statistics are frozen while a batch is collected and updated once after
// the PPO step, so rollout-time inputs and the update's recomputation see
// identical values. Normalized outputs are clipped to +-10.
class RunningNorm {
 public:
  RunningNorm() = default;
  explicit RunningNorm(int dim) { reset(dim); }

  void reset(int dim) {
    dim_ = dim;
    count_ = 0.0;
    mean_.assign(size_t(dim), 0.0);
    m2_.assign(size_t(dim), 0.0);
  }

  int dim() const { return dim_; }
  bool ready() const { return count_ > 1.0; }

  void update_row(std::span<const double> x) {
    count_ += 1.0;
    for (int i = 0; i < dim_; ++i) {
      const double d = x[size_t(i)] - mean_[size_t(i)];
      mean_[size_t(i)] += d / count_;
      m2_[size_t(i)] += d * (x[size_t(i)] - mean_[size_t(i)]);
    }
  }

  double mean(int i) const { return mean_[size_t(i)]; }
  double inv_std(int i) const {
    if (!ready()) return 1.0;
    const double var = m2_[size_t(i)] / count_;
    return 1.0 / std::sqrt(var + 1e-8);
  }

  void normalize(std::span<const double> x, std::span<double> out) const {
    for (int i = 0; i < dim_; ++i) {
      double v = ready() ? (x[size_t(i)] - mean_[size_t(i)]) * inv_std(i)
                         : x[size_t(i)];
      out[size_t(i)] = std::min(10.0, std::max(-10.0, v));
    }
  }

  std::vector<double> normalized(std::span<const double> x) const {
    std::vector<double> out(static_cast<size_t>(dim_));
    normalize(x, out);
    return out;
  }

  void save(std::FILE* f) const {
    const uint64_t d = uint64_t(dim_);
    std::fwrite(&d, sizeof d, 1, f);
    std::fwrite(&count_, sizeof count_, 1, f);
    if (dim_) {
      std::fwrite(mean_.data(), sizeof(double), mean_.size(), f);
      std::fwrite(m2_.data(), sizeof(double), m2_.size(), f);
    }
  }

  void load(std::FILE* f) {
    uint64_t d = 0;
    if (std::fread(&d, sizeof d, 1, f) != 1 ||
        std::fread(&count_, sizeof count_, 1, f) != 1)
      throw std::runtime_error("input norm: short read");
    dim_ = int(d);
    mean_.resize(size_t(dim_));
    m2_.resize(size_t(dim_));
    if (dim_) {
      if (std::fread(mean_.data(), sizeof(double), mean_.size(), f) !=
              mean_.size() ||
          std::fread(m2_.data(), sizeof(double), m2_.size(), f) != m2_.size())
        throw std::runtime_error("input norm: short read");
    }
  }

 private:
  int dim_ = 0;
  double count_ = 0.0;
  std::vector<double> mean_, m2_;
};

}  // namespace meliba
