#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "meliba/common.hpp"

namespace meliba {

struct ParamEntry {
  std::string name;
  std::vector<int> shape;        // row-major; [out, in] for matrices
  std::vector<double> values;
  std::vector<double> grads;     // same shape as values

  int64_t size() const { return int64_t(values.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

// Flat named collection of learnable arrays. Iteration order is the
// insertion order, which is fixed by model construction and therefore
// identical across runs.
class ParamStore {
 public:
  int add(std::string name, std::vector<int> shape);

  bool has(std::string_view name) const { return index_.count(name) > 0; }

  ParamEntry& at(std::string_view name);
  const ParamEntry& at(std::string_view name) const;
  ParamEntry& at(int idx) { return entries_[size_t(idx)]; }
  const ParamEntry& at(int idx) const { return entries_[size_t(idx)]; }

  int count() const { return int(entries_.size()); }
  std::span<ParamEntry> entries() { return entries_; }
  std::span<const ParamEntry> entries() const { return entries_; }

  int64_t total_size() const;
  void zero_grads();

  // Global L2 norm over all gradients.
  double grad_norm() const;

  uint64_t step_count = 0;

  // Versioned binary container: name -> shape -> row-major values.
  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);
  void save_to(std::FILE* f) const;
  static ParamStore load_from(std::FILE* f);

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, int, std::less<>> index_;
};

}  // namespace meliba
