#include "meliba/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace meliba {

namespace {

constexpr char kMagic[8] = {'M', 'L', 'B', 'P', 'S', '0', '0', '1'};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_u64(std::FILE* f, uint64_t v) {
  if (std::fwrite(&v, sizeof(v), 1, f) != 1)
    throw std::runtime_error("param store: short write");
}

uint64_t read_u64(std::FILE* f) {
  uint64_t v = 0;
  if (std::fread(&v, sizeof(v), 1, f) != 1)
    throw std::runtime_error("param store: short read");
  return v;
}

}  // namespace

int ParamStore::add(std::string name, std::vector<int> shape) {
  if (index_.count(name))
    throw config_error("parameter already registered: " + name);
  int64_t n = 1;
  for (int d : shape) n *= d;
  ParamEntry e;
  e.name = std::move(name);
  e.shape = std::move(shape);
  e.values.assign(size_t(n), 0.0);
  e.grads.assign(size_t(n), 0.0);
  const int idx = int(entries_.size());
  index_.emplace(e.name, idx);
  entries_.push_back(std::move(e));
  return idx;
}

ParamEntry& ParamStore::at(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw config_error("unknown parameter: " + std::string(name));
  return entries_[size_t(it->second)];
}

const ParamEntry& ParamStore::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw config_error("unknown parameter: " + std::string(name));
  return entries_[size_t(it->second)];
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_)
    std::memset(e.grads.data(), 0, e.grads.size() * sizeof(double));
}

double ParamStore::grad_norm() const {
  double s = 0;
  for (const auto& e : entries_)
    for (double g : e.grads) s += g * g;
  return std::sqrt(s);
}

void ParamStore::save_to(std::FILE* f) const {
  if (std::fwrite(kMagic, 1, 8, f) != 8)
    throw std::runtime_error("param store: short write");
  write_u64(f, uint64_t(entries_.size()));
  for (const auto& e : entries_) {
    write_u64(f, uint64_t(e.name.size()));
    if (std::fwrite(e.name.data(), 1, e.name.size(), f) != e.name.size())
      throw std::runtime_error("param store: short write");
    write_u64(f, uint64_t(e.shape.size()));
    for (int d : e.shape) write_u64(f, uint64_t(d));
    if (!e.values.empty() &&
        std::fwrite(e.values.data(), sizeof(double), e.values.size(), f) !=
            e.values.size())
      throw std::runtime_error("param store: short write");
  }
  write_u64(f, step_count);
}

ParamStore ParamStore::load_from(std::FILE* f) {
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("param store: bad format tag");
  ParamStore ps;
  const uint64_t n = read_u64(f);
  for (uint64_t i = 0; i < n; ++i) {
    const uint64_t name_len = read_u64(f);
    std::string name(name_len, '\0');
    if (std::fread(name.data(), 1, name_len, f) != name_len)
      throw std::runtime_error("param store: short read");
    const uint64_t ndim = read_u64(f);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = int(read_u64(f));
    const int idx = ps.add(std::move(name), std::move(shape));
    auto& e = ps.at(idx);
    if (!e.values.empty() &&
        std::fread(e.values.data(), sizeof(double), e.values.size(), f) !=
            e.values.size())
      throw std::runtime_error("param store: short read");
  }
  ps.step_count = read_u64(f);
  return ps;
}

void ParamStore::save(const std::string& path) const {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  save_to(f.get());
}

ParamStore ParamStore::load(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  return load_from(f.get());
}

}  // namespace meliba
