#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "meliba/config.hpp"
#include "meliba/trainer.hpp"

namespace accept {

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

inline std::string cli_path() {
  return env_or("MELIBA_CLI", "build/tools/meliba");
}

inline std::string work_dir() {
  const std::string d = env_or("MELIBA_ACCEPT_DIR", "build/acceptance_runs");
  std::filesystem::create_directories(d);
  return d;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) return "";
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct RunSpec {
  std::string name;     // directory name under work_dir()
  std::string preset;   // --config value
  std::vector<std::string> overrides;

  std::string dir() const { return work_dir() + "/" + name; }
  meliba::RunConfig config() const {
    return meliba::load_config(preset, overrides);
  }
};

// A finished run is recognized by manifest status plus the config hash, so
// re-running the suite reuses completed training.
inline bool run_is_complete(const RunSpec& spec) {
  const std::string manifest = read_file(spec.dir() + "/manifest.json");
  if (manifest.find("\"status\": \"completed\"") == std::string::npos)
    return false;
  return manifest.find(meliba::config_hash(spec.config())) != std::string::npos;
}

inline pid_t spawn_training(const RunSpec& spec) {
  std::vector<std::string> args = {cli_path(), "train", "--config",
                                   spec.preset, "--out", spec.dir()};
  for (const auto& o : spec.overrides) {
    args.push_back("-O");
    args.push_back(o);
  }
  const bool partial = !meliba::latest_checkpoint_in(spec.dir()).empty();
  if (partial) args.push_back("--resume");
  const pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("fork failed");
  if (pid == 0) {
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    const std::string log = spec.dir() + ".log";
    if (!std::freopen(log.c_str(), "a", stdout)) _exit(126);
    if (!std::freopen(log.c_str(), "a", stderr)) _exit(126);
    execv(argv[0], argv.data());
    _exit(127);
  }
  return pid;
}

// Runs every spec that is not already complete, at most `parallel` at once.
// Returns false if any training exited non-zero.
inline bool ensure_runs(const std::vector<RunSpec>& specs, int parallel = 2) {
  std::vector<const RunSpec*> todo;
  for (const auto& s : specs) {
    if (run_is_complete(s)) {
      std::printf("[runs] reusing completed %s\n", s.name.c_str());
    } else {
      std::filesystem::create_directories(s.dir());
      todo.push_back(&s);
    }
  }
  std::fflush(stdout);
  bool ok = true;
  size_t next = 0;
  std::vector<std::pair<pid_t, const RunSpec*>> active;
  while (next < todo.size() || !active.empty()) {
    while (int(active.size()) < parallel && next < todo.size()) {
      const RunSpec* s = todo[next++];
      std::printf("[runs] training %s\n", s->name.c_str());
      std::fflush(stdout);
      active.emplace_back(spawn_training(*s), s);
    }
    int status = 0;
    const pid_t done = waitpid(-1, &status, 0);
    for (auto it = active.begin(); it != active.end(); ++it) {
      if (it->first != done) continue;
      const bool good = WIFEXITED(status) && WEXITSTATUS(status) == 0;
      std::printf("[runs] %s %s\n", it->second->name.c_str(),
                  good ? "finished" : "FAILED");
      std::fflush(stdout);
      if (!good) ok = false;
      active.erase(it);
      break;
    }
  }
  return ok;
}

inline std::string final_checkpoint(const RunSpec& spec) {
  const std::string c = meliba::latest_checkpoint_in(spec.dir());
  if (c.empty())
    throw std::runtime_error("no checkpoint under " + spec.dir());
  return c;
}

inline double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / double(v.size() - 1));
}

// 95% half-width over seeds, normal approximation.
inline double ci_half_width(const std::vector<double>& v) {
  return 1.96 * sample_sd(v) / std::sqrt(double(v.size()));
}

inline void report(const char* tag, bool pass, const std::string& detail) {
  std::printf("[%s] %s  %s\n", tag, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace accept
