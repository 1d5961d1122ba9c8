#pragma once

#include <string>
#include <vector>

#include "meliba/env.hpp"
#include "meliba/rng.hpp"

namespace meliba {

enum class OpponentKind : uint8_t {
  t4t1 = 0,
  t4t2 = 1,
  t4t3 = 2,
  color_pref_0 = 3,
  color_pref_1 = 4,
  alternator = 5,
};

std::string opponent_kind_name(OpponentKind k);
OpponentKind opponent_kind_from_string(const std::string& s);

// Scripted opponent with per-episode memory. T4T-k swerves exactly when our
// last k actions were all swerves; with fewer than k observed actions the
// condition is unsatisfied and it goes straight. Gridworld opponents walk
// the shortest path to their current errand (preferred-color coin, or the
// carried coin's bank), stepping with preference order up, down, left,
// right, and wait when no coin of their color is on the grid.
struct OpponentPolicy {
  OpponentKind kind = OpponentKind::t4t1;
  int t4t_counter = 0;
  int alternator_target = 0;

  void reset();
  int act(const EnvConfig& cfg, const EnvState& state) const;
  // Called after each environment step with our action and the opponent's
  // step events; updates the kind-specific memory.
  void update(int our_action, const AgentEvents& own_events);

  int t4t_k() const;
};

struct OpponentPrior {
  std::vector<OpponentKind> support;
  std::vector<double> weights;

  void validate() const;
  static OpponentPrior uniform(std::vector<OpponentKind> kinds);
  // Default priors: chicken -> uniform {T4T-1, T4T-2, T4T-3};
  // treasure -> uniform {prefer-0, prefer-1, alternator}.
  static OpponentPrior defaults_for(EnvKind kind);
};

OpponentPolicy sample_opponent(const OpponentPrior& prior, Rng& rng);
OpponentPolicy reset_opponent(OpponentPolicy policy);

}  // namespace meliba
