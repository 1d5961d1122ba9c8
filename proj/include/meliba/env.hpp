#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "meliba/common.hpp"
#include "meliba/rng.hpp"

namespace meliba {

enum class EnvKind : uint8_t { chicken, treasure };

EnvKind env_kind_from_string(const std::string& s);
std::string env_kind_name(EnvKind k);

struct EnvConfig {
  EnvKind kind = EnvKind::chicken;
  int horizon = 13;
  // treasure only
  int grid = 10;
  int coins_per_color = 3;
  // chicken only: expose t/H as the observation (else a constant zero)
  bool chicken_time_obs = true;

  int num_actions() const { return kind == EnvKind::chicken ? 2 : 5; }
  void validate() const;
};

// Chicken actions
inline constexpr int kSwerve = 0;
inline constexpr int kStraight = 1;

// Treasure actions
inline constexpr int kNoop = 0;
inline constexpr int kLeft = 1;
inline constexpr int kRight = 2;
inline constexpr int kUp = 3;
inline constexpr int kDown = 4;

inline constexpr int kNumColors = 2;
inline constexpr int kMaxCoins = 8;
inline constexpr int kMaxGrid = 16;
inline constexpr int kNotCarrying = -1;

struct Coin {
  int8_t row = 0, col = 0;
  int8_t color = 0;
};

// Fixed-capacity treasure payload so states stay POD-packable for the
// trajectory buffer and checkpoints.
struct TreasureState {
  int8_t grid = 0;
  int8_t agent_row[2] = {0, 0}, agent_col[2] = {0, 0};
  int8_t bank_row[kNumColors] = {0, 0}, bank_col[kNumColors] = {0, 0};
  int8_t carried[2] = {kNotCarrying, kNotCarrying};
  Coin coins[kMaxCoins];  // on-grid coins only
  int8_t n_coins = 0;
};

struct EnvState {
  EnvKind kind = EnvKind::chicken;
  int16_t t = 0;
  int16_t horizon = 0;
  TreasureState th;
};

struct JointAction {
  int our_action = 0;
  int opponent_action = 0;
};

struct AgentEvents {
  bool picked_up = false;
  bool dropped_correct = false;
  bool dropped_wrong = false;
  bool collided = false;
  bool blocked = false;
};

struct StepOutcome {
  EnvState next;
  std::array<double, 2> rewards{0.0, 0.0};
  bool done = false;
  AgentEvents events[2];
};

EnvState env_reset(const EnvConfig& cfg, Rng& rng);
StepOutcome env_step(const EnvConfig& cfg, const EnvState& state,
                     JointAction joint, Rng& rng);

int obs_dim(const EnvConfig& cfg);
void observe(const EnvConfig& cfg, const EnvState& state,
             std::span<double> out);

// Chicken payoff cells, (our reward, opponent reward) indexed by
// [our_action][opponent_action].
inline constexpr double kChickenPayoff[2][2][2] = {
    {{1.0, 1.0}, {0.0, 8.0}},
    {{8.0, 0.0}, {-1.0, -1.0}},
};

// Treasure rewards
inline constexpr double kCollidePenalty = -0.1;
inline constexpr double kPickupReward = 0.1;
inline constexpr double kCorrectDropReward = 1.0;
inline constexpr double kWrongDropPenalty = -1.0;

// Number of coins of the given color currently on the grid.
int coins_on_grid(const TreasureState& th, int color);

}  // namespace meliba
