#include "meliba/env.hpp"

#include <algorithm>
#include <cstring>

namespace meliba {

EnvKind env_kind_from_string(const std::string& s) {
  if (s == "chicken") return EnvKind::chicken;
  if (s == "treasure") return EnvKind::treasure;
  throw config_error("unknown environment: " + s);
}

std::string env_kind_name(EnvKind k) {
  return k == EnvKind::chicken ? "chicken" : "treasure";
}

void EnvConfig::validate() const {
  if (horizon < 1) throw config_error("env.horizon must be >= 1");
  if (kind == EnvKind::treasure) {
    if (grid < 2 || grid > kMaxGrid)
      throw config_error("env.grid must be in [2, " +
                         std::to_string(kMaxGrid) + "]");
    if (coins_per_color < 1 || coins_per_color * kNumColors > kMaxCoins)
      throw config_error("env.coins_per_color must be in [1, " +
                         std::to_string(kMaxCoins / kNumColors) + "]");
    const int entities = 2 + kNumColors + coins_per_color * kNumColors;
    if (grid * grid < entities)
      throw config_error("grid too small to place " +
                         std::to_string(entities) + " entities");
  }
}

namespace {

struct Cell {
  int8_t row, col;
};

bool occupied(const TreasureState& th, int row, int col) {
  for (int a = 0; a < 2; ++a)
    if (th.agent_row[a] == row && th.agent_col[a] == col) return true;
  for (int c = 0; c < kNumColors; ++c)
    if (th.bank_row[c] == row && th.bank_col[c] == col) return true;
  for (int i = 0; i < th.n_coins; ++i)
    if (th.coins[i].row == row && th.coins[i].col == col) return true;
  return false;
}

// Uniform draw over currently empty cells, row-major enumeration.
Cell draw_empty_cell(const TreasureState& th, Rng& rng) {
  int n_empty = 0;
  for (int r = 0; r < th.grid; ++r)
    for (int c = 0; c < th.grid; ++c)
      if (!occupied(th, r, c)) ++n_empty;
  if (n_empty == 0) throw protocol_error("treasure: no empty cell to respawn");
  int k = rng.uniform_int(n_empty);
  for (int r = 0; r < th.grid; ++r)
    for (int c = 0; c < th.grid; ++c) {
      if (occupied(th, r, c)) continue;
      if (k-- == 0) return {int8_t(r), int8_t(c)};
    }
  throw protocol_error("treasure: respawn enumeration failed");
}

void apply_move(int action, int& row, int& col) {
  switch (action) {
    case kLeft: col -= 1; break;
    case kRight: col += 1; break;
    case kUp: row -= 1; break;
    case kDown: row += 1; break;
    default: break;
  }
}

int coin_at(const TreasureState& th, int row, int col) {
  for (int i = 0; i < th.n_coins; ++i)
    if (th.coins[i].row == row && th.coins[i].col == col) return i;
  return -1;
}

int bank_at(const TreasureState& th, int row, int col) {
  for (int c = 0; c < kNumColors; ++c)
    if (th.bank_row[c] == row && th.bank_col[c] == col) return c;
  return -1;
}

}  // namespace

int coins_on_grid(const TreasureState& th, int color) {
  int n = 0;
  for (int i = 0; i < th.n_coins; ++i)
    if (th.coins[i].color == color) ++n;
  return n;
}

EnvState env_reset(const EnvConfig& cfg, Rng& rng) {
  cfg.validate();
  EnvState s;
  s.kind = cfg.kind;
  s.t = 0;
  s.horizon = int16_t(cfg.horizon);
  if (cfg.kind == EnvKind::treasure) {
    TreasureState& th = s.th;
    th.grid = int8_t(cfg.grid);
    const int cells = cfg.grid * cfg.grid;
    const int entities = 2 + kNumColors + cfg.coins_per_color * kNumColors;
    // Partial Fisher-Yates over cell indices: first `entities` slots.
    std::vector<int> idx(static_cast<size_t>(cells));
    for (int i = 0; i < cells; ++i) idx[size_t(i)] = i;
    for (int i = 0; i < entities; ++i) {
      const int j = i + rng.uniform_int(cells - i);
      std::swap(idx[size_t(i)], idx[size_t(j)]);
    }
    int next = 0;
    auto take = [&](int8_t& row, int8_t& col) {
      row = int8_t(idx[size_t(next)] / cfg.grid);
      col = int8_t(idx[size_t(next)] % cfg.grid);
      ++next;
    };
    for (int a = 0; a < 2; ++a) take(th.agent_row[a], th.agent_col[a]);
    for (int c = 0; c < kNumColors; ++c) take(th.bank_row[c], th.bank_col[c]);
    th.n_coins = 0;
    for (int c = 0; c < kNumColors; ++c)
      for (int k = 0; k < cfg.coins_per_color; ++k) {
        Coin& coin = th.coins[th.n_coins++];
        take(coin.row, coin.col);
        coin.color = int8_t(c);
      }
  }
  return s;
}

StepOutcome env_step(const EnvConfig& cfg, const EnvState& state,
                     JointAction joint, Rng& rng) {
  if (state.t >= state.horizon)
    throw protocol_error("env_step on a terminal state (t = " +
                         std::to_string(state.t) + ")");
  StepOutcome out;
  out.next = state;
  out.next.t = int16_t(state.t + 1);
  out.done = out.next.t == state.horizon;

  if (cfg.kind == EnvKind::chicken) {
    const int a = joint.our_action, o = joint.opponent_action;
    if (a < 0 || a > 1 || o < 0 || o > 1)
      throw protocol_error("chicken: invalid action id");
    out.rewards[0] = kChickenPayoff[a][o][0];
    out.rewards[1] = kChickenPayoff[a][o][1];
    return out;
  }

  TreasureState& th = out.next.th;
  const int actions[2] = {joint.our_action, joint.opponent_action};
  for (int a = 0; a < 2; ++a)
    if (actions[a] < 0 || actions[a] >= 5)
      throw protocol_error("treasure: invalid action id");

  // Propose targets; walls nullify the move.
  int trow[2], tcol[2];
  for (int a = 0; a < 2; ++a) {
    trow[a] = th.agent_row[a];
    tcol[a] = th.agent_col[a];
    int nr = trow[a], nc = tcol[a];
    apply_move(actions[a], nr, nc);
    if (nr < 0 || nr >= th.grid || nc < 0 || nc >= th.grid) {
      out.events[a].blocked = true;
    } else {
      trow[a] = nr;
      tcol[a] = nc;
    }
  }

  const bool moved[2] = {
      trow[0] != th.agent_row[0] || tcol[0] != th.agent_col[0],
      trow[1] != th.agent_row[1] || tcol[1] != th.agent_col[1]};

  // Agent-agent conflicts. Targeting the same cell (including bumping a
  // stationary agent) or swapping blocks the movers and costs both agents
  // the collision penalty. Moving onto a cell the other agent vacates this
  // step blocks and penalizes only the bumper.
  bool hit[2] = {false, false};
  bool penalized[2] = {false, false};
  if ((moved[0] || moved[1]) && trow[0] == trow[1] && tcol[0] == tcol[1]) {
    for (int a = 0; a < 2; ++a) {
      hit[a] = moved[a];
      penalized[a] = true;
    }
  } else if (moved[0] && moved[1] && trow[0] == th.agent_row[1] &&
             tcol[0] == th.agent_col[1] && trow[1] == th.agent_row[0] &&
             tcol[1] == th.agent_col[0]) {
    hit[0] = hit[1] = penalized[0] = penalized[1] = true;
  } else {
    for (int a = 0; a < 2; ++a) {
      const int other = 1 - a;
      if (moved[a] && trow[a] == th.agent_row[other] &&
          tcol[a] == th.agent_col[other]) {
        hit[a] = true;
        penalized[a] = true;
      }
    }
  }
  for (int a = 0; a < 2; ++a) {
    if (penalized[a]) {
      out.rewards[a] += kCollidePenalty;
      out.events[a].collided = true;
    }
    if (hit[a]) out.events[a].blocked = true;
  }
  const bool executed[2] = {moved[0] && !hit[0], moved[1] && !hit[1]};
  for (int a = 0; a < 2; ++a) {
    if (executed[a]) {
      th.agent_row[a] = int8_t(trow[a]);
      th.agent_col[a] = int8_t(tcol[a]);
    }
  }

  // Pickups: entering a coin cell while empty-handed.
  for (int a = 0; a < 2; ++a) {
    if (!executed[a] || th.carried[a] != kNotCarrying) continue;
    const int ci = coin_at(th, th.agent_row[a], th.agent_col[a]);
    if (ci < 0) continue;
    th.carried[a] = th.coins[ci].color;
    th.coins[ci] = th.coins[--th.n_coins];
    out.rewards[a] += kPickupReward;
    out.events[a].picked_up = true;
  }

  // Dropoffs: entering a bank cell while carrying. The coin respawns at a
  // fresh empty cell in the same step (agent 0 resolved first).
  for (int a = 0; a < 2; ++a) {
    if (!executed[a] || th.carried[a] == kNotCarrying) continue;
    const int bank = bank_at(th, th.agent_row[a], th.agent_col[a]);
    if (bank < 0) continue;
    const int color = th.carried[a];
    th.carried[a] = kNotCarrying;
    if (bank == color) {
      out.rewards[a] += kCorrectDropReward;
      out.events[a].dropped_correct = true;
    } else {
      out.rewards[a] += kWrongDropPenalty;
      out.events[a].dropped_wrong = true;
    }
    const Cell cell = draw_empty_cell(th, rng);
    Coin& coin = th.coins[th.n_coins++];
    coin.row = cell.row;
    coin.col = cell.col;
    coin.color = int8_t(color);
  }
  return out;
}

int obs_dim(const EnvConfig& cfg) {
  if (cfg.kind == EnvKind::chicken) return 1;
  const int g2 = cfg.grid * cfg.grid;
  // 2 agent planes + per-color coin planes + per-color bank planes,
  // carried one-hots (none/color0/color1) for both agents, and t/H.
  return (2 + 2 * kNumColors) * g2 + 2 * (1 + kNumColors) + 1;
}

void observe(const EnvConfig& cfg, const EnvState& state,
             std::span<double> out) {
  const int n = obs_dim(cfg);
  if (int(out.size()) != n)
    throw protocol_error("observe: output span has wrong length");
  std::memset(out.data(), 0, size_t(n) * sizeof(double));
  if (cfg.kind == EnvKind::chicken) {
    out[0] = cfg.chicken_time_obs ? double(state.t) / double(state.horizon)
                                  : 0.0;
    return;
  }
  const TreasureState& th = state.th;
  const int g = th.grid;
  const int g2 = g * g;
  auto plane = [&](int p) { return out.data() + p * g2; };
  for (int a = 0; a < 2; ++a)
    plane(a)[th.agent_row[a] * g + th.agent_col[a]] = 1.0;
  for (int i = 0; i < th.n_coins; ++i)
    plane(2 + th.coins[i].color)[th.coins[i].row * g + th.coins[i].col] = 1.0;
  for (int c = 0; c < kNumColors; ++c)
    plane(2 + kNumColors + c)[th.bank_row[c] * g + th.bank_col[c]] = 1.0;
  int off = (2 + 2 * kNumColors) * g2;
  for (int a = 0; a < 2; ++a) {
    const int slot = th.carried[a] == kNotCarrying ? 0 : 1 + th.carried[a];
    out[size_t(off + slot)] = 1.0;
    off += 1 + kNumColors;
  }
  out[size_t(off)] = double(state.t) / double(state.horizon);
}

}  // namespace meliba
