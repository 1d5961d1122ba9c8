#include "meliba/opponents.hpp"

#include <cmath>
#include <cstdlib>

namespace meliba {

std::string opponent_kind_name(OpponentKind k) {
  switch (k) {
    case OpponentKind::t4t1: return "t4t1";
    case OpponentKind::t4t2: return "t4t2";
    case OpponentKind::t4t3: return "t4t3";
    case OpponentKind::color_pref_0: return "prefer0";
    case OpponentKind::color_pref_1: return "prefer1";
    case OpponentKind::alternator: return "alternator";
  }
  return "unknown";
}

OpponentKind opponent_kind_from_string(const std::string& s) {
  for (int k = 0; k <= int(OpponentKind::alternator); ++k)
    if (opponent_kind_name(OpponentKind(k)) == s) return OpponentKind(k);
  throw config_error("unknown opponent kind: " + s);
}

int OpponentPolicy::t4t_k() const {
  switch (kind) {
    case OpponentKind::t4t1: return 1;
    case OpponentKind::t4t2: return 2;
    case OpponentKind::t4t3: return 3;
    default: return 0;
  }
}

void OpponentPolicy::reset() {
  t4t_counter = 0;
  alternator_target = 0;
}

namespace {

int manhattan(int r0, int c0, int r1, int c1) {
  return std::abs(r0 - r1) + std::abs(c0 - c1);
}

// Shortest-path step toward (dr, dc) with first-step ties broken in the
// order up, down, left, right. While carrying, the wrong-color bank cell is
// treated as an obstacle (entering it would drop the coin there); the
// detour is a true shortest path around it. Other entities are walked over.
int step_toward(const TreasureState& th, int dr, int dc) {
  const int me = 1;  // the opponent is agent index 1
  const int r = th.agent_row[me], c = th.agent_col[me];
  const int carried = th.carried[me];
  const int g = th.grid;
  if (r == dr && c == dc) return kNoop;

  auto is_wrong_bank = [&](int nr, int nc) {
    if (carried == kNotCarrying) return false;
    for (int b = 0; b < kNumColors; ++b)
      if (b != carried && th.bank_row[b] == nr && th.bank_col[b] == nc)
        return true;
    return false;
  };

  // BFS distances from the destination.
  int dist[kMaxGrid * kMaxGrid];
  for (int i = 0; i < g * g; ++i) dist[i] = -1;
  int queue[kMaxGrid * kMaxGrid];
  int head = 0, tail = 0;
  dist[dr * g + dc] = 0;
  queue[tail++] = dr * g + dc;
  const int d_row[4] = {-1, 1, 0, 0};
  const int d_col[4] = {0, 0, -1, 1};
  while (head < tail) {
    const int cur = queue[head++];
    const int cr = cur / g, cc = cur % g;
    for (int m = 0; m < 4; ++m) {
      const int nr = cr + d_row[m], nc = cc + d_col[m];
      if (nr < 0 || nr >= g || nc < 0 || nc >= g) continue;
      if (dist[nr * g + nc] >= 0 || is_wrong_bank(nr, nc)) continue;
      dist[nr * g + nc] = dist[cur] + 1;
      queue[tail++] = nr * g + nc;
    }
  }
  if (dist[r * g + c] < 0) return kNoop;  // boxed in; wait

  const int moves[4] = {kUp, kDown, kLeft, kRight};
  const int m_row[4] = {-1, 1, 0, 0};
  const int m_col[4] = {0, 0, -1, 1};
  for (int m = 0; m < 4; ++m) {
    const int nr = r + m_row[m], nc = c + m_col[m];
    if (nr < 0 || nr >= g || nc < 0 || nc >= g) continue;
    if (is_wrong_bank(nr, nc)) continue;
    if (dist[nr * g + nc] == dist[r * g + c] - 1) return moves[m];
  }
  return kNoop;
}

int treasure_act(const TreasureState& th, int target_color) {
  const int me = 1;
  const int carried = th.carried[me];
  if (carried != kNotCarrying) {
    return step_toward(th, th.bank_row[carried], th.bank_col[carried]);
  }
  // nearest coin of the target color; ties by lowest (row, col)
  int best = -1, best_d = 0;
  for (int i = 0; i < th.n_coins; ++i) {
    if (th.coins[i].color != target_color) continue;
    const int d = manhattan(th.agent_row[me], th.agent_col[me], th.coins[i].row,
                            th.coins[i].col);
    if (best < 0 || d < best_d ||
        (d == best_d && (th.coins[i].row < th.coins[best].row ||
                         (th.coins[i].row == th.coins[best].row &&
                          th.coins[i].col < th.coins[best].col)))) {
      best = i;
      best_d = d;
    }
  }
  if (best < 0) return kNoop;  // nothing of our color: wait
  return step_toward(th, th.coins[best].row, th.coins[best].col);
}

}  // namespace

int OpponentPolicy::act(const EnvConfig& cfg, const EnvState& state) const {
  (void)cfg;
  switch (kind) {
    case OpponentKind::t4t1:
    case OpponentKind::t4t2:
    case OpponentKind::t4t3:
      return t4t_counter >= t4t_k() ? kSwerve : kStraight;
    case OpponentKind::color_pref_0:
      return treasure_act(state.th, 0);
    case OpponentKind::color_pref_1:
      return treasure_act(state.th, 1);
    case OpponentKind::alternator:
      return treasure_act(state.th, alternator_target);
  }
  return 0;
}

void OpponentPolicy::update(int our_action, const AgentEvents& own_events) {
  switch (kind) {
    case OpponentKind::t4t1:
    case OpponentKind::t4t2:
    case OpponentKind::t4t3:
      t4t_counter =
          our_action == kSwerve ? std::min(t4t_counter + 1, t4t_k()) : 0;
      break;
    case OpponentKind::alternator:
      if (own_events.dropped_correct) alternator_target = 1 - alternator_target;
      break;
    default:
      break;
  }
}

void OpponentPrior::validate() const {
  if (support.empty()) throw config_error("opponent prior: empty support");
  if (support.size() != weights.size())
    throw config_error("opponent prior: support/weight size mismatch");
  double s = 0;
  for (double w : weights) {
    if (w < 0) throw config_error("opponent prior: negative weight");
    s += w;
  }
  if (std::fabs(s - 1.0) > 1e-12)
    throw config_error("opponent prior: weights sum to " + std::to_string(s));
}

OpponentPrior OpponentPrior::uniform(std::vector<OpponentKind> kinds) {
  OpponentPrior p;
  p.support = std::move(kinds);
  p.weights.assign(p.support.size(), 1.0 / double(p.support.size()));
  return p;
}

OpponentPrior OpponentPrior::defaults_for(EnvKind kind) {
  if (kind == EnvKind::chicken)
    return uniform(
        {OpponentKind::t4t1, OpponentKind::t4t2, OpponentKind::t4t3});
  return uniform({OpponentKind::color_pref_0, OpponentKind::color_pref_1,
                  OpponentKind::alternator});
}

OpponentPolicy sample_opponent(const OpponentPrior& prior, Rng& rng) {
  prior.validate();
  const double u = rng.uniform01();
  double acc = 0;
  size_t pick = prior.support.size() - 1;
  for (size_t i = 0; i < prior.support.size(); ++i) {
    acc += prior.weights[i];
    if (u < acc) {
      pick = i;
      break;
    }
  }
  OpponentPolicy p;
  p.kind = prior.support[pick];
  p.reset();
  return p;
}

OpponentPolicy reset_opponent(OpponentPolicy policy) {
  policy.reset();
  return policy;
}

}  // namespace meliba
