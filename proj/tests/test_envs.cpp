#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "meliba/env.hpp"

using namespace meliba;

namespace {

EnvConfig chicken_cfg(int horizon = 13) {
  EnvConfig c;
  c.kind = EnvKind::chicken;
  c.horizon = horizon;
  return c;
}

EnvConfig treasure_cfg(int grid = 10, int horizon = 100) {
  EnvConfig c;
  c.kind = EnvKind::treasure;
  c.grid = grid;
  c.horizon = horizon;
  return c;
}

int total_coins(const EnvState& s) {
  int n = s.th.n_coins;
  for (int a = 0; a < 2; ++a)
    if (s.th.carried[a] != kNotCarrying) ++n;
  return n;
}

}  // namespace

TEST_CASE("chicken reset and payoff table") {
  EnvConfig cfg = chicken_cfg();
  Rng rng(1);
  EnvState s = env_reset(cfg, rng);
  CHECK(s.t == 0);
  CHECK(s.horizon == 13);

  auto r = [&](int a, int o) {
    Rng r2(0);
    return env_step(cfg, s, {a, o}, r2).rewards;
  };
  CHECK(r(kSwerve, kSwerve) == std::array<double, 2>{1, 1});
  CHECK(r(kSwerve, kStraight) == std::array<double, 2>{0, 8});
  CHECK(r(kStraight, kSwerve) == std::array<double, 2>{8, 0});
  CHECK(r(kStraight, kStraight) == std::array<double, 2>{-1, -1});
}

TEST_CASE("chicken observation is normalized time") {
  EnvConfig cfg = chicken_cfg(13);
  Rng rng(1);
  EnvState s = env_reset(cfg, rng);
  std::vector<double> obs(static_cast<size_t>(obs_dim(cfg)));
  observe(cfg, s, obs);
  CHECK(obs[0] == 0.0);
  for (int t = 0; t < 13; ++t) s = env_step(cfg, s, {0, 0}, rng).next;
  observe(cfg, s, obs);
  CHECK(obs[0] == 1.0);

  cfg.chicken_time_obs = false;
  observe(cfg, s, obs);
  CHECK(obs[0] == 0.0);
}

TEST_CASE("chicken rewards always form a payoff cell") {
  EnvConfig cfg = chicken_cfg();
  Rng rng(7);
  EnvState s = env_reset(cfg, rng);
  for (int t = 0; t < 13; ++t) {
    const int a = rng.uniform_int(2), o = rng.uniform_int(2);
    StepOutcome out = env_step(cfg, s, {a, o}, rng);
    bool matched = false;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        if (out.rewards[0] == kChickenPayoff[i][j][0] &&
            out.rewards[1] == kChickenPayoff[i][j][1])
          matched = true;
    CHECK(matched);
    CHECK((out.done == (out.next.t == 13)));
    s = out.next;
  }
  CHECK_THROWS_AS(env_step(cfg, s, {0, 0}, rng), protocol_error);
}

TEST_CASE("treasure reset places distinct in-bounds entities") {
  EnvConfig cfg = treasure_cfg(10, 100);
  Rng rng(5);
  EnvState s = env_reset(cfg, rng);
  std::set<std::pair<int, int>> cells;
  auto add = [&](int r, int c) {
    CHECK(r >= 0);
    CHECK(r < 10);
    CHECK(c >= 0);
    CHECK(c < 10);
    CHECK(!cells.count({r, c}));
    cells.insert({r, c});
  };
  for (int a = 0; a < 2; ++a) add(s.th.agent_row[a], s.th.agent_col[a]);
  for (int b = 0; b < kNumColors; ++b) add(s.th.bank_row[b], s.th.bank_col[b]);
  for (int i = 0; i < s.th.n_coins; ++i) add(s.th.coins[i].row, s.th.coins[i].col);
  CHECK(s.th.n_coins == 6);
  CHECK(coins_on_grid(s.th, 0) == 3);
  CHECK(coins_on_grid(s.th, 1) == 3);

  SUBCASE("same seed reproduces the same initial state") {
    Rng r1(42), r2(42);
    EnvState a = env_reset(cfg, r1), b = env_reset(cfg, r2);
    CHECK(a.th.agent_row[0] == b.th.agent_row[0]);
    CHECK(a.th.agent_col[1] == b.th.agent_col[1]);
    for (int i = 0; i < a.th.n_coins; ++i) {
      CHECK(a.th.coins[i].row == b.th.coins[i].row);
      CHECK(a.th.coins[i].col == b.th.coins[i].col);
    }
  }

  SUBCASE("grid too small is a configuration error") {
    EnvConfig small = treasure_cfg(3, 10);
    small.coins_per_color = 4;  // 2 + 2 + 8 = 12 > 9 cells
    Rng r3(1);
    CHECK_THROWS_AS(env_reset(small, r3), config_error);
  }
}

TEST_CASE("treasure pickup, dropoff and respawn") {
  EnvConfig cfg = treasure_cfg(6, 50);
  Rng rng(3);
  EnvState s = env_reset(cfg, rng);
  // Hand-place a deterministic scene.
  TreasureState& th = s.th;
  th.grid = 6;
  th.agent_row[0] = 2; th.agent_col[0] = 2;
  th.agent_row[1] = 5; th.agent_col[1] = 5;
  th.bank_row[0] = 0; th.bank_col[0] = 0;
  th.bank_row[1] = 5; th.bank_col[1] = 0;
  th.n_coins = 6;
  const int8_t coin_pos[6][2] = {{2, 3}, {1, 1}, {4, 4}, {3, 3}, {0, 4}, {4, 0}};
  for (int i = 0; i < 6; ++i) {
    th.coins[i].row = coin_pos[i][0];
    th.coins[i].col = coin_pos[i][1];
    th.coins[i].color = int8_t(i < 3 ? 0 : 1);
  }
  th.carried[0] = kNotCarrying;
  th.carried[1] = kNotCarrying;

  SUBCASE("stepping onto a coin while empty-handed picks it up for +0.1") {
    StepOutcome out = env_step(cfg, s, {kRight, kNoop}, rng);
    CHECK(out.rewards[0] == doctest::Approx(0.1));
    CHECK(out.events[0].picked_up);
    CHECK(out.next.th.carried[0] == 0);
    CHECK(out.next.th.n_coins == 5);
    CHECK(total_coins(out.next) == 6);
  }

  SUBCASE("wrong-bank dropoff costs -1 and respawns the coin") {
    s.th.carried[0] = 0;
    s.th.agent_row[0] = 4; s.th.agent_col[0] = 0;  // below bank 1 at (5,0)
    StepOutcome out = env_step(cfg, s, {kDown, kNoop}, rng);
    CHECK(out.rewards[0] == doctest::Approx(-1.0));
    CHECK(out.events[0].dropped_wrong);
    CHECK(out.next.th.carried[0] == kNotCarrying);
    CHECK(total_coins(out.next) == 7);  // scene started with 6 on grid + 1 carried
  }

  SUBCASE("correct-bank dropoff pays +1") {
    s.th.carried[0] = 0;
    s.th.agent_row[0] = 1; s.th.agent_col[0] = 0;
    StepOutcome out = env_step(cfg, s, {kUp, kNoop}, rng);
    CHECK(out.rewards[0] == doctest::Approx(1.0));
    CHECK(out.events[0].dropped_correct);
  }

  SUBCASE("walls block movement without penalty") {
    s.th.agent_row[0] = 0; s.th.agent_col[0] = 2;
    StepOutcome out = env_step(cfg, s, {kUp, kNoop}, rng);
    CHECK(out.rewards[0] == 0.0);
    CHECK(out.events[0].blocked);
    CHECK(out.next.th.agent_row[0] == 0);
  }

  SUBCASE("both agents targeting one cell collide and stay") {
    s.th.agent_row[0] = 3; s.th.agent_col[0] = 0;
    s.th.agent_row[1] = 3; s.th.agent_col[1] = 2;
    StepOutcome out = env_step(cfg, s, {kRight, kLeft}, rng);
    CHECK(out.rewards[0] == doctest::Approx(-0.1));
    CHECK(out.rewards[1] == doctest::Approx(-0.1));
    CHECK(out.next.th.agent_col[0] == 0);
    CHECK(out.next.th.agent_col[1] == 2);
    CHECK(out.events[0].collided);
    CHECK(out.events[1].collided);
  }

  SUBCASE("swap attempts collide") {
    s.th.agent_row[0] = 3; s.th.agent_col[0] = 0;
    s.th.agent_row[1] = 3; s.th.agent_col[1] = 1;
    StepOutcome out = env_step(cfg, s, {kRight, kLeft}, rng);
    CHECK(out.rewards[0] == doctest::Approx(-0.1));
    CHECK(out.next.th.agent_col[0] == 0);
    CHECK(out.next.th.agent_col[1] == 1);
  }

  SUBCASE("bumping a stationary agent penalizes both, mover blocked") {
    s.th.agent_row[0] = 3; s.th.agent_col[0] = 0;
    s.th.agent_row[1] = 3; s.th.agent_col[1] = 1;
    StepOutcome out = env_step(cfg, s, {kRight, kNoop}, rng);
    CHECK(out.rewards[0] == doctest::Approx(-0.1));
    CHECK(out.rewards[1] == doctest::Approx(-0.1));
    CHECK(out.next.th.agent_col[0] == 0);
  }
}

TEST_CASE("treasure coin count is conserved and moves are single-cell") {
  EnvConfig cfg = treasure_cfg(7, 60);
  Rng rng(11);
  EnvState s = env_reset(cfg, rng);
  Rng act_rng(13);
  for (int t = 0; t < 60; ++t) {
    const EnvState prev = s;
    StepOutcome out =
        env_step(cfg, s, {act_rng.uniform_int(5), act_rng.uniform_int(5)}, rng);
    CHECK(total_coins(out.next) == 2 * cfg.coins_per_color);
    for (int a = 0; a < 2; ++a) {
      const int dr = std::abs(out.next.th.agent_row[a] - prev.th.agent_row[a]);
      const int dc = std::abs(out.next.th.agent_col[a] - prev.th.agent_col[a]);
      CHECK(dr + dc <= 1);
    }
    s = out.next;
  }
  CHECK(s.t == 60);
}

TEST_CASE("treasure replay from the same seed is bit-exact") {
  EnvConfig cfg = treasure_cfg(8, 40);
  auto run = [&](uint64_t seed) {
    Rng rng(seed);
    Rng act(seed + 1);
    EnvState s = env_reset(cfg, rng);
    std::vector<double> rewards;
    for (int t = 0; t < 40; ++t) {
      StepOutcome out =
          env_step(cfg, s, {act.uniform_int(5), act.uniform_int(5)}, rng);
      rewards.push_back(out.rewards[0]);
      rewards.push_back(out.rewards[1]);
      s = out.next;
    }
    return rewards;
  };
  CHECK(run(99) == run(99));
}

TEST_CASE("treasure observation has constant length and valid layout") {
  EnvConfig cfg = treasure_cfg(7, 60);
  Rng rng(17);
  EnvState s = env_reset(cfg, rng);
  const int n = obs_dim(cfg);
  CHECK(n == 6 * 49 + 7);
  std::vector<double> obs(static_cast<size_t>(n));
  Rng act(19);
  for (int t = 0; t < 60; ++t) {
    observe(cfg, s, obs);
    double agent_plane = 0, coin_planes = 0;
    for (int i = 0; i < 49; ++i) agent_plane += obs[size_t(i)];
    for (int i = 2 * 49; i < 4 * 49; ++i) coin_planes += obs[size_t(i)];
    CHECK(agent_plane == 1.0);                    // our one-hot position
    CHECK(coin_planes == double(s.th.n_coins));   // coins on grid
    CHECK(obs[size_t(n - 1)] == doctest::Approx(double(t) / 60.0));
    s = env_step(cfg, s, {act.uniform_int(5), act.uniform_int(5)}, rng).next;
  }
}
