#pragma once

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meliba/belief.hpp"
#include "meliba/config.hpp"
#include "meliba/norm.hpp"
#include "meliba/env.hpp"
#include "meliba/opponents.hpp"
#include "meliba/policy.hpp"

namespace meliba {

// One meta-episode against a freshly sampled opponent, packed for the
// trajectory buffer: environment states instead of observation vectors
// (observations are regenerated on demand).
struct Trajectory {
  OpponentKind opponent_kind = OpponentKind::t4t1;
  std::vector<EnvState> states;  // s_0..s_{H-1}
  std::vector<uint8_t> our_actions, opp_actions;
  std::vector<double> rewards;  // r_1..r_H
  double episode_return = 0.0;

  int len() const { return int(states.size()); }
};

EpisodeTensors materialize(const Trajectory& traj, const EnvConfig& env);

// FIFO ring of trajectories with optional dedup of identical episodes.
class TrajectoryBuffer {
 public:
  explicit TrajectoryBuffer(int capacity, bool dedup = false)
      : capacity_(capacity), dedup_(dedup) {}

  void push(Trajectory traj);
  int size() const { return int(items_.size()); }
  const Trajectory& at(int i) const { return items_[size_t(i)]; }

  // Uniform sample of min(n, size) distinct indices.
  std::vector<int> sample_indices(int n, Rng& rng) const;

  void clear() { items_.clear(); hashes_.clear(); }
  const std::deque<Trajectory>& items() const { return items_; }

 private:
  int capacity_;
  bool dedup_;
  std::deque<Trajectory> items_;
  std::deque<uint64_t> hashes_;
};

// Everything a rollout needs; owned by the Trainer but usable standalone
// (evaluation, latent export).
struct CollectContext {
  const RunConfig* cfg = nullptr;
  EnvConfig env;
  OpponentPrior prior;
  const BeliefModel* belief = nullptr;  // null when the variant has none
  const PolicyNet* policy = nullptr;
  ParamStore* vae_store = nullptr;
  ParamStore* psi_store = nullptr;
  bool greedy = false;
  bool uniform_random = false;  // pretraining data collection
  std::optional<OpponentKind> forced_kind;
  // Frozen running statistics for the belief slice of the policy input;
  // null or not-ready means raw values pass through.
  const RunningNorm* belief_norm = nullptr;
};

struct CollectedEpisode {
  Trajectory traj;
  RolloutEpisode rollout;
  // Per-step latent record: (mu_m, sigma_m, mu_mt, sigma_mt) for belief
  // variants, the top recurrent hidden for rl2.
  std::vector<double> latents;
  int latent_width = 0;
};

CollectedEpisode collect_meta_episode(const CollectContext& ctx, Rng& env_rng,
                                      Rng& opp_rng, Rng& policy_rng,
                                      Tape& scratch);

// The run's opponent prior: uniform over env.opponents when set, else the
// environment's default support.
OpponentPrior prior_for_config(const RunConfig& cfg);

struct EvalKindStats {
  double mean_return = 0.0;
  double variance = 0.0;
  int episodes = 0;
};

struct EvalReport {
  int episodes = 0;
  double mean_return = 0.0;    // prior-weighted over per-kind means
  double ci_half_width = 0.0;  // 95%, normal approximation
  std::map<OpponentKind, EvalKindStats> per_kind;
};

// Stratified evaluation: episodes split evenly over the prior's support,
// overall mean weighted by the prior.
EvalReport evaluate_policy(const CollectContext& ctx, int n_episodes,
                           Rng& rng);

struct TrainResult {
  int updates = 0;
  int64_t frames_total = 0;
  int64_t rl_frames = 0;
  std::string final_checkpoint;
};

// The meta-training loop: fills the buffer with random-policy episodes and
// pretrains the VAE, then alternates PPO updates on fresh batches with VAE
// updates on buffer samples. Writes config.txt, metrics.csv, pretrain.csv,
// checkpoints/ and manifest.json under run_dir. With resume = true,
// restores the latest checkpoint in run_dir and continues until the frame
// budget, reproducing exactly what an uninterrupted run would have written.
TrainResult train(const RunConfig& cfg, const std::string& run_dir,
                  bool resume = false);

// Frozen-parameter evaluation of a checkpoint.
EvalReport evaluate_checkpoint(const std::string& checkpoint_path,
                               int n_episodes, bool greedy, uint64_t seed,
                               const std::vector<std::string>& overrides = {});

// Loaded checkpoint for analysis tooling.
struct LoadedRun {
  RunConfig cfg;
  ParamStore vae_store;
  ParamStore psi_store;
  BeliefModel belief;
  PolicyNet policy;
  RunningNorm input_norm;
  bool has_vae = false;

  CollectContext context();
};

LoadedRun load_checkpoint_bundle(const std::string& checkpoint_path,
                                 const std::vector<std::string>& overrides = {});

// Rollout writer: n greedy (or stochastic) episodes as JSON lines with
// per-step t, observation, belief vectors, actions, reward, opponent kind.
void write_rollouts_jsonl(const CollectContext& ctx, int n_episodes, Rng& rng,
                          const std::string& out_path);

std::string latest_checkpoint_in(const std::string& run_dir);

}  // namespace meliba
