#pragma once

#include <span>
#include <string>
#include <vector>

#include "meliba/belief.hpp"
#include "meliba/config.hpp"
#include "meliba/norm.hpp"
#include "meliba/nn.hpp"
#include "meliba/optim.hpp"
#include "meliba/rng.hpp"

namespace meliba {

// Width of the belief slice appended to the observation for each variant.
int belief_input_width(const RunConfig& cfg);

// Assembles the policy input. `belief` may be null for variants that do not
// use one; `rl2_hidden` is the top-layer recurrent state for rl2; rng draws
// the reparameterized sample for liom.
std::vector<double> build_policy_input(const RunConfig& cfg,
                                       std::span<const double> obs,
                                       const BeliefState* belief,
                                       std::span<const double> rl2_hidden,
                                       Rng& rng);

// Two tanh layers with categorical logits and scalar value heads (shared
// trunk by default). For rl2 the store additionally holds the stacked
// recurrent encoder the RL loss backpropagates through.
class PolicyNet {
 public:
  void configure(const RunConfig& cfg, int obs_dim, int num_actions);
  void build(ParamStore& psi, Rng& rng) const;

  int input_dim() const { return input_dim_; }
  int num_actions() const { return num_actions_; }
  bool is_rl2() const { return variant_ == Variant::rl2; }
  int rl2_layers() const { return rl2_layers_; }
  int rl2_hidden() const { return rl2_hidden_; }

  struct Heads {
    Var logits;
    Var value;
  };
  Heads forward_t(Tape& t, ParamStore& psi, Var input) const;

  struct ActOut {
    int action = 0;
    double log_prob = 0.0;
    double value = 0.0;
  };
  ActOut act(ParamStore& psi, std::span<const double> input, Rng& rng,
             bool greedy, Tape& scratch) const;

  // One step of the rl2 recurrent encoder; hidden holds one Var per layer
  // and is advanced in place. Returns the top-layer hidden.
  Var rl2_step_t(Tape& t, ParamStore& psi, std::vector<Var>& hidden, Var obs,
                 Var acts, Var reward) const;

  // Plain-vector rl2 step for rollouts (scratch tape, recording off).
  void rl2_step(ParamStore& psi, std::vector<double>& hidden_flat,
                const Transition& tr, Tape& scratch) const;

 private:
  Variant variant_ = Variant::average;
  int obs_dim_ = 0;
  int num_actions_ = 2;
  int input_dim_ = 0;
  int hidden_ = 128;
  bool separate_critic_ = false;
  int rl2_hidden_ = 128;
  int rl2_layers_ = 3;
  int embed_state_ = 32, embed_action_ = 16, embed_reward_ = 16;
};

// delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
// A_t = delta_t + gamma * tau * (1 - done_t) * A_{t+1}
// returns_t = A_t + V_t
void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const uint8_t> dones, double bootstrap_value,
                 double gamma, double tau, std::span<double> advantages,
                 std::span<double> returns);

// One collected meta-episode plus the policy-side records PPO needs.
struct RolloutEpisode {
  EpisodeTensors tensors;
  std::vector<double> belief_inputs;  // len * belief_width, rollout-time
  std::vector<double> values;         // len
  std::vector<double> log_probs;      // len
  std::vector<double> advantages;     // len, filled by ppo_update
  std::vector<double> returns;        // len
  double episode_return = 0.0;

  void clear_policy_fields();
};

struct PpoMetrics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double grad_norm = 0.0;
  // max |ratio - 1| over the first minibatch of the first epoch; zero up
  // to floating-point noise since parameters have not moved yet
  double first_ratio_max_dev = 0.0;
};

// Clipped-surrogate PPO over the fresh batch. Belief inputs are constants
// for all variants except rl2, where the recurrent encoder is recomputed
// through time and receives gradients. Minibatches shuffle frames for
// feed-forward variants and whole episodes for rl2. On a non-finite loss
// the offending minibatch is dumped under diagnostics_dir (when non-empty)
// before aborting.
PpoMetrics ppo_update(const PolicyNet& net, ParamStore& psi,
                      std::vector<RolloutEpisode>& batch, const RunConfig& cfg,
                      Optimizer& optimizer, Rng& rng, Tape& tape,
                      const std::string& diagnostics_dir = "",
                      const RunningNorm* belief_norm = nullptr);

}  // namespace meliba
