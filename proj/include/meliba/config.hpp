#pragma once

#include <string>
#include <vector>

#include "meliba/common.hpp"
#include "meliba/env.hpp"

namespace meliba {

enum class Variant : uint8_t {
  meliba,
  meliba_m,
  meliba_mt,
  meliba_flat,
  liom,
  rl2,
  average,
};

Variant variant_from_string(const std::string& s);
std::string variant_name(Variant v);

inline bool variant_has_vae(Variant v) {
  return v != Variant::rl2 && v != Variant::average;
}

// Full experiment description. Defaults are filled per environment when a
// config names `env`; the shipped presets are the two default columns.
struct RunConfig {
  EnvKind env = EnvKind::chicken;
  Variant variant = Variant::meliba;
  uint64_t seed = 1;

  // env
  int horizon = 13;
  int grid = 10;
  int coins_per_color = 3;
  bool chicken_time_obs = true;
  // comma-separated opponent kinds drawn uniformly; empty = the
  // environment's default prior
  std::string opponents;

  // train
  int64_t frames = 10'000'000;  // RL frames after pretraining
  int eval_every = 50;          // updates between evaluations/checkpoints
  int eval_episodes = 96;
  int checkpoint_keep = 2;      // besides the final one
  // crash simulation for resume tests: stop abruptly after N updates
  // without finalizing (0 = off)
  int interrupt_after_updates = 0;

  // policy (PPO)
  std::string policy_optimizer = "rmsprop";
  double policy_lr = 7e-4;
  int ppo_epochs = 2;
  int minibatches = 8;
  double clip = 0.1;
  int batch_frames = 2080;
  double value_loss_coef = 0.5;
  double entropy_coef = 0.2;
  double gamma = 1.0;
  double gae_tau = 0.9;
  double max_grad_norm = 0.5;
  bool advantage_norm = true;
  // running mean/std normalization of the belief slice of the policy input
  bool input_norm = true;
  bool separate_critic = false;
  int policy_hidden = 128;
  int rl2_hidden = 128;
  int rl2_layers = 3;

  // vae
  double vae_lr = 1e-3;
  std::string vae_optimizer = "adam";
  int buffer_capacity = 2500;
  int vae_batch_traj = 50;
  double kl_weight = 0.05;
  int64_t pretrain_frames = 208'000;
  int pretrain_updates = 5000;
  int latent_m = 2;
  int latent_mt = 2;
  int vae_samples = 1;
  bool recon_include_current = true;
  double elbo_subsample = 1.0;  // fraction of timesteps; 1 = all
  int vae_updates_per_rl_update = 1;
  double vae_max_grad_norm = 0.0;  // 0 = no clipping
  bool buffer_dedup = false;

  // encoder / decoder widths
  int embed_state = 32;
  int embed_action = 16;
  int embed_reward = 16;
  int enc_gru = 64;
  int enc_deep1 = 64;
  int enc_deep2 = 64;
  int dec_l1 = 32;
  int dec_l2 = 64;
  int dec_l3 = 64;
  int dec_gru = 64;
  int dec_l5 = 32;

  EnvConfig env_config() const;
  void validate() const;
};

// Applies the environment's default column (everything except env/variant/
// seed is reset to the column's values).
void apply_env_defaults(RunConfig& cfg, EnvKind env);

// Parses the documented key-value text. `source` may be a file path or a
// builtin preset name: "chicken", "treasure", or "<env>_<variant>".
// Overrides are dotted key=value assignments applied after the file,
// last-wins. Unknown keys fail with the nearest known key.
RunConfig load_config(const std::string& source,
                      const std::vector<std::string>& overrides);

// Parses config text (the file format) directly.
RunConfig parse_config_text(const std::string& text,
                            const std::vector<std::string>& overrides);

// Applies a single "key=value" assignment.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Canonical echo: every key in registry order; parsing it reproduces the
// config exactly.
std::string serialize_config(const RunConfig& cfg);

// Git-style SHA-1 blob hash of the canonical echo.
std::string config_hash(const RunConfig& cfg);

std::string sha1_blob_hex(const std::string& content);

}  // namespace meliba
