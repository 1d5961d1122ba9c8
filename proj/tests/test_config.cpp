#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "meliba/config.hpp"

using namespace meliba;

TEST_CASE("chicken preset carries the default column") {
  RunConfig cfg = load_config("chicken", {});
  CHECK(cfg.env == EnvKind::chicken);
  CHECK(cfg.policy_lr == 7e-4);
  CHECK(cfg.clip == 0.1);
  CHECK(cfg.entropy_coef == 0.2);
  CHECK(cfg.gamma == 1.0);
  CHECK(cfg.gae_tau == 0.9);
  CHECK(cfg.latent_m == 2);
  CHECK(cfg.latent_mt == 2);
  CHECK(cfg.batch_frames == 2080);
  CHECK(cfg.minibatches == 8);
  CHECK(cfg.kl_weight == 0.05);
  CHECK(cfg.vae_lr == 1e-3);
  CHECK(cfg.pretrain_frames == 208000);
  CHECK(cfg.pretrain_updates == 5000);
  CHECK(cfg.vae_batch_traj == 50);
  CHECK(cfg.buffer_capacity == 2500);
  CHECK(cfg.horizon == 13);
  CHECK(cfg.frames == 10000000);
  CHECK(cfg.policy_optimizer == "rmsprop");
  CHECK(cfg.max_grad_norm == 0.5);
  CHECK(cfg.value_loss_coef == 0.5);
  CHECK(cfg.ppo_epochs == 2);
  CHECK(cfg.enc_gru == 64);
  CHECK(cfg.embed_state == 32);
}

TEST_CASE("treasure preset carries the other column") {
  RunConfig cfg = load_config("treasure", {});
  CHECK(cfg.minibatches == 4);
  CHECK(cfg.batch_frames == 1600);
  CHECK(cfg.latent_m == 5);
  CHECK(cfg.latent_mt == 5);
  CHECK(cfg.horizon == 100);
  CHECK(cfg.grid == 10);
  CHECK(cfg.frames == 25000000);
  CHECK(cfg.pretrain_frames == 32000);
  CHECK(cfg.pretrain_updates == 1000);
  CHECK(cfg.vae_batch_traj == 15);
  CHECK(cfg.enc_gru == 128);
  CHECK(cfg.embed_state == 64);
}

TEST_CASE("preset with variant suffix") {
  RunConfig cfg = load_config("chicken_rl2", {});
  CHECK(cfg.env == EnvKind::chicken);
  CHECK(cfg.variant == Variant::rl2);
  CHECK(load_config("treasure_meliba_m", {}).variant == Variant::meliba_m);
  CHECK(load_config("chicken_meliba", {}).variant == Variant::meliba);
}

TEST_CASE("config file parsing with comments and overrides") {
  const std::string path = "test_cfg.txt";
  {
    std::ofstream f(path);
    f << "# a small run\n";
    f << "env = chicken\n";
    f << "variant = liom\n";
    f << "train.frames = 2e6\n";
    f << "policy.entropy_coef = 0.5  # tweaked\n";
  }
  RunConfig cfg = load_config(path, {"policy.entropy_coef=0.25", "seed=9"});
  std::filesystem::remove(path);
  CHECK(cfg.variant == Variant::liom);
  CHECK(cfg.frames == 2000000);
  CHECK(cfg.entropy_coef == 0.25);  // override wins, last wins
  CHECK(cfg.seed == 9);
}

TEST_CASE("unknown keys fail with the nearest known key") {
  CHECK_THROWS_WITH_AS(load_config("chicken", {"policy.entropy_coeff=0.1"}),
                       doctest::Contains("policy.entropy_coef"), config_error);
  CHECK_THROWS_WITH_AS(load_config("chicken", {"vae.latnet_m=3"}),
                       doctest::Contains("vae.latent_m"), config_error);
}

TEST_CASE("type mismatches are hard errors") {
  CHECK_THROWS_AS(load_config("chicken", {"train.frames=soon"}), config_error);
  CHECK_THROWS_AS(load_config("chicken", {"policy.lr=fast"}), config_error);
  CHECK_THROWS_AS(load_config("chicken", {"vae.dedup=maybe"}), config_error);
}

TEST_CASE("unreadable source that is not a preset fails") {
  CHECK_THROWS_AS(load_config("no_such_file.cfg", {}), config_error);
}

TEST_CASE("echoed config round-trips exactly") {
  RunConfig cfg = load_config(
      "treasure_rl2", {"seed=123", "policy.lr=0.00033", "env.grid=7",
                       "train.frames=5000000", "vae.elbo_subsample=0.25"});
  const std::string echo = serialize_config(cfg);
  RunConfig back = parse_config_text(echo, {});
  CHECK(serialize_config(back) == echo);
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(back.policy_lr == 0.00033);
  CHECK(back.grid == 7);
}

TEST_CASE("override is reflected in the echo") {
  RunConfig cfg = load_config("chicken", {"policy.entropy_coef=0.5"});
  CHECK(serialize_config(cfg).find("policy.entropy_coef = 0.5\n") !=
        std::string::npos);
}

TEST_CASE("sha1 blob hash matches git") {
  // echo -n 'hello' | git hash-object --stdin
  CHECK(sha1_blob_hex("hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0");
  CHECK(sha1_blob_hex("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}
