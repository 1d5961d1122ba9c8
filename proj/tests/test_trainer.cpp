#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "meliba/analysis.hpp"
#include "meliba/trainer.hpp"

namespace fs = std::filesystem;
using namespace meliba;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunConfig tiny_chicken(Variant v, uint64_t seed) {
  RunConfig cfg;
  apply_env_defaults(cfg, EnvKind::chicken);
  cfg.variant = v;
  cfg.seed = seed;
  cfg.frames = 3 * 260;
  cfg.batch_frames = 260;  // 20 episodes per batch
  cfg.pretrain_frames = 10 * 13;
  cfg.pretrain_updates = 3;
  cfg.vae_batch_traj = 5;
  cfg.eval_every = 2;
  cfg.eval_episodes = 6;
  cfg.embed_state = 8;
  cfg.embed_action = 8;
  cfg.embed_reward = 4;
  cfg.enc_gru = 16;
  cfg.enc_deep1 = 8;
  cfg.enc_deep2 = 8;
  cfg.dec_l1 = 8;
  cfg.dec_l2 = 8;
  cfg.dec_l3 = 8;
  cfg.dec_gru = 8;
  cfg.dec_l5 = 8;
  cfg.policy_hidden = 16;
  cfg.rl2_hidden = 12;
  cfg.rl2_layers = 2;
  return cfg;
}

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("tmp_test_" + name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

CollectContext make_ctx(const RunConfig& cfg, BeliefModel& belief,
                        PolicyNet& policy, ParamStore& vae, ParamStore& psi) {
  const EnvConfig env = cfg.env_config();
  if (cfg.variant != Variant::rl2)
    belief.configure(cfg, obs_dim(env), env.num_actions());
  policy.configure(cfg, obs_dim(env), env.num_actions());
  Rng init(cfg.seed);
  Rng init2 = init.derive(6);
  if (cfg.variant != Variant::rl2) belief.build(vae, vae, init2);
  policy.build(psi, init2);
  CollectContext ctx;
  ctx.cfg = &cfg;
  ctx.env = env;
  ctx.prior = OpponentPrior::defaults_for(cfg.env);
  ctx.belief = cfg.variant != Variant::rl2 ? &belief : nullptr;
  ctx.policy = &policy;
  ctx.vae_store = cfg.variant != Variant::rl2 ? &vae : nullptr;
  ctx.psi_store = &psi;
  return ctx;
}

}  // namespace

TEST_CASE("collect_meta_episode records a full horizon") {
  RunConfig cfg = tiny_chicken(Variant::meliba, 3);
  BeliefModel belief;
  PolicyNet policy;
  ParamStore vae, psi;
  CollectContext ctx = make_ctx(cfg, belief, policy, vae, psi);
  Rng e(1), o(2), p(3);
  Tape scratch;
  CollectedEpisode ce = collect_meta_episode(ctx, e, o, p, scratch);
  CHECK(ce.traj.len() == 13);
  CHECK(ce.traj.our_actions.size() == 13);
  CHECK(ce.traj.rewards.size() == 13);
  CHECK(ce.rollout.values.size() == 13);
  CHECK(ce.rollout.tensors.obs.size() == 13);
  CHECK(ce.latent_width == 8);
  CHECK(ce.latents.size() == 13 * 8);
  double ret = 0;
  for (double r : ce.traj.rewards) ret += r;
  CHECK(ce.traj.episode_return == doctest::Approx(ret));

  SUBCASE("same seeds give a bit-identical trajectory") {
    Rng e2(1), o2(2), p2(3);
    CollectedEpisode ce2 = collect_meta_episode(ctx, e2, o2, p2, scratch);
    CHECK(ce2.traj.our_actions == ce.traj.our_actions);
    CHECK(ce2.traj.opp_actions == ce.traj.opp_actions);
    CHECK(ce2.traj.rewards == ce.traj.rewards);
    CHECK(ce2.latents == ce.latents);
  }
}

TEST_CASE("average variant runs the encoder but the policy never sees it") {
  RunConfig cfg = tiny_chicken(Variant::average, 5);
  BeliefModel belief;
  PolicyNet policy;
  ParamStore vae, psi;
  CollectContext ctx = make_ctx(cfg, belief, policy, vae, psi);
  Rng e(1), o(2), p(3);
  Tape scratch;
  CollectedEpisode ce = collect_meta_episode(ctx, e, o, p, scratch);
  CHECK(ce.latent_width == 8);          // encoder ran for logging
  CHECK(ce.latents.size() == 13 * 8);
  CHECK(ce.rollout.belief_inputs.empty());  // nothing reached the policy
  CHECK(policy.input_dim() == 1);
}

TEST_CASE("trajectory buffer is FIFO with optional dedup") {
  TrajectoryBuffer buf(3);
  for (int i = 0; i < 5; ++i) {
    Trajectory t;
    t.episode_return = i;
    t.states.resize(2);
    t.our_actions = {uint8_t(i), 0};
    t.opp_actions = {0, 0};
    t.rewards = {0, 0};
    buf.push(std::move(t));
  }
  CHECK(buf.size() == 3);
  CHECK(buf.at(0).episode_return == 2.0);  // 0 and 1 evicted
  CHECK(buf.at(2).episode_return == 4.0);

  SUBCASE("dedup drops identical trajectories") {
    TrajectoryBuffer dedup(10, true);
    for (int i = 0; i < 4; ++i) {
      Trajectory t;
      t.states.resize(2);
      t.our_actions = {1, 0};
      t.opp_actions = {0, 1};
      t.rewards = {0.5, -0.5};
      dedup.push(std::move(t));
    }
    CHECK(dedup.size() == 1);
  }

  SUBCASE("uniform sampling returns distinct indices") {
    Rng rng(7);
    auto idx = buf.sample_indices(2, rng);
    CHECK(idx.size() == 2);
    CHECK(idx[0] != idx[1]);
    auto all = buf.sample_indices(10, rng);
    CHECK(all.size() == 3);
  }
}

TEST_CASE("train writes a complete run directory with exact frame accounting") {
  TempDir dir("train_basic");
  RunConfig cfg = tiny_chicken(Variant::meliba, 7);
  TrainResult res = train(cfg, dir.path);
  CHECK(res.updates == 3);
  CHECK(res.rl_frames == 3 * 260);
  CHECK(res.frames_total == 3 * 260 + 130);
  CHECK(fs::exists(dir.path + "/config.txt"));
  CHECK(fs::exists(dir.path + "/metrics.csv"));
  CHECK(fs::exists(dir.path + "/pretrain.csv"));
  CHECK(fs::exists(dir.path + "/manifest.json"));
  CHECK(fs::exists(res.final_checkpoint));

  const std::string metrics = read_file(dir.path + "/metrics.csv");
  std::stringstream ss(metrics);
  std::string line;
  std::getline(ss, line);
  CHECK(line ==
        "update,frames,rl_frames,mean_return,policy_loss,value_loss,entropy,"
        "approx_kl,vae_recon,vae_kl,eval_return");
  int rows = 0;
  int64_t prev_frames = 0;
  while (std::getline(ss, line)) {
    ++rows;
    const int64_t frames = std::atoll(line.substr(line.find(',') + 1).c_str());
    CHECK(frames > prev_frames);  // monotone, exact episode multiples
    CHECK((frames - 130) % 260 == 0);
    prev_frames = frames;
  }
  CHECK(rows == 3);

  const std::string manifest = read_file(dir.path + "/manifest.json");
  CHECK(manifest.find("\"status\": \"completed\"") != std::string::npos);
  CHECK(manifest.find(config_hash(cfg)) != std::string::npos);

  SUBCASE("evaluate_checkpoint loads and reports per kind") {
    EvalReport rep = evaluate_checkpoint(res.final_checkpoint, 9, true, 5);
    CHECK(rep.episodes == 9);
    CHECK(rep.per_kind.size() == 3);
    for (const auto& [kind, ks] : rep.per_kind) CHECK(ks.episodes == 3);
  }

  SUBCASE("rollout writer emits one record per step") {
    LoadedRun run = load_checkpoint_bundle(res.final_checkpoint);
    CollectContext ctx = run.context();
    Rng rng(9);
    write_rollouts_jsonl(ctx, 2, rng, dir.path + "/rollouts/eval.jsonl");
    const std::string jsonl = read_file(dir.path + "/rollouts/eval.jsonl");
    int lines = 0;
    for (char c : jsonl) lines += c == '\n';
    CHECK(lines == 2 * 13);
    CHECK(jsonl.find("\"belief\":[") != std::string::npos);
    CHECK(jsonl.find("\"opponent\":\"t4t") != std::string::npos);
  }
}

TEST_CASE("pretraining with zero budget is a no-op") {
  TempDir dir("train_nopre");
  RunConfig cfg = tiny_chicken(Variant::meliba, 9);
  cfg.pretrain_frames = 0;
  cfg.pretrain_updates = 0;
  cfg.frames = 260;
  TrainResult res = train(cfg, dir.path);
  CHECK(res.updates == 1);
  CHECK(res.frames_total == 260);  // nothing collected before the loop
}

TEST_CASE("vae and ppo updates do not touch each other's parameters") {
  TempDir dir("train_sep");
  RunConfig cfg = tiny_chicken(Variant::meliba, 11);
  TrainResult res = train(cfg, dir.path);
  LoadedRun run = load_checkpoint_bundle(res.final_checkpoint);

  // One more PPO batch must leave the VAE store untouched, and vice versa.
  CollectContext ctx = run.context();
  ctx.greedy = false;
  Rng e(1), o(2), p(3);
  Tape scratch, tape;
  std::vector<RolloutEpisode> batch;
  std::vector<EpisodeTensors> vae_batch;
  for (int i = 0; i < 4; ++i) {
    CollectedEpisode ce = collect_meta_episode(ctx, e, o, p, scratch);
    vae_batch.push_back(ce.rollout.tensors);
    batch.push_back(std::move(ce.rollout));
  }
  auto snapshot = [](const ParamStore& ps) {
    std::vector<double> all;
    for (const auto& ent : ps.entries())
      all.insert(all.end(), ent.values.begin(), ent.values.end());
    return all;
  };
  const auto vae_before = snapshot(run.vae_store);
  Optimizer popt(OptKind::rmsprop, 7e-4, 0.5);
  Rng urng(5);
  ppo_update(run.policy, run.psi_store, batch, run.cfg, popt, urng, tape);
  CHECK(snapshot(run.vae_store) == vae_before);

  const auto psi_before = snapshot(run.psi_store);
  Optimizer vopt(OptKind::adam, 1e-3, 0.0);
  Rng vrng(7);
  ElboOptions eopt;
  vae_update(run.belief, run.vae_store, vae_batch, eopt, vopt, vrng, tape);
  CHECK(snapshot(run.psi_store) == psi_before);
  CHECK(snapshot(run.vae_store) != vae_before);
}

TEST_CASE("two runs of the same config are byte-identical") {
  TempDir a("repro_a"), b("repro_b");
  RunConfig cfg = tiny_chicken(Variant::meliba, 13);
  train(cfg, a.path);
  train(cfg, b.path);
  CHECK(read_file(a.path + "/metrics.csv") == read_file(b.path + "/metrics.csv"));
  CHECK(read_file(a.path + "/pretrain.csv") ==
        read_file(b.path + "/pretrain.csv"));
  CHECK(read_file(a.path + "/config.txt") == read_file(b.path + "/config.txt"));
}

TEST_CASE("resume reproduces the uninterrupted metrics stream") {
  for (Variant v : {Variant::meliba, Variant::rl2}) {
    CAPTURE(variant_name(v));
    TempDir full("resume_full"), part("resume_part");
    RunConfig cfg = tiny_chicken(v, 17);
    cfg.frames = 6 * 260;
    cfg.eval_every = 2;
    train(cfg, full.path);

    RunConfig interrupted = cfg;
    interrupted.interrupt_after_updates = 3;  // crash after update 3
    train(interrupted, part.path);
    const std::string manifest = read_file(part.path + "/manifest.json");
    CHECK(manifest.find("\"status\": \"running\"") != std::string::npos);

    train(cfg, part.path, /*resume=*/true);
    CHECK(read_file(part.path + "/metrics.csv") ==
          read_file(full.path + "/metrics.csv"));
    CHECK(read_file(part.path + "/manifest.json")
              .find("\"status\": \"completed\"") != std::string::npos);
  }
}

TEST_CASE("evaluate: empty request and the uniform-play oracle") {
  RunConfig cfg = tiny_chicken(Variant::average, 19);
  BeliefModel belief;
  PolicyNet policy;
  ParamStore vae, psi;
  CollectContext ctx = make_ctx(cfg, belief, policy, vae, psi);

  SUBCASE("zero episodes give an empty report") {
    Rng rng(3);
    EvalReport rep = evaluate_policy(ctx, 0, rng);
    CHECK(rep.episodes == 0);
    CHECK(rep.per_kind.empty());
  }

  SUBCASE("fresh policy plays uniformly; eval matches exact enumeration") {
    // Zero-initialized logits head: exactly uniform play. The enumerated
    // value and variance give a tight statistical band.
    UniformPlayValue oracle =
        chicken_uniform_play_value({1.0 / 3, 1.0 / 3, 1.0 / 3}, 13);
    Rng rng(23);
    ctx.greedy = false;
    const int n = 3000;
    EvalReport rep = evaluate_policy(ctx, n, rng);
    const double se = std::sqrt(oracle.variance / n);
    CHECK(std::fabs(rep.mean_return - oracle.mean) < 4 * se);
    CHECK(rep.ci_half_width > 0.0);
  }
}

TEST_CASE("checkpoint config mismatch is a versioned load error") {
  TempDir dir("ckpt_mismatch");
  RunConfig cfg = tiny_chicken(Variant::meliba, 21);
  cfg.frames = 260;
  TrainResult res = train(cfg, dir.path);
  // evaluating with an incompatible latent size must fail loudly
  CHECK_THROWS(evaluate_checkpoint(res.final_checkpoint, 3, true, 1,
                                   {"vae.latent_m=5"}));
}
