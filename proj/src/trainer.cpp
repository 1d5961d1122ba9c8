#include "meliba/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

namespace fs = std::filesystem;

namespace meliba {

namespace {

constexpr char kCkptMagic[8] = {'M', 'L', 'B', 'C', 'K', '0', '0', '1'};
constexpr int kManifestVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void wr(std::FILE* f, const void* p, size_t n) {
  if (std::fwrite(p, 1, n, f) != n)
    throw std::runtime_error("checkpoint: short write");
}
void rd(std::FILE* f, void* p, size_t n) {
  if (std::fread(p, 1, n, f) != n)
    throw std::runtime_error("checkpoint: short read");
}
void wr_u64(std::FILE* f, uint64_t v) { wr(f, &v, sizeof v); }
uint64_t rd_u64(std::FILE* f) {
  uint64_t v;
  rd(f, &v, sizeof v);
  return v;
}
void wr_i64(std::FILE* f, int64_t v) { wr(f, &v, sizeof v); }
int64_t rd_i64(std::FILE* f) {
  int64_t v;
  rd(f, &v, sizeof v);
  return v;
}
void wr_str(std::FILE* f, const std::string& s) {
  wr_u64(f, s.size());
  wr(f, s.data(), s.size());
}
std::string rd_str(std::FILE* f) {
  std::string s(rd_u64(f), '\0');
  rd(f, s.data(), s.size());
  return s;
}
void wr_rng(std::FILE* f, const Rng& r) {
  auto s = r.state();
  wr(f, s.data(), sizeof(uint64_t) * 4);
}
Rng rd_rng(std::FILE* f) {
  std::array<uint64_t, 4> s;
  rd(f, s.data(), sizeof(uint64_t) * 4);
  Rng r;
  r.set_state(s);
  return r;
}

void wr_state(std::FILE* f, const EnvState& s) {
  const uint8_t kind = uint8_t(s.kind);
  wr(f, &kind, 1);
  wr(f, &s.t, sizeof s.t);
  wr(f, &s.horizon, sizeof s.horizon);
  if (s.kind == EnvKind::treasure) {
    const TreasureState& th = s.th;
    wr(f, &th.grid, 1);
    wr(f, th.agent_row, 2);
    wr(f, th.agent_col, 2);
    wr(f, th.bank_row, kNumColors);
    wr(f, th.bank_col, kNumColors);
    wr(f, th.carried, 2);
    wr(f, &th.n_coins, 1);
    for (int i = 0; i < th.n_coins; ++i) {
      wr(f, &th.coins[i].row, 1);
      wr(f, &th.coins[i].col, 1);
      wr(f, &th.coins[i].color, 1);
    }
  }
}

EnvState rd_state(std::FILE* f) {
  EnvState s;
  uint8_t kind;
  rd(f, &kind, 1);
  s.kind = EnvKind(kind);
  rd(f, &s.t, sizeof s.t);
  rd(f, &s.horizon, sizeof s.horizon);
  if (s.kind == EnvKind::treasure) {
    TreasureState& th = s.th;
    rd(f, &th.grid, 1);
    rd(f, th.agent_row, 2);
    rd(f, th.agent_col, 2);
    rd(f, th.bank_row, kNumColors);
    rd(f, th.bank_col, kNumColors);
    rd(f, th.carried, 2);
    rd(f, &th.n_coins, 1);
    for (int i = 0; i < th.n_coins; ++i) {
      rd(f, &th.coins[i].row, 1);
      rd(f, &th.coins[i].col, 1);
      rd(f, &th.coins[i].color, 1);
    }
  }
  return s;
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

OpponentPrior prior_for_config(const RunConfig& cfg) {
  if (cfg.opponents.empty()) return OpponentPrior::defaults_for(cfg.env);
  std::vector<OpponentKind> kinds;
  std::stringstream ss(cfg.opponents);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) kinds.push_back(opponent_kind_from_string(item));
  if (kinds.empty())
    throw config_error("env.opponents: no opponent kinds given");
  return OpponentPrior::uniform(std::move(kinds));
}

EpisodeTensors materialize(const Trajectory& traj, const EnvConfig& env) {
  EpisodeTensors ep;
  ep.len = traj.len();
  ep.obs_dim = obs_dim(env);
  ep.obs.resize(size_t(ep.len) * ep.obs_dim);
  for (int t = 0; t < ep.len; ++t)
    observe(env, traj.states[size_t(t)],
            std::span<double>(ep.obs.data() + size_t(t) * ep.obs_dim,
                              size_t(ep.obs_dim)));
  ep.our_actions = traj.our_actions;
  ep.opp_actions = traj.opp_actions;
  ep.rewards = traj.rewards;
  return ep;
}

void TrajectoryBuffer::push(Trajectory traj) {
  uint64_t h = 0;
  if (dedup_) {
    h = fnv1a(&traj.opponent_kind, 1);
    h = fnv1a(traj.our_actions.data(), traj.our_actions.size(), h);
    h = fnv1a(traj.opp_actions.data(), traj.opp_actions.size(), h);
    h = fnv1a(traj.rewards.data(), traj.rewards.size() * sizeof(double), h);
    for (const auto& s : traj.states) {
      h = fnv1a(&s.t, sizeof s.t, h);
      h = fnv1a(&s.th.agent_row, sizeof s.th.agent_row, h);
      h = fnv1a(&s.th.agent_col, sizeof s.th.agent_col, h);
    }
    for (uint64_t existing : hashes_)
      if (existing == h) return;
  }
  items_.push_back(std::move(traj));
  hashes_.push_back(h);
  while (int(items_.size()) > capacity_) {
    items_.pop_front();
    hashes_.pop_front();
  }
}

std::vector<int> TrajectoryBuffer::sample_indices(int n, Rng& rng) const {
  const int m = std::min<int>(n, int(items_.size()));
  std::vector<int> all(items_.size());
  for (size_t i = 0; i < items_.size(); ++i) all[i] = int(i);
  for (int i = 0; i < m; ++i) {
    const int j = i + rng.uniform_int(int(all.size()) - i);
    std::swap(all[size_t(i)], all[size_t(j)]);
  }
  all.resize(size_t(m));
  return all;
}

CollectedEpisode collect_meta_episode(const CollectContext& ctx, Rng& env_rng,
                                      Rng& opp_rng, Rng& policy_rng,
                                      Tape& scratch) {
  const RunConfig& cfg = *ctx.cfg;
  const int H = ctx.env.horizon;
  const int A = ctx.env.num_actions();
  const int od = obs_dim(ctx.env);

  CollectedEpisode out;
  Trajectory& traj = out.traj;
  RolloutEpisode& ro = out.rollout;
  ro.tensors.len = H;
  ro.tensors.obs_dim = od;
  ro.tensors.obs.resize(size_t(H) * od);

  EnvState st = env_reset(ctx.env, env_rng);
  OpponentPolicy opp;
  if (ctx.forced_kind) {
    opp.kind = *ctx.forced_kind;
    opp.reset();
  } else {
    opp = sample_opponent(ctx.prior, opp_rng);
  }
  traj.opponent_kind = opp.kind;

  std::vector<double> obs_buf(static_cast<size_t>(od));
  observe(ctx.env, st, obs_buf);

  BeliefState belief;
  std::vector<double> rl2_hidden;
  const bool rl2 = cfg.variant == Variant::rl2;
  if (ctx.belief && ctx.vae_store) {
    belief = ctx.belief->initial_belief(*ctx.vae_store, obs_buf, scratch);
  }
  if (rl2) {
    rl2_hidden.assign(size_t(cfg.rl2_layers * cfg.rl2_hidden), 0.0);
    Transition sentinel;
    sentinel.state = obs_buf;
    sentinel.our_action.assign(size_t(A), 0.0);
    sentinel.opponent_action.assign(size_t(A), 0.0);
    ctx.policy->rl2_step(*ctx.psi_store, rl2_hidden, sentinel, scratch);
  }

  const int bw = belief_input_width(cfg);
  out.latent_width =
      rl2 ? cfg.rl2_hidden
          : (ctx.belief ? 2 * (ctx.belief->latent_m() + ctx.belief->latent_mt())
                        : 0);
  out.latents.reserve(size_t(H) * out.latent_width);

  auto top_hidden = [&]() {
    return std::span<const double>(
        rl2_hidden.data() + size_t(cfg.rl2_layers - 1) * cfg.rl2_hidden,
        size_t(cfg.rl2_hidden));
  };
  auto log_latents = [&]() {
    if (rl2) {
      auto h = top_hidden();
      out.latents.insert(out.latents.end(), h.begin(), h.end());
    } else if (ctx.belief) {
      for (const auto* v :
           {&belief.mu_m, &belief.sigma_m, &belief.mu_mt, &belief.sigma_mt})
        out.latents.insert(out.latents.end(), v->begin(), v->end());
    }
  };

  for (int t = 0; t < H; ++t) {
    std::copy(obs_buf.begin(), obs_buf.end(),
              ro.tensors.obs.begin() + int64_t(t) * od);
    log_latents();

    PolicyNet::ActOut act;
    if (ctx.uniform_random) {
      act.action = policy_rng.uniform_int(A);
      act.log_prob = -std::log(double(A));
      act.value = 0.0;
      if (bw > 0) ro.belief_inputs.insert(ro.belief_inputs.end(), size_t(bw), 0.0);
    } else {
      std::vector<double> input = build_policy_input(
          cfg, obs_buf, ctx.belief ? &belief : nullptr,
          rl2 ? top_hidden() : std::span<const double>{}, policy_rng);
      if (bw > 0)
        ro.belief_inputs.insert(ro.belief_inputs.end(),
                                input.begin() + od, input.end());
      if (ctx.belief_norm && ctx.belief_norm->dim() == bw && bw > 0)
        ctx.belief_norm->normalize(
            std::span<const double>(input.data() + od, size_t(bw)),
            std::span<double>(input.data() + od, size_t(bw)));
      act = ctx.policy->act(*ctx.psi_store, input, policy_rng, ctx.greedy,
                            scratch);
    }

    const int opp_action = opp.act(ctx.env, st);
    StepOutcome so = env_step(ctx.env, st, {act.action, opp_action}, env_rng);
    opp.update(act.action, so.events[1]);

    traj.states.push_back(st);
    traj.our_actions.push_back(uint8_t(act.action));
    traj.opp_actions.push_back(uint8_t(opp_action));
    traj.rewards.push_back(so.rewards[0]);
    ro.values.push_back(act.value);
    ro.log_probs.push_back(act.log_prob);
    ro.episode_return += so.rewards[0];

    st = so.next;
    if (t + 1 < H) {
      observe(ctx.env, st, obs_buf);
      Transition tr;
      tr.state = obs_buf;
      tr.our_action.assign(size_t(A), 0.0);
      tr.our_action[size_t(act.action)] = 1.0;
      tr.opponent_action.assign(size_t(A), 0.0);
      tr.opponent_action[size_t(opp_action)] = 1.0;
      tr.reward = so.rewards[0];
      if (ctx.belief && ctx.vae_store)
        belief = ctx.belief->encode_step(*ctx.vae_store, belief, tr, scratch);
      if (rl2) ctx.policy->rl2_step(*ctx.psi_store, rl2_hidden, tr, scratch);
    }
  }
  traj.episode_return = ro.episode_return;
  ro.tensors.our_actions = traj.our_actions;
  ro.tensors.opp_actions = traj.opp_actions;
  ro.tensors.rewards = traj.rewards;
  return out;
}

EvalReport evaluate_policy(const CollectContext& ctx, int n_episodes,
                           Rng& rng) {
  EvalReport rep;
  if (n_episodes <= 0) return rep;
  Rng env_rng = rng.derive(11);
  Rng opp_rng = rng.derive(12);
  Rng policy_rng = rng.derive(13);
  Tape scratch;
  const auto& kinds = ctx.prior.support;
  CollectContext ectx = ctx;
  for (int i = 0; i < n_episodes; ++i) {
    ectx.forced_kind = kinds[size_t(i) % kinds.size()];
    CollectedEpisode ce =
        collect_meta_episode(ectx, env_rng, opp_rng, policy_rng, scratch);
    auto& ks = rep.per_kind[ce.traj.opponent_kind];
    ks.episodes += 1;
    const double d = ce.traj.episode_return - ks.mean_return;
    ks.mean_return += d / ks.episodes;
    ks.variance += d * (ce.traj.episode_return - ks.mean_return);
    rep.episodes += 1;
  }
  bool all_covered = true;
  for (auto& [kind, ks] : rep.per_kind)
    ks.variance = ks.episodes > 1 ? ks.variance / (ks.episodes - 1) : 0.0;
  for (size_t k = 0; k < kinds.size(); ++k)
    if (!rep.per_kind.count(kinds[k])) all_covered = false;
  if (all_covered) {
    double mean = 0, var = 0;
    for (size_t k = 0; k < kinds.size(); ++k) {
      const auto& ks = rep.per_kind.at(kinds[k]);
      const double w = ctx.prior.weights[k];
      mean += w * ks.mean_return;
      var += w * w * ks.variance / std::max(1, ks.episodes);
    }
    rep.mean_return = mean;
    rep.ci_half_width = 1.96 * std::sqrt(var);
  } else {
    double mean = 0, m2 = 0;
    int n = 0;
    for (auto& [kind, ks] : rep.per_kind) {
      mean += ks.mean_return * ks.episodes;
      n += ks.episodes;
    }
    mean /= std::max(1, n);
    rep.mean_return = mean;
    m2 = 0;  // coarse: pooled variance unavailable without raw returns
    rep.ci_half_width = m2;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop internals

namespace {

struct Trainer {
  RunConfig cfg;
  std::string run_dir;
  EnvConfig env;
  OpponentPrior prior;
  BeliefModel belief;
  PolicyNet policy;
  ParamStore vae_store, psi_store;
  std::unique_ptr<Optimizer> vae_opt, psi_opt;
  Rng env_rng, opp_rng, policy_rng, update_rng, vae_rng;
  TrajectoryBuffer buffer;
  RunningNorm input_norm;
  int64_t frames_total = 0, rl_frames = 0;
  int update_idx = 0;
  Tape tape, scratch;
  bool has_belief_model = false;
  bool norm_enabled = false;

  explicit Trainer(const RunConfig& c, std::string dir)
      : cfg(c), run_dir(std::move(dir)),
        buffer(c.buffer_capacity, c.buffer_dedup) {
    cfg.validate();
    env = cfg.env_config();
    prior = prior_for_config(cfg);
    const int od = obs_dim(env);
    const int A = env.num_actions();
    has_belief_model = cfg.variant != Variant::rl2;
    if (has_belief_model) belief.configure(cfg, od, A);
    policy.configure(cfg, od, A);
    norm_enabled = cfg.input_norm && variant_has_vae(cfg.variant) &&
                   belief_input_width(cfg) > 0;
    input_norm.reset(norm_enabled ? belief_input_width(cfg) : 0);
  }

  void fresh_init() {
    Rng master(cfg.seed);
    env_rng = master.derive(1);
    opp_rng = master.derive(2);
    policy_rng = master.derive(3);
    update_rng = master.derive(4);
    vae_rng = master.derive(5);
    Rng init_rng = master.derive(6);
    if (has_belief_model) belief.build(vae_store, vae_store, init_rng);
    policy.build(psi_store, init_rng);
    make_optimizers();
  }

  void make_optimizers() {
    vae_opt = std::make_unique<Optimizer>(
        opt_kind_from_string(cfg.vae_optimizer), cfg.vae_lr,
        cfg.vae_max_grad_norm);
    psi_opt = std::make_unique<Optimizer>(
        opt_kind_from_string(cfg.policy_optimizer), cfg.policy_lr,
        cfg.max_grad_norm);
  }

  CollectContext context(bool greedy = false, bool uniform_random = false) {
    CollectContext ctx;
    ctx.cfg = &cfg;
    ctx.env = env;
    ctx.prior = prior;
    ctx.belief = has_belief_model ? &belief : nullptr;
    ctx.policy = &policy;
    ctx.vae_store = has_belief_model ? &vae_store : nullptr;
    ctx.psi_store = &psi_store;
    ctx.greedy = greedy;
    ctx.uniform_random = uniform_random;
    ctx.belief_norm = norm_enabled ? &input_norm : nullptr;
    return ctx;
  }

  int episodes_per_batch() const {
    return int((cfg.batch_frames + cfg.horizon - 1) / cfg.horizon);
  }

  // --- run directory artifacts ---

  std::string metrics_path() const { return run_dir + "/metrics.csv"; }
  std::string pretrain_path() const { return run_dir + "/pretrain.csv"; }
  std::string manifest_path() const { return run_dir + "/manifest.json"; }
  std::string ckpt_dir() const { return run_dir + "/checkpoints"; }
  std::string ckpt_path(int update) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "/ckpt_%08d.bin", update);
    return ckpt_dir() + buf;
  }

  void write_manifest(const std::string& status,
                      const std::string& latest_ckpt) const {
    std::string j = "{\n";
    j += "  \"format_version\": " + std::to_string(kManifestVersion) + ",\n";
    j += "  \"config_hash\": \"" + config_hash(cfg) + "\",\n";
    j += "  \"status\": \"" + status + "\",\n";
    j += "  \"update\": " + std::to_string(update_idx) + ",\n";
    j += "  \"frames_total\": " + std::to_string(frames_total) + ",\n";
    j += "  \"rl_frames\": " + std::to_string(rl_frames) + ",\n";
    j += "  \"latest_checkpoint\": \"" + latest_ckpt + "\"\n";
    j += "}\n";
    const std::string tmp = manifest_path() + ".tmp";
    {
      std::ofstream f(tmp, std::ios::trunc);
      f << j;
      if (!f) throw std::runtime_error("cannot write manifest " + tmp);
    }
    fs::rename(tmp, manifest_path());
  }

  void append_metrics(const std::string& row) const {
    std::ofstream f(metrics_path(), std::ios::app);
    f << row;
    if (!f)
      throw std::runtime_error("cannot append to metrics " + metrics_path());
  }

  // --- checkpointing ---

  void save_checkpoint(const std::string& path) const {
    FilePtr f(std::fopen((path + ".tmp").c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    wr(f.get(), kCkptMagic, 8);
    const uint32_t version = 1;
    wr(f.get(), &version, sizeof version);
    wr_str(f.get(), serialize_config(cfg));
    wr_i64(f.get(), update_idx);
    wr_i64(f.get(), frames_total);
    wr_i64(f.get(), rl_frames);
    const uint8_t has_vae = has_belief_model ? 1 : 0;
    wr(f.get(), &has_vae, 1);
    if (has_vae) {
      vae_store.save_to(f.get());
      vae_opt->save(f.get());
    }
    psi_store.save_to(f.get());
    psi_opt->save(f.get());
    wr_rng(f.get(), env_rng);
    wr_rng(f.get(), opp_rng);
    wr_rng(f.get(), policy_rng);
    wr_rng(f.get(), update_rng);
    wr_rng(f.get(), vae_rng);
    input_norm.save(f.get());
    wr_u64(f.get(), uint64_t(buffer.size()));
    for (int i = 0; i < buffer.size(); ++i) {
      const Trajectory& tr = buffer.at(i);
      const uint8_t kind = uint8_t(tr.opponent_kind);
      wr(f.get(), &kind, 1);
      wr_u64(f.get(), uint64_t(tr.len()));
      for (const auto& s : tr.states) wr_state(f.get(), s);
      wr(f.get(), tr.our_actions.data(), tr.our_actions.size());
      wr(f.get(), tr.opp_actions.data(), tr.opp_actions.size());
      wr(f.get(), tr.rewards.data(), tr.rewards.size() * sizeof(double));
      double ret = tr.episode_return;
      wr(f.get(), &ret, sizeof ret);
    }
    f.reset();
    fs::rename(path + ".tmp", path);
  }

  void load_checkpoint(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[8];
    rd(f.get(), magic, 8);
    if (std::memcmp(magic, kCkptMagic, 8) != 0)
      throw std::runtime_error("bad checkpoint format tag in " + path);
    uint32_t version;
    rd(f.get(), &version, sizeof version);
    if (version != 1)
      throw std::runtime_error("unsupported checkpoint version " +
                               std::to_string(version));
    const std::string ckpt_config = rd_str(f.get());
    check_config_compatible(ckpt_config);
    update_idx = int(rd_i64(f.get()));
    frames_total = rd_i64(f.get());
    rl_frames = rd_i64(f.get());
    uint8_t has_vae;
    rd(f.get(), &has_vae, 1);
    if (bool(has_vae) != has_belief_model)
      throw std::runtime_error("checkpoint variant mismatch");
    make_optimizers();
    if (has_vae) {
      vae_store = ParamStore::load_from(f.get());
      vae_opt->load(f.get());
    }
    psi_store = ParamStore::load_from(f.get());
    psi_opt->load(f.get());
    env_rng = rd_rng(f.get());
    opp_rng = rd_rng(f.get());
    policy_rng = rd_rng(f.get());
    update_rng = rd_rng(f.get());
    vae_rng = rd_rng(f.get());
    input_norm.load(f.get());
    buffer.clear();
    const uint64_t n = rd_u64(f.get());
    for (uint64_t i = 0; i < n; ++i) {
      Trajectory tr;
      uint8_t kind;
      rd(f.get(), &kind, 1);
      tr.opponent_kind = OpponentKind(kind);
      const uint64_t len = rd_u64(f.get());
      tr.states.resize(len);
      for (auto& s : tr.states) s = rd_state(f.get());
      tr.our_actions.resize(len);
      tr.opp_actions.resize(len);
      tr.rewards.resize(len);
      rd(f.get(), tr.our_actions.data(), len);
      rd(f.get(), tr.opp_actions.data(), len);
      rd(f.get(), tr.rewards.data(), len * sizeof(double));
      rd(f.get(), &tr.episode_return, sizeof tr.episode_return);
      buffer.push(std::move(tr));
    }
  }

  // Resume may extend the budget / change cadence, but everything that
  // affects the model or data stream must match.
  void check_config_compatible(const std::string& ckpt_config) const {
    std::istringstream a(ckpt_config), b(serialize_config(cfg));
    std::string la, lb;
    while (std::getline(a, la) && std::getline(b, lb)) {
      if (la.rfind("train.", 0) == 0 && lb.rfind("train.", 0) == 0) continue;
      if (la != lb)
        throw std::runtime_error("checkpoint config mismatch: '" + la +
                                 "' vs '" + lb + "'");
    }
  }

  void prune_checkpoints() const {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(ckpt_dir()))
      if (e.path().extension() == ".bin") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    while (int(files.size()) > cfg.checkpoint_keep + 1) {
      fs::remove(files.front());
      files.erase(files.begin());
    }
  }

  // --- phases ---

  void pretrain() {
    if (!variant_has_vae(cfg.variant)) return;
    CollectContext ctx = context(false, true);
    int64_t collected = 0;
    while (collected < cfg.pretrain_frames) {
      CollectedEpisode ce =
          collect_meta_episode(ctx, env_rng, opp_rng, policy_rng, scratch);
      buffer.push(std::move(ce.traj));
      collected += cfg.horizon;
      frames_total += cfg.horizon;
    }
    std::ofstream f(pretrain_path(), std::ios::trunc);
    f << "update,recon,kl,elbo,grad_norm\n";
    ElboOptions opt = elbo_options();
    std::vector<EpisodeTensors> batch;
    for (int u = 0; u < cfg.pretrain_updates; ++u) {
      sample_vae_batch(batch);
      VaeMetrics m = vae_update(belief, vae_store, batch, opt, *vae_opt,
                                vae_rng, tape);
      f << u << "," << fmt_g17(m.recon) << "," << fmt_g17(m.kl) << ","
        << fmt_g17(m.elbo) << "," << fmt_g17(m.grad_norm) << "\n";
    }
  }

  ElboOptions elbo_options() const {
    ElboOptions opt;
    opt.kl_weight = cfg.kl_weight;
    opt.n_samples = cfg.vae_samples;
    opt.include_current = cfg.recon_include_current;
    opt.subsample = cfg.elbo_subsample;
    return opt;
  }

  void sample_vae_batch(std::vector<EpisodeTensors>& batch) {
    batch.clear();
    for (int idx : buffer.sample_indices(cfg.vae_batch_traj, vae_rng))
      batch.push_back(materialize(buffer.at(idx), env));
  }

  TrainResult run(bool resume) {
    fs::create_directories(ckpt_dir());
    fs::create_directories(run_dir + "/rollouts");

    if (resume) {
      const std::string latest = latest_checkpoint_in(run_dir);
      if (latest.empty())
        throw std::runtime_error("resume requested but no checkpoint in " +
                                 run_dir);
      load_checkpoint(latest);
      truncate_metrics();
      // the continued budget is part of the effective experiment
      std::ofstream f(run_dir + "/config.txt", std::ios::trunc);
      f << serialize_config(cfg);
    } else {
      fresh_init();
      {
        std::ofstream f(run_dir + "/config.txt", std::ios::trunc);
        f << serialize_config(cfg);
      }
      {
        std::ofstream f(metrics_path(), std::ios::trunc);
        f << "update,frames,rl_frames,mean_return,policy_loss,value_loss,"
             "entropy,approx_kl,vae_recon,vae_kl,eval_return\n";
      }
      write_manifest("running", "");
      pretrain();
    }

    const int eb = episodes_per_batch();
    std::vector<EpisodeTensors> vae_batch;
    std::string last_ckpt = resume ? latest_checkpoint_in(run_dir) : "";

    while (rl_frames < cfg.frames) {
      CollectContext ctx = context();
      std::vector<RolloutEpisode> batch;
      batch.reserve(size_t(eb));
      double ret_sum = 0;
      for (int e = 0; e < eb; ++e) {
        CollectedEpisode ce =
            collect_meta_episode(ctx, env_rng, opp_rng, policy_rng, scratch);
        ret_sum += ce.rollout.episode_return;
        if (variant_has_vae(cfg.variant)) buffer.push(std::move(ce.traj));
        batch.push_back(std::move(ce.rollout));
      }
      frames_total += int64_t(eb) * cfg.horizon;
      rl_frames += int64_t(eb) * cfg.horizon;

      PpoMetrics pm = ppo_update(policy, psi_store, batch, cfg, *psi_opt,
                                 update_rng, tape, run_dir,
                                 norm_enabled ? &input_norm : nullptr);
      if (norm_enabled) {
        const int bw = input_norm.dim();
        for (const auto& ep : batch)
          for (int ti = 0; ti < ep.tensors.len; ++ti)
            input_norm.update_row(std::span<const double>(
                ep.belief_inputs.data() + int64_t(ti) * bw, size_t(bw)));
      }

      double vae_recon = 0, vae_kl = 0;
      const bool do_vae = variant_has_vae(cfg.variant);
      if (do_vae) {
        ElboOptions opt = elbo_options();
        for (int k = 0; k < cfg.vae_updates_per_rl_update; ++k) {
          sample_vae_batch(vae_batch);
          VaeMetrics vm = vae_update(belief, vae_store, vae_batch, opt,
                                     *vae_opt, vae_rng, tape);
          vae_recon = vm.recon;
          vae_kl = vm.kl;
        }
      }
      update_idx += 1;

      std::string eval_col;
      const bool at_checkpoint =
          update_idx % cfg.eval_every == 0 || rl_frames >= cfg.frames;
      if (at_checkpoint) {
        Rng eval_rng = Rng(cfg.seed).derive(0xE7A1000ULL + uint64_t(update_idx));
        EvalReport er =
            evaluate_policy(context(true), cfg.eval_episodes, eval_rng);
        eval_col = fmt_g17(er.mean_return);
      }

      std::string row = std::to_string(update_idx) + "," +
                        std::to_string(frames_total) + "," +
                        std::to_string(rl_frames) + "," + fmt_g17(ret_sum / eb) +
                        "," + fmt_g17(pm.policy_loss) + "," +
                        fmt_g17(pm.value_loss) + "," + fmt_g17(pm.entropy) +
                        "," + fmt_g17(pm.approx_kl) + ",";
      row += do_vae ? fmt_g17(vae_recon) : "";
      row += ",";
      row += do_vae ? fmt_g17(vae_kl) : "";
      row += ",";
      row += eval_col;
      row += "\n";
      append_metrics(row);

      // The checkpoint is written after its metrics row so a resume never
      // loses a row it cannot regenerate.
      if (at_checkpoint) {
        last_ckpt = ckpt_path(update_idx);
        save_checkpoint(last_ckpt);
        prune_checkpoints();
        write_manifest("running",
                       "checkpoints" + last_ckpt.substr(ckpt_dir().size()));
      }

      if (cfg.interrupt_after_updates > 0 &&
          update_idx >= cfg.interrupt_after_updates) {
        // simulated crash: no finalization of any kind
        TrainResult res;
        res.updates = update_idx;
        res.frames_total = frames_total;
        res.rl_frames = rl_frames;
        res.final_checkpoint = last_ckpt;
        return res;
      }
    }

    if (last_ckpt.empty() || !fs::exists(last_ckpt)) {
      last_ckpt = ckpt_path(update_idx);
      save_checkpoint(last_ckpt);
    }
    write_manifest("completed",
                   "checkpoints" + last_ckpt.substr(ckpt_dir().size()));

    TrainResult res;
    res.updates = update_idx;
    res.frames_total = frames_total;
    res.rl_frames = rl_frames;
    res.final_checkpoint = last_ckpt;
    return res;
  }

  // Drop metrics rows past the restored update, byte-preserving the rest.
  void truncate_metrics() const {
    std::ifstream in(metrics_path());
    if (!in.good()) throw std::runtime_error("resume: missing metrics.csv");
    std::string line, kept;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        kept = line + "\n";
        header = false;
        continue;
      }
      const int u = std::atoi(line.c_str());
      if (u <= update_idx) kept += line + "\n";
    }
    in.close();
    std::ofstream out(metrics_path(), std::ios::trunc);
    out << kept;
  }
};

}  // namespace

std::string latest_checkpoint_in(const std::string& run_dir) {
  const std::string dir = run_dir + "/checkpoints";
  if (!fs::is_directory(dir)) return "";
  std::string best;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".bin") continue;
    const std::string p = e.path().string();
    if (p > best) best = p;
  }
  return best;
}

TrainResult train(const RunConfig& cfg, const std::string& run_dir,
                  bool resume) {
  fs::create_directories(run_dir);
  Trainer tr(cfg, run_dir);
  try {
    return tr.run(resume);
  } catch (const std::exception&) {
    try {
      tr.write_manifest("failed", "");
    } catch (...) {
    }
    throw;
  }
}

// ---------------------------------------------------------------------------
// Checkpoint loading for evaluation / analysis

LoadedRun load_checkpoint_bundle(const std::string& checkpoint_path,
                                 const std::vector<std::string>& overrides) {
  FilePtr f(std::fopen(checkpoint_path.c_str(), "rb"));
  if (!f)
    throw std::runtime_error("cannot open checkpoint " + checkpoint_path);
  char magic[8];
  rd(f.get(), magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint format tag in " + checkpoint_path);
  uint32_t version;
  rd(f.get(), &version, sizeof version);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  LoadedRun run;
  const std::string config_text = rd_str(f.get());
  run.cfg = parse_config_text(config_text, overrides);
  rd_i64(f.get());
  rd_i64(f.get());
  rd_i64(f.get());
  uint8_t has_vae;
  rd(f.get(), &has_vae, 1);
  run.has_vae = bool(has_vae);
  Optimizer discard_opt(OptKind::adam, 0, 0);
  if (run.has_vae) {
    run.vae_store = ParamStore::load_from(f.get());
    discard_opt.load(f.get());
  }
  run.psi_store = ParamStore::load_from(f.get());
  {
    Optimizer discard_psi_opt(OptKind::adam, 0, 0);
    discard_psi_opt.load(f.get());
    for (int i = 0; i < 5; ++i) rd_rng(f.get());
    run.input_norm.load(f.get());
  }
  // the trajectory buffer is not needed for analysis

  const EnvConfig env = run.cfg.env_config();
  if (run.has_vae)
    run.belief.configure(run.cfg, obs_dim(env), env.num_actions());
  run.policy.configure(run.cfg, obs_dim(env), env.num_actions());

  // Versioned load check: the stored arrays must line up with the
  // architecture the (possibly overridden) config describes.
  auto check_shapes = [&](const ParamStore& loaded, const ParamStore& expect,
                          const char* which) {
    if (loaded.count() != expect.count())
      throw std::runtime_error(std::string("checkpoint/config mismatch: ") +
                               which + " has " +
                               std::to_string(loaded.count()) +
                               " parameters, config describes " +
                               std::to_string(expect.count()));
    for (int i = 0; i < expect.count(); ++i) {
      if (loaded.at(i).name != expect.at(i).name ||
          loaded.at(i).shape != expect.at(i).shape)
        throw std::runtime_error(
            "checkpoint/config mismatch at parameter '" + expect.at(i).name +
            "' (stored '" + loaded.at(i).name + "')");
    }
  };
  Rng shape_rng(0);
  if (run.has_vae) {
    ParamStore expect;
    run.belief.build(expect, expect, shape_rng);
    check_shapes(run.vae_store, expect, "belief model");
  }
  {
    ParamStore expect;
    run.policy.build(expect, shape_rng);
    check_shapes(run.psi_store, expect, "policy");
  }
  return run;
}

CollectContext LoadedRun::context() {
  CollectContext ctx;
  ctx.cfg = &cfg;
  ctx.env = cfg.env_config();
  ctx.prior = prior_for_config(cfg);
  ctx.belief = has_vae ? &belief : nullptr;
  ctx.policy = &policy;
  ctx.vae_store = has_vae ? &vae_store : nullptr;
  ctx.psi_store = &psi_store;
  ctx.greedy = true;
  ctx.belief_norm = cfg.input_norm && has_vae && input_norm.dim() > 0
                        ? &input_norm
                        : nullptr;
  return ctx;
}

EvalReport evaluate_checkpoint(const std::string& checkpoint_path,
                               int n_episodes, bool greedy, uint64_t seed,
                               const std::vector<std::string>& overrides) {
  LoadedRun run = load_checkpoint_bundle(checkpoint_path, overrides);
  CollectContext ctx = run.context();
  ctx.greedy = greedy;
  Rng rng(seed);
  return evaluate_policy(ctx, n_episodes, rng);
}

void write_rollouts_jsonl(const CollectContext& ctx, int n_episodes, Rng& rng,
                          const std::string& out_path) {
  std::ofstream f(out_path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + out_path);
  Rng env_rng = rng.derive(21);
  Rng opp_rng = rng.derive(22);
  Rng policy_rng = rng.derive(23);
  Tape scratch;
  const int od = obs_dim(ctx.env);
  for (int e = 0; e < n_episodes; ++e) {
    CollectedEpisode ce =
        collect_meta_episode(ctx, env_rng, opp_rng, policy_rng, scratch);
    const int H = ce.traj.len();
    const EpisodeTensors& ep = ce.rollout.tensors;
    for (int t = 0; t < H; ++t) {
      f << "{\"episode\":" << e << ",\"t\":" << t << ",\"opponent\":\""
        << opponent_kind_name(ce.traj.opponent_kind) << "\",\"obs\":[";
      for (int i = 0; i < od; ++i) {
        if (i) f << ",";
        f << fmt_g17(ep.obs[size_t(t) * od + i]);
      }
      f << "],\"belief\":[";
      for (int i = 0; i < ce.latent_width; ++i) {
        if (i) f << ",";
        f << fmt_g17(ce.latents[size_t(t) * ce.latent_width + i]);
      }
      f << "],\"our_action\":" << int(ce.traj.our_actions[size_t(t)])
        << ",\"opp_action\":" << int(ce.traj.opp_actions[size_t(t)])
        << ",\"reward\":" << fmt_g17(ce.traj.rewards[size_t(t)]) << "}\n";
    }
  }
}

}  // namespace meliba
