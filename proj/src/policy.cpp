#include "meliba/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace meliba {

int belief_input_width(const RunConfig& cfg) {
  switch (cfg.variant) {
    case Variant::meliba:
    case Variant::meliba_flat:
      return 2 * (cfg.latent_m + cfg.latent_mt);
    case Variant::meliba_m:
      return 2 * cfg.latent_m;
    case Variant::meliba_mt:
      return 2 * cfg.latent_mt;
    case Variant::liom:
      return cfg.latent_m + cfg.latent_mt;
    case Variant::rl2:
      return cfg.rl2_hidden;
    case Variant::average:
      return 0;
  }
  return 0;
}

std::vector<double> build_policy_input(const RunConfig& cfg,
                                       std::span<const double> obs,
                                       const BeliefState* belief,
                                       std::span<const double> rl2_hidden,
                                       Rng& rng) {
  std::vector<double> input(obs.begin(), obs.end());
  auto append = [&](std::span<const double> v) {
    input.insert(input.end(), v.begin(), v.end());
  };
  switch (cfg.variant) {
    case Variant::average:
      break;
    case Variant::rl2:
      if (int(rl2_hidden.size()) != cfg.rl2_hidden)
        throw config_error("rl2 variant: hidden state of wrong size");
      append(rl2_hidden);
      break;
    case Variant::liom: {
      if (!belief) throw config_error("liom variant requires a belief");
      // one reparameterized sample of the (single-block) latent
      for (size_t i = 0; i < belief->mu_m.size(); ++i)
        input.push_back(belief->mu_m[i] + belief->sigma_m[i] * rng.normal());
      break;
    }
    case Variant::meliba:
    case Variant::meliba_flat:
      if (!belief) throw config_error("belief variant requires a belief");
      append(belief->mu_m);
      append(belief->sigma_m);
      append(belief->mu_mt);
      append(belief->sigma_mt);
      break;
    case Variant::meliba_m:
      if (!belief) throw config_error("belief variant requires a belief");
      append(belief->mu_m);
      append(belief->sigma_m);
      break;
    case Variant::meliba_mt:
      if (!belief) throw config_error("belief variant requires a belief");
      append(belief->mu_mt);
      append(belief->sigma_mt);
      break;
  }
  return input;
}

void PolicyNet::configure(const RunConfig& cfg, int obs_dim, int num_actions) {
  variant_ = cfg.variant;
  obs_dim_ = obs_dim;
  num_actions_ = num_actions;
  hidden_ = cfg.policy_hidden;
  separate_critic_ = cfg.separate_critic;
  rl2_hidden_ = cfg.rl2_hidden;
  rl2_layers_ = cfg.rl2_layers;
  embed_state_ = cfg.embed_state;
  embed_action_ = cfg.embed_action;
  embed_reward_ = cfg.embed_reward;
  input_dim_ = obs_dim + belief_input_width(cfg);
}

void PolicyNet::build(ParamStore& psi, Rng& rng) const {
  if (variant_ == Variant::rl2) {
    make_dense(psi, "rl2enc.embs", embed_state_, obs_dim_, rng);
    make_dense(psi, "rl2enc.emba", embed_action_, 2 * num_actions_, rng);
    make_dense(psi, "rl2enc.embr", embed_reward_, 1, rng);
    const int embed_total = embed_state_ + embed_action_ + embed_reward_;
    for (int l = 0; l < rl2_layers_; ++l)
      make_gru(psi, "rl2enc.gru" + std::to_string(l), rl2_hidden_,
               l == 0 ? embed_total : rl2_hidden_, rng);
  }
  make_dense(psi, "pi.l1", hidden_, input_dim_, rng);
  make_dense(psi, "pi.l2", hidden_, hidden_, rng);
  make_head(psi, "pi.logits", num_actions_, hidden_);
  make_head(psi, "pi.value", 1, hidden_);
  if (separate_critic_) {
    make_dense(psi, "vf.l1", hidden_, input_dim_, rng);
    make_dense(psi, "vf.l2", hidden_, hidden_, rng);
    make_head(psi, "vf.value", 1, hidden_);
  }
}

PolicyNet::Heads PolicyNet::forward_t(Tape& t, ParamStore& psi,
                                      Var input) const {
  Var h1 = dense(t, psi, "pi.l1", input, Act::tanh);
  Var h2 = dense(t, psi, "pi.l2", h1, Act::tanh);
  Heads heads;
  heads.logits = t.affine(psi, "pi.logits.w", "pi.logits.b", h2, Act::none);
  if (separate_critic_) {
    Var v1 = dense(t, psi, "vf.l1", input, Act::tanh);
    Var v2 = dense(t, psi, "vf.l2", v1, Act::tanh);
    heads.value = t.affine(psi, "vf.value.w", "vf.value.b", v2, Act::none);
  } else {
    heads.value = t.affine(psi, "pi.value.w", "pi.value.b", h2, Act::none);
  }
  return heads;
}

PolicyNet::ActOut PolicyNet::act(ParamStore& psi, std::span<const double> input,
                                 Rng& rng, bool greedy, Tape& scratch) const {
  if (int(input.size()) != input_dim_)
    throw config_error("policy input of length " +
                       std::to_string(input.size()) + ", expected " +
                       std::to_string(input_dim_));
  const bool was_recording = scratch.recording();
  scratch.set_recording(false);
  scratch.clear();
  Heads heads = forward_t(scratch, psi, scratch.input(input));
  std::span<const double> logits = scratch.val(heads.logits);
  const double value = scratch.val(heads.value)[0];

  double mx = logits[0];
  for (double l : logits) {
    if (!std::isfinite(l)) throw numeric_error("policy produced non-finite logits");
    mx = std::max(mx, l);
  }
  double z = 0;
  for (double l : logits) z += std::exp(l - mx);
  const double lse = mx + std::log(z);

  ActOut out;
  out.value = value;
  if (greedy) {
    out.action = 0;
    for (int i = 1; i < num_actions_; ++i)
      if (logits[size_t(i)] > logits[size_t(out.action)]) out.action = i;
  } else {
    const double u = rng.uniform01();
    double acc = 0;
    out.action = num_actions_ - 1;
    for (int i = 0; i < num_actions_; ++i) {
      acc += std::exp(logits[size_t(i)] - lse);
      if (u < acc) {
        out.action = i;
        break;
      }
    }
  }
  out.log_prob = logits[size_t(out.action)] - lse;
  scratch.set_recording(was_recording);
  return out;
}

Var PolicyNet::rl2_step_t(Tape& t, ParamStore& psi, std::vector<Var>& hidden,
                          Var obs, Var acts, Var reward) const {
  Var es = dense(t, psi, "rl2enc.embs", obs, Act::tanh);
  Var ea = dense(t, psi, "rl2enc.emba", acts, Act::tanh);
  Var er = dense(t, psi, "rl2enc.embr", reward, Act::tanh);
  Var x = t.concat({es, ea, er});
  for (int l = 0; l < rl2_layers_; ++l) {
    hidden[size_t(l)] =
        t.gru_step(psi, "rl2enc.gru" + std::to_string(l), hidden[size_t(l)], x);
    x = hidden[size_t(l)];
  }
  return x;
}

void PolicyNet::rl2_step(ParamStore& psi, std::vector<double>& hidden_flat,
                         const Transition& tr, Tape& scratch) const {
  const bool was_recording = scratch.recording();
  scratch.set_recording(false);
  scratch.clear();
  std::vector<Var> hidden(static_cast<size_t>(rl2_layers_));
  for (int l = 0; l < rl2_layers_; ++l)
    hidden[size_t(l)] = scratch.input(std::span<const double>(
        hidden_flat.data() + size_t(l) * rl2_hidden_, size_t(rl2_hidden_)));
  Var obs = scratch.input(tr.state);
  std::vector<double> acts(size_t(2 * num_actions_), 0.0);
  std::copy(tr.our_action.begin(), tr.our_action.end(), acts.begin());
  std::copy(tr.opponent_action.begin(), tr.opponent_action.end(),
            acts.begin() + num_actions_);
  Var av = scratch.input(acts);
  Var rv = scratch.input(std::span<const double>(&tr.reward, 1));
  rl2_step_t(scratch, psi, hidden, obs, av, rv);
  for (int l = 0; l < rl2_layers_; ++l) {
    std::span<const double> h = scratch.val(hidden[size_t(l)]);
    std::copy(h.begin(), h.end(),
              hidden_flat.begin() + int64_t(l) * rl2_hidden_);
  }
  scratch.set_recording(was_recording);
}

void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const uint8_t> dones, double bootstrap_value,
                 double gamma, double tau, std::span<double> advantages,
                 std::span<double> returns) {
  const size_t n = rewards.size();
  if (values.size() != n || dones.size() != n || advantages.size() != n ||
      returns.size() != n)
    throw protocol_error("compute_gae: length mismatch");
  double next_adv = 0.0;
  for (size_t i = n; i-- > 0;) {
    const double not_done = dones[i] ? 0.0 : 1.0;
    const double next_value = (i + 1 < n) ? values[i + 1] : bootstrap_value;
    const double delta = rewards[i] + gamma * next_value * not_done - values[i];
    next_adv = delta + gamma * tau * not_done * next_adv;
    advantages[i] = next_adv;
    returns[i] = next_adv + values[i];
  }
}

void RolloutEpisode::clear_policy_fields() {
  belief_inputs.clear();
  belief_inputs.shrink_to_fit();
  values.clear();
  values.shrink_to_fit();
  log_probs.clear();
  log_probs.shrink_to_fit();
  advantages.clear();
  advantages.shrink_to_fit();
  returns.clear();
  returns.shrink_to_fit();
}

namespace {

struct SampleRef {
  int ep;
  int t;
};

void dump_minibatch(const std::string& dir, const PolicyNet& net,
                    std::span<const SampleRef> samples,
                    const std::vector<RolloutEpisode>& batch) {
  (void)net;
  std::ofstream f(dir + "/ppo_nan_minibatch.csv");
  f << "episode,t,action,log_prob_old,advantage,return,value_old,reward\n";
  for (const auto& s : samples) {
    const auto& ep = batch[size_t(s.ep)];
    char line[256];
    std::snprintf(line, sizeof line, "%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  s.ep, s.t, int(ep.tensors.our_actions[size_t(s.t)]),
                  ep.log_probs[size_t(s.t)], ep.advantages[size_t(s.t)],
                  ep.returns[size_t(s.t)], ep.values[size_t(s.t)],
                  ep.tensors.rewards[size_t(s.t)]);
    f << line;
  }
}

}  // namespace

PpoMetrics ppo_update(const PolicyNet& net, ParamStore& psi,
                      std::vector<RolloutEpisode>& batch, const RunConfig& cfg,
                      Optimizer& optimizer, Rng& rng, Tape& tape,
                      const std::string& diagnostics_dir,
                      const RunningNorm* belief_norm) {
  if (batch.empty()) throw protocol_error("ppo_update: empty batch");

  // Advantages before any update epoch.
  for (auto& ep : batch) {
    const size_t n = size_t(ep.tensors.len);
    ep.advantages.assign(n, 0.0);
    ep.returns.assign(n, 0.0);
    std::vector<uint8_t> dones(n, 0);
    dones[n - 1] = 1;
    compute_gae(ep.tensors.rewards, ep.values, dones, 0.0, cfg.gamma,
                cfg.gae_tau, ep.advantages, ep.returns);
  }
  if (cfg.advantage_norm) {
    double mean = 0;
    int64_t count = 0;
    for (const auto& ep : batch)
      for (double a : ep.advantages) {
        mean += a;
        ++count;
      }
    mean /= double(count);
    double var = 0;
    for (const auto& ep : batch)
      for (double a : ep.advantages) var += (a - mean) * (a - mean);
    const double stddev = std::sqrt(var / double(count)) + 1e-8;
    for (auto& ep : batch)
      for (double& a : ep.advantages) a = (a - mean) / stddev;
  }

  const bool rl2 = net.is_rl2();
  std::vector<SampleRef> order;
  if (rl2) {
    order.resize(batch.size());
    for (size_t i = 0; i < batch.size(); ++i)
      order[i] = {int(i), 0};  // whole episodes
  } else {
    for (size_t i = 0; i < batch.size(); ++i)
      for (int t = 0; t < batch[i].tensors.len; ++t)
        order.push_back({int(i), t});
  }

  PpoMetrics metrics;
  double weight_total = 0;
  std::vector<double> input_buf;
  std::vector<double> acts_buf;

  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    // Fisher-Yates shuffle from the update stream.
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(rng.uniform_int(int(i)))]);

    const size_t base = order.size() / size_t(cfg.minibatches);
    const size_t rem = order.size() % size_t(cfg.minibatches);
    size_t cursor = 0;
    for (int mb = 0; mb < cfg.minibatches; ++mb) {
      const size_t take = base + (size_t(mb) < rem ? 1 : 0);
      if (take == 0) continue;
      std::span<const SampleRef> chunk(order.data() + cursor, take);
      cursor += take;

      tape.clear();
      std::vector<Var> surr_terms, vloss_terms, ent_terms;
      int n_frames = 0;
      double kl_acc = 0;
      double ratio_dev = 0;

      auto add_sample = [&](const RolloutEpisode& ep, int t, Var input) {
        PolicyNet::Heads heads = net.forward_t(tape, psi, input);
        const int a = int(ep.tensors.our_actions[size_t(t)]);
        Var lp = tape.cat_logprob(heads.logits, a);
        const double lp_old = ep.log_probs[size_t(t)];
        const double adv = ep.advantages[size_t(t)];
        surr_terms.push_back(tape.ppo_clip(lp, lp_old, adv, cfg.clip));
        vloss_terms.push_back(tape.value_clip(heads.value, ep.values[size_t(t)],
                                              ep.returns[size_t(t)], cfg.clip));
        ent_terms.push_back(tape.cat_entropy(heads.logits));
        const double lp_new = tape.val(lp)[0];
        kl_acc += lp_old - lp_new;
        ratio_dev = std::max(ratio_dev, std::fabs(std::exp(lp_new - lp_old) - 1.0));
        ++n_frames;
      };

      if (rl2) {
        for (const SampleRef& ref : chunk) {
          const RolloutEpisode& ep = batch[size_t(ref.ep)];
          std::vector<Var> hidden(static_cast<size_t>(net.rl2_layers()));
          for (auto& h : hidden) h = tape.zeros(net.rl2_hidden());
          acts_buf.assign(size_t(2 * net.num_actions()), 0.0);
          for (int t = 0; t < ep.tensors.len; ++t) {
            Var obs = tape.input(std::span<const double>(
                ep.tensors.obs.data() + size_t(t) * ep.tensors.obs_dim,
                size_t(ep.tensors.obs_dim)));
            std::fill(acts_buf.begin(), acts_buf.end(), 0.0);
            double reward = 0.0;
            if (t > 0) {
              acts_buf[size_t(ep.tensors.our_actions[size_t(t - 1)])] = 1.0;
              acts_buf[size_t(net.num_actions() +
                              ep.tensors.opp_actions[size_t(t - 1)])] = 1.0;
              reward = ep.tensors.rewards[size_t(t - 1)];
            }
            Var av = tape.input(acts_buf);
            Var rv = tape.input(std::span<const double>(&reward, 1));
            Var top = net.rl2_step_t(tape, psi, hidden, obs, av, rv);
            Var input = tape.concat({obs, top});
            add_sample(ep, t, input);
          }
        }
      } else {
        const int bw = belief_input_width(cfg);
        std::vector<double> norm_buf(static_cast<size_t>(bw));
        for (const SampleRef& ref : chunk) {
          const RolloutEpisode& ep = batch[size_t(ref.ep)];
          const int t = ref.t;
          input_buf.assign(
              ep.tensors.obs.begin() + int64_t(t) * ep.tensors.obs_dim,
              ep.tensors.obs.begin() + int64_t(t + 1) * ep.tensors.obs_dim);
          if (bw > 0) {
            std::span<const double> raw(ep.belief_inputs.data() +
                                            int64_t(t) * bw,
                                        size_t(bw));
            if (belief_norm && belief_norm->dim() == bw) {
              belief_norm->normalize(raw, norm_buf);
              input_buf.insert(input_buf.end(), norm_buf.begin(),
                               norm_buf.end());
            } else {
              input_buf.insert(input_buf.end(), raw.begin(), raw.end());
            }
          }
          add_sample(ep, t, tape.input(input_buf));
        }
      }

      const double inv_n = 1.0 / double(n_frames);
      Var surr = tape.scale(tape.stack_sum(surr_terms), inv_n);
      Var vloss = tape.scale(tape.stack_sum(vloss_terms), inv_n);
      Var ent = tape.scale(tape.stack_sum(ent_terms), inv_n);
      Var loss = tape.add(
          tape.add(tape.scale(surr, -1.0),
                   tape.scale(vloss, cfg.value_loss_coef)),
          tape.scale(ent, -cfg.entropy_coef));
      const double loss_v = tape.val(loss)[0];
      if (!std::isfinite(loss_v)) {
        if (!diagnostics_dir.empty())
          dump_minibatch(diagnostics_dir, net, chunk, batch);
        throw numeric_error(
            "ppo_update: non-finite loss in minibatch " + std::to_string(mb) +
            (diagnostics_dir.empty()
                 ? ""
                 : "; dump written to " + diagnostics_dir +
                       "/ppo_nan_minibatch.csv"));
      }
      tape.backward(loss);
      metrics.grad_norm += psi.grad_norm() * n_frames;
      optimizer.step(psi);

      metrics.policy_loss += -tape.val(surr)[0] * n_frames;
      metrics.value_loss += tape.val(vloss)[0] * n_frames;
      metrics.entropy += tape.val(ent)[0] * n_frames;
      metrics.approx_kl += kl_acc;
      if (epoch == 0 && mb == 0) metrics.first_ratio_max_dev = ratio_dev;
      weight_total += n_frames;
    }
  }
  metrics.policy_loss /= weight_total;
  metrics.value_loss /= weight_total;
  metrics.entropy /= weight_total;
  metrics.approx_kl /= weight_total;
  metrics.grad_norm /= weight_total;
  return metrics;
}

}  // namespace meliba
