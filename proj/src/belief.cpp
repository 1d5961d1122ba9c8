#include "meliba/belief.hpp"

#include <algorithm>
#include <cmath>

namespace meliba {

double gaussian_kl(std::span<const double> mu_new,
                   std::span<const double> sigma_new,
                   std::span<const double> mu_old,
                   std::span<const double> sigma_old) {
  const size_t n = mu_new.size();
  if (sigma_new.size() != n || mu_old.size() != n || sigma_old.size() != n)
    throw config_error("gaussian_kl: dimension mismatch");
  double kl = 0;
  for (size_t i = 0; i < n; ++i) {
    if (sigma_new[i] <= 0.0 || sigma_old[i] <= 0.0)
      throw numeric_error("gaussian_kl: non-positive standard deviation");
    const double dm = mu_new[i] - mu_old[i];
    kl += std::log(sigma_old[i] / sigma_new[i]) +
          (sigma_new[i] * sigma_new[i] + dm * dm) /
              (2.0 * sigma_old[i] * sigma_old[i]) -
          0.5;
  }
  return kl;
}

void BeliefModel::configure(const RunConfig& cfg, int obs_dim,
                            int num_actions) {
  variant_ = cfg.variant;
  obs_dim_ = obs_dim;
  num_actions_ = num_actions;
  embed_state_ = cfg.embed_state;
  embed_action_ = cfg.embed_action;
  embed_reward_ = cfg.embed_reward;
  gru_hidden_ = cfg.enc_gru;
  deep1_ = cfg.enc_deep1;
  deep2_ = cfg.enc_deep2;
  dec_l1_ = cfg.dec_l1;
  dec_l2_ = cfg.dec_l2;
  dec_l3_ = cfg.dec_l3;
  dec_gru_ = cfg.dec_gru;
  dec_l5_ = cfg.dec_l5;

  switch (cfg.variant) {
    case Variant::meliba:
    case Variant::meliba_flat:
    case Variant::rl2:      // frozen logging encoder uses the full model
    case Variant::average:
      latent_m_ = cfg.latent_m;
      latent_mt_ = cfg.latent_mt;
      m_from_hidden_ = cfg.variant != Variant::meliba_flat;
      recurrent_decoder_ = true;
      break;
    case Variant::meliba_m:
      latent_m_ = cfg.latent_m;
      latent_mt_ = 0;
      m_from_hidden_ = true;
      recurrent_decoder_ = false;
      break;
    case Variant::meliba_mt:
      latent_m_ = 0;
      latent_mt_ = cfg.latent_mt;
      m_from_hidden_ = true;
      recurrent_decoder_ = true;
      break;
    case Variant::liom:
      // single non-hierarchical latent of the combined size; the policy
      // receives a sample from it
      latent_m_ = cfg.latent_m + cfg.latent_mt;
      latent_mt_ = 0;
      m_from_hidden_ = false;
      recurrent_decoder_ = false;
      break;
  }
  has_deep_ = latent_mt_ > 0 || (!m_from_hidden_ && latent_m_ > 0);
}

void BeliefModel::build(ParamStore& enc, ParamStore& dec, Rng& rng) const {
  make_dense(enc, "enc.embs", embed_state_, obs_dim_, rng);
  make_dense(enc, "enc.emba", embed_action_, 2 * num_actions_, rng);
  make_dense(enc, "enc.embr", embed_reward_, 1, rng);
  const int embed_total = embed_state_ + embed_action_ + embed_reward_;
  make_gru(enc, "enc.gru", gru_hidden_, embed_total, rng);
  if (has_deep_) {
    make_dense(enc, "enc.deep1", deep1_, gru_hidden_, rng);
    make_dense(enc, "enc.deep2", deep2_, deep1_, rng);
  }
  const int m_src = m_from_hidden_ ? gru_hidden_ : deep2_;
  if (latent_m_ > 0) {
    make_head(enc, "enc.mu_m", latent_m_, m_src);
    make_head(enc, "enc.sigma_m", latent_m_, m_src);
  }
  if (latent_mt_ > 0) {
    make_head(enc, "enc.mu_mt", latent_mt_, deep2_);
    make_head(enc, "enc.sigma_mt", latent_mt_, deep2_);
  }

  const bool latents_joint = variant_ != Variant::meliba;
  const int l1_in = latents_joint ? latent_total()
                                  : (latent_m_ > 0 ? latent_m_ : latent_mt_);
  make_dense(dec, "dec.l1", dec_l1_, l1_in, rng);
  const int l2_extra = variant_ == Variant::meliba ? latent_mt_ : 0;
  make_dense(dec, "dec.l2", dec_l2_, dec_l1_ + l2_extra, rng);
  make_dense(dec, "dec.l3", dec_l3_, dec_l2_ + obs_dim_, rng);
  if (recurrent_decoder_) {
    make_gru(dec, "dec.gru", dec_gru_, dec_l3_, rng);
  } else {
    make_dense(dec, "dec.ff", dec_gru_, dec_l3_, rng);
  }
  make_dense(dec, "dec.l5", dec_l5_, dec_gru_, rng);
  make_head(dec, "dec.logits", num_actions_, dec_l5_);
}

Var BeliefModel::embed_transition(Tape& t, ParamStore& enc, Var obs, Var acts,
                                  Var reward) const {
  Var es = dense(t, enc, "enc.embs", obs, Act::tanh);
  Var ea = dense(t, enc, "enc.emba", acts, Act::tanh);
  Var er = dense(t, enc, "enc.embr", reward, Act::tanh);
  return t.concat({es, ea, er});
}

BeliefModel::EncOut BeliefModel::encode_step_t(Tape& t, ParamStore& enc,
                                               Var h_prev, Var obs, Var acts,
                                               Var reward) const {
  EncOut out;
  Var x = embed_transition(t, enc, obs, acts, reward);
  out.h = t.gru_step(enc, "enc.gru", h_prev, x);
  Var deep;
  if (has_deep_) {
    Var d1 = dense(t, enc, "enc.deep1", out.h, Act::tanh);
    deep = dense(t, enc, "enc.deep2", d1, Act::tanh);
  }
  if (latent_m_ > 0) {
    Var src = m_from_hidden_ ? out.h : deep;
    out.mu_m = t.affine(enc, "enc.mu_m.w", "enc.mu_m.b", src, Act::none);
    out.sigma_m = sigma_head(t, enc, "enc.sigma_m", src);
  }
  if (latent_mt_ > 0) {
    out.mu_mt = t.affine(enc, "enc.mu_mt.w", "enc.mu_mt.b", deep, Act::none);
    out.sigma_mt = sigma_head(t, enc, "enc.sigma_mt", deep);
  }
  // Numeric guard on the small head outputs.
  for (Var v : {out.mu_m, out.sigma_m, out.mu_mt, out.sigma_mt}) {
    if (!v.valid()) continue;
    for (double x2 : t.val(v))
      if (!std::isfinite(x2))
        throw numeric_error("encoder produced a non-finite posterior");
  }
  return out;
}

BeliefState BeliefModel::encode_step(ParamStore& enc, const BeliefState& prev,
                                     const Transition& tr,
                                     Tape& scratch) const {
  const bool was_recording = scratch.recording();
  scratch.set_recording(false);
  scratch.clear();
  Var h = scratch.input(prev.encoder_hidden);
  Var obs = scratch.input(tr.state);
  std::vector<double> acts(size_t(2 * num_actions_), 0.0);
  std::copy(tr.our_action.begin(), tr.our_action.end(), acts.begin());
  std::copy(tr.opponent_action.begin(), tr.opponent_action.end(),
            acts.begin() + num_actions_);
  Var av = scratch.input(acts);
  const double r[1] = {tr.reward};
  Var rv = scratch.input(std::span<const double>(r, 1));
  EncOut eo = encode_step_t(scratch, enc, h, obs, av, rv);
  BeliefState next;
  auto grab = [&](Var v) {
    std::span<const double> s = scratch.val(v);
    return std::vector<double>(s.begin(), s.end());
  };
  next.encoder_hidden = grab(eo.h);
  if (latent_m_ > 0) {
    next.mu_m = grab(eo.mu_m);
    next.sigma_m = grab(eo.sigma_m);
  }
  if (latent_mt_ > 0) {
    next.mu_mt = grab(eo.mu_mt);
    next.sigma_mt = grab(eo.sigma_mt);
  }
  scratch.set_recording(was_recording);
  return next;
}

BeliefState BeliefModel::initial_belief(ParamStore& enc,
                                        std::span<const double> obs0,
                                        Tape& scratch) const {
  BeliefState zero;
  zero.encoder_hidden.assign(size_t(gru_hidden_), 0.0);
  Transition sentinel;
  sentinel.state.assign(obs0.begin(), obs0.end());
  sentinel.our_action.assign(size_t(num_actions_), 0.0);
  sentinel.opponent_action.assign(size_t(num_actions_), 0.0);
  sentinel.reward = 0.0;
  return encode_step(enc, zero, sentinel, scratch);
}

BeliefModel::DecCtx BeliefModel::decode_begin(Tape& t, ParamStore& dec,
                                              Var m_sample,
                                              Var mt_sample) const {
  DecCtx ctx;
  Var l1_in;
  if (variant_ == Variant::meliba) {
    l1_in = m_sample;
  } else if (latent_m_ > 0 && latent_mt_ > 0) {
    l1_in = t.concat({m_sample, mt_sample});
  } else {
    l1_in = latent_m_ > 0 ? m_sample : mt_sample;
  }
  Var f1 = dense(t, dec, "dec.l1", l1_in, Act::tanh);
  Var l2_in = variant_ == Variant::meliba && latent_mt_ > 0
                  ? t.concat({f1, mt_sample})
                  : f1;
  ctx.feat = dense(t, dec, "dec.l2", l2_in, Act::tanh);
  if (recurrent_decoder_) ctx.h = t.zeros(dec_gru_);
  return ctx;
}

Var BeliefModel::decode_logits(Tape& t, ParamStore& dec, DecCtx& ctx,
                               Var obs_k) const {
  Var x = dense(t, dec, "dec.l3", t.concat({ctx.feat, obs_k}), Act::tanh);
  Var y;
  if (recurrent_decoder_) {
    ctx.h = t.gru_step(dec, "dec.gru", ctx.h, x);
    y = dense(t, dec, "dec.l5", ctx.h, Act::tanh);
  } else {
    Var ff = dense(t, dec, "dec.ff", x, Act::tanh);
    y = dense(t, dec, "dec.l5", ff, Act::tanh);
  }
  return t.affine(dec, "dec.logits.w", "dec.logits.b", y, Act::none);
}

Var BeliefModel::decode_future_t(Tape& t, ParamStore& dec, Var m_sample,
                                 Var mt_sample, const EpisodeTensors& ep,
                                 int first_step) const {
  DecCtx ctx = decode_begin(t, dec, m_sample, mt_sample);
  std::vector<Var> lps;
  lps.reserve(size_t(std::max(0, ep.len - first_step)));
  for (int k = std::max(0, first_step); k < ep.len; ++k) {
    Var obs_k = t.input(std::span<const double>(
        ep.obs.data() + size_t(k) * ep.obs_dim, size_t(ep.obs_dim)));
    Var logits = decode_logits(t, dec, ctx, obs_k);
    lps.push_back(t.cat_logprob(logits, int(ep.opp_actions[size_t(k)])));
  }
  return t.stack_sum(lps);
}

double BeliefModel::decode_future_actions(ParamStore& dec,
                                          std::span<const double> m_sample,
                                          std::span<const double> mt_sample,
                                          const EpisodeTensors& ep,
                                          int first_step, Tape& scratch) const {
  const bool was_recording = scratch.recording();
  scratch.set_recording(false);
  scratch.clear();
  Var m = scratch.input(m_sample);
  Var mt = scratch.input(mt_sample);
  const double out =
      scratch.val(decode_future_t(scratch, dec, m, mt, ep, first_step))[0];
  scratch.set_recording(was_recording);
  return out;
}

BeliefModel::TrajElbo BeliefModel::trajectory_elbo(
    Tape& t, ParamStore& enc, ParamStore& dec, const EpisodeTensors& ep,
    const ElboOptions& opt, Rng& rng, std::vector<int> timesteps) const {
  if (ep.len < 1) throw protocol_error("trajectory_elbo: empty episode");
  const bool explicit_steps = !timesteps.empty();

  // Shared encoding pass over the whole episode. Record j carries
  // (s_j, u_{j-1}, r_j); j = 0 is the empty-history sentinel with s_0.
  std::vector<EncOut> beliefs(static_cast<size_t>(ep.len));
  Var h = t.zeros(gru_hidden_);
  std::vector<double> acts(size_t(2 * num_actions_), 0.0);
  for (int j = 0; j < ep.len; ++j) {
    Var obs = t.input(std::span<const double>(
        ep.obs.data() + size_t(j) * ep.obs_dim, size_t(ep.obs_dim)));
    std::fill(acts.begin(), acts.end(), 0.0);
    double reward = 0.0;
    if (j > 0) {
      acts[size_t(ep.our_actions[size_t(j - 1)])] = 1.0;
      acts[size_t(num_actions_ + ep.opp_actions[size_t(j - 1)])] = 1.0;
      reward = ep.rewards[size_t(j - 1)];
    }
    Var av = t.input(acts);
    Var rv = t.input(std::span<const double>(&reward, 1));
    beliefs[size_t(j)] = encode_step_t(t, enc, h, obs, av, rv);
    h = beliefs[size_t(j)].h;
  }

  // Timestep selection.
  if (!explicit_steps) {
    if (opt.subsample >= 1.0) {
      timesteps.resize(size_t(ep.len));
      for (int i = 0; i < ep.len; ++i) timesteps[size_t(i)] = i;
    } else {
      const int n_pick = std::max(
          1, int(std::lround(opt.subsample * double(ep.len))));
      std::vector<int> all(static_cast<size_t>(ep.len));
      for (int i = 0; i < ep.len; ++i) all[size_t(i)] = i;
      for (int i = 0; i < n_pick; ++i) {
        const int j = i + rng.uniform_int(ep.len - i);
        std::swap(all[size_t(i)], all[size_t(j)]);
      }
      timesteps.assign(all.begin(), all.begin() + n_pick);
      std::sort(timesteps.begin(), timesteps.end());
    }
  }

  TrajElbo out;
  std::vector<Var> elbo_terms;
  std::vector<double> eps;
  auto values_of = [&](Var v) {
    std::span<const double> s = t.val(v);
    return std::vector<double>(s.begin(), s.end());
  };

  const int kl_block_width = 2 * latent_total();
  if (opt.capture_kl_targets)
    opt.capture_kl_targets->assign(size_t(timesteps.size()) * kl_block_width,
                                   0.0);

  for (size_t step_i = 0; step_i < timesteps.size(); ++step_i) {
    const int ti = timesteps[step_i];
    if (ti < 0 || ti >= ep.len)
      throw protocol_error("elbo timestep out of range: " + std::to_string(ti));
    const EncOut& b = beliefs[size_t(ti)];

    // KL against the previous posterior (values only: gradients are stopped
    // through the prior side), standard normal at t = 0.
    std::vector<Var> kl_parts;
    int block_off = 0;
    auto kl_block = [&](Var mu, Var sigma, Var prev_mu, Var prev_sigma,
                        int dim) {
      std::vector<double> mu0, sig0;
      if (opt.override_kl_targets) {
        const double* base = opt.override_kl_targets->data() +
                             step_i * kl_block_width + block_off;
        mu0.assign(base, base + dim);
        sig0.assign(base + dim, base + 2 * dim);
      } else if (ti == 0) {
        mu0.assign(size_t(dim), 0.0);
        sig0.assign(size_t(dim), 1.0);
      } else {
        mu0 = values_of(prev_mu);
        sig0 = values_of(prev_sigma);
      }
      if (opt.capture_kl_targets) {
        double* base = opt.capture_kl_targets->data() +
                       step_i * kl_block_width + block_off;
        std::copy(mu0.begin(), mu0.end(), base);
        std::copy(sig0.begin(), sig0.end(), base + dim);
      }
      block_off += 2 * dim;
      kl_parts.push_back(t.kl_to_const(mu, sigma, mu0, sig0));
    };
    const EncOut& pb = beliefs[size_t(std::max(0, ti - 1))];
    if (latent_m_ > 0)
      kl_block(b.mu_m, b.sigma_m, pb.mu_m, pb.sigma_m, latent_m_);
    if (latent_mt_ > 0)
      kl_block(b.mu_mt, b.sigma_mt, pb.mu_mt, pb.sigma_mt, latent_mt_);
    Var kl = t.stack_sum(kl_parts);

    // Reconstruction: mean over reparameterized samples of the decoded
    // future log-likelihood.
    const int first = opt.include_current ? ti : ti + 1;
    std::vector<Var> recon_terms;
    for (int s = 0; s < opt.n_samples; ++s) {
      Var m_sample, mt_sample;
      if (latent_m_ > 0) {
        eps.resize(size_t(latent_m_));
        for (auto& e : eps) e = rng.normal();
        m_sample = t.reparam(b.mu_m, b.sigma_m, eps);
      }
      if (latent_mt_ > 0) {
        eps.resize(size_t(latent_mt_));
        for (auto& e : eps) e = rng.normal();
        mt_sample = t.reparam(b.mu_mt, b.sigma_mt, eps);
      }
      recon_terms.push_back(
          decode_future_t(t, dec, m_sample, mt_sample, ep, first));
    }
    Var recon = t.scale(t.stack_sum(recon_terms), 1.0 / double(opt.n_samples));
    Var elbo = t.sub(recon, t.scale(kl, opt.kl_weight));
    elbo_terms.push_back(elbo);

    ElboBreakdown bd;
    bd.timestep = ti;
    bd.reconstruction = t.val(recon)[0];
    bd.kl = t.val(kl)[0];
    if (bd.kl < -1e-9) throw numeric_error("negative KL");
    bd.kl = std::max(0.0, bd.kl);
    bd.total = t.val(elbo)[0];
    out.per_t.push_back(bd);
    out.recon_sum += bd.reconstruction;
    out.kl_sum += bd.kl;
  }

  const double rescale =
      explicit_steps ? 1.0 : double(ep.len) / double(timesteps.size());
  out.total = t.scale(t.stack_sum(elbo_terms), rescale);
  out.recon_sum *= rescale;
  out.kl_sum *= rescale;
  return out;
}

ElboBreakdown BeliefModel::elbo_at_t(ParamStore& enc, ParamStore& dec,
                                     const EpisodeTensors& ep, int t,
                                     int n_samples, double kl_weight, Rng& rng,
                                     Tape& tape) const {
  if (t < 0 || t >= ep.len)
    throw protocol_error("elbo_at_t: timestep " + std::to_string(t) +
                         " outside horizon " + std::to_string(ep.len));
  ElboOptions opt;
  opt.kl_weight = kl_weight;
  opt.n_samples = n_samples;
  TrajElbo te = trajectory_elbo(tape, enc, dec, ep, opt, rng, {t});
  return te.per_t.at(0);
}

VaeMetrics vae_update(const BeliefModel& model, ParamStore& vae_params,
                      std::span<const EpisodeTensors> batch,
                      const ElboOptions& opt, Optimizer& optimizer, Rng& rng,
                      Tape& tape) {
  if (batch.empty()) throw protocol_error("vae_update: empty batch");
  vae_params.zero_grads();
  VaeMetrics m;
  const double inv = 1.0 / double(batch.size());
  for (const EpisodeTensors& ep : batch) {
    tape.clear();
    BeliefModel::TrajElbo te =
        model.trajectory_elbo(tape, vae_params, vae_params, ep, opt, rng);
    const double total = tape.val(te.total)[0];
    if (!std::isfinite(total)) throw numeric_error("vae_update: non-finite ELBO");
    // maximize: accumulate gradients of -ELBO/B
    tape.backward(te.total, -inv);
    m.recon += te.recon_sum * inv;
    m.kl += te.kl_sum * inv;
    m.elbo += total * inv;
  }
  m.grad_norm = vae_params.grad_norm();
  optimizer.step(vae_params);
  return m;
}

}  // namespace meliba
