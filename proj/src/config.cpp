#include "meliba/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

namespace meliba {

Variant variant_from_string(const std::string& s) {
  if (s == "meliba") return Variant::meliba;
  if (s == "meliba_m") return Variant::meliba_m;
  if (s == "meliba_mt") return Variant::meliba_mt;
  if (s == "meliba_flat") return Variant::meliba_flat;
  if (s == "liom") return Variant::liom;
  if (s == "rl2") return Variant::rl2;
  if (s == "average") return Variant::average;
  throw config_error("unknown variant: " + s);
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::meliba: return "meliba";
    case Variant::meliba_m: return "meliba_m";
    case Variant::meliba_mt: return "meliba_mt";
    case Variant::meliba_flat: return "meliba_flat";
    case Variant::liom: return "liom";
    case Variant::rl2: return "rl2";
    case Variant::average: return "average";
  }
  return "unknown";
}

EnvConfig RunConfig::env_config() const {
  EnvConfig e;
  e.kind = env;
  e.horizon = horizon;
  e.grid = grid;
  e.coins_per_color = coins_per_color;
  e.chicken_time_obs = chicken_time_obs;
  return e;
}

void RunConfig::validate() const {
  env_config().validate();
  if (frames < 0) throw config_error("train.frames must be >= 0");
  if (batch_frames < 1) throw config_error("policy.batch_frames must be >= 1");
  if (minibatches < 1) throw config_error("policy.minibatches must be >= 1");
  if (ppo_epochs < 1) throw config_error("policy.epochs must be >= 1");
  if (latent_m < 0 || latent_mt < 0)
    throw config_error("vae.latent_m and vae.latent_mt must be >= 0");
  if (variant == Variant::meliba_m && latent_m == 0)
    throw config_error("meliba_m requires vae.latent_m > 0");
  if (variant == Variant::meliba_mt && latent_mt == 0)
    throw config_error("meliba_mt requires vae.latent_mt > 0");
  if (variant_has_vae(variant) && latent_m + latent_mt == 0)
    throw config_error("belief variants require a positive latent size");
  if (elbo_subsample <= 0.0 || elbo_subsample > 1.0)
    throw config_error("vae.elbo_subsample must be in (0, 1]");
  if (vae_samples < 1) throw config_error("vae.samples must be >= 1");
  if (eval_every < 1) throw config_error("train.eval_every must be >= 1");
  if (policy_optimizer != "adam" && policy_optimizer != "rmsprop")
    throw config_error("policy.optimizer must be adam or rmsprop");
  if (vae_optimizer != "adam" && vae_optimizer != "rmsprop")
    throw config_error("vae.optimizer must be adam or rmsprop");
}

void apply_env_defaults(RunConfig& cfg, EnvKind env) {
  const Variant v = cfg.variant;
  const uint64_t seed = cfg.seed;
  cfg = RunConfig{};
  cfg.env = env;
  cfg.variant = v;
  cfg.seed = seed;
  if (env == EnvKind::chicken) {
    cfg.horizon = 13;
    cfg.frames = 10'000'000;
    cfg.batch_frames = 2080;
    cfg.minibatches = 8;
    cfg.pretrain_frames = 208'000;
    cfg.pretrain_updates = 5000;
    cfg.vae_batch_traj = 50;
    cfg.buffer_dedup = true;  // "2500 (unique traj)"
    cfg.latent_m = 2;
    cfg.latent_mt = 2;
    cfg.embed_state = 32;
    cfg.enc_gru = 64;
  } else {
    cfg.horizon = 100;
    cfg.grid = 10;
    cfg.frames = 25'000'000;
    cfg.batch_frames = 1600;
    cfg.minibatches = 4;
    cfg.pretrain_frames = 32'000;
    cfg.pretrain_updates = 1000;
    cfg.vae_batch_traj = 15;
    cfg.latent_m = 5;
    cfg.latent_mt = 5;
    cfg.embed_state = 64;
    cfg.enc_gru = 128;
  }
}

namespace {

struct Key {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_int(int64_t v) { return std::to_string(v); }

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int64_t parse_int(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    // accept scientific notation for frame counts (2e6 etc.)
    if (s.find_first_of("eE.") != std::string::npos) {
      const double d = std::stod(s, &pos);
      if (pos != s.size() || d != double(int64_t(d)))
        throw std::invalid_argument("frac");
      return int64_t(d);
    }
    const int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trail");
    return v;
  } catch (const std::exception&) {
    throw config_error("key " + key + ": expected an integer, got '" + s + "'");
  }
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trail");
    return v;
  } catch (const std::exception&) {
    throw config_error("key " + key + ": expected a number, got '" + s + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw config_error("key " + key + ": expected true/false, got '" + s + "'");
}

#define INT_KEY(NAME, FIELD)                                          \
  Key{NAME, [](const RunConfig& c) { return fmt_int(c.FIELD); },      \
      [](RunConfig& c, const std::string& s) {                        \
        c.FIELD = decltype(c.FIELD)(parse_int(NAME, s));              \
      }}
#define DBL_KEY(NAME, FIELD)                                          \
  Key{NAME, [](const RunConfig& c) { return fmt_double(c.FIELD); },   \
      [](RunConfig& c, const std::string& s) {                        \
        c.FIELD = parse_double(NAME, s);                              \
      }}
#define BOOL_KEY(NAME, FIELD)                                                \
  Key{NAME,                                                                  \
      [](const RunConfig& c) { return c.FIELD ? "true" : "false"; },         \
      [](RunConfig& c, const std::string& s) { c.FIELD = parse_bool(NAME, s); }}
#define STR_KEY(NAME, FIELD)                                        \
  Key{NAME, [](const RunConfig& c) { return c.FIELD; },             \
      [](RunConfig& c, const std::string& s) { c.FIELD = s; }}

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      Key{"env", [](const RunConfig& c) { return env_kind_name(c.env); },
          [](RunConfig& c, const std::string& s) {
            apply_env_defaults(c, env_kind_from_string(s));
          }},
      Key{"variant",
          [](const RunConfig& c) { return variant_name(c.variant); },
          [](RunConfig& c, const std::string& s) {
            c.variant = variant_from_string(s);
          }},
      INT_KEY("seed", seed),
      INT_KEY("env.horizon", horizon),
      INT_KEY("env.grid", grid),
      INT_KEY("env.coins_per_color", coins_per_color),
      BOOL_KEY("env.chicken_time_obs", chicken_time_obs),
      STR_KEY("env.opponents", opponents),
      INT_KEY("train.frames", frames),
      INT_KEY("train.eval_every", eval_every),
      INT_KEY("train.eval_episodes", eval_episodes),
      INT_KEY("train.checkpoint_keep", checkpoint_keep),
      INT_KEY("train.interrupt_after_updates", interrupt_after_updates),
      STR_KEY("policy.optimizer", policy_optimizer),
      DBL_KEY("policy.lr", policy_lr),
      INT_KEY("policy.epochs", ppo_epochs),
      INT_KEY("policy.minibatches", minibatches),
      DBL_KEY("policy.clip", clip),
      INT_KEY("policy.batch_frames", batch_frames),
      DBL_KEY("policy.value_loss_coef", value_loss_coef),
      DBL_KEY("policy.entropy_coef", entropy_coef),
      DBL_KEY("policy.gamma", gamma),
      DBL_KEY("policy.tau", gae_tau),
      DBL_KEY("policy.max_grad_norm", max_grad_norm),
      BOOL_KEY("policy.advantage_norm", advantage_norm),
      BOOL_KEY("policy.input_norm", input_norm),
      BOOL_KEY("policy.separate_critic", separate_critic),
      INT_KEY("policy.hidden", policy_hidden),
      INT_KEY("policy.rl2_hidden", rl2_hidden),
      INT_KEY("policy.rl2_layers", rl2_layers),
      STR_KEY("vae.optimizer", vae_optimizer),
      DBL_KEY("vae.lr", vae_lr),
      INT_KEY("vae.buffer", buffer_capacity),
      INT_KEY("vae.batch_traj", vae_batch_traj),
      DBL_KEY("vae.kl_weight", kl_weight),
      INT_KEY("vae.pretrain_frames", pretrain_frames),
      INT_KEY("vae.pretrain_updates", pretrain_updates),
      INT_KEY("vae.latent_m", latent_m),
      INT_KEY("vae.latent_mt", latent_mt),
      INT_KEY("vae.samples", vae_samples),
      BOOL_KEY("vae.recon_include_current", recon_include_current),
      DBL_KEY("vae.elbo_subsample", elbo_subsample),
      INT_KEY("vae.updates_per_rl_update", vae_updates_per_rl_update),
      DBL_KEY("vae.max_grad_norm", vae_max_grad_norm),
      BOOL_KEY("vae.dedup", buffer_dedup),
      INT_KEY("enc.embed_state", embed_state),
      INT_KEY("enc.embed_action", embed_action),
      INT_KEY("enc.embed_reward", embed_reward),
      INT_KEY("enc.gru", enc_gru),
      INT_KEY("enc.deep1", enc_deep1),
      INT_KEY("enc.deep2", enc_deep2),
      INT_KEY("dec.l1", dec_l1),
      INT_KEY("dec.l2", dec_l2),
      INT_KEY("dec.l3", dec_l3),
      INT_KEY("dec.gru", dec_gru),
      INT_KEY("dec.l5", dec_l5),
  };
  return keys;
}

#undef INT_KEY
#undef DBL_KEY
#undef BOOL_KEY
#undef STR_KEY

int edit_distance(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = int(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = int(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

const Key* find_key(const std::string& name) {
  for (const auto& k : registry())
    if (name == k.name) return &k;
  return nullptr;
}

[[noreturn]] void unknown_key(const std::string& name) {
  std::string best;
  int best_d = 1 << 30;
  for (const auto& k : registry()) {
    const int d = edit_distance(name, k.name);
    if (d < best_d) {
      best_d = d;
      best = k.name;
    }
  }
  throw config_error("unknown config key '" + name + "' (nearest known key: '" +
                     best + "')");
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

void apply_line(RunConfig& cfg, const std::string& line) {
  const size_t eq = line.find('=');
  if (eq == std::string::npos)
    throw config_error("config line is not key = value: '" + line + "'");
  const std::string key = trim(line.substr(0, eq));
  const std::string value = trim(line.substr(eq + 1));
  const Key* k = find_key(key);
  if (!k) unknown_key(key);
  k->set(cfg, value);
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& assignment) {
  apply_line(cfg, assignment);
}

RunConfig parse_config_text(const std::string& text,
                            const std::vector<std::string>& overrides) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    apply_line(cfg, line);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& source,
                      const std::vector<std::string>& overrides) {
  RunConfig cfg;
  std::ifstream file(source);
  if (file.good()) {
    std::string line;
    while (std::getline(file, line)) {
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      apply_line(cfg, line);
    }
  } else {
    // builtin preset: "<env>" or "<env>_<variant>"
    std::string env = source, variant;
    for (const char* v :
         {"_meliba_flat", "_meliba_mt", "_meliba_m", "_meliba", "_liom",
          "_rl2", "_average"}) {
      const size_t n = std::strlen(v);
      if (source.size() > n && source.compare(source.size() - n, n, v) == 0) {
        env = source.substr(0, source.size() - n);
        variant = std::string(v + 1);
        break;
      }
    }
    try {
      apply_env_defaults(cfg, env_kind_from_string(env));
    } catch (const config_error&) {
      throw config_error("config '" + source +
                         "' is neither a readable file nor a builtin preset");
    }
    if (!variant.empty()) cfg.variant = variant_from_string(variant);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : registry()) {
    out += k.name;
    out += " = ";
    out += k.get(cfg);
    out += "\n";
  }
  return out;
}

// SHA-1, needed only for the run manifest's content hash.
namespace {
struct Sha1 {
  uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u,
                   0xC3D2E1F0u};
  uint64_t total = 0;
  uint8_t buf[64];
  size_t fill = 0;

  static uint32_t rol(uint32_t v, int k) { return (v << k) | (v >> (32 - k)); }

  void block(const uint8_t* p) {
    uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = uint32_t(p[4 * i]) << 24 | uint32_t(p[4 * i + 1]) << 16 |
             uint32_t(p[4 * i + 2]) << 8 | uint32_t(p[4 * i + 3]);
    for (int i = 16; i < 80; ++i)
      w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const uint32_t t = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = t;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }

  void update(const void* data, size_t n) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    total += n;
    while (n > 0) {
      const size_t take = std::min(n, sizeof(buf) - fill);
      std::memcpy(buf + fill, p, take);
      fill += take;
      p += take;
      n -= take;
      if (fill == sizeof(buf)) {
        block(buf);
        fill = 0;
      }
    }
  }

  std::string hex() {
    const uint64_t bits = total * 8;
    uint8_t pad = 0x80;
    update(&pad, 1);
    uint8_t zero = 0;
    while (fill != 56) update(&zero, 1);
    uint8_t len[8];
    for (int i = 0; i < 8; ++i) len[i] = uint8_t(bits >> (56 - 8 * i));
    update(len, 8);
    char out[41];
    for (int i = 0; i < 5; ++i)
      std::snprintf(out + 8 * i, 9, "%08x", h[i]);
    return std::string(out, 40);
  }
};
}  // namespace

std::string sha1_blob_hex(const std::string& content) {
  Sha1 s;
  const std::string header = "blob " + std::to_string(content.size());
  s.update(header.data(), header.size() + 1);  // include the NUL
  s.update(content.data(), content.size());
  return s.hex();
}

std::string config_hash(const RunConfig& cfg) {
  return sha1_blob_hex(serialize_config(cfg));
}

}  // namespace meliba
