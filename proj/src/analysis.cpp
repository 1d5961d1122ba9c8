#include "meliba/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace meliba {

namespace {

// Opponent action given kind k (1..3) and our current swerve streak.
inline int t4t_action(int k, int streak) {
  return streak >= k ? kSwerve : kStraight;
}

struct DpKey {
  int t, mask, streak;
};

}  // namespace

OracleResult chicken_bayes_optimal(const std::array<double, 3>& prior,
                                   int horizon) {
  if (horizon > 20)
    throw config_error(
        "oracle: horizon " + std::to_string(horizon) +
        " exceeds the exact-DP limit of 20 (the table is small but the "
        "certification sweep is exponential in H)");
  if (horizon < 1) throw config_error("oracle: horizon must be >= 1");
  double psum = 0;
  for (double p : prior) {
    if (p < 0) throw config_error("oracle: negative prior weight");
    psum += p;
  }
  if (std::fabs(psum - 1.0) > 1e-9)
    throw config_error("oracle: prior weights must sum to 1");

  // V[t][mask][streak]; mask over kinds {1,2,3} still consistent, streak
  // capped at 3 (T4T conditions only test streak >= k, k <= 3).
  const int T = horizon;
  auto idx = [](int mask, int streak) { return mask * 4 + streak; };
  std::vector<double> next(8 * 4, 0.0), cur(8 * 4, 0.0);
  // choice[t][mask][streak]: best action
  std::vector<uint8_t> choice(size_t(T) * 8 * 4, 0);

  for (int t = T - 1; t >= 0; --t) {
    for (int mask = 1; mask < 8; ++mask) {
      double mass = 0;
      for (int k = 1; k <= 3; ++k)
        if (mask & (1 << (k - 1))) mass += prior[size_t(k - 1)];
      for (int streak = 0; streak <= 3; ++streak) {
        if (mass <= 0) {
          cur[size_t(idx(mask, streak))] = 0;
          continue;
        }
        double best = -1e300;
        int best_a = 0;
        for (int a = 0; a < 2; ++a) {
          const int next_streak = a == kSwerve ? std::min(streak + 1, 3) : 0;
          double val = 0;
          for (int o = 0; o < 2; ++o) {
            int sub = 0;
            double sub_mass = 0;
            for (int k = 1; k <= 3; ++k) {
              if (!(mask & (1 << (k - 1)))) continue;
              if (t4t_action(k, streak) != o) continue;
              sub |= 1 << (k - 1);
              sub_mass += prior[size_t(k - 1)];
            }
            if (sub == 0) continue;
            const double p = sub_mass / mass;
            const double r = kChickenPayoff[a][o][0];
            const double future =
                t + 1 < T ? next[size_t(idx(sub, next_streak))] : 0.0;
            val += p * (r + future);
          }
          if (val > best + 1e-15) {
            best = val;
            best_a = a;
          }
        }
        cur[size_t(idx(mask, streak))] = best;
        choice[size_t(t) * 32 + size_t(idx(mask, streak))] = uint8_t(best_a);
      }
    }
    std::swap(next, cur);
  }

  OracleResult res;
  res.value = next[size_t(idx(7, 0))];
  res.optimal_first_action = choice[size_t(idx(7, 0))];

  // Conditional value per kind: simulate the DP policy against each
  // deterministic opponent, filtering the consistent set as observations
  // arrive. Their prior-weighted sum must reproduce the DP value.
  for (int k = 1; k <= 3; ++k) {
    if (prior[size_t(k - 1)] <= 0) {
      res.conditional_values[size_t(k - 1)] = 0;
      continue;
    }
    int mask = 7, streak = 0;
    double total = 0;
    for (int t = 0; t < T; ++t) {
      const int a = choice[size_t(t) * 32 + size_t(idx(mask, streak))];
      const int o = t4t_action(k, streak);
      total += kChickenPayoff[a][o][0];
      int sub = 0;
      for (int j = 1; j <= 3; ++j)
        if ((mask & (1 << (j - 1))) && t4t_action(j, streak) == o)
          sub |= 1 << (j - 1);
      mask = sub;
      streak = a == kSwerve ? std::min(streak + 1, 3) : 0;
    }
    res.conditional_values[size_t(k - 1)] = total;
  }
  double check = 0;
  for (int k = 0; k < 3; ++k)
    check += prior[size_t(k)] * res.conditional_values[size_t(k)];
  if (std::fabs(check - res.value) > 1e-9)
    throw numeric_error("oracle self-check failed: policy simulation " +
                        std::to_string(check) + " vs DP value " +
                        std::to_string(res.value));
  return res;
}

double chicken_best_response_bruteforce(int t4t_k, int horizon) {
  if (horizon < 1 || horizon > 20)
    throw config_error("bruteforce: horizon out of range");
  double best = -1e300;
  for (uint32_t seq = 0; seq < (1u << horizon); ++seq) {
    int streak = 0;
    double total = 0;
    for (int t = 0; t < horizon; ++t) {
      const int a = (seq >> t) & 1;  // 0 = swerve, 1 = straight
      const int o = t4t_action(t4t_k, streak);
      total += kChickenPayoff[a][o][0];
      streak = a == kSwerve ? std::min(streak + 1, 3) : 0;
    }
    best = std::max(best, total);
  }
  return best;
}

UniformPlayValue chicken_uniform_play_value(const std::array<double, 3>& prior,
                                            int horizon) {
  if (horizon < 1 || horizon > 20)
    throw config_error("uniform value: horizon out of range");
  UniformPlayValue out;
  double ex = 0, ex2 = 0;
  const double pseq = std::pow(0.5, horizon);
  for (int k = 1; k <= 3; ++k) {
    if (prior[size_t(k - 1)] <= 0) continue;
    for (uint32_t seq = 0; seq < (1u << horizon); ++seq) {
      int streak = 0;
      double total = 0;
      for (int t = 0; t < horizon; ++t) {
        const int a = (seq >> t) & 1;
        const int o = t4t_action(k, streak);
        total += kChickenPayoff[a][o][0];
        streak = a == kSwerve ? std::min(streak + 1, 3) : 0;
      }
      const double p = prior[size_t(k - 1)] * pseq;
      ex += p * total;
      ex2 += p * total * total;
    }
  }
  out.mean = ex;
  out.variance = ex2 - ex * ex;
  return out;
}

// ---------------------------------------------------------------------------
// Latent export

LatentTable export_latents(LoadedRun& run, int n_episodes, Rng& rng,
                           const std::string& csv_path) {
  if (!run.has_vae && run.cfg.variant != Variant::rl2)
    throw config_error("export-latents: variant '" +
                       variant_name(run.cfg.variant) +
                       "' has no belief model to export");
  if (run.cfg.variant == Variant::average)
    throw config_error("export-latents: the average variant has no belief");

  LatentTable table;
  if (run.cfg.variant == Variant::rl2) {
    for (int i = 0; i < run.cfg.rl2_hidden; ++i)
      table.feature_names.push_back("h_" + std::to_string(i));
  } else {
    const BeliefModel& b = run.belief;
    for (int i = 0; i < b.latent_m(); ++i)
      table.feature_names.push_back("mu_m_" + std::to_string(i));
    for (int i = 0; i < b.latent_m(); ++i)
      table.feature_names.push_back("sigma_m_" + std::to_string(i));
    for (int i = 0; i < b.latent_mt(); ++i)
      table.feature_names.push_back("mu_mt_" + std::to_string(i));
    for (int i = 0; i < b.latent_mt(); ++i)
      table.feature_names.push_back("sigma_mt_" + std::to_string(i));
  }

  CollectContext ctx = run.context();
  Rng env_rng = rng.derive(31);
  Rng opp_rng = rng.derive(32);
  Rng policy_rng = rng.derive(33);
  Tape scratch;
  for (int e = 0; e < n_episodes; ++e) {
    CollectedEpisode ce =
        collect_meta_episode(ctx, env_rng, opp_rng, policy_rng, scratch);
    const int W = ce.latent_width;
    if (W != table.dim())
      throw protocol_error("export-latents: latent width mismatch");
    for (int t = 0; t < ce.traj.len(); ++t) {
      table.episode.push_back(e);
      table.timestep.push_back(t);
      table.label.push_back(int(ce.traj.opponent_kind));
      table.label_names[int(ce.traj.opponent_kind)] =
          opponent_kind_name(ce.traj.opponent_kind);
      table.features.insert(table.features.end(),
                            ce.latents.begin() + int64_t(t) * W,
                            ce.latents.begin() + int64_t(t + 1) * W);
    }
  }
  if (!csv_path.empty()) write_latent_csv(table, csv_path);
  return table;
}

void write_latent_csv(const LatentTable& table, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "episode,t,kind";
  for (const auto& n : table.feature_names) f << "," << n;
  f << "\n";
  char buf[40];
  for (int r = 0; r < table.rows(); ++r) {
    f << table.episode[size_t(r)] << "," << table.timestep[size_t(r)] << ","
      << table.label_names.at(table.label[size_t(r)]);
    const double* row = table.row(r);
    for (int c = 0; c < table.dim(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", row[c]);
      f << "," << buf;
    }
    f << "\n";
  }
}

LatentTable read_latent_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw std::runtime_error("cannot read " + path);
  LatentTable table;
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty latent csv");
  {
    std::stringstream ss(line);
    std::string col;
    int i = 0;
    while (std::getline(ss, col, ',')) {
      if (i >= 3) table.feature_names.push_back(col);
      ++i;
    }
  }
  std::map<std::string, int> kind_ids;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string col;
    std::getline(ss, col, ',');
    table.episode.push_back(std::atoi(col.c_str()));
    std::getline(ss, col, ',');
    table.timestep.push_back(std::atoi(col.c_str()));
    std::getline(ss, col, ',');
    if (!kind_ids.count(col)) {
      const int id = int(kind_ids.size());
      kind_ids[col] = id;
      table.label_names[id] = col;
    }
    table.label.push_back(kind_ids[col]);
    while (std::getline(ss, col, ','))
      table.features.push_back(std::atof(col.c_str()));
  }
  if (table.rows() * table.dim() != int(table.features.size()))
    throw std::runtime_error("latent csv: ragged rows in " + path);
  return table;
}

LatentTable select_features(const LatentTable& table,
                            const std::vector<std::string>& prefixes,
                            int timestep) {
  std::vector<int> cols;
  for (int c = 0; c < table.dim(); ++c) {
    const std::string& n = table.feature_names[size_t(c)];
    for (const auto& p : prefixes) {
      // "mu_m" selects mu_m_0, mu_m_1, ... but not mu_mt_0
      if (n == p || n.rfind(p + "_", 0) == 0) {
        cols.push_back(c);
        break;
      }
    }
  }
  if (cols.empty())
    throw config_error("select_features: no columns match the requested prefixes");
  LatentTable out;
  out.label_names = table.label_names;
  for (int c : cols) out.feature_names.push_back(table.feature_names[size_t(c)]);
  for (int r = 0; r < table.rows(); ++r) {
    if (timestep >= 0 && table.timestep[size_t(r)] != timestep) continue;
    out.episode.push_back(table.episode[size_t(r)]);
    out.timestep.push_back(table.timestep[size_t(r)]);
    out.label.push_back(table.label[size_t(r)]);
    for (int c : cols) out.features.push_back(table.row(r)[c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logistic probe

int ProbeModel::predict(const double* x) const {
  int best = 0;
  double best_s = -1e300;
  for (int k = 0; k < classes; ++k) {
    double s = bias[size_t(k)];
    for (int d = 0; d < dim; ++d) {
      const double z = (x[d] - feat_mean[size_t(d)]) * feat_inv_std[size_t(d)];
      s += weights[size_t(k) * dim + d] * z;
    }
    if (s > best_s) {
      best_s = s;
      best = k;
    }
  }
  return class_ids[size_t(best)];
}

ProbeModel fit_type_probe(const LatentTable& fit_table) {
  const int n = fit_table.rows();
  const int d = fit_table.dim();
  if (n == 0) throw config_error("probe: empty fit table");
  std::vector<int> class_ids;
  for (int lbl : fit_table.label)
    if (std::find(class_ids.begin(), class_ids.end(), lbl) == class_ids.end())
      class_ids.push_back(lbl);
  std::sort(class_ids.begin(), class_ids.end());
  const int K = int(class_ids.size());
  if (K < 2)
    throw config_error("probe: fit data contains a single class; degenerate");
  std::vector<int> y(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r)
    y[size_t(r)] = int(std::find(class_ids.begin(), class_ids.end(),
                                 fit_table.label[size_t(r)]) -
                       class_ids.begin());

  ProbeModel m;
  m.classes = K;
  m.dim = d;
  m.class_ids = class_ids;
  m.weights.assign(size_t(K) * d, 0.0);
  m.bias.assign(size_t(K), 0.0);

  // Standardize features so full-batch gradient descent is well conditioned
  // regardless of latent scale; the transform is part of the model.
  m.feat_mean.assign(size_t(d), 0.0);
  m.feat_inv_std.assign(size_t(d), 1.0);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < d; ++j) m.feat_mean[size_t(j)] += fit_table.row(r)[j];
  for (int j = 0; j < d; ++j) m.feat_mean[size_t(j)] /= double(n);
  for (int j = 0; j < d; ++j) {
    double var = 0;
    for (int r = 0; r < n; ++r) {
      const double dd = fit_table.row(r)[j] - m.feat_mean[size_t(j)];
      var += dd * dd;
    }
    m.feat_inv_std[size_t(j)] = 1.0 / std::sqrt(var / double(n) + 1e-12);
  }
  std::vector<double> zrow(static_cast<size_t>(d));

  const double lr = 0.1;
  const double l2 = 1e-4;
  const int max_iters = 5000;
  const double tol = 1e-6;
  std::vector<double> gw(size_t(K) * d), gb(static_cast<size_t>(K)), scores(static_cast<size_t>(K));

  for (int it = 0; it < max_iters; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int r = 0; r < n; ++r) {
      const double* x = fit_table.row(r);
      for (int j = 0; j < d; ++j)
        zrow[size_t(j)] =
            (x[j] - m.feat_mean[size_t(j)]) * m.feat_inv_std[size_t(j)];
      double mx = -1e300;
      for (int k = 0; k < K; ++k) {
        double s = m.bias[size_t(k)];
        for (int j = 0; j < d; ++j)
          s += m.weights[size_t(k) * d + j] * zrow[size_t(j)];
        scores[size_t(k)] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (int k = 0; k < K; ++k) z += std::exp(scores[size_t(k)] - mx);
      for (int k = 0; k < K; ++k) {
        const double p = std::exp(scores[size_t(k)] - mx) / z;
        const double err = p - (y[size_t(r)] == k ? 1.0 : 0.0);
        gb[size_t(k)] += err;
        for (int j = 0; j < d; ++j)
          gw[size_t(k) * d + j] += err * zrow[size_t(j)];
      }
    }
    double norm = 0;
    const double inv_n = 1.0 / double(n);
    for (size_t i = 0; i < gw.size(); ++i) {
      gw[i] = gw[i] * inv_n + l2 * m.weights[i];
      norm += gw[i] * gw[i];
    }
    for (size_t i = 0; i < gb.size(); ++i) {
      gb[i] *= inv_n;
      norm += gb[i] * gb[i];
    }
    for (size_t i = 0; i < gw.size(); ++i) m.weights[i] -= lr * gw[i];
    for (size_t i = 0; i < gb.size(); ++i) m.bias[i] -= lr * gb[i];
    m.iterations = it + 1;
    if (std::sqrt(norm) < tol) break;
  }
  m.fit_rows = n;
  return m;
}

std::map<int, double> probe_accuracy(const ProbeModel& model,
                                     const LatentTable& test_table) {
  std::map<int, std::pair<int, int>> counts;  // t -> (correct, total)
  for (int r = 0; r < test_table.rows(); ++r) {
    auto& c = counts[test_table.timestep[size_t(r)]];
    c.second += 1;
    if (model.predict(test_table.row(r)) == test_table.label[size_t(r)])
      c.first += 1;
  }
  std::map<int, double> acc;
  for (const auto& [t, c] : counts)
    acc[t] = c.second ? double(c.first) / c.second : 0.0;
  return acc;
}

double probe_accuracy_overall(const ProbeModel& model,
                              const LatentTable& test_table) {
  int correct = 0;
  for (int r = 0; r < test_table.rows(); ++r)
    if (model.predict(test_table.row(r)) == test_table.label[size_t(r)])
      ++correct;
  return test_table.rows() ? double(correct) / test_table.rows() : 0.0;
}

// ---------------------------------------------------------------------------
// Learning-curve aggregation

namespace {

struct RunCurve {
  std::vector<double> frames;
  std::vector<double> value;
};

RunCurve read_metrics_column(const std::string& run_dir,
                             const std::string& column) {
  std::ifstream f(run_dir + "/metrics.csv");
  if (!f.good())
    throw config_error("aggregate: cannot read " + run_dir + "/metrics.csv");
  std::string line;
  if (!std::getline(f, line))
    throw config_error("aggregate: empty metrics in " + run_dir);
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  int frames_idx = -1, col_idx = -1;
  for (size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] == "frames") frames_idx = int(i);
    if (cols[i] == column) col_idx = int(i);
  }
  if (frames_idx < 0 || col_idx < 0)
    throw config_error("aggregate: schema mismatch in " + run_dir +
                       "/metrics.csv (need columns 'frames' and '" + column +
                       "')");
  RunCurve rc;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string c;
    std::vector<std::string> fields;
    while (std::getline(ss, c, ',')) fields.push_back(c);
    if (int(fields.size()) <= std::max(frames_idx, col_idx)) continue;
    const std::string& v = fields[size_t(col_idx)];
    if (v.empty()) continue;
    rc.frames.push_back(std::atof(fields[size_t(frames_idx)].c_str()));
    rc.value.push_back(std::atof(v.c_str()));
  }
  if (rc.frames.empty())
    throw config_error("aggregate: no usable rows in " + run_dir);
  return rc;
}

double interp(const RunCurve& rc, double x) {
  if (x <= rc.frames.front()) return rc.value.front();
  if (x >= rc.frames.back()) return rc.value.back();
  const auto it = std::lower_bound(rc.frames.begin(), rc.frames.end(), x);
  const size_t i = size_t(it - rc.frames.begin());
  const double x0 = rc.frames[i - 1], x1 = rc.frames[i];
  const double y0 = rc.value[i - 1], y1 = rc.value[i];
  return x1 == x0 ? y0 : y0 + (y1 - y0) * (x - x0) / (x1 - x0);
}

}  // namespace

CurveTable aggregate_curves(const std::vector<std::string>& run_dirs,
                            const std::string& column, int grid_points) {
  if (run_dirs.empty()) throw config_error("aggregate: no runs given");
  std::vector<RunCurve> curves;
  for (const auto& dir : run_dirs)
    curves.push_back(read_metrics_column(dir, column));
  double lo = -1e300, hi = 1e300;
  for (const auto& rc : curves) {
    lo = std::max(lo, rc.frames.front());
    hi = std::min(hi, rc.frames.back());
  }
  if (hi < lo) hi = lo;
  CurveTable out;
  out.runs = int(curves.size());
  const int G = std::max(2, grid_points);
  for (int g = 0; g < G; ++g) {
    const double x = lo + (hi - lo) * double(g) / double(G - 1);
    double mean = 0;
    for (const auto& rc : curves) mean += interp(rc, x);
    mean /= double(curves.size());
    double var = 0;
    for (const auto& rc : curves) {
      const double d = interp(rc, x) - mean;
      var += d * d;
    }
    var = curves.size() > 1 ? var / double(curves.size() - 1) : 0.0;
    out.frames.push_back(x);
    out.mean.push_back(mean);
    out.ci_half_width.push_back(1.96 * std::sqrt(var / double(curves.size())));
  }
  return out;
}

void write_curve_csv(const CurveTable& table, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "frames,mean,ci_half_width\n";
  char buf[128];
  for (size_t i = 0; i < table.frames.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", table.frames[i],
                  table.mean[i], table.ci_half_width[i]);
    f << buf << "\n";
  }
}

}  // namespace meliba
