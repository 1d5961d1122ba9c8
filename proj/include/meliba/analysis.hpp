#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "meliba/opponents.hpp"
#include "meliba/trainer.hpp"

namespace meliba {

// Exact Bayes-optimal solution of the repeated Chicken game against the
// T4T-1/2/3 prior. Because the opponents are deterministic functions of our
// action history, the posterior after any history is the renormalized prior
// over the kinds consistent with the observed actions, and (consistent set,
// our consecutive-swerve streak capped at 3) is a sufficient statistic.
// The dynamic program over (t, set, streak) is exact.
struct OracleResult {
  double value = 0.0;
  int optimal_first_action = 0;  // 0 = swerve, 1 = straight
  std::array<double, 3> conditional_values{};  // best policy vs T4T-1/2/3
};

OracleResult chicken_bayes_optimal(const std::array<double, 3>& prior, int horizon);

// Exhaustive 2^H enumeration of open-loop action sequences against one
// deterministic opponent; exact best response because nothing random or
// hidden remains once the opponent is fixed.
double chicken_best_response_bruteforce(int t4t_k, int horizon);

// Exact expected return (and variance) of uniform-random play against the
// prior, by enumeration over all 2^H of our action sequences.
struct UniformPlayValue {
  double mean = 0.0;
  double variance = 0.0;  // per-episode return variance
};
UniformPlayValue chicken_uniform_play_value(const std::array<double, 3>& prior,
                                            int horizon);

// Latent table: one row per (episode, t) with the opponent label and the
// exported feature columns.
struct LatentTable {
  std::vector<std::string> feature_names;
  std::vector<int> episode;
  std::vector<int> timestep;
  std::vector<int> label;         // opponent kind id
  std::vector<double> features;   // rows * feature_names.size()
  std::map<int, std::string> label_names;

  int rows() const { return int(episode.size()); }
  int dim() const { return int(feature_names.size()); }
  const double* row(int r) const { return features.data() + size_t(r) * dim(); }
};

// Greedy rollouts from a loaded checkpoint; per-step belief vectors with
// ground-truth opponent labels. Refused for variants without a belief
// model. Returns the table and, when csv_path is non-empty, writes it.
LatentTable export_latents(LoadedRun& run, int n_episodes, Rng& rng,
                           const std::string& csv_path = "");

LatentTable read_latent_csv(const std::string& path);
void write_latent_csv(const LatentTable& table, const std::string& path);

// Restrict a table to given feature columns (by prefix match on the column
// name, e.g. "mu_m" selects mu_m_0, mu_m_1, ...) and optionally one timestep.
LatentTable select_features(const LatentTable& table,
                            const std::vector<std::string>& prefixes,
                            int timestep = -1);

// Multinomial logistic probe fit by full-batch gradient descent (lr 0.1,
// at most 5000 iterations or gradient norm < 1e-6, L2 weight 1e-4). The
// objective is convex so the fit is unique up to tolerance.
struct ProbeModel {
  int classes = 0;
  int dim = 0;
  std::vector<int> class_ids;        // label value per class index
  std::vector<double> weights;       // classes * dim
  std::vector<double> bias;          // classes
  // feature standardization fitted on the training rows
  std::vector<double> feat_mean, feat_inv_std;
  int fit_rows = 0;
  int iterations = 0;

  int predict(const double* x) const;
};

ProbeModel fit_type_probe(const LatentTable& fit_table);

// Held-out accuracy as a function of the episode timestep.
std::map<int, double> probe_accuracy(const ProbeModel& model,
                                     const LatentTable& test_table);
double probe_accuracy_overall(const ProbeModel& model,
                              const LatentTable& test_table);

// Mean return vs frames across runs: linear interpolation onto a common
// frame grid, mean and 95% normal CI across runs.
struct CurveTable {
  std::vector<double> frames;
  std::vector<double> mean;
  std::vector<double> ci_half_width;
  int runs = 0;
};

CurveTable aggregate_curves(const std::vector<std::string>& run_dirs,
                            const std::string& column = "mean_return",
                            int grid_points = 200);
void write_curve_csv(const CurveTable& table, const std::string& path);

}  // namespace meliba
