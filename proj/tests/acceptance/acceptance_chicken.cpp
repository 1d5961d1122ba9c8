// Chicken acceptance: near-Bayes-optimality of the trained agent, the
// ablation ordering, and the latent-structure probe. Trains (or reuses)
// thirteen 2M-frame desk-scale runs; finished runs are cached under
// MELIBA_ACCEPT_DIR and reused on later invocations.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "accept_common.hpp"
#include "meliba/analysis.hpp"

using namespace accept;
using namespace meliba;

namespace {

constexpr int kSeeds[3] = {1, 2, 3};
constexpr uint64_t kEvalSeed = 777;
constexpr int kEvalEpisodes = 300;

RunSpec chicken_spec(const std::string& variant, int seed,
                     const std::vector<std::string>& extra = {}) {
  RunSpec s;
  s.name = "chicken_" + variant + "_s" + std::to_string(seed);
  s.preset = "chicken_" + variant;
  s.overrides = {"train.frames=2000000", "seed=" + std::to_string(seed)};
  for (const auto& o : extra) {
    s.overrides.push_back(o);
    if (o == "vae.latent_m=1") s.name = "chicken_" + variant + "_m1_s" +
                                        std::to_string(seed);
  }
  return s;
}

std::vector<double> greedy_returns(const std::string& variant) {
  std::vector<double> out;
  for (int seed : kSeeds) {
    RunSpec s = chicken_spec(variant, seed);
    EvalReport rep = evaluate_checkpoint(final_checkpoint(s), kEvalEpisodes,
                                         true, kEvalSeed);
    out.push_back(rep.mean_return);
  }
  return out;
}

std::string join(const std::vector<double>& v) {
  std::string s = "(";
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? ", " : "") + fmt(v[i]);
  return s + ")";
}

}  // namespace

TEST_CASE("chicken acceptance: train or reuse the desk-scale runs") {
  std::vector<RunSpec> specs;
  for (const char* v : {"meliba", "rl2", "meliba_m", "liom"})
    for (int seed : kSeeds) specs.push_back(chicken_spec(v, seed));
  specs.push_back(
      chicken_spec("meliba", 1, {"vae.latent_m=1", "vae.latent_mt=1"}));
  REQUIRE(ensure_runs(specs, 2));

  const OracleResult oracle =
      chicken_bayes_optimal({1.0 / 3, 1.0 / 3, 1.0 / 3}, 13);
  std::printf("[oracle] V* = %.15g (conditionals %g / %g / %g)\n",
              oracle.value, oracle.conditional_values[0],
              oracle.conditional_values[1], oracle.conditional_values[2]);

  const std::vector<double> meliba = greedy_returns("meliba");
  const std::vector<double> rl2 = greedy_returns("rl2");
  const std::vector<double> meliba_m = greedy_returns("meliba_m");
  const std::vector<double> liom = greedy_returns("liom");

  SUBCASE("C1 near-Bayes-optimality") {
    const double med = median3(meliba);
    const double target = 0.95 * oracle.value;
    const bool pass = med >= target;
    report("C1", pass,
           "median greedy return over 3 seeds " + fmt(med) + " vs 0.95*V* = " +
               fmt(target) + "; per-seed " + join(meliba));
    CHECK(pass);
  }

  SUBCASE("C2 ablation ordering") {
    const double v09 = 0.9 * oracle.value;
    const double v08 = 0.8 * oracle.value;
    const double med_meliba = median3(meliba);
    const double med_rl2 = median3(rl2);
    const double med_m = median3(meliba_m);
    const double med_liom = median3(liom);
    const bool pass_meliba = med_meliba >= v09;
    const bool pass_rl2 = med_rl2 >= v09;
    const bool pass_m = med_m < v08;
    const bool pass_liom = med_liom < med_meliba;
    report("C2", pass_meliba && pass_rl2 && pass_m && pass_liom,
           "meliba " + fmt(med_meliba) + " >= " + fmt(v09) + "; rl2 " +
               fmt(med_rl2) + " >= " + fmt(v09) + "; meliba_m " + fmt(med_m) +
               " < " + fmt(v08) + "; liom " + fmt(med_liom) + " < meliba " +
               fmt(med_meliba) + " | per-seed rl2 " + join(rl2) +
               " meliba_m " + join(meliba_m) + " liom " + join(liom));
    CHECK(pass_meliba);
    CHECK(pass_rl2);
    CHECK(pass_m);
    CHECK(pass_liom);
  }

  SUBCASE("C4 latent structure with one-dimensional latents") {
    RunSpec m1 = chicken_spec("meliba", 1, {"vae.latent_m=1", "vae.latent_mt=1"});
    LoadedRun run = load_checkpoint_bundle(final_checkpoint(m1));
    Rng rng(kEvalSeed);
    LatentTable table = export_latents(run, 100, rng);

    // probe on mu_m at t = 3: first 80 episodes fit, last 20 held out
    LatentTable at3 = select_features(table, {"mu_m"}, 3);
    LatentTable fit = at3, test = at3;
    fit.episode.clear(); fit.timestep.clear(); fit.label.clear();
    fit.features.clear();
    test.episode.clear(); test.timestep.clear(); test.label.clear();
    test.features.clear();
    for (int r = 0; r < at3.rows(); ++r) {
      LatentTable& dst = at3.episode[size_t(r)] < 80 ? fit : test;
      dst.episode.push_back(at3.episode[size_t(r)]);
      dst.timestep.push_back(at3.timestep[size_t(r)]);
      dst.label.push_back(at3.label[size_t(r)]);
      for (int c = 0; c < at3.dim(); ++c)
        dst.features.push_back(at3.row(r)[c]);
    }
    ProbeModel probe = fit_type_probe(fit);
    const double acc = probe_accuracy_overall(probe, test);
    const bool pass_probe = acc >= 0.9;

    // mean sigma_m across episodes: lower at t=5 than t=1
    LatentTable sig = select_features(table, {"sigma_m"}, -1);
    double s1 = 0, s5 = 0;
    int n1 = 0, n5 = 0;
    for (int r = 0; r < sig.rows(); ++r) {
      if (sig.timestep[size_t(r)] == 1) {
        s1 += sig.row(r)[0];
        ++n1;
      } else if (sig.timestep[size_t(r)] == 5) {
        s5 += sig.row(r)[0];
        ++n5;
      }
    }
    s1 /= n1;
    s5 /= n5;
    const bool pass_sigma = s5 < s1;
    report("C4", pass_probe && pass_sigma,
           "held-out probe accuracy on mu_m at t=3: " + fmt(acc) +
               " (need >= 0.9); mean sigma_m t=5 " + fmt(s5) + " < t=1 " +
               fmt(s1));
    CHECK(pass_probe);
    CHECK(pass_sigma);
  }
}
