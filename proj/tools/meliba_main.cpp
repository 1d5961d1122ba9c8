#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "meliba/analysis.hpp"
#include "meliba/config.hpp"
#include "meliba/trainer.hpp"

namespace fs = std::filesystem;
using namespace meliba;

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void print_eval_report(const EvalReport& rep) {
  std::printf("episodes: %d\n", rep.episodes);
  std::printf("mean_return: %s\n", g17(rep.mean_return).c_str());
  std::printf("ci_half_width_95: %s\n", g17(rep.ci_half_width).c_str());
  for (const auto& [kind, ks] : rep.per_kind)
    std::printf("return_vs_%s: %s (n=%d)\n",
                opponent_kind_name(kind).c_str(), g17(ks.mean_return).c_str(),
                ks.episodes);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "meliba: meta-training belief-conditioned agents that adapt online to "
      "initially unknown opponents"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand(
      "train", "Run the meta-training loop into a run directory");
  std::string config_src = "chicken";
  std::vector<std::string> overrides;
  std::string out_dir = "runs/latest";
  uint64_t seed_flag = 0;
  bool seed_set = false, resume = false;
  train_cmd->add_option("--config", config_src,
                        "config file path or builtin preset "
                        "(chicken, treasure, chicken_meliba, ...)");
  train_cmd->add_option("--override,-O", overrides,
                        "key=value dotted-path assignments, last wins");
  train_cmd->add_option("--out", out_dir, "run directory");
  train_cmd->add_flag("--resume", resume,
                      "continue from the latest checkpoint in --out");
  train_cmd->add_option("--seed", seed_flag, "shorthand for -O seed=N")
      ->each([&](const std::string&) { seed_set = true; });

  // evaluate
  auto* eval_cmd =
      app.add_subcommand("evaluate", "Evaluate a checkpoint with frozen parameters");
  std::string ckpt_path;
  int eval_episodes = 96;
  bool greedy = false;
  uint64_t eval_seed = 7;
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval_cmd->add_option("--episodes", eval_episodes, "number of meta-episodes");
  eval_cmd->add_flag("--greedy", greedy, "argmax actions");
  eval_cmd->add_option("--seed", eval_seed, "evaluation stream seed");

  // rollout
  auto* rollout_cmd = app.add_subcommand(
      "rollout", "Write greedy rollouts as JSON lines (one record per step)");
  std::string rollout_out = "rollouts.jsonl";
  int rollout_episodes = 3;
  uint64_t rollout_seed = 7;
  bool rollout_stochastic = false;
  rollout_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")
      ->required();
  rollout_cmd->add_option("--episodes", rollout_episodes, "episodes to roll");
  rollout_cmd->add_option("--out", rollout_out, "output .jsonl path");
  rollout_cmd->add_option("--seed", rollout_seed, "stream seed");
  rollout_cmd->add_flag("--stochastic", rollout_stochastic,
                        "sample actions instead of argmax");

  // export-latents
  auto* export_cmd = app.add_subcommand(
      "export-latents", "Roll out greedily and write per-step belief vectors");
  std::string export_out = "latents.csv";
  int export_episodes = 100;
  uint64_t export_seed = 7;
  export_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")
      ->required();
  export_cmd->add_option("--episodes", export_episodes, "episodes to export");
  export_cmd->add_option("--out", export_out, "output .csv path");
  export_cmd->add_option("--seed", export_seed, "stream seed");

  // probe
  auto* probe_cmd = app.add_subcommand(
      "probe", "Fit a logistic opponent-type probe on an exported latent table");
  std::string probe_latents;
  std::vector<std::string> probe_features = {"mu_m", "mu_mt"};
  int probe_fit = 80, probe_timestep = -1;
  probe_cmd->add_option("--latents", probe_latents, "latent csv")->required();
  probe_cmd->add_option("--features", probe_features,
                        "feature column prefixes (e.g. mu_m, h)");
  probe_cmd->add_option("--fit-episodes", probe_fit,
                        "episodes used for fitting; the rest are held out");
  probe_cmd->add_option("--timestep", probe_timestep,
                        "fit and test on a single timestep (-1 = pooled)");

  // oracle
  auto* oracle_cmd = app.add_subcommand(
      "oracle", "Exact Bayes-optimal value of the repeated Chicken game");
  std::string oracle_env = "chicken";
  int oracle_horizon = 13;
  std::vector<double> oracle_prior = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  oracle_cmd->add_option("--env", oracle_env, "environment (chicken only)");
  oracle_cmd->add_option("--horizon", oracle_horizon, "game length");
  oracle_cmd->add_option("--prior", oracle_prior,
                         "prior weights over T4T-1/2/3");

  // aggregate
  auto* agg_cmd = app.add_subcommand(
      "aggregate", "Mean return vs frames with 95% CI across run directories");
  std::vector<std::string> agg_runs;
  std::string agg_column = "mean_return", agg_out = "curve.csv";
  agg_cmd->add_option("--runs", agg_runs, "run directories")->required();
  agg_cmd->add_option("--column", agg_column, "metrics column to aggregate");
  agg_cmd->add_option("--out", agg_out, "output csv");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      if (seed_set) overrides.push_back("seed=" + std::to_string(seed_flag));
      RunConfig cfg = load_config(config_src, overrides);
      TrainResult res = train(cfg, out_dir, resume);
      std::printf("updates: %d\nframes_total: %lld\nrl_frames: %lld\n"
                  "final_checkpoint: %s\n",
                  res.updates, (long long)res.frames_total,
                  (long long)res.rl_frames, res.final_checkpoint.c_str());
    } else if (*eval_cmd) {
      EvalReport rep =
          evaluate_checkpoint(ckpt_path, eval_episodes, greedy, eval_seed);
      print_eval_report(rep);
    } else if (*rollout_cmd) {
      LoadedRun run = load_checkpoint_bundle(ckpt_path);
      CollectContext ctx = run.context();
      ctx.greedy = !rollout_stochastic;
      Rng rng(rollout_seed);
      if (rollout_out.find('/') != std::string::npos)
        fs::create_directories(fs::path(rollout_out).parent_path());
      write_rollouts_jsonl(ctx, rollout_episodes, rng, rollout_out);
      std::printf("wrote %s\n", rollout_out.c_str());
    } else if (*export_cmd) {
      LoadedRun run = load_checkpoint_bundle(ckpt_path);
      Rng rng(export_seed);
      if (export_out.find('/') != std::string::npos)
        fs::create_directories(fs::path(export_out).parent_path());
      export_latents(run, export_episodes, rng, export_out);
      std::printf("wrote %s\n", export_out.c_str());
    } else if (*probe_cmd) {
      LatentTable table = read_latent_csv(probe_latents);
      LatentTable selected = select_features(table, probe_features, -1);
      // split by episode id: first fit-episodes fit, the rest test
      LatentTable fit = selected, test = selected;
      fit.episode.clear(); fit.timestep.clear(); fit.label.clear();
      fit.features.clear();
      test.episode.clear(); test.timestep.clear(); test.label.clear();
      test.features.clear();
      for (int r = 0; r < selected.rows(); ++r) {
        LatentTable& dst = selected.episode[size_t(r)] < probe_fit ? fit : test;
        if (probe_timestep >= 0 &&
            selected.timestep[size_t(r)] != probe_timestep)
          continue;
        dst.episode.push_back(selected.episode[size_t(r)]);
        dst.timestep.push_back(selected.timestep[size_t(r)]);
        dst.label.push_back(selected.label[size_t(r)]);
        for (int c = 0; c < selected.dim(); ++c)
          dst.features.push_back(selected.row(r)[c]);
      }
      ProbeModel model = fit_type_probe(fit);
      std::printf("fit_rows: %d\niterations: %d\n", model.fit_rows,
                  model.iterations);
      std::printf("overall_heldout_accuracy: %s\n",
                  g17(probe_accuracy_overall(model, test)).c_str());
      for (const auto& [t, acc] : probe_accuracy(model, test))
        std::printf("accuracy_t%d: %s\n", t, g17(acc).c_str());
    } else if (*oracle_cmd) {
      if (oracle_env != "chicken") {
        std::fprintf(stderr,
                     "oracle: only the chicken game has an exact solver\n");
        return 1;
      }
      if (oracle_prior.size() != 3) {
        std::fprintf(stderr, "oracle: --prior needs 3 weights\n");
        return 1;
      }
      OracleResult res = chicken_bayes_optimal(
          {oracle_prior[0], oracle_prior[1], oracle_prior[2]}, oracle_horizon);
      std::printf("{\n  \"value\": %s,\n  \"optimal_first_action\": \"%s\",\n"
                  "  \"conditional_values\": {\"t4t1\": %s, \"t4t2\": %s, "
                  "\"t4t3\": %s}\n}\n",
                  g17(res.value).c_str(),
                  res.optimal_first_action == kSwerve ? "swerve" : "straight",
                  g17(res.conditional_values[0]).c_str(),
                  g17(res.conditional_values[1]).c_str(),
                  g17(res.conditional_values[2]).c_str());
    } else if (*agg_cmd) {
      CurveTable table = aggregate_curves(agg_runs, agg_column);
      write_curve_csv(table, agg_out);
      std::printf("wrote %s (%d runs)\n", agg_out.c_str(), table.runs);
    }
  } catch (const config_error& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
