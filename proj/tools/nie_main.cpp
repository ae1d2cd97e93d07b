// Command-line front end: dataset generation, training, evaluation, and
// trajectory replay, all driven by one flat key-value configuration.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>

#include "CLI11.hpp"
#include "nie/cli.hpp"

namespace {

// The config file and the seed environment variable are applied before flag
// parsing so that explicit flags always win.
nie::RunConfig preload_config(int argc, char** argv) {
  nie::RunConfig cfg;
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") cfg = nie::RunConfig::load(argv[i + 1]);
  if (const char* env = std::getenv("NIE_SEED")) {
    try {
      size_t used = 0;
      cfg.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw nie::CliError(std::string("NIE_SEED is not an integer: ") + env);
    }
  }
  return cfg;
}

void echo_config(const nie::RunConfig& cfg) {
  std::cout << cfg.to_json().dump(2) << "\n";
}

void add_common(CLI::App* sub, nie::RunConfig& cfg, std::string& config_path) {
  sub->add_option("--config", config_path, "JSON run configuration file");
  sub->add_option("--seed", cfg.seed, "seed for every random choice");
  sub->add_option("--task", cfg.task, "obsnav, objplace, or pointgoal");
  sub->add_option("--data-dir", cfg.data_dir, "dataset directory");
}

int run(int argc, char** argv) {
  nie::RunConfig cfg = preload_config(argc, argv);
  std::string config_path;

  CLI::App app{"neural interaction navigation toolkit"};
  app.require_subcommand(1);

  CLI::App* gen = app.add_subcommand("gen-data", "generate an episode dataset");
  add_common(gen, cfg, config_path);
  gen->add_option("--split", cfg.split, "train, val, or test");
  int gen_count = -1;
  gen->add_option("--count", gen_count, "episodes to generate (default per split)");

  CLI::App* train = app.add_subcommand("train", "train a policy");
  add_common(train, cfg, config_path);
  train->add_option("--variant", cfg.variant, "nie, ppo, or rgbdk");
  train->add_option("--run-dir", cfg.run_dir, "output directory for logs and checkpoints");
  train->add_option("--total-steps", cfg.total_steps, "environment steps to train for");
  train->add_option("--workers", cfg.workers, "parallel rollout environments");
  train->add_option("--eval-period", cfg.eval_period, "steps between evaluations");
  train->add_option("--eval-episodes", cfg.eval_episodes, "episodes per evaluation");
  train->add_option("--stop-sr", cfg.stop_sr, "stop once eval success reaches this percent");
  train->add_option("--alpha", cfg.alpha, "prediction loss weight");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval, cfg, config_path);
  eval->add_option("--variant", cfg.variant, "nie, ppo, or rgbdk");
  eval->add_option("--checkpoint", cfg.checkpoint, "checkpoint file (empty = fresh weights)");
  eval->add_option("--split", cfg.split, "train, val, or test");
  int eval_limit = -1;
  eval->add_option("--episodes", eval_limit, "evaluate only the first N episodes");
  std::string results_path, traj_path;
  eval->add_option("--out", results_path, "write per-episode results CSV here");
  eval->add_option("--traj-out", traj_path, "write the trajectory log here");

  CLI::App* replay = app.add_subcommand("replay", "re-simulate a logged trajectory");
  add_common(replay, cfg, config_path);
  replay->add_option("--split", cfg.split, "split the trajectory was evaluated on");
  std::string replay_traj;
  int64_t replay_episode = 0;
  replay->add_option("--traj", replay_traj, "trajectory log CSV")->required();
  replay->add_option("--episode", replay_episode, "episode index within the log");
  replay->add_option("--out", cfg.out_dir, "directory for frames and rewards.csv");

  CLI::App* dump = app.add_subcommand("dump-config", "print every default setting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (dump->parsed()) {
    std::cout << nie::RunConfig{}.to_json().dump(2) << "\n";
    return 0;
  }

  echo_config(cfg);

  if (gen->parsed()) {
    const int n = gen_count >= 0 ? gen_count : nie::default_split_count(cfg.split, cfg);
    const std::vector<nie::Episode> eps = nie::generate_split(cfg, cfg.split, n);
    std::filesystem::create_directories(cfg.data_dir);
    const std::string path = cfg.dataset_path(cfg.split);
    nie::save_dataset(eps, path);
    std::cout << "wrote " << eps.size() << " episodes to " << path << "\n";
    return 0;
  }

  if (train->parsed()) {
    const auto train_eps = nie::load_dataset(cfg.dataset_path("train"));
    const auto val_eps = nie::load_dataset(cfg.dataset_path("val"));
    const nie::TrainResult res =
        nie::train_loop<float>(cfg.train_config(), cfg.model_config(), train_eps,
                               val_eps, cfg.reward_config(), cfg.run_dir,
                               cfg.to_json(), &std::cout);
    std::cout << "done: " << res.env_steps << " steps, " << res.updates
              << " updates\nfinal sr " << res.final_metrics.sr << " fdt "
              << res.final_metrics.fdt << " spl " << res.final_metrics.spl
              << "\ncheckpoint " << res.final_checkpoint << "\n";
    return 0;
  }

  if (eval->parsed()) {
    auto eps = nie::load_dataset(cfg.dataset_path(cfg.split));
    if (eval_limit >= 0 && eval_limit < static_cast<int>(eps.size()))
      eps.resize(static_cast<size_t>(eval_limit));
    nie::ParameterStore<float> store;
    std::mt19937_64 rng(cfg.seed);
    const auto model = nie::ModelBundle<float>::create(
        store, cfg.model_config(), nie::variant_from_name(cfg.variant), rng);
    if (!cfg.checkpoint.empty()) {
      nie::ParameterStore<float> loaded;
      nie::load_checkpoint(loaded, cfg.checkpoint);
      nie::verify_compatible(store, loaded);
      store = std::move(loaded);
    }
    const nie::EvalOutcome out = nie::evaluate(store, model, eps, cfg.reward_config());
    std::cout << "episodes " << out.results.size() << "\nsr " << out.metrics.sr
              << "\nfdt " << out.metrics.fdt << "\nspl " << out.metrics.spl << "\n";
    if (!results_path.empty()) {
      std::ofstream os(results_path);
      if (!os) throw nie::CliError("cannot open results CSV: " + results_path);
      os << "episode,success,steps,final_distance,path_length,optimal_length\n";
      for (size_t i = 0; i < out.results.size(); ++i) {
        const nie::EpisodeResult& r = out.results[i];
        os << i << "," << (r.success ? 1 : 0) << "," << r.steps << ","
           << nie::detail::fmt_double(r.final_distance) << ","
           << nie::detail::fmt_double(r.path_length) << ","
           << nie::detail::fmt_double(r.optimal_length) << "\n";
      }
      if (!os) throw nie::CliError("results CSV write failed: " + results_path);
    }
    if (!traj_path.empty())
      nie::detail::write_trajectories(traj_path, out.trajectories);
    return 0;
  }

  if (replay->parsed()) {
    const auto eps = nie::load_dataset(cfg.dataset_path(cfg.split));
    const nie::ReplayResult res = nie::replay_trajectory(
        replay_traj, replay_episode, eps, cfg.reward_config(),
        static_cast<int>(cfg.categories), cfg.out_dir);
    std::cout << "replayed " << res.steps << " steps into " << cfg.out_dir
              << "\nrewards " << res.csv_path << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
