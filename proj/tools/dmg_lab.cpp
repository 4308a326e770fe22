#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dmg/cli.hpp"

namespace {

template <class T>
std::optional<T> opt_if(CLI::Option* o, const T& v) {
  return o->count() ? std::optional<T>(v) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace dmg::cli;
  CLI::App app{"dmg_lab: exact operator checks and actor-critic experiments"};
  app.require_subcommand(1);

  GenDataArgs gen;
  std::uint64_t gen_seed = 0;
  auto* g = app.add_subcommand("gen-data", "generate a dataset (JSONL) from a config");
  g->add_option("--config", gen.config, "config file")->required();
  g->add_option("--out", gen.out, "output JSONL path")->required();
  auto* g_seed = g->add_option("--seed", gen_seed, "override data_seed");

  TrainArgs train;
  std::uint64_t train_seed = 0;
  std::string train_seeds;
  auto* t = app.add_subcommand("train", "offline training");
  t->add_option("--config", train.config, "config file")->required();
  t->add_option("--dataset", train.dataset, "dataset JSONL")->required();
  t->add_option("--out", train.out, "output directory")->required();
  auto* t_seed = t->add_option("--seed", train_seed, "override the agent seed");
  auto* t_seeds = t->add_option("--seeds", train_seeds, "comma-separated seeds, one run directory each");

  FinetuneArgs ft;
  std::uint64_t ft_seed = 0;
  auto* f = app.add_subcommand("finetune", "online fine-tuning from a checkpoint");
  f->add_option("--config", ft.config, "config file")->required();
  f->add_option("--checkpoint", ft.checkpoint, "checkpoint JSON")->required();
  f->add_option("--out", ft.out, "output directory")->required();
  f->add_option("--dataset", ft.dataset, "offline dataset to keep in the buffer");
  auto* f_seed = f->add_option("--seed", ft_seed, "override env_seed");

  EvalArgs ev;
  std::uint64_t ev_seed = 0;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--config", ev.config, "config file (environment)")->required();
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint JSON")->required();
  e->add_option("--episodes", ev.episodes, "evaluation episodes");
  e->add_option("--out", ev.out, "directory for summary.json");
  auto* e_seed = e->add_option("--seed", ev_seed, "evaluation seed");

  VerifyArgs ver;
  std::size_t ver_trials = 0;
  double corrupt = 0.0;
  auto* v = app.add_subcommand("verify", "run theorem checks");
  v->add_option("--suite", ver.suite, "lemma1, thm2, thm3, thm4, thm5, probe or all");
  v->add_option("--seed", ver.seed, "base seed");
  auto* v_trials = v->add_option("--trials", ver_trials, "instances (or nets) per suite");
  v->add_option("--out", ver.out, "output directory (report in reports/)");
  auto* v_corrupt = v->add_option("--corrupt-lambda", corrupt, "test hook: operators use this mixture coefficient");
  v_corrupt->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (*g) {
    gen.seed = opt_if(g_seed, gen_seed);
    return cmd_gen_data(gen);
  }
  if (*t) {
    train.seed = opt_if(t_seed, train_seed);
    if (t_seeds->count()) {
      try {
        train.seeds = parse_seeds(train_seeds);
      } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << '\n';
        return kExitConfig;
      }
    }
    return cmd_train(train);
  }
  if (*f) {
    ft.seed = opt_if(f_seed, ft_seed);
    return cmd_finetune(ft);
  }
  if (*e) {
    ev.seed = opt_if(e_seed, ev_seed);
    return cmd_eval(ev);
  }
  ver.trials = opt_if(v_trials, ver_trials);
  ver.corrupt_lambda = opt_if(v_corrupt, corrupt);
  return cmd_verify(ver);
}
