#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "attnfool/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Attention-targeted adversarial patch experiments on a toy vision transformer"};
  app.require_subcommand(1);

  afool::CommonOptions opts;
  std::string config;
  std::uint64_t seed = 0;
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {{"train", "train the toy ViT and write a checkpoint"},
                      {"attack", "optimize a patch per test image and report robust accuracy"},
                      {"controlled", "minimum-epsilon sweep and silhouette study of the synthetic single-head model"},
                      {"diagnose", "singular values, gradient ratios, token export, key replacement"}};
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config, "config file (sections of key = value)");
    sub->add_option("--out", opts.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "global seed (overrides [global] seed)");
    sub->add_option("--threads", opts.threads, "worker threads for independent trials")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : afool::kExitConfig;
  }

  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--config")) opts.config_path = config;
  if (chosen->count("--seed")) opts.seed = seed;
  return afool::run_command(chosen->get_name(), opts, std::cout, std::cerr);
}
