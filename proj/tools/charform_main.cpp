#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "charform/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"charform: method-of-characteristics solver and closure diagnostics"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  int threads = 1;
  bool dump = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file")
        ->required();
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--threads", threads, "worker threads for ray integration");
    sub->add_flag("--dump-config", dump,
                  "print the normalized config and exit");
  };

  CLI::App* solve = app.add_subcommand("solve", "integrate the ray fan");
  CLI::App* closure =
      app.add_subcommand("closure", "solve and classify the closure of theta");
  CLI::App* caustics =
      app.add_subcommand("caustics", "locate degenerate-Jacobian points");
  add_common(solve);
  add_common(closure);
  add_common(caustics);

  CLI11_PARSE(app, argc, argv);

  charform::RunConfig cfg;
  try {
    cfg = charform::load_run_config_file(config_path);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  if (dump) {
    std::cout << charform::dump_run_config(cfg);
    return 0;
  }
  std::string dir = out_dir.empty() ? cfg.directory : out_dir;

  if (solve->parsed())
    return charform::cmd_solve(cfg, dir, threads, std::cerr);
  if (closure->parsed())
    return charform::cmd_closure(cfg, dir, threads, std::cerr);
  return charform::cmd_caustics(cfg, dir, threads, std::cerr);
}
