#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "sslseg/errors.hpp"
#include "sslseg/experiments.hpp"

namespace {

// Exit codes: 0 ok, 2 config error, 3 incomplete grid, 4 numeric failure.
int run_guarded(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const sslseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const sslseg::IncompleteGridError& e) {
    std::cerr << "incomplete grid: " << e.what() << "\n";
    return 3;
  } catch (const sslseg::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

sslseg::HarnessConfig load_config(const std::string& path) {
  if (path.empty()) return sslseg::HarnessConfig{};  // desk-scale defaults
  return sslseg::HarnessConfig::load(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inpainting-based self-supervised pretraining workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  std::size_t jobs = 1;
  bool resume = true;  // completed ledger cells are always skipped

  app.add_option("--config", config_path, "Experiment config (JSON)");
  app.add_option("--out", out_dir, "Output directory (ledger + reports)");
  app.add_option("--jobs", jobs, "Parallel ledger cells");
  app.add_flag("--resume,!--no-resume", resume,
               "Skip completed ledger cells (always on; kept for symmetry)");

  auto* gen = app.add_subcommand("gen-phantom", "Generate a phantom dataset");
  std::size_t gp_size = 64, gp_count = 200;
  std::uint64_t gp_seed = 1;
  std::string gp_out = "phantom_dataset";
  gen->add_option("--size", gp_size, "Image side length");
  gen->add_option("--count", gp_count, "Number of images");
  gen->add_option("--seed", gp_seed, "Generator seed");
  gen->add_option("--out", gp_out, "Dataset directory");

  auto* grid = app.add_subcommand(
      "pretrain-grid", "Pretext-task grid: 16 pretrains, 80 fine-tunes, 5 baselines");
  auto* tgrid = app.add_subcommand(
      "transfer-grid", "Transfer design grid: 16 first-run + 64 second-run cells");
  auto* extent = app.add_subcommand("extent-sweep",
                                    "Unlabeled-data extent sweep for the optimal strategy");
  auto* clinical = app.add_subcommand("compare-clinical",
                                      "Clinical-metric comparison of SSL vs supervised");
  std::size_t directional_seeds = 0;
  clinical->add_option("--directional-seeds", directional_seeds,
                       "Also run the SSL-vs-supervised direction check across N seeds");
  auto* stats = app.add_subcommand("stats", "Wilcoxon ranking of pretraining strategies");
  auto* show = app.add_subcommand("show-ledger", "List completed ledger cells");

  CLI11_PARSE(app, argc, argv);

  return run_guarded([&] {
    if (gen->parsed()) {
      sslseg::cmd_gen_phantom(gp_size, gp_count, gp_seed, gp_out);
    } else if (grid->parsed()) {
      sslseg::cmd_pretrain_grid(load_config(config_path), out_dir, jobs);
    } else if (tgrid->parsed()) {
      sslseg::cmd_transfer_grid(load_config(config_path), out_dir, jobs);
    } else if (extent->parsed()) {
      sslseg::cmd_extent_sweep(load_config(config_path), out_dir, jobs);
    } else if (clinical->parsed()) {
      sslseg::cmd_compare_clinical(load_config(config_path), out_dir, jobs,
                                   directional_seeds);
    } else if (stats->parsed()) {
      sslseg::cmd_stats(load_config(config_path), out_dir);
    } else if (show->parsed()) {
      sslseg::cmd_show_ledger(out_dir, std::cout);
    }
  });
}
