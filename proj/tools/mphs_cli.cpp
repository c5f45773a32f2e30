// mphs_cli: scenario runner and golden-file comparison.
//
//   mphs_cli solve|flow|closedloop|audit|spectrum --config <path> --out <dir>
//            [--seed k] [--full-state] [--jobs j]
//   mphs_cli compare <golden> <candidate> --tol <x>

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "mphs/csv.hpp"
#include "mphs/scenario.hpp"

namespace {

int run_one(mphs::cli::Mode mode, const std::string& config,
            const std::string& out, std::optional<std::uint64_t> seed,
            bool full_state) {
  mphs::cli::ScenarioConfig cfg;
  try {
    cfg = mphs::cli::load_config(config);
  } catch (const mphs::Error& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 2;
  }
  return mphs::cli::run(mode, std::move(cfg), out, std::cerr, seed,
                        full_state ? std::optional<bool>(true) : std::nullopt);
}

// Several configs go to out/<config stem>/, up to `jobs` child processes at a
// time. The exit code is the largest child exit code.
int run_many(mphs::cli::Mode mode, const std::vector<std::string>& configs,
             const std::string& out, std::optional<std::uint64_t> seed,
             bool full_state, int jobs) {
  if (configs.size() == 1) return run_one(mode, configs[0], out, seed, full_state);
  int worst = 0;
  int running = 0;
  auto reap = [&]() {
    int status = 0;
    if (wait(&status) > 0) {
      --running;
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 3;
      worst = std::max(worst, code);
    }
  };
  for (const auto& c : configs) {
    const std::string sub =
        (std::filesystem::path(out) / std::filesystem::path(c).stem()).string();
    if (jobs <= 1) {
      worst = std::max(worst, run_one(mode, c, sub, seed, full_state));
      continue;
    }
    while (running >= jobs) reap();
    std::cout.flush();
    std::cerr.flush();
    const pid_t pid = fork();
    if (pid < 0) {
      worst = std::max(worst, run_one(mode, c, sub, seed, full_state));
    } else if (pid == 0) {
      _exit(run_one(mode, c, sub, seed, full_state));
    } else {
      ++running;
    }
  }
  while (running > 0) reap();
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"monotone port-Hamiltonian optimizer dynamics toolkit"};
  app.require_subcommand(1);

  std::vector<std::string> configs;
  std::string out;
  std::uint64_t seed = 0;
  bool full_state = false;
  int jobs = 1;
  for (const char* name : {"solve", "flow", "closedloop", "audit", "spectrum"}) {
    auto* sub = app.add_subcommand(name, std::string("run a ") + name + " scenario");
    sub->add_option("--config", configs, "scenario config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory")->required();
    sub->add_option("--seed", seed, "seed override");
    sub->add_flag("--full-state", full_state, "also dump the full state");
    sub->add_option("--jobs", jobs, "parallel processes for several configs")
        ->check(CLI::PositiveNumber);
  }

  std::string golden, candidate;
  double tol = 0.0;
  auto* cmp = app.add_subcommand("compare", "compare a CSV against a golden file");
  cmp->add_option("golden", golden)->required();
  cmp->add_option("candidate", candidate)->required();
  cmp->add_option("--tol", tol, "max absolute difference")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (cmp->parsed()) {
    try {
      const auto res = mphs::csv::compare(mphs::csv::read(golden),
                                          mphs::csv::read(candidate), tol);
      std::cout << "max_abs_diff: " << mphs::csv::format_double(res.max_diff)
                << '\n';
      if (!res.within) {
        std::cout << "worst: column " << res.worst_column << ", row "
                  << res.worst_row << '\n';
        return 1;
      }
      return 0;
    } catch (const mphs::FormatError& e) {
      std::cerr << "format error: " << e.what() << '\n';
      return 2;
    }
  }

  const auto* sub = app.get_subcommands().front();
  const auto mode = mphs::cli::mode_from_string(sub->get_name());
  const auto seed_opt = sub->count("--seed") ? std::optional<std::uint64_t>(seed)
                                             : std::nullopt;
  return run_many(mode, configs, out, seed_opt, full_state, jobs);
}
