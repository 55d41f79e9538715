#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "crab/harness.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string backend;
  std::string out;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("-c,--config", o.config, "JSON run configuration");
  cmd->add_option("--set", o.sets, "override a field, e.g. --set model.n_sites=10")->take_all();
  cmd->add_option("--seed", o.seed, "optimizer seed (optimizer.seed)");
  cmd->add_option("--backend", o.backend, "exact or mps (backend.kind)");
  cmd->add_option("--out", o.out, "output directory (output_dir)");
}

crab::RunConfig resolve(const Options& o, const std::string& experiment) {
  std::vector<std::string> sets;
  if (!experiment.empty()) sets.push_back("experiment=\"" + experiment + "\"");
  sets.insert(sets.end(), o.sets.begin(), o.sets.end());
  if (o.seed) sets.push_back("optimizer.seed=" + std::to_string(*o.seed));
  if (!o.backend.empty()) sets.push_back("backend.kind=\"" + o.backend + "\"");
  if (!o.out.empty()) sets.push_back("output_dir=" + crab::json(o.out).dump());
  std::optional<std::filesystem::path> file;
  if (!o.config.empty()) file = o.config;
  return crab::load_config(file, sets);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CRAB optimal control of the Bose-Hubbard superfluid to Mott-insulator ramp"};
  app.require_subcommand(1);
  Options opt;
  std::string chosen;
  for (const std::string& name : crab::experiment_names()) {
    CLI::App* cmd = app.add_subcommand(name, "run the " + name + " experiment");
    add_common(cmd, opt);
    cmd->callback([&chosen, name] { chosen = name; });
  }
  CLI::App* check = app.add_subcommand("check", "validate a configuration and print it resolved");
  add_common(check, opt);
  check->callback([&chosen] { chosen = "check"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (chosen == "check") {
      const crab::RunConfig c = resolve(opt, "");
      std::cout << c.snapshot.dump(2) << '\n'
                << "config_hash: " << crab::config_hash(c.snapshot) << '\n'
                << "ok\n";
      return 0;
    }
    crab::Harness h(resolve(opt, chosen));
    const crab::RunRecord r = h.run();
    std::cout << "experiment: " << r.experiment << '\n'
              << "output_dir: " << h.config().output_dir << '\n'
              << "config_hash: " << r.config_hash << '\n';
    if (r.best_merit)
      std::cout << "rho: " << crab::fmt(r.best_merit->defect_density) << '\n'
                << "dE_per_site: " << crab::fmt(r.best_merit->residual_energy) << '\n';
    if (!r.trace.empty()) std::cout << "evaluations: " << r.trace.size() << '\n';
    std::cout << "status: " << r.stop_reason << '\n';
    return crab::exit_status(r);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
