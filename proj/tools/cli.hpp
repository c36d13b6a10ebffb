// parkctl internals: scenario config files, run directories and the subcommands.

#pragma once

#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "parkrl/orchestrator.hpp"
#include "parkrl/qpolicy.hpp"

namespace parkctl {

/// Failure reported as one "parkctl: error: <kind>: <message>" line with exit code `code`.
class CliError : public std::runtime_error {
public:
  CliError(int code, std::string kind, const std::string& msg)
      : std::runtime_error(msg), m_code(code), m_kind(std::move(kind)) {}
  int code() const noexcept { return m_code; }
  const std::string& kind() const noexcept { return m_kind; }

private:
  int m_code;
  std::string m_kind;
};

struct Config {
  parkrl::Scenario scenario;
  parkrl::TrainingConfig training;
  double train_horizon = 7200.0;
  double eval_horizon = 14400.0;
};

/// Parses the INI form. Every key of every section must be present; errors carry line numbers.
Config parse_config(std::istream& is, const std::string& name);
Config load_config(const std::string& path);
std::string render_config(const Config& cfg);

/// "7x7" -> rows 7, cols 7.
void parse_grid(const std::string& text, parkrl::GridSpec& grid);
/// "1,2,5" or "1-5" or a mix.
std::vector<std::uint64_t> parse_seeds(const std::string& text);
std::vector<std::string> split_list(const std::string& text);

/// Fresh `<base>/<command>-YYYYmmdd-HHMMSS[-k]` directory.
std::string make_run_dir(const std::string& base, const std::string& command);

/// File-name-safe form of a policy name.
std::string policy_tag(const std::string& policy);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int column(const std::string& name) const;
};
CsvTable read_csv(std::istream& is, const std::string& name);

/// Deterministic SVG line chart of mean time loss per policy against `value` (or seed).
std::string render_plot(const CsvTable& table, const std::string& title);

/// Greedy d_pa against no_pa on held-out seeds.
struct ValidationScore {
  double tloss = 0.0;
  double walk = 0.0;  ///< parkers only
  double ref_tloss = 0.0;
  double ref_walk = 0.0;
  double extra_walk() const { return walk - ref_walk; }
};

/// Keeps the best agent seen during training. Agents whose parkers' walk exceeds no_pa's by
/// more than `max_extra_walk` rank after all others; among those the objective
/// tloss + beta * extra walk decides.
class CheckpointSelector {
public:
  CheckpointSelector(const parkrl::RoadNetwork& net, parkrl::Scenario sc,
                     std::vector<std::uint64_t> seeds, double max_extra_walk, double beta);

  ValidationScore consider(long episode, parkrl::DqnAgent& agent);
  bool has_best() const noexcept { return !m_best.empty(); }
  long best_episode() const noexcept { return m_best_episode; }
  const ValidationScore& best_score() const noexcept { return m_best_score; }
  /// Overwrites `agent` with the kept parameters and counters.
  void restore(parkrl::DqnAgent& agent) const;
  void save_best(const std::string& path) const;

private:
  const parkrl::RoadNetwork* m_net;
  parkrl::Scenario m_sc;
  std::vector<std::uint64_t> m_seeds;
  double m_max_extra_walk;
  double m_beta;
  double m_ref_tloss = 0.0;
  double m_ref_walk = 0.0;
  std::string m_best;
  long m_best_episode = -1;
  ValidationScore m_best_score;
};

/// Full command-line entry point; returns the process exit code.
int run(int argc, char** argv);

}  // namespace parkctl
