/// @file orchestrator.hpp
/// @brief The control loop: lane agents propose changes to their cleared-space counts every
///        t_l seconds, block agents gate increases by occupancy and hand spaces back when too
///        many vehicles cruise. Also hosts the static baselines and the episode runner.

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "parkrl/netmodel.hpp"
#include "parkrl/qpolicy.hpp"
#include "parkrl/simcore.hpp"

namespace parkrl {

enum class PolicyKind { no_pa, s_pa, c_pa, d_pa };

struct PolicySpec {
  PolicyKind kind = PolicyKind::no_pa;
  int k = 3;  ///< spaces cleared per lane by s_pa

  /// "no_pa", "s_pa", "s_pa(k)", "c_pa" or "d_pa".
  static PolicySpec parse(const std::string& text);
  std::string name() const;
};

struct ControlConfig {
  int t_l = 100;
  int t_b = 10;
  double th_o = 0.8;
  int th_c = 4;
  int sample_period = 10;  ///< seconds between congestion samples
  PolicySpec policy;

  void validate() const;
};

/// Cleared spaces a static baseline keeps on `lane` at time t.
int baseline_cleared(const PolicySpec& policy, long t, const Lane& lane);

/// Executed action for a lane proposal given its block's occupancy.
int block_gate(int proposal, double occupancy, double th_o);

/// New cleared counts after handing back min(V_c - th_c, total cleared) spaces one lane at a
/// time in list order. Unchanged when V_c <= th_c.
std::vector<int> block_release(int cruisers, int th_c, const std::vector<int>& cleared);

/// occupied (incl. restricted-occupied) / (spaces - restricted vacant), clamped to [0, 1].
double block_occupancy(const Simulation& sim, const Block& block);
/// Cruising vehicles on the block perimeter.
int block_cruisers(const Simulation& sim, const Block& block);

struct EpochRecord {
  long t = 0;
  int proposals = 0;
  int denied = 0;
  int released = 0;
  int total_cleared = 0;
  double mean_reward = 0.0;
  double mean_time_loss = 0.0;
  double mean_walk = 0.0;
  std::optional<double> loss;
  double epsilon = 0.0;
};

class Controller {
public:
  /// `agent` is required for d_pa. With `training` on, transitions go to the agent's replay
  /// and one train step runs per lane epoch.
  Controller(Simulation& sim, ControlConfig cfg, DqnAgent* agent = nullptr, bool training = false,
             double alpha = 1.0, double beta = 0.1);

  /// Sampler, lane epoch, block check (each when due), then one simulation step.
  void tick();
  void run_until(long t_end);
  /// Closes the episode: terminal transitions for the last interval.
  void finish();

  const CongestionHistory& history() const noexcept { return m_history; }
  const std::vector<EpochRecord>& epochs() const noexcept { return m_epochs; }
  const ControlConfig& config() const noexcept { return m_cfg; }
  long lane_epochs() const noexcept { return m_lane_epochs; }
  long block_checks() const noexcept { return m_block_checks; }

private:
  void apply_baseline(long t);
  void lane_epoch(long t);
  void block_check();
  std::vector<Observation> observe();
  void store_transitions(const std::vector<Observation>& next, bool terminal);

  Simulation* m_sim;
  ControlConfig m_cfg;
  DqnAgent* m_agent;
  bool m_training;
  double m_alpha;
  double m_beta;
  CongestionHistory m_history;
  std::vector<std::shared_ptr<const LocalGraph>> m_local;
  std::vector<Observation> m_prev_obs;
  std::vector<int> m_prev_action;
  std::vector<EpochRecord> m_epochs;
  int m_released_since_epoch = 0;
  long m_lane_epochs = 0;
  long m_block_checks = 0;
  bool m_finished = false;
};

// ---------------------------------------------------------------- scenarios

enum class Layout { grid, single };

struct Scenario {
  Layout layout = Layout::grid;
  GridSpec grid;
  DemandConfig demand;
  SimParams sim;
  ControlConfig control;
  /// Fill every space not cleared at t=0 with a long-term resident.
  bool preoccupied = false;
};

RoadNetwork build_network(const Scenario& sc);

struct EpisodeResult {
  std::unique_ptr<Simulation> sim;
  std::vector<EpochRecord> epochs;
};

/// Runs one episode of `sc.demand.horizon` seconds with schedule seed `seed`.
EpisodeResult run_episode(const RoadNetwork& net, const Scenario& sc, std::uint64_t seed,
                          DqnAgent* agent = nullptr, bool training = false, double alpha = 1.0,
                          double beta = 0.1);

}  // namespace parkrl
