#include "parkrl/orchestrator.hpp"

#include <algorithm>
#include <numeric>

namespace parkrl {

PolicySpec PolicySpec::parse(const std::string& text) {
  PolicySpec p;
  if (text == "no_pa") {
    p.kind = PolicyKind::no_pa;
  } else if (text == "c_pa") {
    p.kind = PolicyKind::c_pa;
  } else if (text == "d_pa") {
    p.kind = PolicyKind::d_pa;
  } else if (text == "s_pa") {
    p.kind = PolicyKind::s_pa;
  } else if (text.rfind("s_pa(", 0) == 0 && text.back() == ')') {
    p.kind = PolicyKind::s_pa;
    const std::string num = text.substr(5, text.size() - 6);
    std::size_t used = 0;
    try {
      p.k = std::stoi(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != num.size() || num.empty() || p.k < 0)
      throw ConfigError("policy", "bad s_pa count in '" + text + "'");
  } else {
    throw ConfigError("policy", "unknown policy '" + text + "' (no_pa, s_pa(k), c_pa, d_pa)");
  }
  return p;
}

std::string PolicySpec::name() const {
  switch (kind) {
    case PolicyKind::no_pa: return "no_pa";
    case PolicyKind::s_pa: return "s_pa(" + std::to_string(k) + ")";
    case PolicyKind::c_pa: return "c_pa";
    case PolicyKind::d_pa: return "d_pa";
  }
  return "?";
}

void ControlConfig::validate() const {
  if (t_b <= 0) throw ConfigError("t_b", "must be > 0");
  if (t_l <= 0 || t_l % t_b != 0) throw ConfigError("t_l", "must be a positive multiple of t_b");
  if (!(th_o >= 0.0 && th_o <= 1.0)) throw ConfigError("th_o", "must be in [0, 1]");
  if (th_c < 0) throw ConfigError("th_c", "must be >= 0");
  if (sample_period <= 0) throw ConfigError("sample_period", "must be > 0");
}

int baseline_cleared(const PolicySpec& policy, long /*t*/, const Lane& lane) {
  const int m = lane.space_count();
  switch (policy.kind) {
    case PolicyKind::no_pa: return 0;
    case PolicyKind::s_pa: return std::min(policy.k, m);
    case PolicyKind::c_pa:
      return lane.heading == Heading::east || lane.heading == Heading::south ? m : 0;
    case PolicyKind::d_pa: break;
  }
  throw ConfigError("policy", "d_pa is not a static baseline");
}

int block_gate(int proposal, double occupancy, double th_o) {
  if (proposal == increase && !(occupancy < th_o)) return keep;
  return proposal;
}

std::vector<int> block_release(int cruisers, int th_c, const std::vector<int>& cleared) {
  std::vector<int> out = cleared;
  if (cruisers <= th_c) return out;
  const int total = std::accumulate(cleared.begin(), cleared.end(), 0);
  int todo = std::min(cruisers - th_c, total);
  while (todo > 0) {
    for (int& c : out) {
      if (todo == 0) break;
      if (c > 0) {
        --c;
        --todo;
      }
    }
  }
  return out;
}

double block_occupancy(const Simulation& sim, const Block& block) {
  int occupied = 0;
  int restricted_vacant = 0;
  for (SpaceId s : block.spaces) {
    const SpaceStatus st = sim.status(s);
    if (has_occupant(st)) ++occupied;
    else if (st == SpaceStatus::restricted) ++restricted_vacant;
  }
  const int denom = static_cast<int>(block.spaces.size()) - restricted_vacant;
  if (denom <= 0) return 1.0;
  return std::clamp(static_cast<double>(occupied) / denom, 0.0, 1.0);
}

int block_cruisers(const Simulation& sim, const Block& block) {
  int n = 0;
  for (LaneId l : block.boundary) n += sim.cruising_on(l);
  return n;
}

// ---------------------------------------------------------------- controller

Controller::Controller(Simulation& sim, ControlConfig cfg, DqnAgent* agent, bool training,
                       double alpha, double beta)
    : m_sim(&sim),
      m_cfg(cfg),
      m_agent(agent),
      m_training(training),
      m_alpha(alpha),
      m_beta(beta),
      m_history(sim.network().lanes().size()) {
  m_cfg.validate();
  if (m_cfg.policy.kind == PolicyKind::d_pa) {
    if (!m_agent) throw ConfigError("checkpoint", "d_pa needs a trained agent");
    m_local = build_local_graphs(sim.network());
  } else {
    apply_baseline(sim.time());
  }
}

void Controller::apply_baseline(long t) {
  for (LaneId l : m_sim->network().parking_lanes()) {
    const int c = baseline_cleared(m_cfg.policy, t, m_sim->network().lane(l));
    if (c != m_sim->cleared(l)) m_sim->apply_restriction(l, c);
  }
}

void Controller::tick() {
  const long t = m_sim->time();
  if (t % m_cfg.sample_period == 0) m_history.sample(*m_sim);
  if (t % m_cfg.t_l == 0) lane_epoch(t);
  if (t % m_cfg.t_b == 0 && m_cfg.policy.kind == PolicyKind::d_pa) block_check();
  m_sim->step();
}

void Controller::run_until(long t_end) {
  while (m_sim->time() < t_end) tick();
}

std::vector<Observation> Controller::observe() {
  const auto snap = m_history.snapshot();
  std::vector<Observation> obs;
  for (LaneId l : m_sim->network().parking_lanes())
    obs.push_back(encode_observation(*m_sim, l, snap, m_local[static_cast<std::size_t>(l)]));
  return obs;
}

void Controller::store_transitions(const std::vector<Observation>& next, bool terminal) {
  EpochRecord& rec = m_epochs.back();
  const auto& lanes = m_sim->network().parking_lanes();
  double reward_sum = 0.0, loss_sum = 0.0, walk_sum = 0.0;
  int walk_n = 0;
  for (std::size_t k = 0; k < lanes.size(); ++k) {
    const LaneStats& st = m_sim->lane_stats(lanes[k]);
    const double r = compute_reward(st, m_alpha, m_beta);
    reward_sum += r;
    loss_sum += st.mean_time_loss();
    if (st.parkers > 0) {
      walk_sum += st.mean_walk();
      ++walk_n;
    }
    if (m_training && !m_prev_obs.empty())
      m_agent->replay().push({m_prev_obs[k], m_prev_action[k], m_agent->config().reward_scale * r,
                              next[k], terminal});
  }
  const double n = lanes.empty() ? 1.0 : static_cast<double>(lanes.size());
  rec.mean_reward = reward_sum / n;
  rec.mean_time_loss = loss_sum / n;
  rec.mean_walk = walk_n == 0 ? 0.0 : walk_sum / walk_n;
}

void Controller::lane_epoch(long t) {
  ++m_lane_epochs;
  if (m_cfg.policy.kind != PolicyKind::d_pa) {
    apply_baseline(t);
    return;
  }
  const RoadNetwork& net = m_sim->network();
  std::vector<Observation> obs = observe();
  if (!m_epochs.empty()) {
    store_transitions(obs, false);
    m_epochs.back().released = m_released_since_epoch;
  }
  m_released_since_epoch = 0;
  m_sim->reset_lane_stats();

  EpochRecord rec;
  rec.t = t;
  rec.epsilon = m_training ? m_agent->epsilon() : 0.0;
  std::vector<const Observation*> ptrs;
  for (const auto& o : obs) ptrs.push_back(&o);
  const std::vector<int> proposals = m_agent->act(ptrs, m_training);
  rec.proposals = static_cast<int>(proposals.size());

  const auto& lanes = net.parking_lanes();
  m_prev_action.assign(lanes.size(), keep);
  for (std::size_t k = 0; k < lanes.size(); ++k) {
    const Lane& lane = net.lane(lanes[k]);
    int action = proposals[k];
    if (action == increase && lane.owner_block >= 0) {
      const double occ = block_occupancy(*m_sim, net.block(lane.owner_block));
      action = block_gate(action, occ, m_cfg.th_o);
      m_sim->log(action == increase ? EventKind::gate_execute : EventKind::gate_deny, -1, lane.id);
      if (action != increase) ++rec.denied;
    }
    const int c = apply_action(m_sim->cleared(lane.id), action, lane.space_count());
    if (c != m_sim->cleared(lane.id)) m_sim->apply_restriction(lane.id, c);
    m_prev_action[k] = proposals[k];
  }
  m_prev_obs = std::move(obs);
  for (LaneId l : lanes) rec.total_cleared += m_sim->cleared(l);
  if (m_training) {
    for (int k = 0; k < m_agent->config().updates_per_epoch; ++k)
      if (auto l = m_agent->train_step()) rec.loss = l;
  }
  m_epochs.push_back(rec);
}

void Controller::block_check() {
  ++m_block_checks;
  const RoadNetwork& net = m_sim->network();
  for (const Block& b : net.blocks()) {
    const int vc = block_cruisers(*m_sim, b);
    if (vc <= m_cfg.th_c) continue;
    std::vector<int> cleared;
    for (LaneId l : b.lanes) cleared.push_back(m_sim->cleared(l));
    const std::vector<int> next = block_release(vc, m_cfg.th_c, cleared);
    for (std::size_t k = 0; k < b.lanes.size(); ++k) {
      if (next[k] == cleared[k]) continue;
      m_sim->apply_restriction(b.lanes[k], next[k]);
      m_sim->log(EventKind::cruise_release, -1, b.lanes[k]);
      m_released_since_epoch += cleared[k] - next[k];
    }
  }
}

void Controller::finish() {
  if (m_finished) return;
  m_finished = true;
  if (m_cfg.policy.kind != PolicyKind::d_pa || m_epochs.empty()) return;
  store_transitions(observe(), true);
  m_epochs.back().released = m_released_since_epoch;
}

// ---------------------------------------------------------------- scenarios

RoadNetwork build_network(const Scenario& sc) {
  return sc.layout == Layout::single ? build_single_intersection(sc.grid) : build_grid(sc.grid);
}

EpisodeResult run_episode(const RoadNetwork& net, const Scenario& sc, std::uint64_t seed,
                          DqnAgent* agent, bool training, double alpha, double beta) {
  EpisodeResult out;
  out.sim = std::make_unique<Simulation>(net, generate_schedule(net, sc.demand, seed), sc.sim);
  Controller ctl(*out.sim, sc.control, agent, training, alpha, beta);
  if (sc.preoccupied) out.sim->occupy_vacant_spaces();
  ctl.run_until(static_cast<long>(sc.demand.horizon));
  ctl.finish();
  out.epochs = ctl.epochs();
  return out;
}

}  // namespace parkrl
