#include "parkrl/simcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

namespace parkrl {

namespace {

constexpr int kNone = -1;
constexpr int kFar = std::numeric_limits<int>::max() / 4;

}  // namespace

const char* to_string(VehiclePhase p) {
  switch (p) {
    case VehiclePhase::pending: return "pending";
    case VehiclePhase::driving: return "driving";
    case VehiclePhase::searching: return "searching";
    case VehiclePhase::cruising: return "cruising";
    case VehiclePhase::parked: return "parked";
    case VehiclePhase::departed: return "departed";
  }
  return "?";
}

const char* to_string(SpaceStatus s) {
  switch (s) {
    case SpaceStatus::vacant: return "vacant";
    case SpaceStatus::occupied: return "occupied";
    case SpaceStatus::restricted: return "restricted";
    case SpaceStatus::restricted_occupied: return "restricted-occupied";
  }
  return "?";
}

const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::spawn: return "spawn";
    case EventKind::reserve: return "reserve";
    case EventKind::park: return "park";
    case EventKind::unpark: return "unpark";
    case EventKind::cruise: return "cruise";
    case EventKind::depart: return "depart";
    case EventKind::clear: return "clear";
    case EventKind::release: return "release";
    case EventKind::gate_execute: return "gate_execute";
    case EventKind::gate_deny: return "gate_deny";
    case EventKind::cruise_release: return "cruise_release";
  }
  return "?";
}

// ---------------------------------------------------------------- demand

TripSchedule generate_schedule(const RoadNetwork& net, const DemandConfig& demand,
                               std::uint64_t seed) {
  if (!(demand.rate_per_min > 0.0)) throw ConfigError("rate", "must be > 0");
  if (!(demand.parking_probability >= 0.0 && demand.parking_probability <= 1.0))
    throw ConfigError("parking_probability", "must be in [0, 1]");
  if (!(demand.horizon > 0.0)) throw ConfigError("horizon", "must be > 0");
  if (!(demand.mean_duration > 0.0)) throw ConfigError("mean_duration", "must be > 0");
  const auto& entries = net.entry_lanes();
  const auto& exits = net.exit_lanes();
  if (entries.empty()) throw ConfigError("entry", "network has no entry stubs");
  if (exits.empty()) throw ConfigError("exit", "network has no exit stubs");

  // Exits usable from each entry: every stub not at the same boundary point.
  std::vector<std::vector<LaneId>> exits_for(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Node& src = net.node(net.lane(entries[i]).from);
    for (LaneId e : exits) {
      const Node& dst = net.node(net.lane(e).to);
      if (dst.x != src.x || dst.y != src.y) exits_for[i].push_back(e);
    }
    if (exits_for[i].empty()) throw ConfigError("exit", "entry stub has no reachable exit");
  }

  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> gap(demand.rate_per_min / 60.0);
  std::exponential_distribution<double> stay(1.0 / demand.mean_duration);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n_spaces = net.spaces().size();

  TripSchedule out;
  double t = 0.0;
  for (;;) {
    t += gap(rng);
    if (t > demand.horizon) break;
    Trip trip;
    trip.id = static_cast<VehicleId>(out.trips.size());
    trip.spawn_time = t;
    const auto ei = static_cast<std::size_t>(unit(rng) * static_cast<double>(entries.size()));
    const std::size_t entry_idx = std::min(ei, entries.size() - 1);
    trip.entry = entries[entry_idx];
    const auto& options = exits_for[entry_idx];
    const auto xi = static_cast<std::size_t>(unit(rng) * static_cast<double>(options.size()));
    trip.exit = options[std::min(xi, options.size() - 1)];
    const double u = unit(rng);
    trip.parks = n_spaces > 0 && u < demand.parking_probability;
    if (trip.parks) {
      const auto si = static_cast<std::size_t>(unit(rng) * static_cast<double>(n_spaces));
      trip.target = static_cast<SpaceId>(std::min(si, n_spaces - 1));
      trip.duration = stay(rng);
    }
    out.trips.push_back(trip);
  }
  return out;
}

// ---------------------------------------------------------------- parking search

ParkingDecision find_parking(const RoadNetwork& net, std::span<const SpaceStatus> status,
                             SpaceId target, double walk_threshold) {
  if (is_available(status[static_cast<std::size_t>(target)])) return {target, 0.0};

  std::vector<std::pair<double, SpaceId>> order;
  order.reserve(net.spaces().size());
  for (const auto& s : net.spaces()) order.emplace_back(net.walking_distance(target, s.id), s.id);
  std::sort(order.begin(), order.end());
  for (const auto& [dist, id] : order) {
    if (dist > walk_threshold) break;
    if (is_available(status[static_cast<std::size_t>(id)])) return {id, dist};
  }
  return {};
}

// ---------------------------------------------------------------- events

std::uint64_t EventLog::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& e : m_events) {
    mix(static_cast<std::uint64_t>(e.t));
    mix(static_cast<std::uint64_t>(e.kind));
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(e.vehicle)));
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(e.location)));
  }
  return h;
}

void EventLog::write_csv(std::ostream& os) const {
  os << "t,event,vehicle,location\n";
  for (const auto& e : m_events)
    os << e.t << ',' << to_string(e.kind) << ',' << e.vehicle << ',' << e.location << '\n';
}

// ---------------------------------------------------------------- simulation

Simulation::Simulation(const RoadNetwork& net, TripSchedule schedule, SimParams params)
    : m_net(&net), m_params(params), m_trips(std::move(schedule.trips)) {
  std::stable_sort(m_trips.begin(), m_trips.end(),
                   [](const Trip& a, const Trip& b) { return a.spawn_time < b.spawn_time; });
  for (std::size_t i = 0; i < m_trips.size(); ++i) {
    Vehicle v;
    v.id = static_cast<VehicleId>(i);
    m_trips[i].id = v.id;
    v.trip = m_trips[i];
    m_vehicles.push_back(std::move(v));
  }
  const auto n_lanes = net.lanes().size();
  m_grid.resize(n_lanes);
  for (const auto& l : net.lanes()) {
    auto& g = m_grid[static_cast<std::size_t>(l.id)];
    for (auto& o : g.occ) o.assign(static_cast<std::size_t>(l.cells), kNone);
    g.space_at.assign(static_cast<std::size_t>(l.cells), kNone);
    for (SpaceId s : l.spaces) g.space_at[static_cast<std::size_t>(net.space(s).cell)] = s;
  }
  m_waiting.resize(n_lanes);
  m_status.assign(net.spaces().size(), SpaceStatus::vacant);
  m_space_occupant.assign(net.spaces().size(), kNone);
  m_cleared.assign(n_lanes, 0);
  m_lane_stats.resize(n_lanes);
  m_moved.assign(m_vehicles.size(), 0);
  m_wants_cross.assign(m_vehicles.size(), 0);
  m_lane_at_start.assign(m_vehicles.size(), kNone);
}

int Simulation::max_speed(LaneId lane) const {
  return static_cast<int>(std::lround(m_net->lane(lane).free_flow_speed / kCellLength));
}

const std::vector<LaneId>& Simulation::cached_route(NodeId from, NodeId to) {
  const auto key = std::make_pair(from, to);
  auto it = m_route_cache.find(key);
  if (it == m_route_cache.end()) it = m_route_cache.emplace(key, shortest_path(*m_net, from, to)).first;
  return it->second;
}

std::vector<LaneId> Simulation::itinerary_via(const Trip& trip, LaneId via) {
  const Lane& entry = m_net->lane(trip.entry);
  const Lane& exit = m_net->lane(trip.exit);
  std::vector<LaneId> r{trip.entry};
  if (via >= 0) {
    const Lane& mid = m_net->lane(via);
    const auto& a = cached_route(entry.to, mid.from);
    r.insert(r.end(), a.begin(), a.end());
    r.push_back(via);
    const auto& b = cached_route(mid.to, exit.from);
    r.insert(r.end(), b.begin(), b.end());
  } else {
    const auto& a = cached_route(entry.to, exit.from);
    r.insert(r.end(), a.begin(), a.end());
  }
  r.push_back(trip.exit);
  return r;
}

bool Simulation::parked_obstacle(LaneId lane, int cell) const {
  const SpaceId s = m_grid[static_cast<std::size_t>(lane)].space_at[static_cast<std::size_t>(cell)];
  if (s == kNone) return false;
  const VehicleId occ_id = m_space_occupant[static_cast<std::size_t>(s)];
  return occ_id != kNone && m_vehicles[static_cast<std::size_t>(occ_id)].phase == VehiclePhase::parked;
}

bool Simulation::cell_free(LaneId lane, SubLane sub, int cell) const {
  if (occ(lane, sub, cell) != kNone) return false;
  return sub != SubLane::curb || !parked_obstacle(lane, cell);
}

int Simulation::gap_ahead(const Vehicle& v, SubLane sub) const {
  const int n = m_net->lane(v.lane()).cells;
  for (int c = v.cell + 1; c < n; ++c)
    if (!cell_free(v.lane(), sub, c)) return c - v.cell - 1;
  return n - 1 - v.cell;
}

std::optional<VehicleId> Simulation::occupant(SpaceId s) const {
  const VehicleId v = m_space_occupant.at(static_cast<std::size_t>(s));
  if (v == kNone) return std::nullopt;
  return v;
}

void Simulation::apply_restriction(LaneId lane, int count) {
  const auto prefix = restricted_prefix(*m_net, lane, count);
  for (SpaceId s : m_net->lane(lane).spaces) {
    const bool in = std::find(prefix.begin(), prefix.end(), s) != prefix.end();
    SpaceStatus& st = m_status[static_cast<std::size_t>(s)];
    const bool was = is_restricted(st);
    if (in && !was) {
      st = st == SpaceStatus::occupied ? SpaceStatus::restricted_occupied : SpaceStatus::restricted;
      log(EventKind::clear, kNone, s);
    } else if (!in && was) {
      st = st == SpaceStatus::restricted_occupied ? SpaceStatus::occupied : SpaceStatus::vacant;
      log(EventKind::release, kNone, s);
    }
  }
  m_cleared[static_cast<std::size_t>(lane)] = count;
}

void Simulation::set_space_vacated(SpaceId s) {
  SpaceStatus& st = m_status[static_cast<std::size_t>(s)];
  st = is_restricted(st) ? SpaceStatus::restricted : SpaceStatus::vacant;
  m_space_occupant[static_cast<std::size_t>(s)] = kNone;
}

void Simulation::reserve(Vehicle& v, SpaceId s) {
  SpaceStatus& st = m_status[static_cast<std::size_t>(s)];
  st = is_restricted(st) ? SpaceStatus::restricted_occupied : SpaceStatus::occupied;
  m_space_occupant[static_cast<std::size_t>(s)] = v.id;
  v.assigned = s;
}

void Simulation::occupy_vacant_spaces() {
  for (const auto& s : m_net->spaces()) {
    if (m_status[static_cast<std::size_t>(s.id)] != SpaceStatus::vacant) continue;
    Vehicle v;
    v.id = static_cast<VehicleId>(m_vehicles.size());
    v.resident = true;
    v.trip.id = v.id;
    v.trip.parks = true;
    v.trip.target = s.id;
    v.trip.duration = std::numeric_limits<double>::infinity();
    v.phase = VehiclePhase::parked;
    v.has_parked = true;
    v.park_time = static_cast<double>(m_t);
    v.route = {s.lane};
    v.cell = s.cell;
    v.sub = SubLane::curb;
    m_vehicles.push_back(v);
    reserve(m_vehicles.back(), s.id);
  }
  m_moved.resize(m_vehicles.size(), 0);
  m_wants_cross.resize(m_vehicles.size(), 0);
  m_lane_at_start.resize(m_vehicles.size(), kNone);
}

VehicleId Simulation::inject(LaneId lane, int cell, SubLane sub, int speed,
                             std::vector<LaneId> route) {
  if (route.empty() || route.front() != lane) throw ContractViolation("route must start at lane");
  if (!cell_free(lane, sub, cell)) throw ContractViolation("injection cell is occupied");
  Vehicle v;
  v.id = static_cast<VehicleId>(m_vehicles.size());
  v.trip.id = v.id;
  v.trip.spawn_time = static_cast<double>(m_t);
  v.trip.entry = lane;
  v.trip.exit = route.back();
  v.phase = VehiclePhase::driving;
  v.route = std::move(route);
  v.cell = cell;
  v.sub = sub;
  v.speed = speed;
  v.free_flow = m_net->free_flow_time(v.route) -
                static_cast<double>(cell) * kCellLength / m_net->lane(lane).free_flow_speed;
  occ(lane, sub, cell) = v.id;
  m_vehicles.push_back(std::move(v));
  m_active.push_back(m_vehicles.back().id);
  ++m_injected;
  m_moved.resize(m_vehicles.size(), 0);
  m_wants_cross.resize(m_vehicles.size(), 0);
  m_lane_at_start.resize(m_vehicles.size(), kNone);
  return m_vehicles.back().id;
}

double Simulation::congestion(LaneId lane) const {
  return static_cast<double>(vehicles_on(lane)) / m_net->lane(lane).length;
}

int Simulation::vehicles_on(LaneId lane) const {
  int count = 0;
  for (const auto& o : m_grid[static_cast<std::size_t>(lane)].occ)
    for (int id : o) count += id != kNone;
  return count;
}

int Simulation::cruising_on(LaneId lane) const {
  int count = 0;
  for (const auto& o : m_grid[static_cast<std::size_t>(lane)].occ)
    for (int id : o)
      if (id != kNone && m_vehicles[static_cast<std::size_t>(id)].phase == VehiclePhase::cruising)
        ++count;
  return count;
}

void Simulation::reset_lane_stats() {
  for (auto& s : m_lane_stats) s = LaneStats{};
}

Simulation::Census Simulation::census() const {
  Census c;
  c.released = m_next_trip;
  for (const auto& v : m_vehicles) {
    if (v.resident) continue;
    if (v.on_road()) ++c.on_network;
    else if (v.phase == VehiclePhase::parked) ++c.parked;
    else if (v.phase == VehiclePhase::departed) ++c.departed;
  }
  for (const auto& q : m_waiting) c.queued += q.size();
  c.released += m_injected;
  return c;
}

// ---------------------------------------------------------------- step

void Simulation::step() {
  const long now = m_t + 1;
  for (auto& g : m_grid)
    for (int& h : g.headway) h = std::max(0, h - 1);
  for (VehicleId id : m_active) {
    const auto i = static_cast<std::size_t>(id);
    m_moved[i] = 0;
    m_wants_cross[i] = 0;
    const Vehicle& v = m_vehicles[i];
    m_lane_at_start[i] = v.on_road() ? v.lane() : kNone;
  }
  m_t = now;  // events below are stamped with the new time

  phase_unpark(now);
  phase_follow();
  phase_lane_change();
  phase_cross(now);
  phase_spawn(now);
  accrue(now);

  std::erase_if(m_active, [this](VehicleId id) {
    return m_vehicles[static_cast<std::size_t>(id)].phase == VehiclePhase::departed;
  });
}

void Simulation::phase_unpark(long now) {
  for (VehicleId id : m_active) {
    Vehicle& v = m_vehicles[static_cast<std::size_t>(id)];
    if (v.phase != VehiclePhase::parked || v.resident) continue;
    if (static_cast<double>(now) < v.park_time + v.trip.duration) continue;
    const ParkingSpace& s = m_net->space(*v.assigned);
    bool clear = true;
    for (int k = 1; k <= m_params.unpark_gap && s.cell - k >= 0; ++k)
      clear = clear && occ(s.lane, SubLane::curb, s.cell - k) == kNone;
    if (!clear) continue;

    const Lane& lane = m_net->lane(s.lane);
    const Lane& exit = m_net->lane(v.trip.exit);
    v.route = {s.lane};
    const auto& rest = cached_route(lane.to, exit.from);
    v.route.insert(v.route.end(), rest.begin(), rest.end());
    v.route.push_back(v.trip.exit);
    v.route_index = 0;
    v.cell = s.cell;
    v.sub = SubLane::curb;
    v.speed = 0;
    v.phase = VehiclePhase::driving;
    // The vehicle pulls out at the start of this step and may already move in it.
    v.unpark_time = static_cast<double>(now - 1);
    m_lane_at_start[static_cast<std::size_t>(id)] = s.lane;
    set_space_vacated(s.id);
    occ(s.lane, SubLane::curb, s.cell) = v.id;
    log(EventKind::unpark, v.id, s.id);
  }
}

void Simulation::settle_parked(Vehicle& v) {
  const ParkingSpace& s = m_net->space(*v.assigned);
  occ(v.lane(), v.sub, v.cell) = kNone;
  if (v.sub == SubLane::through) {
    // A vehicle standing beside the space swaps into the through cell being vacated.
    const int other = occ(s.lane, SubLane::curb, s.cell);
    if (other != kNone) {
      Vehicle& w = m_vehicles[static_cast<std::size_t>(other)];
      if (w.maneuver > 0) {
        occ(v.lane(), v.sub, v.cell) = v.id;
        v.maneuver = 1;
        return;
      }
      occ(s.lane, SubLane::curb, s.cell) = kNone;
      occ(s.lane, SubLane::through, s.cell) = other;
      w.sub = SubLane::through;
    }
  }
  v.phase = VehiclePhase::parked;
  v.has_parked = true;
  v.speed = 0;
  v.maneuver = 0;
  v.park_time = static_cast<double>(m_t);
  v.walk = m_net->walking_distance(v.trip.target, s.id);
  v.free_flow = m_net->free_flow_time(itinerary_via(v.trip, s.lane));
  // charged to the lane holding the target space
  LaneStats& ls = m_lane_stats[static_cast<std::size_t>(m_net->space(v.trip.target).lane)];
  ls.walk += v.walk;
  ++ls.parkers;
  log(EventKind::park, v.id, s.id);
}

void Simulation::phase_follow() {
  for (const auto& lane : m_net->lanes()) {
    const int n = lane.cells;
    const int vmax = max_speed(lane.id);
    for (SubLane sub : {SubLane::curb, SubLane::through}) {
      int next_obstacle = kFar;
      for (int c = n - 1; c >= 0; --c) {
        if (sub == SubLane::curb && parked_obstacle(lane.id, c)) {
          next_obstacle = c;
          continue;
        }
        const int id = occ(lane.id, sub, c);
        if (id == kNone) continue;
        Vehicle& v = m_vehicles[static_cast<std::size_t>(id)];
        const int gap = next_obstacle == kFar ? kFar : next_obstacle - c - 1;
        next_obstacle = c;
        if (v.maneuver > 0) {
          if (--v.maneuver == 0) settle_parked(v);
          continue;
        }
        int desired = std::min({v.speed + 1, vmax, gap});
        bool parks_here = false;
        if (v.phase == VehiclePhase::searching && v.assigned &&
            m_net->space(*v.assigned).lane == lane.id) {
          const int to_space = m_net->space(*v.assigned).cell - c;
          if (to_space >= 0) {
            desired = std::min(desired, to_space);
            parks_here = true;
          }
        }
        const int actual = std::min(desired, n - 1 - c);
        if (actual > 0) {
          occ(lane.id, sub, c) = kNone;
          occ(lane.id, sub, c + actual) = id;
          v.cell = c + actual;
        }
        v.speed = actual;
        m_moved[static_cast<std::size_t>(id)] += actual;
        m_wants_cross[static_cast<std::size_t>(id)] =
            !parks_here && v.cell == n - 1 && desired > actual;
        if (parks_here && v.cell == m_net->space(*v.assigned).cell) {
          v.speed = 0;
          v.maneuver = m_params.park_maneuver;
          if (v.maneuver == 0) settle_parked(v);
        }
      }
    }
  }
}

void Simulation::phase_lane_change() {
  std::vector<VehicleId> order;
  for (const auto& lane : m_net->lanes())
    for (int c = lane.cells - 1; c >= 0; --c)
      for (SubLane sub : {SubLane::curb, SubLane::through}) {
        const int id = occ(lane.id, sub, c);
        if (id != kNone) order.push_back(id);
      }
  for (VehicleId id : order) {
    Vehicle& v = m_vehicles[static_cast<std::size_t>(id)];
    if (v.maneuver > 0 || !v.on_road()) continue;
    const int vmax = max_speed(v.lane());
    const SubLane other = v.sub == SubLane::curb ? SubLane::through : SubLane::curb;
    const int own_gap = gap_ahead(v, v.sub);
    if (own_gap >= vmax) continue;
    // Moving vehicles only change sub-lane to get around a parked car.
    const int ahead = v.cell + own_gap + 1;
    const bool parked_ahead = v.sub == SubLane::curb && ahead < m_net->lane(v.lane()).cells &&
                              parked_obstacle(v.lane(), ahead);
    if (v.speed > 0 && !parked_ahead) continue;
    if (gap_ahead(v, other) <= own_gap) continue;
    if (!cell_free(v.lane(), other, v.cell)) continue;
    bool safe = true;
    for (int k = 1; k <= vmax && v.cell - k >= 0; ++k)
      safe = safe && occ(v.lane(), other, v.cell - k) == kNone;
    if (!safe) continue;
    occ(v.lane(), v.sub, v.cell) = kNone;
    occ(v.lane(), other, v.cell) = id;
    v.sub = other;
    // a merge is made from standstill
    v.speed = 0;
  }
}

void Simulation::phase_cross(long now) {
  for (const auto& lane : m_net->lanes()) {
    const int c = lane.cells - 1;
    auto& grid = m_grid[static_cast<std::size_t>(lane.id)];
    for (SubLane sub : {SubLane::curb, SubLane::through}) {
      const int id = occ(lane.id, sub, c);
      if (id == kNone) continue;
      Vehicle& v = m_vehicles[static_cast<std::size_t>(id)];
      if (v.maneuver > 0 || !m_wants_cross[static_cast<std::size_t>(id)]) continue;
      if (v.route_index + 1 >= v.route.size()) {
        occ(lane.id, sub, c) = kNone;
        v.phase = VehiclePhase::departed;
        v.arrive_time = static_cast<double>(now);
        ++m_moved[static_cast<std::size_t>(id)];
        log(EventKind::depart, v.id, lane.id);
        continue;
      }
      if (grid.headway[static_cast<int>(sub)] > 0 || !m_net->green(lane.id, now)) continue;
      const LaneId next = v.route[v.route_index + 1];
      // Enter the sub-lane with the longer free run; ties keep the current one.
      std::optional<SubLane> pick;
      int best_run = -1;
      for (SubLane s : {sub, sub == SubLane::curb ? SubLane::through : SubLane::curb}) {
        if (!cell_free(next, s, 0)) continue;
        int run = 1;
        const int n_next = m_net->lane(next).cells;
        while (run < n_next && cell_free(next, s, run)) ++run;
        if (run > best_run) {
          best_run = run;
          pick = s;
        }
      }
      if (!pick) continue;
      occ(lane.id, sub, c) = kNone;
      ++v.route_index;
      v.cell = 0;
      v.sub = *pick;
      v.speed = std::min(v.speed + 1, max_speed(next));
      occ(next, *pick, 0) = id;
      ++m_moved[static_cast<std::size_t>(id)];
      grid.headway[static_cast<int>(sub)] = m_params.discharge_headway;
      on_enter_lane(v);
    }
  }
}

void Simulation::on_enter_lane(Vehicle& v) {
  if (!v.trip.parks || v.has_parked || v.phase == VehiclePhase::searching) return;
  const LaneId here = v.lane();
  if (here != m_net->space(v.trip.target).lane) return;

  const ParkingDecision d = find_parking(*m_net, m_status, v.trip.target, m_params.walk_threshold);
  if (d.space) {
    reserve(v, *d.space);
    v.phase = VehiclePhase::searching;
    log(EventKind::reserve, v.id, *d.space);
    const LaneId dest = m_net->space(*d.space).lane;
    if (dest != here) {
      const Lane& cur = m_net->lane(here);
      const Lane& target_lane = m_net->lane(dest);
      std::vector<LaneId> r{here};
      const auto& a = cached_route(cur.to, target_lane.from);
      r.insert(r.end(), a.begin(), a.end());
      r.push_back(dest);
      const auto& b = cached_route(target_lane.to, m_net->lane(v.trip.exit).from);
      r.insert(r.end(), b.begin(), b.end());
      r.push_back(v.trip.exit);
      v.route = std::move(r);
      v.route_index = 0;
    }
    return;
  }
  v.phase = VehiclePhase::cruising;
  log(EventKind::cruise, v.id, here);
  std::vector<LaneId> loop = m_net->cruise_loop(here);
  if (loop.empty()) {
    const Lane& cur = m_net->lane(here);
    loop = cached_route(cur.to, cur.from);
    loop.push_back(here);
  }
  std::vector<LaneId> r{here};
  r.insert(r.end(), loop.begin(), loop.end());
  v.route = std::move(r);
  v.route_index = 0;
}

void Simulation::phase_spawn(long now) {
  const double t_now = static_cast<double>(now);
  while (m_next_trip < m_trips.size() && m_trips[m_next_trip].spawn_time <= t_now) {
    const Trip& trip = m_trips[m_next_trip];
    m_waiting[static_cast<std::size_t>(trip.entry)].push_back(trip.id);
    m_active.push_back(trip.id);
    ++m_next_trip;
  }
  for (LaneId entry : m_net->entry_lanes()) {
    auto& queue = m_waiting[static_cast<std::size_t>(entry)];
    LaneStats& ls = m_lane_stats[static_cast<std::size_t>(entry)];
    while (!queue.empty()) {
      std::optional<SubLane> pick;
      int best_run = -1;
      const int n = m_net->lane(entry).cells;
      for (SubLane s : {SubLane::through, SubLane::curb}) {
        if (!cell_free(entry, s, 0)) continue;
        int run = 1;
        while (run < n && cell_free(entry, s, run)) ++run;
        if (run > best_run) {
          best_run = run;
          pick = s;
        }
      }
      if (!pick) break;
      Vehicle& v = m_vehicles[static_cast<std::size_t>(queue.front())];
      queue.pop_front();
      v.route = itinerary_via(v.trip, v.trip.parks ? m_net->space(v.trip.target).lane : -1);
      v.free_flow = m_net->free_flow_time(v.route);
      v.route_index = 0;
      v.cell = 0;
      v.sub = *pick;
      v.speed = max_speed(entry);
      v.phase = VehiclePhase::driving;
      occ(entry, *pick, 0) = v.id;
      log(EventKind::spawn, v.id, entry);
      ls.time_loss += t_now - std::max(v.trip.spawn_time, t_now - 1.0);
      ls.vehicles.insert(v.id);
    }
    for (VehicleId id : queue) {
      const Vehicle& v = m_vehicles[static_cast<std::size_t>(id)];
      ls.time_loss += t_now - std::max(v.trip.spawn_time, t_now - 1.0);
      ls.vehicles.insert(v.id);
    }
  }
}

void Simulation::accrue(long /*now*/) {
  for (VehicleId id : m_active) {
    const auto i = static_cast<std::size_t>(id);
    const LaneId lane = m_lane_at_start[i];
    if (lane == kNone) continue;
    Vehicle& v = m_vehicles[i];
    double loss;
    if (v.phase == VehiclePhase::cruising) {
      loss = 1.0;
      v.cruise_time += 1.0;
    } else {
      loss = 1.0 - static_cast<double>(m_moved[i]) / max_speed(lane);
    }
    LaneStats& ls = m_lane_stats[static_cast<std::size_t>(lane)];
    ls.time_loss += loss;
    ls.vehicles.insert(id);
  }
}

}  // namespace parkrl
