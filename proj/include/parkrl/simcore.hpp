/// @file simcore.hpp
/// @brief Deterministic 1 s cellular traffic engine with two sub-lanes per lane, fixed-time
///        signals, curb parking and a nearest-space parking search.
///
/// Each lane is split into 7.5 m cells on a curb and a through sub-lane. Parked vehicles are
/// obstacles on curb cells; restricted spaces are drivable. One call to `step()` advances
/// the clock by one second and runs, in order: signal/headway bookkeeping, unparking,
/// car following, sub-lane changes, intersection crossing and insertion of new trips.

#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "parkrl/netmodel.hpp"

namespace parkrl {

using VehicleId = int;

enum class SubLane : std::uint8_t { curb = 0, through = 1 };

enum class VehiclePhase : std::uint8_t {
  pending,    ///< not yet released or waiting outside a full entry stub
  driving,
  searching,  ///< heading to a reserved space
  cruising,   ///< circling a block after a failed search
  parked,
  departed,
};

enum class SpaceStatus : std::uint8_t { vacant, occupied, restricted, restricted_occupied };

const char* to_string(VehiclePhase p);
const char* to_string(SpaceStatus s);

inline bool has_occupant(SpaceStatus s) {
  return s == SpaceStatus::occupied || s == SpaceStatus::restricted_occupied;
}
inline bool is_restricted(SpaceStatus s) {
  return s == SpaceStatus::restricted || s == SpaceStatus::restricted_occupied;
}

// ---------------------------------------------------------------- demand

struct DemandConfig {
  double rate_per_min = 90.0;
  double parking_probability = 0.2;
  double mean_duration = 600.0;
  double horizon = 7200.0;
};

struct Trip {
  VehicleId id = 0;
  double spawn_time = 0.0;
  LaneId entry = 0;  ///< entry stub
  LaneId exit = 0;   ///< exit stub
  bool parks = false;
  SpaceId target = -1;
  double duration = 0.0;
};

struct TripSchedule {
  std::vector<Trip> trips;
};

/// Poisson arrivals over the entry stubs; exits uniform over stubs not co-located with the
/// entry. Parkers pick a target space uniformly and an exponential parking duration.
TripSchedule generate_schedule(const RoadNetwork& net, const DemandConfig& demand,
                               std::uint64_t seed);

// ---------------------------------------------------------------- parking search

struct ParkingDecision {
  std::optional<SpaceId> space;  ///< empty means cruise
  double walk = 0.0;
};

inline bool is_available(SpaceStatus s) { return s == SpaceStatus::vacant; }

/// Target first; otherwise the closest available space by walking distance, scanning in
/// (distance, id) order and stopping at the first space farther than `walk_threshold`.
ParkingDecision find_parking(const RoadNetwork& net, std::span<const SpaceStatus> status,
                             SpaceId target, double walk_threshold);

// ---------------------------------------------------------------- events

enum class EventKind : std::uint8_t {
  spawn,
  reserve,
  park,
  unpark,
  cruise,
  depart,
  clear,    ///< space entered the restricted prefix
  release,  ///< space left the restricted prefix
  gate_execute,
  gate_deny,
  cruise_release,
};

const char* to_string(EventKind k);

struct Event {
  long t = 0;
  EventKind kind = EventKind::spawn;
  VehicleId vehicle = -1;
  int location = -1;  ///< lane or space id depending on kind

  bool operator==(const Event&) const = default;
};

class EventLog {
public:
  void append(Event e) { m_events.push_back(e); }
  const std::vector<Event>& events() const noexcept { return m_events; }
  std::size_t size() const noexcept { return m_events.size(); }
  /// FNV-1a over every record.
  std::uint64_t hash() const;
  /// Columns: t,event,vehicle,location
  void write_csv(std::ostream& os) const;

private:
  std::vector<Event> m_events;
};

// ---------------------------------------------------------------- vehicles

struct Vehicle {
  VehicleId id = 0;
  Trip trip;
  bool resident = false;  ///< pre-placed long-term parker, not part of the demand
  VehiclePhase phase = VehiclePhase::pending;

  std::vector<LaneId> route;
  std::size_t route_index = 0;
  int cell = 0;
  SubLane sub = SubLane::through;
  int speed = 0;
  int maneuver = 0;  ///< steps left before a stopped vehicle settles into its space

  std::optional<SpaceId> assigned;
  bool has_parked = false;
  double park_time = 0.0;
  double unpark_time = 0.0;
  double arrive_time = 0.0;
  double walk = 0.0;
  double free_flow = 0.0;
  double cruise_time = 0.0;

  LaneId lane() const { return route[route_index]; }
  bool on_road() const {
    return phase == VehiclePhase::driving || phase == VehiclePhase::searching ||
           phase == VehiclePhase::cruising;
  }
  /// Travel time excluding the parked interval; valid once departed.
  double travel_time() const {
    return arrive_time - trip.spawn_time - (has_parked ? unpark_time - park_time : 0.0);
  }
};

struct SimParams {
  double walk_threshold = 200.0;  ///< th_d, metres
  int discharge_headway = 2;      ///< min steps between crossings from one sub-lane
  int park_maneuver = 2;          ///< steps a vehicle blocks its cell while parking
  int unpark_gap = 2;             ///< free curb cells required behind an unparking vehicle
};

/// Per-lane accumulators between two `reset_lane_stats` calls.
struct LaneStats {
  double time_loss = 0.0;
  std::unordered_set<VehicleId> vehicles;
  double walk = 0.0;
  int parkers = 0;

  double mean_time_loss() const {
    return vehicles.empty() ? 0.0 : time_loss / static_cast<double>(vehicles.size());
  }
  double mean_walk() const { return parkers == 0 ? 0.0 : walk / parkers; }
};

class Simulation {
public:
  Simulation(const RoadNetwork& net, TripSchedule schedule, SimParams params = {});

  void step();
  long time() const noexcept { return m_t; }
  const RoadNetwork& network() const noexcept { return *m_net; }
  const SimParams& params() const noexcept { return m_params; }
  int max_speed(LaneId lane) const;

  /// Vehicles currently traversing the lane (parked ones excluded) per metre.
  double congestion(LaneId lane) const;
  int vehicles_on(LaneId lane) const;
  int cruising_on(LaneId lane) const;

  void apply_restriction(LaneId lane, int cleared);
  int cleared(LaneId lane) const { return m_cleared.at(static_cast<std::size_t>(lane)); }
  SpaceStatus status(SpaceId s) const { return m_status.at(static_cast<std::size_t>(s)); }
  std::span<const SpaceStatus> statuses() const noexcept { return m_status; }
  std::optional<VehicleId> occupant(SpaceId s) const;

  /// Parks a resident vehicle in every vacant space.
  void occupy_vacant_spaces();

  /// Forces the status table (test helper for search scenarios).
  void set_status(SpaceId s, SpaceStatus st) { m_status.at(static_cast<std::size_t>(s)) = st; }

  const std::vector<Vehicle>& vehicles() const noexcept { return m_vehicles; }
  const EventLog& events() const noexcept { return m_log; }
  void log(EventKind kind, VehicleId vehicle, int location) {
    m_log.append({m_t, kind, vehicle, location});
  }

  const LaneStats& lane_stats(LaneId lane) const {
    return m_lane_stats.at(static_cast<std::size_t>(lane));
  }
  void reset_lane_stats();

  struct Census {
    std::size_t released = 0;  ///< trips whose spawn time has passed
    std::size_t on_network = 0;
    std::size_t parked = 0;
    std::size_t departed = 0;
    std::size_t queued = 0;
  };
  Census census() const;

  /// Places a vehicle directly on a lane (used by scenario tests); returns its id.
  VehicleId inject(LaneId lane, int cell, SubLane sub, int speed, std::vector<LaneId> route);

private:
  struct LaneGrid {
    std::vector<int> occ[2];       // vehicle id or -1
    std::vector<SpaceId> space_at;  // curb cell -> space or -1
    int headway[2] = {0, 0};
  };

  const std::vector<LaneId>& cached_route(NodeId from, NodeId to);
  std::vector<LaneId> itinerary_via(const Trip& trip, LaneId via);
  bool parked_obstacle(LaneId lane, int cell) const;
  bool cell_free(LaneId lane, SubLane sub, int cell) const;
  int gap_ahead(const Vehicle& v, SubLane sub) const;
  int& occ(LaneId lane, SubLane sub, int cell) {
    return m_grid[static_cast<std::size_t>(lane)].occ[static_cast<int>(sub)]
                 [static_cast<std::size_t>(cell)];
  }
  int occ(LaneId lane, SubLane sub, int cell) const {
    return m_grid[static_cast<std::size_t>(lane)].occ[static_cast<int>(sub)]
                 [static_cast<std::size_t>(cell)];
  }
  void set_space_vacated(SpaceId s);
  void reserve(Vehicle& v, SpaceId s);

  void phase_unpark(long now);
  void phase_follow();
  void phase_lane_change();
  void phase_cross(long now);
  void phase_spawn(long now);
  void on_enter_lane(Vehicle& v);
  void settle_parked(Vehicle& v);
  void accrue(long now);

  const RoadNetwork* m_net;
  SimParams m_params;
  std::vector<Trip> m_trips;
  std::size_t m_next_trip = 0;
  std::size_t m_injected = 0;
  std::vector<Vehicle> m_vehicles;
  std::vector<std::deque<VehicleId>> m_waiting;  // per lane, only entry stubs used
  std::vector<LaneGrid> m_grid;
  std::vector<SpaceStatus> m_status;
  std::vector<VehicleId> m_space_occupant;
  std::vector<int> m_cleared;
  std::vector<LaneStats> m_lane_stats;
  std::vector<VehicleId> m_active;  // vehicles on the road, parked or waiting
  std::vector<int> m_moved;          // cells advanced in the current step
  std::vector<char> m_wants_cross;
  std::vector<LaneId> m_lane_at_start;
  std::map<std::pair<NodeId, NodeId>, std::vector<LaneId>> m_route_cache;
  EventLog m_log;
  long m_t = 0;
};

}  // namespace parkrl
