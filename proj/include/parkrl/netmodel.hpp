/// @file netmodel.hpp
/// @brief Synthetic road networks: lanes with curb parking, city blocks, fixed-time signals
///        and free-flow shortest-path routing.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "parkrl/errors.hpp"

namespace parkrl {

using NodeId = int;
using LaneId = int;
using SpaceId = int;
using BlockId = int;

/// Length of one microscopic cell. Lane lengths and speeds are multiples of it.
inline constexpr double kCellLength = 7.5;

enum class Heading : std::uint8_t { east, west, north, south };
enum class NodeKind : std::uint8_t { intersection, source, sink };
enum class LaneKind : std::uint8_t { internal, entry, exit };

const char* to_string(Heading h);

struct Node {
  NodeId id = 0;
  double x = 0.0;  ///< metres, east
  double y = 0.0;  ///< metres, south (screen orientation)
  NodeKind kind = NodeKind::intersection;
  bool signalized = false;
};

struct Lane {
  LaneId id = 0;
  NodeId from = 0;
  NodeId to = 0;
  double length = 0.0;
  double free_flow_speed = 0.0;
  int cells = 0;
  Heading heading = Heading::east;
  LaneKind kind = LaneKind::internal;
  /// Spaces ordered by increasing position.
  std::vector<SpaceId> spaces;
  /// Lanes sharing this lane's start or end node, sorted by id, excluding this lane.
  std::vector<LaneId> neighbors;
  /// Block whose parking this lane's curb belongs to (-1 for stubs).
  BlockId owner_block = -1;

  int space_count() const noexcept { return static_cast<int>(spaces.size()); }
  double free_flow_time() const noexcept { return length / free_flow_speed; }
};

struct ParkingSpace {
  SpaceId id = 0;
  LaneId lane = 0;
  double position = 0.0;  ///< metres from lane start
  int cell = 0;
  BlockId block = -1;
};

struct Block {
  BlockId id = 0;
  /// All lanes on the block perimeter (both directions), sorted by id.
  std::vector<LaneId> boundary;
  /// Lanes whose curb spaces belong to this block, sorted by id.
  std::vector<LaneId> lanes;
  std::vector<SpaceId> spaces;
  /// The two directed perimeter cycles (clockwise, counter-clockwise).
  std::array<std::vector<LaneId>, 2> cycles;
};

struct SignalPhase {
  std::vector<Heading> green;
  int duration = 0;
};

/// Fixed-time plan of one intersection.
struct SignalPlan {
  std::vector<SignalPhase> phases;
  int offset = 0;

  int cycle_length() const;
  /// Index of the phase active at time t.
  int active_phase(long t) const;
  bool is_green(Heading approach, long t) const;

  /// Two phases (north/south green, then east/west green).
  static SignalPlan two_phase(int ns_green, int ew_green, int offset);
};

struct GridSpec {
  int rows = 3;
  int cols = 3;
  double lane_length = 150.0;
  int spaces_per_lane = 10;
  double speed = 15.0;
  SignalPlan signals = SignalPlan::two_phase(30, 30, 0);
};

class RoadNetwork {
public:
  const std::vector<Node>& nodes() const noexcept { return m_nodes; }
  const std::vector<Lane>& lanes() const noexcept { return m_lanes; }
  const std::vector<ParkingSpace>& spaces() const noexcept { return m_spaces; }
  const std::vector<Block>& blocks() const noexcept { return m_blocks; }

  const Node& node(NodeId id) const { return m_nodes.at(static_cast<std::size_t>(id)); }
  const Lane& lane(LaneId id) const { return m_lanes.at(static_cast<std::size_t>(id)); }
  const ParkingSpace& space(SpaceId id) const { return m_spaces.at(static_cast<std::size_t>(id)); }
  const Block& block(BlockId id) const { return m_blocks.at(static_cast<std::size_t>(id)); }

  /// Plan for a signalized intersection, nullptr when the node is uncontrolled.
  const SignalPlan* signal(NodeId id) const;

  const std::vector<LaneId>& entry_lanes() const noexcept { return m_entries; }
  const std::vector<LaneId>& exit_lanes() const noexcept { return m_exits; }
  /// Internal lanes, i.e. the ones carrying curb parking and a lane agent.
  const std::vector<LaneId>& parking_lanes() const noexcept { return m_internal; }

  const std::vector<LaneId>& outgoing(NodeId id) const { return m_out.at(static_cast<std::size_t>(id)); }
  const std::vector<LaneId>& incoming(NodeId id) const { return m_in.at(static_cast<std::size_t>(id)); }

  /// True when the head of `lane` may cross its end node at time t.
  bool green(LaneId lane, long t) const;

  /// Lanes forming one lap around a block that starts right after `lane` and ends with it.
  /// Empty when the lane is on no block perimeter cycle.
  std::vector<LaneId> cruise_loop(LaneId lane) const;

  /// Pedestrian distance between two spaces along the road network (either direction,
  /// crossing the road is free).
  double walking_distance(SpaceId a, SpaceId b) const;

  /// Sum of free-flow lane times.
  double free_flow_time(const std::vector<LaneId>& route) const;

  // Construction helpers used by the builders.
  NodeId add_node(double x, double y, NodeKind kind, bool signalized);
  LaneId add_lane(NodeId from, NodeId to, double speed, LaneKind kind, int spaces);
  void finalize(const SignalPlan& plan);

private:
  friend RoadNetwork build_grid(const GridSpec& spec);

  void build_neighbors();
  void build_walk_distances();
  double node_walk(NodeId a, NodeId b) const {
    return m_walk[static_cast<std::size_t>(a) * m_nodes.size() + static_cast<std::size_t>(b)];
  }

  std::vector<Node> m_nodes;
  std::vector<Lane> m_lanes;
  std::vector<ParkingSpace> m_spaces;
  std::vector<Block> m_blocks;
  std::vector<std::optional<SignalPlan>> m_signals;
  std::vector<std::vector<LaneId>> m_out;
  std::vector<std::vector<LaneId>> m_in;
  std::vector<LaneId> m_entries;
  std::vector<LaneId> m_exits;
  std::vector<LaneId> m_internal;
  std::vector<double> m_walk;  // all-pairs node walking distance
};

/// rows x cols signalized intersections joined by bidirectional lanes, with an entry and an
/// exit stub for every outward direction of every boundary intersection.
RoadNetwork build_grid(const GridSpec& spec);

/// One signalized intersection with four approach arms. Each arm is an inbound and an
/// outbound parking lane between the centre and an uncontrolled boundary node carrying stubs.
RoadNetwork build_single_intersection(const GridSpec& spec);

/// Minimum free-flow-time route; ties go to the lexicographically smallest lane-id sequence.
std::vector<LaneId> shortest_path(const RoadNetwork& net, NodeId from, NodeId to);

/// The `count` spaces of `lane` nearest its end node (largest positions).
std::vector<SpaceId> restricted_prefix(const RoadNetwork& net, LaneId lane, int count);

}  // namespace parkrl
