#include "parkrl/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace parkrl {

namespace {

constexpr double kTieTolerance = 1e-9;

bool is_multiple_of_cell(double v) {
  const double q = v / kCellLength;
  return std::abs(q - std::round(q)) < 1e-9 && q >= 1.0 - 1e-9;
}

Heading heading_of(const Node& a, const Node& b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? Heading::east : Heading::west;
  return dy > 0 ? Heading::south : Heading::north;
}

void validate(const GridSpec& spec, int min_dim) {
  if (spec.rows < min_dim) throw ConfigError("rows", "must be >= " + std::to_string(min_dim));
  if (spec.cols < min_dim) throw ConfigError("cols", "must be >= " + std::to_string(min_dim));
  if (!is_multiple_of_cell(spec.lane_length))
    throw ConfigError("lane_length", "must be a positive multiple of 7.5 m");
  if (!is_multiple_of_cell(spec.speed))
    throw ConfigError("speed", "must be a positive multiple of 7.5 m/s");
  const int cells = static_cast<int>(std::lround(spec.lane_length / kCellLength));
  if (spec.spaces_per_lane < 0 || spec.spaces_per_lane > cells - 1)
    throw ConfigError("spaces_per_lane",
                      "must be in [0, " + std::to_string(cells - 1) + "] for this lane length");
  if (spec.signals.phases.empty()) throw ConfigError("signals", "plan has no phases");
  for (const auto& p : spec.signals.phases)
    if (p.duration <= 0) throw ConfigError("signals", "phase durations must be positive");
}

}  // namespace

const char* to_string(Heading h) {
  switch (h) {
    case Heading::east: return "E";
    case Heading::west: return "W";
    case Heading::north: return "N";
    case Heading::south: return "S";
  }
  return "?";
}

// ---------------------------------------------------------------- signals

int SignalPlan::cycle_length() const {
  int total = 0;
  for (const auto& p : phases) total += p.duration;
  return total;
}

int SignalPlan::active_phase(long t) const {
  const long cycle = cycle_length();
  long local = (t + offset) % cycle;
  if (local < 0) local += cycle;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    if (local < phases[i].duration) return static_cast<int>(i);
    local -= phases[i].duration;
  }
  return static_cast<int>(phases.size()) - 1;
}

bool SignalPlan::is_green(Heading approach, long t) const {
  const auto& green = phases[static_cast<std::size_t>(active_phase(t))].green;
  return std::find(green.begin(), green.end(), approach) != green.end();
}

SignalPlan SignalPlan::two_phase(int ns_green, int ew_green, int offset) {
  SignalPlan plan;
  plan.phases.push_back({{Heading::north, Heading::south}, ns_green});
  plan.phases.push_back({{Heading::east, Heading::west}, ew_green});
  plan.offset = offset;
  return plan;
}

// ---------------------------------------------------------------- network

NodeId RoadNetwork::add_node(double x, double y, NodeKind kind, bool signalized) {
  Node n;
  n.id = static_cast<NodeId>(m_nodes.size());
  n.x = x;
  n.y = y;
  n.kind = kind;
  n.signalized = signalized;
  m_nodes.push_back(n);
  m_out.emplace_back();
  m_in.emplace_back();
  return n.id;
}

LaneId RoadNetwork::add_lane(NodeId from, NodeId to, double speed, LaneKind kind, int spaces) {
  if (from == to) throw ContractViolation("lane must connect two distinct nodes");
  const Node& a = node(from);
  const Node& b = node(to);
  Lane lane;
  lane.id = static_cast<LaneId>(m_lanes.size());
  lane.from = from;
  lane.to = to;
  lane.length = std::hypot(b.x - a.x, b.y - a.y);
  lane.free_flow_speed = speed;
  lane.cells = static_cast<int>(std::lround(lane.length / kCellLength));
  lane.heading = heading_of(a, b);
  lane.kind = kind;

  // Spaces sit in distinct curb cells counted back from the cell before the stop line.
  if (spaces > 0) {
    const int n = lane.cells;
    const int stride = std::max(1, n / spaces);
    for (int k = 0; k < spaces; ++k) {
      const int cell = (n - 2) - stride * (spaces - 1 - k);
      ParkingSpace s;
      s.id = static_cast<SpaceId>(m_spaces.size());
      s.lane = lane.id;
      s.cell = cell;
      s.position = (cell + 0.5) * kCellLength;
      m_spaces.push_back(s);
      lane.spaces.push_back(s.id);
    }
  }
  m_out[static_cast<std::size_t>(from)].push_back(lane.id);
  m_in[static_cast<std::size_t>(to)].push_back(lane.id);
  switch (kind) {
    case LaneKind::internal: m_internal.push_back(lane.id); break;
    case LaneKind::entry: m_entries.push_back(lane.id); break;
    case LaneKind::exit: m_exits.push_back(lane.id); break;
  }
  m_lanes.push_back(std::move(lane));
  return m_lanes.back().id;
}

void RoadNetwork::finalize(const SignalPlan& plan) {
  m_signals.assign(m_nodes.size(), std::nullopt);
  for (const auto& n : m_nodes)
    if (n.signalized) m_signals[static_cast<std::size_t>(n.id)] = plan;
  build_neighbors();
  build_walk_distances();
}

const SignalPlan* RoadNetwork::signal(NodeId id) const {
  const auto& s = m_signals.at(static_cast<std::size_t>(id));
  return s ? &*s : nullptr;
}

bool RoadNetwork::green(LaneId lane_id, long t) const {
  const Lane& l = lane(lane_id);
  const SignalPlan* plan = signal(l.to);
  return plan == nullptr || plan->is_green(l.heading, t);
}

void RoadNetwork::build_neighbors() {
  for (auto& l : m_lanes) {
    std::vector<LaneId> ids;
    for (NodeId n : {l.from, l.to}) {
      const auto& in = m_in[static_cast<std::size_t>(n)];
      const auto& out = m_out[static_cast<std::size_t>(n)];
      ids.insert(ids.end(), in.begin(), in.end());
      ids.insert(ids.end(), out.begin(), out.end());
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    ids.erase(std::remove(ids.begin(), ids.end(), l.id), ids.end());
    l.neighbors = std::move(ids);
  }
}

void RoadNetwork::build_walk_distances() {
  const std::size_t n = m_nodes.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  m_walk.assign(n * n, inf);
  for (std::size_t i = 0; i < n; ++i) m_walk[i * n + i] = 0.0;
  for (LaneId id : m_internal) {
    const Lane& l = lane(id);
    const auto a = static_cast<std::size_t>(l.from);
    const auto b = static_cast<std::size_t>(l.to);
    m_walk[a * n + b] = std::min(m_walk[a * n + b], l.length);
    m_walk[b * n + a] = std::min(m_walk[b * n + a], l.length);
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      const double ik = m_walk[i * n + k];
      if (ik == inf) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double cand = ik + m_walk[k * n + j];
        if (cand < m_walk[i * n + j]) m_walk[i * n + j] = cand;
      }
    }
}

double RoadNetwork::walking_distance(SpaceId a, SpaceId b) const {
  if (a == b) return 0.0;
  const ParkingSpace& sa = space(a);
  const ParkingSpace& sb = space(b);
  const Lane& la = lane(sa.lane);
  const Lane& lb = lane(sb.lane);
  const NodeId lo_a = std::min(la.from, la.to);
  const NodeId lo_b = std::min(lb.from, lb.to);
  // Offset of a space from the lower-id end of its road.
  auto coord = [](const Lane& l, const ParkingSpace& s) {
    return l.from < l.to ? s.position : l.length - s.position;
  };
  if (lo_a == lo_b && std::max(la.from, la.to) == std::max(lb.from, lb.to))
    return std::abs(coord(la, sa) - coord(lb, sb));

  const std::array<std::pair<NodeId, double>, 2> ends_a{
      {{la.from, sa.position}, {la.to, la.length - sa.position}}};
  const std::array<std::pair<NodeId, double>, 2> ends_b{
      {{lb.from, sb.position}, {lb.to, lb.length - sb.position}}};
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [na, da] : ends_a)
    for (const auto& [nb, db] : ends_b) best = std::min(best, da + node_walk(na, nb) + db);
  return best;
}

double RoadNetwork::free_flow_time(const std::vector<LaneId>& route) const {
  double t = 0.0;
  for (LaneId id : route) t += lane(id).free_flow_time();
  return t;
}

std::vector<LaneId> RoadNetwork::cruise_loop(LaneId lane_id) const {
  for (const auto& b : m_blocks)
    for (const auto& cycle : b.cycles) {
      const auto it = std::find(cycle.begin(), cycle.end(), lane_id);
      if (it == cycle.end()) continue;
      std::vector<LaneId> loop;
      const auto pos = static_cast<std::size_t>(it - cycle.begin());
      for (std::size_t k = 1; k <= cycle.size(); ++k) loop.push_back(cycle[(pos + k) % cycle.size()]);
      return loop;
    }
  return {};
}

// ---------------------------------------------------------------- builders

namespace {

struct GridBuilder {
  RoadNetwork net;
  std::vector<NodeId> node_at;  // row-major intersection ids
  std::map<std::pair<NodeId, NodeId>, LaneId> lane_between;
  int rows = 0;
  int cols = 0;

  NodeId at(int r, int c) const { return node_at[static_cast<std::size_t>(r * cols + c)]; }
};

}  // namespace

RoadNetwork build_grid(const GridSpec& spec) {
  validate(spec, 2);
  GridBuilder g;
  g.rows = spec.rows;
  g.cols = spec.cols;
  const double L = spec.lane_length;

  for (int r = 0; r < spec.rows; ++r)
    for (int c = 0; c < spec.cols; ++c)
      g.node_at.push_back(g.net.add_node(c * L, r * L, NodeKind::intersection, true));

  auto link = [&](NodeId a, NodeId b) {
    g.lane_between[{a, b}] =
        g.net.add_lane(a, b, spec.speed, LaneKind::internal, spec.spaces_per_lane);
  };
  for (int r = 0; r < spec.rows; ++r)
    for (int c = 0; c + 1 < spec.cols; ++c) {
      link(g.at(r, c), g.at(r, c + 1));
      link(g.at(r, c + 1), g.at(r, c));
    }
  for (int c = 0; c < spec.cols; ++c)
    for (int r = 0; r + 1 < spec.rows; ++r) {
      link(g.at(r, c), g.at(r + 1, c));
      link(g.at(r + 1, c), g.at(r, c));
    }

  // Stubs for every outward direction of boundary intersections.
  for (int r = 0; r < spec.rows; ++r)
    for (int c = 0; c < spec.cols; ++c) {
      std::vector<std::pair<double, double>> dirs;
      if (r == 0) dirs.emplace_back(0.0, -1.0);
      if (c == spec.cols - 1) dirs.emplace_back(1.0, 0.0);
      if (r == spec.rows - 1) dirs.emplace_back(0.0, 1.0);
      if (c == 0) dirs.emplace_back(-1.0, 0.0);
      const NodeId hub = g.at(r, c);
      for (const auto& [dx, dy] : dirs) {
        const double x = c * L + dx * L;
        const double y = r * L + dy * L;
        const NodeId src = g.net.add_node(x, y, NodeKind::source, false);
        const NodeId dst = g.net.add_node(x, y, NodeKind::sink, false);
        g.net.add_lane(src, hub, spec.speed, LaneKind::entry, 0);
        g.net.add_lane(hub, dst, spec.speed, LaneKind::exit, 0);
      }
    }

  g.net.finalize(spec.signals);

  // Blocks: unit squares of the intersection lattice.
  RoadNetwork& net = g.net;
  std::vector<Block> blocks;
  for (int r = 0; r + 1 < spec.rows; ++r)
    for (int c = 0; c + 1 < spec.cols; ++c) {
      Block b;
      b.id = static_cast<BlockId>(blocks.size());
      const NodeId tl = g.at(r, c), tr = g.at(r, c + 1), br = g.at(r + 1, c + 1),
                   bl = g.at(r + 1, c);
      const std::array<NodeId, 4> cw{tl, tr, br, bl};
      for (int k = 0; k < 4; ++k) {
        const NodeId a = cw[static_cast<std::size_t>(k)];
        const NodeId z = cw[static_cast<std::size_t>((k + 1) % 4)];
        b.cycles[0].push_back(g.lane_between.at({a, z}));
        b.boundary.push_back(g.lane_between.at({a, z}));
        b.boundary.push_back(g.lane_between.at({z, a}));
      }
      const std::array<NodeId, 4> ccw{tl, bl, br, tr};
      for (int k = 0; k < 4; ++k)
        b.cycles[1].push_back(g.lane_between.at(
            {ccw[static_cast<std::size_t>(k)], ccw[static_cast<std::size_t>((k + 1) % 4)]}));
      std::sort(b.boundary.begin(), b.boundary.end());
      blocks.push_back(std::move(b));
    }

  // Curb is on the driver's left; a lane with no block on that side gives its
  // spaces to the block on its right.
  auto block_at = [&](double x, double y) -> BlockId {
    const int c = static_cast<int>(std::floor(x / L));
    const int r = static_cast<int>(std::floor(y / L));
    if (r < 0 || c < 0 || r >= spec.rows - 1 || c >= spec.cols - 1) return -1;
    return r * (spec.cols - 1) + c;
  };
  auto& lanes = net.m_lanes;
  auto& spaces = net.m_spaces;
  for (LaneId id : net.parking_lanes()) {
    Lane& l = lanes[static_cast<std::size_t>(id)];
    const Node& a = net.node(l.from);
    const Node& z = net.node(l.to);
    const double mx = 0.5 * (a.x + z.x), my = 0.5 * (a.y + z.y);
    const double ux = (z.x - a.x) / l.length, uy = (z.y - a.y) / l.length;
    // Left normal in screen coordinates (y pointing south).
    const double nx = uy, ny = -ux;
    BlockId owner = block_at(mx + nx * L * 0.5, my + ny * L * 0.5);
    if (owner < 0) owner = block_at(mx - nx * L * 0.5, my - ny * L * 0.5);
    l.owner_block = owner;
    if (owner < 0) continue;
    Block& b = blocks[static_cast<std::size_t>(owner)];
    b.lanes.push_back(id);
    for (SpaceId s : l.spaces) {
      spaces[static_cast<std::size_t>(s)].block = owner;
      b.spaces.push_back(s);
    }
  }
  net.m_blocks = std::move(blocks);
  return net;
}

RoadNetwork build_single_intersection(const GridSpec& spec) {
  GridSpec checked = spec;
  checked.rows = checked.cols = 1;
  validate(checked, 1);
  RoadNetwork net;
  const double L = spec.lane_length;
  const NodeId centre = net.add_node(L, L, NodeKind::intersection, true);
  const std::array<std::pair<double, double>, 4> arms{{{0, -1}, {1, 0}, {0, 1}, {-1, 0}}};
  std::vector<NodeId> arm_nodes;
  for (const auto& [dx, dy] : arms)
    arm_nodes.push_back(net.add_node(L + dx * L, L + dy * L, NodeKind::intersection, false));
  for (NodeId a : arm_nodes) {
    net.add_lane(a, centre, spec.speed, LaneKind::internal, spec.spaces_per_lane);
    net.add_lane(centre, a, spec.speed, LaneKind::internal, spec.spaces_per_lane);
  }
  for (std::size_t k = 0; k < arms.size(); ++k) {
    const auto [dx, dy] = arms[k];
    const double x = L + 2 * dx * L;
    const double y = L + 2 * dy * L;
    const NodeId src = net.add_node(x, y, NodeKind::source, false);
    const NodeId dst = net.add_node(x, y, NodeKind::sink, false);
    net.add_lane(src, arm_nodes[k], spec.speed, LaneKind::entry, 0);
    net.add_lane(arm_nodes[k], dst, spec.speed, LaneKind::exit, 0);
  }
  net.finalize(spec.signals);
  return net;
}

// ---------------------------------------------------------------- routing

std::vector<LaneId> shortest_path(const RoadNetwork& net, NodeId from, NodeId to) {
  const auto n = net.nodes().size();
  if (from < 0 || to < 0 || static_cast<std::size_t>(from) >= n ||
      static_cast<std::size_t>(to) >= n)
    throw RoutingError("unknown node in route request");
  if (from == to) return {};

  struct Label {
    double cost = std::numeric_limits<double>::infinity();
    std::vector<LaneId> path;
    bool done = false;
  };
  auto better = [](double ca, const std::vector<LaneId>& pa, double cb,
                   const std::vector<LaneId>& pb) {
    if (ca < cb - kTieTolerance) return true;
    if (cb < ca - kTieTolerance) return false;
    return pa < pb;
  };

  std::vector<Label> labels(n);
  labels[static_cast<std::size_t>(from)].cost = 0.0;
  for (;;) {
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      const Label& l = labels[i];
      if (l.done || l.cost == std::numeric_limits<double>::infinity()) continue;
      if (pick == n || better(l.cost, l.path, labels[pick].cost, labels[pick].path)) pick = i;
    }
    if (pick == n) break;
    labels[pick].done = true;
    if (pick == static_cast<std::size_t>(to)) return labels[pick].path;
    for (LaneId id : net.outgoing(static_cast<NodeId>(pick))) {
      const Lane& l = net.lane(id);
      Label& next = labels[static_cast<std::size_t>(l.to)];
      if (next.done) continue;
      const double cost = labels[pick].cost + l.free_flow_time();
      std::vector<LaneId> path = labels[pick].path;
      path.push_back(id);
      if (better(cost, path, next.cost, next.path)) {
        next.cost = cost;
        next.path = std::move(path);
      }
    }
  }
  throw RoutingError("node " + std::to_string(to) + " unreachable from node " +
                     std::to_string(from));
}

std::vector<SpaceId> restricted_prefix(const RoadNetwork& net, LaneId lane_id, int count) {
  const Lane& l = net.lane(lane_id);
  if (count < 0 || count > l.space_count())
    throw ContractViolation("cleared count " + std::to_string(count) + " outside [0, " +
                            std::to_string(l.space_count()) + "] on lane " +
                            std::to_string(lane_id));
  std::vector<SpaceId> ids = l.spaces;
  std::stable_sort(ids.begin(), ids.end(), [&](SpaceId a, SpaceId b) {
    return net.space(a).position > net.space(b).position;
  });
  ids.resize(static_cast<std::size_t>(count));
  return ids;
}

}  // namespace parkrl
