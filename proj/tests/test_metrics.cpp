#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "parkrl/metrics.hpp"
#include "parkrl/orchestrator.hpp"

using namespace parkrl;

namespace {

const RoadNetwork& grid() {
  static const RoadNetwork net = build_grid({});
  return net;
}

struct Run {
  TripSchedule schedule;
  std::unique_ptr<Simulation> sim;
};

Run congested_run(std::uint64_t seed, double horizon, long extra = 1800) {
  DemandConfig d;
  d.horizon = horizon;
  Run r;
  r.schedule = generate_schedule(grid(), d, seed);
  r.sim = std::make_unique<Simulation>(grid(), r.schedule);
  while (r.sim->time() < static_cast<long>(horizon) + extra) r.sim->step();
  return r;
}

VehicleRecord rec(double tc, double ff, double walk = 0.0, double depart = 0.0) {
  VehicleRecord r;
  r.travel_time = tc;
  r.free_flow = ff;
  r.walk = walk;
  r.parked = walk > 0.0;
  r.depart = depart;
  r.arrive = depart + tc;
  r.completed = true;
  return r;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

TEST_CASE("time loss examples") {
  CHECK(time_loss(rec(50.0, 300.0 / 15.0)) == doctest::Approx(30.0));
  VehicleRecord open = rec(50.0, 20.0);
  open.completed = false;
  CHECK_THROWS_AS(time_loss(open), NotAvailable);
}

TEST_CASE("unobstructed vehicle loses at most one step") {
  const LaneId entry = grid().entry_lanes().front();
  TripSchedule s;
  Trip t;
  t.entry = entry;
  for (LaneId x : grid().exit_lanes())
    if (grid().lane(x).to != grid().lane(entry).from) {
      t.exit = x;
      break;
    }
  s.trips.push_back(t);
  Simulation sim(grid(), s);
  while (sim.time() < 600) sim.step();
  auto records = collect_records(sim);
  REQUIRE(records.size() == 1);
  REQUIRE(records[0].completed);
  CHECK(time_loss(records[0]) >= 0.0);
  CHECK(time_loss(records[0]) <= 1.0 + 1e-9);
  CHECK(walking_distance(records[0]) == 0.0);
}

TEST_CASE("time loss percentage") {
  CHECK(time_loss_pct(108.02, 145.14) == doctest::Approx(25.58).epsilon(5e-4));
  CHECK(time_loss_pct(91.02, 111.65) == doctest::Approx(18.47).epsilon(5e-4));
  for (double x : {0.1, 1.0, 145.14, 1e6}) CHECK(time_loss_pct(x, x) == 0.0);
  CHECK_THROWS(time_loss_pct(1.0, 0.0));
}

TEST_CASE("summary examples") {
  MetricsSummary one = summarize({rec(40.0, 10.0)}, 1.0, 0.1);
  CHECK(one.n == 1);
  CHECK(one.mean_tloss == 30.0);
  CHECK(one.twc == 0.0);
  CHECK(one.mean_walk_parkers == 0.0);

  std::vector<VehicleRecord> rs{rec(40.0, 10.0, 15.0, 10.0), rec(25.0, 20.0, 0.0, 4000.0),
                                rec(70.0, 30.0, 30.0, 4100.0)};
  MetricsSummary s = summarize(rs, 1.0, 0.0);
  CHECK(s.objective == s.ttc);
  CHECK(s.ttc == 135.0);
  CHECK(s.twc == 45.0);
  CHECK(s.parkers == 2);
  CHECK(s.mean_walk == doctest::Approx(15.0));
  CHECK(s.mean_walk_parkers == doctest::Approx(22.5));
  CHECK(s.hourly_count[0] == 1);
  CHECK(s.hourly_count[1] == 2);
  CHECK(s.hourly_tloss[1] == doctest::Approx(22.5));
  CHECK_FALSE(s.tloss_pct.has_value());
  CHECK(summarize(rs, 1.0, 0.1, s.mean_tloss).tloss_pct.value() == 0.0);

  VehicleRecord open = rec(0.0, 20.0);
  open.completed = false;
  rs.push_back(open);
  MetricsSummary t = summarize(rs, 1.0, 0.1);
  CHECK(t.n == 3);
  CHECK(t.incomplete == 1);
  CHECK(t.mean_tloss == s.mean_tloss);
  CHECK_THROWS_AS(summarize({}, 1.0, 0.1), EmptySummary);
  CHECK_THROWS_AS(summarize({open}, 1.0, 0.1), EmptySummary);
}

TEST_CASE("objective is monotone in beta") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<VehicleRecord> rs;
    for (int k = 0; k < 10; ++k) rs.push_back(rec(20.0 + u(rng), 20.0, trial % 2 ? u(rng) : 0.0));
    double prev = -1.0;
    for (double beta : {0.0, 0.05, 0.1, 1.0, 10.0}) {
      const double obj = summarize(rs, 1.0, beta).objective;
      CHECK(obj >= prev);
      prev = obj;
    }
  }
}

TEST_CASE("records agree with the event log") {
  Run r = congested_run(7, 1800);
  std::map<VehicleId, std::map<EventKind, Event>> ev;
  for (const Event& e : r.sim->events().events())
    if (e.vehicle >= 0) ev[e.vehicle][e.kind] = e;
  auto records = collect_records(*r.sim);
  REQUIRE(records.size() == r.schedule.trips.size());
  int completed = 0, parked = 0;
  double loss_sum = 0.0;
  for (const VehicleRecord& v : records) {
    const Trip& trip = r.schedule.trips[static_cast<std::size_t>(v.id)];
    const auto& e = ev[v.id];
    CHECK(v.depart == trip.spawn_time);
    if (!v.completed) {
      CHECK_FALSE(e.count(EventKind::depart));
      CHECK_THROWS_AS(time_loss(v), NotAvailable);
      continue;
    }
    ++completed;
    REQUIRE(e.count(EventKind::depart));
    double tc = static_cast<double>(e.at(EventKind::depart).t) - trip.spawn_time;
    if (v.parked) {
      ++parked;
      REQUIRE(e.count(EventKind::park));
      REQUIRE(e.count(EventKind::unpark));
      // A vehicle pulls out at the start of its unpark step.
      tc -= static_cast<double>(e.at(EventKind::unpark).t - 1 - e.at(EventKind::park).t);
      const SpaceId got = e.at(EventKind::park).location;
      CHECK(v.walk == doctest::Approx(grid().walking_distance(trip.target, got)));
    } else {
      CHECK(v.walk == 0.0);
    }
    CHECK(v.travel_time == doctest::Approx(tc));
    CHECK(time_loss(v) >= -1e-9);
    CHECK(walking_distance(v) >= 0.0);
    loss_sum += time_loss(v);
  }
  CHECK(completed > 1000);
  CHECK(parked > 50);
  MetricsSummary s = summarize(records, 1.0, 0.1);
  CHECK(std::abs(s.mean_tloss * static_cast<double>(s.n) - loss_sum) < 1e-9 * std::max(1.0, loss_sum));
  CHECK(s.ttc >= static_cast<double>(s.n) * 10.0 * 0.5);
}

TEST_CASE("summary CSV matches a flat recomputation from the vehicle CSVs") {
  std::stringstream summary;
  write_summary_header(summary);
  std::vector<std::string> vehicle_csvs;
  for (std::uint64_t seed : {11, 12}) {
    Run r = congested_run(seed, 900, 900);
    auto records = collect_records(*r.sim);
    std::stringstream v;
    write_vehicle_csv(v, records);
    vehicle_csvs.push_back(v.str());
    write_summary_row(summary, {"no_pa", seed, summarize(records, 1.0, 0.1, 50.0)});
  }
  std::string line;
  std::getline(summary, line);
  const auto header = split(line);
  REQUIRE(header.size() >= 9);
  CHECK(header[0] == "policy");
  CHECK(header[3] == "mean_tloss_s");
  for (const std::string& csv : vehicle_csvs) {
    std::stringstream in(csv);
    std::getline(in, line);
    const auto vh = split(line);
    REQUIRE(vh[1] == "completed");
    REQUIRE(vh[6] == "time_loss_s");
    REQUIRE(vh[8] == "walk_m");
    double n = 0, loss = 0, walk = 0, ttc = 0;
    while (std::getline(in, line)) {
      const auto c = split(line);
      if (c[1] != "1") continue;
      n += 1;
      ttc += std::stod(c[4]);
      loss += std::stod(c[6]);
      walk += std::stod(c[8]);
    }
    REQUIRE(std::getline(summary, line));
    const auto row = split(line);
    std::map<std::string, double> got;
    for (std::size_t k = 2; k < header.size(); ++k) got[header[k]] = std::stod(row[k]);
    CHECK(got["n"] == n);
    CHECK(got["mean_tloss_s"] == doctest::Approx(loss / n).epsilon(1e-6));
    CHECK(got["tloss_pct"] == doctest::Approx((50.0 - loss / n) / 50.0 * 100).epsilon(1e-6));
    CHECK(got["mean_walk_m"] == doctest::Approx(walk / n).epsilon(1e-6));
    CHECK(got["ttc_s"] == doctest::Approx(ttc).epsilon(1e-6));
    CHECK(got["twc_m"] == doctest::Approx(walk).epsilon(1e-6));
    CHECK(got["objective"] == doctest::Approx(ttc + 0.1 * walk).epsilon(1e-6));
  }
}

TEST_CASE("atomic file writes") {
  const auto dir = std::filesystem::temp_directory_path() / "parkrl_metrics_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "out.csv").string();
  write_file_atomic(path, "a,b\n1,2\n");
  write_file_atomic(path, "a,b\n3,4\n");
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "a,b\n3,4\n");
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
  std::filesystem::remove_all(dir);
  CHECK(fmt_num(1.0 / 3.0) == "0.333333");
}
