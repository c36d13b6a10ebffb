#include "parkrl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

namespace parkrl {

std::vector<VehicleRecord> collect_records(const Simulation& sim) {
  std::vector<VehicleRecord> out;
  const double now = static_cast<double>(sim.time());
  for (const auto& v : sim.vehicles()) {
    if (v.resident) continue;
    if (v.phase == VehiclePhase::pending && v.trip.spawn_time >= now) continue;
    VehicleRecord r;
    r.id = v.id;
    r.free_flow = v.free_flow;
    r.depart = v.trip.spawn_time;
    r.parked = v.has_parked;
    r.walk = v.has_parked ? v.walk : 0.0;
    r.completed = v.phase == VehiclePhase::departed;
    if (r.completed) {
      r.arrive = v.arrive_time;
      r.travel_time = v.travel_time();
    }
    out.push_back(r);
  }
  return out;
}

double time_loss(const VehicleRecord& r) {
  if (!r.completed) throw NotAvailable("vehicle " + std::to_string(r.id) + " is still active");
  return r.travel_time - r.free_flow;
}

double time_loss_pct(double candidate, double reference) {
  if (!(reference > 0.0)) throw std::domain_error("time_loss_pct: reference must be > 0");
  return (reference - candidate) / reference * 100.0;
}

double walking_distance(const VehicleRecord& r) { return r.parked ? r.walk : 0.0; }

MetricsSummary summarize(const std::vector<VehicleRecord>& records, double alpha, double beta,
                         std::optional<double> reference) {
  MetricsSummary s;
  double loss_sum = 0.0;
  double walk_parkers = 0.0;
  std::array<double, kHourBins> hour_sum{};
  for (const auto& r : records) {
    if (!r.completed) {
      ++s.incomplete;
      continue;
    }
    ++s.n;
    const double loss = time_loss(r);
    const double walk = walking_distance(r);
    loss_sum += loss;
    s.ttc += r.travel_time;
    s.twc += walk;
    if (r.parked) {
      ++s.parkers;
      walk_parkers += walk;
    }
    const auto bin = static_cast<std::size_t>(
        std::clamp(static_cast<int>(std::floor(r.depart / 3600.0)), 0, kHourBins - 1));
    hour_sum[bin] += loss;
    ++s.hourly_count[bin];
  }
  if (s.n == 0) throw EmptySummary("no completed vehicles");
  const double n = static_cast<double>(s.n);
  s.mean_tloss = loss_sum / n;
  s.mean_walk = s.twc / n;
  s.mean_walk_parkers = s.parkers == 0 ? 0.0 : walk_parkers / static_cast<double>(s.parkers);
  s.objective = alpha * s.ttc + beta * s.twc;
  if (reference) s.tloss_pct = time_loss_pct(s.mean_tloss, *reference);
  for (int h = 0; h < kHourBins; ++h) {
    const auto c = s.hourly_count[static_cast<std::size_t>(h)];
    s.hourly_tloss[static_cast<std::size_t>(h)] =
        c == 0 ? 0.0 : hour_sum[static_cast<std::size_t>(h)] / static_cast<double>(c);
  }
  return s;
}

std::string fmt_num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

void write_summary_header(std::ostream& os) {
  os << "policy,seed,n,mean_tloss_s,tloss_pct,mean_walk_m,ttc_s,twc_m,objective,incomplete,"
        "mean_walk_parkers_m\n";
}

void write_summary_row(std::ostream& os, const SummaryRow& row) {
  const auto& s = row.summary;
  os << row.policy << ',' << row.seed << ',' << s.n << ',' << fmt_num(s.mean_tloss) << ','
     << (s.tloss_pct ? fmt_num(*s.tloss_pct) : std::string()) << ',' << fmt_num(s.mean_walk)
     << ',' << fmt_num(s.ttc) << ',' << fmt_num(s.twc) << ',' << fmt_num(s.objective) << ','
     << s.incomplete << ',' << fmt_num(s.mean_walk_parkers) << '\n';
}

void write_vehicle_csv(std::ostream& os, const std::vector<VehicleRecord>& records) {
  os << "vehicle,completed,depart_s,arrive_s,travel_time_s,free_flow_s,time_loss_s,parked,walk_m\n";
  for (const auto& r : records) {
    os << r.id << ',' << (r.completed ? 1 : 0) << ',' << fmt_num(r.depart) << ',';
    if (r.completed) {
      os << fmt_num(r.arrive) << ',' << fmt_num(r.travel_time) << ',' << fmt_num(r.free_flow)
         << ',' << fmt_num(time_loss(r));
    } else {
      os << ",," << fmt_num(r.free_flow) << ',';
    }
    os << ',' << (r.parked ? 1 : 0) << ',' << fmt_num(walking_distance(r)) << '\n';
  }
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp);
    os << content;
    if (!os.flush()) throw std::runtime_error("cannot write " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " to " + path);
}

}  // namespace parkrl
