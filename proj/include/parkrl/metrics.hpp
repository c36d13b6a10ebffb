/// @file metrics.hpp
/// @brief Per-vehicle records and run summaries: time loss, walking distance, TTC/TWC and the
///        weighted objective. CSV writers for both.

#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "parkrl/simcore.hpp"

namespace parkrl {

/// Vehicle has not left the network yet.
class NotAvailable : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class EmptySummary : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct VehicleRecord {
  VehicleId id = 0;
  double travel_time = 0.0;  ///< TC_i, parked interval excluded
  double free_flow = 0.0;
  double walk = 0.0;         ///< WC_i
  double depart = 0.0;
  double arrive = 0.0;
  bool parked = false;
  bool completed = false;
};

/// One record per demand vehicle released so far (residents excluded), ordered by id.
std::vector<VehicleRecord> collect_records(const Simulation& sim);

double time_loss(const VehicleRecord& r);
/// (reference - candidate) / reference * 100.
double time_loss_pct(double candidate, double reference);
/// 0 for vehicles that never parked.
double walking_distance(const VehicleRecord& r);

inline constexpr int kHourBins = 24;

struct MetricsSummary {
  std::size_t n = 0;
  std::size_t incomplete = 0;
  std::size_t parkers = 0;
  double mean_tloss = 0.0;
  std::optional<double> tloss_pct;
  double mean_walk = 0.0;          ///< over all completed vehicles
  double mean_walk_parkers = 0.0;  ///< over completed vehicles that parked
  double ttc = 0.0;
  double twc = 0.0;
  double objective = 0.0;
  /// Mean time loss by departure hour; bins without vehicles hold 0.
  std::array<double, kHourBins> hourly_tloss{};
  std::array<std::size_t, kHourBins> hourly_count{};
};

MetricsSummary summarize(const std::vector<VehicleRecord>& records, double alpha, double beta,
                         std::optional<double> reference = std::nullopt);

struct SummaryRow {
  std::string policy;
  std::uint64_t seed = 0;
  MetricsSummary summary;
};

void write_summary_header(std::ostream& os);
void write_summary_row(std::ostream& os, const SummaryRow& row);
void write_vehicle_csv(std::ostream& os, const std::vector<VehicleRecord>& records);

/// Writes through a temporary file and renames it into place.
void write_file_atomic(const std::string& path, const std::string& content);

/// Fixed "%.6f" rendering used in all CSV output.
std::string fmt_num(double x);

}  // namespace parkrl
