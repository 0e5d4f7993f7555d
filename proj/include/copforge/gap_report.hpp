#ifndef COPFORGE_GAP_REPORT_HPP_
#define COPFORGE_GAP_REPORT_HPP_

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "copforge/cop_core.hpp"

namespace copforge {

// Relative gap to a reference optimum, signed so that an exact reference
// yields gap >= 0: (obj - opt) / opt when minimizing, (opt - obj) / opt when
// maximizing. A zero reference gives 0 for a matching objective, +inf
// otherwise.
double OptimalityGap(ProblemKind kind, double objective, double reference);

struct GapReport {
  ProblemKind kind = ProblemKind::kTsp;
  int n = 0;
  std::string method;
  std::string reference;  // "exact" or "heuristic:<name>"
  std::vector<double> objectives;
  std::vector<double> reference_objectives;
  std::vector<double> gaps;
  double mean_obj = 0.0;
  double mean_gap = 0.0;
  double total_seconds = 0.0;
};

// Throws InvalidArgument when the two lists are not aligned.
GapReport ComputeGaps(ProblemKind kind, int n, std::string method,
                      std::span<const double> objectives,
                      std::span<const double> reference_objectives, double total_seconds,
                      std::string reference = "exact");

inline constexpr const char* kGapCsvHeader =
    "kind,n,method,mean_obj,mean_gap,total_seconds,gap_reference";

std::string GapCsvRow(const GapReport& report);
std::string GapReportsToCsv(std::span<const GapReport> reports);
nlohmann::json GapReportToJson(const GapReport& report);

// Fixed-point rendering, locale independent.
std::string FormatFixed(double value, int decimals);

}  // namespace copforge

#endif  // COPFORGE_GAP_REPORT_HPP_
