#include "copforge/gap_report.hpp"

#include <charconv>
#include <cmath>
#include <limits>

#include "copforge/errors.hpp"

namespace copforge {

std::string FormatFixed(double value, int decimals) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  if (std::isnan(value)) return "nan";
  if (value == 0.0) value = 0.0;  // no "-0.0000"
  char buf[64];
  const auto result =
      std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::fixed, decimals);
  std::string out(buf, result.ptr);
  if (out.front() == '-' && out.find_first_not_of("-0.") == std::string::npos) {
    out.erase(0, 1);
  }
  return out;
}

double OptimalityGap(ProblemKind kind, double objective, double reference) {
  if (objective == reference) return 0.0;
  if (reference == 0.0) return std::numeric_limits<double>::infinity();
  const double diff = IsMaximization(kind) ? reference - objective : objective - reference;
  return diff / std::abs(reference);
}

GapReport ComputeGaps(ProblemKind kind, int n, std::string method,
                      std::span<const double> objectives,
                      std::span<const double> reference_objectives, double total_seconds,
                      std::string reference) {
  if (objectives.size() != reference_objectives.size()) {
    throw InvalidArgument("gap computation needs aligned lists: " +
                          std::to_string(objectives.size()) + " objectives vs " +
                          std::to_string(reference_objectives.size()) + " references");
  }
  GapReport r;
  r.kind = kind;
  r.n = n;
  r.method = std::move(method);
  r.reference = std::move(reference);
  r.objectives.assign(objectives.begin(), objectives.end());
  r.reference_objectives.assign(reference_objectives.begin(), reference_objectives.end());
  r.total_seconds = total_seconds;
  double obj_sum = 0.0;
  double gap_sum = 0.0;
  for (size_t i = 0; i < objectives.size(); ++i) {
    r.gaps.push_back(OptimalityGap(kind, objectives[i], reference_objectives[i]));
    obj_sum += objectives[i];
    gap_sum += r.gaps.back();
  }
  if (!objectives.empty()) {
    r.mean_obj = obj_sum / static_cast<double>(objectives.size());
    r.mean_gap = gap_sum / static_cast<double>(objectives.size());
  }
  return r;
}

std::string GapCsvRow(const GapReport& r) {
  std::string row;
  row += KindName(r.kind);
  row += ',' + std::to_string(r.n);
  row += ',' + r.method;
  row += ',' + FormatFixed(r.mean_obj, 6);
  row += ',' + FormatFixed(r.mean_gap, 6);
  row += ',' + FormatFixed(r.total_seconds, 4);
  row += ',' + r.reference;
  return row;
}

std::string GapReportsToCsv(std::span<const GapReport> reports) {
  std::string out = std::string(kGapCsvHeader) + "\n";
  for (const auto& r : reports) out += GapCsvRow(r) + "\n";
  return out;
}

nlohmann::json GapReportToJson(const GapReport& r) {
  return {
      {"kind", KindName(r.kind)},
      {"n", r.n},
      {"method", r.method},
      {"gap_reference", r.reference},
      {"mean_obj", r.mean_obj},
      {"mean_gap", std::isfinite(r.mean_gap) ? nlohmann::json(r.mean_gap) : nlohmann::json()},
      {"total_seconds", r.total_seconds},
      {"objectives", r.objectives},
      {"reference_objectives", r.reference_objectives},
  };
}

}  // namespace copforge
