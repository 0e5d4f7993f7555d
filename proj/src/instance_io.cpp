#include "copforge/instance_io.hpp"

#include <fstream>
#include <sstream>

#include "copforge/errors.hpp"

namespace copforge {

using nlohmann::json;

json InstanceToJson(const ProblemInstance& inst) {
  json j;
  j["kind"] = KindName(inst.kind);
  j["n"] = inst.n;
  j["seed"] = inst.seed;
  if (!inst.coords.empty()) {
    json coords = json::array();
    for (const Point& p : inst.coords) coords.push_back({p.x, p.y});
    j["coords"] = std::move(coords);
  }
  if (!inst.demands.empty()) j["demands"] = inst.demands;
  if (!inst.weights.empty()) j["weights"] = inst.weights;
  if (!inst.values.empty()) j["values"] = inst.values;
  if (inst.capacity != 0.0) j["capacity"] = inst.capacity;
  if (IsGraphKind(inst.kind)) {
    json edges = json::array();
    for (const Edge& e : inst.edges) edges.push_back({e.u, e.v});
    j["edges"] = std::move(edges);
  }
  if (!inst.proc_times.empty()) j["proc_times"] = inst.proc_times;
  if (!inst.job_weights.empty()) j["job_weights"] = inst.job_weights;
  if (!inst.due_dates.empty()) j["due_dates"] = inst.due_dates;
  return j;
}

ProblemInstance InstanceFromJson(const json& j) {
  ProblemInstance inst;
  try {
    inst.kind = ParseKind(j.at("kind").get<std::string>());
    inst.n = j.at("n").get<int>();
    inst.seed = j.value("seed", uint64_t{0});
    if (j.contains("coords")) {
      for (const auto& p : j["coords"]) {
        inst.coords.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      }
    }
    inst.demands = j.value("demands", std::vector<double>{});
    inst.weights = j.value("weights", std::vector<double>{});
    inst.values = j.value("values", std::vector<double>{});
    inst.capacity = j.value("capacity", 0.0);
    if (j.contains("edges")) {
      for (const auto& e : j["edges"]) {
        inst.edges.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
      }
    }
    inst.proc_times = j.value("proc_times", std::vector<double>{});
    inst.job_weights = j.value("job_weights", std::vector<double>{});
    inst.due_dates = j.value("due_dates", std::vector<double>{});
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed instance JSON: ") + e.what());
  }
  inst.Validate();
  return inst;
}

void WriteInstancesJsonl(const std::filesystem::path& path,
                         const std::vector<ProblemInstance>& instances) {
  std::string out;
  for (const auto& inst : instances) {
    out += InstanceToJson(inst).dump();
    out += '\n';
  }
  WriteFileAtomic(path, out);
}

std::vector<ProblemInstance> ReadInstances(const std::filesystem::path& path) {
  const std::string content = ReadFile(path);
  std::vector<ProblemInstance> instances;
  std::istringstream lines(content);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      // Not JSON-lines: treat the whole file as one document.
      json doc = json::parse(content);
      if (doc.is_array()) {
        instances.clear();
        for (const auto& item : doc) instances.push_back(InstanceFromJson(item));
        return instances;
      }
      return {InstanceFromJson(doc)};
    }
    instances.push_back(InstanceFromJson(j));
  }
  return instances;
}

void WriteFileAtomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace copforge
