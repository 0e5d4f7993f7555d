#ifndef COPFORGE_INSTANCE_IO_HPP_
#define COPFORGE_INSTANCE_IO_HPP_

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "copforge/cop_core.hpp"

namespace copforge {

// {kind, n, seed, <kind fields>}. Doubles round-trip exactly.
nlohmann::json InstanceToJson(const ProblemInstance& inst);
ProblemInstance InstanceFromJson(const nlohmann::json& j);

// One JSON object per line.
void WriteInstancesJsonl(const std::filesystem::path& path,
                         const std::vector<ProblemInstance>& instances);
// Accepts JSON-lines or a single JSON object.
std::vector<ProblemInstance> ReadInstances(const std::filesystem::path& path);

// Writes `content` to `path` via a temporary file and rename.
void WriteFileAtomic(const std::filesystem::path& path, const std::string& content);
std::string ReadFile(const std::filesystem::path& path);

}  // namespace copforge

#endif  // COPFORGE_INSTANCE_IO_HPP_
