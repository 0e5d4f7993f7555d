#ifndef COPFORGE_TAI_RENDER_HPP_
#define COPFORGE_TAI_RENDER_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "copforge/cop_core.hpp"

namespace copforge {

// Bumped whenever any template wording changes; part of every cache key.
inline constexpr std::string_view kTemplateVersion = "tai-v1";

// Number of nearest neighbours listed in routing hints.
inline constexpr int kNearestHints = 3;

struct TextAttributedInstance {
  ProblemKind kind = ProblemKind::kTsp;
  std::string template_version;
  bool hints_enabled = true;
  std::string task_text;
  std::vector<std::string> node_texts;  // one per choice index

  nlohmann::json ToJson() const;
  static TextAttributedInstance FromJson(const nlohmann::json& j);
  bool operator==(const TextAttributedInstance&) const = default;
};

std::string RenderTask(ProblemKind kind);

// One text per choice index (depot first for routing kinds with a depot).
// Numbers use 4-decimal fixed point.
std::vector<std::string> RenderNodes(const ProblemInstance& inst, bool hints_enabled);

TextAttributedInstance Render(const ProblemInstance& inst, bool hints_enabled);

// The k nearest other choice indices of `node`, ties by ascending index.
std::vector<int> NearestNodes(const ProblemInstance& inst, int node, int k);

// KP rank (1 = best value/weight ratio) of every item, ties by index.
std::vector<int> KnapsackRatioRanks(const ProblemInstance& inst);

// SMTWTP due-date rank (1 = earliest), ties by index.
std::vector<int> DueDateRanks(const ProblemInstance& inst);

using Digest = std::array<uint8_t, 16>;

// First 128 bits of SHA-256 over the UTF-8 bytes.
Digest ContentDigest(std::string_view text);
std::string DigestHex(const Digest& d);
std::string ContentHash(std::string_view text);

}  // namespace copforge

#endif  // COPFORGE_TAI_RENDER_HPP_
