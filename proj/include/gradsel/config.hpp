#pragma once

// Experiment configuration: JSON on disk, strict keys, versioned schema.

#include <cstdint>
#include <string>
#include <vector>

#include "gradsel/selector.hpp"
#include "gradsel/simkit.hpp"

namespace gradsel::config {

inline constexpr int kSchemaVersion = 1;

struct ExperimentConfig {
  simkit::SimulationConfig sim;
  std::vector<selector::Strategy> strategies = {selector::Strategy::two_stage,
                                                selector::Strategy::topk_raw,
                                                selector::Strategy::random};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  double loss_threshold = 1.5;  // for steps_to_threshold
  std::string output = "gradsel_out";
};

// Parses JSON text. Errors carry the line (syntax) or field path (schema).
ExperimentConfig parse(const std::string& text);
ExperimentConfig load(const std::string& path);

// Full serialization including every default.
std::string serialize(const ExperimentConfig& cfg);

bool equivalent(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace gradsel::config
