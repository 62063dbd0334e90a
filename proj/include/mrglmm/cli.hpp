#pragma once

#include "mrglmm/mcem.hpp"
#include "mrglmm/simulation.hpp"
#include "mrglmm/tuning.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace mrglmm::cli {

enum ExitCode : int { ok = 0, invalid_input = 1, not_converged = 2, numerical_failure = 3 };

// Config sections. Every object rejects keys it does not know.
McemConfig mcem_from_json(const nlohmann::json& config);  // "model" and "mwg" sections
TuningGrid grid_from_json(const nlohmann::json& config);  // "grid" section
SimDesign design_from_json(const nlohmann::json& config); // "design" section

// Validates the top-level document (version, known keys, section types).
void check_config(const nlohmann::json& config);

// argv[0] is the program name. Never throws; returns an ExitCode.
int run(const std::vector<std::string>& args);

}  // namespace mrglmm::cli
