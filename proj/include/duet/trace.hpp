#pragma once

#include <string>

#include "duet/agent.hpp"
#include "duet/envsim.hpp"

namespace duet {

// Self-contained per-episode trajectory dump: graph skeleton, expert path,
// executed walk and per-decision scores.
std::string trajectory_to_trace_json(const EnvGraph& env, const Episode& episode,
                                     const Trajectory& trajectory);

// Renders a trace into an SVG: house graph, expert path and the predicted
// trajectory with start/goal markers. Deterministic for a fixed input.
std::string trace_to_svg(const std::string& trace_json);

}  // namespace duet
