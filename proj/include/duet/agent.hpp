#pragma once

#include <functional>
#include <string>
#include <vector>

#include "duet/envsim.hpp"
#include "duet/model.hpp"
#include "duet/topomap.hpp"

namespace duet {

struct TrajectoryStep {
  int decision_node = -1;
  std::vector<double> fused;       // fused score values at this decision
  std::vector<int> index_to_node;  // position -> node id (-1 stop)
  double stop_prob = 0;
  double sigma = -1;  // gate value; -1 when not applicable
  int chosen_node = -1;  // -1 = stop
  std::vector<int> route;  // executed route for a navigation action
};

struct Trajectory {
  int episode_id = 0;
  std::vector<int> walk;  // every traversed node, route expansion included
  std::vector<TrajectoryStep> steps;
  int final_node = -1;
  int selected_object = -1;
  int selected_object_class = -1;
  double total_length = 0;
  int decision_steps = 0;
  bool forced_stop = false;
};

enum class PolicyKind { kModel, kExpert, kRandom };

struct RunOptions {
  int t_max = 15;
  FusionMode fusion = FusionMode::kDynamic;
  PolicyKind policy = PolicyKind::kModel;
  uint64_t seed = 0;  // drives the random-walk policy
  // Action source for PolicyKind::kExpert: returns a map node id or -1 to
  // stop. Composed by the caller (e.g. with the training demonstrator).
  std::function<int(const EnvGraph&, const TopoMap&, const Episode&)> expert;
};

Trajectory run_episode(const EnvGraph& env, const Episode& episode, const DuetModel& model,
                       const RunOptions& options);

struct EpisodeMetrics {
  int episode_id = 0;
  double tl = 0, ne = 0, sr = 0, osr = 0, spl = 0, rgs = 0, rgspl = 0;
};

struct MetricsReport {
  double tl = 0, ne = 0, sr = 0, osr = 0, spl = 0, rgs = 0, rgspl = 0;  // means
  int episodes = 0;
  std::vector<EpisodeMetrics> rows;
};

MetricsReport compute_metrics(const std::vector<Trajectory>& trajectories,
                              const std::vector<const Episode*>& episodes,
                              const std::vector<const EnvGraph*>& envs);

// Success radius in meters, measured as geodesic graph distance.
constexpr double kSuccessRadius = 3.0;

struct EvalOptions {
  RunOptions run;
  int workers = 1;
};

struct EvalResult {
  MetricsReport report;
  std::vector<Trajectory> trajectories;
  std::vector<const Episode*> episodes;
  std::vector<const EnvGraph*> envs;
};

EvalResult evaluate_split(const std::vector<HouseData>& houses, Split split,
                          const DuetModel& model, const EvalOptions& options);

// CSV with exactly the columns TL,NE,SR,OSR,SPL,RGS,RGSPL: one row per
// episode plus a summary row of means.
std::string metrics_to_csv(const MetricsReport& report);

}  // namespace duet
