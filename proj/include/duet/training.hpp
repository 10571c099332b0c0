#pragma once

#include <string>
#include <vector>

#include "duet/envsim.hpp"
#include "duet/model.hpp"
#include "duet/param_store.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"
#include "duet/topomap.hpp"

namespace duet {

struct EpisodeRef {
  const EnvGraph* env = nullptr;
  const Episode* episode = nullptr;
};

struct LossReport {
  int64_t step = 0;
  std::string task;  // "sap", "og", "mlm", "mrc", "finetune"
  double sap = 0, og = 0, pid = 0, mlm = 0, mrc = 0, total = 0;
  double lambda = 0;
  int sap_steps = 0, pid_steps = 0, mlm_tokens = 0, mrc_tokens = 0, og_samples = 0;
  std::string to_json_line() const;
};

struct TrainConfig {
  int steps = 800;
  uint64_t seed = 1;
  AdamWConfig adamw{1e-3, 0.9, 0.98, 1e-8, 0.01, 5.0};
  double lambda = 0.2;  // balance factor between cloning and demonstrator terms
  int t_max = 15;       // rollout cap for sampled trajectories
  bool debug_checks = false;  // verify demonstrator optimality each step
};

// Replays a node path through the map: each node is observed, encoded and
// folded into the map, with the step counter advancing per node.
void traverse_path(Tape& tape, const DuetModel& model, const EnvGraph& env, TopoMap& map,
                   const std::vector<int>& path, int& t);

// Behavior-cloning action loss along the expert path (teacher forcing).
// Returns the summed per-step cross-entropy; optionally exposes the final
// decision's scores so OG can reuse the same forward pass.
Var loss_sap(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             FusionMode mode, int* steps_out = nullptr, ActionScores* final_out = nullptr);

// Object grounding at the final location.
Var loss_og(Tape& tape, const FineEncoding& fine, const Episode& episode);

// Shortest-path interactive demonstrator: stop (-1) if the current node is
// a goal, else the unvisited navigable map node minimizing true-graph
// d(current,u) + d(u, nearest goal); ties go to the smallest node id. If the
// frontier is empty the only legal action is stop, which is returned.
int pid_expert(const EnvGraph& env, const TopoMap& map, const std::vector<int>& goal_nodes);

// Demonstrator-supervised loss on a trajectory sampled from the current
// policy (or replayed from fixed actions, for gradient checks).
Var loss_pid(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             Rng& rng, int t_max, FusionMode mode, std::vector<int>* actions_out = nullptr,
             const std::vector<int>* replay_actions = nullptr, bool debug_checks = false,
             int* steps_out = nullptr);

// Masked language modeling over the averaged coarse/fine word embeddings.
Var loss_mlm(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             Rng& rng, int* masked_out = nullptr);

// Masked region classification on the fine-scale encoder at the final
// observation of the demonstration path.
Var loss_mrc(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             Rng& rng, int* masked_out = nullptr);

// Round-robin pretraining over {SAP, OG, MLM, MRC}.
std::vector<LossReport> pretrain(DuetModel& model, const std::vector<EpisodeRef>& dataset,
                                 const TrainConfig& config);

// Fine-tuning: per step, teacher-forced SAP+OG plus a sampled rollout with
// demonstrator supervision, combined as lambda*SAP + PID + OG.
std::vector<LossReport> finetune(DuetModel& model, const std::vector<EpisodeRef>& dataset,
                                 const TrainConfig& config);

void write_loss_log(const std::string& path, const std::vector<LossReport>& reports,
                    const std::vector<std::string>& extra_lines = {});

}  // namespace duet
