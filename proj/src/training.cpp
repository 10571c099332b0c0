#include "duet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "duet/log.hpp"

namespace duet {

namespace {

constexpr double kMaskProb = 0.15;

int score_position_of(const ActionScores& scores, int node_id) {
  for (size_t i = 0; i < scores.index_to_node.size(); ++i)
    if (scores.index_to_node[i] == node_id) return static_cast<int>(i);
  return -1;
}

int sample_position(const std::vector<double>& fused, Rng& rng) {
  const std::vector<double> probs = softmax_masked(fused);
  const double u = rng.uniform();
  double acc = 0.0;
  int last_valid = -1;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (is_masked_value(fused[i])) continue;
    last_valid = static_cast<int>(i);
    acc += probs[i];
    if (u < acc) return last_valid;
  }
  return last_valid;
}

}  // namespace

std::string LossReport::to_json_line() const {
  nlohmann::json j;
  j["step"] = step;
  j["task"] = task;
  j["sap"] = sap;
  j["og"] = og;
  j["pid"] = pid;
  j["mlm"] = mlm;
  j["mrc"] = mrc;
  j["total"] = total;
  j["lambda"] = lambda;
  j["counts"] = {{"sap_steps", sap_steps}, {"pid_steps", pid_steps}, {"mlm_tokens", mlm_tokens},
                 {"mrc_tokens", mrc_tokens}, {"og_samples", og_samples}};
  return j.dump();
}

void traverse_path(Tape& tape, const DuetModel& model, const EnvGraph& env, TopoMap& map,
                   const std::vector<int>& path, int& t) {
  for (int node : path) {
    if (!map.empty() && node == map.current()) continue;
    ++t;
    map.update(tape, t, node, model.encode_panorama(tape, env, node));
  }
}

Var loss_sap(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             FusionMode mode, int* steps_out, ActionScores* final_out) {
  if (episode.expert_path.empty() || episode.expert_path.front() != episode.start)
    throw DataError("loss_sap: invalid expert path");
  TextEncoding text = model.encode_text(tape, episode.instruction);
  TopoMap map;
  int t = 0;
  Var total;
  int steps = 0;
  for (size_t i = 0; i < episode.expert_path.size(); ++i) {
    const int node = episode.expert_path[i];
    ++t;
    map.update(tape, t, node, model.encode_panorama(tape, env, node));
    ActionScores scores = model.step_scores(tape, map, text, mode);
    const bool last = i + 1 == episode.expert_path.size();
    const int target_pos = last ? 0 : score_position_of(scores, episode.expert_path[i + 1]);
    if (target_pos < 0 || scores.mask[target_pos])
      throw DataError("loss_sap: expert target is masked or missing at step " + std::to_string(i));
    Var step_loss = tape.cross_entropy(scores.fused, target_pos);
    total = total.valid() ? tape.add(total, step_loss) : step_loss;
    ++steps;
    if (last && final_out != nullptr) *final_out = std::move(scores);
  }
  if (steps_out != nullptr) *steps_out = steps;
  return total;
}

Var loss_og(Tape& tape, const FineEncoding& fine, const Episode& episode) {
  if (episode.target_object.index < 0) throw DataError("loss_og: episode has no target object");
  if (!fine.object_logits.valid()) throw DataError("loss_og: no object logits available");
  return tape.cross_entropy(fine.object_logits, episode.target_object.index);
}

int pid_expert(const EnvGraph& env, const TopoMap& map, const std::vector<int>& goal_nodes) {
  if (goal_nodes.empty()) throw DataError("pid_expert: empty goal set");
  const int current = map.current();
  for (int g : goal_nodes)
    if (g == current) return -1;
  std::vector<int> candidates;
  for (int node : map.order())
    if (map.record(node).status == NodeStatus::kNavigable) candidates.push_back(node);
  if (candidates.empty()) return -1;  // frontier exhausted: stop is the only action
  std::sort(candidates.begin(), candidates.end());
  const std::vector<double> from_cur = shortest_distances(env, current);
  std::vector<double> to_goal(env.nodes.size(), std::numeric_limits<double>::infinity());
  for (int g : goal_nodes) {
    const std::vector<double> dg = shortest_distances(env, g);
    for (size_t i = 0; i < dg.size(); ++i) to_goal[i] = std::min(to_goal[i], dg[i]);
  }
  int best = -1;
  double best_total = std::numeric_limits<double>::infinity();
  for (int u : candidates) {
    const double total = from_cur[u] + to_goal[u];
    if (total < best_total) {
      best_total = total;
      best = u;
    }
  }
  if (best < 0) throw DataError("pid_expert: no reachable candidate");
  return best;
}

namespace {

void check_pid_optimality(const EnvGraph& env, const TopoMap& map,
                          const std::vector<int>& goal_nodes, int chosen) {
  const std::vector<double> from_cur = shortest_distances(env, map.current());
  std::vector<double> to_goal(env.nodes.size(), std::numeric_limits<double>::infinity());
  for (int g : goal_nodes) {
    const std::vector<double> dg = shortest_distances(env, g);
    for (size_t i = 0; i < dg.size(); ++i) to_goal[i] = std::min(to_goal[i], dg[i]);
  }
  const double chosen_total = from_cur[chosen] + to_goal[chosen];
  for (int node : map.order()) {
    if (map.record(node).status != NodeStatus::kNavigable) continue;
    if (chosen_total > from_cur[node] + to_goal[node] + 1e-12)
      throw NumericError("pid_expert: suboptimal choice detected in debug check");
  }
}

}  // namespace

Var loss_pid(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             Rng& rng, int t_max, FusionMode mode, std::vector<int>* actions_out,
             const std::vector<int>* replay_actions, bool debug_checks, int* steps_out) {
  TextEncoding text = model.encode_text(tape, episode.instruction);
  TopoMap map;
  int t = 0;
  ++t;
  map.update(tape, t, episode.start, model.encode_panorama(tape, env, episode.start));
  Var total;
  int decisions = 0;
  for (int dec = 0; dec < t_max; ++dec) {
    ActionScores scores = model.step_scores(tape, map, text, mode);
    const int expert_node = pid_expert(env, map, episode.goal_nodes);
    const int expert_pos = expert_node < 0 ? 0 : score_position_of(scores, expert_node);
    if (expert_pos < 0 || scores.mask[expert_pos])
      throw DataError("loss_pid: demonstrator target is masked");
    if (debug_checks && expert_node >= 0)
      check_pid_optimality(env, map, episode.goal_nodes, expert_node);
    Var step_loss = tape.cross_entropy(scores.fused, expert_pos);
    total = total.valid() ? tape.add(total, step_loss) : step_loss;
    ++decisions;

    int chosen_node;
    if (replay_actions != nullptr) {
      if (dec >= static_cast<int>(replay_actions->size()))
        throw DataError("loss_pid: replay actions exhausted");
      chosen_node = (*replay_actions)[dec];
    } else {
      const int pos = sample_position(tape.val(scores.fused).data, rng);
      chosen_node = scores.index_to_node[pos];
    }
    if (actions_out != nullptr) actions_out->push_back(chosen_node);
    if (chosen_node < 0) break;  // stop
    const std::vector<int> route = map.plan_route(map.current(), chosen_node);
    traverse_path(tape, model, env, map, route, t);
  }
  if (steps_out != nullptr) *steps_out = decisions;
  return total;
}

Var loss_mlm(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             Rng& rng, int* masked_out) {
  const std::vector<int>& original = episode.instruction;
  std::vector<int> masked = original;
  std::vector<int> positions;
  for (size_t i = 0; i < masked.size(); ++i) {
    if (rng.uniform() < kMaskProb) {
      masked[i] = Vocabulary::kMaskTok;
      positions.push_back(static_cast<int>(i));
    }
  }
  if (positions.empty()) {
    const int forced = rng.uniform_int(static_cast<int>(masked.size()));
    masked[forced] = Vocabulary::kMaskTok;
    positions.push_back(forced);
  }
  TextEncoding text = model.encode_text(tape, masked);
  TopoMap map;
  int t = 0;
  traverse_path(tape, model, env, map, episode.expert_path, t);
  CoarseEncoding coarse = model.coarse_forward(tape, map, text);
  FineEncoding fine = model.fine_forward(tape, text, map);
  Var avg_words = tape.scale(tape.add(coarse.text_stream, fine.text_stream), 0.5);
  Var logits = model.mlm_logits(tape, avg_words);  // [L, vocab]
  Var total;
  for (int pos : positions) {
    Var row = tape.flatten(tape.slice_rows(logits, pos, pos + 1));
    Var ce = tape.cross_entropy(row, original[pos]);
    total = total.valid() ? tape.add(total, ce) : ce;
  }
  if (masked_out != nullptr) *masked_out = static_cast<int>(positions.size());
  return tape.scale(total, 1.0 / static_cast<double>(positions.size()));
}

Var loss_mrc(Tape& tape, const DuetModel& model, const EnvGraph& env, const Episode& episode,
             Rng& rng, int* masked_out) {
  const int final_node = episode.expert_path.back();
  const EnvNode& node = env.node(final_node);
  const int n = static_cast<int>(node.pano.view_features.size());
  const int m = static_cast<int>(node.pano.objects.size());
  std::vector<int> masked_views, masked_objects;
  std::vector<std::vector<double>> views = node.pano.view_features;
  std::vector<std::vector<double>> objects;
  objects.reserve(m);
  for (const SimObject& o : node.pano.objects) objects.push_back(o.feature);
  for (int i = 0; i < n; ++i)
    if (rng.uniform() < kMaskProb) {
      std::fill(views[i].begin(), views[i].end(), 0.0);
      masked_views.push_back(i);
    }
  for (int j = 0; j < m; ++j)
    if (rng.uniform() < kMaskProb) {
      std::fill(objects[j].begin(), objects[j].end(), 0.0);
      masked_objects.push_back(j);
    }
  if (masked_views.empty() && masked_objects.empty()) {
    const int pick = rng.uniform_int(n + m);
    if (pick < n) {
      std::fill(views[pick].begin(), views[pick].end(), 0.0);
      masked_views.push_back(pick);
    } else {
      std::fill(objects[pick - n].begin(), objects[pick - n].end(), 0.0);
      masked_objects.push_back(pick - n);
    }
  }

  TextEncoding text = model.encode_text(tape, episode.instruction);
  TopoMap map;
  int t = 0;
  // The demonstration path up to the final observation, which is re-encoded
  // with the masked features so the fine cache sees them.
  std::vector<int> prefix(episode.expert_path.begin(), episode.expert_path.end() - 1);
  traverse_path(tape, model, env, map, prefix, t);
  ++t;
  map.update(tape, t, final_node,
             model.encode_panorama(tape, env, final_node, &views, &objects));
  FineEncoding fine = model.fine_forward(tape, text, map);

  Var total;
  int count = 0;
  auto add_kl = [&](Var logits_row, int cls, int classes) {
    Tensor one_hot = Tensor::zeros({classes});
    one_hot.data[cls] = 1.0;
    Var kl = tape.kl_divergence(one_hot, logits_row);
    total = total.valid() ? tape.add(total, kl) : kl;
    ++count;
  };
  for (int i : masked_views) {
    Var token = tape.slice_rows(fine.visual_stream, 1 + i, 2 + i);
    Var logits = tape.flatten(model.mrc_view_logits(tape, token));
    add_kl(logits, node.pano.view_rooms[i], model.config().room_classes);
  }
  for (int j : masked_objects) {
    Var token = tape.slice_rows(fine.visual_stream, 1 + n + j, 2 + n + j);
    Var logits = tape.flatten(model.mrc_object_logits(tape, token));
    add_kl(logits, node.pano.objects[j].class_label, model.config().object_classes);
  }
  if (masked_out != nullptr) *masked_out = count;
  return tape.scale(total, 1.0 / static_cast<double>(count));
}

namespace {

const EpisodeRef& pick_episode(const std::vector<EpisodeRef>& dataset, Rng& rng) {
  return dataset[rng.uniform_int(static_cast<int>(dataset.size()))];
}

}  // namespace

std::vector<LossReport> pretrain(DuetModel& model, const std::vector<EpisodeRef>& dataset,
                                 const TrainConfig& config) {
  if (dataset.empty()) throw DataError("pretrain: empty dataset");
  std::vector<LossReport> log;
  Rng data_rng = Rng(config.seed).fork("pretrain-data");
  Rng mask_rng = Rng(config.seed).fork("pretrain-mask");
  const char* tasks[] = {"sap", "og", "mlm", "mrc"};
  for (int step = 0; step < config.steps; ++step) {
    const EpisodeRef& ref = pick_episode(dataset, data_rng);
    const std::string task = tasks[step % 4];
    Tape tape;
    LossReport report;
    report.step = model.store().step() + 1;
    report.task = task;
    Var loss;
    if (task == "sap") {
      loss = loss_sap(tape, model, *ref.env, *ref.episode, FusionMode::kDynamic, &report.sap_steps);
      report.sap = tape.val(loss).data[0];
    } else if (task == "og") {
      ActionScores final_scores;
      Var sap = loss_sap(tape, model, *ref.env, *ref.episode, FusionMode::kDynamic, nullptr,
                         &final_scores);
      (void)sap;  // teacher forcing builds the path; only OG contributes
      if (ref.episode->target_object.index >= 0 && final_scores.fine_enc.has_value() &&
          final_scores.fine_enc->object_logits.valid()) {
        loss = loss_og(tape, *final_scores.fine_enc, *ref.episode);
        report.og = tape.val(loss).data[0];
        report.og_samples = 1;
      } else {
        loss = Var{};
      }
    } else if (task == "mlm") {
      loss = loss_mlm(tape, model, *ref.env, *ref.episode, mask_rng, &report.mlm_tokens);
      report.mlm = tape.val(loss).data[0];
    } else {
      loss = loss_mrc(tape, model, *ref.env, *ref.episode, mask_rng, &report.mrc_tokens);
      report.mrc = tape.val(loss).data[0];
    }
    if (loss.valid()) {
      report.total = tape.val(loss).data[0];
      tape.backward(loss);
      model.store().adamw_step(config.adamw);
      model.store().zero_grads();
    }
    log.push_back(report);
    if ((step + 1) % 100 == 0)
      log_info("pretrain step %d/%d task=%s loss=%.4f", step + 1, config.steps, task.c_str(),
               report.total);
  }
  return log;
}

std::vector<LossReport> finetune(DuetModel& model, const std::vector<EpisodeRef>& dataset,
                                 const TrainConfig& config) {
  if (dataset.empty()) throw DataError("finetune: empty dataset");
  std::vector<LossReport> log;
  Rng data_rng = Rng(config.seed).fork("finetune-data");
  Rng rollout_rng = Rng(config.seed).fork("finetune-rollout");
  for (int step = 0; step < config.steps; ++step) {
    const EpisodeRef& ref = pick_episode(dataset, data_rng);
    Tape tape;
    LossReport report;
    report.step = model.store().step() + 1;
    report.task = "finetune";
    report.lambda = config.lambda;

    ActionScores final_scores;
    Var sap = loss_sap(tape, model, *ref.env, *ref.episode, FusionMode::kDynamic,
                       &report.sap_steps, &final_scores);
    report.sap = tape.val(sap).data[0];
    Var pid = loss_pid(tape, model, *ref.env, *ref.episode, rollout_rng, config.t_max,
                       FusionMode::kDynamic, nullptr, nullptr, config.debug_checks,
                       &report.pid_steps);
    report.pid = tape.val(pid).data[0];
    Var total = tape.add(tape.scale(sap, config.lambda), pid);
    // The expert demonstration ends at the goal, so object supervision
    // applies whenever the episode has a target object.
    if (ref.episode->target_object.index >= 0 && final_scores.fine_enc.has_value() &&
        final_scores.fine_enc->object_logits.valid()) {
      Var og = loss_og(tape, *final_scores.fine_enc, *ref.episode);
      report.og = tape.val(og).data[0];
      report.og_samples = 1;
      total = tape.add(total, og);
    }
    report.total = tape.val(total).data[0];
    tape.backward(total);
    model.store().adamw_step(config.adamw);
    model.store().zero_grads();
    log.push_back(report);
    if ((step + 1) % 50 == 0)
      log_info("finetune step %d/%d total=%.4f (sap=%.3f pid=%.3f og=%.3f)", step + 1,
               config.steps, report.total, report.sap, report.pid, report.og);
  }
  return log;
}

void write_loss_log(const std::string& path, const std::vector<LossReport>& reports,
                    const std::vector<std::string>& extra_lines) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open log for writing: " + path);
  for (const LossReport& r : reports) f << r.to_json_line() << "\n";
  for (const std::string& line : extra_lines) f << line << "\n";
}

}  // namespace duet
