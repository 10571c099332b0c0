#include "duet/agent.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <thread>

#include "duet/training.hpp"

namespace duet {

namespace {

double route_length(const EnvGraph& env, const std::vector<int>& route) {
  double len = 0;
  for (size_t i = 0; i + 1 < route.size(); ++i)
    len += env.edge_length(route[i], route[i + 1]);
  return len;
}

// Uniform probability over the currently legal actions (stop + frontier).
int random_action(const TopoMap& map, Rng& rng, double* stop_prob) {
  std::vector<int> actions{-1};
  for (int node : map.order())
    if (map.record(node).status == NodeStatus::kNavigable) actions.push_back(node);
  *stop_prob = 1.0 / static_cast<double>(actions.size());
  return actions[rng.uniform_int(static_cast<int>(actions.size()))];
}

}  // namespace

Trajectory run_episode(const EnvGraph& env, const Episode& episode, const DuetModel& model,
                       const RunOptions& options) {
  if (options.t_max < 1) throw DataError("run_episode: t_max must be >= 1");
  Tape tape;
  tape.set_grad_enabled(false);
  TextEncoding text = model.encode_text(tape, episode.instruction);
  TopoMap map;
  Rng rng = Rng(options.seed).fork("random-policy", static_cast<uint64_t>(episode.id));

  Trajectory traj;
  traj.episode_id = episode.id;
  int t = 0;
  ++t;
  map.update(tape, t, episode.start, model.encode_panorama(tape, env, episode.start));
  traj.walk.push_back(episode.start);

  bool stopped = false;
  for (int dec = 0; dec < options.t_max && !stopped; ++dec) {
    TrajectoryStep step;
    step.decision_node = map.current();
    int chosen_node = -1;
    if (options.policy == PolicyKind::kModel) {
      ActionScores scores = model.step_scores(tape, map, text, options.fusion);
      step.fused = tape.val(scores.fused).data;
      step.index_to_node = scores.index_to_node;
      step.stop_prob = softmax_masked(step.fused)[0];
      if (scores.sigma.valid()) step.sigma = tape.val(scores.sigma).data[0];
      chosen_node = scores.index_to_node[argmax_unmasked(step.fused)];
    } else if (options.policy == PolicyKind::kRandom) {
      chosen_node = random_action(map, rng, &step.stop_prob);
    } else {
      if (!options.expert) throw DataError("run_episode: expert policy without action source");
      chosen_node = options.expert(env, map, episode);
      step.stop_prob = chosen_node < 0 ? 1.0 : 0.0;
    }
    step.chosen_node = chosen_node;
    ++traj.decision_steps;
    if (chosen_node < 0) {
      stopped = true;
      traj.steps.push_back(std::move(step));
      break;
    }
    std::vector<int> route = map.plan_route(map.current(), chosen_node);
    traj.total_length += route_length(env, route);
    for (size_t i = 1; i < route.size(); ++i) traj.walk.push_back(route[i]);
    step.route = route;
    traj.steps.push_back(std::move(step));
    traverse_path(tape, model, env, map, route, t);
  }

  if (!stopped) {
    // Budget exhausted: return to the decision node with the highest
    // recorded stop probability; the return trip counts toward TL.
    traj.forced_stop = true;
    int best_node = traj.steps.front().decision_node;
    double best_prob = traj.steps.front().stop_prob;
    for (const TrajectoryStep& s : traj.steps) {
      if (s.stop_prob > best_prob) {
        best_prob = s.stop_prob;
        best_node = s.decision_node;
      }
    }
    if (best_node != map.current()) {
      std::vector<int> route = map.plan_route(map.current(), best_node);
      traj.total_length += route_length(env, route);
      for (size_t i = 1; i < route.size(); ++i) traj.walk.push_back(route[i]);
      traverse_path(tape, model, env, map, route, t);
    }
  }
  traj.final_node = map.current();

  // Object grounding at the stopped location (needs the fine encoder).
  if (options.fusion != FusionMode::kCoarseOnly &&
      !env.node(traj.final_node).pano.objects.empty()) {
    FineEncoding fine = model.fine_forward(tape, text, map);
    if (fine.object_logits.valid()) {
      const std::vector<double>& logits = tape.val(fine.object_logits).data;
      int best = 0;
      for (size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = static_cast<int>(i);
      traj.selected_object = best;
      traj.selected_object_class = env.node(traj.final_node).pano.objects[best].class_label;
    }
  }
  return traj;
}

MetricsReport compute_metrics(const std::vector<Trajectory>& trajectories,
                              const std::vector<const Episode*>& episodes,
                              const std::vector<const EnvGraph*>& envs) {
  if (trajectories.size() != episodes.size() || trajectories.size() != envs.size())
    throw DataError("compute_metrics: mismatched trajectory/episode lists");
  MetricsReport report;
  for (size_t i = 0; i < trajectories.size(); ++i) {
    const Trajectory& traj = trajectories[i];
    const Episode& ep = *episodes[i];
    const EnvGraph& env = *envs[i];
    EpisodeMetrics m;
    m.episode_id = ep.id;
    m.tl = traj.total_length;

    // Geodesic distance to the nearest goal, per goal Dijkstra.
    double ne = std::numeric_limits<double>::infinity();
    double l = std::numeric_limits<double>::infinity();
    bool oracle = false;
    for (int g : ep.goal_nodes) {
      const std::vector<double> d = shortest_distances(env, g);
      ne = std::min(ne, d[traj.final_node]);
      l = std::min(l, d[ep.start]);
      for (int node : traj.walk)
        if (d[node] < kSuccessRadius) oracle = true;
    }
    m.ne = ne;
    m.sr = ne < kSuccessRadius ? 1.0 : 0.0;
    m.osr = oracle ? 1.0 : 0.0;
    const double p = std::max(m.tl, l);
    // A zero-length optimum stopped on the spot counts as a perfect path.
    m.spl = m.sr * (p > 0 ? l / p : 1.0);
    const bool object_ok = ep.target_object.index >= 0 &&
                           traj.final_node == ep.target_object.node &&
                           traj.selected_object == ep.target_object.index;
    m.rgs = (m.sr > 0 && object_ok) ? 1.0 : 0.0;
    m.rgspl = m.rgs * (p > 0 ? l / p : 1.0);
    report.rows.push_back(m);
    report.tl += m.tl;
    report.ne += m.ne;
    report.sr += m.sr;
    report.osr += m.osr;
    report.spl += m.spl;
    report.rgs += m.rgs;
    report.rgspl += m.rgspl;
  }
  report.episodes = static_cast<int>(trajectories.size());
  if (report.episodes > 0) {
    const double n = report.episodes;
    report.tl /= n;
    report.ne /= n;
    report.sr /= n;
    report.osr /= n;
    report.spl /= n;
    report.rgs /= n;
    report.rgspl /= n;
  }
  return report;
}

EvalResult evaluate_split(const std::vector<HouseData>& houses, Split split,
                          const DuetModel& model, const EvalOptions& options) {
  EvalResult result;
  for (const HouseData& house : houses)
    for (const Episode& ep : house.episodes)
      if (ep.split == split) {
        result.episodes.push_back(&ep);
        result.envs.push_back(&house.env);
      }
  if (result.episodes.empty())
    throw DataError("evaluate_split: no episodes in split " + split_name(split));

  result.trajectories.resize(result.episodes.size());
  const int workers = std::max(1, options.workers);
  if (workers == 1) {
    for (size_t i = 0; i < result.episodes.size(); ++i)
      result.trajectories[i] =
          run_episode(*result.envs[i], *result.episodes[i], model, options.run);
  } else {
    std::atomic<size_t> cursor{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          const size_t i = cursor.fetch_add(1);
          if (i >= result.episodes.size()) return;
          result.trajectories[i] =
              run_episode(*result.envs[i], *result.episodes[i], model, options.run);
        }
      });
    }
    for (std::thread& th : pool) th.join();
  }
  result.report = compute_metrics(result.trajectories, result.episodes, result.envs);
  return result;
}

std::string metrics_to_csv(const MetricsReport& report) {
  std::string out = "TL,NE,SR,OSR,SPL,RGS,RGSPL\n";
  char buf[160];
  auto emit = [&](double tl, double ne, double sr, double osr, double spl, double rgs,
                  double rgspl) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", tl, ne, sr, osr, spl,
                  rgs, rgspl);
    out += buf;
  };
  for (const EpisodeMetrics& m : report.rows) emit(m.tl, m.ne, m.sr, m.osr, m.spl, m.rgs, m.rgspl);
  emit(report.tl, report.ne, report.sr, report.osr, report.spl, report.rgs, report.rgspl);
  return out;
}

}  // namespace duet
