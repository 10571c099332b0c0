#include "duet/trace.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include <json.hpp>

namespace duet {

using nlohmann::json;

std::string trajectory_to_trace_json(const EnvGraph& env, const Episode& episode,
                                     const Trajectory& trajectory) {
  json j;
  j["schema_version"] = 1;
  j["house_id"] = env.house_id;
  j["episode_id"] = episode.id;
  json nodes = json::array();
  for (const EnvNode& n : env.nodes)
    nodes.push_back({{"id", n.id}, {"x", n.pos.x}, {"y", n.pos.y}, {"z", n.pos.z}, {"room", n.room}});
  j["nodes"] = nodes;
  json edges = json::array();
  for (const auto& [a, b] : env.edges) edges.push_back({a, b});
  j["edges"] = edges;
  j["start"] = episode.start;
  j["goals"] = episode.goal_nodes;
  j["expert_path"] = episode.expert_path;
  j["instruction"] = episode.instruction;
  j["walk"] = trajectory.walk;
  j["final"] = trajectory.final_node;
  j["selected_object"] = trajectory.selected_object;
  j["total_length"] = trajectory.total_length;
  j["forced_stop"] = trajectory.forced_stop;
  json steps = json::array();
  for (const TrajectoryStep& s : trajectory.steps) {
    json js;
    js["node"] = s.decision_node;
    js["chosen"] = s.chosen_node;
    js["stop_prob"] = s.stop_prob;
    js["sigma"] = s.sigma;
    js["route"] = s.route;
    js["scores"] = s.fused;
    js["score_nodes"] = s.index_to_node;
    steps.push_back(std::move(js));
  }
  j["steps"] = steps;
  return j.dump(2);
}

namespace {

struct Proj {
  double px(double x, double z) const { return 30.0 + x * 20.0 + (z > 1.5 ? 450.0 : 0.0); }
  double py(double y) const { return 430.0 - y * 20.0; }
};

void polyline(std::string& svg, const json& trace, const std::vector<int>& path,
              const std::map<int, std::pair<double, double>>& pts, const char* color,
              double width) {
  if (path.size() < 2) return;
  svg += "<polyline fill=\"none\" stroke=\"";
  svg += color;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "\" stroke-width=\"%.1f\" points=\"", width);
  svg += buf;
  for (int id : path) {
    const auto& [x, y] = pts.at(id);
    std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", x, y);
    svg += buf;
  }
  svg += "\"/>\n";
  (void)trace;
}

}  // namespace

std::string trace_to_svg(const std::string& trace_json) {
  json trace = json::parse(trace_json);
  if (!trace.contains("nodes") || trace["nodes"].empty())
    throw DataError("trace: no nodes to plot");
  if (!trace.contains("walk") || trace["walk"].empty())
    throw DataError("trace: empty walk");

  Proj proj;
  std::map<int, std::pair<double, double>> pts;
  for (const json& n : trace["nodes"])
    pts[n["id"].get<int>()] = {proj.px(n["x"].get<double>(), n["z"].get<double>()),
                               proj.py(n["y"].get<double>())};

  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"920\" height=\"470\" "
      "viewBox=\"0 0 920 470\">\n<rect width=\"920\" height=\"470\" fill=\"white\"/>\n";
  char buf[256];

  for (const json& e : trace["edges"]) {
    const auto& [x1, y1] = pts.at(e[0].get<int>());
    const auto& [x2, y2] = pts.at(e[1].get<int>());
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#cccccc\" "
                  "stroke-width=\"1\"/>\n",
                  x1, y1, x2, y2);
    svg += buf;
  }
  polyline(svg, trace, trace["expert_path"].get<std::vector<int>>(), pts, "#2e8b57", 4.0);
  polyline(svg, trace, trace["walk"].get<std::vector<int>>(), pts, "#d9534f", 2.0);

  for (const json& n : trace["nodes"]) {
    const auto& [x, y] = pts.at(n["id"].get<int>());
    const int room = n["room"].get<int>();
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"5\" fill=\"hsl(%d,60%%,70%%)\" "
                  "stroke=\"#444444\"/>\n",
                  x, y, (room * 53) % 360);
    svg += buf;
  }
  const int start = trace["start"].get<int>();
  {
    const auto& [x, y] = pts.at(start);
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"14\" fill=\"#0066cc\" "
                  "font-weight=\"bold\">S</text>\n",
                  x + 6, y - 6);
    svg += buf;
  }
  for (const json& g : trace["goals"]) {
    const auto& [x, y] = pts.at(g.get<int>());
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"14\" fill=\"#2e8b57\" "
                  "font-weight=\"bold\">G</text>\n",
                  x + 6, y + 14);
    svg += buf;
  }
  const int final_node = trace["final"].get<int>();
  {
    const auto& [x, y] = pts.at(final_node);
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"8\" fill=\"none\" stroke=\"#d9534f\" "
                  "stroke-width=\"2\"/>\n",
                  x, y);
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace duet
