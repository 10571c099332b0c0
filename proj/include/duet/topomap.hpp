#pragma once

#include <map>
#include <string>
#include <vector>

#include "duet/envsim.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Panorama after the panorama encoder, plus the observation metadata the
// map needs. Vars live on the tape the episode runs on.
struct EncodedPanorama {
  int node_id = -1;
  Vec3 coords;
  Var views;    // [n, d]
  Var objects;  // [m, d]; invalid when m == 0
  std::vector<double> view_headings;
  std::vector<double> view_elevations;
  std::map<int, int> navigable_views;   // neighbor node id -> view row
  std::map<int, Vec3> neighbor_coords;  // neighbor node id -> position
};

enum class NodeStatus { kNavigable, kVisited, kCurrent };

struct NodeRecord {
  NodeStatus status = NodeStatus::kNavigable;
  Var rep;                 // pooled representation v_i (1-D, [d])
  Tensor rep_value;        // plain mirror of rep for snapshots and oracles
  Var partial_sum;         // accumulator for navigable nodes
  int partial_count = 0;
  int last_visit_step = 0; // 0 = never visited
  Vec3 coords;
};

// The agent's online topological map for one episode. Node representations
// are tape variables, so the map is valid for the lifetime of the tape the
// episode runs on.
class TopoMap {
 public:
  struct Edge {
    int a, b;
    double length;
  };

  // Shortest-path products over the map's nodes, indexed by insertion
  // position. Disconnected pairs hold +infinity.
  struct Routing {
    int k = 0;
    std::vector<double> dist;
    std::vector<int> next;  // next position on a shortest path, -1 if none
    double at(int i, int j) const { return dist[static_cast<size_t>(i) * k + j]; }
  };

  bool empty() const { return order_.empty(); }
  int size() const { return static_cast<int>(order_.size()); }
  int current() const { return current_; }
  int start_node() const { return start_; }
  int step() const { return step_; }
  const std::vector<int>& order() const { return order_; }
  int position_of(int node_id) const;  // index in order(), -1 if absent
  bool contains(int node_id) const { return records_.count(node_id) > 0; }
  const NodeRecord& record(int node_id) const;
  const std::vector<Edge>& edges() const { return edges_; }
  const EncodedPanorama& fine_cache() const;

  // Inserts/updates the current node and its neighbors from a new
  // observation. t is the navigation step counter.
  void update(Tape& tape, int t, int node_id, const EncodedPanorama& pano);

  // All-pairs shortest paths over map edges (Floyd); cached until the edge
  // set changes. Metric lengths, or unit weights when hops is true.
  const Routing& floyd_all_pairs(bool hops = false) const;

  // (K+1)x(K+1) pairwise distances for the attention bias: position 0 is
  // the stop node (distance 0 to everything), positions 1..K follow
  // insertion order. Unreachable pairs are capped at dmax.
  Tensor distance_matrix(bool hops, double dmax) const;

  // Node sequence from `from` to `to` along map edges; throws DataError
  // "no route" if unreachable.
  std::vector<int> plan_route(int from, int to) const;

 private:
  std::vector<int> order_;
  std::map<int, NodeRecord> records_;
  std::vector<Edge> edges_;
  std::map<std::pair<int, int>, double> edge_set_;
  int current_ = -1;
  int start_ = -1;
  int step_ = 0;
  EncodedPanorama fine_;
  mutable Routing metric_;
  mutable Routing hop_;
  mutable bool metric_fresh_ = false;
  mutable bool hop_fresh_ = false;
};

}  // namespace duet
