#include "duet/topomap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace duet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Extracts row r of a [n,d] var as a 1-D [d] var.
Var row_of(Tape& tape, Var mat, int r) { return tape.mean_rows(tape.slice_rows(mat, r, r + 1)); }

}  // namespace

int TopoMap::position_of(int node_id) const {
  for (size_t i = 0; i < order_.size(); ++i)
    if (order_[i] == node_id) return static_cast<int>(i);
  return -1;
}

const NodeRecord& TopoMap::record(int node_id) const {
  auto it = records_.find(node_id);
  if (it == records_.end()) throw DataError("map: unknown node " + std::to_string(node_id));
  return it->second;
}

const EncodedPanorama& TopoMap::fine_cache() const {
  if (fine_.node_id < 0) throw DataError("map: no observation recorded yet");
  return fine_;
}

void TopoMap::update(Tape& tape, int t, int node_id, const EncodedPanorama& pano) {
  if (pano.node_id != node_id) throw DataError("map update: panorama is for a different node");
  const Tensor& views = tape.val(pano.views);
  if (views.rank() != 2 || views.rows() < 1)
    throw ShapeError("map update: encoded views must be [n,d], got " + views.shape_str());
  const int d = views.cols();
  if (pano.objects.valid() && tape.val(pano.objects).cols() != d)
    throw ShapeError("map update: view/object dim mismatch");
  if (!order_.empty()) {
    if (!contains(node_id)) throw DataError("map update: node not reachable from the map");
    const auto key = std::minmax(current_, node_id);
    if (node_id != current_ && !edge_set_.count({key.first, key.second}))
      throw DataError("map update: node " + std::to_string(node_id) +
                      " is not adjacent to the current node");
  } else {
    start_ = node_id;
  }

  // Demote the previous current node.
  if (current_ >= 0 && current_ != node_id) records_.at(current_).status = NodeStatus::kVisited;

  // Current node: pooled representation is the mean over all encoded view
  // and object tokens.
  Var pooled;
  if (pano.objects.valid())
    pooled = tape.mean_rows(tape.concat_rows({pano.views, pano.objects}));
  else
    pooled = tape.mean_rows(pano.views);

  auto [it, inserted] = records_.try_emplace(node_id);
  if (inserted) order_.push_back(node_id);
  NodeRecord& rec = it->second;
  rec.status = NodeStatus::kCurrent;
  rec.rep = pooled;
  rec.rep_value = tape.val(pooled);
  rec.last_visit_step = t;
  rec.coords = pano.coords;

  // Neighbors: insert edges, accumulate partial views for unvisited nodes.
  for (const auto& [nb, view_row] : pano.navigable_views) {
    if (view_row < 0 || view_row >= views.rows())
      throw DataError("map update: navigable view index out of range");
    auto cit = pano.neighbor_coords.find(nb);
    if (cit == pano.neighbor_coords.end())
      throw DataError("map update: missing coordinates for neighbor " + std::to_string(nb));
    const auto key = std::minmax(node_id, nb);
    if (!edge_set_.count({key.first, key.second})) {
      const double len = euclidean(pano.coords, cit->second);
      edge_set_[{key.first, key.second}] = len;
      edges_.push_back({key.first, key.second, len});
      metric_fresh_ = hop_fresh_ = false;
    }
    auto [nit, nb_inserted] = records_.try_emplace(nb);
    if (nb_inserted) order_.push_back(nb);
    NodeRecord& nrec = nit->second;
    if (nb_inserted) {
      nrec.status = NodeStatus::kNavigable;
      nrec.coords = cit->second;
      nrec.partial_sum = row_of(tape, pano.views, view_row);
      nrec.partial_count = 1;
      nrec.rep = nrec.partial_sum;
      nrec.rep_value = tape.val(nrec.rep);
    } else if (nrec.status == NodeStatus::kNavigable) {
      nrec.partial_sum = tape.add(nrec.partial_sum, row_of(tape, pano.views, view_row));
      nrec.partial_count += 1;
      nrec.rep = tape.scale(nrec.partial_sum, 1.0 / nrec.partial_count);
      nrec.rep_value = tape.val(nrec.rep);
    }
  }

  current_ = node_id;
  step_ = t;
  fine_ = pano;
}

const TopoMap::Routing& TopoMap::floyd_all_pairs(bool hops) const {
  if (order_.empty()) throw DataError("map: floyd on empty map");
  Routing& r = hops ? hop_ : metric_;
  bool& fresh = hops ? hop_fresh_ : metric_fresh_;
  if (fresh) return r;
  const int k = static_cast<int>(order_.size());
  r.k = k;
  r.dist.assign(static_cast<size_t>(k) * k, kInf);
  r.next.assign(static_cast<size_t>(k) * k, -1);
  std::map<int, int> pos;
  for (int i = 0; i < k; ++i) {
    pos[order_[i]] = i;
    r.dist[static_cast<size_t>(i) * k + i] = 0.0;
    r.next[static_cast<size_t>(i) * k + i] = i;
  }
  for (const Edge& e : edges_) {
    const int a = pos.at(e.a), b = pos.at(e.b);
    const double w = hops ? 1.0 : e.length;
    if (w < r.dist[static_cast<size_t>(a) * k + b]) {
      r.dist[static_cast<size_t>(a) * k + b] = w;
      r.dist[static_cast<size_t>(b) * k + a] = w;
      r.next[static_cast<size_t>(a) * k + b] = b;
      r.next[static_cast<size_t>(b) * k + a] = a;
    }
  }
  // Pivot in ascending node id order, strict improvement: equal-length
  // alternatives keep the route through the smaller intermediate node.
  std::vector<int> pivots(order_.begin(), order_.end());
  std::sort(pivots.begin(), pivots.end());
  for (int pid : pivots) {
    const int p = pos.at(pid);
    for (int i = 0; i < k; ++i) {
      const double dip = r.dist[static_cast<size_t>(i) * k + p];
      if (!std::isfinite(dip)) continue;
      for (int j = 0; j < k; ++j) {
        const double cand = dip + r.dist[static_cast<size_t>(p) * k + j];
        if (cand < r.dist[static_cast<size_t>(i) * k + j]) {
          r.dist[static_cast<size_t>(i) * k + j] = cand;
          r.next[static_cast<size_t>(i) * k + j] = r.next[static_cast<size_t>(i) * k + p];
        }
      }
    }
  }
  fresh = true;
  return r;
}

Tensor TopoMap::distance_matrix(bool hops, double dmax) const {
  const Routing& r = floyd_all_pairs(hops);
  const int k = r.k;
  Tensor e = Tensor::zeros({k + 1, k + 1});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double d = r.at(i, j);
      e.at(i + 1, j + 1) = std::isfinite(d) ? std::min(d, dmax) : dmax;
    }
  return e;  // stop row/column stay zero
}

std::vector<int> TopoMap::plan_route(int from, int to) const {
  const int pf = position_of(from), pt = position_of(to);
  if (pf < 0 || pt < 0) throw DataError("plan_route: node not in map");
  if (from == to) return {from};
  const Routing& r = floyd_all_pairs(false);
  if (!std::isfinite(r.at(pf, pt))) throw DataError("plan_route: no route");
  std::vector<int> route{from};
  int cur = pf;
  while (cur != pt) {
    cur = r.next[static_cast<size_t>(cur) * r.k + pt];
    route.push_back(order_[cur]);
  }
  return route;
}

}  // namespace duet
