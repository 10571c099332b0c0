#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "duet/envsim.hpp"
#include "duet/topomap.hpp"
#include "oracles.hpp"

using namespace duet;

namespace {

constexpr int kDim = 6;

// Deterministic fake "encoded panorama" for pure map tests: one token per
// view with values derived from (node, view).
EncodedPanorama fake_pano(Tape& tape, const EnvGraph& env, int node_id) {
  const EnvNode& node = env.node(node_id);
  const int n = static_cast<int>(node.pano.view_features.size());
  const int m = static_cast<int>(node.pano.objects.size());
  Tensor views = Tensor::zeros({n, kDim});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < kDim; ++j) views.at(i, j) = std::sin(0.7 * node_id + 1.3 * i + 0.1 * j);
  EncodedPanorama pano;
  pano.node_id = node_id;
  pano.coords = node.pos;
  pano.views = tape.leaf(views, false);
  if (m > 0) {
    Tensor objs = Tensor::zeros({m, kDim});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < kDim; ++j) objs.at(i, j) = std::cos(0.9 * node_id + 0.5 * i + 0.2 * j);
    pano.objects = tape.leaf(objs, false);
  }
  pano.view_headings = node.pano.view_headings;
  pano.view_elevations = node.pano.view_elevations;
  pano.navigable_views = node.pano.navigable_views;
  for (const auto& [nb, view] : node.pano.navigable_views)
    pano.neighbor_coords[nb] = env.node(nb).pos;
  return pano;
}

EnvConfig map_env_config(int nodes) {
  EnvConfig c;
  c.node_count = nodes;
  c.mean_degree = 3.0;
  c.n_views = 8;
  c.m_objects = 2;
  c.room_count = 4;
  c.object_class_count = 20;
  c.feature_dim = 8;
  return c;
}

}  // namespace

TEST_CASE("update_map basics") {
  const EnvGraph env = generate_environment(31, map_env_config(15));
  Tape tape;
  TopoMap map;
  const int start = 0;
  map.update(tape, 1, start, fake_pano(tape, env, start));

  SUBCASE("first update creates current plus navigable neighbors") {
    const int degree = static_cast<int>(env.adjacency[start].size());
    CHECK(map.size() == 1 + degree);
    CHECK(map.current() == start);
    CHECK(map.record(start).status == NodeStatus::kCurrent);
    CHECK(map.record(start).last_visit_step == 1);
    int navigable = 0, edges = 0;
    for (int node : map.order())
      if (map.record(node).status == NodeStatus::kNavigable) {
        ++navigable;
        CHECK(map.record(node).last_visit_step == 0);
        CHECK(map.record(node).partial_count == 1);
      }
    edges = static_cast<int>(map.edges().size());
    CHECK(navigable == degree);
    CHECK(edges == degree);
  }

  SUBCASE("moving to a neighbor promotes it and demotes the old current") {
    const int nb = env.adjacency[start][0];
    map.update(tape, 2, nb, fake_pano(tape, env, nb));
    CHECK(map.current() == nb);
    CHECK(map.record(nb).status == NodeStatus::kCurrent);
    CHECK(map.record(nb).last_visit_step == 2);
    CHECK(map.record(start).status == NodeStatus::kVisited);
    // Edge (start, nb) present.
    bool found = false;
    for (const auto& e : map.edges())
      if ((e.a == start && e.b == nb) || (e.a == nb && e.b == start)) found = true;
    CHECK(found);
    // nb's unvisited neighbors appear.
    for (int nb2 : env.adjacency[nb]) CHECK(map.contains(nb2));
  }

  SUBCASE("pooled representation is the token mean") {
    const NodeRecord& rec = map.record(start);
    const EnvNode& node = env.node(start);
    const int n = static_cast<int>(node.pano.view_features.size());
    const int m = static_cast<int>(node.pano.objects.size());
    for (int j = 0; j < kDim; ++j) {
      double want = 0;
      for (int i = 0; i < n; ++i) want += std::sin(0.7 * start + 1.3 * i + 0.1 * j);
      for (int i = 0; i < m; ++i) want += std::cos(0.9 * start + 0.5 * i + 0.2 * j);
      want /= (n + m);
      CHECK(rec.rep_value.data[j] == doctest::Approx(want).epsilon(1e-12));
    }
  }

  SUBCASE("update for a non-adjacent node throws") {
    int far = -1;
    for (int cand = 0; cand < 15; ++cand)
      if (cand != start && !map.contains(cand)) far = cand;
    if (far >= 0) CHECK_THROWS_AS(map.update(tape, 2, far, fake_pano(tape, env, far)), DataError);
  }

  SUBCASE("panorama for the wrong node throws") {
    const int nb = env.adjacency[start][0];
    CHECK_THROWS_AS(map.update(tape, 2, nb, fake_pano(tape, env, start)), DataError);
  }
}

TEST_CASE("navigable accumulation averages partial views") {
  // Walk a path where some navigable node is observed from two visited
  // nodes; its representation must be the running mean.
  const EnvGraph env = generate_environment(77, map_env_config(18));
  // Find (a, b, c) with edges a-b, a-c, b-c: c observed from both a and b.
  int a = -1, b = -1, c = -1;
  for (const auto& [x, y] : env.edges) {
    for (int z : env.adjacency[x])
      if (z != y && env.has_edge(y, z)) {
        a = x;
        b = y;
        c = z;
        break;
      }
    if (a >= 0) break;
  }
  REQUIRE(a >= 0);
  Tape tape;
  TopoMap map;
  map.update(tape, 1, a, fake_pano(tape, env, a));
  map.update(tape, 2, b, fake_pano(tape, env, b));
  const NodeRecord& rec = map.record(c);
  CHECK(rec.status == NodeStatus::kNavigable);
  CHECK(rec.partial_count == 2);
  const int va = env.node(a).pano.navigable_views.at(c);
  const int vb = env.node(b).pano.navigable_views.at(c);
  for (int j = 0; j < kDim; ++j) {
    const double pa = std::sin(0.7 * a + 1.3 * va + 0.1 * j);
    const double pb = std::sin(0.7 * b + 1.3 * vb + 0.1 * j);
    CHECK(rec.rep_value.data[j] == doctest::Approx(0.5 * (pa + pb)).epsilon(1e-12));
  }
}

TEST_CASE("map consistency oracle over random rollouts") {
  // After random walks, stored representations must match brute-force
  // recomputation from the full observation history, and map node/edge
  // sets must be subsets of the environment's.
  Rng rng(5);
  for (int rollout = 0; rollout < 40; ++rollout) {
    const EnvGraph env = generate_environment(1000 + rollout, map_env_config(14));
    Tape tape;
    TopoMap map;
    int current = rng.uniform_int(14);
    int t = 0;
    // Observation history: node -> list of (source node, view row) partials,
    // plus the last full observation per visited node.
    std::map<int, std::vector<std::pair<int, int>>> partial_history;
    std::set<int> visited;
    for (int step = 0; step < 12; ++step) {
      ++t;
      map.update(tape, t, current, fake_pano(tape, env, current));
      visited.insert(current);
      for (const auto& [nb, view] : env.node(current).pano.navigable_views)
        if (!visited.count(nb)) partial_history[nb].push_back({current, view});
      const auto& adj = env.adjacency[current];
      current = adj[rng.uniform_int(static_cast<int>(adj.size()))];
    }
    for (int node : map.order()) {
      const NodeRecord& rec = map.record(node);
      CHECK(rec.coords.x == env.node(node).pos.x);
      if (rec.status == NodeStatus::kNavigable) {
        const auto& hist = partial_history.at(node);
        CHECK(rec.partial_count == static_cast<int>(hist.size()));
        for (int j = 0; j < kDim; ++j) {
          double mean = 0;
          for (const auto& [src, view] : hist) mean += std::sin(0.7 * src + 1.3 * view + 0.1 * j);
          mean /= hist.size();
          CHECK(std::abs(rec.rep_value.data[j] - mean) < 1e-6);
        }
      } else {
        const EnvNode& n = env.node(node);
        const int nv = static_cast<int>(n.pano.view_features.size());
        const int m = static_cast<int>(n.pano.objects.size());
        for (int j = 0; j < kDim; ++j) {
          double mean = 0;
          for (int i = 0; i < nv; ++i) mean += std::sin(0.7 * node + 1.3 * i + 0.1 * j);
          for (int i = 0; i < m; ++i) mean += std::cos(0.9 * node + 0.5 * i + 0.2 * j);
          mean /= (nv + m);
          CHECK(std::abs(rec.rep_value.data[j] - mean) < 1e-6);
        }
      }
    }
    // Subset checks.
    for (int node : map.order()) CHECK(node < static_cast<int>(env.nodes.size()));
    for (const auto& e : map.edges()) CHECK(env.has_edge(e.a, e.b));
    // last_visit_step is the latest step the node was current.
    CHECK(map.record(map.current()).status == NodeStatus::kCurrent);
    int currents = 0;
    for (int node : map.order())
      if (map.record(node).status == NodeStatus::kCurrent) ++currents;
    CHECK(currents == 1);
  }
}

TEST_CASE("floyd matches dijkstra on 200 random connected graphs") {
  Rng rng(99);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 2 + rng.uniform_int(29);
    EnvConfig cfg = map_env_config(n);
    cfg.mean_degree = std::min(3.5, n - 1.0);
    const EnvGraph env = generate_environment(2000 + rep, cfg);

    // Drive the full env into a map via a traversal that visits every node.
    Tape tape;
    TopoMap map;
    std::set<int> visited;
    int current = 0;
    int t = 0;
    std::vector<int> stack{0};
    // Depth-first walk along edges so update preconditions hold.
    std::vector<int> walk;
    {
      std::set<int> seen{0};
      std::function<void(int)> dfs = [&](int u) {
        walk.push_back(u);
        for (int v : env.adjacency[u])
          if (!seen.count(v)) {
            seen.insert(v);
            dfs(v);
            walk.push_back(u);
          }
      };
      dfs(0);
    }
    for (int node : walk) {
      if (!map.empty() && node == map.current()) continue;
      ++t;
      map.update(tape, t, node, fake_pano(tape, env, node));
    }
    REQUIRE(map.size() == n);

    const TopoMap::Routing& routing = map.floyd_all_pairs(false);
    const auto g = oracles::from_env(env);
    for (int i = 0; i < n; ++i) {
      const int src = map.order()[i];
      const auto dist = oracles::dijkstra(g, src);
      for (int j = 0; j < n; ++j) {
        const int dst = map.order()[j];
        CHECK(std::abs(routing.at(i, j) - dist[dst]) < 1e-9);
      }
    }

    // plan_route reconstructions have oracle length and walk real edges.
    for (int rep2 = 0; rep2 < 5; ++rep2) {
      const int from = map.order()[rng.uniform_int(n)];
      const int to = map.order()[rng.uniform_int(n)];
      const std::vector<int> route = map.plan_route(from, to);
      REQUIRE(!route.empty());
      CHECK(route.front() == from);
      CHECK(route.back() == to);
      double len = 0;
      for (size_t i = 0; i + 1 < route.size(); ++i) {
        CHECK(env.has_edge(route[i], route[i + 1]));
        len += env.edge_length(route[i], route[i + 1]);
      }
      const auto dist = oracles::dijkstra(g, from);
      CHECK(std::abs(len - dist[to]) < 1e-9);
    }
  }
}

TEST_CASE("floyd hand cases") {
  // Triangle with a long direct edge: the two-hop route wins.
  EnvGraph tri;
  tri.config = map_env_config(3);
  tri.nodes.resize(3);
  tri.nodes[0] = {0, {0, 0, 0}, 0, {}};
  tri.nodes[1] = {1, {1, 0, 0}, 0, {}};
  tri.nodes[2] = {2, {1, 1, 0}, 0, {}};
  // Build panoramas by hand: views exist but content does not matter.
  for (int i = 0; i < 3; ++i) {
    tri.nodes[i].pano.view_headings = {0.0};
    tri.nodes[i].pano.view_elevations = {0.0};
    tri.nodes[i].pano.view_features = {std::vector<double>(8, 0.0)};
    tri.nodes[i].pano.view_rooms = {0};
  }
  tri.edges = {{0, 1}, {0, 2}, {1, 2}};
  tri.adjacency = {{1, 2}, {0, 2}, {0, 1}};
  tri.nodes[0].pano.navigable_views = {{1, 0}, {2, 0}};
  tri.nodes[1].pano.navigable_views = {{0, 0}, {2, 0}};
  tri.nodes[2].pano.navigable_views = {{0, 0}, {1, 0}};

  Tape tape;
  TopoMap map;
  map.update(tape, 1, 0, fake_pano(tape, tri, 0));
  map.update(tape, 2, 1, fake_pano(tape, tri, 1));
  map.update(tape, 3, 2, fake_pano(tape, tri, 2));

  const TopoMap::Routing& r = map.floyd_all_pairs(false);
  // AB = 1, BC = 1, AC = sqrt(2): direct edge is shorter than the detour.
  const int pa = map.position_of(0), pc = map.position_of(2);
  CHECK(r.at(pa, pc) == doctest::Approx(std::sqrt(2.0)));
  // Hop metric: every pair is one hop apart.
  const TopoMap::Routing& h = map.floyd_all_pairs(true);
  CHECK(h.at(pa, pc) == doctest::Approx(1.0));
  SUBCASE("plan_route trivial cases") {
    CHECK(map.plan_route(0, 0) == std::vector<int>{0});
    CHECK(map.plan_route(0, 1) == std::vector<int>{0, 1});
  }
}

TEST_CASE("distance matrix includes the stop node") {
  const EnvGraph env = generate_environment(8, map_env_config(10));
  Tape tape;
  TopoMap map;
  map.update(tape, 1, 0, fake_pano(tape, env, 0));

  SUBCASE("stop row and column are zero") {
    const Tensor e = map.distance_matrix(false, 50.0);
    const int side = map.size() + 1;
    REQUIRE(e.rows() == side);
    REQUIRE(e.cols() == side);
    for (int i = 0; i < side; ++i) {
      CHECK(e.at(0, i) == 0.0);
      CHECK(e.at(i, 0) == 0.0);
    }
  }
  SUBCASE("symmetric, zero diagonal, triangle inequality") {
    // grow the map a bit
    int t = 1;
    int cur = 0;
    Rng rng(3);
    for (int step = 0; step < 6; ++step) {
      const auto& adj = env.adjacency[cur];
      cur = adj[rng.uniform_int(static_cast<int>(adj.size()))];
      map.update(tape, ++t, cur, fake_pano(tape, env, cur));
    }
    const Tensor e = map.distance_matrix(false, 50.0);
    const int side = map.size() + 1;
    for (int i = 0; i < side; ++i) {
      CHECK(e.at(i, i) == 0.0);
      for (int j = 0; j < side; ++j) CHECK(e.at(i, j) == doctest::Approx(e.at(j, i)));
    }
    // Triangle inequality over the real nodes (the stop row is zero by
    // construction and exempt).
    for (int i = 1; i < side; ++i)
      for (int j = 1; j < side; ++j)
        for (int k = 1; k < side; ++k)
          CHECK(e.at(i, j) <= e.at(i, k) + e.at(k, j) + 1e-9);
  }
  SUBCASE("single node map gives a 2x2 zero matrix") {
    EnvConfig cfg = map_env_config(1);
    cfg.node_count = 1;
    cfg.mean_degree = 0;
    const EnvGraph tiny = generate_environment(5, cfg);
    Tape tape2;
    TopoMap m2;
    m2.update(tape2, 1, 0, fake_pano(tape2, tiny, 0));
    const Tensor e = m2.distance_matrix(false, 50.0);
    REQUIRE(e.rows() == 2);
    for (double v : e.data) CHECK(v == 0.0);
  }
  SUBCASE("unreachable target in plan_route throws") {
    CHECK_THROWS_WITH_AS(map.plan_route(0, 999), doctest::Contains("not in map"), DataError);
  }
}

TEST_CASE("path graph distances add up") {
  // a-b-c with lengths 1 and 2: dist(a,c) = 3.
  EnvGraph path;
  path.config = map_env_config(3);
  path.nodes.resize(3);
  path.nodes[0] = {0, {0, 0, 0}, 0, {}};
  path.nodes[1] = {1, {1, 0, 0}, 0, {}};
  path.nodes[2] = {2, {3, 0, 0}, 0, {}};
  for (int i = 0; i < 3; ++i) {
    path.nodes[i].pano.view_headings = {0.0};
    path.nodes[i].pano.view_elevations = {0.0};
    path.nodes[i].pano.view_features = {std::vector<double>(8, 0.0)};
    path.nodes[i].pano.view_rooms = {0};
  }
  path.edges = {{0, 1}, {1, 2}};
  path.adjacency = {{1}, {0, 2}, {1}};
  path.nodes[0].pano.navigable_views = {{1, 0}};
  path.nodes[1].pano.navigable_views = {{0, 0}, {2, 0}};
  path.nodes[2].pano.navigable_views = {{1, 0}};

  Tape tape;
  TopoMap map;
  map.update(tape, 1, 0, fake_pano(tape, path, 0));
  map.update(tape, 2, 1, fake_pano(tape, path, 1));
  map.update(tape, 3, 2, fake_pano(tape, path, 2));
  const Tensor e = map.distance_matrix(false, 50.0);
  const int pa = map.position_of(0) + 1, pc = map.position_of(2) + 1;
  CHECK(e.at(pa, pc) == doctest::Approx(3.0));
}
