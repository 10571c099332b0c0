#include "duet/envsim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <set>

#include <json.hpp>

namespace duet {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kSchemaVersion = 1;
constexpr double kFloorHeight = 3.0;
constexpr double kBoxSide = 20.0;
constexpr double kRoomSignalScale = 0.5;
constexpr double kOrientSignalScale = 0.5;

double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a < 0) a += 2.0 * kPi;
  return a;
}

std::vector<double> unit_vector_from_hash(uint64_t h, int dim) {
  Rng rng(h);
  std::vector<double> v(dim);
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) {
    v.assign(dim, 0.0);
    v[0] = 1.0;
    return v;
  }
  for (double& x : v) x /= norm;
  return v;
}

std::vector<double> room_signature(int room, int dim) {
  return unit_vector_from_hash(Rng::key_hash("room-signature", static_cast<uint64_t>(room)), dim);
}

std::vector<double> class_signature(int cls, int dim) {
  return unit_vector_from_hash(Rng::key_hash("object-signature", static_cast<uint64_t>(cls)), dim);
}

std::vector<double> orientation_feature(double heading, double elevation, int dim) {
  std::vector<double> v(dim, 0.0);
  v[0] = std::sin(heading);
  v[1] = std::cos(heading);
  v[2] = std::sin(elevation);
  v[3] = std::cos(elevation);
  return v;
}

std::vector<double> make_feature(uint64_t env_seed, int node, int slot, double heading,
                                 double elevation, const std::vector<double>& signature, int dim) {
  uint64_t h = Rng::key_hash("feature-noise", env_seed, Rng::mix(static_cast<uint64_t>(node),
                                                                 static_cast<uint64_t>(slot)));
  std::vector<double> f = unit_vector_from_hash(h, dim);
  const std::vector<double> ori = orientation_feature(heading, elevation, dim);
  for (int i = 0; i < dim; ++i) f[i] += kRoomSignalScale * signature[i] + kOrientSignalScale * ori[i];
  return f;
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[a] = b;
    return true;
  }
};

// Spatial k-means for room labels: rooms are coherent regions, so the room
// mentioned in an instruction corresponds to a cluster of nearby nodes.
std::vector<int> assign_rooms(const std::vector<Vec3>& pos, int k, Rng rng) {
  const int n = static_cast<int>(pos.size());
  k = std::min(k, n);
  std::vector<Vec3> centers;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
  for (int i = 0; i < k; ++i) centers.push_back(pos[order[i]]);
  std::vector<int> label(n, 0);
  for (int iter = 0; iter < 12; ++iter) {
    for (int i = 0; i < n; ++i) {
      double best = 0;
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        const double d = euclidean(pos[i], centers[c]);
        if (c == 0 || d < best) {
          best = d;
          arg = c;
        }
      }
      label[i] = arg;
    }
    std::vector<Vec3> sums(k);
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums[label[i]].x += pos[i].x;
      sums[label[i]].y += pos[i].y;
      sums[label[i]].z += pos[i].z;
      counts[label[i]]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      centers[c] = {sums[c].x / counts[c], sums[c].y / counts[c], sums[c].z / counts[c]};
    }
  }
  return label;
}

int heading_bin(double heading, int n_views) {
  const double width = 2.0 * kPi / n_views;
  return static_cast<int>(std::lround(wrap_angle(heading) / width)) % n_views;
}

}  // namespace

double euclidean(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double heading_of(const Vec3& from, const Vec3& to) {
  return wrap_angle(std::atan2(to.y - from.y, to.x - from.x));
}

double elevation_of(const Vec3& from, const Vec3& to) {
  const double dx = to.x - from.x, dy = to.y - from.y;
  const double horiz = std::sqrt(dx * dx + dy * dy);
  return std::atan2(to.z - from.z, horiz);
}

double EnvGraph::edge_length(int a, int b) const { return euclidean(node(a).pos, node(b).pos); }

bool EnvGraph::has_edge(int a, int b) const {
  const auto& adj = adjacency[a];
  return std::binary_search(adj.begin(), adj.end(), b);
}

const EnvNode& EnvGraph::node(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes.size()))
    throw DataError("unknown node id " + std::to_string(id));
  return nodes[id];
}

int Vocabulary::room_token(int room) const {
  if (room < 0 || room >= room_count) throw DataError("room label out of range");
  return kFirstRoom + room;
}

int Vocabulary::object_token(int cls) const {
  if (cls < 0 || cls >= object_class_count) throw DataError("object class out of range");
  return kFirstRoom + room_count + cls;
}

std::string Vocabulary::token_name(int id) const {
  switch (id) {
    case kPad: return "[PAD]";
    case kMaskTok: return "[MASK]";
    case kEos: return "[EOS]";
    case kGo: return "GO";
    case kFind: return "FIND";
    case kForward: return "FORWARD";
    case kLeft: return "LEFT";
    case kRight: return "RIGHT";
    case kBack: return "BACK";
    default: break;
  }
  if (id >= kFirstRoom && id < kFirstRoom + room_count)
    return "ROOM_" + std::to_string(id - kFirstRoom);
  if (id >= kFirstRoom + room_count && id < size())
    return "OBJ_" + std::to_string(id - kFirstRoom - room_count);
  throw DataError("token id out of vocabulary: " + std::to_string(id));
}

std::pair<int, int> Vocabulary::parse(const std::vector<int>& tokens) const {
  int room = -1, cls = -1;
  for (int t : tokens) {
    if (t >= kFirstRoom && t < kFirstRoom + room_count) room = t - kFirstRoom;
    if (t >= kFirstRoom + room_count && t < size()) cls = t - kFirstRoom - room_count;
  }
  return {room, cls};
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kSeen: return "seen";
    case Split::kUnseen: return "unseen";
  }
  return "train";
}

EnvGraph generate_environment(uint64_t seed, const EnvConfig& config) {
  if (config.node_count < 1) throw DataError("generate_environment: node_count must be >= 1");
  if (config.node_count > 1 && config.mean_degree >= config.node_count)
    throw DataError("generate_environment: mean_degree >= node_count is infeasible");
  if (config.n_views < 1) throw DataError("generate_environment: n_views must be >= 1");
  if (config.feature_dim < 4) throw DataError("generate_environment: feature_dim must be >= 4");
  if (config.room_count < 1 || config.object_class_count < 1)
    throw DataError("generate_environment: room/object class counts must be >= 1");

  EnvGraph env;
  env.seed = seed;
  env.config = config;
  const int n = config.node_count;
  Rng root(seed);

  // Random geometric layout in a 20 m x 20 m x 2-floor box.
  Rng coord_rng = root.fork("coords");
  std::vector<Vec3> pos(n);
  for (int i = 0; i < n; ++i) {
    const int floor = n > 1 ? coord_rng.uniform_int(2) : 0;
    pos[i] = {coord_rng.uniform(0.5, kBoxSide - 0.5), coord_rng.uniform(0.5, kBoxSide - 0.5),
              kFloorHeight * floor};
  }

  // Shortest candidate pairs first; a union-find pass guarantees a spanning
  // tree, then the remaining shortest pairs fill in up to the target count.
  struct Cand {
    double d;
    int a, b;
  };
  std::vector<Cand> cands;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) cands.push_back({euclidean(pos[a], pos[b]), a, b});
  std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
    if (x.d != y.d) return x.d < y.d;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });
  const int target_edges =
      std::max(n - 1, static_cast<int>(std::lround(n * config.mean_degree / 2.0)));
  std::set<std::pair<int, int>> chosen;
  UnionFind uf(n);
  for (const Cand& c : cands)
    if (uf.unite(c.a, c.b)) chosen.insert({c.a, c.b});
  for (const Cand& c : cands) {
    if (static_cast<int>(chosen.size()) >= target_edges) break;
    chosen.insert({c.a, c.b});
  }

  env.adjacency.assign(n, {});
  for (const auto& [a, b] : chosen) {
    env.edges.emplace_back(a, b);
    env.adjacency[a].push_back(b);
    env.adjacency[b].push_back(a);
  }
  for (auto& adj : env.adjacency) std::sort(adj.begin(), adj.end());

  const std::vector<int> rooms = assign_rooms(pos, config.room_count, root.fork("rooms"));

  // Object class assignment keeps (room, class) pairs unique within the
  // house so a goal-oriented instruction identifies one location.
  Rng obj_rng = root.fork("objects");
  std::vector<std::set<int>> used_in_room(config.room_count);

  env.nodes.resize(n);
  for (int i = 0; i < n; ++i) {
    EnvNode& node = env.nodes[i];
    node.id = i;
    node.pos = pos[i];
    node.room = rooms[i];
    Panorama& pano = node.pano;
    const int nv = config.n_views;
    pano.view_headings.resize(nv);
    pano.view_elevations.assign(nv, 0.0);
    for (int k = 0; k < nv; ++k) pano.view_headings[k] = wrap_angle(2.0 * kPi * k / nv);

    // Unique view per neighbor when capacity allows; nearest free bin wins.
    std::vector<bool> taken(nv, false);
    for (int nb : env.adjacency[i]) {
      const int pref = heading_bin(heading_of(pos[i], pos[nb]), nv);
      int slot = pref;
      for (int probe = 0; probe < nv; ++probe) {
        const int cand = (pref + (probe % 2 == 0 ? probe / 2 : nv - (probe + 1) / 2)) % nv;
        if (!taken[cand]) {
          slot = cand;
          break;
        }
      }
      taken[slot] = true;
      pano.navigable_views[nb] = slot;
    }

    // View features: a navigable view looks into the neighbor's room, the
    // rest show this node's own room.
    pano.view_rooms.assign(nv, node.room);
    for (const auto& [nb, slot] : pano.navigable_views) pano.view_rooms[slot] = rooms[nb];
    pano.view_features.resize(nv);
    for (int k = 0; k < nv; ++k)
      pano.view_features[k] =
          make_feature(seed, i, k, pano.view_headings[k], pano.view_elevations[k],
                       room_signature(pano.view_rooms[k], config.feature_dim), config.feature_dim);

    for (int j = 0; j < config.m_objects; ++j) {
      SimObject obj;
      std::vector<int> eligible;
      for (int c = 0; c < config.object_class_count; ++c)
        if (!used_in_room[node.room].count(c)) eligible.push_back(c);
      // A crowded room can exhaust its class pool; stop adding objects
      // there rather than break pair uniqueness.
      if (eligible.empty()) break;
      obj.class_label = eligible[obj_rng.uniform_int(static_cast<int>(eligible.size()))];
      used_in_room[node.room].insert(obj.class_label);
      obj.heading = obj_rng.uniform(0.0, 2.0 * kPi);
      obj.elevation = obj_rng.uniform(-kPi / 4.0, kPi / 4.0);
      obj.view_index = heading_bin(obj.heading, nv);
      obj.feature = make_feature(seed, i, 1000 + j, obj.heading, obj.elevation,
                                 class_signature(obj.class_label, config.feature_dim),
                                 config.feature_dim);
      pano.objects.push_back(std::move(obj));
    }
  }
  return env;
}

std::vector<double> shortest_distances(const EnvGraph& env, int source) {
  const int n = static_cast<int>(env.nodes.size());
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  dist[source] = 0.0;
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  heap.push({0.0, source});
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    for (int v : env.adjacency[u]) {
      const double nd = d + env.edge_length(u, v);
      if (nd < dist[v]) {
        dist[v] = nd;
        heap.push({nd, v});
      }
    }
  }
  return dist;
}

std::vector<int> shortest_path(const EnvGraph& env, int source, int target) {
  const int n = static_cast<int>(env.nodes.size());
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<int> prev(n, -1);
  dist[source] = 0.0;
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  heap.push({0.0, source});
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    for (int v : env.adjacency[u]) {
      const double nd = d + env.edge_length(u, v);
      // Strict improvement, or an equal-length path through a smaller
      // predecessor: deterministic lexicographic tie-breaking.
      if (nd < dist[v] - 1e-12 || (std::abs(nd - dist[v]) <= 1e-12 && u < prev[v])) {
        dist[v] = nd;
        prev[v] = u;
        heap.push({nd, v});
      }
    }
  }
  if (!std::isfinite(dist[target])) return {};
  std::vector<int> path;
  for (int u = target; u != -1; u = prev[u]) path.push_back(u);
  std::reverse(path.begin(), path.end());
  return path;
}

Episode make_episode(const EnvGraph& env, uint64_t seed, InstructionStyle style) {
  const int n = static_cast<int>(env.nodes.size());
  Rng rng = Rng(seed).fork("episode", env.seed);
  Episode ep;
  ep.house_id = env.house_id;
  if (n == 1) {
    ep.start = 0;
    ep.goal_nodes = {0};
    ep.expert_path = {0};
  } else {
    // Redraw a few times to avoid degenerate zero-hop episodes and to
    // prefer goals that carry an object to ground.
    int start = 0, goal = 0;
    for (int attempt = 0; attempt < 32; ++attempt) {
      start = rng.uniform_int(n);
      goal = rng.uniform_int(n);
      if (goal != start && !env.node(goal).pano.objects.empty()) break;
    }
    if (goal == start) goal = (start + 1) % n;
    ep.start = start;
    ep.goal_nodes = {goal};
    ep.expert_path = shortest_path(env, start, goal);
    if (ep.expert_path.empty()) throw DataError("make_episode: goal unreachable from start");
  }
  const int goal = ep.goal_nodes.front();
  const auto& objects = env.node(goal).pano.objects;
  if (!objects.empty()) {
    ep.target_object.node = goal;
    ep.target_object.index = rng.uniform_int(static_cast<int>(objects.size()));
  }
  ep.instruction = synthesize_instruction(env, ep, style);
  return ep;
}

std::vector<int> synthesize_instruction(const EnvGraph& env, const Episode& episode,
                                        InstructionStyle style) {
  Vocabulary vocab{env.config.room_count, env.config.object_class_count};
  std::vector<int> tokens;
  const int goal = episode.goal_nodes.front();
  if (style == InstructionStyle::kGoalOriented) {
    tokens.push_back(Vocabulary::kGo);
    tokens.push_back(vocab.room_token(env.node(goal).room));
  } else {
    // One direction token per hop, quantized at 90 degrees from the change
    // in heading; the first hop is always FORWARD (the agent faces it).
    double prev_heading = 0.0;
    for (size_t i = 0; i + 1 < episode.expert_path.size(); ++i) {
      const double h =
          heading_of(env.node(episode.expert_path[i]).pos, env.node(episode.expert_path[i + 1]).pos);
      double rel = i == 0 ? 0.0 : h - prev_heading;
      rel = std::atan2(std::sin(rel), std::cos(rel));  // wrap to (-pi, pi]
      prev_heading = h;
      if (std::abs(rel) < kPi / 4.0)
        tokens.push_back(Vocabulary::kForward);
      else if (rel >= kPi / 4.0 && rel < 3.0 * kPi / 4.0)
        tokens.push_back(Vocabulary::kLeft);
      else if (rel <= -kPi / 4.0 && rel > -3.0 * kPi / 4.0)
        tokens.push_back(Vocabulary::kRight);
      else
        tokens.push_back(Vocabulary::kBack);
    }
  }
  if (episode.target_object.index >= 0) {
    tokens.push_back(Vocabulary::kFind);
    tokens.push_back(
        vocab.object_token(env.node(goal).pano.objects[episode.target_object.index].class_label));
  }
  tokens.push_back(Vocabulary::kEos);
  return tokens;
}

const EnvNode& observation(const EnvGraph& env, int node_id) { return env.node(node_id); }

std::vector<HouseData> build_dataset(uint64_t seed, const DatasetConfig& config) {
  if (config.houses < 1) throw DataError("build_dataset: houses must be >= 1");
  const int unseen = std::min(config.houses - 1,
                              std::max(0, static_cast<int>(std::lround(config.houses * config.unseen_ratio))));
  const int train = config.houses - unseen;
  std::vector<HouseData> out;
  Rng root(seed);
  int episode_id = 0;
  for (int h = 0; h < config.houses; ++h) {
    HouseData house;
    const uint64_t env_seed = root.fork("house", static_cast<uint64_t>(h)).next_u64();
    house.env = generate_environment(env_seed, config.env);
    house.env.house_id = h;
    house.house_split = h < train ? Split::kTrain : Split::kUnseen;
    auto add_eps = [&](Split split, int count, const char* stream) {
      Rng ep_rng = root.fork(stream, static_cast<uint64_t>(h));
      for (int e = 0; e < count; ++e) {
        Episode ep = make_episode(house.env, ep_rng.next_u64(), config.style);
        ep.id = episode_id++;
        ep.split = split;
        house.episodes.push_back(std::move(ep));
      }
    };
    if (house.house_split == Split::kTrain) {
      add_eps(Split::kTrain, config.train_episodes, "train-eps");
      add_eps(Split::kSeen, config.seen_episodes, "seen-eps");
    } else {
      add_eps(Split::kUnseen, config.unseen_episodes, "unseen-eps");
    }
    out.push_back(std::move(house));
  }
  return out;
}

// --- JSON serialization --------------------------------------------------

using nlohmann::json;

std::string house_to_json(const HouseData& house, const Vocabulary& vocab) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["house_id"] = house.env.house_id;
  j["seed"] = house.env.seed;
  j["split"] = split_name(house.house_split);
  const EnvConfig& c = house.env.config;
  j["config"] = {{"node_count", c.node_count},       {"mean_degree", c.mean_degree},
                 {"n_views", c.n_views},             {"m_objects", c.m_objects},
                 {"room_count", c.room_count},       {"object_class_count", c.object_class_count},
                 {"feature_dim", c.feature_dim}};
  json vocab_tokens = json::array();
  for (int t = 0; t < vocab.size(); ++t) vocab_tokens.push_back(vocab.token_name(t));
  j["vocabulary"] = {{"room_count", vocab.room_count},
                     {"object_class_count", vocab.object_class_count},
                     {"tokens", vocab_tokens}};
  json nodes = json::array();
  for (const EnvNode& n : house.env.nodes) {
    json jn;
    jn["id"] = n.id;
    jn["pos"] = {n.pos.x, n.pos.y, n.pos.z};
    jn["room"] = n.room;
    jn["view_headings"] = n.pano.view_headings;
    jn["view_elevations"] = n.pano.view_elevations;
    jn["view_rooms"] = n.pano.view_rooms;
    json feats = json::array();
    for (const auto& f : n.pano.view_features) feats.push_back(f);
    jn["view_features"] = feats;
    json objs = json::array();
    for (const SimObject& o : n.pano.objects) {
      objs.push_back({{"class", o.class_label},
                      {"heading", o.heading},
                      {"elevation", o.elevation},
                      {"view_index", o.view_index},
                      {"feature", o.feature}});
    }
    jn["objects"] = objs;
    json nav = json::object();
    for (const auto& [nb, view] : n.pano.navigable_views) nav[std::to_string(nb)] = view;
    jn["navigable_views"] = nav;
    nodes.push_back(std::move(jn));
  }
  j["nodes"] = nodes;
  json edges = json::array();
  for (const auto& [a, b] : house.env.edges) edges.push_back({a, b});
  j["edges"] = edges;
  json episodes = json::array();
  for (const Episode& e : house.episodes) {
    episodes.push_back({{"id", e.id},
                        {"split", split_name(e.split)},
                        {"instruction", e.instruction},
                        {"start", e.start},
                        {"goal_nodes", e.goal_nodes},
                        {"target_object", {{"node", e.target_object.node}, {"index", e.target_object.index}}},
                        {"expert_path", e.expert_path}});
  }
  j["episodes"] = episodes;
  return j.dump(2);
}

HouseData house_from_json(const std::string& text, Vocabulary* vocab_out) {
  json j = json::parse(text);
  if (!j.contains("schema_version") || j["schema_version"].get<int>() != kSchemaVersion)
    throw DataError("house file: unsupported schema version");
  HouseData house;
  EnvGraph& env = house.env;
  env.house_id = j["house_id"].get<int>();
  env.seed = j["seed"].get<uint64_t>();
  const json& c = j["config"];
  env.config = {c["node_count"].get<int>(),      c["mean_degree"].get<double>(),
                c["n_views"].get<int>(),         c["m_objects"].get<int>(),
                c["room_count"].get<int>(),      c["object_class_count"].get<int>(),
                c["feature_dim"].get<int>()};
  const std::string split = j["split"].get<std::string>();
  house.house_split = split == "unseen" ? Split::kUnseen : Split::kTrain;
  if (vocab_out != nullptr)
    *vocab_out = Vocabulary{j["vocabulary"]["room_count"].get<int>(),
                            j["vocabulary"]["object_class_count"].get<int>()};
  for (const json& jn : j["nodes"]) {
    EnvNode n;
    n.id = jn["id"].get<int>();
    n.pos = {jn["pos"][0].get<double>(), jn["pos"][1].get<double>(), jn["pos"][2].get<double>()};
    n.room = jn["room"].get<int>();
    n.pano.view_headings = jn["view_headings"].get<std::vector<double>>();
    n.pano.view_elevations = jn["view_elevations"].get<std::vector<double>>();
    n.pano.view_rooms = jn["view_rooms"].get<std::vector<int>>();
    for (const json& f : jn["view_features"])
      n.pano.view_features.push_back(f.get<std::vector<double>>());
    for (const json& jo : jn["objects"]) {
      SimObject o;
      o.class_label = jo["class"].get<int>();
      o.heading = jo["heading"].get<double>();
      o.elevation = jo["elevation"].get<double>();
      o.view_index = jo["view_index"].get<int>();
      o.feature = jo["feature"].get<std::vector<double>>();
      n.pano.objects.push_back(std::move(o));
    }
    for (auto it = jn["navigable_views"].begin(); it != jn["navigable_views"].end(); ++it)
      n.pano.navigable_views[std::stoi(it.key())] = it.value().get<int>();
    env.nodes.push_back(std::move(n));
  }
  std::sort(env.nodes.begin(), env.nodes.end(),
            [](const EnvNode& a, const EnvNode& b) { return a.id < b.id; });
  env.adjacency.assign(env.nodes.size(), {});
  for (const json& je : j["edges"]) {
    const int a = je[0].get<int>(), b = je[1].get<int>();
    env.edges.emplace_back(a, b);
    env.adjacency[a].push_back(b);
    env.adjacency[b].push_back(a);
  }
  for (auto& adj : env.adjacency) std::sort(adj.begin(), adj.end());
  for (const json& je : j["episodes"]) {
    Episode e;
    e.id = je["id"].get<int>();
    e.house_id = env.house_id;
    const std::string esplit = je["split"].get<std::string>();
    e.split = esplit == "unseen" ? Split::kUnseen : (esplit == "seen" ? Split::kSeen : Split::kTrain);
    e.instruction = je["instruction"].get<std::vector<int>>();
    e.start = je["start"].get<int>();
    e.goal_nodes = je["goal_nodes"].get<std::vector<int>>();
    e.target_object = {je["target_object"]["node"].get<int>(),
                       je["target_object"]["index"].get<int>()};
    e.expert_path = je["expert_path"].get<std::vector<int>>();
    house.episodes.push_back(std::move(e));
  }
  return house;
}

}  // namespace duet
