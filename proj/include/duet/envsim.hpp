#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

double euclidean(const Vec3& a, const Vec3& b);
// Heading in [0, 2pi) measured counterclockwise from +x, elevation in
// [-pi/2, pi/2].
double heading_of(const Vec3& from, const Vec3& to);
double elevation_of(const Vec3& from, const Vec3& to);

struct SimObject {
  std::vector<double> feature;
  int class_label = 0;
  double heading = 0;
  double elevation = 0;
  int view_index = 0;
};

struct Panorama {
  std::vector<std::vector<double>> view_features;
  std::vector<double> view_headings;
  std::vector<double> view_elevations;
  std::vector<int> view_rooms;  // room label each view shows (semantic target)
  std::vector<SimObject> objects;
  std::map<int, int> navigable_views;  // neighbor node id -> view index
};

struct EnvNode {
  int id = 0;
  Vec3 pos;
  int room = 0;
  Panorama pano;
};

struct EnvConfig {
  int node_count = 20;
  double mean_degree = 3.5;
  int n_views = 8;
  int m_objects = 3;
  int room_count = 6;
  int object_class_count = 24;
  int feature_dim = 32;
};

struct EnvGraph {
  int house_id = 0;
  uint64_t seed = 0;
  EnvConfig config;
  std::vector<EnvNode> nodes;
  std::vector<std::pair<int, int>> edges;  // a < b
  std::vector<std::vector<int>> adjacency;  // sorted neighbor ids

  double edge_length(int a, int b) const;
  bool has_edge(int a, int b) const;
  const EnvNode& node(int id) const;
};

// Token vocabulary shared by all houses of a dataset. Fixed layout:
// control tokens first, then room tokens, then object class tokens.
struct Vocabulary {
  int room_count = 0;
  int object_class_count = 0;

  static constexpr int kPad = 0;
  static constexpr int kMaskTok = 1;
  static constexpr int kEos = 2;
  static constexpr int kGo = 3;
  static constexpr int kFind = 4;
  static constexpr int kForward = 5;
  static constexpr int kLeft = 6;
  static constexpr int kRight = 7;
  static constexpr int kBack = 8;
  static constexpr int kFirstRoom = 9;

  int size() const { return kFirstRoom + room_count + object_class_count; }
  int room_token(int room) const;
  int object_token(int cls) const;
  std::string token_name(int id) const;
  // Trivial parser: recovers (room,-1 if absent) and (class,-1 if absent).
  std::pair<int, int> parse(const std::vector<int>& tokens) const;
};

enum class InstructionStyle { kGoalOriented, kStepByStep };
enum class Split { kTrain, kSeen, kUnseen };

std::string split_name(Split s);

struct TargetObject {
  int node = -1;
  int index = -1;  // -1 when the environment has no objects
};

struct Episode {
  int id = 0;
  int house_id = 0;
  std::vector<int> instruction;
  int start = 0;
  std::vector<int> goal_nodes;
  TargetObject target_object;
  std::vector<int> expert_path;
  Split split = Split::kTrain;
};

// Ground-truth world generation. Deterministic in (seed, config).
EnvGraph generate_environment(uint64_t seed, const EnvConfig& config);

Episode make_episode(const EnvGraph& env, uint64_t seed, InstructionStyle style);

std::vector<int> synthesize_instruction(const EnvGraph& env, const Episode& episode,
                                        InstructionStyle style);

// Read-only panorama + coordinates access; throws DataError on unknown node.
const EnvNode& observation(const EnvGraph& env, int node_id);

// True-graph shortest paths (Dijkstra). Used for expert paths, the shortest
// path demonstrator and metric distances.
std::vector<double> shortest_distances(const EnvGraph& env, int source);
// Path with deterministic tie-breaking (prefers lexicographically smaller
// node sequences among equal-length paths). Empty if unreachable.
std::vector<int> shortest_path(const EnvGraph& env, int source, int target);

struct HouseData {
  EnvGraph env;
  std::vector<Episode> episodes;
  Split house_split = Split::kTrain;  // kTrain houses carry train+seen episodes
};

struct DatasetConfig {
  int houses = 50;
  double unseen_ratio = 0.2;
  int train_episodes = 8;
  int seen_episodes = 2;
  int unseen_episodes = 6;
  EnvConfig env;
  InstructionStyle style = InstructionStyle::kGoalOriented;
};

std::vector<HouseData> build_dataset(uint64_t seed, const DatasetConfig& config);

// JSON file formats (schema-versioned).
std::string house_to_json(const HouseData& house, const Vocabulary& vocab);
HouseData house_from_json(const std::string& text, Vocabulary* vocab_out = nullptr);

}  // namespace duet
