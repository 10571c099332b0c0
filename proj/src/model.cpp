#include "duet/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace duet {

namespace {

// Location features are kept O(1) at init: distances are in tens of meters
// and hop counts in single digits, so both get a fixed rescale before the
// learned projection.
constexpr double kDistScale = 0.1;
constexpr double kHopScale = 0.2;

std::vector<double> egocentric_feature(const Vec3& from, const Vec3& to, double dist_m,
                                       double hops) {
  if (euclidean(from, to) < 1e-12)
    return {0.0, 1.0, 0.0, 1.0, dist_m * kDistScale, hops * kHopScale};
  const double h = heading_of(from, to);
  const double e = elevation_of(from, to);
  return {std::sin(h), std::cos(h), std::sin(e), std::cos(e), dist_m * kDistScale,
          hops * kHopScale};
}

}  // namespace

FusionMode fusion_from_string(const std::string& s) {
  if (s == "dynamic") return FusionMode::kDynamic;
  if (s == "average") return FusionMode::kAverage;
  if (s == "coarse") return FusionMode::kCoarseOnly;
  if (s == "fine") return FusionMode::kFineOnly;
  throw DataError("unknown fusion mode: " + s);
}

std::string fusion_to_string(FusionMode m) {
  switch (m) {
    case FusionMode::kDynamic: return "dynamic";
    case FusionMode::kAverage: return "average";
    case FusionMode::kCoarseOnly: return "coarse";
    case FusionMode::kFineOnly: return "fine";
  }
  return "dynamic";
}

void DuetConfig::validate() const {
  if (d % heads != 0) throw DataError("model config: d must be divisible by heads");
  if (text_layers < 1 || pano_layers < 1 || coarse_layers < 1 || fine_layers < 1)
    throw DataError("model config: layer counts must be >= 1");
  if (vocab < 1 || vocab > 256) throw DataError("model config: vocab must be in [1,256]");
  if (input_dim < 4 || max_steps < 1 || max_nodes < 2 || max_instr_len < 1)
    throw DataError("model config: bad dimensions");
}

DuetConfig DuetConfig::desk(const Vocabulary& vocab, const EnvConfig& env) {
  DuetConfig c;
  c.input_dim = env.feature_dim;
  c.vocab = vocab.size();
  c.room_classes = env.room_count;
  c.object_classes = env.object_class_count;
  return c;
}

DuetConfig DuetConfig::full_size(const Vocabulary& vocab, const EnvConfig& env) {
  DuetConfig c = desk(vocab, env);
  c.d = 768;
  c.text_layers = 9;
  c.pano_layers = 2;
  c.coarse_layers = 4;
  c.fine_layers = 4;
  c.heads = 12;
  return c;
}

std::string DuetConfig::to_json() const {
  nlohmann::json j;
  j["input_dim"] = input_dim;
  j["d"] = d;
  j["text_layers"] = text_layers;
  j["pano_layers"] = pano_layers;
  j["coarse_layers"] = coarse_layers;
  j["fine_layers"] = fine_layers;
  j["heads"] = heads;
  j["max_steps"] = max_steps;
  j["max_nodes"] = max_nodes;
  j["vocab"] = vocab;
  j["max_instr_len"] = max_instr_len;
  j["ffn_mult"] = ffn_mult;
  j["room_classes"] = room_classes;
  j["object_classes"] = object_classes;
  j["use_gasa"] = use_gasa;
  j["fusion"] = fusion_to_string(fusion);
  j["gasa_units"] = gasa_units == DistanceUnits::kMeters ? "meters" : "hops";
  j["coarse_order"] = coarse_order == CoarseLayerOrder::kCrossFirst ? "cross_first" : "gasa_first";
  j["dmax"] = dmax;
  return j.dump(2);
}

DuetConfig DuetConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  DuetConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.d = j.value("d", c.d);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.pano_layers = j.value("pano_layers", c.pano_layers);
  c.coarse_layers = j.value("coarse_layers", c.coarse_layers);
  c.fine_layers = j.value("fine_layers", c.fine_layers);
  c.heads = j.value("heads", c.heads);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.max_nodes = j.value("max_nodes", c.max_nodes);
  c.vocab = j.value("vocab", c.vocab);
  c.max_instr_len = j.value("max_instr_len", c.max_instr_len);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.room_classes = j.value("room_classes", c.room_classes);
  c.object_classes = j.value("object_classes", c.object_classes);
  c.use_gasa = j.value("use_gasa", c.use_gasa);
  if (j.contains("fusion")) c.fusion = fusion_from_string(j["fusion"].get<std::string>());
  if (j.contains("gasa_units"))
    c.gasa_units = j["gasa_units"].get<std::string>() == "hops" ? DistanceUnits::kHops
                                                                : DistanceUnits::kMeters;
  if (j.contains("coarse_order"))
    c.coarse_order = j["coarse_order"].get<std::string>() == "gasa_first"
                         ? CoarseLayerOrder::kGasaFirst
                         : CoarseLayerOrder::kCrossFirst;
  c.dmax = j.value("dmax", c.dmax);
  c.validate();
  return c;
}

DuetModel::DuetModel(const DuetConfig& config, uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng = Rng(init_seed).fork("model-init");
  const int d = config_.d;
  const int hidden = d * config_.ffn_mult;

  tok_table_ = "embed.token";
  pos_table_ = "embed.position";
  type_table_ = "embed.type";
  step_table_ = "embed.step";
  store_.add(tok_table_, ParamStore::normal_init(rng, {config_.vocab, d}, 0.02));
  store_.add(pos_table_, ParamStore::normal_init(rng, {config_.max_instr_len, d}, 0.02));
  store_.add(type_table_, ParamStore::normal_init(rng, {3, d}, 0.02));
  store_.add(step_table_, ParamStore::normal_init(rng, {config_.max_steps + 1, d}, 0.02));

  text_ln_ = LayerNormParams::create(store_, "text.input_ln", d);
  pano_ln_ = LayerNormParams::create(store_, "pano.input_ln", d);
  coarse_ln_ = LayerNormParams::create(store_, "coarse.input_ln", d);
  fine_ln_ = LayerNormParams::create(store_, "fine.input_ln", d);

  view_proj_ = Linear::create(store_, rng, "pano.view_proj", config_.input_dim, d);
  obj_proj_ = Linear::create(store_, rng, "pano.object_proj", config_.input_dim, d);
  ori_proj_ = Linear::create(store_, rng, "pano.orientation_proj", 4, d);
  coarse_loc_proj_ = Linear::create(store_, rng, "coarse.location_proj", 6, d);
  fine_rel_proj_ = Linear::create(store_, rng, "fine.relative_proj", 6, d);
  fine_abs_proj_ = Linear::create(store_, rng, "fine.absolute_proj", 3, d);

  coarse_stop_ = "coarse.stop_token";
  fine_stop_ = "fine.stop_token";
  store_.add(coarse_stop_, ParamStore::normal_init(rng, {1, d}, 0.02));
  store_.add(fine_stop_, ParamStore::normal_init(rng, {1, d}, 0.02));

  gasa_we_ = "coarse.gasa.we";
  gasa_be_ = "coarse.gasa.be";
  store_.add(gasa_we_, Tensor::zeros({1}));
  store_.add(gasa_be_, Tensor::zeros({1}));

  auto make_encoder = [&](const std::string& prefix, int count, std::vector<EncoderLayer>& out) {
    for (int i = 0; i < count; ++i) {
      const std::string base = prefix + ".layer" + std::to_string(i);
      out.push_back({MultiHeadAttention::create(store_, rng, base + ".attn", d, config_.heads),
                     FeedForward::create(store_, rng, base + ".ffn", d, hidden)});
    }
  };
  make_encoder("text", config_.text_layers, text_layers_);
  make_encoder("pano", config_.pano_layers, pano_layers_);

  auto make_cross_modal = [&](const std::string& prefix, int count,
                              std::vector<CrossModalLayer>& out) {
    for (int i = 0; i < count; ++i) {
      const std::string base = prefix + ".layer" + std::to_string(i);
      CrossModalLayer layer{
          MultiHeadAttention::create(store_, rng, base + ".cross_v", d, config_.heads),
          MultiHeadAttention::create(store_, rng, base + ".cross_w", d, config_.heads),
          MultiHeadAttention::create(store_, rng, base + ".self_v", d, config_.heads),
          MultiHeadAttention::create(store_, rng, base + ".self_w", d, config_.heads),
          FeedForward::create(store_, rng, base + ".ffn_v", d, hidden),
          FeedForward::create(store_, rng, base + ".ffn_w", d, hidden)};
      out.push_back(std::move(layer));
    }
  };
  make_cross_modal("coarse", config_.coarse_layers, coarse_layers_);
  make_cross_modal("fine", config_.fine_layers, fine_layers_);

  coarse_score_ = TwoLayerHead::create(store_, rng, "coarse.score", d, d, 1);
  fine_score_ = TwoLayerHead::create(store_, rng, "fine.score", d, d, 1);
  object_score_ = TwoLayerHead::create(store_, rng, "fine.object_score", d, d, 1);
  gate_ = TwoLayerHead::create(store_, rng, "fusion.gate", 2 * d, d, 1);
  mlm_head_ = TwoLayerHead::create(store_, rng, "mlm.head", d, d, config_.vocab);
  mrc_view_head_ = TwoLayerHead::create(store_, rng, "mrc.view_head", d, d, config_.room_classes);
  mrc_obj_head_ = TwoLayerHead::create(store_, rng, "mrc.object_head", d, d, config_.object_classes);
}

Var DuetModel::input_type_row(Tape& tape, int type, int count) const {
  return tape.embedding(tape.param(store_, type_table_), std::vector<int>(count, type));
}

TextEncoding DuetModel::encode_text(Tape& tape, const std::vector<int>& tokens) const {
  const int L = static_cast<int>(tokens.size());
  if (L < 1) throw DataError("encode_text: empty instruction");
  if (L > config_.max_instr_len)
    throw DataError("encode_text: instruction longer than max_instr_len");
  for (int t : tokens)
    if (t < 0 || t >= config_.vocab)
      throw DataError("encode_text: token id " + std::to_string(t) + " out of vocabulary");
  std::vector<int> positions(L);
  for (int i = 0; i < L; ++i) positions[i] = i;
  Var x = tape.embedding(tape.param(store_, tok_table_), tokens);
  x = tape.add(x, tape.embedding(tape.param(store_, pos_table_), positions));
  x = tape.add(x, input_type_row(tape, 0, L));
  x = text_ln_.forward(tape, store_, x);
  for (const EncoderLayer& layer : text_layers_) {
    x = layer.attn.forward(tape, store_, x, x);
    x = layer.ffn.forward(tape, store_, x);
  }
  return {x, L};
}

EncodedPanorama DuetModel::encode_panorama(
    Tape& tape, const EnvGraph& env, int node_id,
    const std::vector<std::vector<double>>* view_override,
    const std::vector<std::vector<double>>* object_override) const {
  const EnvNode& node = observation(env, node_id);
  const auto& views = view_override != nullptr ? *view_override : node.pano.view_features;
  const int n = static_cast<int>(views.size());
  const int m = static_cast<int>(node.pano.objects.size());
  if (n < 1) throw DataError("encode_panorama: need at least one view");

  Tensor raw_views = Tensor::zeros({n, config_.input_dim});
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(views[i].size()) != config_.input_dim)
      throw ShapeError("encode_panorama: view feature dim " + std::to_string(views[i].size()) +
                       " != input_dim " + std::to_string(config_.input_dim));
    std::copy(views[i].begin(), views[i].end(), raw_views.data.begin() + static_cast<size_t>(i) * config_.input_dim);
  }
  Tensor orient = Tensor::zeros({n + m, 4});
  for (int i = 0; i < n; ++i) {
    orient.at(i, 0) = std::sin(node.pano.view_headings[i]);
    orient.at(i, 1) = std::cos(node.pano.view_headings[i]);
    orient.at(i, 2) = std::sin(node.pano.view_elevations[i]);
    orient.at(i, 3) = std::cos(node.pano.view_elevations[i]);
  }
  Var view_tokens = view_proj_.forward(tape, store_, tape.constant(std::move(raw_views)));
  view_tokens = tape.add(view_tokens, input_type_row(tape, 1, n));

  Var tokens = view_tokens;
  if (m > 0) {
    Tensor raw_objs = Tensor::zeros({m, config_.input_dim});
    for (int j = 0; j < m; ++j) {
      const auto& feat = object_override != nullptr ? (*object_override)[j]
                                                    : node.pano.objects[j].feature;
      if (static_cast<int>(feat.size()) != config_.input_dim)
        throw ShapeError("encode_panorama: object feature dim mismatch");
      std::copy(feat.begin(), feat.end(), raw_objs.data.begin() + static_cast<size_t>(j) * config_.input_dim);
      orient.at(n + j, 0) = std::sin(node.pano.objects[j].heading);
      orient.at(n + j, 1) = std::cos(node.pano.objects[j].heading);
      orient.at(n + j, 2) = std::sin(node.pano.objects[j].elevation);
      orient.at(n + j, 3) = std::cos(node.pano.objects[j].elevation);
    }
    Var obj_tokens = obj_proj_.forward(tape, store_, tape.constant(std::move(raw_objs)));
    obj_tokens = tape.add(obj_tokens, input_type_row(tape, 2, m));
    tokens = tape.concat_rows({view_tokens, obj_tokens});
  }
  tokens = tape.add(tokens, ori_proj_.forward(tape, store_, tape.constant(std::move(orient))));
  tokens = pano_ln_.forward(tape, store_, tokens);
  for (const EncoderLayer& layer : pano_layers_) {
    tokens = layer.attn.forward(tape, store_, tokens, tokens);
    tokens = layer.ffn.forward(tape, store_, tokens);
  }

  EncodedPanorama out;
  out.node_id = node_id;
  out.coords = node.pos;
  out.views = tape.slice_rows(tokens, 0, n);
  if (m > 0) out.objects = tape.slice_rows(tokens, n, n + m);
  out.view_headings = node.pano.view_headings;
  out.view_elevations = node.pano.view_elevations;
  out.navigable_views = node.pano.navigable_views;
  for (const auto& [nb, view] : node.pano.navigable_views)
    out.neighbor_coords[nb] = env.node(nb).pos;
  return out;
}

std::pair<Var, Var> DuetModel::run_cross_modal(Tape& tape,
                                               const std::vector<CrossModalLayer>& layers,
                                               Var visual, Var text,
                                               std::optional<Var> gasa_bias) const {
  const bool gasa_first = config_.coarse_order == CoarseLayerOrder::kGasaFirst;
  for (const CrossModalLayer& layer : layers) {
    if (gasa_first && gasa_bias.has_value()) {
      Var v0 = layer.self_v.forward(tape, store_, visual, visual, gasa_bias);
      Var w0 = layer.self_w.forward(tape, store_, text, text);
      Var v1 = layer.cross_v.forward(tape, store_, v0, w0);
      Var w1 = layer.cross_w.forward(tape, store_, w0, v0);
      visual = layer.ffn_v.forward(tape, store_, v1);
      text = layer.ffn_w.forward(tape, store_, w1);
      continue;
    }
    // Parallel two-stream update: both cross-attentions read the layer's
    // input streams.
    Var v1 = layer.cross_v.forward(tape, store_, visual, text);
    Var w1 = layer.cross_w.forward(tape, store_, text, visual);
    Var v2 = layer.self_v.forward(tape, store_, v1, v1, gasa_bias);
    Var w2 = layer.self_w.forward(tape, store_, w1, w1);
    visual = layer.ffn_v.forward(tape, store_, v2);
    text = layer.ffn_w.forward(tape, store_, w2);
  }
  return {visual, text};
}

CoarseEncoding DuetModel::coarse_forward(Tape& tape, const TopoMap& map,
                                         const TextEncoding& text) const {
  if (map.empty()) throw DataError("coarse_forward: empty map");
  const int k = map.size();
  if (k > config_.max_nodes) throw DataError("coarse_forward: map exceeds max_nodes");
  const bool hops_units = config_.gasa_units == DistanceUnits::kHops;
  const TopoMap::Routing& metric = map.floyd_all_pairs(false);
  const TopoMap::Routing& hopr = map.floyd_all_pairs(true);
  const int cur_pos = map.position_of(map.current());
  const Vec3 cur = map.record(map.current()).coords;

  // Node inputs: pooled rep + egocentric location + navigation step.
  std::vector<Var> reps;
  Tensor loc = Tensor::zeros({k, 6});
  std::vector<int> step_ids(k);
  std::vector<uint8_t> mask(k + 1, 0);
  std::vector<int> index_to_node(k + 1, -1);
  for (int i = 0; i < k; ++i) {
    const int node_id = map.order()[i];
    const NodeRecord& rec = map.record(node_id);
    reps.push_back(rec.rep);
    const double dist = metric.at(cur_pos, i);
    const double hops = hopr.at(cur_pos, i);
    const auto feat = egocentric_feature(cur, rec.coords, std::isfinite(dist) ? dist : config_.dmax,
                                         std::isfinite(hops) ? hops : config_.max_steps);
    for (int j = 0; j < 6; ++j) loc.at(i, j) = feat[j];
    step_ids[i] = std::min(rec.last_visit_step, config_.max_steps);
    index_to_node[i + 1] = node_id;
    if (rec.status != NodeStatus::kNavigable) mask[i + 1] = 1;
  }
  Var node_in = tape.concat_rows(reps);  // [k, d]
  node_in = tape.add(node_in, coarse_loc_proj_.forward(tape, store_, tape.constant(std::move(loc))));
  node_in = tape.add(node_in, tape.embedding(tape.param(store_, step_table_), step_ids));
  Var stop_in = tape.param(store_, coarse_stop_);
  Var stream = tape.concat_rows({stop_in, node_in});  // [k+1, d]
  stream = coarse_ln_.forward(tape, store_, stream);

  std::optional<Var> bias;
  if (config_.use_gasa) {
    Var e = tape.constant(map.distance_matrix(hops_units, config_.dmax));
    bias = tape.add_scalar_var(tape.mul_scalar_var(e, tape.param(store_, gasa_we_)),
                               tape.param(store_, gasa_be_));
  }
  auto [nodes_out, text_out] = run_cross_modal(tape, coarse_layers_, stream, text.tokens, bias);

  Var raw_scores = tape.flatten(coarse_score_.forward(tape, store_, nodes_out));
  std::vector<Tape::ComposeSlot> slots;
  for (int i = 0; i < k + 1; ++i)
    slots.push_back(mask[i] ? Tape::ComposeSlot::mask() : Tape::ComposeSlot::copy(i));
  Var scores = tape.compose_scores(raw_scores, Var{}, slots);

  CoarseEncoding out;
  out.node_stream = nodes_out;
  out.text_stream = text_out;
  out.scores = scores;
  out.stop_embedding = tape.mean_rows(tape.slice_rows(nodes_out, 0, 1));
  out.mask = std::move(mask);
  out.index_to_node = std::move(index_to_node);
  return out;
}

FineEncoding DuetModel::fine_forward(Tape& tape, const TextEncoding& text,
                                     const TopoMap& map) const {
  const EncodedPanorama& pano = map.fine_cache();
  const int n = tape.val(pano.views).rows();
  const int m = pano.objects.valid() ? tape.val(pano.objects).rows() : 0;
  const Vec3 cur = pano.coords;
  const Vec3 start = map.record(map.start_node()).coords;

  Var tokens = pano.objects.valid()
                   ? tape.concat_rows({tape.param(store_, fine_stop_), pano.views, pano.objects})
                   : tape.concat_rows({tape.param(store_, fine_stop_), pano.views});

  // Absolute location of the current node relative to the start node.
  Tensor abs_feat = Tensor::zeros({1, 3});
  abs_feat.at(0, 0) = (cur.x - start.x) * kDistScale;
  abs_feat.at(0, 1) = (cur.y - start.y) * kDistScale;
  abs_feat.at(0, 2) = cur.z > 1.5 ? 1.0 : 0.0;
  Var abs_emb = fine_abs_proj_.forward(tape, store_, tape.constant(std::move(abs_feat)));
  tokens = tape.add_rowvec(tokens, tape.flatten(abs_emb));

  // Relative position of each neighboring node, added on its view token.
  Tensor rel = Tensor::zeros({1 + n + m, 6});
  std::vector<uint8_t> rel_set(static_cast<size_t>(n), 0);
  std::vector<int> local_to_node{-1};
  std::vector<int> local_rows{0};
  for (const auto& [nb, view_row] : pano.navigable_views) {
    if (view_row < 0 || view_row >= n)
      throw DataError("fine_forward: navigable view index out of range");
    local_to_node.push_back(nb);
    local_rows.push_back(1 + view_row);
    if (rel_set[view_row]) continue;  // shared view: first neighbor keeps the slot
    rel_set[view_row] = 1;
    const Vec3 nb_pos = pano.neighbor_coords.at(nb);
    const auto feat = egocentric_feature(cur, nb_pos, euclidean(cur, nb_pos), 1.0);
    for (int j = 0; j < 6; ++j) rel.at(1 + view_row, j) = feat[j];
  }
  tokens = tape.add(tokens, fine_rel_proj_.forward(tape, store_, tape.constant(std::move(rel))));
  tokens = fine_ln_.forward(tape, store_, tokens);

  auto [visual_out, text_out] = run_cross_modal(tape, fine_layers_, tokens, text.tokens, std::nullopt);

  Var token_scores = tape.flatten(fine_score_.forward(tape, store_, visual_out));
  Var local_scores = tape.gather(token_scores, local_rows);

  FineEncoding out;
  out.visual_stream = visual_out;
  out.text_stream = text_out;
  out.local_scores = local_scores;
  out.local_to_node = std::move(local_to_node);
  out.stop_embedding = tape.mean_rows(tape.slice_rows(visual_out, 0, 1));
  if (m > 0) {
    Var obj_tokens = tape.slice_rows(visual_out, 1 + n, 1 + n + m);
    out.object_logits = tape.flatten(object_score_.forward(tape, store_, obj_tokens));
  }
  return out;
}

Var DuetModel::convert_local_scores(Tape& tape, const FineEncoding& fine,
                                    const TopoMap& map) const {
  const int k = map.size();
  // Local position of every neighbor, and the visited subset for s_back.
  std::map<int, int> local_pos;
  for (size_t i = 1; i < fine.local_to_node.size(); ++i)
    local_pos[fine.local_to_node[i]] = static_cast<int>(i);
  std::vector<int> visited_neighbor_pos;
  for (const auto& [nb, lp] : local_pos) {
    if (map.contains(nb) && map.record(nb).status == NodeStatus::kVisited)
      visited_neighbor_pos.push_back(lp);
  }
  Var back;
  if (!visited_neighbor_pos.empty())
    back = tape.sum_selected(fine.local_scores, visited_neighbor_pos);

  std::vector<Tape::ComposeSlot> slots;
  slots.push_back(Tape::ComposeSlot::copy(0));  // stop keeps its local score
  for (int i = 0; i < k; ++i) {
    const int node_id = map.order()[i];
    const NodeRecord& rec = map.record(node_id);
    if (rec.status != NodeStatus::kNavigable) {
      slots.push_back(Tape::ComposeSlot::mask());  // visited: masked like s^c
    } else if (auto it = local_pos.find(node_id); it != local_pos.end()) {
      slots.push_back(Tape::ComposeSlot::copy(it->second));
    } else {
      // Reachable only by backtracking through a visited neighbor; without
      // one the action is ill-defined and stays masked.
      slots.push_back(back.valid() ? Tape::ComposeSlot::fill() : Tape::ComposeSlot::mask());
    }
  }
  return tape.compose_scores(fine.local_scores, back, slots);
}

Var DuetModel::fusion_gate(Tape& tape, Var coarse_stop, Var fine_stop) const {
  Var joined = tape.concat_cols({coarse_stop, fine_stop});
  return tape.sigmoid(tape.flatten(gate_.forward(tape, store_, joined)));
}

Var DuetModel::fuse(Tape& tape, Var coarse, Var converted, Var sigma, FusionMode mode,
                    const std::vector<uint8_t>& mask) {
  switch (mode) {
    case FusionMode::kDynamic:
      return tape.fuse_scores(coarse, converted, sigma, mask);
    case FusionMode::kAverage:
      return tape.fuse_scores(coarse, converted, tape.constant(Tensor::scalar(0.5)), mask);
    case FusionMode::kCoarseOnly:
      return coarse;
    case FusionMode::kFineOnly:
      return converted;
  }
  throw DataError("fuse: bad mode");
}

ActionScores DuetModel::step_scores(Tape& tape, const TopoMap& map, const TextEncoding& text,
                                    FusionMode mode) const {
  ActionScores out;
  const int k = map.size();
  out.index_to_node.assign(k + 1, -1);
  for (int i = 0; i < k; ++i) out.index_to_node[i + 1] = map.order()[i];

  if (mode != FusionMode::kFineOnly) {
    out.coarse_enc = coarse_forward(tape, map, text);
    out.coarse = out.coarse_enc->scores;
  }
  if (mode != FusionMode::kCoarseOnly) {
    out.fine_enc = fine_forward(tape, text, map);
    out.converted = convert_local_scores(tape, *out.fine_enc, map);
  }

  // Union mask: a sentinel in either operand masks the fused entry.
  out.mask.assign(k + 1, 0);
  for (int i = 0; i < k + 1; ++i) {
    if (out.coarse.valid() && is_masked_value(tape.val(out.coarse).data[i])) out.mask[i] = 1;
    if (out.converted.valid() && is_masked_value(tape.val(out.converted).data[i])) out.mask[i] = 1;
  }

  switch (mode) {
    case FusionMode::kCoarseOnly:
      out.fused = out.coarse;
      break;
    case FusionMode::kFineOnly:
      out.fused = out.converted;
      break;
    case FusionMode::kAverage:
    case FusionMode::kDynamic:
      out.sigma = fusion_gate(tape, out.coarse_enc->stop_embedding, out.fine_enc->stop_embedding);
      out.fused = fuse(tape, out.coarse, out.converted, out.sigma, mode, out.mask);
      break;
  }
  return out;
}

Var DuetModel::mlm_logits(Tape& tape, Var avg_word_embedding) const {
  return mlm_head_.forward(tape, store_, avg_word_embedding);
}

Var DuetModel::mrc_view_logits(Tape& tape, Var view_tokens) const {
  return mrc_view_head_.forward(tape, store_, view_tokens);
}

Var DuetModel::mrc_object_logits(Tape& tape, Var object_tokens) const {
  return mrc_obj_head_.forward(tape, store_, object_tokens);
}

}  // namespace duet
