#pragma once

#include <optional>
#include <string>
#include <vector>

#include "duet/envsim.hpp"
#include "duet/nn.hpp"
#include "duet/param_store.hpp"
#include "duet/tensor.hpp"
#include "duet/topomap.hpp"

namespace duet {

enum class FusionMode { kDynamic, kAverage, kCoarseOnly, kFineOnly };
enum class DistanceUnits { kMeters, kHops };
enum class CoarseLayerOrder { kCrossFirst, kGasaFirst };

FusionMode fusion_from_string(const std::string& s);
std::string fusion_to_string(FusionMode m);

struct DuetConfig {
  int input_dim = 32;  // raw observation feature dim
  int d = 64;          // hidden size
  int text_layers = 2;
  int pano_layers = 1;
  int coarse_layers = 2;
  int fine_layers = 2;
  int heads = 4;
  int max_steps = 20;   // step-embedding table holds max_steps+1 entries
  int max_nodes = 64;
  int vocab = 34;
  int max_instr_len = 40;
  int ffn_mult = 4;
  int room_classes = 6;    // MRC view-label space
  int object_classes = 24; // MRC object-label space
  bool use_gasa = true;
  FusionMode fusion = FusionMode::kDynamic;
  DistanceUnits gasa_units = DistanceUnits::kMeters;
  CoarseLayerOrder coarse_order = CoarseLayerOrder::kCrossFirst;
  double dmax = 50.0;  // distance ceiling fed to the attention bias

  void validate() const;
  // Desk-scale defaults bound to a dataset's vocabulary and feature dim.
  static DuetConfig desk(const Vocabulary& vocab, const EnvConfig& env);
  // The full-size configuration (9/2/4/4 layers, d=768, 12 heads).
  static DuetConfig full_size(const Vocabulary& vocab, const EnvConfig& env);

  std::string to_json() const;
  static DuetConfig from_json(const std::string& text);
};

struct TextEncoding {
  Var tokens;  // [L, d] contextual word vectors
  int length = 0;
};

struct CoarseEncoding {
  Var node_stream;  // [K+1, d], row 0 is the stop node
  Var text_stream;  // [L, d]
  Var scores;       // [K+1], visited entries at the mask sentinel
  Var stop_embedding;  // v_hat_0, [d]
  std::vector<uint8_t> mask;       // 1 = masked (visited/current)
  std::vector<int> index_to_node;  // score position -> node id (-1 for stop)
};

struct FineEncoding {
  Var visual_stream;  // [1+n+m, d], row 0 is the stop token
  Var text_stream;    // [L, d]
  Var local_scores;   // [1+|N|], position 0 = stop
  Var object_logits;  // [m]; invalid when m == 0
  Var stop_embedding; // r_hat_0, [d]
  std::vector<int> local_to_node;  // local position -> node id (-1 for stop)
};

// Scores for one decision step, all over {stop} + map nodes in map order.
struct ActionScores {
  Var coarse;     // s^c (masked); invalid in fine-only mode
  Var converted;  // s^f' (masked); invalid in coarse-only mode
  Var sigma;      // gate; invalid in single-scale modes
  Var fused;      // final s
  std::vector<uint8_t> mask;       // union mask on fused
  std::vector<int> index_to_node;  // position -> node id (-1 for stop)
  std::optional<CoarseEncoding> coarse_enc;
  std::optional<FineEncoding> fine_enc;
};

class DuetModel {
 public:
  DuetModel(const DuetConfig& config, uint64_t init_seed);

  const DuetConfig& config() const { return config_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  TextEncoding encode_text(Tape& tape, const std::vector<int>& tokens) const;

  // Raw observation -> encoded panorama tokens plus the metadata the map
  // keeps. Optional feature override supports masked-region training.
  EncodedPanorama encode_panorama(Tape& tape, const EnvGraph& env, int node_id,
                                  const std::vector<std::vector<double>>* view_override = nullptr,
                                  const std::vector<std::vector<double>>* object_override = nullptr) const;

  CoarseEncoding coarse_forward(Tape& tape, const TopoMap& map, const TextEncoding& text) const;
  FineEncoding fine_forward(Tape& tape, const TextEncoding& text, const TopoMap& map) const;

  // Eq. 6 conversion of local scores into the global index space, followed
  // by the same visited-node masking as the coarse scores.
  Var convert_local_scores(Tape& tape, const FineEncoding& fine, const TopoMap& map) const;

  Var fusion_gate(Tape& tape, Var coarse_stop, Var fine_stop) const;

  static Var fuse(Tape& tape, Var coarse, Var converted, Var sigma, FusionMode mode,
                  const std::vector<uint8_t>& mask);

  // Full decision-step forward for the current map state.
  ActionScores step_scores(Tape& tape, const TopoMap& map, const TextEncoding& text,
                           FusionMode mode) const;
  ActionScores step_scores(Tape& tape, const TopoMap& map, const TextEncoding& text) const {
    return step_scores(tape, map, text, config_.fusion);
  }

  // Heads used by the auxiliary objectives.
  Var mlm_logits(Tape& tape, Var avg_word_embedding) const;   // [*, vocab]
  Var mrc_view_logits(Tape& tape, Var view_tokens) const;     // [*, room_classes]
  Var mrc_object_logits(Tape& tape, Var object_tokens) const; // [*, object_classes]

 private:
  struct CrossModalLayer {
    MultiHeadAttention cross_v, cross_w, self_v, self_w;
    FeedForward ffn_v, ffn_w;
  };

  Var input_type_row(Tape& tape, int type, int count) const;
  std::pair<Var, Var> run_cross_modal(Tape& tape, const std::vector<CrossModalLayer>& layers,
                                      Var visual, Var text, std::optional<Var> gasa_bias) const;

  DuetConfig config_;
  mutable ParamStore store_;

  // embeddings
  std::string tok_table_, pos_table_, type_table_, step_table_;
  LayerNormParams text_ln_{}, pano_ln_{}, coarse_ln_{}, fine_ln_{};
  Linear view_proj_, obj_proj_, ori_proj_;
  Linear coarse_loc_proj_, fine_rel_proj_, fine_abs_proj_;
  std::string coarse_stop_, fine_stop_;
  std::string gasa_we_, gasa_be_;

  struct EncoderLayer {
    MultiHeadAttention attn;
    FeedForward ffn;
  };
  std::vector<EncoderLayer> text_layers_, pano_layers_;
  std::vector<CrossModalLayer> coarse_layers_, fine_layers_;

  TwoLayerHead coarse_score_, fine_score_, object_score_, gate_;
  TwoLayerHead mlm_head_, mrc_view_head_, mrc_obj_head_;
};

}  // namespace duet
