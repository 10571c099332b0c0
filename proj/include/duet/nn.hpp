#pragma once

#include <optional>
#include <string>

#include "duet/param_store.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Single-head attention parameters (projection matrices only, no biases).
struct AttnParams {
  Var wq, wk, wv;
};

// Core scaled dot-product attention: Softmax(Q Wq (K Wk)^T / sqrt(d)) K Wv.
// The optional bias matrix is added to the logits before the softmax; it
// must be square with side equal to the attended token count. Entries of the
// bias at or below the mask threshold knock the pair out entirely.
Var attention_core(Tape& tape, Var q_tokens, Var kv_tokens, const AttnParams& p,
                   std::optional<Var> bias = std::nullopt);

Var self_attention(Tape& tape, Var x, const AttnParams& p);
Var gasa_attention(Tape& tape, Var x, Var bias, const AttnParams& p);
Var cross_attention(Tape& tape, Var q_tokens, Var kv_tokens, const AttnParams& p);

// --- parameter-bound building blocks used by the encoders ---------------

struct Linear {
  std::string w, b;
  static Linear create(ParamStore& store, Rng& rng, const std::string& name, int in, int out);
  Var forward(Tape& tape, ParamStore& store, Var x) const;
};

struct LayerNormParams {
  std::string gamma, beta;
  static LayerNormParams create(ParamStore& store, const std::string& name, int dim);
  Var forward(Tape& tape, ParamStore& store, Var x) const;
};

// Multi-head attention with output projection and post-LN residual.
struct MultiHeadAttention {
  Linear q, k, v, o;
  LayerNormParams ln;
  int heads = 1;
  int dim = 0;
  static MultiHeadAttention create(ParamStore& store, Rng& rng, const std::string& name, int dim,
                                   int heads);
  // y = LN(q_in + MHA(q_in, kv_in)); bias (if any) is shared across heads.
  Var forward(Tape& tape, ParamStore& store, Var q_in, Var kv_in,
              std::optional<Var> bias = std::nullopt) const;
};

// Two-layer feed-forward with GELU, post-LN residual.
struct FeedForward {
  Linear fc1, fc2;
  LayerNormParams ln;
  static FeedForward create(ParamStore& store, Rng& rng, const std::string& name, int dim,
                            int hidden);
  Var forward(Tape& tape, ParamStore& store, Var x) const;
};

// Plain two-layer head (Eq. 5 style): W2 gelu(W1 x + b1) + b2, no residual.
struct TwoLayerHead {
  Linear fc1, fc2;
  static TwoLayerHead create(ParamStore& store, Rng& rng, const std::string& name, int in,
                             int hidden, int out);
  Var forward(Tape& tape, ParamStore& store, Var x) const;
};

}  // namespace duet
