#include "duet/nn.hpp"

#include <cmath>

namespace duet {

Var attention_core(Tape& tape, Var q_tokens, Var kv_tokens, const AttnParams& p,
                   std::optional<Var> bias) {
  const Tensor& tq = tape.val(q_tokens);
  const Tensor& tk = tape.val(kv_tokens);
  const Tensor& wq = tape.val(p.wq);
  const Tensor& wk = tape.val(p.wk);
  const Tensor& wv = tape.val(p.wv);
  if (tq.rank() != 2 || tq.rows() < 1) throw ShapeError("attention: queries must be a non-empty matrix");
  if (tq.cols() != wq.rows())
    throw ShapeError("attention: X cols " + std::to_string(tq.cols()) + " vs W_q rows " +
                     std::to_string(wq.rows()));
  if (tk.cols() != wk.rows())
    throw ShapeError("attention: KV cols " + std::to_string(tk.cols()) + " vs W_k rows " +
                     std::to_string(wk.rows()));
  if (tk.cols() != wv.rows())
    throw ShapeError("attention: KV cols " + std::to_string(tk.cols()) + " vs W_v rows " +
                     std::to_string(wv.rows()));
  if (wq.cols() != wk.cols())
    throw ShapeError("attention: W_q cols " + std::to_string(wq.cols()) + " vs W_k cols " +
                     std::to_string(wk.cols()));
  Var q = tape.matmul(q_tokens, p.wq);
  Var k = tape.matmul(kv_tokens, p.wk);
  Var v = tape.matmul(kv_tokens, p.wv);
  Var logits = tape.scale(tape.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(wq.cols())));
  if (bias.has_value()) {
    const Tensor& tb = tape.val(*bias);
    if (tb.rank() != 2 || tb.rows() != tb.cols() || tb.rows() != tape.val(logits).rows() ||
        tb.cols() != tape.val(logits).cols())
      throw ShapeError("attention bias: expected square " + tape.val(logits).shape_str() +
                       ", got " + tb.shape_str());
    logits = tape.add(logits, *bias);
  }
  Var attn = tape.softmax_rows(logits);
  return tape.matmul(attn, v);
}

Var self_attention(Tape& tape, Var x, const AttnParams& p) {
  return attention_core(tape, x, x, p, std::nullopt);
}

Var gasa_attention(Tape& tape, Var x, Var bias, const AttnParams& p) {
  return attention_core(tape, x, x, p, bias);
}

Var cross_attention(Tape& tape, Var q_tokens, Var kv_tokens, const AttnParams& p) {
  return attention_core(tape, q_tokens, kv_tokens, p, std::nullopt);
}

Linear Linear::create(ParamStore& store, Rng& rng, const std::string& name, int in, int out) {
  Linear l;
  l.w = name + ".w";
  l.b = name + ".b";
  store.add(l.w, ParamStore::xavier(rng, in, out));
  store.add(l.b, Tensor::zeros({out}));
  return l;
}

Var Linear::forward(Tape& tape, ParamStore& store, Var x) const {
  return tape.add_rowvec(tape.matmul(x, tape.param(store, w)), tape.param(store, b));
}

LayerNormParams LayerNormParams::create(ParamStore& store, const std::string& name, int dim) {
  LayerNormParams ln;
  ln.gamma = name + ".gamma";
  ln.beta = name + ".beta";
  Tensor ones = Tensor::zeros({dim});
  for (double& v : ones.data) v = 1.0;
  store.add(ln.gamma, std::move(ones));
  store.add(ln.beta, Tensor::zeros({dim}));
  return ln;
}

Var LayerNormParams::forward(Tape& tape, ParamStore& store, Var x) const {
  return tape.layer_norm(x, tape.param(store, gamma), tape.param(store, beta));
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, Rng& rng, const std::string& name,
                                              int dim, int heads) {
  if (dim % heads != 0)
    throw ShapeError("attention " + name + ": dim " + std::to_string(dim) +
                     " not divisible by heads " + std::to_string(heads));
  MultiHeadAttention m;
  m.q = Linear::create(store, rng, name + ".q", dim, dim);
  m.k = Linear::create(store, rng, name + ".k", dim, dim);
  m.v = Linear::create(store, rng, name + ".v", dim, dim);
  m.o = Linear::create(store, rng, name + ".o", dim, dim);
  m.ln = LayerNormParams::create(store, name + ".ln", dim);
  m.heads = heads;
  m.dim = dim;
  return m;
}

Var MultiHeadAttention::forward(Tape& tape, ParamStore& store, Var q_in, Var kv_in,
                                std::optional<Var> bias) const {
  const int dh = dim / heads;
  Var qp = q.forward(tape, store, q_in);
  Var kp = k.forward(tape, store, kv_in);
  Var vp = v.forward(tape, store, kv_in);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = tape.slice_cols(qp, h * dh, (h + 1) * dh);
    Var kh = tape.slice_cols(kp, h * dh, (h + 1) * dh);
    Var vh = tape.slice_cols(vp, h * dh, (h + 1) * dh);
    Var logits = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
    if (bias.has_value()) logits = tape.add(logits, *bias);
    head_outs.push_back(tape.matmul(tape.softmax_rows(logits), vh));
  }
  Var merged = heads == 1 ? head_outs[0] : tape.concat_cols(head_outs);
  Var proj = o.forward(tape, store, merged);
  return ln.forward(tape, store, tape.add(q_in, proj));
}

FeedForward FeedForward::create(ParamStore& store, Rng& rng, const std::string& name, int dim,
                                int hidden) {
  FeedForward f;
  f.fc1 = Linear::create(store, rng, name + ".fc1", dim, hidden);
  f.fc2 = Linear::create(store, rng, name + ".fc2", hidden, dim);
  f.ln = LayerNormParams::create(store, name + ".ln", dim);
  return f;
}

Var FeedForward::forward(Tape& tape, ParamStore& store, Var x) const {
  Var h = fc2.forward(tape, store, tape.gelu(fc1.forward(tape, store, x)));
  return ln.forward(tape, store, tape.add(x, h));
}

TwoLayerHead TwoLayerHead::create(ParamStore& store, Rng& rng, const std::string& name, int in,
                                  int hidden, int out) {
  TwoLayerHead h;
  h.fc1 = Linear::create(store, rng, name + ".fc1", in, hidden);
  h.fc2 = Linear::create(store, rng, name + ".fc2", hidden, out);
  return h;
}

Var TwoLayerHead::forward(Tape& tape, ParamStore& store, Var x) const {
  return fc2.forward(tape, store, tape.gelu(fc1.forward(tape, store, x)));
}

}  // namespace duet
